use super::TensorError;

/// Probabilities are clamped to this floor before taking the log.
pub const PROB_FLOOR: f32 = 1e-12;

/// `−Σ target·ln(max(pred, 1e-12))`.
pub fn categorical_cross_entropy(pred: &[f32], target: &[f32]) -> Result<f32, TensorError> {
    check(pred, target)?;
    let loss: f64 = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| -(t as f64) * (p.max(PROB_FLOOR) as f64).ln())
        .sum();
    Ok(loss as f32)
}

/// Gradient of softmax followed by cross entropy with respect to the logits:
/// `pred − target`.
pub fn softmax_cross_entropy_grad(pred: &[f32], target: &[f32]) -> Result<Vec<f32>, TensorError> {
    check(pred, target)?;
    Ok(pred.iter().zip(target).map(|(p, t)| p - t).collect())
}

fn check(pred: &[f32], target: &[f32]) -> Result<(), TensorError> {
    if pred.is_empty() {
        return Err(TensorError::EmptyVector);
    }
    if pred.len() != target.len() {
        return Err(TensorError::VectorLength {
            expected: pred.len(),
            actual: target.len(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::softmax;

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let l = categorical_cross_entropy(&[1.0, 0.0], &[1.0, 0.0]).unwrap();
        assert!(l.abs() <= 1e-11);
    }

    #[test]
    fn uniform_prediction_costs_ln2() {
        let l = categorical_cross_entropy(&[0.5, 0.5], &[1.0, 0.0]).unwrap();
        assert!((l - std::f32::consts::LN_2).abs() < 1e-7);
    }

    #[test]
    fn logit_gradient() {
        let p = softmax(&[0.0, 3f32.ln()]).unwrap();
        let g = softmax_cross_entropy_grad(&p, &[1.0, 0.0]).unwrap();
        assert!((g[0] + 0.75).abs() < 1e-6 && (g[1] - 0.75).abs() < 1e-6);
    }

    #[test]
    fn clamps_zero_probability() {
        let l = categorical_cross_entropy(&[0.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((l - 1e-12f32.ln().abs()).abs() < 1e-3);
    }

    #[test]
    fn rejects_length_mismatch() {
        assert!(matches!(
            categorical_cross_entropy(&[0.5, 0.5], &[1.0]),
            Err(TensorError::VectorLength { .. })
        ));
        assert!(softmax_cross_entropy_grad(&[1.0], &[1.0, 0.0]).is_err());
    }
}
