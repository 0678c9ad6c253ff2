use super::{Tensor, TensorError};

pub fn relu(input: &Tensor) -> Tensor {
    let mut out = input.clone();
    relu_in_place(&mut out);
    out
}

pub fn relu_in_place(t: &mut Tensor) {
    t.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Gradient of relu given its output (or input; both are positive at the
/// same positions). The derivative at 0 is taken as 0.
pub fn relu_backward(activation: &Tensor, grad_out: &Tensor) -> Result<Tensor, TensorError> {
    if activation.dims() != grad_out.dims() {
        return Err(TensorError::ShapeMismatch {
            expected: activation.dims().to_vec(),
            actual: grad_out.dims().to_vec(),
        });
    }
    let data = activation
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&a, &g)| if a > 0.0 { g } else { 0.0 })
        .collect();
    Ok(Tensor::from_parts_unchecked(activation.dims().to_vec(), data))
}

fn plane_means(data: &[f32], plane: usize) -> Vec<f32> {
    data.chunks(plane)
        .map(|p| (p.iter().map(|&v| v as f64).sum::<f64>() / plane as f64) as f32)
        .collect()
}

/// Mean of each channel's spatial plane of a `(C, H, W)` tensor.
pub fn global_avg_pool(input: &Tensor) -> Result<Vec<f32>, TensorError> {
    if input.rank() != 3 {
        return Err(TensorError::Rank {
            expected: "3".into(),
            actual: input.rank(),
        });
    }
    let (_, h, w) = input.chw()?;
    Ok(plane_means(input.data(), h * w))
}

/// Per-image channel means of a `(N, C, H, W)` or `(C, H, W)` tensor.
pub fn global_avg_pool_batch(input: &Tensor) -> Result<Vec<Vec<f32>>, TensorError> {
    let (_, h, w) = input.chw()?;
    Ok((0..input.batch_len())
        .map(|n| plane_means(input.image(n), h * w))
        .collect())
}

/// Spreads per-channel gradients evenly over `h × w` planes. `grads` holds one
/// vector per image; a single vector yields a rank-3 tensor.
pub fn global_avg_pool_backward(
    grads: &[Vec<f32>],
    h: usize,
    w: usize,
) -> Result<Tensor, TensorError> {
    let c = grads.first().map(Vec::len).ok_or(TensorError::EmptyVector)?;
    if c == 0 {
        return Err(TensorError::EmptyVector);
    }
    let scale = 1.0 / (h * w) as f32;
    let mut data = Vec::with_capacity(grads.len() * c * h * w);
    for g in grads {
        if g.len() != c {
            return Err(TensorError::VectorLength {
                expected: c,
                actual: g.len(),
            });
        }
        for &v in g {
            data.extend(std::iter::repeat_n(v * scale, h * w));
        }
    }
    let dims = if grads.len() == 1 {
        vec![c, h, w]
    } else {
        vec![grads.len(), c, h, w]
    };
    Tensor::new(dims, data)
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f32]) -> Result<Vec<f32>, TensorError> {
    if logits.is_empty() {
        return Err(TensorError::EmptyVector);
    }
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f64> = logits.iter().map(|&z| ((z - max) as f64).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.iter().map(|e| (e / total) as f32).collect())
}

/// Vector-Jacobian product of softmax: `p ⊙ (g − ⟨g, p⟩)`.
pub fn softmax_backward(probs: &[f32], grad_out: &[f32]) -> Result<Vec<f32>, TensorError> {
    if probs.is_empty() {
        return Err(TensorError::EmptyVector);
    }
    if probs.len() != grad_out.len() {
        return Err(TensorError::VectorLength {
            expected: probs.len(),
            actual: grad_out.len(),
        });
    }
    let dot: f64 = probs.iter().zip(grad_out).map(|(&p, &g)| p as f64 * g as f64).sum();
    Ok(probs
        .iter()
        .zip(grad_out)
        .map(|(&p, &g)| (p as f64 * (g as f64 - dot)) as f32)
        .collect())
}
