use serde::{Deserialize, Serialize};

use super::TrainError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one buffer per parameter array.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    /// Number of completed steps.
    pub t: u64,
}

impl AdamState {
    pub fn new(lens: &[usize]) -> Self {
        Self {
            m: lens.iter().map(|&n| vec![0.0; n]).collect(),
            v: lens.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of every array in `params`.
pub fn adam_step(
    params: &mut [&mut [f32]],
    grads: &[&[f32]],
    state: &mut AdamState,
    hp: &AdamParams,
) -> Result<(), TrainError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(TrainError::ShapeMismatch(format!(
            "{} parameter arrays, {} gradients, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || p.len() != state.m[i].len() {
            return Err(TrainError::ShapeMismatch(format!(
                "array {i}: {} parameters, {} gradients, {} moments",
                p.len(),
                g.len(),
                state.m[i].len()
            )));
        }
    }
    state.t += 1;
    let (b1, b2) = (hp.beta1 as f64, hp.beta2 as f64);
    let c1 = 1.0 - b1.powf(state.t as f64);
    let c2 = 1.0 - b2.powf(state.t as f64);
    let (lr, eps) = (hp.learning_rate as f64, hp.eps as f64);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for (((theta, &gi), mi), vi) in p.iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
            let gi = gi as f64;
            let m_new = b1 * *mi as f64 + (1.0 - b1) * gi;
            let v_new = b2 * *vi as f64 + (1.0 - b2) * gi * gi;
            *mi = m_new as f32;
            *vi = v_new as f32;
            let step = lr * (m_new / c1) / ((v_new / c2).sqrt() + eps);
            *theta = (*theta as f64 - step) as f32;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step(theta: f32, g: f32) -> (f32, AdamState) {
        let mut p = [theta];
        let mut state = AdamState::new(&[1]);
        adam_step(&mut [&mut p[..]], &[&[g][..]], &mut state, &AdamParams::default()).unwrap();
        (p[0], state)
    }

    #[test]
    fn zero_gradient_changes_nothing() {
        let (theta, state) = step(0.37, 0.0);
        assert_eq!(theta, 0.37);
        assert_eq!(state.m, vec![vec![0.0]]);
        assert_eq!(state.v, vec![vec![0.0]]);
        assert_eq!(state.t, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = 2 and v̂ = 4, so the step is 1e-4 · 2 / (2 + 1e-8).
        let (theta, _) = step(1.0, 2.0);
        assert!((theta - 0.9999).abs() < 1e-7, "{theta}");
        let (theta, _) = step(1.0, -3.0);
        let moved = theta as f64 - 1.0;
        assert!(moved > 0.0 && (moved - 1e-4).abs() < 1e-7, "{moved}");
    }

    #[test]
    fn rejects_shape_mismatch() {
        let mut p = [0.0f32; 3];
        let mut state = AdamState::new(&[3]);
        let err = adam_step(&mut [&mut p[..]], &[&[1.0, 2.0][..]], &mut state, &AdamParams::default());
        assert!(matches!(err, Err(TrainError::ShapeMismatch(_))));
        assert_eq!(state.t, 0);
    }

    #[test]
    fn moments_follow_exponential_averages() {
        let mut p = [0.0f32];
        let mut state = AdamState::new(&[1]);
        let hp = AdamParams::default();
        for g in [1.0f32, -2.0, 0.5] {
            adam_step(&mut [&mut p[..]], &[&[g][..]], &mut state, &hp).unwrap();
        }
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for g in [1.0f64, -2.0, 0.5] {
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
        }
        assert!((state.m[0][0] as f64 - m).abs() < 1e-6);
        assert!((state.v[0][0] as f64 - v).abs() < 1e-7);
        assert_eq!(state.t, 3);
    }
}
