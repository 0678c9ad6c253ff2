//! Per-channel batch normalization.

use super::{Tensor, TensorError};

pub const DEFAULT_BN_EPS: f32 = 1e-5;
pub const DEFAULT_BN_MOMENTUM: f32 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Normalize with the running statistics.
    Infer,
    /// Normalize with the statistics of the current batch and fold them into
    /// the running statistics.
    Train,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub eps: f32,
    /// Weight of the old running statistics in a train-mode update.
    pub momentum: f32,
}

/// Statistics of one train-mode batch, kept for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f32>,
    /// Biased (population) variance over batch and spatial positions.
    pub var: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormGrads {
    pub input: Tensor,
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
}

impl BatchNorm {
    /// gamma = 1, beta = 0, running mean 0 and running variance 1.
    pub fn identity(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps: DEFAULT_BN_EPS,
            momentum: DEFAULT_BN_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn check(&self, input: &Tensor) -> Result<(usize, usize), TensorError> {
        let (c, h, w) = input.chw()?;
        for v in [&self.gamma, &self.beta, &self.running_mean, &self.running_var] {
            if v.len() != c {
                return Err(TensorError::VectorLength {
                    expected: c,
                    actual: v.len(),
                });
            }
        }
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            return Err(TensorError::InvalidEpsilon(self.eps));
        }
        Ok((c, h * w))
    }
}

/// Applies `y = (x − mean[c])·scale[c] + beta[c]` plane by plane.
fn affine(input: &Tensor, plane: usize, mean: &[f32], scale: &[f32], beta: &[f32]) -> Tensor {
    let channels = mean.len();
    let mut data = input.data().to_vec();
    for (i, chunk) in data.chunks_mut(plane).enumerate() {
        let c = i % channels;
        let (m, s, b) = (mean[c], scale[c], beta[c]);
        chunk.iter_mut().for_each(|v| *v = (*v - m) * s + b);
    }
    Tensor::from_parts_unchecked(input.dims().to_vec(), data)
}

pub fn batch_norm_infer(input: &Tensor, bn: &BatchNorm) -> Result<Tensor, TensorError> {
    let (c, plane) = bn.check(input)?;
    let scale: Vec<f32> = (0..c)
        .map(|i| bn.gamma[i] / (bn.running_var[i] + bn.eps).sqrt())
        .collect();
    Ok(affine(input, plane, &bn.running_mean, &scale, &bn.beta))
}

/// Sums in eight independent `f64` lanes so the loop vectorizes; the lane
/// order is fixed, so the result does not depend on the caller.
fn lane_sum(xs: &[f32], f: impl Fn(f32) -> f64) -> f64 {
    let mut lanes = [0.0f64; 8];
    let chunks = xs.chunks_exact(8);
    let tail = chunks.remainder();
    for c in chunks {
        for (l, &v) in lanes.iter_mut().zip(c) {
            *l += f(v);
        }
    }
    lanes.iter().sum::<f64>() + tail.iter().map(|&v| f(v)).sum::<f64>()
}

fn lane_sum2(xs: &[f32], ys: &[f32], f: impl Fn(f32, f32) -> f64) -> f64 {
    let mut lanes = [0.0f64; 8];
    let (cx, cy) = (xs.chunks_exact(8), ys.chunks_exact(8));
    let tail: f64 = cx.remainder().iter().zip(cy.remainder()).map(|(&x, &y)| f(x, y)).sum();
    for (a, b) in cx.zip(cy) {
        for ((l, &x), &y) in lanes.iter_mut().zip(a).zip(b) {
            *l += f(x, y);
        }
    }
    lanes.iter().sum::<f64>() + tail
}

/// Per-channel mean and biased variance, accumulated in image order.
fn channel_stats(input: &Tensor, c: usize, plane: usize) -> BatchStats {
    let count = (input.len() / c) as f64;
    let mut sum = vec![0.0f64; c];
    for (i, chunk) in input.data().chunks(plane).enumerate() {
        sum[i % c] += lane_sum(chunk, |v| v as f64);
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
    let mut sq = vec![0.0f64; c];
    for (i, chunk) in input.data().chunks(plane).enumerate() {
        let m = mean[i % c];
        sq[i % c] += lane_sum(chunk, |v| (v as f64 - m).powi(2));
    }
    BatchStats {
        mean: mean.iter().map(|&m| m as f32).collect(),
        var: sq.iter().map(|s| (s / count) as f32).collect(),
    }
}

/// Train-mode normalization. Updates
/// `running ← momentum·running + (1 − momentum)·batch` for mean and variance.
pub fn batch_norm_train(
    input: &Tensor,
    bn: &mut BatchNorm,
) -> Result<(Tensor, BatchStats), TensorError> {
    let (c, plane) = bn.check(input)?;
    let stats = channel_stats(input, c, plane);
    let scale: Vec<f32> = (0..c)
        .map(|i| bn.gamma[i] / (stats.var[i] + bn.eps).sqrt())
        .collect();
    let out = affine(input, plane, &stats.mean, &scale, &bn.beta);
    let m = bn.momentum;
    for i in 0..c {
        bn.running_mean[i] = m * bn.running_mean[i] + (1.0 - m) * stats.mean[i];
        bn.running_var[i] = m * bn.running_var[i] + (1.0 - m) * stats.var[i];
    }
    Ok((out, stats))
}

pub fn batch_norm(input: &Tensor, bn: &mut BatchNorm, mode: NormMode) -> Result<Tensor, TensorError> {
    match mode {
        NormMode::Infer => batch_norm_infer(input, bn),
        NormMode::Train => batch_norm_train(input, bn).map(|(t, _)| t),
    }
}

/// Backward pass of a normalization that used `stats`.
///
/// With `stats` the batch statistics returned by [`batch_norm_train`] this is
/// the train-mode gradient, which accounts for the mean and variance depending
/// on the input. Passing `None` differentiates the infer-mode affine map.
pub fn batch_norm_backward(
    input: &Tensor,
    bn: &BatchNorm,
    stats: Option<&BatchStats>,
    grad_out: &Tensor,
) -> Result<NormGrads, TensorError> {
    let (c, plane) = bn.check(input)?;
    if grad_out.dims() != input.dims() {
        return Err(TensorError::ShapeMismatch {
            expected: input.dims().to_vec(),
            actual: grad_out.dims().to_vec(),
        });
    }
    let (mean, var) = match stats {
        Some(s) => (&s.mean, &s.var),
        None => (&bn.running_mean, &bn.running_var),
    };
    let inv_std: Vec<f64> = (0..c).map(|i| 1.0 / ((var[i] + bn.eps) as f64).sqrt()).collect();
    let mut sum_g = vec![0.0f64; c];
    let mut sum_gx = vec![0.0f64; c];
    for (i, (x, g)) in input.data().chunks(plane).zip(grad_out.data().chunks(plane)).enumerate() {
        let ch = i % c;
        let m = mean[ch] as f64;
        sum_g[ch] += lane_sum(g, |v| v as f64);
        sum_gx[ch] += lane_sum2(x, g, |xv, gv| gv as f64 * (xv as f64 - m)) * inv_std[ch];
    }
    let grad_gamma: Vec<f32> = sum_gx.iter().map(|&v| v as f32).collect();
    let grad_beta: Vec<f32> = sum_g.iter().map(|&v| v as f32).collect();

    // dx = a·g + b·x + k per channel. With batch statistics
    // a = γ/σ, b = −a·mean(g·x̂)/σ, k = −a·mean(g) − b·μ; otherwise only a.
    let count = (input.len() / c) as f64;
    let coeffs: Vec<[f32; 3]> = (0..c)
        .map(|ch| {
            let (m, s) = (mean[ch] as f64, inv_std[ch]);
            let a = bn.gamma[ch] as f64 * s;
            if stats.is_some() {
                let (mg, mgx) = (sum_g[ch] / count, sum_gx[ch] / count);
                let b = -a * mgx * s;
                [a as f32, b as f32, (-a * mg - b * m) as f32]
            } else {
                [a as f32, 0.0, 0.0]
            }
        })
        .collect();
    let mut data = vec![0.0f32; input.len()];
    for (i, ((dst, x), g)) in data
        .chunks_mut(plane)
        .zip(input.data().chunks(plane))
        .zip(grad_out.data().chunks(plane))
        .enumerate()
    {
        let [a, b, k] = coeffs[i % c];
        for ((d, &xv), &gv) in dst.iter_mut().zip(x).zip(g) {
            *d = a * gv + b * xv + k;
        }
    }
    Ok(NormGrads {
        input: Tensor::from_parts_unchecked(input.dims().to_vec(), data),
        gamma: grad_gamma,
        beta: grad_beta,
    })
}
