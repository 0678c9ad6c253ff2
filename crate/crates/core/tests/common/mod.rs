//! Reference implementations in `f64`, written straight from the layer
//! definitions with plain loops. Shared by the integration test targets.

#![allow(dead_code)]

use melad::tensor::{BatchNorm, ConvParams};
use melad::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn random_tensor(rng: &mut impl Rng, dims: &[usize]) -> Tensor {
    let n = dims.iter().product();
    Tensor::new(dims.to_vec(), uniform(rng, n, -1.0, 1.0)).unwrap()
}

pub fn to_f64(xs: &[f32]) -> Vec<f64> {
    xs.iter().map(|&v| v as f64).collect()
}

/// `(N, C, H, W)` view of a rank-3 or rank-4 tensor's dims.
pub fn nchw(dims: &[usize]) -> (usize, usize, usize, usize) {
    match *dims {
        [c, h, w] => (1, c, h, w),
        [n, c, h, w] => (n, c, h, w),
        _ => panic!("rank 3 or 4 expected"),
    }
}

/// out[o, y, x] = b[o] + Σ_c Σ_i Σ_j K[o, c, i, j] · in[c, y + l(i − m), x + l(j − m)]
/// with m = (k − 1)/2 and zeros outside the image.
pub fn conv_direct(
    input: &[f64],
    dims: &[usize],
    kernel: &[f64],
    kdims: [usize; 4],
    bias: &[f64],
    dilation: usize,
) -> Vec<f64> {
    let (n, c, h, w) = nchw(dims);
    let [o, kc, k, _] = kdims;
    assert_eq!(kc, c);
    let m = (k as isize - 1) / 2;
    let l = dilation as isize;
    let mut out = vec![0.0; n * o * h * w];
    for b in 0..n {
        for oc in 0..o {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = bias[oc];
                    for ic in 0..c {
                        for i in 0..k {
                            for j in 0..k {
                                let yy = y as isize + l * (i as isize - m);
                                let xx = x as isize + l * (j as isize - m);
                                if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                                    continue;
                                }
                                let kv = kernel[((oc * c + ic) * k + i) * k + j];
                                let iv = input[((b * c + ic) * h + yy as usize) * w + xx as usize];
                                acc += kv * iv;
                            }
                        }
                    }
                    out[((b * o + oc) * h + y) * w + x] = acc;
                }
            }
        }
    }
    out
}

pub fn conv_params_direct(p: &ConvParams, input: &[f64], dims: &[usize]) -> Vec<f64> {
    let kd = p.kernel.dims();
    conv_direct(
        input,
        dims,
        &to_f64(p.kernel.data()),
        [kd[0], kd[1], kd[2], kd[3]],
        &to_f64(&p.bias),
        p.dilation,
    )
}

/// Train-mode normalization with biased batch variance.
pub fn bn_train(input: &[f64], dims: &[usize], gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let (n, c, h, w) = nchw(dims);
    let plane = h * w;
    let count = (n * plane) as f64;
    let mut out = vec![0.0; input.len()];
    for ch in 0..c {
        let idx = |b: usize, p: usize| (b * c + ch) * plane + p;
        let mut mean = 0.0;
        for b in 0..n {
            for p in 0..plane {
                mean += input[idx(b, p)];
            }
        }
        mean /= count;
        let mut var = 0.0;
        for b in 0..n {
            for p in 0..plane {
                var += (input[idx(b, p)] - mean).powi(2);
            }
        }
        var /= count;
        for b in 0..n {
            for p in 0..plane {
                out[idx(b, p)] = gamma[ch] * (input[idx(b, p)] - mean) / (var + eps).sqrt() + beta[ch];
            }
        }
    }
    out
}

pub fn bn_infer(input: &[f64], dims: &[usize], bn: &BatchNorm, gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let (_, c, h, w) = nchw(dims);
    let plane = h * w;
    input
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let ch = (i / plane) % c;
            let s = (bn.running_var[ch] as f64 + bn.eps as f64).sqrt();
            gamma[ch] * (x - bn.running_mean[ch] as f64) / s + beta[ch]
        })
        .collect()
}

pub fn relu(input: &[f64]) -> Vec<f64> {
    input.iter().map(|&v| v.max(0.0)).collect()
}

/// Per-image channel means, flattened `(N, C)`.
pub fn gap(input: &[f64], dims: &[usize]) -> Vec<f64> {
    let (_, _, h, w) = nchw(dims);
    input.chunks(h * w).map(|p| p.iter().sum::<f64>() / (h * w) as f64).collect()
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn cross_entropy(p: &[f64], t: &[f64]) -> f64 {
    -p.iter().zip(t).map(|(p, t)| t * p.ln()).sum::<f64>()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Central differences of `f` at `x` with step `h`.
pub fn numeric_grad(x: &[f64], h: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest `|a − n| / max(|a|, |n|, floor)` over the elements.
pub fn max_rel_error(analytic: &[f32], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| {
            let a = a as f64;
            (a - n).abs() / a.abs().max(n.abs()).max(floor)
        })
        .fold(0.0, f64::max)
}

pub fn max_abs_diff(a: &[f32], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y).abs()).fold(0.0, f64::max)
}
pub mod checks;
