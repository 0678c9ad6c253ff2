//! Checks shared by the focused test targets and the acceptance run.

use melad::tensor::{
    batch_norm_backward, batch_norm_infer, batch_norm_train, conv2d_dilated_backward,
    conv2d_dilated_with, global_avg_pool_backward, global_avg_pool_batch, relu, relu_backward,
    softmax, softmax_backward, softmax_cross_entropy_grad, BatchNorm, ConvParams,
};
use melad::{ExecMode, Tensor};
use rand::Rng;

use super::{
    bn_infer, bn_train, conv_direct, conv_params_direct, cross_entropy, dot, gap, max_abs_diff,
    max_rel_error, numeric_grad, rng, to_f64, uniform, random_tensor,
};
use super as oracle;

pub const FD_STEP: f64 = 1e-3;
/// Relative errors are measured against at least this magnitude.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct ConvCase {
    pub dims: Vec<usize>,
    pub out_ch: usize,
    pub k: usize,
    pub dilation: usize,
}

/// Random geometry with H, W ≤ 12, channels ≤ 4, l ∈ {1, 2, 4, 8}.
pub fn random_conv_case(rng: &mut impl Rng) -> ConvCase {
    let (h, w) = (rng.random_range(1..=12), rng.random_range(1..=12));
    let c = rng.random_range(1..=4);
    let mut dims = vec![c, h, w];
    if rng.random_bool(0.25) {
        dims.insert(0, rng.random_range(1..=3));
    }
    ConvCase {
        dims,
        out_ch: rng.random_range(1..=4),
        k: [1, 3, 3, 5][rng.random_range(0..4)],
        dilation: [1, 2, 4, 8][rng.random_range(0..4)],
    }
}

pub fn random_conv_params(rng: &mut impl Rng, case: &ConvCase) -> ConvParams {
    let c = case.dims[case.dims.len() - 3];
    let kdims = [case.out_ch, c, case.k, case.k];
    let kernel = random_tensor(rng, &kdims);
    ConvParams::new(kernel, uniform(rng, case.out_ch, -1.0, 1.0), case.dilation).unwrap()
}

/// Largest absolute deviation from the direct-summation oracle over `cases`
/// random cases, in both execution modes.
pub fn conv_oracle_max_error(seed: u64, cases: usize) -> f64 {
    let mut rng = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let case = random_conv_case(&mut rng);
        let params = random_conv_params(&mut rng, &case);
        let input = random_tensor(&mut rng, &case.dims);
        let expected = conv_params_direct(&params, &to_f64(input.data()), &case.dims);
        for mode in [ExecMode::Deterministic, ExecMode::Fast] {
            let out = conv2d_dilated_with(&input, &params, mode).unwrap();
            let mut out_dims = case.dims.clone();
            let ch = out_dims.len() - 3;
            out_dims[ch] = case.out_ch;
            assert_eq!(out.dims(), out_dims.as_slice());
            worst = worst.max(max_abs_diff(out.data(), &expected));
        }
    }
    worst
}

/// Values of `x` kept at least `margin` away from zero, for relu probes.
fn away_from_zero(rng: &mut impl Rng, n: usize, margin: f32) -> Vec<f32> {
    (0..n)
        .map(|_| {
            let v: f32 = rng.random_range(margin..1.0);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect()
}

fn with_data(dims: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(dims.to_vec(), data.iter().map(|&v| v as f32).collect()).unwrap()
}

/// One line per layer type and argument: the worst relative error between
/// the engine's backward pass and central differences of the `f64` oracle.
pub fn gradient_checks(seed: u64) -> Vec<(String, f64)> {
    let mut rng = rng(seed);
    let mut out = Vec::new();

    for (k, l) in [(3, 1), (3, 2), (3, 4), (1, 1), (5, 2)] {
        let case = ConvCase {
            dims: vec![2, 3, 6, 7],
            out_ch: 2,
            k,
            dilation: l,
        };
        let params = random_conv_params(&mut rng, &case);
        let input = random_tensor(&mut rng, &case.dims);
        let g = random_tensor(&mut rng, &[2, 2, 6, 7]);
        let g64 = to_f64(g.data());
        let grads = conv2d_dilated_backward(&input, &params, &g).unwrap();
        let kd = params.kernel.dims().to_vec();
        let (x, kk, b) = (to_f64(input.data()), to_f64(params.kernel.data()), to_f64(&params.bias));
        let kdims = [kd[0], kd[1], kd[2], kd[3]];
        let fx = numeric_grad(&x, FD_STEP, |x| dot(&g64, &conv_direct(x, &case.dims, &kk, kdims, &b, l)));
        let fk = numeric_grad(&kk, FD_STEP, |kk| dot(&g64, &conv_direct(&x, &case.dims, kk, kdims, &b, l)));
        let fb = numeric_grad(&b, FD_STEP, |b| dot(&g64, &conv_direct(&x, &case.dims, &kk, kdims, b, l)));
        let tag = format!("conv k={k} l={l}");
        out.push((format!("{tag} input"), max_rel_error(grads.input.data(), &fx, REL_FLOOR)));
        out.push((format!("{tag} kernel"), max_rel_error(grads.kernel.data(), &fk, REL_FLOOR)));
        out.push((format!("{tag} bias"), max_rel_error(&grads.bias, &fb, REL_FLOOR)));
    }

    let dims = [3usize, 2, 4, 5];
    let mut bn = BatchNorm::identity(2);
    bn.gamma = uniform(&mut rng, 2, 0.5, 1.5);
    bn.beta = uniform(&mut rng, 2, -0.5, 0.5);
    bn.running_mean = uniform(&mut rng, 2, -0.3, 0.3);
    bn.running_var = uniform(&mut rng, 2, 0.5, 2.0);
    let input = random_tensor(&mut rng, &dims);
    let g = random_tensor(&mut rng, &dims);
    let g64 = to_f64(g.data());
    let (x, gm, bt) = (to_f64(input.data()), to_f64(&bn.gamma), to_f64(&bn.beta));
    let eps = bn.eps as f64;
    {
        let mut train_bn = bn.clone();
        let (_, stats) = batch_norm_train(&input, &mut train_bn).unwrap();
        let grads = batch_norm_backward(&input, &bn, Some(&stats), &g).unwrap();
        let fx = numeric_grad(&x, FD_STEP, |x| dot(&g64, &bn_train(x, &dims, &gm, &bt, eps)));
        let fg = numeric_grad(&gm, FD_STEP, |gm| dot(&g64, &bn_train(&x, &dims, gm, &bt, eps)));
        let fb = numeric_grad(&bt, FD_STEP, |bt| dot(&g64, &bn_train(&x, &dims, &gm, bt, eps)));
        out.push(("batchnorm train input".into(), max_rel_error(grads.input.data(), &fx, REL_FLOOR)));
        out.push(("batchnorm train gamma".into(), max_rel_error(&grads.gamma, &fg, REL_FLOOR)));
        out.push(("batchnorm train beta".into(), max_rel_error(&grads.beta, &fb, REL_FLOOR)));
    }
    {
        let grads = batch_norm_backward(&input, &bn, None, &g).unwrap();
        let fx = numeric_grad(&x, FD_STEP, |x| dot(&g64, &bn_infer(x, &dims, &bn, &gm, &bt)));
        let fg = numeric_grad(&gm, FD_STEP, |gm| dot(&g64, &bn_infer(&x, &dims, &bn, gm, &bt)));
        let fb = numeric_grad(&bt, FD_STEP, |bt| dot(&g64, &bn_infer(&x, &dims, &bn, &gm, bt)));
        out.push(("batchnorm infer input".into(), max_rel_error(grads.input.data(), &fx, REL_FLOOR)));
        out.push(("batchnorm infer gamma".into(), max_rel_error(&grads.gamma, &fg, REL_FLOOR)));
        out.push(("batchnorm infer beta".into(), max_rel_error(&grads.beta, &fb, REL_FLOOR)));
        let fwd = batch_norm_infer(&input, &bn).unwrap();
        assert!(max_abs_diff(fwd.data(), &bn_infer(&x, &dims, &bn, &gm, &bt)) < 1e-5);
    }

    {
        let rdims = [2usize, 3, 4, 4];
        let n: usize = rdims.iter().product();
        let x = to_f64(&away_from_zero(&mut rng, n, 0.01));
        let input = with_data(&rdims, &x);
        let g = random_tensor(&mut rng, &rdims);
        let g64 = to_f64(g.data());
        let grad = relu_backward(&relu(&input), &g).unwrap();
        let fx = numeric_grad(&x, FD_STEP, |x| dot(&g64, &oracle::relu(x)));
        out.push(("relu input".into(), max_rel_error(grad.data(), &fx, REL_FLOOR)));
    }

    {
        let gdims = [2usize, 3, 4, 5];
        let input = random_tensor(&mut rng, &gdims);
        let x = to_f64(input.data());
        let g: Vec<Vec<f32>> = (0..2).map(|_| uniform(&mut rng, 3, -1.0, 1.0)).collect();
        let g64: Vec<f64> = g.iter().flatten().map(|&v| v as f64).collect();
        let pooled: Vec<f32> = global_avg_pool_batch(&input).unwrap().concat();
        assert!(max_abs_diff(&pooled, &gap(&x, &gdims)) < 1e-6);
        let grad = global_avg_pool_backward(&g, 4, 5).unwrap();
        let fx = numeric_grad(&x, FD_STEP, |x| dot(&g64, &gap(x, &gdims)));
        out.push(("global average pool input".into(), max_rel_error(grad.data(), &fx, REL_FLOOR)));
    }

    {
        let z = uniform(&mut rng, 2, -3.0, 3.0);
        let z64 = to_f64(&z);
        let g = uniform(&mut rng, 2, -1.0, 1.0);
        let g64 = to_f64(&g);
        let p = softmax(&z).unwrap();
        let grad = softmax_backward(&p, &g).unwrap();
        let fz = numeric_grad(&z64, FD_STEP, |z| dot(&g64, &oracle::softmax(z)));
        out.push(("softmax logits".into(), max_rel_error(&grad, &fz, REL_FLOOR)));

        for t in [[1.0f32, 0.0], [0.0, 1.0]] {
            let t64 = to_f64(&t);
            let grad = softmax_cross_entropy_grad(&p, &t).unwrap();
            let fz = numeric_grad(&z64, FD_STEP, |z| cross_entropy(&oracle::softmax(z), &t64));
            out.push((
                format!("softmax cross-entropy logits (target {t:?})"),
                max_rel_error(&grad, &fz, REL_FLOOR),
            ));
        }
    }
    out
}
