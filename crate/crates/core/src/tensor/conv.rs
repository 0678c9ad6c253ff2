//! Same-padded dilated 2D convolution.
//!
//! The kernel is applied in cross-correlation orientation:
//!
//! ```text
//! out(o, y, x) = bias[o] + Σ_{c, ty, tx} in(c, y + l·ty − m, x + l·tx − m) · k(o, c, ty, tx)
//! ```
//!
//! with dilation `l`, margin `m = l·(k − 1)/2` and zero fill outside the
//! image. The textbook convolution `Σ_{s + l·t = p} F(s)·k(t)` is the same
//! operation with the kernel rotated by 180°, so a kernel learned in one
//! orientation maps onto the other by flipping both spatial axes.
//!
//! Each image is processed in horizontal bands of output rows. A band is
//! unrolled into a `(C·k·k) × (rows·W)` column matrix (taps ordered channel,
//! then kernel row, then kernel column) and multiplied by the `O × (C·k·k)`
//! kernel matrix.

use std::cell::RefCell;
use std::ops::Range;

use rayon::prelude::*;

use super::{ExecMode, Tensor, TensorError};

/// Output rows per band in deterministic mode.
const BAND_ROWS: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    /// `(out_ch, in_ch, k, k)`.
    pub kernel: Tensor,
    /// One entry per output channel.
    pub bias: Vec<f32>,
    pub dilation: usize,
}

/// Gradients of `⟨grad_out, conv(input)⟩` with respect to each argument.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads {
    pub input: Tensor,
    pub kernel: Tensor,
    pub bias: Vec<f32>,
}

#[derive(Clone, Copy)]
struct Geometry {
    out_ch: usize,
    in_ch: usize,
    k: usize,
    dilation: usize,
}

impl Geometry {
    fn taps(&self) -> usize {
        self.in_ch * self.k * self.k
    }
}

impl ConvParams {
    pub fn new(kernel: Tensor, bias: Vec<f32>, dilation: usize) -> Result<Self, TensorError> {
        let p = Self {
            kernel,
            bias,
            dilation,
        };
        p.geometry()?;
        Ok(p)
    }

    /// Zero kernel and bias.
    pub fn zeros(out_ch: usize, in_ch: usize, kernel_size: usize, dilation: usize) -> Self {
        Self {
            kernel: Tensor::zeros(&[out_ch, in_ch, kernel_size, kernel_size]),
            bias: vec![0.0; out_ch],
            dilation,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.dims()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.dims()[1]
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel.dims()[2]
    }

    /// Zero-fill margin on each side: `dilation · (k − 1) / 2`.
    pub fn margin(&self) -> usize {
        self.dilation * (self.kernel_size() - 1) / 2
    }

    fn geometry(&self) -> Result<Geometry, TensorError> {
        let &[out_ch, in_ch, kh, kw] = self.kernel.dims() else {
            return Err(TensorError::Rank {
                expected: "4 (kernel)".into(),
                actual: self.kernel.rank(),
            });
        };
        if kh != kw || kh % 2 == 0 {
            return Err(TensorError::EvenKernel { kh, kw });
        }
        if self.dilation < 1 {
            return Err(TensorError::InvalidDilation(self.dilation));
        }
        if self.bias.len() != out_ch {
            return Err(TensorError::VectorLength {
                expected: out_ch,
                actual: self.bias.len(),
            });
        }
        Ok(Geometry {
            out_ch,
            in_ch,
            k: kh,
            dilation: self.dilation,
        })
    }

    /// Kernel whose forward pass computes the input gradient of `self`:
    /// input/output channels swapped and both spatial axes reversed.
    fn flipped_transposed(&self) -> ConvParams {
        let (o, c, k) = (self.out_channels(), self.in_channels(), self.kernel_size());
        let src = self.kernel.data();
        let mut data = vec![0.0; src.len()];
        for oi in 0..o {
            for ci in 0..c {
                for ty in 0..k {
                    for tx in 0..k {
                        let from = ((oi * c + ci) * k + ty) * k + tx;
                        let to = ((ci * o + oi) * k + (k - 1 - ty)) * k + (k - 1 - tx);
                        data[to] = src[from];
                    }
                }
            }
        }
        ConvParams {
            kernel: Tensor::from_parts_unchecked(vec![c, o, k, k], data),
            bias: vec![0.0; c],
            dilation: self.dilation,
        }
    }
}

fn band_ranges(height: usize, mode: ExecMode) -> Vec<Range<usize>> {
    let rows = match mode {
        ExecMode::Deterministic => BAND_ROWS,
        ExecMode::Fast => height.div_ceil(rayon::current_num_threads()).max(1),
    };
    (0..height)
        .step_by(rows)
        .map(|y0| y0..(y0 + rows).min(height))
        .collect()
}

/// Unrolls the taps feeding output rows `rows` into `col`, shaped
/// `(C·k·k) × (rows.len()·w)`.
fn im2col_band(
    img: &[f32],
    (h, w): (usize, usize),
    g: Geometry,
    rows: &Range<usize>,
    col: &mut Vec<f32>,
) {
    let pb = rows.len() * w;
    col.clear();
    col.resize(g.taps() * pb, 0.0);
    let margin = (g.dilation * (g.k - 1) / 2) as isize;
    let (hi, wi) = (h as isize, w as isize);
    for ci in 0..g.in_ch {
        let plane = &img[ci * h * w..(ci + 1) * h * w];
        for ty in 0..g.k {
            let dy = (ty * g.dilation) as isize - margin;
            for tx in 0..g.k {
                let dx = (tx * g.dilation) as isize - margin;
                let row = (ci * g.k + ty) * g.k + tx;
                let dst = &mut col[row * pb..(row + 1) * pb];
                // Output columns whose source column x + dx lies inside the image.
                let x_lo = (-dx).clamp(0, wi);
                let x_hi = (wi - dx).clamp(0, wi);
                if x_lo >= x_hi {
                    continue;
                }
                for (r, y) in rows.clone().enumerate() {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= hi {
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    dst[r * w + x_lo as usize..r * w + x_hi as usize]
                        .copy_from_slice(&src[(x_lo + dx) as usize..(x_hi + dx) as usize]);
                }
            }
        }
    }
}

/// `c[m×n] = a[m×k] · b[k×n] + beta·c` over strided views, `c` having row
/// stride `rsc`.
///
/// # Safety
///
/// `c` must be valid for reads and writes at `i·rsc + j` for every `i < m`,
/// `j < n`, and nothing else may touch those elements during the call.
#[allow(clippy::too_many_arguments)]
unsafe fn gemm_raw(
    (m, k, n): (usize, usize, usize),
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    c: *mut f32,
    rsc: usize,
    beta: f32,
) {
    assert!(m == 0 || k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || n == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    // SAFETY: the asserts keep every strided read inside `a` and `b`; the
    // caller vouches for `c`.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c,
            rsc as isize,
            1,
        );
    }
}

/// `c[m×n] = a[m×k] · b[k×n]` into a dense row-major buffer.
fn gemm(
    (m, k, n): (usize, usize, usize),
    a: &[f32],
    sa: (usize, usize),
    b: &[f32],
    sb: (usize, usize),
    c: &mut [f32],
) {
    assert!(c.len() >= m * n);
    // SAFETY: `c` is exclusively borrowed and holds `m·n` elements.
    unsafe { gemm_raw((m, k, n), a, sa, b, sb, c.as_mut_ptr(), n, 0.0) }
}

thread_local! {
    static COLUMNS: RefCell<Vec<f32>> = const { RefCell::new(Vec::new()) };
}

/// Runs `f` with this thread's reusable column buffer.
fn with_columns<R>(f: impl FnOnce(&mut Vec<f32>) -> R) -> R {
    COLUMNS.with(|c| f(&mut c.borrow_mut()))
}

/// Output pointer shared by the bands of one image.
struct BandOutput(*mut f32);

// SAFETY: each band writes a disjoint set of elements (see `conv_image`).
unsafe impl Sync for BandOutput {}

impl BandOutput {
    fn at(&self, offset: usize) -> *mut f32 {
        self.0.wrapping_add(offset)
    }
}

fn conv_image(
    img: &[f32],
    out: &mut [f32],
    params: &ConvParams,
    g: Geometry,
    (h, w): (usize, usize),
    mode: ExecMode,
) {
    let kernel = params.kernel.data();
    let taps = g.taps();
    assert_eq!(out.len(), g.out_ch * h * w);
    for (plane, &b) in out.chunks_mut(h * w).zip(&params.bias) {
        plane.fill(b);
    }
    let base = BandOutput(out.as_mut_ptr());
    band_ranges(h, mode).par_iter().for_each(|rows| {
        let pb = rows.len() * w;
        let c = base.at(rows.start * w);
        // SAFETY: this band owns columns `rows.start·w .. rows.end·w` of
        // every `h·w` output plane; bands do not overlap and `out` outlives
        // the loop.
        if g.k == 1 {
            unsafe {
                gemm_raw(
                    (g.out_ch, taps, pb),
                    kernel,
                    (taps, 1),
                    &img[rows.start * w..],
                    (h * w, 1),
                    c,
                    h * w,
                    1.0,
                )
            }
        } else {
            with_columns(|col| {
                im2col_band(img, (h, w), g, rows, col);
                unsafe { gemm_raw((g.out_ch, taps, pb), kernel, (taps, 1), col, (pb, 1), c, h * w, 1.0) }
            });
        }
    });
}

fn check_input(input: &Tensor, g: Geometry) -> Result<(usize, usize), TensorError> {
    let (c, h, w) = input.chw()?;
    if c != g.in_ch {
        return Err(TensorError::ChannelMismatch {
            input: c,
            kernel: g.in_ch,
        });
    }
    Ok((h, w))
}

/// Dilated convolution in deterministic mode. Accepts `(C, H, W)` or
/// `(N, C, H, W)`; the spatial extent is preserved.
pub fn conv2d_dilated(input: &Tensor, params: &ConvParams) -> Result<Tensor, TensorError> {
    conv2d_dilated_with(input, params, ExecMode::Deterministic)
}

pub fn conv2d_dilated_with(
    input: &Tensor,
    params: &ConvParams,
    mode: ExecMode,
) -> Result<Tensor, TensorError> {
    let g = params.geometry()?;
    let (h, w) = check_input(input, g)?;
    let n = input.batch_len();
    let plane = g.out_ch * h * w;
    let mut out = vec![0.0f32; n * plane];
    out.par_chunks_mut(plane)
        .enumerate()
        .for_each(|(i, dst)| conv_image(input.image(i), dst, params, g, (h, w), mode));
    let dims = if input.rank() == 4 {
        vec![n, g.out_ch, h, w]
    } else {
        vec![g.out_ch, h, w]
    };
    Ok(Tensor::from_parts_unchecked(dims, out))
}

/// Kernel and bias gradients for one image, summed band by band in order.
fn param_grads_image(
    img: &[f32],
    grad: &[f32],
    g: Geometry,
    (h, w): (usize, usize),
    mode: ExecMode,
) -> (Vec<f32>, Vec<f32>) {
    let taps = g.taps();
    let bands = band_ranges(h, mode);
    let partials: Vec<Vec<f32>> = bands
        .par_iter()
        .map(|rows| {
            let pb = rows.len() * w;
            let gview = &grad[rows.start * w..];
            let mut gk = vec![0.0f32; g.out_ch * taps];
            if g.k == 1 {
                gemm(
                    (g.out_ch, pb, taps),
                    gview,
                    (h * w, 1),
                    &img[rows.start * w..],
                    (1, h * w),
                    &mut gk,
                );
            } else {
                with_columns(|col| {
                    im2col_band(img, (h, w), g, rows, col);
                    gemm((g.out_ch, pb, taps), gview, (h * w, 1), col, (1, pb), &mut gk);
                });
            }
            gk
        })
        .collect();
    let mut gk = vec![0.0f32; g.out_ch * taps];
    for part in partials {
        gk.iter_mut().zip(part).for_each(|(a, b)| *a += b);
    }
    let gb = grad
        .chunks(h * w)
        .map(|plane| plane.iter().map(|&v| v as f64).sum::<f64>() as f32)
        .collect();
    (gk, gb)
}

/// Backward pass with the input gradient optional (the first layer of a
/// network never needs it).
pub(crate) fn conv2d_backward_parts(
    input: &Tensor,
    params: &ConvParams,
    grad_out: &Tensor,
    mode: ExecMode,
    want_input: bool,
) -> Result<(Option<Tensor>, Tensor, Vec<f32>), TensorError> {
    let g = params.geometry()?;
    let (h, w) = check_input(input, g)?;
    let mut expected = input.dims().to_vec();
    let ch_axis = expected.len() - 3;
    expected[ch_axis] = g.out_ch;
    if grad_out.dims() != expected.as_slice() {
        return Err(TensorError::ShapeMismatch {
            expected,
            actual: grad_out.dims().to_vec(),
        });
    }
    let n = input.batch_len();
    let per_image: Vec<(Vec<f32>, Vec<f32>)> = (0..n)
        .into_par_iter()
        .map(|i| param_grads_image(input.image(i), grad_out.image(i), g, (h, w), mode))
        .collect();
    let mut gk = vec![0.0f32; g.out_ch * g.taps()];
    let mut gb = vec![0.0f32; g.out_ch];
    for (k, b) in per_image {
        gk.iter_mut().zip(k).for_each(|(a, v)| *a += v);
        gb.iter_mut().zip(b).for_each(|(a, v)| *a += v);
    }
    let grad_input = if want_input {
        Some(conv2d_dilated_with(grad_out, &params.flipped_transposed(), mode)?)
    } else {
        None
    };
    let kernel = Tensor::from_parts_unchecked(params.kernel.dims().to_vec(), gk);
    Ok((grad_input, kernel, gb))
}

/// Gradients of the scalar `⟨grad_out, conv2d_dilated(input, params)⟩`.
pub fn conv2d_dilated_backward(
    input: &Tensor,
    params: &ConvParams,
    grad_out: &Tensor,
) -> Result<ConvGrads, TensorError> {
    let (gi, kernel, bias) =
        conv2d_backward_parts(input, params, grad_out, ExecMode::Deterministic, true)?;
    Ok(ConvGrads {
        input: gi.expect("input gradient requested"),
        kernel,
        bias,
    })
}
