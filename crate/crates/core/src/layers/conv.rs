//! 2-D cross-correlation and its exact adjoint (transposed convolution).
//!
//! Everything is expressed in the convolution's own direction: `x` is the
//! wide input `[cx, hx, wx]`, `y` the output `[cy, hy, wy]`, kernels are
//! `[cy, cx, k, k]`. A transposed convolution runs the same geometry
//! backwards, so `deconv2d` takes inputs shaped like `y` and produces
//! outputs shaped like `x` with the very same kernel tensor.
//!
//! The kernels unfold the wide side with im2col. The forward correlation
//! keeps it tap-major and sweeps whole output planes; the other three use
//! the position-major transpose and skip zero entries of `y`, which is what
//! makes the decoder cheap on quarter-dense unpooled maps.

use crate::error::{Error, Result};
use crate::tensor::{ensure_finite, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Geometry {
    pub cx: usize,
    pub hx: usize,
    pub wx: usize,
    pub cy: usize,
    pub hy: usize,
    pub wy: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

fn conv_out_len(n: usize, k: usize, stride: usize, pad: usize, axis: &str) -> Result<usize> {
    if stride == 0 {
        return Err(Error::config("stride must be at least 1"));
    }
    let padded = n + 2 * pad;
    if k == 0 || k > padded {
        return Err(Error::config(format!("kernel {k} does not fit {axis} extent {n} with padding {pad}")));
    }
    if !(padded - k).is_multiple_of(stride) {
        return Err(Error::config(format!("{axis}: ({n} + 2*{pad} - {k}) is not divisible by stride {stride}")));
    }
    Ok((padded - k) / stride + 1)
}

fn kernel_dims(kernels: &Tensor) -> Result<(usize, usize, usize)> {
    match kernels.shape() {
        &[a, b, k1, k2] if k1 == k2 => Ok((a, b, k1)),
        s => Err(Error::dim(format!("kernels must be [out, in, k, k], got {s:?}"))),
    }
}

impl Geometry {
    /// Geometry of a forward convolution of `input` by `kernels`.
    pub(crate) fn conv(input: &[usize], kernels: &Tensor, stride: usize, pad: usize) -> Result<Self> {
        let &[cx, hx, wx] = input else {
            return Err(Error::dim(format!("conv input must be [C, H, W], got {input:?}")));
        };
        let (cy, kin, k) = kernel_dims(kernels)?;
        if kin != cx {
            return Err(Error::dim(format!(
                "conv kernels {:?} expect {kin} input channels, input has {cx}",
                kernels.shape()
            )));
        }
        let hy = conv_out_len(hx, k, stride, pad, "height")?;
        let wy = conv_out_len(wx, k, stride, pad, "width")?;
        Ok(Geometry { cx, hx, wx, cy, hy, wy, k, stride, pad })
    }

    /// Geometry of a transposed convolution whose input is `input`
    /// (shaped like a conv output).
    pub(crate) fn deconv(input: &[usize], kernels: &Tensor, stride: usize, pad: usize) -> Result<Self> {
        let &[cy, hy, wy] = input else {
            return Err(Error::dim(format!("deconv input must be [C, H, W], got {input:?}")));
        };
        let (kout, cx, k) = kernel_dims(kernels)?;
        if kout != cy {
            return Err(Error::dim(format!(
                "deconv kernels {:?} expect {kout} input channels, input has {cy}",
                kernels.shape()
            )));
        }
        if stride == 0 {
            return Err(Error::config("stride must be at least 1"));
        }
        let grow = |n: usize| -> Result<usize> {
            let full = (n - 1) * stride + k;
            if full <= 2 * pad {
                return Err(Error::config(format!("deconv output would be empty (padding {pad})")));
            }
            Ok(full - 2 * pad)
        };
        let hx = grow(hy)?;
        let wx = grow(wy)?;
        let g = Geometry { cx, hx, wx, cy, hy, wy, k, stride, pad };
        // must invert exactly
        debug_assert_eq!(conv_out_len(hx, k, stride, pad, "height").ok(), Some(hy));
        Ok(g)
    }

    pub(crate) fn x_len(&self) -> usize {
        self.cx * self.hx * self.wx
    }

    pub(crate) fn y_len(&self) -> usize {
        self.cy * self.hy * self.wy
    }

    /// Output columns `ox` for which `ox*stride + kx - pad` lands in `[0, wx)`.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if kx >= self.pad { 0 } else { (self.pad - kx).div_ceil(s) };
        // largest ox with ox*s + kx - pad <= wx - 1
        let reach = self.wx - 1 + self.pad;
        let hi = if reach < kx { 0 } else { ((reach - kx) / s + 1).min(self.wy) };
        (lo, hi.max(lo))
    }

    fn input_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = oy * self.stride + ky;
        (iy >= self.pad && iy - self.pad < self.hx).then(|| iy - self.pad)
    }
}

impl Geometry {
    fn taps(&self) -> usize {
        self.cx * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.hy * self.wy
    }
}

/// Unfolds `x` into a `[cx*k*k, hy*wy]` matrix whose row `(b, ky, kx)`
/// holds the input value each output position reads through that tap
/// (zero where the tap falls into padding).
fn im2col(g: &Geometry, x: &[f64]) -> Vec<f64> {
    let (k, p) = (g.k, g.positions());
    let mut col = vec![0.0; g.taps() * p];
    for b in 0..g.cx {
        let xb = &x[b * g.hx * g.wx..(b + 1) * g.hx * g.wx];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[((b * k + ky) * k + kx) * p..][..p];
                let (lo, hi) = g.valid_cols(kx);
                for oy in 0..g.hy {
                    let Some(iy) = g.input_row(oy, ky) else { continue };
                    let dst = &mut row[oy * g.wy..(oy + 1) * g.wy];
                    let src = &xb[iy * g.wx..(iy + 1) * g.wx];
                    for ox in lo..hi {
                        dst[ox] = src[ox * g.stride + kx - g.pad];
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: folds the matrix back, adding into `x`.
fn col2im_add(g: &Geometry, col: &[f64], x: &mut [f64]) {
    let (k, p) = (g.k, g.positions());
    for b in 0..g.cx {
        let xb = &mut x[b * g.hx * g.wx..(b + 1) * g.hx * g.wx];
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[((b * k + ky) * k + kx) * p..][..p];
                let (lo, hi) = g.valid_cols(kx);
                for oy in 0..g.hy {
                    let Some(iy) = g.input_row(oy, ky) else { continue };
                    let src = &row[oy * g.wy..(oy + 1) * g.wy];
                    let dst = &mut xb[iy * g.wx..(iy + 1) * g.wx];
                    for ox in lo..hi {
                        dst[ox * g.stride + kx - g.pad] += src[ox];
                    }
                }
            }
        }
    }
}

fn axpy(y: &mut [f64], w: f64, x: &[f64]) {
    for (o, &v) in y.iter_mut().zip(x) {
        *o += w * v;
    }
}

/// `y += correlate(x, K)`.
pub(crate) fn correlate(g: &Geometry, x: &[f64], kern: &[f64], y: &mut [f64]) {
    const BLOCK: usize = 16;
    let (j, p) = (g.taps(), g.positions());
    let col = im2col(g, x);
    let full = p - p % BLOCK;
    for a in 0..g.cy {
        let ka = &kern[a * j..(a + 1) * j];
        let ya = &mut y[a * p..(a + 1) * p];
        for start in (0..full).step_by(BLOCK) {
            let mut acc = [0.0; BLOCK];
            for (t, &w) in ka.iter().enumerate() {
                let c: &[f64; BLOCK] = col[t * p + start..][..BLOCK].try_into().unwrap();
                for i in 0..BLOCK {
                    acc[i] += w * c[i];
                }
            }
            for (o, v) in ya[start..start + BLOCK].iter_mut().zip(acc) {
                *o += v;
            }
        }
        for (t, &w) in ka.iter().enumerate() {
            axpy(&mut ya[full..], w, &col[t * p + full..(t + 1) * p]);
        }
    }
}

/// [`im2col`] transposed to `[hy*wy, cx*k*k]`, so that everything one
/// output position touches is contiguous.
fn im2row(g: &Geometry, x: &[f64]) -> Vec<f64> {
    transpose(&im2col(g, x), g.taps(), g.positions())
}

fn transpose(m: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; m.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = m[r * cols + c];
        }
    }
    out
}

/// Dot product with four independent partial sums.
fn dot4(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `y[i] += correlate(x, K)[i]` only where `mask[i] != 0`.
pub(crate) fn correlate_masked(g: &Geometry, x: &[f64], kern: &[f64], mask: &[f64], y: &mut [f64]) {
    let (j, p) = (g.taps(), g.positions());
    let rows = im2row(g, x);
    for a in 0..g.cy {
        let ka = &kern[a * j..(a + 1) * j];
        for q in 0..p {
            if mask[a * p + q] != 0.0 {
                y[a * p + q] += dot4(ka, &rows[q * j..(q + 1) * j]);
            }
        }
    }
}

/// `x += correlateᵀ(y, K)`, skipping zero entries of `y`.
pub(crate) fn scatter(g: &Geometry, y: &[f64], kern: &[f64], x: &mut [f64]) {
    let (j, p) = (g.taps(), g.positions());
    let mut rows = vec![0.0; j * p];
    for a in 0..g.cy {
        let ka = &kern[a * j..(a + 1) * j];
        for (q, &v) in y[a * p..(a + 1) * p].iter().enumerate() {
            if v != 0.0 {
                axpy(&mut rows[q * j..(q + 1) * j], v, ka);
            }
        }
    }
    col2im_add(g, &transpose(&rows, p, j), x);
}

/// `dK += Σ y ⊗ x` over every tap, skipping zero entries of `y`.
pub(crate) fn kernel_grad(g: &Geometry, y: &[f64], x: &[f64], dk: &mut [f64]) {
    let (j, p) = (g.taps(), g.positions());
    let rows = im2row(g, x);
    for a in 0..g.cy {
        let da = &mut dk[a * j..(a + 1) * j];
        for (q, &v) in y[a * p..(a + 1) * p].iter().enumerate() {
            if v != 0.0 {
                axpy(da, v, &rows[q * j..(q + 1) * j]);
            }
        }
    }
}

fn check_bias(bias: &Tensor, channels: usize) -> Result<()> {
    if bias.shape() != [channels] {
        return Err(Error::dim(format!("bias {:?} does not match {channels} output channels", bias.shape())));
    }
    Ok(())
}

fn plane_sums(grad: &[f64], channels: usize) -> Vec<f64> {
    let plane = grad.len() / channels;
    grad.chunks_exact(plane).map(|c| c.iter().sum()).collect()
}

fn fill_bias(bias: &Tensor, plane: usize) -> Vec<f64> {
    bias.data().iter().flat_map(|&b| std::iter::repeat_n(b, plane)).collect()
}

#[derive(Clone, Debug)]
pub struct ConvGrads {
    pub input: Tensor,
    pub kernels: Tensor,
    pub bias: Tensor,
}

/// Cross-correlation with zero padding: `input [C_in, H, W]`,
/// `kernels [C_out, C_in, k, k]`, `bias [C_out]`.
pub fn conv2d(input: &Tensor, kernels: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let g = Geometry::conv(input.shape(), kernels, stride, pad)?;
    check_bias(bias, g.cy)?;
    let mut y = fill_bias(bias, g.hy * g.wy);
    correlate(&g, input.data(), kernels.data(), &mut y);
    ensure_finite(&y, "conv2d")?;
    Ok(Tensor::from_parts(vec![g.cy, g.hy, g.wy], y))
}

pub fn conv2d_backward(
    input: &Tensor,
    kernels: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<ConvGrads> {
    let g = Geometry::conv(input.shape(), kernels, stride, pad)?;
    if grad_out.shape() != [g.cy, g.hy, g.wy] {
        return Err(Error::dim(format!(
            "conv2d gradient {:?} does not match output [{}, {}, {}]",
            grad_out.shape(),
            g.cy,
            g.hy,
            g.wy
        )));
    }
    let mut dx = vec![0.0; g.x_len()];
    scatter(&g, grad_out.data(), kernels.data(), &mut dx);
    let (dk, db) = conv_param_grads(&g, input, kernels, grad_out);
    Ok(ConvGrads { input: Tensor::from_parts(input.shape().to_vec(), dx), kernels: dk, bias: db })
}

/// Kernel and bias gradients only; used where the input is frozen data.
pub(crate) fn conv_param_grads(g: &Geometry, input: &Tensor, kernels: &Tensor, grad_out: &Tensor) -> (Tensor, Tensor) {
    let mut dk = vec![0.0; kernels.len()];
    kernel_grad(g, grad_out.data(), input.data(), &mut dk);
    let db = plane_sums(grad_out.data(), g.cy);
    (Tensor::from_parts(kernels.shape().to_vec(), dk), Tensor::from_parts(vec![g.cy], db))
}

/// Transposed convolution: the adjoint of [`conv2d`] with the same kernels
/// and geometry, plus a bias. `input [C_a, h, w]`, `kernels [C_a, C_b, k, k]`,
/// `bias [C_b]`, output `[C_b, (h-1)*stride + k - 2*pad, ...]`.
pub fn deconv2d(input: &Tensor, kernels: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let g = Geometry::deconv(input.shape(), kernels, stride, pad)?;
    check_bias(bias, g.cx)?;
    let mut x = fill_bias(bias, g.hx * g.wx);
    scatter(&g, input.data(), kernels.data(), &mut x);
    ensure_finite(&x, "deconv2d")?;
    Ok(Tensor::from_parts(vec![g.cx, g.hx, g.wx], x))
}

pub fn deconv2d_backward(
    input: &Tensor,
    kernels: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<ConvGrads> {
    deconv_backward_impl(input, kernels, grad_out, stride, pad, false)
}

/// As [`deconv2d_backward`], but the input gradient is only evaluated where
/// `input` is nonzero. Exact whenever the upstream layers discard gradient at
/// zero inputs (ReLU followed by unpooling does).
pub(crate) fn deconv2d_backward_sparse(
    input: &Tensor,
    kernels: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<ConvGrads> {
    deconv_backward_impl(input, kernels, grad_out, stride, pad, true)
}

fn deconv_backward_impl(
    input: &Tensor,
    kernels: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    pad: usize,
    sparse: bool,
) -> Result<ConvGrads> {
    let g = Geometry::deconv(input.shape(), kernels, stride, pad)?;
    if grad_out.shape() != [g.cx, g.hx, g.wx] {
        return Err(Error::dim(format!(
            "deconv2d gradient {:?} does not match output [{}, {}, {}]",
            grad_out.shape(),
            g.cx,
            g.hx,
            g.wx
        )));
    }
    let mut dy = vec![0.0; g.y_len()];
    if sparse {
        correlate_masked(&g, grad_out.data(), kernels.data(), input.data(), &mut dy);
    } else {
        correlate(&g, grad_out.data(), kernels.data(), &mut dy);
    }
    let mut dk = vec![0.0; kernels.len()];
    kernel_grad(&g, input.data(), grad_out.data(), &mut dk);
    let db = plane_sums(grad_out.data(), g.cx);
    Ok(ConvGrads {
        input: Tensor::from_parts(input.shape().to_vec(), dy),
        kernels: Tensor::from_parts(kernels.shape().to_vec(), dk),
        bias: Tensor::from_parts(vec![g.cx], db),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{random_normal, Rng};

    /// Direct transcription of the definition, one output at a time.
    fn naive_conv(x: &Tensor, kern: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (cx, hx, wx) = x.dims3().unwrap();
        let (cy, k) = (kern.shape()[0], kern.shape()[2]);
        let hy = (hx + 2 * pad - k) / stride + 1;
        let wy = (wx + 2 * pad - k) / stride + 1;
        let mut out = vec![0.0; cy * hy * wy];
        for a in 0..cy {
            for oy in 0..hy {
                for ox in 0..wy {
                    let mut s = bias.data()[a];
                    for b in 0..cx {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= hx as isize || ix >= wx as isize {
                                    continue;
                                }
                                s += kern.data()[((a * cx + b) * k + ky) * k + kx]
                                    * x.data()[(b * hx + iy as usize) * wx + ix as usize];
                            }
                        }
                    }
                    out[(a * hy + oy) * wy + ox] = s;
                }
            }
        }
        Tensor::new(&[cy, hy, wy], out).unwrap()
    }

    #[test]
    fn window_sums() {
        let x = Tensor::new(&[1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
        let k = Tensor::full(&[1, 1, 2, 2], 1.0);
        let y = conv2d(&x, &k, &Tensor::zeros(&[1]), 1, 0).unwrap();
        assert_eq!(y.data(), &[12., 16., 24., 28.]);
    }

    #[test]
    fn zero_kernel_gives_zero() {
        let mut rng = Rng::new(5);
        let x = random_normal(&[2, 6, 6], 0.0, 1.0, &mut rng).unwrap();
        let y = conv2d(&x, &Tensor::zeros(&[3, 2, 3, 3]), &Tensor::zeros(&[3]), 1, 1).unwrap();
        assert_eq!(y, Tensor::zeros(&[3, 6, 6]));
    }

    #[test]
    fn matches_naive_oracle() {
        let mut rng = Rng::new(11);
        for case in 0..50 {
            let (stride, pad) = [(1, 0), (1, 1), (2, 1), (2, 0), (1, 2)][case % 5];
            let h = 5 + if stride == 2 && (5 + 2 * pad - 3) % 2 != 0 { 1 } else { 0 };
            let x = random_normal(&[1 + case % 3, h, h], 0.0, 1.0, &mut rng).unwrap();
            let k = random_normal(&[2, 1 + case % 3, 3, 3], 0.0, 1.0, &mut rng).unwrap();
            let b = random_normal(&[2], 0.0, 1.0, &mut rng).unwrap();
            let fast = conv2d(&x, &k, &b, stride, pad).unwrap();
            let slow = naive_conv(&x, &k, &b, stride, pad);
            assert!(fast.sub(&slow).unwrap().max_abs() <= 1e-12, "case {case}");
        }
    }

    #[test]
    fn indivisible_geometry_is_config_error() {
        let x = Tensor::zeros(&[1, 4, 4]);
        let k = Tensor::zeros(&[1, 1, 3, 3]);
        assert!(matches!(conv2d(&x, &k, &Tensor::zeros(&[1]), 2, 0), Err(Error::Config(_))));
        assert!(matches!(conv2d(&x, &Tensor::zeros(&[1, 1, 5, 5]), &Tensor::zeros(&[1]), 1, 0), Err(Error::Config(_))));
        assert!(matches!(
            conv2d(&x, &Tensor::zeros(&[1, 2, 3, 3]), &Tensor::zeros(&[1]), 1, 0),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn deconv_is_adjoint_of_conv() {
        let mut rng = Rng::new(21);
        for case in 0..50 {
            let (stride, pad) = [(1, 1), (1, 0), (2, 0), (2, 1)][case % 4];
            let h = if stride == 2 { 7 } else { 6 };
            let x = random_normal(&[2, h, h], 0.0, 1.0, &mut rng).unwrap();
            let k = random_normal(&[3, 2, 3, 3], 0.0, 1.0, &mut rng).unwrap();
            let cx = conv2d(&x, &k, &Tensor::zeros(&[3]), stride, pad).unwrap();
            let y = random_normal(cx.shape(), 0.0, 1.0, &mut rng).unwrap();
            let dy = deconv2d(&y, &k, &Tensor::zeros(&[2]), stride, pad).unwrap();
            assert_eq!(dy.shape(), x.shape());
            let lhs = cx.dot(&y).unwrap();
            let rhs = x.dot(&dy).unwrap();
            let scale = 1.0f64.max(lhs.abs());
            assert!((lhs - rhs).abs() <= 1e-10 * scale, "case {case}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn deconv_basic_cases() {
        let k = Tensor::new(&[1, 1, 2, 2], vec![1., 2., 3., 4.]).unwrap();
        let v = Tensor::new(&[1, 1, 1], vec![2.5]).unwrap();
        let out = deconv2d(&v, &k, &Tensor::zeros(&[1]), 1, 0).unwrap();
        assert_eq!(out.data(), &[2.5, 5.0, 7.5, 10.0]);
        let bias = Tensor::new(&[2], vec![0.5, -1.0]).unwrap();
        let zero = deconv2d(&Tensor::zeros(&[1, 2, 2]), &Tensor::full(&[1, 2, 3, 3], 1.0), &bias, 1, 1).unwrap();
        assert_eq!(zero.data()[..4], [0.5; 4]);
        assert_eq!(zero.data()[4..], [-1.0; 4]);
    }

    #[test]
    fn sparse_backward_agrees_at_nonzero_inputs() {
        let mut rng = Rng::new(4);
        let mut x = random_normal(&[2, 4, 4], 0.0, 1.0, &mut rng).unwrap();
        for v in x.data_mut().iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        let k = random_normal(&[2, 3, 3, 3], 0.0, 1.0, &mut rng).unwrap();
        let go = random_normal(&[3, 4, 4], 0.0, 1.0, &mut rng).unwrap();
        let dense = deconv2d_backward(&x, &k, &go, 1, 1).unwrap();
        let sparse = deconv2d_backward_sparse(&x, &k, &go, 1, 1).unwrap();
        assert_eq!(dense.kernels, sparse.kernels);
        for ((&d, &s), &xi) in dense.input.data().iter().zip(sparse.input.data()).zip(x.data()) {
            if xi != 0.0 {
                assert!((d - s).abs() < 1e-12);
            } else {
                assert_eq!(s, 0.0);
            }
        }
    }
}
