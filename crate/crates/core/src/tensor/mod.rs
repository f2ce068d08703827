//! Dense row-major `f64` tensors and the handful of linear-algebra
//! primitives the rest of the crate is built on.
//!
//! Tensors are values: every operation returns a fresh tensor and leaves its
//! operands untouched. Reductions always run in ascending flat-index order so
//! results are bit-reproducible.

mod rng;
mod stf;

pub use rng::{derive_seed, Rng};
pub(crate) use stf::Cursor;
pub use stf::{read_stf, read_stf_bytes, write_stf, write_stf_bytes, STF_MAGIC};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

pub(crate) fn ensure_finite(data: &[f64], op: &'static str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(op))
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::dim("tensor rank must be at least 1"));
    }
    if shape.contains(&0) {
        return Err(Error::dim(format!("zero-sized dimension in shape {shape:?}")));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    /// Builds a tensor, validating the element count and finiteness.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != data.len() {
            return Err(Error::dim(format!("shape {shape:?} needs {n} values, got {}", data.len())));
        }
        ensure_finite(&data, "Tensor::new")?;
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    /// Internal constructor for data already known to be consistent.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    /// # Panics
    /// If `shape` is empty or contains a zero.
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    /// # Panics
    /// If `shape` is empty or contains a zero, or `value` is not finite.
    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = check_shape(shape).expect("valid shape");
        assert!(value.is_finite(), "fill value must be finite");
        Tensor { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Tensor { shape: other.shape.clone(), data: vec![0.0; other.data.len()] }
    }

    pub fn vector(values: &[f64]) -> Result<Self> {
        Self::new(&[values.len()], values.to_vec())
    }

    /// Row-major matrix from equal-length rows.
    pub fn matrix(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::dim("ragged matrix rows"));
        }
        Self::new(&[rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n = check_shape(shape)?;
        if n != self.data.len() {
            return Err(Error::dim(format!("cannot reshape {:?} into {shape:?}", self.shape)));
        }
        Ok(Tensor { shape: shape.to_vec(), data: self.data.clone() })
    }

    /// Rows and columns of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::dim(format!("expected a matrix, got shape {:?}", self.shape))),
        }
    }

    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [a, b, c] => Ok((a, b, c)),
            _ => Err(Error::dim(format!("expected a rank-3 tensor, got shape {:?}", self.shape))),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let cols = self.shape[self.shape.len() - 1];
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor::from_parts(vec![c, r], out))
    }

    fn same_shape(&self, other: &Tensor, op: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim(format!("{op}: shapes {:?} and {:?} differ", self.shape, other.shape)));
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "add")?;
        let data: Vec<f64> = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        ensure_finite(&data, "add")?;
        Ok(Tensor::from_parts(self.shape.clone(), data))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "sub")?;
        let data: Vec<f64> = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        ensure_finite(&data, "sub")?;
        Ok(Tensor::from_parts(self.shape.clone(), data))
    }

    pub fn scale(&self, k: f64) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|v| v * k).collect())
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Frobenius inner product.
    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if self.data.len() != other.data.len() {
            return Err(Error::dim(format!("dot: shapes {:?} and {:?} differ in size", self.shape, other.shape)));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Index of the largest entry; ties resolve to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        best
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }
}

/// Matrix product with `ikj` loop order: each output row accumulates the
/// scaled rows of `b` in ascending `k`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::dim(format!("matmul: inner dimensions disagree for {:?} x {:?}", a.shape(), b.shape())));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a.data[i * k + p];
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    ensure_finite(&out, "matmul")?;
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// `W x` for `W: [M x N]`, `x: [N]`.
pub fn matvec(w: &Tensor, x: &[f64]) -> Result<Vec<f64>> {
    let (m, n) = w.dims2()?;
    if x.len() != n {
        return Err(Error::dim(format!("matvec: {:?} times vector of length {}", w.shape(), x.len())));
    }
    Ok((0..m).map(|i| dot_slices(w.row(i), x)).collect())
}

/// `Wᵀ y` for `W: [M x N]`, `y: [M]`.
pub fn matvec_t(w: &Tensor, y: &[f64]) -> Result<Vec<f64>> {
    let (m, n) = w.dims2()?;
    if y.len() != m {
        return Err(Error::dim(format!("matvec_t: {:?} transposed times vector of length {}", w.shape(), y.len())));
    }
    let mut out = vec![0.0; n];
    for (i, &yi) in y.iter().enumerate() {
        if yi == 0.0 {
            continue;
        }
        for (o, &wv) in out.iter_mut().zip(w.row(i)) {
            *o += yi * wv;
        }
    }
    Ok(out)
}

/// Adds the outer product `y xᵀ` into `acc` (`[len(y) x len(x)]`, row-major).
pub(crate) fn outer_add(acc: &mut [f64], y: &[f64], x: &[f64]) {
    let n = x.len();
    for (i, &yi) in y.iter().enumerate() {
        if yi == 0.0 {
            continue;
        }
        for (a, &xv) in acc[i * n..(i + 1) * n].iter_mut().zip(x) {
            *a += yi * xv;
        }
    }
}

pub(crate) fn dot_slices(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Hadamard product of two identically shaped tensors.
pub fn elementwise_mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.same_shape(b, "elementwise_mul")?;
    let data: Vec<f64> = a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect();
    ensure_finite(&data, "elementwise_mul")?;
    Ok(Tensor::from_parts(a.shape.clone(), data))
}

pub(crate) fn softmax_slice(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|&x| libm::exp(x - max)).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `log Σ exp(v)` with max subtraction.
pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = v.iter().map(|&x| libm::exp(x - max)).sum();
    max + libm::log(total)
}

/// Softmax over all entries of `v` (treated as a flat vector).
pub fn softmax(v: &Tensor) -> Result<Tensor> {
    ensure_finite(&v.data, "softmax input")?;
    let out = softmax_slice(&v.data);
    ensure_finite(&out, "softmax")?;
    Ok(Tensor::from_parts(v.shape.clone(), out))
}

/// I.i.d. normal draws (Box–Muller, one draw per pair of uniforms).
pub fn random_normal(shape: &[usize], mean: f64, std: f64, rng: &mut Rng) -> Result<Tensor> {
    if !(std >= 0.0) || !std.is_finite() {
        return Err(Error::arg(format!("standard deviation must be finite and non-negative, got {std}")));
    }
    if !mean.is_finite() {
        return Err(Error::arg("mean must be finite"));
    }
    let n = check_shape(shape)?;
    let data = (0..n).map(|_| mean + std * rng.normal()).collect();
    Ok(Tensor::from_parts(shape.to_vec(), data))
}
