//! Dense row-major float32 tensor and the primitive numeric kernels.
//!
//! Activations are always float32; integer storage exists only for weights
//! (see [`crate::quant`]). Layout is contiguous row-major with no strided
//! views, so `reshape` is a metadata-only operation.

use crate::error::{Error, Result};

pub const MAX_RANK: usize = 4;

/// Dense n-dimensional float32 array, rank 1..=4, contiguous row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

fn validate_shape(op: &'static str, shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > MAX_RANK {
        return Err(Error::InvalidShape {
            op,
            shape: shape.to_vec(),
            reason: format!("rank must be 1..={MAX_RANK}"),
        });
    }
    if shape.contains(&0) {
        return Err(Error::InvalidShape {
            op,
            shape: shape.to_vec(),
            reason: "shape entries must be >= 1".into(),
        });
    }
    Ok(())
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        validate_shape("Tensor::new", shape)?;
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::InvalidShape {
                op: "Tensor::new",
                shape: shape.to_vec(),
                reason: format!("shape wants {expected} elements, buffer has {}", data.len()),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// All-zero tensor. Panics on an invalid shape; shapes here come from
    /// already-validated configs.
    pub fn zeros(shape: &[usize]) -> Self {
        validate_shape("Tensor::zeros", shape).expect("valid shape");
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f32) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Total element count.
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Metadata-only reshape; element count must be unchanged.
    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        validate_shape("reshape", shape)?;
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(Error::InvalidShape {
                op: "reshape",
                shape: shape.to_vec(),
                reason: format!("cannot view {} elements as {shape:?}", self.data.len()),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data,
        })
    }

    /// Row count of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        debug_assert_eq!(self.rank(), 2);
        self.shape[0]
    }

    /// Column count of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        debug_assert_eq!(self.rank(), 2);
        self.shape[1]
    }

    /// Borrow row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f32] {
        let w = self.cols();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        let w = self.cols();
        &mut self.data[i * w..(i + 1) * w]
    }

    /// Element accessor for tests and small-scale code; not a hot path.
    pub fn at(&self, index: &[usize]) -> f32 {
        assert_eq!(index.len(), self.rank());
        let mut flat = 0;
        for (i, &ix) in index.iter().enumerate() {
            assert!(
                ix < self.shape[i],
                "index {index:?} out of {:?}",
                self.shape
            );
            flat = flat * self.shape[i] + ix;
        }
        self.data[flat]
    }

    /// Elementwise map into a new tensor.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }
}

/// Elementwise `a += b`; shapes must match exactly.
pub fn add_inplace(a: &mut Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::ShapeMismatch {
            op: "add",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    for (x, y) in a.data.iter_mut().zip(&b.data) {
        *x += y;
    }
    Ok(())
}

/// `c[i,j] = Σ_k a[i,k]·b[k,j]` with f32 accumulation.
///
/// Streams rows of `b` so both operands are read sequentially. Parallelism
/// kicks in only when [`crate::set_threads`] raised the thread cap; each
/// output element is still accumulated in a fixed order, so results are
/// bitwise reproducible at any thread count.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows() {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0f32; m * n];
    matmul_into(&mut out, a.data(), b.data(), m, k, n);
    Tensor::new(&[m, n], out)
}

fn matmul_row(dst: &mut [f32], a_row: &[f32], b: &[f32], n: usize) {
    for (kk, &axk) in a_row.iter().enumerate() {
        if axk == 0.0 {
            continue;
        }
        let b_row = &b[kk * n..(kk + 1) * n];
        for (d, &bv) in dst.iter_mut().zip(b_row) {
            *d += axk * bv;
        }
    }
}

pub(crate) fn matmul_into(out: &mut [f32], a: &[f32], b: &[f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(out.len(), m * n);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let threads = crate::thread_count();
    if threads > 1 && m > 1 {
        use rayon::prelude::*;
        out.par_chunks_mut(n)
            .zip(a.par_chunks(k))
            .for_each(|(dst, a_row)| matmul_row(dst, a_row, b, n));
    } else if threads > 1 && m == 1 {
        use rayon::prelude::*;
        let chunk = n.div_ceil(threads).max(1);
        out.par_chunks_mut(chunk).enumerate().for_each(|(ci, dst)| {
            let j0 = ci * chunk;
            for (kk, &axk) in a.iter().enumerate() {
                if axk == 0.0 {
                    continue;
                }
                let b_row = &b[kk * n + j0..kk * n + j0 + dst.len()];
                for (d, &bv) in dst.iter_mut().zip(b_row) {
                    *d += axk * bv;
                }
            }
        });
    } else {
        for (dst, a_row) in out.chunks_mut(n).zip(a.chunks(k)) {
            matmul_row(dst, a_row, b, n);
        }
    }
}

/// Numerically stable softmax along `axis`; lanes sum to 1.
///
/// Internally evaluated in f64 after max subtraction. A NaN anywhere in the
/// input is refused instead of silently propagating.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.rank() {
        return Err(Error::InvalidAxis {
            op: "softmax",
            axis,
            rank: x.rank(),
        });
    }
    if x.data.iter().any(|v| v.is_nan()) {
        return Err(Error::NanInput { op: "softmax" });
    }
    let lane = x.shape[axis];
    let inner: usize = x.shape[axis + 1..].iter().product();
    let outer: usize = x.shape[..axis].iter().product();

    let mut out = vec![0.0f32; x.data.len()];
    let mut scratch = vec![0.0f64; lane];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * lane * inner + i;
            let mut max = f64::NEG_INFINITY;
            for l in 0..lane {
                max = max.max(f64::from(x.data[base + l * inner]));
            }
            let mut sum = 0.0f64;
            for l in 0..lane {
                let e = (f64::from(x.data[base + l * inner]) - max).exp();
                scratch[l] = e;
                sum += e;
            }
            for l in 0..lane {
                out[base + l * inner] = (scratch[l] / sum) as f32;
            }
        }
    }
    Tensor::new(&x.shape, out)
}

/// Stable softmax over a single f32 slice, in place. Used by attention rows.
pub(crate) fn softmax_slice(row: &mut [f32]) {
    let mut max = f64::NEG_INFINITY;
    for &v in row.iter() {
        max = max.max(f64::from(v));
    }
    let mut sum = 0.0f64;
    let mut exps = vec![0.0f64; row.len()];
    for (e, &v) in exps.iter_mut().zip(row.iter()) {
        *e = (f64::from(v) - max).exp();
        sum += *e;
    }
    for (v, e) in row.iter_mut().zip(exps) {
        *v = (e / sum) as f32;
    }
}

/// Error function, Abramowitz & Stegun 7.1.26 rational approximation
/// evaluated in f64 (max absolute error ~1.5e-7).
pub(crate) fn erf(x: f64) -> f64 {
    const A1: f64 = 0.254829592;
    const A2: f64 = -0.284496736;
    const A3: f64 = 1.421413741;
    const A4: f64 = -1.453152027;
    const A5: f64 = 1.061405429;
    const P: f64 = 0.3275911;

    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let x = x.abs();
    let t = 1.0 / (1.0 + P * x);
    let y = 1.0 - (((((A5 * t + A4) * t) + A3) * t + A2) * t + A1) * t * (-x * x).exp();
    sign * y
}

/// Exact-erf GELU: `x · Φ(x)` with `Φ(x) = (1 + erf(x/√2)) / 2`.
pub fn gelu(x: &Tensor) -> Tensor {
    x.map(|v| {
        let v64 = f64::from(v);
        let phi = 0.5 * (1.0 + erf(v64 / std::f64::consts::SQRT_2));
        (v64 * phi) as f32
    })
}

/// SiLU: `x · sigmoid(x)`, the gate nonlinearity of SwiGLU.
pub fn silu(x: &Tensor) -> Tensor {
    x.map(|v| {
        let v64 = f64::from(v);
        (v64 / (1.0 + (-v64).exp())) as f32
    })
}

pub(crate) fn silu_scalar(v: f32) -> f32 {
    let v64 = f64::from(v);
    (v64 / (1.0 + (-v64).exp())) as f32
}
