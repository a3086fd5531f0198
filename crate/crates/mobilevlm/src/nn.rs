//! Reusable neural building blocks: RMSNorm, LayerNorm, rotary position
//! embeddings, causal multi-head attention with an appendable KV buffer,
//! the SwiGLU feed-forward, and pointwise / depthwise convolutions on token
//! grids.
//!
//! All parameter types are read-only after construction and safe to share
//! across workers. An [`AttentionCache`] belongs to exactly one decoding
//! session.

use crate::error::{Error, Result};
use crate::quant::{quantized_matmul, QuantizedTensor};
use crate::tensor::{matmul, silu_scalar, softmax_slice, Tensor};

/// Shared normalization epsilon. The reference formulas use the same value.
pub const NORM_EPSILON: f32 = 1e-5;

/// Default rotary angular base.
pub const ROPE_BASE: f32 = 10_000.0;

/// A matmul weight that is either dense f32 or group-quantized storage.
#[derive(Debug, Clone)]
pub enum Linear {
    Dense(Tensor),
    Quant(QuantizedTensor),
}

impl Linear {
    /// `[in_dim, out_dim]` of the underlying matrix.
    pub fn shape(&self) -> [usize; 2] {
        match self {
            Linear::Dense(t) => [t.rows(), t.cols()],
            Linear::Quant(q) => q.logical_shape(),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.shape()[1]
    }

    pub fn param_count(&self) -> usize {
        let [m, n] = self.shape();
        m * n
    }

    pub fn storage_bytes(&self) -> usize {
        match self {
            Linear::Dense(t) => t.len() * 4,
            Linear::Quant(q) => q.storage_bytes(),
        }
    }

    pub fn dense(&self) -> Option<&Tensor> {
        match self {
            Linear::Dense(t) => Some(t),
            Linear::Quant(_) => None,
        }
    }

    /// `x · W`, dispatching to the fused kernel for quantized storage.
    pub fn matmul(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Linear::Dense(t) => matmul(x, t),
            Linear::Quant(q) => quantized_matmul(x, q),
        }
    }

    /// Copy row `i` as f32, dequantizing if needed. Embedding lookup path.
    pub fn row_f32(&self, i: usize, out: &mut [f32]) {
        match self {
            Linear::Dense(t) => out.copy_from_slice(t.row(i)),
            Linear::Quant(q) => q.dequantize_row_into(i, out),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RmsNormParams {
    pub gain: Tensor,
    pub epsilon: f32,
}

impl RmsNormParams {
    pub fn unit(dim: usize) -> Self {
        Self {
            gain: Tensor::filled(&[dim], 1.0),
            epsilon: NORM_EPSILON,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNormParams {
    pub gain: Tensor,
    pub bias: Tensor,
    pub epsilon: f32,
}

impl LayerNormParams {
    pub fn identity(dim: usize) -> Self {
        Self {
            gain: Tensor::filled(&[dim], 1.0),
            bias: Tensor::zeros(&[dim]),
            epsilon: NORM_EPSILON,
        }
    }
}

/// Precomputed rotation table: `cos/sin[pos][i]` for the angle
/// `pos · base^(-2i/head_dim)`, adjacent-pair convention.
#[derive(Debug, Clone)]
pub struct RopeTable {
    pub base: f32,
    pub head_dim: usize,
    pub max_positions: usize,
    cos: Vec<f32>,
    sin: Vec<f32>,
}

impl RopeTable {
    pub fn new(base: f32, head_dim: usize, max_positions: usize) -> Result<Self> {
        if head_dim == 0 || head_dim % 2 != 0 {
            return Err(Error::InvalidShape {
                op: "RopeTable::new",
                shape: vec![head_dim],
                reason: "head_dim must be even and positive".into(),
            });
        }
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(max_positions * half);
        let mut sin = Vec::with_capacity(max_positions * half);
        for pos in 0..max_positions {
            for i in 0..half {
                let freq = f64::from(base).powf(-2.0 * i as f64 / head_dim as f64);
                let angle = pos as f64 * freq;
                cos.push(angle.cos() as f32);
                sin.push(angle.sin() as f32);
            }
        }
        Ok(Self {
            base,
            head_dim,
            max_positions,
            cos,
            sin,
        })
    }

    fn pair(&self, pos: usize, i: usize) -> (f32, f32) {
        let idx = pos * (self.head_dim / 2) + i;
        (self.cos[idx], self.sin[idx])
    }
}

#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub num_heads: usize,
}

impl AttentionParams {
    pub fn dim(&self) -> usize {
        self.wq.in_dim()
    }

    pub fn head_dim(&self) -> usize {
        self.dim() / self.num_heads
    }

    fn validate(&self) -> Result<()> {
        let d = self.dim();
        for (name, w) in [
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
        ] {
            let [i, o] = w.shape();
            if i != d || o != d {
                return Err(Error::InvalidShape {
                    op: "causal_attention",
                    shape: vec![i, o],
                    reason: format!("{name} must be [{d}, {d}]"),
                });
            }
        }
        if self.num_heads == 0 || d % self.num_heads != 0 {
            return Err(Error::InvalidShape {
                op: "causal_attention",
                shape: vec![d, self.num_heads],
                reason: "model width must divide evenly into heads".into(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SwigluParams {
    pub w_gate: Linear,
    pub w_up: Linear,
    pub w_down: Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvKind {
    /// 1x1 cross-channel mix; weight `[c_in, c_out]`, stride always 1.
    Pointwise,
    /// Per-channel k×k spatial filter; weight `[c, k, k]`.
    Depthwise,
}

#[derive(Debug, Clone)]
pub struct ConvParams {
    pub kind: ConvKind,
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub padding: usize,
}

/// Per-block key/value buffer for one attention layer of a decoding session.
///
/// Rows are `[filled, num_heads, head_dim]`, appended as tokens arrive.
#[derive(Debug, Clone)]
pub struct AttentionCache {
    k: Vec<f32>,
    v: Vec<f32>,
    filled: usize,
    capacity: usize,
    num_heads: usize,
    head_dim: usize,
}

impl AttentionCache {
    pub fn new(capacity: usize, num_heads: usize, head_dim: usize) -> Self {
        Self {
            k: Vec::new(),
            v: Vec::new(),
            filled: 0,
            capacity,
            num_heads,
            head_dim,
        }
    }

    pub fn filled(&self) -> usize {
        self.filled
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn clear(&mut self) {
        self.k.clear();
        self.v.clear();
        self.filled = 0;
    }

    fn token_width(&self) -> usize {
        self.num_heads * self.head_dim
    }

    fn key_row(&self, pos: usize, head: usize) -> &[f32] {
        let w = self.token_width();
        let base = pos * w + head * self.head_dim;
        &self.k[base..base + self.head_dim]
    }

    fn value_row(&self, pos: usize, head: usize) -> &[f32] {
        let w = self.token_width();
        let base = pos * w + head * self.head_dim;
        &self.v[base..base + self.head_dim]
    }
}

/// Per-row `x / sqrt(mean(x²) + ε) · gain`.
pub fn rms_norm(x: &Tensor, p: &RmsNormParams) -> Result<Tensor> {
    if x.rank() != 2 || x.cols() != p.gain.len() {
        return Err(Error::ShapeMismatch {
            op: "rms_norm",
            left: x.shape().to_vec(),
            right: p.gain.shape().to_vec(),
        });
    }
    let d = x.cols();
    let gain = p.gain.data();
    let mut out = vec![0.0f32; x.len()];
    for (dst, row) in out.chunks_mut(d).zip(x.data().chunks(d)) {
        let mean_sq = row
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            / d as f64;
        let inv = 1.0 / (mean_sq + f64::from(p.epsilon)).sqrt();
        for ((o, &v), &g) in dst.iter_mut().zip(row).zip(gain) {
            *o = (f64::from(v) * inv) as f32 * g;
        }
    }
    Tensor::new(x.shape(), out)
}

/// Per-row mean/variance normalization, then affine `· gain + bias`.
pub fn layer_norm(x: &Tensor, p: &LayerNormParams) -> Result<Tensor> {
    if x.rank() != 2 || x.cols() != p.gain.len() || p.gain.len() != p.bias.len() {
        return Err(Error::ShapeMismatch {
            op: "layer_norm",
            left: x.shape().to_vec(),
            right: p.gain.shape().to_vec(),
        });
    }
    let d = x.cols();
    let gain = p.gain.data();
    let bias = p.bias.data();
    let mut out = vec![0.0f32; x.len()];
    for (dst, row) in out.chunks_mut(d).zip(x.data().chunks(d)) {
        let mean = row.iter().map(|&v| f64::from(v)).sum::<f64>() / d as f64;
        let var = row
            .iter()
            .map(|&v| {
                let c = f64::from(v) - mean;
                c * c
            })
            .sum::<f64>()
            / d as f64;
        let inv = 1.0 / (var + f64::from(p.epsilon)).sqrt();
        for (i, (o, &v)) in dst.iter_mut().zip(row).enumerate() {
            *o = ((f64::from(v) - mean) * inv) as f32 * gain[i] + bias[i];
        }
    }
    Tensor::new(x.shape(), out)
}

/// Rotate each adjacent pair `(x_{2i}, x_{2i+1})` of every head by the
/// position's table angle. Input is `[n, heads, head_dim]`.
pub fn apply_rope(x: &Tensor, positions: &[usize], table: &RopeTable) -> Result<Tensor> {
    if x.rank() != 3 || x.shape()[2] != table.head_dim {
        return Err(Error::ShapeMismatch {
            op: "apply_rope",
            left: x.shape().to_vec(),
            right: vec![table.head_dim],
        });
    }
    if x.shape()[0] != positions.len() {
        return Err(Error::ShapeMismatch {
            op: "apply_rope",
            left: x.shape().to_vec(),
            right: vec![positions.len()],
        });
    }
    if let Some(&p) = positions.iter().find(|&&p| p >= table.max_positions) {
        return Err(Error::PositionOutOfRange {
            position: p,
            max_positions: table.max_positions,
        });
    }
    let (n, heads, hd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = x.data().to_vec();
    for t in 0..n {
        let pos = positions[t];
        for h in 0..heads {
            let base = (t * heads + h) * hd;
            for i in 0..hd / 2 {
                let (c, s) = table.pair(pos, i);
                let x0 = out[base + 2 * i];
                let x1 = out[base + 2 * i + 1];
                out[base + 2 * i] = x0 * c - x1 * s;
                out[base + 2 * i + 1] = x0 * s + x1 * c;
            }
        }
    }
    Tensor::new(x.shape(), out)
}

fn rope_in_place(
    data: &mut [f32],
    n: usize,
    heads: usize,
    hd: usize,
    start_pos: usize,
    table: &RopeTable,
) -> Result<()> {
    if start_pos + n > table.max_positions {
        return Err(Error::PositionOutOfRange {
            position: start_pos + n - 1,
            max_positions: table.max_positions,
        });
    }
    for t in 0..n {
        let pos = start_pos + t;
        for h in 0..heads {
            let base = (t * heads + h) * hd;
            for i in 0..hd / 2 {
                let (c, s) = table.pair(pos, i);
                let x0 = data[base + 2 * i];
                let x1 = data[base + 2 * i + 1];
                data[base + 2 * i] = x0 * c - x1 * s;
                data[base + 2 * i + 1] = x0 * s + x1 * c;
            }
        }
    }
    Ok(())
}

/// Causal multi-head self-attention over `x: [n, d]`.
///
/// With a cache, `x` holds only the new positions; keys and values are
/// appended and positions continue from the cache fill. Without a cache the
/// call is a single-shot full forward. Both paths run the same arithmetic,
/// so chunked and whole-sequence evaluation agree bitwise.
pub fn causal_attention(
    x: &Tensor,
    p: &AttentionParams,
    rope: &RopeTable,
    cache: Option<&mut AttentionCache>,
) -> Result<Tensor> {
    p.validate()?;
    let d = p.dim();
    if x.rank() != 2 || x.cols() != d {
        return Err(Error::ShapeMismatch {
            op: "causal_attention",
            left: x.shape().to_vec(),
            right: vec![d, d],
        });
    }
    let n = x.rows();
    let heads = p.num_heads;
    let hd = p.head_dim();
    if rope.head_dim != hd {
        return Err(Error::ShapeMismatch {
            op: "causal_attention rope",
            left: vec![hd],
            right: vec![rope.head_dim],
        });
    }

    let mut scratch;
    let cache = match cache {
        Some(c) => {
            if c.num_heads != heads || c.head_dim != hd {
                return Err(Error::ShapeMismatch {
                    op: "causal_attention cache",
                    left: vec![heads, hd],
                    right: vec![c.num_heads, c.head_dim],
                });
            }
            c
        }
        None => {
            scratch = AttentionCache::new(n, heads, hd);
            &mut scratch
        }
    };
    let start = cache.filled;
    if start + n > cache.capacity {
        return Err(Error::ContextOverflow {
            requested: n,
            filled: start,
            capacity: cache.capacity,
        });
    }

    let mut q = p.wq.matmul(x)?.into_data();
    let mut k = p.wk.matmul(x)?.into_data();
    let v = p.wv.matmul(x)?.into_data();
    rope_in_place(&mut q, n, heads, hd, start, rope)?;
    rope_in_place(&mut k, n, heads, hd, start, rope)?;
    cache.k.extend_from_slice(&k);
    cache.v.extend_from_slice(&v);
    cache.filled += n;

    let scale = 1.0 / (hd as f32).sqrt();
    let mut ctx = vec![0.0f32; n * d];
    let mut scores = Vec::new();
    for t in 0..n {
        let visible = start + t + 1;
        for h in 0..heads {
            let q_row = &q[(t * heads + h) * hd..(t * heads + h) * hd + hd];
            scores.resize(visible, 0.0);
            for (j, s) in scores.iter_mut().enumerate() {
                let k_row = cache.key_row(j, h);
                let mut dot = 0.0f32;
                for (a, b) in q_row.iter().zip(k_row) {
                    dot += a * b;
                }
                *s = dot * scale;
            }
            softmax_slice(&mut scores);
            let dst = &mut ctx[t * d + h * hd..t * d + (h + 1) * hd];
            for (j, &w) in scores.iter().enumerate() {
                let v_row = cache.value_row(j, h);
                for (o, &vv) in dst.iter_mut().zip(v_row) {
                    *o += w * vv;
                }
            }
        }
    }
    p.wo.matmul(&Tensor::new(&[n, d], ctx)?)
}

/// `w_down( silu(x·w_gate) ⊙ (x·w_up) )`.
pub fn swiglu_ffn(x: &Tensor, p: &SwigluParams) -> Result<Tensor> {
    if x.rank() != 2 || x.cols() != p.w_gate.in_dim() {
        return Err(Error::ShapeMismatch {
            op: "swiglu_ffn",
            left: x.shape().to_vec(),
            right: p.w_gate.shape().to_vec(),
        });
    }
    if p.w_gate.shape() != p.w_up.shape() || p.w_up.out_dim() != p.w_down.in_dim() {
        return Err(Error::ShapeMismatch {
            op: "swiglu_ffn",
            left: p.w_gate.shape().to_vec(),
            right: p.w_down.shape().to_vec(),
        });
    }
    let mut gate = p.w_gate.matmul(x)?;
    let up = p.w_up.matmul(x)?;
    for (g, &u) in gate.data_mut().iter_mut().zip(up.data()) {
        *g = silu_scalar(*g) * u;
    }
    p.w_down.matmul(&gate)
}

/// Convolution over a `[h, w, c]` token grid.
///
/// Pointwise mixes channels per position and never strides. Depthwise
/// filters each channel independently with a k×k kernel, `padding = (k-1)/2`,
/// stride 1 (same shape) or 2 (`ceil(h/2) × ceil(w/2)`).
pub fn conv_on_grid(x: &Tensor, p: &ConvParams) -> Result<Tensor> {
    if x.rank() != 3 {
        return Err(Error::InvalidShape {
            op: "conv_on_grid",
            shape: x.shape().to_vec(),
            reason: "expected [h, w, c] grid".into(),
        });
    }
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    match p.kind {
        ConvKind::Pointwise => {
            if p.stride != 1 {
                return Err(Error::InvalidShape {
                    op: "conv_on_grid",
                    shape: vec![p.stride],
                    reason: "pointwise stride must be 1".into(),
                });
            }
            if p.weight.rank() != 2 || p.weight.rows() != c {
                return Err(Error::ShapeMismatch {
                    op: "conv_on_grid",
                    left: x.shape().to_vec(),
                    right: p.weight.shape().to_vec(),
                });
            }
            let c_out = p.weight.cols();
            let flat = Tensor::new(&[h * w, c], x.data().to_vec())?;
            let mut y = matmul(&flat, &p.weight)?;
            if let Some(bias) = &p.bias {
                if bias.len() != c_out {
                    return Err(Error::ShapeMismatch {
                        op: "conv_on_grid bias",
                        left: vec![c_out],
                        right: bias.shape().to_vec(),
                    });
                }
                for row in y.data_mut().chunks_mut(c_out) {
                    for (o, &b) in row.iter_mut().zip(bias.data()) {
                        *o += b;
                    }
                }
            }
            y.reshape(&[h, w, c_out])
        }
        ConvKind::Depthwise => {
            if p.weight.rank() != 3 || p.weight.shape()[0] != c {
                return Err(Error::ShapeMismatch {
                    op: "conv_on_grid",
                    left: x.shape().to_vec(),
                    right: p.weight.shape().to_vec(),
                });
            }
            let k = p.weight.shape()[1];
            if k != p.weight.shape()[2] || k == 0 {
                return Err(Error::InvalidShape {
                    op: "conv_on_grid",
                    shape: p.weight.shape().to_vec(),
                    reason: "depthwise kernel must be square".into(),
                });
            }
            if k % 2 == 0 {
                return Err(Error::EvenKernel { kernel: k });
            }
            if p.padding != (k - 1) / 2 {
                return Err(Error::InvalidShape {
                    op: "conv_on_grid",
                    shape: vec![p.padding],
                    reason: format!("depthwise padding must be (k-1)/2 = {}", (k - 1) / 2),
                });
            }
            if p.stride != 1 && p.stride != 2 {
                return Err(Error::InvalidShape {
                    op: "conv_on_grid",
                    shape: vec![p.stride],
                    reason: "stride must be 1 or 2".into(),
                });
            }
            if let Some(bias) = &p.bias {
                if bias.len() != c {
                    return Err(Error::ShapeMismatch {
                        op: "conv_on_grid bias",
                        left: vec![c],
                        right: bias.shape().to_vec(),
                    });
                }
            }

            let pad = p.padding as isize;
            let h_out = h.div_ceil(p.stride);
            let w_out = w.div_ceil(p.stride);
            let mut out = vec![0.0f32; h_out * w_out * c];
            for oy in 0..h_out {
                for ox in 0..w_out {
                    for ch in 0..c {
                        let mut acc = 0.0f32;
                        for ky in 0..k {
                            let iy = (oy * p.stride) as isize + ky as isize - pad;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * p.stride) as isize + kx as isize - pad;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let xv = x.data()[(iy as usize * w + ix as usize) * c + ch];
                                let wv = p.weight.data()[(ch * k + ky) * k + kx];
                                acc += xv * wv;
                            }
                        }
                        if let Some(bias) = &p.bias {
                            acc += bias.data()[ch];
                        }
                        out[(oy * w_out + ox) * c + ch] = acc;
                    }
                }
            }
            Tensor::new(&[h_out, w_out, c], out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use crate::rng::SplitMix64;

    fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = SplitMix64::new(seed);
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.next_range(-1.0, 1.0)).collect()).unwrap()
    }

    fn random_attention(d: usize, heads: usize, seed: u64) -> AttentionParams {
        let mut rng = SplitMix64::new(seed);
        let mut w = || {
            let data = (0..d * d).map(|_| rng.next_range(-0.3, 0.3)).collect();
            Linear::Dense(Tensor::new(&[d, d], data).unwrap())
        };
        AttentionParams {
            wq: w(),
            wk: w(),
            wv: w(),
            wo: w(),
            num_heads: heads,
        }
    }

    #[test]
    fn rms_norm_zero_row_stays_zero() {
        let x = Tensor::zeros(&[1, 4]);
        let y = rms_norm(&x, &RmsNormParams::unit(4)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rms_norm_hand_value() {
        let x = Tensor::new(&[1, 2], vec![3.0, 4.0]).unwrap();
        let p = RmsNormParams {
            gain: Tensor::filled(&[2], 1.0),
            epsilon: 1e-12,
        };
        let y = rms_norm(&x, &p).unwrap();
        // mean square = 12.5
        assert!((y.data()[0] - 3.0 / 12.5f32.sqrt()).abs() < 1e-6);
        assert!((y.data()[1] - 4.0 / 12.5f32.sqrt()).abs() < 1e-6);
        let r = oracle::rms_norm_row(&[3.0, 4.0], &[1.0, 1.0], 1e-12);
        for (a, b) in y.data().iter().zip(r) {
            assert!((f64::from(*a) - b).abs() < 1e-6);
        }
    }

    #[test]
    fn rms_norm_scale_invariance() {
        let x = random_tensor(&[3, 8], 31);
        let scaled = x.map(|v| v * 7.3);
        let p = RmsNormParams {
            gain: Tensor::filled(&[8], 1.0),
            epsilon: 1e-12,
        };
        let a = rms_norm(&x, &p).unwrap();
        let b = rms_norm(&scaled, &p).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn rms_norm_unit_gain_output_has_unit_mean_square() {
        let x = random_tensor(&[4, 16], 32);
        let y = rms_norm(&x, &RmsNormParams::unit(16)).unwrap();
        for i in 0..4 {
            let ms: f32 = y.row(i).iter().map(|v| v * v).sum::<f32>() / 16.0;
            assert!((ms - 1.0).abs() < 1e-4, "row mean square {ms}");
        }
    }

    #[test]
    fn rms_norm_dimension_mismatch() {
        let x = random_tensor(&[2, 4], 33);
        assert!(matches!(
            rms_norm(&x, &RmsNormParams::unit(5)),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn layer_norm_constant_row_is_bias() {
        let x = Tensor::filled(&[1, 6], 3.25);
        let y = layer_norm(&x, &LayerNormParams::identity(6)).unwrap();
        for &v in y.data() {
            assert!(v.abs() < 1e-4);
        }
    }

    #[test]
    fn layer_norm_two_point_symmetry() {
        let x = Tensor::new(&[1, 2], vec![1.0, 3.0]).unwrap();
        let p = LayerNormParams {
            gain: Tensor::filled(&[2], 1.0),
            bias: Tensor::zeros(&[2]),
            epsilon: 1e-12,
        };
        let y = layer_norm(&x, &p).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-5);
        assert!((y.data()[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn layer_norm_matches_oracle() {
        let x = random_tensor(&[4, 8], 34);
        let p = LayerNormParams::identity(8);
        let y = layer_norm(&x, &p).unwrap();
        for i in 0..4 {
            let r = oracle::layer_norm_row(x.row(i), p.gain.data(), p.bias.data(), p.epsilon);
            for (a, b) in y.row(i).iter().zip(r) {
                assert!((f64::from(*a) - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn layer_norm_output_is_standardized() {
        let x = random_tensor(&[3, 32], 35);
        let y = layer_norm(&x, &LayerNormParams::identity(32)).unwrap();
        for i in 0..3 {
            let mean: f32 = y.row(i).iter().sum::<f32>() / 32.0;
            let var: f32 = y
                .row(i)
                .iter()
                .map(|v| (v - mean) * (v - mean))
                .sum::<f32>()
                / 32.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn rope_position_zero_is_identity() {
        let table = RopeTable::new(ROPE_BASE, 8, 16).unwrap();
        let x = random_tensor(&[2, 2, 8], 36);
        let y = apply_rope(&x, &[0, 0], &table).unwrap();
        assert_eq!(x.data(), y.data());
    }

    #[test]
    fn rope_closed_form_single_pair() {
        let table = RopeTable::new(ROPE_BASE, 2, 4).unwrap();
        let x = Tensor::new(&[1, 1, 2], vec![1.0, 0.0]).unwrap();
        let y = apply_rope(&x, &[1], &table).unwrap();
        assert!((f64::from(y.data()[0]) - 1f64.cos()).abs() < 1e-6);
        assert!((f64::from(y.data()[1]) - 1f64.sin()).abs() < 1e-6);
    }

    #[test]
    fn rope_rejects_out_of_table_positions() {
        let table = RopeTable::new(ROPE_BASE, 4, 4).unwrap();
        let x = random_tensor(&[1, 1, 4], 37);
        assert!(matches!(
            apply_rope(&x, &[4], &table),
            Err(Error::PositionOutOfRange { .. })
        ));
    }

    #[test]
    fn rope_dot_products_depend_only_on_position_difference() {
        let table = RopeTable::new(ROPE_BASE, 8, 16).unwrap();
        let q = random_tensor(&[1, 1, 8], 38);
        let k = random_tensor(&[1, 1, 8], 39);
        let dot = |a: &Tensor, b: &Tensor| -> f64 {
            a.data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| f64::from(*x) * f64::from(*y))
                .sum()
        };
        let d1 = dot(
            &apply_rope(&q, &[5], &table).unwrap(),
            &apply_rope(&k, &[2], &table).unwrap(),
        );
        let d2 = dot(
            &apply_rope(&q, &[8], &table).unwrap(),
            &apply_rope(&k, &[5], &table).unwrap(),
        );
        assert!((d1 - d2).abs() < 1e-6, "{d1} vs {d2}");
        // And the oracle's closed-form rotation agrees.
        let r = oracle::rope_rotate(q.data(), 5, 8, f64::from(ROPE_BASE));
        let e = apply_rope(&q, &[5], &table).unwrap();
        for (a, b) in e.data().iter().zip(r) {
            assert!((f64::from(*a) - b).abs() < 1e-6);
        }
    }

    #[test]
    fn rope_preserves_pair_norms() {
        let table = RopeTable::new(ROPE_BASE, 8, 32).unwrap();
        let x = random_tensor(&[3, 2, 8], 40);
        let y = apply_rope(&x, &[3, 17, 31], &table).unwrap();
        for (xp, yp) in x.data().chunks(2).zip(y.data().chunks(2)) {
            let nx = (xp[0] * xp[0] + xp[1] * xp[1]).sqrt();
            let ny = (yp[0] * yp[0] + yp[1] * yp[1]).sqrt();
            assert!((nx - ny).abs() < 1e-6);
        }
    }

    #[test]
    fn single_token_attends_to_itself() {
        let d = 8;
        let p = random_attention(d, 2, 41);
        let table = RopeTable::new(ROPE_BASE, 4, 16).unwrap();
        let x = random_tensor(&[1, d], 42);
        // With one visible position the softmax weight is exactly 1, so the
        // head context equals that token's value row.
        let y = causal_attention(&x, &p, &table, None).unwrap();
        let v = p.wv.matmul(&x).unwrap();
        let expected = p.wo.matmul(&v).unwrap();
        for (a, b) in y.data().iter().zip(expected.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_logits_give_uniform_attention_over_prefix() {
        let d = 4;
        let eye = {
            let mut m = vec![0.0f32; d * d];
            for i in 0..d {
                m[i * d + i] = 1.0;
            }
            Tensor::new(&[d, d], m).unwrap()
        };
        let p = AttentionParams {
            wq: Linear::Dense(Tensor::zeros(&[d, d])),
            wk: Linear::Dense(Tensor::zeros(&[d, d])),
            wv: Linear::Dense(eye.clone()),
            wo: Linear::Dense(eye),
            num_heads: 1,
        };
        let table = RopeTable::new(ROPE_BASE, d, 8).unwrap();
        let x = random_tensor(&[3, d], 43);
        let y = causal_attention(&x, &p, &table, None).unwrap();
        // Row i must be the mean of rows 0..=i of x.
        for i in 0..3 {
            for j in 0..d {
                let mean: f32 = (0..=i).map(|r| x.at(&[r, j])).sum::<f32>() / (i as f32 + 1.0);
                assert!((y.at(&[i, j]) - mean).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn incremental_decode_matches_single_shot() {
        let d = 16;
        let p = random_attention(d, 4, 44);
        let table = RopeTable::new(ROPE_BASE, 4, 32).unwrap();
        let x = random_tensor(&[5, d], 45);

        let full = causal_attention(&x, &p, &table, None).unwrap();

        let mut cache = AttentionCache::new(32, 4, 4);
        let mut rows = Vec::new();
        for t in 0..5 {
            let step = Tensor::new(&[1, d], x.row(t).to_vec()).unwrap();
            let y = causal_attention(&step, &p, &table, Some(&mut cache)).unwrap();
            rows.extend_from_slice(y.data());
        }
        for (a, b) in rows.iter().zip(full.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn chunked_decode_matches_for_any_split() {
        let d = 8;
        let p = random_attention(d, 2, 46);
        let table = RopeTable::new(ROPE_BASE, 4, 32).unwrap();
        let x = random_tensor(&[7, d], 47);
        let full = causal_attention(&x, &p, &table, None).unwrap();
        for split in 1..7 {
            let mut cache = AttentionCache::new(32, 2, 4);
            let first = Tensor::new(&[split, d], x.data()[..split * d].to_vec()).unwrap();
            let second = Tensor::new(&[7 - split, d], x.data()[split * d..].to_vec()).unwrap();
            let y1 = causal_attention(&first, &p, &table, Some(&mut cache)).unwrap();
            let y2 = causal_attention(&second, &p, &table, Some(&mut cache)).unwrap();
            let got: Vec<f32> = y1.data().iter().chain(y2.data()).copied().collect();
            for (a, b) in got.iter().zip(full.data()) {
                assert!((a - b).abs() < 1e-5, "split {split}");
            }
        }
    }

    #[test]
    fn future_tokens_do_not_leak_backwards() {
        let d = 8;
        let p = random_attention(d, 2, 48);
        let table = RopeTable::new(ROPE_BASE, 4, 16).unwrap();
        let x = random_tensor(&[4, d], 49);
        let mut perturbed = x.clone();
        for v in perturbed.row_mut(3) {
            *v += 1.5;
        }
        let a = causal_attention(&x, &p, &table, None).unwrap();
        let b = causal_attention(&perturbed, &p, &table, None).unwrap();
        for t in 0..3 {
            assert_eq!(a.row(t), b.row(t), "token {t} changed");
        }
    }

    #[test]
    fn cache_overflow_is_refused() {
        let d = 4;
        let p = random_attention(d, 1, 50);
        let table = RopeTable::new(ROPE_BASE, 4, 8).unwrap();
        let mut cache = AttentionCache::new(2, 1, 4);
        let x = random_tensor(&[3, d], 51);
        assert!(matches!(
            causal_attention(&x, &p, &table, Some(&mut cache)),
            Err(Error::ContextOverflow { .. })
        ));
    }

    #[test]
    fn cache_head_shape_mismatch_is_refused() {
        let d = 8;
        let p = random_attention(d, 2, 52);
        let table = RopeTable::new(ROPE_BASE, 4, 8).unwrap();
        let mut cache = AttentionCache::new(8, 4, 2);
        let x = random_tensor(&[1, d], 53);
        assert!(matches!(
            causal_attention(&x, &p, &table, Some(&mut cache)),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn attention_matches_full_recompute_oracle() {
        let d = 16;
        let p = random_attention(d, 4, 54);
        let table = RopeTable::new(ROPE_BASE, 4, 32).unwrap();
        let x = random_tensor(&[6, d], 55);
        let engine = causal_attention(&x, &p, &table, None).unwrap();
        let reference = oracle::causal_attention(&x, &p, f64::from(ROPE_BASE)).unwrap();
        for (a, b) in engine.data().iter().zip(reference) {
            assert!((f64::from(*a) - b).abs() < 1e-5);
        }
    }

    #[test]
    fn swiglu_zero_input_gives_zero() {
        let p = SwigluParams {
            w_gate: Linear::Dense(random_tensor(&[4, 8], 56)),
            w_up: Linear::Dense(random_tensor(&[4, 8], 57)),
            w_down: Linear::Dense(random_tensor(&[8, 4], 58)),
        };
        let x = Tensor::zeros(&[2, 4]);
        let y = swiglu_ffn(&x, &p).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn swiglu_hand_value_2x2() {
        // Identity-ish weights, x = [1, 1]:
        // gate = up = [1, 1]; silu(1) = 1/(1+e^-1); out = silu(1) * 1 summed.
        let eye = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let p = SwigluParams {
            w_gate: Linear::Dense(eye.clone()),
            w_up: Linear::Dense(eye.clone()),
            w_down: Linear::Dense(eye),
        };
        let x = Tensor::new(&[1, 2], vec![1.0, 1.0]).unwrap();
        let y = swiglu_ffn(&x, &p).unwrap();
        let s = 1.0 / (1.0 + (-1.0f64).exp());
        for &v in y.data() {
            assert!((f64::from(v) - s).abs() < 1e-6);
        }
    }

    #[test]
    fn swiglu_matches_formula_oracle() {
        let p = SwigluParams {
            w_gate: Linear::Dense(random_tensor(&[6, 10], 59)),
            w_up: Linear::Dense(random_tensor(&[6, 10], 60)),
            w_down: Linear::Dense(random_tensor(&[10, 6], 61)),
        };
        let x = random_tensor(&[3, 6], 62);
        let engine = swiglu_ffn(&x, &p).unwrap();
        let reference = oracle::swiglu(&x, &p).unwrap();
        for (a, b) in engine.data().iter().zip(reference) {
            assert!((f64::from(*a) - b).abs() < 1e-6);
        }
    }

    #[test]
    fn depthwise_delta_kernel_is_identity() {
        let mut kernel = vec![0.0f32; 2 * 9];
        kernel[4] = 1.0; // center of channel 0
        kernel[9 + 4] = 1.0;
        let p = ConvParams {
            kind: ConvKind::Depthwise,
            weight: Tensor::new(&[2, 3, 3], kernel).unwrap(),
            bias: None,
            stride: 1,
            padding: 1,
        };
        let x = random_tensor(&[5, 5, 2], 63);
        let y = conv_on_grid(&x, &p).unwrap();
        assert_eq!(x.data(), y.data());
    }

    #[test]
    fn depthwise_stride_two_shape() {
        let p = ConvParams {
            kind: ConvKind::Depthwise,
            weight: random_tensor(&[1, 3, 3], 64),
            bias: None,
            stride: 2,
            padding: 1,
        };
        let x = random_tensor(&[4, 4, 1], 65);
        let y = conv_on_grid(&x, &p).unwrap();
        assert_eq!(y.shape(), &[2, 2, 1]);
        let odd = random_tensor(&[5, 5, 1], 66);
        assert_eq!(conv_on_grid(&odd, &p).unwrap().shape(), &[3, 3, 1]);
    }

    #[test]
    fn depthwise_matches_sliding_window_oracle() {
        let p = ConvParams {
            kind: ConvKind::Depthwise,
            weight: random_tensor(&[4, 3, 3], 67),
            bias: Some(random_tensor(&[4], 68)),
            stride: 2,
            padding: 1,
        };
        let x = random_tensor(&[6, 6, 4], 69);
        let engine = conv_on_grid(&x, &p).unwrap();
        let reference = oracle::conv_on_grid(&x, &p).unwrap();
        assert_eq!(engine.shape(), reference.0.as_slice());
        for (a, b) in engine.data().iter().zip(reference.1) {
            assert!((f64::from(*a) - b).abs() < 1e-6);
        }
    }

    #[test]
    fn pointwise_mixes_channels_per_position() {
        let p = ConvParams {
            kind: ConvKind::Pointwise,
            weight: random_tensor(&[3, 5], 70),
            bias: Some(random_tensor(&[5], 71)),
            stride: 1,
            padding: 0,
        };
        let x = random_tensor(&[2, 2, 3], 72);
        let y = conv_on_grid(&x, &p).unwrap();
        assert_eq!(y.shape(), &[2, 2, 5]);
        // Spot-check one position against a direct dot product.
        for co in 0..5 {
            let mut acc = p.bias.as_ref().unwrap().data()[co];
            for ci in 0..3 {
                acc += x.at(&[1, 0, ci]) * p.weight.at(&[ci, co]);
            }
            assert!((y.at(&[1, 0, co]) - acc).abs() < 1e-6);
        }
    }

    #[test]
    fn even_kernel_is_rejected() {
        let p = ConvParams {
            kind: ConvKind::Depthwise,
            weight: random_tensor(&[1, 2, 2], 73),
            bias: None,
            stride: 1,
            padding: 0,
        };
        let x = random_tensor(&[4, 4, 1], 74);
        assert!(matches!(
            conv_on_grid(&x, &p),
            Err(Error::EvenKernel { kernel: 2 })
        ));
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]
            #[test]
            fn cache_equivalence_for_random_splits(seed in 0u64..500, split in 1usize..6) {
                let d = 8;
                let p = random_attention(d, 2, seed);
                let table = RopeTable::new(ROPE_BASE, 4, 16).unwrap();
                let x = random_tensor(&[6, d], seed + 1000);
                let full = causal_attention(&x, &p, &table, None).unwrap();
                let mut cache = AttentionCache::new(16, 2, 4);
                let a = Tensor::new(&[split, d], x.data()[..split * d].to_vec()).unwrap();
                let b = Tensor::new(&[6 - split, d], x.data()[split * d..].to_vec()).unwrap();
                let y1 = causal_attention(&a, &p, &table, Some(&mut cache)).unwrap();
                let y2 = causal_attention(&b, &p, &table, Some(&mut cache)).unwrap();
                let got: Vec<f32> = y1.data().iter().chain(y2.data()).copied().collect();
                for (u, v) in got.iter().zip(full.data()) {
                    prop_assert!((u - v).abs() < 1e-5);
                }
            }
        }
    }
}
