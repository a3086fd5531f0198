//! Deliberately naive, obviously-correct reference implementations used by
//! the test suites for differential verification: triple-loop matmul,
//! direct-formula norms and activations, closed-form rotary rotation,
//! full-recompute attention and decoding, sliding-window convolution, and
//! dequantize-then-matmul.
//!
//! Nothing here shares arithmetic code with the engine kernels; everything
//! is re-derived from the formulas in f64. Inputs are capped at desk scale
//! (sequences <= 64, hidden width <= 256, vocab <= 1024, matmul sides
//! <= 1024) and refused beyond that, so no optimization pressure can sneak
//! in. The engine never calls into this module.

use crate::decoder::DecoderWeights;
use crate::error::{Error, Result};
use crate::nn::{AttentionParams, ConvKind, ConvParams, Linear, SwigluParams};
use crate::quant::{QuantizedTensor, GROUP_SIZE};
use crate::tensor::Tensor;

pub const MAX_SEQ: usize = 64;
pub const MAX_DIM: usize = 256;
pub const MAX_VOCAB: usize = 1024;
pub const MAX_MATMUL_SIDE: usize = 1024;

fn cap(what: &'static str, got: usize, limit: usize) -> Result<()> {
    if got > limit {
        return Err(Error::OracleSizeCap {
            what,
            got,
            cap: limit,
        });
    }
    Ok(())
}

fn dense<'a>(l: &'a Linear, what: &'static str) -> Result<&'a Tensor> {
    l.dense().ok_or_else(|| Error::InvalidShape {
        op: "oracle",
        shape: l.shape().to_vec(),
        reason: format!("{what}: the oracle only decodes dense f32 weights"),
    })
}

/// Triple-loop matmul, f64 accumulation.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows() {
        return Err(Error::ShapeMismatch {
            op: "oracle::matmul",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    cap("matmul rows", m, MAX_MATMUL_SIDE)?;
    cap("matmul inner", k, MAX_MATMUL_SIDE)?;
    cap("matmul cols", n, MAX_MATMUL_SIDE)?;
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0f64;
            for kk in 0..k {
                acc += f64::from(a.at(&[i, kk])) * f64::from(b.at(&[kk, j]));
            }
            out[i * n + j] = acc as f32;
        }
    }
    Tensor::new(&[m, n], out)
}

/// Direct-formula softmax `exp(x_i) / Σ exp(x_j)` in f64.
pub fn softmax(x: &[f32]) -> Vec<f64> {
    let exps: Vec<f64> = x.iter().map(|&v| f64::from(v).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Error function by Maclaurin series, accurate to ~1e-15 for |x| <= 4.
pub fn erf(x: f64) -> f64 {
    assert!(x.abs() <= 4.0, "oracle erf series cap |x| <= 4, got {x}");
    let mut term = x;
    let mut sum = x;
    for n in 1..200 {
        let nf = n as f64;
        term *= -x * x / nf;
        let contribution = term / (2.0 * nf + 1.0);
        sum += contribution;
        if contribution.abs() < 1e-18 {
            break;
        }
    }
    sum * 2.0 / std::f64::consts::PI.sqrt()
}

/// `x · Φ(x)` through the series erf.
pub fn gelu(x: f64) -> f64 {
    x * 0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

/// `x · sigmoid(x)` directly.
pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// One RMSNorm row from the formula.
pub fn rms_norm_row(x: &[f32], gain: &[f32], epsilon: f32) -> Vec<f64> {
    let d = x.len() as f64;
    let mean_sq = x.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>() / d;
    let denom = (mean_sq + f64::from(epsilon)).sqrt();
    x.iter()
        .zip(gain)
        .map(|(&v, &g)| f64::from(v) / denom * f64::from(g))
        .collect()
}

/// One LayerNorm row from the formula (population variance).
pub fn layer_norm_row(x: &[f32], gain: &[f32], bias: &[f32], epsilon: f32) -> Vec<f64> {
    let d = x.len() as f64;
    let mean = x.iter().map(|&v| f64::from(v)).sum::<f64>() / d;
    let var = x
        .iter()
        .map(|&v| (f64::from(v) - mean).powi(2))
        .sum::<f64>()
        / d;
    let denom = (var + f64::from(epsilon)).sqrt();
    x.iter()
        .zip(gain.iter().zip(bias))
        .map(|(&v, (&g, &b))| (f64::from(v) - mean) / denom * f64::from(g) + f64::from(b))
        .collect()
}

/// Closed-form rotation of one head vector at `position`: pair `i` turns by
/// `position · base^(-2i/head_dim)`.
pub fn rope_rotate(head: &[f32], position: usize, head_dim: usize, base: f64) -> Vec<f64> {
    assert_eq!(head.len(), head_dim);
    let mut out = Vec::with_capacity(head_dim);
    for i in 0..head_dim / 2 {
        let angle = position as f64 * base.powf(-2.0 * i as f64 / head_dim as f64);
        let (s, c) = angle.sin_cos();
        let x0 = f64::from(head[2 * i]);
        let x1 = f64::from(head[2 * i + 1]);
        out.push(x0 * c - x1 * s);
        out.push(x0 * s + x1 * c);
    }
    out
}

fn mat_vec_rows(x: &[Vec<f64>], w: &Tensor) -> Vec<Vec<f64>> {
    let (k, n) = (w.rows(), w.cols());
    x.iter()
        .map(|row| {
            debug_assert_eq!(row.len(), k);
            let mut out = vec![0.0f64; n];
            for (kk, &xv) in row.iter().enumerate() {
                for (j, o) in out.iter_mut().enumerate() {
                    *o += xv * f64::from(w.at(&[kk, j]));
                }
            }
            out
        })
        .collect()
}

fn attention_rows(x: &[Vec<f64>], p: &AttentionParams, base: f64) -> Result<Vec<Vec<f64>>> {
    let n = x.len();
    let d = p.dim();
    cap("attention seq", n, MAX_SEQ)?;
    cap("attention dim", d, MAX_DIM)?;
    let heads = p.num_heads;
    let hd = d / heads;
    let q = mat_vec_rows(x, dense(&p.wq, "wq")?);
    let k = mat_vec_rows(x, dense(&p.wk, "wk")?);
    let v = mat_vec_rows(x, dense(&p.wv, "wv")?);

    let rotate = |rows: &[Vec<f64>]| -> Vec<Vec<f64>> {
        rows.iter()
            .enumerate()
            .map(|(pos, row)| {
                let mut out = vec![0.0f64; d];
                for h in 0..heads {
                    for i in 0..hd / 2 {
                        let angle = pos as f64 * base.powf(-2.0 * i as f64 / hd as f64);
                        let (s, c) = angle.sin_cos();
                        let x0 = row[h * hd + 2 * i];
                        let x1 = row[h * hd + 2 * i + 1];
                        out[h * hd + 2 * i] = x0 * c - x1 * s;
                        out[h * hd + 2 * i + 1] = x0 * s + x1 * c;
                    }
                }
                out
            })
            .collect()
    };
    let q = rotate(&q);
    let k = rotate(&k);

    let scale = 1.0 / (hd as f64).sqrt();
    let mut ctx = vec![vec![0.0f64; d]; n];
    for t in 0..n {
        for h in 0..heads {
            let mut scores = Vec::with_capacity(t + 1);
            for k_row in k.iter().take(t + 1) {
                let mut dot = 0.0f64;
                for i in 0..hd {
                    dot += q[t][h * hd + i] * k_row[h * hd + i];
                }
                scores.push(dot * scale);
            }
            let exps: Vec<f64> = scores.iter().map(|&s| s.exp()).collect();
            let total: f64 = exps.iter().sum();
            for (j, &e) in exps.iter().enumerate() {
                let w = e / total;
                for i in 0..hd {
                    ctx[t][h * hd + i] += w * v[j][h * hd + i];
                }
            }
        }
    }
    Ok(mat_vec_rows(&ctx, dense(&p.wo, "wo")?))
}

/// Full-recompute causal attention over the whole sequence (no cache),
/// flattened `[n*d]`.
pub fn causal_attention(x: &Tensor, p: &AttentionParams, base: f64) -> Result<Vec<f64>> {
    let rows: Vec<Vec<f64>> = (0..x.rows())
        .map(|i| x.row(i).iter().map(|&v| f64::from(v)).collect())
        .collect();
    let out = attention_rows(&rows, p, base)?;
    Ok(out.into_iter().flatten().collect())
}

/// SwiGLU from the formula, flattened `[n*d]`.
pub fn swiglu(x: &Tensor, p: &SwigluParams) -> Result<Vec<f64>> {
    cap("swiglu rows", x.rows(), MAX_SEQ)?;
    cap("swiglu dim", x.cols(), MAX_DIM)?;
    let rows: Vec<Vec<f64>> = (0..x.rows())
        .map(|i| x.row(i).iter().map(|&v| f64::from(v)).collect())
        .collect();
    let gate = mat_vec_rows(&rows, dense(&p.w_gate, "w_gate")?);
    let up = mat_vec_rows(&rows, dense(&p.w_up, "w_up")?);
    let mixed: Vec<Vec<f64>> = gate
        .into_iter()
        .zip(up)
        .map(|(g, u)| g.into_iter().zip(u).map(|(gv, uv)| silu(gv) * uv).collect())
        .collect();
    Ok(mat_vec_rows(&mixed, dense(&p.w_down, "w_down")?)
        .into_iter()
        .flatten()
        .collect())
}

/// Sliding-window convolution over an `[h, w, c]` grid; returns the output
/// shape and flattened values.
pub fn conv_on_grid(x: &Tensor, p: &ConvParams) -> Result<(Vec<usize>, Vec<f64>)> {
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    cap("conv height", h, MAX_SEQ)?;
    cap("conv width", w, MAX_SEQ)?;
    cap("conv channels", c, MAX_DIM)?;
    match p.kind {
        ConvKind::Pointwise => {
            let c_out = p.weight.cols();
            let mut out = vec![0.0f64; h * w * c_out];
            for pos in 0..h * w {
                for co in 0..c_out {
                    let mut acc = p.bias.as_ref().map_or(0.0, |b| f64::from(b.data()[co]));
                    for ci in 0..c {
                        acc +=
                            f64::from(x.data()[pos * c + ci]) * f64::from(p.weight.at(&[ci, co]));
                    }
                    out[pos * c_out + co] = acc;
                }
            }
            Ok((vec![h, w, c_out], out))
        }
        ConvKind::Depthwise => {
            let k = p.weight.shape()[1];
            let pad = p.padding as isize;
            let h_out = h.div_ceil(p.stride);
            let w_out = w.div_ceil(p.stride);
            let mut out = vec![0.0f64; h_out * w_out * c];
            for oy in 0..h_out {
                for ox in 0..w_out {
                    for ch in 0..c {
                        let mut acc = p.bias.as_ref().map_or(0.0, |b| f64::from(b.data()[ch]));
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * p.stride) as isize + ky as isize - pad;
                                let ix = (ox * p.stride) as isize + kx as isize - pad;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc +=
                                    f64::from(x.data()[(iy as usize * w + ix as usize) * c + ch])
                                        * f64::from(p.weight.at(&[ch, ky, kx]));
                            }
                        }
                        out[(oy * w_out + ox) * c + ch] = acc;
                    }
                }
            }
            Ok((vec![h_out, w_out, c], out))
        }
    }
}

/// Dequantize from raw scales/codes by the definition, then triple-loop
/// matmul. Flattened `[m*n]`.
pub fn quantized_matmul(x: &Tensor, q: &QuantizedTensor) -> Result<Vec<f64>> {
    let (m, k) = (x.rows(), x.cols());
    let [rows, n] = q.logical_shape();
    if k != rows {
        return Err(Error::ShapeMismatch {
            op: "oracle::quantized_matmul",
            left: x.shape().to_vec(),
            right: q.logical_shape().to_vec(),
        });
    }
    cap("matmul rows", m, MAX_MATMUL_SIDE)?;
    cap("matmul inner", k, MAX_MATMUL_SIDE)?;
    cap("matmul cols", n, MAX_MATMUL_SIDE)?;

    // Own dequantization from the stored representation.
    let padded = q.padded_cols();
    let groups_per_row = padded / GROUP_SIZE;
    let code_at = |row: usize, col: usize| -> i32 {
        match q.mode() {
            crate::quant::QuantMode::Q8 => q.codes()[row * padded + col] as i8 as i32,
            crate::quant::QuantMode::Q4 => {
                // Split-nibble layout: byte i of a group's 16 bytes holds
                // element i (low nibble) and element 16+i (high nibble).
                let group = col / GROUP_SIZE;
                let within = col % GROUP_SIZE;
                let half = GROUP_SIZE / 2;
                let byte = q.codes()[row * padded / 2 + group * half + within % half];
                let nibble = if within < half {
                    byte & 0x0F
                } else {
                    byte >> 4
                };
                i32::from(nibble) - 8
            }
        }
    };
    let weight_at = |row: usize, col: usize| -> f64 {
        let scale = q.scales()[row * groups_per_row + col / GROUP_SIZE];
        f64::from(scale) * f64::from(code_at(row, col))
    };

    let mut out = vec![0.0f64; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0f64;
            for kk in 0..k {
                acc += f64::from(x.at(&[i, kk])) * weight_at(kk, j);
            }
            out[i * n + j] = acc;
        }
    }
    Ok(out)
}

fn embed_rows(ids: &[u32], weights: &DecoderWeights) -> Result<Vec<Vec<f64>>> {
    let table = dense(&weights.token_embedding, "token_embedding")?;
    ids.iter()
        .map(|&id| {
            if id as usize >= weights.config.vocab_size {
                return Err(Error::TokenOutOfVocab {
                    id,
                    vocab_size: weights.config.vocab_size,
                });
            }
            Ok(table
                .row(id as usize)
                .iter()
                .map(|&v| f64::from(v))
                .collect())
        })
        .collect()
}

fn forward_rows(rows: &[Vec<f64>], weights: &DecoderWeights) -> Result<Vec<Vec<f64>>> {
    let cfg = &weights.config;
    cap("decoder seq", rows.len(), MAX_SEQ)?;
    cap("decoder dim", cfg.dim, MAX_DIM)?;
    cap("decoder vocab", cfg.vocab_size, MAX_VOCAB)?;

    let norm = |rows: &[Vec<f64>], gain: &Tensor, eps: f32| -> Vec<Vec<f64>> {
        rows.iter()
            .map(|row| {
                let mean_sq = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
                let denom = (mean_sq + f64::from(eps)).sqrt();
                row.iter()
                    .zip(gain.data())
                    .map(|(v, &g)| v / denom * f64::from(g))
                    .collect()
            })
            .collect()
    };

    let mut x = rows.to_vec();
    for block in &weights.blocks {
        let normed = norm(&x, &block.norm1.gain, block.norm1.epsilon);
        let attn = attention_rows(&normed, &block.attn, f64::from(weights.rope().base))?;
        for (xr, ar) in x.iter_mut().zip(attn) {
            for (xv, av) in xr.iter_mut().zip(ar) {
                *xv += av;
            }
        }
        let normed = norm(&x, &block.norm2.gain, block.norm2.epsilon);
        let gate = mat_vec_rows(&normed, dense(&block.ffn.w_gate, "w_gate")?);
        let up = mat_vec_rows(&normed, dense(&block.ffn.w_up, "w_up")?);
        let mixed: Vec<Vec<f64>> = gate
            .into_iter()
            .zip(up)
            .map(|(g, u)| g.into_iter().zip(u).map(|(gv, uv)| silu(gv) * uv).collect())
            .collect();
        let ffn = mat_vec_rows(&mixed, dense(&block.ffn.w_down, "w_down")?);
        for (xr, fr) in x.iter_mut().zip(ffn) {
            for (xv, fv) in xr.iter_mut().zip(fr) {
                *xv += fv;
            }
        }
    }
    let x = norm(&x, &weights.final_norm.gain, weights.final_norm.epsilon);
    Ok(mat_vec_rows(&x, dense(&weights.lm_head, "lm_head")?))
}

/// Full-recompute decoder logits (no cache) for a token sequence; one row
/// of vocab-width logits per position.
pub fn decoder_logits(ids: &[u32], weights: &DecoderWeights) -> Result<Vec<Vec<f64>>> {
    let rows = embed_rows(ids, weights)?;
    forward_rows(&rows, weights)
}

/// Greedy decode that rebuilds the full logits from scratch at every step,
/// never using a KV cache. Ties break toward the lowest token id.
pub fn greedy_decode(
    weights: &DecoderWeights,
    prompt_embeddings: &Tensor,
    max_new_tokens: usize,
    eos: u32,
) -> Result<Vec<u32>> {
    let mut rows: Vec<Vec<f64>> = (0..prompt_embeddings.rows())
        .map(|i| {
            prompt_embeddings
                .row(i)
                .iter()
                .map(|&v| f64::from(v))
                .collect()
        })
        .collect();
    let mut generated = Vec::new();
    for _ in 0..max_new_tokens {
        let logits = forward_rows(&rows, weights)?;
        let last = logits.last().expect("non-empty sequence");
        let mut best = 0usize;
        for (i, &v) in last.iter().enumerate().skip(1) {
            if v > last[best] {
                best = i;
            }
        }
        let next = best as u32;
        generated.push(next);
        if next == eos {
            break;
        }
        rows.extend(embed_rows(&[next], weights)?);
    }
    Ok(generated)
}
