//! Weight-only symmetric group quantization for the 8-bit and 4-bit
//! inference modes.
//!
//! Weights are split into contiguous groups of 32 along each row. Each group
//! stores one f32 scale `max|w| / L` (`L` = 127 for q8, 7 for q4) and integer
//! codes `round(w / scale)`, rounded half to even. Activations stay float32
//! everywhere; only weight storage is quantized. Rows whose length is not a
//! multiple of 32 are zero-padded to the next group boundary; padding never
//! appears in dequantized output.
//!
//! q8 codes are stored one signed byte per element. q4 codes are packed two
//! per byte in offset-8 form (`nibble = code + 8`), split by half-group:
//! byte `i` of a group's 16 code bytes holds element `i` in its low nibble
//! and element `16 + i` in its high nibble, so both nibble planes of a
//! group unpack as contiguous lanes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const GROUP_SIZE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QuantMode {
    Q8,
    Q4,
}

impl QuantMode {
    /// Largest representable code magnitude.
    pub fn level(self) -> i32 {
        match self {
            QuantMode::Q8 => 127,
            QuantMode::Q4 => 7,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            QuantMode::Q8 => "q8",
            QuantMode::Q4 => "q4",
        }
    }

    /// Code bytes needed for one padded row of `padded` elements.
    fn row_code_bytes(self, padded: usize) -> usize {
        match self {
            QuantMode::Q8 => padded,
            QuantMode::Q4 => padded / 2,
        }
    }
}

impl std::str::FromStr for QuantMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "q8" => Ok(QuantMode::Q8),
            "q4" => Ok(QuantMode::Q4),
            other => Err(Error::MalformedConfig {
                reason: format!("unknown quant mode {other:?}"),
            }),
        }
    }
}

/// Group-quantized 2-D weight matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    mode: QuantMode,
    /// Original `[rows, cols]` before padding.
    logical_shape: [usize; 2],
    /// Cols rounded up to a multiple of [`GROUP_SIZE`].
    padded_cols: usize,
    /// One scale per group, `rows * padded_cols / GROUP_SIZE` entries.
    scales: Vec<f32>,
    /// Packed codes, row-major over padded columns.
    codes: Vec<u8>,
}

impl QuantizedTensor {
    pub fn mode(&self) -> QuantMode {
        self.mode
    }

    pub fn logical_shape(&self) -> [usize; 2] {
        self.logical_shape
    }

    pub fn rows(&self) -> usize {
        self.logical_shape[0]
    }

    pub fn cols(&self) -> usize {
        self.logical_shape[1]
    }

    pub fn padded_cols(&self) -> usize {
        self.padded_cols
    }

    pub fn scales(&self) -> &[f32] {
        &self.scales
    }

    pub fn codes(&self) -> &[u8] {
        &self.codes
    }

    /// Bytes occupied by codes plus scales.
    pub fn storage_bytes(&self) -> usize {
        self.codes.len() + 4 * self.scales.len()
    }

    /// Number of logical (unpadded) elements.
    pub fn element_count(&self) -> usize {
        self.logical_shape[0] * self.logical_shape[1]
    }

    /// Rebuild from raw parts, validating sizes and code ranges. This is the
    /// checkpoint-load path.
    pub fn from_parts(
        mode: QuantMode,
        logical_shape: [usize; 2],
        scales: Vec<f32>,
        codes: Vec<u8>,
    ) -> Result<Self> {
        let [rows, cols] = logical_shape;
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidShape {
                op: "QuantizedTensor::from_parts",
                shape: logical_shape.to_vec(),
                reason: "shape entries must be >= 1".into(),
            });
        }
        let padded = cols.div_ceil(GROUP_SIZE) * GROUP_SIZE;
        let want_scales = rows * padded / GROUP_SIZE;
        let want_codes = mode.row_code_bytes(padded) * rows;
        if scales.len() != want_scales || codes.len() != want_codes {
            return Err(Error::InvalidShape {
                op: "QuantizedTensor::from_parts",
                shape: logical_shape.to_vec(),
                reason: format!(
                    "want {want_scales} scales / {want_codes} code bytes, got {} / {}",
                    scales.len(),
                    codes.len()
                ),
            });
        }
        let q = Self {
            mode,
            logical_shape,
            padded_cols: padded,
            scales,
            codes,
        };
        q.validate_codes()?;
        Ok(q)
    }

    fn validate_codes(&self) -> Result<()> {
        let level = self.mode.level();
        match self.mode {
            QuantMode::Q8 => {
                for (i, &b) in self.codes.iter().enumerate() {
                    let c = b as i8 as i32;
                    if c.abs() > level {
                        return Err(Error::CorruptCode {
                            mode: "q8",
                            code: c,
                            index: i,
                        });
                    }
                }
            }
            QuantMode::Q4 => {
                for (i, &b) in self.codes.iter().enumerate() {
                    for c in [(b & 0x0F) as i32 - 8, (b >> 4) as i32 - 8] {
                        if c.abs() > level {
                            return Err(Error::CorruptCode {
                                mode: "q4",
                                code: c,
                                index: i,
                            });
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Code value at padded position `(row, col)`.
    fn code_at(&self, row: usize, col: usize) -> i32 {
        match self.mode {
            QuantMode::Q8 => self.codes[row * self.padded_cols + col] as i8 as i32,
            QuantMode::Q4 => {
                let group = col / GROUP_SIZE;
                let within = col % GROUP_SIZE;
                let byte_idx = row * self.padded_cols / 2
                    + group * (GROUP_SIZE / 2)
                    + within % (GROUP_SIZE / 2);
                let b = self.codes[byte_idx];
                if within < GROUP_SIZE / 2 {
                    (b & 0x0F) as i32 - 8
                } else {
                    (b >> 4) as i32 - 8
                }
            }
        }
    }

    /// Dequantize one logical row into `out` (length = logical cols).
    pub fn dequantize_row_into(&self, row: usize, out: &mut [f32]) {
        let cols = self.logical_shape[1];
        debug_assert_eq!(out.len(), cols);
        let groups_per_row = self.padded_cols / GROUP_SIZE;
        for g in 0..groups_per_row {
            let scale = self.scales[row * groups_per_row + g];
            let start = g * GROUP_SIZE;
            if start >= cols {
                break;
            }
            let end = (start + GROUP_SIZE).min(cols);
            for col in start..end {
                out[col] = self.code_at(row, col) as f32 * scale;
            }
        }
    }
}

/// Quantize a 2-D weight matrix. Non-finite weights are refused with the
/// offending flat index.
pub fn quantize(w: &Tensor, mode: QuantMode) -> Result<QuantizedTensor> {
    if w.rank() != 2 {
        return Err(Error::InvalidShape {
            op: "quantize",
            shape: w.shape().to_vec(),
            reason: "only rank-2 weights quantize".into(),
        });
    }
    if let Some((index, &value)) = w.data().iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFiniteWeight { index, value });
    }

    let (rows, cols) = (w.rows(), w.cols());
    let padded = cols.div_ceil(GROUP_SIZE) * GROUP_SIZE;
    let groups_per_row = padded / GROUP_SIZE;
    let level = mode.level();

    let mut scales = Vec::with_capacity(rows * groups_per_row);
    let mut q8_codes: Vec<u8> = Vec::new();
    let mut q4_codes: Vec<u8> = Vec::new();
    match mode {
        QuantMode::Q8 => q8_codes.reserve(rows * padded),
        QuantMode::Q4 => q4_codes.reserve(rows * padded / 2),
    }

    let mut group = [0.0f32; GROUP_SIZE];
    for r in 0..rows {
        let row = w.row(r);
        for g in 0..groups_per_row {
            let start = g * GROUP_SIZE;
            for (i, slot) in group.iter_mut().enumerate() {
                let col = start + i;
                *slot = if col < cols { row[col] } else { 0.0 };
            }
            let max_abs = group.iter().fold(0.0f32, |m, v| m.max(v.abs()));
            let scale = if max_abs == 0.0 {
                0.0f32
            } else {
                (f64::from(max_abs) / f64::from(level)) as f32
            };
            scales.push(scale);

            let encode = |v: f32| -> i32 {
                if scale == 0.0 {
                    0
                } else {
                    let c = (f64::from(v) / f64::from(scale)).round_ties_even() as i32;
                    c.clamp(-level, level)
                }
            };
            match mode {
                QuantMode::Q8 => {
                    for &v in &group {
                        q8_codes.push(encode(v) as i8 as u8);
                    }
                }
                QuantMode::Q4 => {
                    for i in 0..GROUP_SIZE / 2 {
                        let lo = (encode(group[i]) + 8) as u8;
                        let hi = (encode(group[GROUP_SIZE / 2 + i]) + 8) as u8;
                        q4_codes.push(lo | (hi << 4));
                    }
                }
            }
        }
    }

    Ok(QuantizedTensor {
        mode,
        logical_shape: [rows, cols],
        padded_cols: padded,
        scales,
        codes: match mode {
            QuantMode::Q8 => q8_codes,
            QuantMode::Q4 => q4_codes,
        },
    })
}

/// Exact inverse mapping `codes · scale`, restoring the logical shape.
pub fn dequantize(q: &QuantizedTensor) -> Tensor {
    let [rows, cols] = q.logical_shape;
    let mut data = vec![0.0f32; rows * cols];
    for (r, out) in data.chunks_mut(cols).enumerate() {
        q.dequantize_row_into(r, out);
    }
    Tensor::new(&[rows, cols], data).expect("valid shape")
}

/// Vector width available for the group kernels, detected once per process.
/// Every path computes `dst[j] += xs * code[j]` per lane; the wide paths
/// contract that to one fused multiply-add, so they can differ from the
/// scalar fallback in the final ulp. On a given host the selected path is
/// fixed, keeping results deterministic run to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SimdLevel {
    Scalar,
    #[cfg(target_arch = "x86_64")]
    Avx2,
    #[cfg(target_arch = "x86_64")]
    Avx512,
}

fn simd_level() -> SimdLevel {
    static LEVEL: std::sync::OnceLock<SimdLevel> = std::sync::OnceLock::new();
    *LEVEL.get_or_init(|| {
        // MVLM_SIMD=scalar|avx2|avx512 pins the kernel selection, mainly
        // for debugging and for hosts where wide vectors downclock.
        let requested = std::env::var("MVLM_SIMD").ok();
        let requested = requested.as_deref();
        if requested == Some("scalar") {
            return SimdLevel::Scalar;
        }
        #[cfg(target_arch = "x86_64")]
        {
            let avx512 = is_x86_feature_detected!("avx512f");
            let avx2 = is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma");
            match requested {
                Some("avx512") if avx512 => return SimdLevel::Avx512,
                Some("avx2") if avx2 => return SimdLevel::Avx2,
                Some(_) => {}
                None => {
                    if avx512 {
                        return SimdLevel::Avx512;
                    }
                    if avx2 {
                        return SimdLevel::Avx2;
                    }
                }
            }
        }
        SimdLevel::Scalar
    })
}

#[cfg(target_arch = "x86_64")]
mod x86 {
    //! Group kernels over one 32-code group in the storage layouts above.
    use core::arch::x86_64::*;

    /// # Safety
    /// `dst` must hold 32 f32, `codes` 32 bytes; requires AVX-512F.
    #[target_feature(enable = "avx512f")]
    pub unsafe fn q8_group_avx512(dst: *mut f32, xs: f32, codes: *const u8) {
        let vxs = _mm512_set1_ps(xs);
        for i in 0..2 {
            let raw = _mm_loadu_si128(codes.add(16 * i) as *const __m128i);
            let ints = _mm512_cvtepi8_epi32(raw);
            let vals = _mm512_cvtepi32_ps(ints);
            let d = _mm512_loadu_ps(dst.add(16 * i));
            _mm512_storeu_ps(dst.add(16 * i), _mm512_fmadd_ps(vxs, vals, d));
        }
    }

    /// # Safety
    /// `dst` must hold 32 f32, `codes` 16 split-nibble bytes; AVX-512F.
    #[target_feature(enable = "avx512f")]
    pub unsafe fn q4_group_avx512(dst: *mut f32, xs: f32, codes: *const u8) {
        let raw = _mm_loadu_si128(codes as *const __m128i);
        let mask = _mm_set1_epi8(0x0F);
        let lo = _mm_and_si128(raw, mask);
        let hi = _mm_and_si128(_mm_srli_epi16::<4>(raw), mask);
        let offset = _mm512_set1_epi32(8);
        let vxs = _mm512_set1_ps(xs);
        for (i, nibbles) in [lo, hi].into_iter().enumerate() {
            let ints = _mm512_sub_epi32(_mm512_cvtepu8_epi32(nibbles), offset);
            let vals = _mm512_cvtepi32_ps(ints);
            let d = _mm512_loadu_ps(dst.add(16 * i));
            _mm512_storeu_ps(dst.add(16 * i), _mm512_fmadd_ps(vxs, vals, d));
        }
    }

    /// # Safety
    /// `dst` must hold 32 f32, `codes` 32 bytes; requires AVX2 + FMA.
    #[target_feature(enable = "avx2", enable = "fma")]
    pub unsafe fn q8_group_avx2(dst: *mut f32, xs: f32, codes: *const u8) {
        let vxs = _mm256_set1_ps(xs);
        for i in 0..4 {
            let raw = _mm_loadl_epi64(codes.add(8 * i) as *const __m128i);
            let ints = _mm256_cvtepi8_epi32(raw);
            let vals = _mm256_cvtepi32_ps(ints);
            let d = _mm256_loadu_ps(dst.add(8 * i));
            _mm256_storeu_ps(dst.add(8 * i), _mm256_fmadd_ps(vxs, vals, d));
        }
    }

    /// # Safety
    /// `dst` must hold 32 f32, `codes` 16 split-nibble bytes; AVX2 + FMA.
    #[target_feature(enable = "avx2", enable = "fma")]
    pub unsafe fn q4_group_avx2(dst: *mut f32, xs: f32, codes: *const u8) {
        let raw = _mm_loadu_si128(codes as *const __m128i);
        let mask = _mm_set1_epi8(0x0F);
        let planes = [
            _mm_and_si128(raw, mask),
            _mm_and_si128(_mm_srli_epi16::<4>(raw), mask),
        ];
        let offset = _mm256_set1_epi32(8);
        let vxs = _mm256_set1_ps(xs);
        for (p, plane) in planes.into_iter().enumerate() {
            for i in 0..2 {
                let half = if i == 0 {
                    plane
                } else {
                    _mm_srli_si128::<8>(plane)
                };
                let ints = _mm256_sub_epi32(_mm256_cvtepu8_epi32(half), offset);
                let vals = _mm256_cvtepi32_ps(ints);
                let at = 16 * p + 8 * i;
                let d = _mm256_loadu_ps(dst.add(at));
                _mm256_storeu_ps(dst.add(at), _mm256_fmadd_ps(vxs, vals, d));
            }
        }
    }
}

fn q8_group_scalar(dst: &mut [f32], xs: f32, codes: &[u8]) {
    for (d, &b) in dst.iter_mut().zip(codes) {
        *d += xs * f32::from(b as i8);
    }
}

fn q4_tail_scalar(dst: &mut [f32], xs: f32, bytes: &[u8]) {
    const HALF: usize = GROUP_SIZE / 2;
    for (within, d) in dst.iter_mut().enumerate() {
        let b = bytes[within % HALF];
        let c = if within < HALF {
            (b & 0x0F) as i32 - 8
        } else {
            (b >> 4) as i32 - 8
        };
        *d += xs * c as f32;
    }
}

fn fused_row_q8(
    dst: &mut [f32],
    xv: f32,
    codes: &[u8],
    scales: &[f32],
    cols: usize,
    level: SimdLevel,
) {
    for (g, &scale) in scales.iter().enumerate() {
        let start = g * GROUP_SIZE;
        if start >= cols {
            break;
        }
        let end = (start + GROUP_SIZE).min(cols);
        if scale == 0.0 {
            continue;
        }
        let xs = xv * scale;
        if end - start == GROUP_SIZE {
            match level {
                #[cfg(target_arch = "x86_64")]
                SimdLevel::Avx512 => unsafe {
                    x86::q8_group_avx512(dst.as_mut_ptr().add(start), xs, codes.as_ptr().add(start))
                },
                #[cfg(target_arch = "x86_64")]
                SimdLevel::Avx2 => unsafe {
                    x86::q8_group_avx2(dst.as_mut_ptr().add(start), xs, codes.as_ptr().add(start))
                },
                SimdLevel::Scalar => q8_group_scalar(&mut dst[start..end], xs, &codes[start..end]),
            }
        } else {
            q8_group_scalar(&mut dst[start..end], xs, &codes[start..end]);
        }
    }
}

fn fused_row_q4(
    dst: &mut [f32],
    xv: f32,
    codes: &[u8],
    scales: &[f32],
    cols: usize,
    level: SimdLevel,
) {
    const HALF: usize = GROUP_SIZE / 2;
    for (g, &scale) in scales.iter().enumerate() {
        let start = g * GROUP_SIZE;
        if start >= cols {
            break;
        }
        if scale == 0.0 {
            continue;
        }
        let xs = xv * scale;
        let end = (start + GROUP_SIZE).min(cols);
        let bytes = &codes[g * HALF..(g + 1) * HALF];
        if end - start == GROUP_SIZE {
            match level {
                #[cfg(target_arch = "x86_64")]
                SimdLevel::Avx512 => unsafe {
                    x86::q4_group_avx512(dst.as_mut_ptr().add(start), xs, bytes.as_ptr())
                },
                #[cfg(target_arch = "x86_64")]
                SimdLevel::Avx2 => unsafe {
                    x86::q4_group_avx2(dst.as_mut_ptr().add(start), xs, bytes.as_ptr())
                },
                SimdLevel::Scalar => {
                    // Split-nibble layout: low nibbles are lanes 0..16,
                    // high nibbles lanes 16..32, each a contiguous sweep.
                    let (lo, hi) = dst[start..end].split_at_mut(HALF);
                    for (d, &b) in lo.iter_mut().zip(bytes) {
                        *d += xs * ((b & 0x0F) as i32 - 8) as f32;
                    }
                    for (d, &b) in hi.iter_mut().zip(bytes) {
                        *d += xs * ((b >> 4) as i32 - 8) as f32;
                    }
                }
            }
        } else {
            // Tail group of a padded row: columns beyond `cols` are padding.
            q4_tail_scalar(&mut dst[start..end], xs, bytes);
        }
    }
}

/// `matmul(x, dequantize(q))` with the dequantization fused per group.
///
/// Matches the unfused product to within 1e-4 relative; the unfused route
/// stays available through [`dequantize`] as the ground-truth twin.
pub fn quantized_matmul(x: &Tensor, q: &QuantizedTensor) -> Result<Tensor> {
    if x.rank() != 2 || x.cols() != q.rows() {
        return Err(Error::ShapeMismatch {
            op: "quantized_matmul",
            left: x.shape().to_vec(),
            right: q.logical_shape.to_vec(),
        });
    }
    let (m, k, n) = (x.rows(), x.cols(), q.cols());
    let groups_per_row = q.padded_cols / GROUP_SIZE;
    let mut out = vec![0.0f32; m * n];
    let level = simd_level();

    let row_task = |dst: &mut [f32], x_row: &[f32]| {
        for kk in 0..k {
            let xv = x_row[kk];
            if xv == 0.0 {
                continue;
            }
            let scales = &q.scales[kk * groups_per_row..(kk + 1) * groups_per_row];
            match q.mode {
                QuantMode::Q8 => {
                    let codes = &q.codes[kk * q.padded_cols..(kk + 1) * q.padded_cols];
                    fused_row_q8(dst, xv, codes, scales, n, level);
                }
                QuantMode::Q4 => {
                    let codes = &q.codes[kk * q.padded_cols / 2..(kk + 1) * q.padded_cols / 2];
                    fused_row_q4(dst, xv, codes, scales, n, level);
                }
            }
        }
    };

    if crate::thread_count() > 1 && m > 1 {
        use rayon::prelude::*;
        out.par_chunks_mut(n)
            .zip(x.data().par_chunks(k))
            .for_each(|(dst, x_row)| row_task(dst, x_row));
    } else {
        for (dst, x_row) in out.chunks_mut(n).zip(x.data().chunks(k)) {
            row_task(dst, x_row);
        }
    }
    Tensor::new(&[m, n], out)
}

/// Projected checkpoint bytes for `params` parameters stored in `mode`,
/// counting codes plus one f32 scale per 32 weights.
pub fn projected_storage_bytes(params: u64, mode: Option<QuantMode>) -> u64 {
    match mode {
        None => params * 4,
        Some(QuantMode::Q8) => params + 4 * (params / 32),
        Some(QuantMode::Q4) => params / 2 + 4 * (params / 32),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use crate::rng::SplitMix64;
    use crate::tensor::matmul;

    fn random_tensor(shape: &[usize], seed: u64, range: f32) -> Tensor {
        let mut rng = SplitMix64::new(seed);
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| rng.next_range(f64::from(-range), f64::from(range)))
            .collect();
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn all_zero_groups_have_zero_scales_and_codes() {
        let w = Tensor::zeros(&[2, 32]);
        for mode in [QuantMode::Q8, QuantMode::Q4] {
            let q = quantize(&w, mode).unwrap();
            assert_eq!(q.scales(), &[0.0, 0.0]);
            let d = dequantize(&q);
            assert!(d.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn linear_ramp_q8_error_within_half_scale() {
        // One group spanning [-1, 1].
        let data: Vec<f32> = (0..32).map(|i| -1.0 + 2.0 * i as f32 / 31.0).collect();
        let w = Tensor::new(&[1, 32], data.clone()).unwrap();
        let q = quantize(&w, QuantMode::Q8).unwrap();
        let d = dequantize(&q);
        let max_err = data
            .iter()
            .zip(d.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max_err <= (1.0 / 127.0) / 2.0 + 1e-9, "max err {max_err}");
    }

    #[test]
    fn round_trip_error_bounded_by_half_scale_per_group() {
        for (seed, mode) in [(1u64, QuantMode::Q8), (2, QuantMode::Q4)] {
            let w = random_tensor(&[4, 64], seed, 2.0);
            let q = quantize(&w, mode).unwrap();
            let d = dequantize(&q);
            let groups_per_row = q.padded_cols() / GROUP_SIZE;
            for r in 0..4 {
                for c in 0..64 {
                    let scale = q.scales()[r * groups_per_row + c / GROUP_SIZE];
                    let err = (w.at(&[r, c]) - d.at(&[r, c])).abs();
                    assert!(
                        f64::from(err) <= f64::from(scale) * (0.5 + 1e-4),
                        "err {err} scale {scale}"
                    );
                }
            }
        }
    }

    #[test]
    fn representable_integer_weights_round_trip_exactly() {
        // Integers with max magnitude exactly at the code level give scale 1,
        // so every value is a lattice point.
        let mut data: Vec<f32> = (0..32).map(|i| ((i * 13) % 255 - 127) as f32).collect();
        data[0] = 127.0;
        let w = Tensor::new(&[1, 32], data.clone()).unwrap();
        let q = quantize(&w, QuantMode::Q8).unwrap();
        assert_eq!(q.scales()[0], 1.0);
        let d = dequantize(&q);
        assert_eq!(d.data(), &data[..]);

        // Same idea at 4 bits: integers in [-7, 7] with a 7 present.
        let data4: Vec<f32> = (0..32).map(|i| ((i % 15) - 7) as f32).collect();
        let w4 = Tensor::new(&[1, 32], data4.clone()).unwrap();
        let q4 = quantize(&w4, QuantMode::Q4).unwrap();
        assert_eq!(q4.scales()[0], 1.0);
        let d4 = dequantize(&q4);
        assert_eq!(d4.data(), &data4[..]);
    }

    #[test]
    fn q4_extreme_lattice_points_exact() {
        let scale = 0.125f32;
        let data: Vec<f32> = (0..32)
            .map(|i| {
                if i % 2 == 0 {
                    7.0 * scale
                } else {
                    -7.0 * scale
                }
            })
            .collect();
        let w = Tensor::new(&[1, 32], data.clone()).unwrap();
        let q = quantize(&w, QuantMode::Q4).unwrap();
        let d = dequantize(&q);
        assert_eq!(d.data(), &data[..]);
    }

    #[test]
    fn q8_decoding_agrees_with_f32_on_most_top1_tokens() {
        // Paired greedy step: the same toy decoder in f32 and q8 picks the
        // same next token on at least 95% of 200 random one-token contexts.
        use crate::decoder::{forward, DecoderConfig, DecoderInput, KvCache};
        use crate::weights::{init_random, ModelConfig};

        let config = DecoderConfig {
            num_blocks: 2,
            dim: 64,
            num_heads: 4,
            context_length: 8,
            vocab_size: 256,
        };
        let f32_weights = init_random(&ModelConfig::decoder_only(config), 321)
            .unwrap()
            .decoder;
        let mut q8_weights = f32_weights.clone();
        q8_weights.quantize_in_place(QuantMode::Q8).unwrap();

        let argmax = |logits: &[f32]| -> usize {
            let mut best = 0;
            for (i, &v) in logits.iter().enumerate().skip(1) {
                if v > logits[best] {
                    best = i;
                }
            }
            best
        };

        let mut rng = SplitMix64::new(654);
        let mut agree = 0;
        for _ in 0..200 {
            let token = [(rng.next_u64() % 256) as u32];
            let mut ca = KvCache::new(&config);
            let mut cb = KvCache::new(&config);
            let a = forward(DecoderInput::Tokens(&token), &f32_weights, &mut ca).unwrap();
            let b = forward(DecoderInput::Tokens(&token), &q8_weights, &mut cb).unwrap();
            if argmax(a.row(0)) == argmax(b.row(0)) {
                agree += 1;
            }
        }
        assert!(agree >= 190, "top-1 agreement only {agree}/200");
    }

    #[test]
    fn rejects_non_finite_weights() {
        let mut data = vec![0.0f32; 32];
        data[17] = f32::NAN;
        let w = Tensor::new(&[1, 32], data).unwrap();
        match quantize(&w, QuantMode::Q8) {
            Err(Error::NonFiniteWeight { index, .. }) => assert_eq!(index, 17),
            other => panic!("expected NonFiniteWeight, got {other:?}"),
        }
    }

    #[test]
    fn storage_accounting_is_exact() {
        let w = random_tensor(&[8, 64], 3, 1.0);
        let q8 = quantize(&w, QuantMode::Q8).unwrap();
        let q4 = quantize(&w, QuantMode::Q4).unwrap();
        let (m, n) = (8usize, 64usize);
        assert_eq!(q8.storage_bytes(), m * n + 4 * (m * n / 32));
        assert_eq!(q4.storage_bytes(), m * n / 2 + 4 * (m * n / 32));
    }

    #[test]
    fn padding_is_excluded_from_output() {
        let w = random_tensor(&[3, 40], 4, 1.0);
        let q = quantize(&w, QuantMode::Q4).unwrap();
        assert_eq!(q.padded_cols(), 64);
        let d = dequantize(&q);
        assert_eq!(d.shape(), &[3, 40]);
        for r in 0..3 {
            for c in 0..40 {
                let scale = q.scales()[r * 2 + c / 32];
                assert!((w.at(&[r, c]) - d.at(&[r, c])).abs() <= scale * 0.5 + 1e-7);
            }
        }
    }

    #[test]
    fn scale_covariance_at_lattice_points() {
        // Constructed so doubling crosses no rounding boundary.
        let data: Vec<f32> = (0..64).map(|i| 0.25 * ((i % 13) as f32 - 6.0)).collect();
        let w = Tensor::new(&[2, 32], data.clone()).unwrap();
        let w2 = Tensor::new(&[2, 32], data.iter().map(|v| v * 2.0).collect()).unwrap();
        for mode in [QuantMode::Q8, QuantMode::Q4] {
            let qa = quantize(&w, mode).unwrap();
            let qb = quantize(&w2, mode).unwrap();
            for (a, b) in qa.scales().iter().zip(qb.scales()) {
                assert_eq!(*b, 2.0 * *a);
            }
            assert_eq!(qa.codes(), qb.codes());
        }
    }

    #[test]
    fn identity_input_returns_dequantized_rows() {
        let w = random_tensor(&[8, 32], 5, 1.0);
        let q = quantize(&w, QuantMode::Q8).unwrap();
        let mut eye = vec![0.0f32; 64];
        for i in 0..8 {
            eye[i * 8 + i] = 1.0;
        }
        let x = Tensor::new(&[8, 8], eye).unwrap();
        let y = quantized_matmul(&x, &q).unwrap();
        let d = dequantize(&q);
        for (a, b) in y.data().iter().zip(d.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn fused_matmul_matches_dequantize_then_matmul_oracle() {
        for (seed, mode) in [(7u64, QuantMode::Q8), (8, QuantMode::Q4)] {
            let x = random_tensor(&[3, 64], seed, 1.0);
            let w = random_tensor(&[64, 5], seed + 100, 1.0);
            let q = quantize(&w, mode).unwrap();
            let fused = quantized_matmul(&x, &q).unwrap();
            let reference = oracle::quantized_matmul(&x, &q).unwrap();
            for (a, b) in fused.data().iter().zip(&reference) {
                let rel = (f64::from(*a) - b).abs() / b.abs().max(1e-6);
                assert!(rel <= 1e-4, "fused {a} vs oracle {b}");
            }
        }
    }

    #[test]
    fn fused_matmul_matches_unfused_twin() {
        let x = random_tensor(&[4, 96], 9, 1.0);
        let w = random_tensor(&[96, 7], 10, 1.0);
        for mode in [QuantMode::Q8, QuantMode::Q4] {
            let q = quantize(&w, mode).unwrap();
            let fused = quantized_matmul(&x, &q).unwrap();
            let unfused = matmul(&x, &dequantize(&q)).unwrap();
            // Relative with a small-magnitude floor so chance near-zero
            // outputs do not turn ulp noise into huge ratios.
            let rms = (unfused
                .data()
                .iter()
                .map(|v| f64::from(*v).powi(2))
                .sum::<f64>()
                / unfused.len() as f64)
                .sqrt();
            for (a, b) in fused.data().iter().zip(unfused.data()) {
                let rel = f64::from((a - b).abs()) / f64::from(b.abs()).max(1e-2 * rms);
                assert!(rel <= 1e-4, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let x = random_tensor(&[2, 16], 11, 1.0);
        let w = random_tensor(&[32, 4], 12, 1.0);
        let q = quantize(&w, QuantMode::Q8).unwrap();
        assert!(matches!(
            quantized_matmul(&x, &q),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn corrupt_q8_code_is_rejected() {
        let w = random_tensor(&[1, 32], 13, 1.0);
        let q = quantize(&w, QuantMode::Q8).unwrap();
        let mut codes = q.codes().to_vec();
        codes[5] = (-128i8) as u8;
        let err = QuantizedTensor::from_parts(QuantMode::Q8, [1, 32], q.scales().to_vec(), codes);
        assert!(matches!(err, Err(Error::CorruptCode { code: -128, .. })));
    }

    #[test]
    fn corrupt_q4_nibble_is_rejected() {
        let w = random_tensor(&[1, 32], 14, 1.0);
        let q = quantize(&w, QuantMode::Q4).unwrap();
        let mut codes = q.codes().to_vec();
        codes[0] = 0x00; // low nibble 0 => code -8, outside [-7, 7]
        let err = QuantizedTensor::from_parts(QuantMode::Q4, [1, 32], q.scales().to_vec(), codes);
        assert!(matches!(err, Err(Error::CorruptCode { code: -8, .. })));
    }

    #[test]
    fn projected_sizes_track_paper_scale() {
        // 5 bits/weight for q4 (4-bit code + f32 scale per 32) = 0.15625 of f32.
        let ratio = projected_storage_bytes(32, Some(QuantMode::Q4)) as f64
            / projected_storage_bytes(32, None) as f64;
        assert_eq!(ratio, 0.15625);

        let gib = f64::from(1u32 << 30);
        let p27 =
            crate::decoder::count_parameters(&crate::decoder::DecoderConfig::mobilellama_2_7b());
        let p14 =
            crate::decoder::count_parameters(&crate::decoder::DecoderConfig::mobilellama_1_4b());
        let q4_27 = projected_storage_bytes(p27, Some(QuantMode::Q4)) as f64 / gib;
        let q4_14 = projected_storage_bytes(p14, Some(QuantMode::Q4)) as f64 / gib;
        // Table-scale figures are 1.5 and 0.7 GB; the symmetric group format
        // carries slightly more scale overhead than k-quant superblocks.
        assert!((q4_27 - 1.5).abs() / 1.5 < 0.15, "projected {q4_27} GiB");
        assert!((q4_14 - 0.7).abs() / 0.7 < 0.15, "projected {q4_14} GiB");
        let q8_27 = projected_storage_bytes(p27, Some(QuantMode::Q8)) as f64 / gib;
        assert!((q8_27 - 2.7).abs() / 2.7 < 0.15, "projected {q8_27} GiB");
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn round_trip_error_bound_holds(
                seed in 0u64..1000,
                mode_q8 in proptest::bool::ANY,
            ) {
                let mode = if mode_q8 { QuantMode::Q8 } else { QuantMode::Q4 };
                let w = random_tensor(&[2, 32], seed, 3.0);
                let q = quantize(&w, mode).unwrap();
                let d = dequantize(&q);
                for r in 0..2 {
                    let scale = q.scales()[r];
                    for c in 0..32 {
                        let err = f64::from((w.at(&[r, c]) - d.at(&[r, c])).abs());
                        prop_assert!(err <= f64::from(scale) * (0.5 + 1e-4));
                    }
                }
            }
        }
    }
}
