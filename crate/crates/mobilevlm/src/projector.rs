//! Vision-to-language projectors built from a declarative stage list: the
//! lightweight downsample projector (two leading pointwise convs with GELU
//! between, a residual depthwise/pointwise stage, and a stride-2
//! depthwise/pointwise stage), the plain MLP baseline, and the whole
//! `[PW]×a [DW^κ=1 PW]×b [DW^κ=2 PW]×c` stacking grammar.
//!
//! Token layout: a spec with any depthwise stage consumes a square grid of
//! `g²` tokens flattened row-major (token k ↔ grid cell `(k / g, k % g)`),
//! matching the vision encoder's patch rasterization. Every stride-2 stage
//! divides the token count by exactly 4.

use crate::error::{Error, Result};
use crate::nn::{conv_on_grid, layer_norm, ConvKind, ConvParams, LayerNormParams};
use crate::tensor::{add_inplace, gelu, Tensor};

/// Depthwise kernel side used throughout (PEG-style 3x3, padding 1).
pub const DW_KERNEL: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    /// 1x1 cross-channel convolution to `out_channels`.
    Pointwise { out_channels: usize },
    /// Depthwise 3x3 (stride κ ∈ {1, 2}) followed by LN, pointwise, LN, with
    /// an optional residual connection around the whole stage.
    DwPw { stride: usize, residual: bool },
}

/// Stage ordering for the grammar constructor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageOrder {
    /// `[PW]×a [DW¹PW]×b [DW²PW]×c` — the canonical layout.
    Stride1First,
    /// `[PW]×a [DW²PW]×c [DW¹PW]×b` — downsampling before the stride-1 stages.
    Stride2First,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProjectorSpec {
    pub stages: Vec<Stage>,
    /// Incoming visual embedding width `D_v`.
    pub input_dim: usize,
    /// Word-embedding width `D_t`.
    pub output_dim: usize,
}

impl ProjectorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::SpecGrammar {
                text: String::new(),
                reason: "at least one stage required".into(),
            });
        }
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::InvalidShape {
                op: "ProjectorSpec",
                shape: vec![self.input_dim, self.output_dim],
                reason: "dims must be positive".into(),
            });
        }
        let mut width = self.input_dim;
        for stage in &self.stages {
            match *stage {
                Stage::Pointwise { out_channels } => {
                    if out_channels == 0 {
                        return Err(Error::InvalidShape {
                            op: "ProjectorSpec",
                            shape: vec![out_channels],
                            reason: "pointwise out_channels must be positive".into(),
                        });
                    }
                    width = out_channels;
                }
                Stage::DwPw { stride, residual } => {
                    if stride != 1 && stride != 2 {
                        return Err(Error::InvalidShape {
                            op: "ProjectorSpec",
                            shape: vec![stride],
                            reason: "stride must be 1 or 2".into(),
                        });
                    }
                    if residual && (stride != 1 || width != self.output_dim) {
                        return Err(Error::InvalidResidual {
                            stride,
                            in_channels: width,
                            out_channels: self.output_dim,
                        });
                    }
                    width = self.output_dim;
                }
            }
        }
        if width != self.output_dim {
            return Err(Error::InvalidShape {
                op: "ProjectorSpec",
                shape: vec![width, self.output_dim],
                reason: "final stage width must equal output_dim".into(),
            });
        }
        Ok(())
    }

    /// Number of stride-2 stages; each divides the token count by 4.
    pub fn downsample_stages(&self) -> usize {
        self.stages
            .iter()
            .filter(|s| matches!(s, Stage::DwPw { stride: 2, .. }))
            .count()
    }

    pub fn has_grid_stages(&self) -> bool {
        self.stages.iter().any(|s| matches!(s, Stage::DwPw { .. }))
    }

    /// `(input_width, output_width)` per stage, walking the chain.
    pub fn stage_widths(&self) -> Vec<(usize, usize)> {
        let mut widths = Vec::with_capacity(self.stages.len());
        let mut width = self.input_dim;
        for stage in &self.stages {
            let out = match *stage {
                Stage::Pointwise { out_channels } => out_channels,
                Stage::DwPw { .. } => self.output_dim,
            };
            widths.push((width, out));
            width = out;
        }
        widths
    }

    /// Output token count for `n_v` input tokens: `n_v / 4^(stride-2 stages)`.
    /// Grid specs require a perfect-square token count with an even side
    /// ahead of every stride-2 stage.
    pub fn output_tokens(&self, n_v: usize) -> Result<usize> {
        if !self.has_grid_stages() {
            return Ok(n_v);
        }
        let g = (n_v as f64).sqrt() as usize;
        let g = if g * g == n_v {
            g
        } else if (g + 1) * (g + 1) == n_v {
            g + 1
        } else {
            return Err(Error::GridNotSquare { tokens: n_v });
        };
        let mut side = g;
        for stage in &self.stages {
            if let Stage::DwPw { stride: 2, .. } = stage {
                if side % 2 != 0 {
                    return Err(Error::OddGrid { side });
                }
                side /= 2;
            }
        }
        Ok(side * side)
    }

    /// Count of leading pointwise stages; GELU sits between consecutive
    /// members of this run, exactly as the two-conv front of the LDP formula.
    fn leading_pointwise(&self) -> usize {
        self.stages
            .iter()
            .take_while(|s| matches!(s, Stage::Pointwise { .. }))
            .count()
    }

    /// One-line grammar, e.g. `"PWx2 DW1PWx1 DW2PWx1"`.
    pub fn to_grammar(&self) -> String {
        let mut parts: Vec<(String, usize)> = Vec::new();
        for stage in &self.stages {
            let label = match *stage {
                Stage::Pointwise { .. } => "PW".to_string(),
                Stage::DwPw { stride, .. } => format!("DW{stride}PW"),
            };
            match parts.last_mut() {
                Some((l, n)) if *l == label => *n += 1,
                _ => parts.push((label, 1)),
            }
        }
        parts
            .into_iter()
            .map(|(l, n)| format!("{l}x{n}"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Parse the grammar emitted by [`to_grammar`]. Pointwise stages map to
    /// `output_dim`; residuals are inferred (stride 1 with preserved width).
    pub fn parse(text: &str, input_dim: usize, output_dim: usize) -> Result<Self> {
        let mut stages = Vec::new();
        let mut width = input_dim;
        for part in text.split_whitespace() {
            let (label, count) = part.rsplit_once('x').ok_or_else(|| Error::SpecGrammar {
                text: text.into(),
                reason: format!("stage {part:?} missing xN count"),
            })?;
            let count: usize = count.parse().map_err(|_| Error::SpecGrammar {
                text: text.into(),
                reason: format!("bad repeat count in {part:?}"),
            })?;
            for _ in 0..count {
                let stage = match label {
                    "PW" => Stage::Pointwise {
                        out_channels: output_dim,
                    },
                    "DW1PW" => Stage::DwPw {
                        stride: 1,
                        residual: width == output_dim,
                    },
                    "DW2PW" => Stage::DwPw {
                        stride: 2,
                        residual: false,
                    },
                    other => {
                        return Err(Error::SpecGrammar {
                            text: text.into(),
                            reason: format!("unknown stage {other:?}"),
                        })
                    }
                };
                width = output_dim;
                stages.push(stage);
            }
        }
        let spec = Self {
            stages,
            input_dim,
            output_dim,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// The canonical LDP: `PW(D_v→D_t)`, GELU, `PW(D_t→D_t)`, a residual
/// stride-1 DwPw stage, then a stride-2 DwPw stage.
pub fn ldp_spec(d_v: usize, d_t: usize) -> ProjectorSpec {
    ProjectorSpec {
        stages: vec![
            Stage::Pointwise { out_channels: d_t },
            Stage::Pointwise { out_channels: d_t },
            Stage::DwPw {
                stride: 1,
                residual: true,
            },
            Stage::DwPw {
                stride: 2,
                residual: false,
            },
        ],
        input_dim: d_v,
        output_dim: d_t,
    }
}

/// The two-layer MLP baseline: token count untouched.
pub fn mlp_spec(d_v: usize, d_t: usize) -> ProjectorSpec {
    ProjectorSpec {
        stages: vec![
            Stage::Pointwise { out_channels: d_t },
            Stage::Pointwise { out_channels: d_t },
        ],
        input_dim: d_v,
        output_dim: d_t,
    }
}

/// Generic `[PW]×a [DW¹PW]×b [DW²PW]×c` constructor covering every ablation
/// row, including the stride-2-before-stride-1 ordering.
///
/// Residuals follow shape preservation: a stride-1 stage carries one unless
/// it is the stage performing the `D_v → D_t` width change.
pub fn table8_spec(
    a: usize,
    b: usize,
    c: usize,
    d_v: usize,
    d_t: usize,
    order: StageOrder,
) -> Result<ProjectorSpec> {
    if a + b + c == 0 {
        return Err(Error::SpecGrammar {
            text: format!("a={a} b={b} c={c}"),
            reason: "at least one stage required".into(),
        });
    }
    let mut stages = Vec::new();
    let mut width = d_v;
    let push_pw = |stages: &mut Vec<Stage>, width: &mut usize| {
        stages.push(Stage::Pointwise { out_channels: d_t });
        *width = d_t;
    };
    let push_dwpw = |stages: &mut Vec<Stage>, width: &mut usize, stride: usize| {
        stages.push(Stage::DwPw {
            stride,
            residual: stride == 1 && *width == d_t,
        });
        *width = d_t;
    };
    for _ in 0..a {
        push_pw(&mut stages, &mut width);
    }
    let (first_stride, first_count, second_stride, second_count) = match order {
        StageOrder::Stride1First => (1, b, 2, c),
        StageOrder::Stride2First => (2, c, 1, b),
    };
    for _ in 0..first_count {
        push_dwpw(&mut stages, &mut width, first_stride);
    }
    for _ in 0..second_count {
        push_dwpw(&mut stages, &mut width, second_stride);
    }
    let spec = ProjectorSpec {
        stages,
        input_dim: d_v,
        output_dim: d_t,
    };
    spec.validate()?;
    Ok(spec)
}

/// Exact parameter count: conv weights and biases plus LayerNorm gain/bias
/// for every stage.
pub fn param_count(spec: &ProjectorSpec) -> Result<u64> {
    spec.validate()?;
    let mut total = 0u64;
    for (stage, (c_in, c_out)) in spec.stages.iter().zip(spec.stage_widths()) {
        let (c_in, c_out) = (c_in as u64, c_out as u64);
        match stage {
            Stage::Pointwise { .. } => {
                total += c_in * c_out + c_out;
            }
            Stage::DwPw { .. } => {
                let k = DW_KERNEL as u64;
                total += c_in * k * k + c_in; // depthwise + bias
                total += 2 * c_in; // LN after DW
                total += c_in * c_out + c_out; // pointwise + bias
                total += 2 * c_out; // LN after PW
            }
        }
    }
    Ok(total)
}

#[derive(Debug, Clone)]
pub struct DwPwWeights {
    pub dw: ConvParams,
    pub ln1: LayerNormParams,
    pub pw: ConvParams,
    pub ln2: LayerNormParams,
}

#[derive(Debug, Clone)]
pub enum StageWeights {
    Pointwise(ConvParams),
    DwPw(DwPwWeights),
}

#[derive(Debug, Clone)]
pub struct ProjectorWeights {
    pub spec: ProjectorSpec,
    pub stages: Vec<StageWeights>,
}

impl ProjectorWeights {
    /// All-zero convolutions with identity-configured norms; the residual
    /// stage of such a projector is the identity map.
    pub fn zeros(spec: &ProjectorSpec) -> Result<Self> {
        spec.validate()?;
        let stages = spec
            .stages
            .iter()
            .zip(spec.stage_widths())
            .map(|(stage, (c_in, c_out))| match stage {
                Stage::Pointwise { .. } => StageWeights::Pointwise(ConvParams {
                    kind: ConvKind::Pointwise,
                    weight: Tensor::zeros(&[c_in, c_out]),
                    bias: Some(Tensor::zeros(&[c_out])),
                    stride: 1,
                    padding: 0,
                }),
                Stage::DwPw { stride, .. } => StageWeights::DwPw(DwPwWeights {
                    dw: ConvParams {
                        kind: ConvKind::Depthwise,
                        weight: Tensor::zeros(&[c_in, DW_KERNEL, DW_KERNEL]),
                        bias: Some(Tensor::zeros(&[c_in])),
                        stride: *stride,
                        padding: (DW_KERNEL - 1) / 2,
                    },
                    ln1: LayerNormParams::identity(c_in),
                    pw: ConvParams {
                        kind: ConvKind::Pointwise,
                        weight: Tensor::zeros(&[c_in, c_out]),
                        bias: Some(Tensor::zeros(&[c_out])),
                        stride: 1,
                        padding: 0,
                    },
                    ln2: LayerNormParams::identity(c_out),
                }),
            })
            .collect();
        Ok(Self {
            spec: spec.clone(),
            stages,
        })
    }

    /// Total elements across all stage tensors; equals the closed-form count.
    pub fn element_count(&self) -> u64 {
        let conv = |c: &ConvParams| c.weight.len() + c.bias.as_ref().map_or(0, |b| b.len());
        let ln = |l: &LayerNormParams| l.gain.len() + l.bias.len();
        self.stages
            .iter()
            .map(|s| match s {
                StageWeights::Pointwise(c) => conv(c),
                StageWeights::DwPw(d) => conv(&d.dw) + ln(&d.ln1) + conv(&d.pw) + ln(&d.ln2),
            })
            .sum::<usize>() as u64
    }

    pub fn storage_bytes(&self) -> u64 {
        self.element_count() * 4
    }
}

fn tokens_as_grid(x: Tensor, side: usize) -> Result<Tensor> {
    let c = x.cols();
    x.reshape(&[side, side, c])
}

fn grid_as_tokens(x: Tensor) -> Result<Tensor> {
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    x.reshape(&[h * w, c])
}

fn pointwise_on_tokens(x: &Tensor, conv: &ConvParams) -> Result<Tensor> {
    let (t, c) = (x.rows(), x.cols());
    let as_grid = Tensor::new(&[t, 1, c], x.data().to_vec())?;
    grid_as_tokens(conv_on_grid(&as_grid, conv)?)
}

/// `H_v = P(f)`: run the projector over `f: [N_v, D_v]`, returning
/// `[N_v / 4^s2, D_t]` tokens in the word-embedding space.
pub fn project(f: &Tensor, weights: &ProjectorWeights) -> Result<Tensor> {
    let spec = &weights.spec;
    spec.validate()?;
    if f.rank() != 2 || f.cols() != spec.input_dim {
        return Err(Error::ShapeMismatch {
            op: "project",
            left: f.shape().to_vec(),
            right: vec![spec.input_dim],
        });
    }
    // Validates squareness and stride divisibility up front.
    spec.output_tokens(f.rows())?;

    let mut side = if spec.has_grid_stages() {
        (f.rows() as f64).sqrt().round() as usize
    } else {
        0
    };
    let leading = spec.leading_pointwise();
    let mut x = f.clone();
    for (i, stage) in weights.stages.iter().enumerate() {
        match stage {
            StageWeights::Pointwise(conv) => {
                x = pointwise_on_tokens(&x, conv)?;
                if i + 1 < leading {
                    x = gelu(&x);
                }
            }
            StageWeights::DwPw(dwpw) => {
                let residual = matches!(spec.stages[i], Stage::DwPw { residual: true, .. });
                let input = if residual { Some(x.clone()) } else { None };

                let grid = tokens_as_grid(x, side)?;
                let conved = conv_on_grid(&grid, &dwpw.dw)?;
                side = conved.shape()[0];
                let tokens = grid_as_tokens(conved)?;
                let normed = layer_norm(&tokens, &dwpw.ln1)?;
                let mixed = pointwise_on_tokens(&normed, &dwpw.pw)?;
                let mut out = layer_norm(&mixed, &dwpw.ln2)?;
                if let Some(res) = input {
                    add_inplace(&mut out, &res)?;
                }
                x = out;
            }
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use crate::weights;

    fn random_tokens(n: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = SplitMix64::new(seed);
        Tensor::new(
            &[n, d],
            (0..n * d).map(|_| rng.next_range(-1.0, 1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn ldp_parameter_budget() {
        let spec = ldp_spec(1024, 2048);
        let count = param_count(&spec).unwrap();
        assert_eq!(count, 14_745_600);
        assert!(count < 20_000_000);
    }

    #[test]
    fn mlp_parameter_count_closed_form() {
        let spec = mlp_spec(1024, 2048);
        let count = param_count(&spec).unwrap();
        assert_eq!(count, 1024 * 2048 + 2048 + 2048 * 2048 + 2048);
        assert_eq!(count, 6_295_552);
    }

    #[test]
    fn toy_ldp_count_matches_hand_sum() {
        let spec = ldp_spec(32, 64);
        // PW1 32*64+64, PW2 64*64+64, two DwPw stages at c=64:
        // dw 64*9+64 = 640, ln 128, pw 64*64+64 = 4160, ln 128 -> 5056 each.
        let hand = 2112 + 4160 + 5056 + 5056;
        assert_eq!(param_count(&spec).unwrap(), hand);
        // Closed form equals instantiated element count exactly.
        let w = weights::init_projector(&spec, 3).unwrap();
        assert_eq!(w.element_count(), hand);
    }

    #[test]
    fn ldp_reduces_576_tokens_to_144() {
        let spec = ldp_spec(1024, 2048);
        assert_eq!(spec.output_tokens(576).unwrap(), 144);
        // Run it for real at toy width to keep it fast.
        let toy = ldp_spec(8, 16);
        let w = weights::init_projector(&toy, 1).unwrap();
        let f = random_tokens(576, 8, 2);
        let h = project(&f, &w).unwrap();
        assert_eq!(h.shape(), &[144, 16]);
    }

    #[test]
    fn toy_grid_projects_to_nine_tokens() {
        let spec = ldp_spec(32, 64);
        let w = weights::init_projector(&spec, 4).unwrap();
        let f = random_tokens(36, 32, 5);
        let h = project(&f, &w).unwrap();
        assert_eq!(h.shape(), &[9, 64]);
    }

    #[test]
    fn mlp_preserves_token_count() {
        let spec = mlp_spec(32, 64);
        for n in [5usize, 36, 100] {
            assert_eq!(spec.output_tokens(n).unwrap(), n);
        }
        let w = weights::init_projector(&spec, 6).unwrap();
        let f = random_tokens(5, 32, 7);
        let h = project(&f, &w).unwrap();
        assert_eq!(h.shape(), &[5, 64]);
    }

    #[test]
    fn table8_rows_match_the_published_token_counts() {
        // (a, b, c, expected tokens from 576)
        let rows = [
            (2usize, 0usize, 0usize, 576usize),
            (0, 1, 1, 144),
            (2, 1, 1, 144),
            (2, 3, 1, 144),
        ];
        for (a, b, c, want) in rows {
            let spec = table8_spec(a, b, c, 32, 64, StageOrder::Stride1First).unwrap();
            assert_eq!(spec.output_tokens(576).unwrap(), want, "row ({a},{b},{c})");
        }
        // Row 5 reorders the strides but keeps 144.
        let row5 = table8_spec(2, 1, 1, 32, 64, StageOrder::Stride2First).unwrap();
        assert_eq!(row5.output_tokens(576).unwrap(), 144);
        assert!(matches!(
            row5.stages[2],
            Stage::DwPw {
                stride: 2,
                residual: false
            }
        ));
        assert!(matches!(
            row5.stages[3],
            Stage::DwPw {
                stride: 1,
                residual: true
            }
        ));
    }

    #[test]
    fn canonical_table8_equals_ldp() {
        assert_eq!(
            table8_spec(2, 1, 1, 1024, 2048, StageOrder::Stride1First).unwrap(),
            ldp_spec(1024, 2048)
        );
    }

    #[test]
    fn row2_has_no_leading_pointwise_and_no_first_residual() {
        let spec = table8_spec(0, 1, 1, 1024, 2048, StageOrder::Stride1First).unwrap();
        assert_eq!(spec.stages.len(), 2);
        // The width-changing stride-1 stage cannot carry a residual.
        assert!(matches!(
            spec.stages[0],
            Stage::DwPw {
                stride: 1,
                residual: false
            }
        ));
    }

    #[test]
    fn residual_on_stride_two_is_invalid_grammar() {
        let spec = ProjectorSpec {
            stages: vec![
                Stage::Pointwise { out_channels: 64 },
                Stage::DwPw {
                    stride: 2,
                    residual: true,
                },
            ],
            input_dim: 32,
            output_dim: 64,
        };
        assert!(matches!(
            spec.validate(),
            Err(Error::InvalidResidual { stride: 2, .. })
        ));
        assert!(table8_spec(0, 0, 0, 32, 64, StageOrder::Stride1First).is_err());
    }

    #[test]
    fn token_count_law_holds_for_every_spec() {
        for (a, b, c) in [(2, 1, 1), (0, 1, 1), (2, 3, 1), (1, 0, 2)] {
            let spec = table8_spec(a, b, c, 16, 32, StageOrder::Stride1First).unwrap();
            let s2 = spec.downsample_stages();
            for side in [4usize, 8, 12] {
                let n_v = side * side;
                if side % (1 << s2) == 0 {
                    assert_eq!(
                        spec.output_tokens(n_v).unwrap(),
                        n_v / 4usize.pow(s2 as u32)
                    );
                }
            }
        }
    }

    #[test]
    fn grid_errors_are_detected() {
        let spec = ldp_spec(8, 16);
        assert!(matches!(
            spec.output_tokens(15),
            Err(Error::GridNotSquare { tokens: 15 })
        ));
        assert!(matches!(
            spec.output_tokens(9),
            Err(Error::OddGrid { side: 3 })
        ));
        let w = weights::init_projector(&spec, 8).unwrap();
        let f = random_tokens(15, 8, 9);
        assert!(project(&f, &w).is_err());
    }

    #[test]
    fn zero_branch_residual_stage_is_identity() {
        let spec = ProjectorSpec {
            stages: vec![Stage::DwPw {
                stride: 1,
                residual: true,
            }],
            input_dim: 16,
            output_dim: 16,
        };
        let w = ProjectorWeights::zeros(&spec).unwrap();
        let f = random_tokens(16, 16, 10);
        let h = project(&f, &w).unwrap();
        assert_eq!(h.data(), f.data());
    }

    #[test]
    fn delta_kernel_with_identity_pw_is_pure_subsampling() {
        let c = 8usize;
        let spec = ProjectorSpec {
            stages: vec![Stage::DwPw {
                stride: 2,
                residual: false,
            }],
            input_dim: c,
            output_dim: c,
        };
        let mut w = ProjectorWeights::zeros(&spec).unwrap();
        if let StageWeights::DwPw(d) = &mut w.stages[0] {
            // Delta at kernel center per channel.
            for ch in 0..c {
                d.dw.weight.data_mut()[ch * 9 + 4] = 1.0;
            }
            // Identity pointwise.
            for i in 0..c {
                d.pw.weight.data_mut()[i * c + i] = 1.0;
            }
        }
        let f = random_tokens(36, c, 11);
        let h = project(&f, &w).unwrap();

        // Expected: LN(LN(f[2i, 2j])) over the even grid positions.
        let mut picked = Vec::new();
        for gy in 0..3 {
            for gx in 0..3 {
                let token = (2 * gy) * 6 + 2 * gx;
                picked.extend_from_slice(f.row(token));
            }
        }
        let picked = Tensor::new(&[9, c], picked).unwrap();
        let ln = LayerNormParams::identity(c);
        let expected = layer_norm(&layer_norm(&picked, &ln).unwrap(), &ln).unwrap();
        assert_eq!(h.shape(), expected.shape());
        for (a, b) in h.data().iter().zip(expected.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn grammar_round_trips() {
        let specs = [
            ldp_spec(32, 64),
            mlp_spec(32, 64),
            table8_spec(0, 1, 1, 32, 64, StageOrder::Stride1First).unwrap(),
            table8_spec(2, 1, 1, 32, 64, StageOrder::Stride2First).unwrap(),
        ];
        for spec in specs {
            let text = spec.to_grammar();
            let parsed = ProjectorSpec::parse(&text, spec.input_dim, spec.output_dim).unwrap();
            assert_eq!(parsed, spec, "grammar {text:?}");
        }
        assert_eq!(ldp_spec(32, 64).to_grammar(), "PWx2 DW1PWx1 DW2PWx1");
        assert!(ProjectorSpec::parse("QWx2", 32, 64).is_err());
        assert!(ProjectorSpec::parse("PW", 32, 64).is_err());
    }

    #[test]
    fn output_width_is_always_d_t() {
        for d_v in [8usize, 24] {
            let spec = mlp_spec(d_v, 48);
            let w = weights::init_projector(&spec, 12).unwrap();
            let f = random_tokens(4, d_v, 13);
            assert_eq!(project(&f, &w).unwrap().cols(), 48);
        }
    }
}
