//! Frequency and multi-scale prompt generators.
//!
//! The frequency generator reduces every `P x P` image patch to a few DCT
//! coefficients, maps them through a fully connected layer and embeds the
//! result with a convolution. The multi-scale generator is a convolutional
//! attention: a 5x5 depthwise conv, an identity branch plus three
//! `1 x k` / `k x 1` depthwise strip pairs, a 1x1 channel mix, and an
//! elementwise gate on the original features.

use serde::{Deserialize, Serialize};

use crate::dct::{frequency_plan, FrequencyIndexPlan, FrequencySelection, HalfShift};
use crate::error::{Error, Result};
use crate::tensor_core::{Graph, ParamSpec, StripOrientation, Tensor, Var};

/// Prompt token grid `[N, d_p, H_t, W_t]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptEmbedding {
    grid: Tensor,
}

impl PromptEmbedding {
    pub fn new(grid: Tensor) -> Result<Self> {
        if !grid.is_finite() {
            return Err(Error::NonFinite("prompt embedding".into()));
        }
        Ok(PromptEmbedding { grid })
    }

    pub fn grid(&self) -> &Tensor {
        &self.grid
    }

    pub fn into_grid(self) -> Tensor {
        self.grid
    }
}

pub fn sum_prompts(p_f: &PromptEmbedding, p_ms: &PromptEmbedding) -> Result<PromptEmbedding> {
    if p_f.grid.shape() != p_ms.grid.shape() {
        return Err(Error::ShapeMismatch { op: "sum_prompts", expected: p_f.grid.shape().to_vec(), got: p_ms.grid.shape().to_vec() });
    }
    PromptEmbedding::new(p_f.grid.zip_map(&p_ms.grid, |a, b| a + b)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FpgConfig {
    /// Patch edge in pixels; also the DCT grid size.
    pub patch: usize,
    pub selection: FrequencySelection,
    #[serde(default)]
    pub half_shift: HalfShift,
    /// Width of the fully connected layer.
    pub d_mid: usize,
    /// Prompt dimension.
    pub d_p: usize,
    /// Kernel of the embedding convolution: 1 or 3.
    #[serde(default = "one")]
    pub embed_kernel: usize,
}

fn one() -> usize {
    1
}

impl FpgConfig {
    pub fn plan(&self) -> Result<FrequencyIndexPlan> {
        frequency_plan(self.selection, self.patch)
    }

    pub fn coefficients(&self) -> usize {
        self.selection.count()
    }

    /// The embedding convolution is zero-initialized so a fresh generator
    /// emits an all-zero prompt.
    pub fn param_specs(&self, prefix: &str) -> Result<Vec<ParamSpec>> {
        if self.embed_kernel != 1 && self.embed_kernel != 3 {
            return Err(Error::InvalidArgument(format!("FPG embedding kernel must be 1 or 3, got {}", self.embed_kernel)));
        }
        let k = self.coefficients();
        let ek = self.embed_kernel;
        Ok(vec![
            ParamSpec::weight(format!("{prefix}.fc.weight"), [1, 1, k, self.d_mid], k),
            ParamSpec::bias(format!("{prefix}.fc.bias"), self.d_mid),
            ParamSpec::new(format!("{prefix}.embed.weight"), [self.d_p, self.d_mid, ek, ek], crate::tensor_core::Init::Zeros),
            ParamSpec::bias(format!("{prefix}.embed.bias"), self.d_p),
        ])
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FpgVars {
    pub fc_weight: Var,
    pub fc_bias: Var,
    pub embed_weight: Var,
    pub embed_bias: Var,
}

impl FpgVars {
    pub fn bind(prefix: &str, mut lookup: impl FnMut(&str) -> Result<Var>) -> Result<Self> {
        Ok(FpgVars {
            fc_weight: lookup(&format!("{prefix}.fc.weight"))?,
            fc_bias: lookup(&format!("{prefix}.fc.bias"))?,
            embed_weight: lookup(&format!("{prefix}.embed.weight"))?,
            embed_bias: lookup(&format!("{prefix}.embed.bias"))?,
        })
    }
}

/// `[N, 1, H, W]` image to a `[N, d_p, H / P, W / P]` frequency prompt grid.
pub fn fpg_forward(g: &mut Graph, image: Var, cfg: &FpgConfig, p: &FpgVars) -> Result<Var> {
    let [_, _, h, w] = g.value(image).shape();
    for (what, v) in [("image height", h), ("image width", w)] {
        if cfg.patch == 0 || v % cfg.patch != 0 {
            return Err(Error::Indivisible { op: "fpg_forward", what, value: v, divisor: cfg.patch });
        }
    }
    let bases = cfg.plan()?.bases(cfg.patch, cfg.half_shift)?;
    let (gh, gw) = (h / cfg.patch, w / cfg.patch);
    let coef = g.patch_dct(image, cfg.patch, bases)?;
    let rows = g.to_tokens(coef)?;
    let mapped = g.fully_connected(rows, p.fc_weight, p.fc_bias)?;
    let grid = g.from_tokens(mapped, gh, gw)?;
    if cfg.embed_kernel == 1 {
        g.conv2d_pointwise(grid, p.embed_weight, p.embed_bias)
    } else {
        g.conv2d_dense(grid, p.embed_weight, p.embed_bias)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MspgConfig {
    #[serde(default = "default_dconv")]
    pub dconv_kernel: usize,
    #[serde(default = "default_branches")]
    pub branch_kernels: Vec<usize>,
    /// Feature channels the attention runs on.
    pub channels: usize,
}

fn default_dconv() -> usize {
    5
}

fn default_branches() -> Vec<usize> {
    vec![7, 11, 21]
}

impl MspgConfig {
    pub fn new(channels: usize) -> Self {
        MspgConfig { dconv_kernel: default_dconv(), branch_kernels: default_branches(), channels }
    }

    pub fn param_specs(&self, prefix: &str) -> Result<Vec<ParamSpec>> {
        let c = self.channels;
        let mut specs = Vec::new();
        for &k in std::iter::once(&self.dconv_kernel).chain(&self.branch_kernels) {
            if k % 2 == 0 {
                return Err(Error::EvenKernel { op: "mspg", size: k });
            }
        }
        let dk = self.dconv_kernel;
        specs.push(ParamSpec::weight(format!("{prefix}.dconv.weight"), [c, 1, dk, dk], dk * dk));
        specs.push(ParamSpec::bias(format!("{prefix}.dconv.bias"), c));
        for &k in &self.branch_kernels {
            specs.push(ParamSpec::weight(format!("{prefix}.branch{k}.h.weight"), [c, 1, 1, k], k));
            specs.push(ParamSpec::bias(format!("{prefix}.branch{k}.h.bias"), c));
            specs.push(ParamSpec::weight(format!("{prefix}.branch{k}.v.weight"), [c, 1, k, 1], k));
            specs.push(ParamSpec::bias(format!("{prefix}.branch{k}.v.bias"), c));
        }
        specs.push(ParamSpec::weight(format!("{prefix}.mix.weight"), [c, c, 1, 1], c));
        specs.push(ParamSpec::bias(format!("{prefix}.mix.bias"), c));
        Ok(specs)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct StripPairVars {
    pub h_weight: Var,
    pub h_bias: Var,
    pub v_weight: Var,
    pub v_bias: Var,
}

#[derive(Clone, Debug)]
pub struct MspgVars {
    pub dconv_weight: Var,
    pub dconv_bias: Var,
    pub branches: Vec<StripPairVars>,
    pub mix_weight: Var,
    pub mix_bias: Var,
}

impl MspgVars {
    pub fn bind(prefix: &str, cfg: &MspgConfig, mut lookup: impl FnMut(&str) -> Result<Var>) -> Result<Self> {
        let dconv_weight = lookup(&format!("{prefix}.dconv.weight"))?;
        let dconv_bias = lookup(&format!("{prefix}.dconv.bias"))?;
        let branches = cfg
            .branch_kernels
            .iter()
            .map(|k| {
                Ok(StripPairVars {
                    h_weight: lookup(&format!("{prefix}.branch{k}.h.weight"))?,
                    h_bias: lookup(&format!("{prefix}.branch{k}.h.bias"))?,
                    v_weight: lookup(&format!("{prefix}.branch{k}.v.weight"))?,
                    v_bias: lookup(&format!("{prefix}.branch{k}.v.bias"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MspgVars {
            dconv_weight,
            dconv_bias,
            branches,
            mix_weight: lookup(&format!("{prefix}.mix.weight"))?,
            mix_bias: lookup(&format!("{prefix}.mix.bias"))?,
        })
    }
}

/// Multi-scale convolutional attention gated onto its own input; output has
/// the input's shape.
pub fn mspg_forward(g: &mut Graph, features: Var, cfg: &MspgConfig, p: &MspgVars) -> Result<Var> {
    let c = g.value(features).c();
    if c != cfg.channels {
        return Err(Error::ChannelMismatch { op: "mspg_forward", expected: cfg.channels, got: c });
    }
    let local = g.conv2d_depthwise(features, p.dconv_weight, p.dconv_bias)?;
    let mut sum = local;
    for b in &p.branches {
        let h = g.conv2d_strip(local, b.h_weight, b.h_bias, StripOrientation::Horizontal)?;
        let v = g.conv2d_strip(h, b.v_weight, b.v_bias, StripOrientation::Vertical)?;
        sum = g.add(sum, v)?;
    }
    let attention = g.conv2d_pointwise(sum, p.mix_weight, p.mix_bias)?;
    g.mul(attention, features)
}

/// Zero-initialized projection from `channels` to `d_p`.
pub fn mspg_projection_specs(prefix: &str, channels: usize, d_p: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::new(format!("{prefix}.proj.weight"), [d_p, channels, 1, 1], crate::tensor_core::Init::Zeros),
        ParamSpec::bias(format!("{prefix}.proj.bias"), d_p),
    ]
}

/// Average-pools the attention output down to the token grid, then projects
/// channels to the prompt dimension.
pub fn mspg_to_prompt(g: &mut Graph, attention_out: Var, weight: Var, bias: Var, grid: (usize, usize)) -> Result<Var> {
    let [_, _, hs, ws] = g.value(attention_out).shape();
    let (ht, wt) = grid;
    for (what, v, d) in [("feature height", hs, ht), ("feature width", ws, wt)] {
        if d == 0 || v % d != 0 {
            return Err(Error::Indivisible { op: "mspg_to_prompt", what, value: v, divisor: d });
        }
    }
    let pooled = if (hs, ws) == (ht, wt) { attention_out } else { g.avg_pool(attention_out, hs / ht, ws / wt)? };
    g.conv2d_pointwise(pooled, weight, bias)
}
