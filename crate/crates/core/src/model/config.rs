use serde::{Deserialize, Serialize};

use crate::dct::{FrequencySelection, HalfShift};
use crate::error::{Error, Result};
use crate::prompt::{mspg_projection_specs, FpgConfig, MspgConfig};
use crate::tensor_core::{Init, ParamSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_height: usize,
    pub image_width: usize,
    /// Stride (and kernel) of the stem patch embedding.
    pub stem_stride: usize,
    /// Stem feature channels, shared by the encoder and the multi-scale generator.
    pub stem_channels: usize,
    /// Stride of the patch merge from stem features to encoder tokens.
    pub merge_stride: usize,
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub adapter_dim: usize,
    pub prompt_dim: usize,
    /// Output channels of each stride-2 transposed-conv decoder stage.
    pub decoder_channels: Vec<usize>,
    pub use_fpg: bool,
    pub use_mspg: bool,
    pub use_adapters: bool,
    /// Self-attention in the encoder blocks; off leaves per-token blocks.
    pub attention: bool,
    /// Add the prompt grid to the final tokens before decoding.
    pub dense_injection: bool,
    /// Run the multi-scale generator on the raw image instead of stem features.
    pub mspg_on_raw: bool,
    pub dct_mode: FrequencySelection,
    pub dct_half_shift: HalfShift,
    pub fpg_hidden: usize,
    pub fpg_embed_kernel: usize,
    pub mspg_dconv_kernel: usize,
    pub mspg_branch_kernels: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_height: 64,
            image_width: 64,
            stem_stride: 4,
            stem_channels: 16,
            merge_stride: 2,
            depth: 4,
            width: 64,
            heads: 2,
            mlp_hidden: 128,
            adapter_dim: 16,
            prompt_dim: 64,
            decoder_channels: vec![32, 16, 8],
            use_fpg: true,
            use_mspg: true,
            use_adapters: true,
            attention: true,
            dense_injection: true,
            mspg_on_raw: false,
            dct_mode: FrequencySelection::Top(1),
            dct_half_shift: HalfShift::Spatial,
            fpg_hidden: 32,
            fpg_embed_kernel: 1,
            mspg_dconv_kernel: 5,
            mspg_branch_kernels: vec![7, 11, 21],
        }
    }
}

/// Parameter families; everything outside `Backbone` is adapted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Backbone,
    Adapter,
    Fpg,
    Mspg,
}

impl Group {
    pub fn of(id: &str) -> Group {
        match id.split('.').next() {
            Some("adapter") => Group::Adapter,
            Some("fpg") => Group::Fpg,
            Some("mspg") => Group::Mspg,
            _ => Group::Backbone,
        }
    }
}

impl ModelConfig {
    /// Pixel stride of one encoder token.
    pub fn token_stride(&self) -> usize {
        self.stem_stride * self.merge_stride
    }

    pub fn token_grid(&self, h: usize, w: usize) -> (usize, usize) {
        (h / self.token_stride(), w / self.token_stride())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.stem_stride == 0 || self.merge_stride == 0 || self.stem_channels == 0 {
            return bad("stem stride, merge stride and stem channels must be positive".into());
        }
        if self.prompt_dim != self.width {
            return bad(format!("prompt_dim ({}) must equal width ({})", self.prompt_dim, self.width));
        }
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::Indivisible { op: "ModelConfig", what: "width", value: self.width, divisor: self.heads });
        }
        if self.depth == 0 || self.adapter_dim == 0 || self.mlp_hidden == 0 || self.fpg_hidden == 0 {
            return bad("depth, adapter_dim, mlp_hidden and fpg_hidden must be positive".into());
        }
        let up = 1usize.checked_shl(self.decoder_channels.len() as u32).unwrap_or(0);
        if up != self.token_stride() || self.decoder_channels.contains(&0) {
            return bad(format!(
                "{} stride-2 decoder stages cannot undo a token stride of {}",
                self.decoder_channels.len(),
                self.token_stride()
            ));
        }
        for (what, v) in [("image height", self.image_height), ("image width", self.image_width)] {
            if v == 0 || v % self.token_stride() != 0 {
                return Err(Error::Indivisible { op: "ModelConfig", what, value: v, divisor: self.token_stride() });
            }
        }
        self.fpg_config().param_specs("fpg")?;
        self.mspg_config().param_specs("mspg")?;
        self.fpg_config().plan()?;
        Ok(())
    }

    pub fn fpg_config(&self) -> FpgConfig {
        FpgConfig {
            patch: self.token_stride(),
            selection: self.dct_mode,
            half_shift: self.dct_half_shift,
            d_mid: self.fpg_hidden,
            d_p: self.prompt_dim,
            embed_kernel: self.fpg_embed_kernel,
        }
    }

    pub fn mspg_config(&self) -> MspgConfig {
        MspgConfig {
            dconv_kernel: self.mspg_dconv_kernel,
            branch_kernels: self.mspg_branch_kernels.clone(),
            channels: if self.mspg_on_raw { 1 } else { self.stem_channels },
        }
    }

    /// Groups that train in the adapt stage under the current flags.
    pub fn adapted_groups(&self) -> Vec<Group> {
        let mut groups = Vec::new();
        if self.use_adapters {
            groups.push(Group::Adapter);
        }
        if self.use_fpg {
            groups.push(Group::Fpg);
        }
        if self.use_mspg {
            groups.push(Group::Mspg);
        }
        groups
    }

    /// Every parameter of the model in a fixed order. All groups exist
    /// regardless of the usage flags.
    pub fn param_specs(&self) -> Result<Vec<ParamSpec>> {
        let (ce, d, s) = (self.stem_channels, self.width, self.stem_stride);
        let m = self.merge_stride;
        let mut specs = vec![
            ParamSpec::weight("stem.weight", [ce, 1, s, s], s * s),
            ParamSpec::bias("stem.bias", ce),
            ParamSpec::weight("merge.weight", [d, ce, m, m], ce * m * m),
            ParamSpec::bias("merge.bias", d),
        ];
        for i in 0..self.depth {
            let p = format!("encoder.{i}");
            let h = self.mlp_hidden;
            specs.extend([
                ParamSpec::new(format!("{p}.ln1.gamma"), [1, 1, 1, d], Init::Ones),
                ParamSpec::bias(format!("{p}.ln1.beta"), d),
                ParamSpec::weight(format!("{p}.qkv.weight"), [1, 1, d, 3 * d], d),
                ParamSpec::bias(format!("{p}.qkv.bias"), 3 * d),
                ParamSpec::weight(format!("{p}.proj.weight"), [1, 1, d, d], d),
                ParamSpec::bias(format!("{p}.proj.bias"), d),
                ParamSpec::new(format!("{p}.ln2.gamma"), [1, 1, 1, d], Init::Ones),
                ParamSpec::bias(format!("{p}.ln2.beta"), d),
                ParamSpec::weight(format!("{p}.mlp.in.weight"), [1, 1, d, h], d),
                ParamSpec::bias(format!("{p}.mlp.in.bias"), h),
                ParamSpec::weight(format!("{p}.mlp.out.weight"), [1, 1, h, d], h),
                ParamSpec::bias(format!("{p}.mlp.out.bias"), d),
            ]);
        }
        let mut cin = d;
        for (j, &cout) in self.decoder_channels.iter().enumerate() {
            specs.push(ParamSpec::weight(format!("decoder.{j}.weight"), [cin, cout, 2, 2], cin));
            specs.push(ParamSpec::bias(format!("decoder.{j}.bias"), cout));
            cin = cout;
        }
        specs.push(ParamSpec::weight("decoder.head.weight", [1, cin, 1, 1], cin));
        specs.push(ParamSpec::bias("decoder.head.bias", 1));

        let (dp, da) = (self.prompt_dim, self.adapter_dim);
        specs.push(ParamSpec::weight("adapter.down.weight", [1, 1, dp, da], dp));
        specs.push(ParamSpec::bias("adapter.down.bias", da));
        for i in 0..self.depth {
            specs.push(ParamSpec::new(format!("adapter.{i}.up.weight"), [1, 1, da, d], Init::Zeros));
            specs.push(ParamSpec::bias(format!("adapter.{i}.up.bias"), d));
        }
        specs.extend(self.fpg_config().param_specs("fpg")?);
        let mspg = self.mspg_config();
        specs.extend(mspg.param_specs("mspg")?);
        specs.extend(mspg_projection_specs("mspg", mspg.channels, dp));
        Ok(specs)
    }
}
