use super::config::ModelConfig;
use super::state::ModelState;
use crate::error::{Error, Result};
use crate::prompt::{fpg_forward, mspg_forward, mspg_to_prompt, FpgVars, MspgVars};
use crate::tensor_core::{attention_block, Activation, AttentionBlockVars, Graph, Tensor, Var};

/// Registers state parameters as graph leaves on demand.
pub struct Binder<'a> {
    state: &'a ModelState,
}

impl<'a> Binder<'a> {
    pub fn new(state: &'a ModelState) -> Self {
        Binder { state }
    }

    pub fn bind(&self, g: &mut Graph, id: &str) -> Result<Var> {
        let p = self.state.require(id)?;
        Ok(g.param(id, p.value.clone(), p.trainable))
    }

    fn pair(&self, g: &mut Graph, prefix: &str) -> Result<(Var, Var)> {
        Ok((self.bind(g, &format!("{prefix}.weight"))?, self.bind(g, &format!("{prefix}.bias"))?))
    }
}

/// Strided patch embedding `[N, 1, H, W] -> [N, C_e, H / s, W / s]`.
pub fn stem_embed(g: &mut Graph, image: Var, b: &Binder, cfg: &ModelConfig) -> Result<Var> {
    let (w, bias) = b.pair(g, "stem")?;
    g.conv2d_patch(image, w, bias, cfg.stem_stride)
}

/// `tokens + up(GELU(down(prompt_tokens)))` on `[N, 1, T, d]` rows.
pub fn adapter_apply(g: &mut Graph, tokens: Var, prompt_tokens: Var, down: (Var, Var), up: (Var, Var)) -> Result<Var> {
    let [_, _, t, _] = g.value(tokens).shape();
    let [_, _, tp, _] = g.value(prompt_tokens).shape();
    if t != tp {
        return Err(Error::ShapeMismatch {
            op: "adapter_apply",
            expected: g.value(tokens).shape().to_vec(),
            got: g.value(prompt_tokens).shape().to_vec(),
        });
    }
    let h = g.fully_connected(prompt_tokens, down.0, down.1)?;
    let a = g.activation(h, Activation::Gelu)?;
    let u = g.fully_connected(a, up.0, up.1)?;
    g.add(tokens, u)
}

fn block_vars(g: &mut Graph, b: &Binder, i: usize) -> Result<AttentionBlockVars> {
    let p = format!("encoder.{i}");
    let mut v = |s: &str| b.bind(g, &format!("{p}.{s}"));
    Ok(AttentionBlockVars {
        ln1_gamma: v("ln1.gamma")?,
        ln1_beta: v("ln1.beta")?,
        qkv_weight: v("qkv.weight")?,
        qkv_bias: v("qkv.bias")?,
        proj_weight: v("proj.weight")?,
        proj_bias: v("proj.bias")?,
        ln2_gamma: v("ln2.gamma")?,
        ln2_beta: v("ln2.beta")?,
        mlp_in_weight: v("mlp.in.weight")?,
        mlp_in_bias: v("mlp.in.bias")?,
        mlp_out_weight: v("mlp.out.weight")?,
        mlp_out_bias: v("mlp.out.bias")?,
    })
}

/// Summed prompt grid `[N, d_p, H_t, W_t]`, or `None` with both generators off.
pub fn prompt_grid(g: &mut Graph, image: Var, stem: Var, b: &Binder, cfg: &ModelConfig) -> Result<Option<Var>> {
    let [_, _, h, w] = g.value(image).shape();
    let grid = cfg.token_grid(h, w);
    let mut prompt = None;
    if cfg.use_fpg {
        let vars = FpgVars::bind("fpg", |id| b.bind(g, id))?;
        prompt = Some(fpg_forward(g, image, &cfg.fpg_config(), &vars)?);
    }
    if cfg.use_mspg {
        let mcfg = cfg.mspg_config();
        let vars = MspgVars::bind("mspg", &mcfg, |id| b.bind(g, id))?;
        let source = if cfg.mspg_on_raw { image } else { stem };
        let att = mspg_forward(g, source, &mcfg, &vars)?;
        let (pw, pb) = b.pair(g, "mspg.proj")?;
        let p_ms = mspg_to_prompt(g, att, pw, pb, grid)?;
        prompt = Some(match prompt {
            Some(p_f) => g.add(p_f, p_ms)?,
            None => p_ms,
        });
    }
    Ok(prompt)
}

/// Records the full forward pass and returns the `[N, 1, H, W]` logits.
pub fn forward_graph(g: &mut Graph, image: Var, state: &ModelState, cfg: &ModelConfig) -> Result<Var> {
    let [n, c, h, w] = g.value(image).shape();
    if c != 1 {
        return Err(Error::ChannelMismatch { op: "forward", expected: 1, got: c });
    }
    let s = cfg.token_stride();
    for (what, v) in [("image height", h), ("image width", w)] {
        if v % s != 0 {
            return Err(Error::Indivisible { op: "forward", what, value: v, divisor: s });
        }
    }
    let (ht, wt) = cfg.token_grid(h, w);
    let b = Binder::new(state);

    let stem = stem_embed(g, image, &b, cfg)?;
    let (mw, mb) = b.pair(g, "merge")?;
    let merged = g.conv2d_patch(stem, mw, mb, cfg.merge_stride)?;
    let mut tokens = g.to_tokens(merged)?;

    let prompt = prompt_grid(g, image, stem, &b, cfg)?;
    let prompt_tokens = match prompt {
        Some(p) => Some(g.to_tokens(p)?),
        None => None,
    };

    let adapter = if cfg.use_adapters {
        let pt = match prompt_tokens {
            Some(p) => p,
            None => g.input(Tensor::zeros([n, 1, ht * wt, cfg.prompt_dim]), false),
        };
        Some((pt, b.pair(g, "adapter.down")?))
    } else {
        None
    };

    for i in 0..cfg.depth {
        let step = |g: &mut Graph, tokens: Var| -> Result<Var> {
            let vars = block_vars(g, &b, i)?;
            let mut t = attention_block(g, tokens, &vars, cfg.heads, cfg.attention)?;
            if let Some((pt, down)) = adapter {
                let up = b.pair(g, &format!("adapter.{i}.up"))?;
                t = adapter_apply(g, t, pt, down, up)?;
            }
            Ok(t)
        };
        tokens = step(g, tokens).map_err(|e| e.in_block(i))?;
    }
    if cfg.dense_injection {
        if let Some(pt) = prompt_tokens {
            tokens = g.add(tokens, pt)?;
        }
    }

    let mut x = g.from_tokens(tokens, ht, wt)?;
    for j in 0..cfg.decoder_channels.len() {
        let (dw, db) = b.pair(g, &format!("decoder.{j}"))?;
        let up = g.conv2d_patch_transpose(x, dw, db, 2)?;
        x = g.activation(up, Activation::Gelu)?;
    }
    let (hw, hb) = b.pair(g, "decoder.head")?;
    g.conv2d_pointwise(x, hw, hb)
}

/// Per-pixel logits for a batch of `[N, 1, H, W]` images.
pub fn forward(image: &Tensor, state: &ModelState, cfg: &ModelConfig) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.input(image.clone(), false);
    let out = forward_graph(&mut g, x, state, cfg)?;
    let logits = g.value(out);
    if !logits.is_finite() {
        return Err(Error::NonFinite("model logits".into()));
    }
    Ok(logits.clone())
}
