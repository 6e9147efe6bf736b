use serde::{Deserialize, Serialize};

use super::graph::{Activation, Graph, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StripOrientation {
    /// `1 x k` kernel, runs along the width.
    Horizontal,
    /// `k x 1` kernel, runs along the height.
    Vertical,
}

impl Graph {
    /// Depthwise strip convolution. The kernel must be `[C, 1, 1, k]` for a
    /// horizontal strip or `[C, 1, k, 1]` for a vertical one, `k` odd.
    pub fn conv2d_strip(&mut self, x: Var, kernel: Var, bias: Var, orientation: StripOrientation) -> Result<Var> {
        const OP: &str = "conv2d_strip";
        let [c, one, kh, kw] = self.value(kernel).shape();
        let k = match orientation {
            StripOrientation::Horizontal if kh == 1 => kw,
            StripOrientation::Vertical if kw == 1 => kh,
            _ => {
                let expected = match orientation {
                    StripOrientation::Horizontal => vec![c, 1, 1, kw.max(kh)],
                    StripOrientation::Vertical => vec![c, 1, kh.max(kw), 1],
                };
                return Err(Error::ShapeMismatch { op: OP, expected, got: vec![c, one, kh, kw] });
            }
        };
        if k % 2 == 0 {
            return Err(Error::EvenKernel { op: OP, size: k });
        }
        self.conv2d_depthwise(x, kernel, bias)
    }
}

/// Parameters of one pre-norm transformer block.
#[derive(Clone, Copy, Debug)]
pub struct AttentionBlockVars {
    pub ln1_gamma: Var,
    pub ln1_beta: Var,
    pub qkv_weight: Var,
    pub qkv_bias: Var,
    pub proj_weight: Var,
    pub proj_bias: Var,
    pub ln2_gamma: Var,
    pub ln2_beta: Var,
    pub mlp_in_weight: Var,
    pub mlp_in_bias: Var,
    pub mlp_out_weight: Var,
    pub mlp_out_bias: Var,
}

/// `x + MHSA(LN(x))` followed by `x + MLP(LN(x))` on `[N, 1, T, d]` tokens.
/// With `attend == false` the attention branch is skipped, leaving a purely
/// per-token block.
pub fn attention_block(g: &mut Graph, x: Var, p: &AttentionBlockVars, heads: usize, attend: bool) -> Result<Var> {
    let d = g.value(x).w();
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::Indivisible { op: "attention_block", what: "model width", value: d, divisor: heads });
    }
    let mut h = x;
    if attend {
        let n1 = g.layer_norm(h, p.ln1_gamma, p.ln1_beta)?;
        let qkv = g.fully_connected(n1, p.qkv_weight, p.qkv_bias)?;
        let att = g.self_attention(qkv, heads)?;
        let proj = g.fully_connected(att, p.proj_weight, p.proj_bias)?;
        h = g.add(h, proj)?;
    }
    let n2 = g.layer_norm(h, p.ln2_gamma, p.ln2_beta)?;
    let m1 = g.fully_connected(n2, p.mlp_in_weight, p.mlp_in_bias)?;
    let a = g.activation(m1, Activation::Gelu)?;
    let m2 = g.fully_connected(a, p.mlp_out_weight, p.mlp_out_bias)?;
    g.add(h, m2)
}
