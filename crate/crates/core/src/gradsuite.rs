//! The named catalog of finite-difference gradient checks: every
//! differentiable op, the composite layers and both prompt generators.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::dct::{frequency_plan, FrequencySelection, HalfShift};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::metrics::{iou_loss, iou_loss_grad};
use crate::model::adapter_apply;
use crate::prompt::{fpg_forward, mspg_forward, mspg_to_prompt, FpgConfig, FpgVars, MspgConfig, MspgVars};
use crate::tensor_core::{
    attention_block, grad_check, resample_near_kinks, with_corrupted_backward, Activation, AttentionBlockVars, Graph, OpKind, ParamSpec,
    StripOrientation, Tensor, Var, GRAD_CHECK_EPS, GRAD_CHECK_TOL,
};

type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var> + Sync>;

/// One row of the suite.
pub struct GradCase {
    pub name: &'static str,
    leaves: Vec<(String, Tensor)>,
    check: Check,
}

enum Check {
    Graph(Build),
    IouLoss,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradRow {
    pub name: String,
    pub max_rel_error: f64,
    pub passed: bool,
}

fn leaf(rng: &mut ChaCha8Rng, name: &str, shape: [usize; 4]) -> (String, Tensor) {
    (name.to_string(), Tensor::uniform(shape, -1.0, 1.0, rng))
}

fn from_specs(rng: &mut ChaCha8Rng, specs: &[ParamSpec]) -> Vec<(String, Tensor)> {
    specs.iter().map(|s| leaf(rng, &s.id, s.shape)).collect()
}

fn lookup<'a>(leaves: &'a [String], vars: &'a [Var]) -> impl FnMut(&str) -> Result<Var> + 'a {
    move |id| {
        leaves
            .iter()
            .position(|n| n == id)
            .map(|i| vars[i])
            .ok_or_else(|| Error::InvalidArgument(format!("gradient case has no leaf '{id}'")))
    }
}

fn case(name: &'static str, leaves: Vec<(String, Tensor)>, build: impl Fn(&mut Graph, &[Var]) -> Result<Var> + Sync + 'static) -> GradCase {
    GradCase { name, leaves, check: Check::Graph(Box::new(build)) }
}

fn activation_case(name: &'static str, kind: Activation, rng: &mut ChaCha8Rng) -> GradCase {
    let mut x = leaf(rng, "x", [1, 2, 3, 4]);
    if kind == Activation::Relu {
        resample_near_kinks(&mut x.1, 1e-2, rng);
    }
    case(name, vec![x], move |g, v| g.activation(v[0], kind))
}

/// All rows in a fixed order; leaf values are drawn from a fixed seed.
pub fn catalog() -> Result<Vec<GradCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let r = &mut rng;
    let mut cases = vec![
        case(
            "conv2d_depthwise",
            vec![leaf(r, "x", [1, 2, 5, 6]), leaf(r, "kernel", [2, 1, 3, 3]), leaf(r, "bias", [1, 1, 1, 2])],
            |g, v| g.conv2d_depthwise(v[0], v[1], v[2]),
        ),
        case(
            "conv2d_strip_horizontal",
            vec![leaf(r, "x", [1, 2, 4, 9]), leaf(r, "kernel", [2, 1, 1, 7]), leaf(r, "bias", [1, 1, 1, 2])],
            |g, v| g.conv2d_strip(v[0], v[1], v[2], StripOrientation::Horizontal),
        ),
        case(
            "conv2d_strip_vertical",
            vec![leaf(r, "x", [1, 2, 9, 4]), leaf(r, "kernel", [2, 1, 7, 1]), leaf(r, "bias", [1, 1, 1, 2])],
            |g, v| g.conv2d_strip(v[0], v[1], v[2], StripOrientation::Vertical),
        ),
        case("conv2d_dense", vec![leaf(r, "x", [1, 2, 5, 5]), leaf(r, "weight", [3, 2, 3, 3]), leaf(r, "bias", [1, 1, 1, 3])], |g, v| {
            g.conv2d_dense(v[0], v[1], v[2])
        }),
        case(
            "conv2d_pointwise",
            vec![leaf(r, "x", [2, 3, 3, 4]), leaf(r, "weight", [2, 3, 1, 1]), leaf(r, "bias", [1, 1, 1, 2])],
            |g, v| g.conv2d_pointwise(v[0], v[1], v[2]),
        ),
        case("conv2d_patch", vec![leaf(r, "x", [1, 2, 4, 6]), leaf(r, "weight", [3, 2, 2, 2]), leaf(r, "bias", [1, 1, 1, 3])], |g, v| {
            g.conv2d_patch(v[0], v[1], v[2], 2)
        }),
        case(
            "conv2d_patch_transpose",
            vec![leaf(r, "x", [1, 3, 2, 3]), leaf(r, "weight", [3, 2, 2, 2]), leaf(r, "bias", [1, 1, 1, 2])],
            |g, v| g.conv2d_patch_transpose(v[0], v[1], v[2], 2),
        ),
        case(
            "fully_connected",
            vec![leaf(r, "x", [1, 1, 4, 5]), leaf(r, "weight", [1, 1, 5, 3]), leaf(r, "bias", [1, 1, 1, 3])],
            |g, v| g.fully_connected(v[0], v[1], v[2]),
        ),
        activation_case("sigmoid", Activation::Sigmoid, r),
        activation_case("gelu", Activation::Gelu, r),
        activation_case("relu", Activation::Relu, r),
        case("add", vec![leaf(r, "a", [1, 2, 3, 3]), leaf(r, "b", [1, 2, 3, 3])], |g, v| g.add(v[0], v[1])),
        case("mul", vec![leaf(r, "a", [1, 2, 3, 3]), leaf(r, "b", [1, 2, 3, 3])], |g, v| g.mul(v[0], v[1])),
        case("layer_norm", vec![leaf(r, "x", [1, 1, 3, 5]), leaf(r, "gamma", [1, 1, 1, 5]), leaf(r, "beta", [1, 1, 1, 5])], |g, v| {
            g.layer_norm(v[0], v[1], v[2])
        }),
        case("self_attention", vec![leaf(r, "qkv", [1, 1, 4, 12])], |g, v| g.self_attention(v[0], 2)),
    ];
    let bases = frequency_plan(FrequencySelection::Top(3), 4)?.bases(4, HalfShift::Spatial)?;
    cases.push(case("patch_dct", vec![leaf(r, "x", [1, 1, 8, 8])], move |g, v| g.patch_dct(v[0], 4, bases.clone())));
    cases.push(case("avg_pool", vec![leaf(r, "x", [1, 2, 6, 8])], |g, v| g.avg_pool(v[0], 3, 2)));
    cases.push(case("to_tokens", vec![leaf(r, "x", [1, 3, 2, 3])], |g, v| g.to_tokens(v[0])));
    cases.push(case("from_tokens", vec![leaf(r, "x", [1, 1, 6, 3])], |g, v| g.from_tokens(v[0], 2, 3)));

    let (d, hidden) = (8, 6);
    let block_names = [
        ("ln1.gamma", [1, 1, 1, d]),
        ("ln1.beta", [1, 1, 1, d]),
        ("qkv.weight", [1, 1, d, 3 * d]),
        ("qkv.bias", [1, 1, 1, 3 * d]),
        ("proj.weight", [1, 1, d, d]),
        ("proj.bias", [1, 1, 1, d]),
        ("ln2.gamma", [1, 1, 1, d]),
        ("ln2.beta", [1, 1, 1, d]),
        ("mlp.in.weight", [1, 1, d, hidden]),
        ("mlp.in.bias", [1, 1, 1, hidden]),
        ("mlp.out.weight", [1, 1, hidden, d]),
        ("mlp.out.bias", [1, 1, 1, d]),
    ];
    let mut leaves = vec![leaf(r, "x", [1, 1, 4, d])];
    leaves.extend(block_names.iter().map(|(n, s)| leaf(r, n, *s)));
    cases.push(case("attention_block", leaves, |g, v| {
        let p = AttentionBlockVars {
            ln1_gamma: v[1],
            ln1_beta: v[2],
            qkv_weight: v[3],
            qkv_bias: v[4],
            proj_weight: v[5],
            proj_bias: v[6],
            ln2_gamma: v[7],
            ln2_beta: v[8],
            mlp_in_weight: v[9],
            mlp_in_bias: v[10],
            mlp_out_weight: v[11],
            mlp_out_bias: v[12],
        };
        attention_block(g, v[0], &p, 2, true)
    }));

    cases.push(case(
        "adapter",
        vec![
            leaf(r, "tokens", [1, 1, 4, 6]),
            leaf(r, "prompt", [1, 1, 4, 5]),
            leaf(r, "down.weight", [1, 1, 5, 3]),
            leaf(r, "down.bias", [1, 1, 1, 3]),
            leaf(r, "up.weight", [1, 1, 3, 6]),
            leaf(r, "up.bias", [1, 1, 1, 6]),
        ],
        |g, v| adapter_apply(g, v[0], v[1], (v[2], v[3]), (v[4], v[5])),
    ));

    let fpg =
        FpgConfig { patch: 4, selection: FrequencySelection::Top(3), half_shift: HalfShift::Spatial, d_mid: 4, d_p: 3, embed_kernel: 3 };
    let mut leaves = vec![leaf(r, "image", [1, 1, 8, 12])];
    leaves.extend(from_specs(r, &fpg.param_specs("fpg")?));
    let names: Vec<String> = leaves.iter().map(|(n, _)| n.clone()).collect();
    cases.push(case("fpg", leaves, move |g, v| {
        let p = FpgVars::bind("fpg", lookup(&names, v))?;
        fpg_forward(g, v[0], &fpg, &p)
    }));

    let mspg = MspgConfig::new(2);
    let mut leaves = vec![leaf(r, "features", [1, 2, 6, 24])];
    leaves.extend(from_specs(r, &mspg.param_specs("mspg")?));
    let names: Vec<String> = leaves.iter().map(|(n, _)| n.clone()).collect();
    cases.push(case("mspg", leaves, move |g, v| {
        let p = MspgVars::bind("mspg", &mspg, lookup(&names, v))?;
        mspg_forward(g, v[0], &mspg, &p)
    }));

    cases.push(case(
        "mspg_to_prompt",
        vec![leaf(r, "attention", [1, 2, 8, 8]), leaf(r, "weight", [3, 2, 1, 1]), leaf(r, "bias", [1, 1, 1, 3])],
        |g, v| mspg_to_prompt(g, v[0], v[1], v[2], (2, 4)),
    ));

    let pred = Tensor::uniform([1, 1, 4, 5], 0.05, 0.95, r);
    let gt = Tensor::from_fn([1, 1, 4, 5], |_, _, _, _| if r.random_bool(0.4) { 1.0 } else { 0.0 });
    cases.push(GradCase { name: "iou_loss", leaves: vec![("pred".into(), pred), ("gt".into(), gt)], check: Check::IouLoss });
    Ok(cases)
}

impl GradCase {
    /// Largest relative error between analytic and central-difference gradients.
    pub fn max_rel_error(&self, exec: Execution) -> Result<f64> {
        match &self.check {
            Check::Graph(build) => Ok(grad_check(&self.leaves, build, GRAD_CHECK_EPS, exec)?.max_rel_error),
            Check::IouLoss => {
                let (pred, gt) = (&self.leaves[0].1, &self.leaves[1].1);
                let (_, analytic) = iou_loss_grad(pred, gt)?;
                let numeric = exec.try_map_range(pred.len(), |i| {
                    let at = |delta: f64| {
                        let mut p = pred.clone();
                        p.data_mut()[i] += delta;
                        iou_loss(&p, gt).map(|l| l.loss)
                    };
                    Ok::<_, Error>((at(GRAD_CHECK_EPS)? - at(-GRAD_CHECK_EPS)?) / (2.0 * GRAD_CHECK_EPS))
                })?;
                let scale = numeric.iter().chain(analytic.data()).fold(1e-4, |m: f64, v| m.max(v.abs()));
                Ok(numeric.iter().zip(analytic.data()).map(|(n, a)| (n - a).abs()).fold(0.0, f64::max) / scale)
            }
        }
    }
}

/// Runs every row at the default tolerance.
pub fn run_suite(exec: Execution) -> Result<Vec<GradRow>> {
    catalog()?
        .iter()
        .map(|c| {
            let err = c.max_rel_error(exec)?;
            Ok(GradRow { name: c.name.to_string(), max_rel_error: err, passed: err <= GRAD_CHECK_TOL })
        })
        .collect()
}

/// [`run_suite`] with the backward rule of `kind` sabotaged.
#[doc(hidden)]
pub fn run_suite_corrupted(kind: OpKind, exec: Execution) -> Result<Vec<GradRow>> {
    with_corrupted_backward(kind, || run_suite(exec))
}
