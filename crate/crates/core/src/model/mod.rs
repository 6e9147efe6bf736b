//! The toy segmentation model: stem, adapter-equipped transformer encoder,
//! prompt injection and transposed-convolution decoder.
//!
//! Data flow for a `[N, 1, H, W]` image with token stride `s`:
//!
//! ```text
//! image ─ stem (patch conv) ─ merge (patch conv) ─ tokens ─ blocks ─ (+ prompt) ─ decoder ─ logits
//!   │          │                                             ▲
//!   │          └─ multi-scale generator ─ pool ─ project ─┐   │ adapters
//!   └─ frequency generator ───────────────────────────────┴─ prompt
//! ```
//!
//! Prompt projections and adapter up-projections start at zero, so a freshly
//! adapted model computes exactly the backbone's function.

mod checkpoint;
mod config;
mod forward;
mod state;

pub use checkpoint::Checkpoint;
pub use config::{Group, ModelConfig};
pub use forward::{adapter_apply, forward, forward_graph, prompt_grid, stem_embed, Binder};
pub use state::{trainable_ids, ModelState, Stage};

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::dct::FrequencySelection;
    use crate::tensor_core::{Graph, Tensor};

    fn small() -> ModelConfig {
        ModelConfig {
            depth: 2,
            width: 16,
            prompt_dim: 16,
            mlp_hidden: 24,
            stem_channels: 4,
            adapter_dim: 4,
            fpg_hidden: 8,
            ..ModelConfig::default()
        }
    }

    fn image(h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::uniform([1, 1, h, w], 0.0, 1.0, &mut rng)
    }

    fn randomize(state: &mut ModelState, groups: &[Group], seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in state.params_mut().filter(|p| groups.contains(&Group::of(&p.id))) {
            p.value = Tensor::uniform(p.value.shape(), -0.3, 0.3, &mut rng);
        }
    }

    #[test]
    fn zero_init_adaptation_reproduces_backbone() {
        let base = small();
        let state = ModelState::init(&base, 3).unwrap();
        let backbone_cfg = ModelConfig { use_fpg: false, use_mspg: false, use_adapters: false, ..base.clone() };
        let x = image(64, 64, 1);
        let reference = forward(&x, &state, &backbone_cfg).unwrap();
        for (fpg, mspg) in [(false, false), (true, false), (false, true), (true, true)] {
            let cfg = ModelConfig { use_fpg: fpg, use_mspg: mspg, use_adapters: true, ..base.clone() };
            let mut adapted = state.clone();
            adapted.set_stage(Stage::Adapt, &cfg);
            let out = forward(&x, &adapted, &cfg).unwrap();
            assert!(out.max_abs_diff(&reference) <= 1e-12, "fpg={fpg} mspg={mspg}");
        }
    }

    #[test]
    fn logits_match_input_size() {
        let cfg = small();
        let state = ModelState::init(&cfg, 1).unwrap();
        for (h, w) in [(64, 64), (96, 64)] {
            let out = forward(&image(h, w, 2), &state, &cfg).unwrap();
            assert_eq!(out.shape(), [1, 1, h, w]);
            assert!(out.is_finite());
        }
        assert!(forward(&image(60, 64, 2), &state, &cfg).is_err());
    }

    fn perturbation_footprint(cfg: &ModelConfig, h: usize, w: usize, at: (usize, usize)) -> Tensor {
        let mut state = ModelState::init(cfg, 5).unwrap();
        randomize(&mut state, &[Group::Adapter, Group::Fpg, Group::Mspg], 6);
        let x = image(h, w, 7);
        let mut y = x.clone();
        y.set(0, 0, at.0, at.1, x.at(0, 0, at.0, at.1) + 0.5);
        let a = forward(&x, &state, cfg).unwrap();
        let b = forward(&y, &state, cfg).unwrap();
        a.zip_map(&b, |p, q| (p - q).abs()).unwrap()
    }

    #[test]
    fn without_attention_influence_stays_in_the_token_block() {
        let cfg = ModelConfig { attention: false, use_mspg: false, ..small() };
        let diff = perturbation_footprint(&cfg, 64, 64, (20, 37));
        let mut inside = 0.0f64;
        for i in 0..64 {
            for j in 0..64 {
                let d = diff.at(0, 0, i, j);
                if (16..24).contains(&i) && (32..40).contains(&j) {
                    inside = inside.max(d);
                } else {
                    assert_eq!(d, 0.0, "({i},{j})");
                }
            }
        }
        assert!(inside > 0.0);
    }

    #[test]
    fn multiscale_branch_widens_the_bound_to_its_kernel_reach() {
        // Stem column 2; dconv reach 2 plus strip reach 10 covers stem columns
        // 0..=14, i.e. tokens 0..=7 and pixels below 64.
        let cfg = ModelConfig { attention: false, use_fpg: false, ..small() };
        let diff = perturbation_footprint(&cfg, 32, 128, (5, 8));
        let mut far = 0.0f64;
        for i in 0..32 {
            for j in 0..128 {
                let d = diff.at(0, 0, i, j);
                if j >= 64 {
                    assert_eq!(d, 0.0, "({i},{j})");
                } else if j >= 8 {
                    far = far.max(d);
                }
            }
        }
        assert!(far > 0.0, "influence should leave the perturbed token");
    }

    #[test]
    fn with_attention_influence_is_global() {
        let cfg = ModelConfig { use_mspg: false, ..small() };
        let mut state = ModelState::init(&cfg, 5).unwrap();
        randomize(&mut state, &[Group::Adapter, Group::Fpg], 6);
        let x = image(64, 64, 7);
        let mut y = x.clone();
        y.set(0, 0, 3, 3, 0.9);
        let a = forward(&x, &state, &cfg).unwrap();
        let b = forward(&y, &state, &cfg).unwrap();
        assert_ne!(a.at(0, 0, 60, 60), b.at(0, 0, 60, 60));
    }

    #[test]
    fn stem_matches_strided_loop_oracle() {
        let cfg = small();
        let state = ModelState::init(&cfg, 8).unwrap();
        let x = image(16, 24, 9);
        let mut g = Graph::new();
        let xv = g.input(x.clone(), false);
        let out = stem_embed(&mut g, xv, &Binder::new(&state), &cfg).unwrap();
        let out = g.value(out).clone();
        let (w, b) = (&state.get("stem.weight").unwrap().value, &state.get("stem.bias").unwrap().value);
        assert_eq!(out.shape(), [1, 4, 4, 6]);
        for c in 0..4 {
            for i in 0..4 {
                for j in 0..6 {
                    let mut acc = b.data()[c];
                    for p in 0..4 {
                        for q in 0..4 {
                            acc += w.at(c, 0, p, q) * x.at(0, 0, 4 * i + p, 4 * j + q);
                        }
                    }
                    assert!((out.at(0, c, i, j) - acc).abs() <= 1e-12);
                }
            }
        }
        let zero = ModelState::init(&cfg, 8).unwrap();
        let mut g = Graph::new();
        let xv = g.input(Tensor::zeros([1, 1, 64, 64]), false);
        let out = stem_embed(&mut g, xv, &Binder::new(&zero), &cfg).unwrap();
        assert_eq!(g.value(out).shape(), [1, 4, 16, 16]);
        assert!(g.value(out).data().iter().all(|&v| v == 0.0));
    }

    fn gelu(x: f64) -> f64 {
        0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
    }

    #[test]
    fn adapter_matches_two_layer_mlp() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (t, d, da) = (5, 6, 3);
        let tokens = Tensor::uniform([1, 1, t, d], -1.0, 1.0, &mut rng);
        let prompt = Tensor::uniform([1, 1, t, d], -1.0, 1.0, &mut rng);
        let wd = Tensor::uniform([1, 1, d, da], -1.0, 1.0, &mut rng);
        let bd = Tensor::uniform([1, 1, 1, da], -1.0, 1.0, &mut rng);
        let wu = Tensor::uniform([1, 1, da, d], -1.0, 1.0, &mut rng);
        let bu = Tensor::uniform([1, 1, 1, d], -1.0, 1.0, &mut rng);
        let run = |wu: &Tensor, bu: &Tensor, prompt: &Tensor, bd: &Tensor| {
            let mut g = Graph::new();
            let v: Vec<_> = [&tokens, prompt, &wd, bd, wu, bu].iter().map(|t| g.input((*t).clone(), false)).collect();
            let out = adapter_apply(&mut g, v[0], v[1], (v[2], v[3]), (v[4], v[5])).unwrap();
            g.value(out).clone()
        };
        let out = run(&wu, &bu, &prompt, &bd);
        for r in 0..t {
            let hidden: Vec<f64> =
                (0..da).map(|k| gelu(bd.data()[k] + (0..d).map(|i| prompt.at(0, 0, r, i) * wd.at(0, 0, i, k)).sum::<f64>())).collect();
            for c in 0..d {
                let up = bu.data()[c] + (0..da).map(|k| hidden[k] * wu.at(0, 0, k, c)).sum::<f64>();
                assert!((out.at(0, 0, r, c) - (tokens.at(0, 0, r, c) + up)).abs() <= 1e-12);
            }
        }
        assert_eq!(run(&Tensor::zeros(wu.shape()), &Tensor::zeros(bu.shape()), &prompt, &bd), tokens);
        let zero_in = run(&wu, &Tensor::zeros(bu.shape()), &Tensor::zeros(prompt.shape()), &Tensor::zeros(bd.shape()));
        assert_eq!(zero_in, tokens);
    }

    #[test]
    fn trainable_sets_follow_stage_and_flags() {
        let cfg = ModelConfig { use_fpg: false, use_mspg: false, ..small() };
        let mut state = ModelState::init(&cfg, 1).unwrap();
        assert_eq!(state.trainable_parameters().len(), state.len());
        state.set_stage(Stage::Adapt, &cfg);
        let ids = state.trainable_parameters();
        assert!(!ids.is_empty() && ids.iter().all(|id| id.starts_with("adapter.")));
        assert_eq!(ids, trainable_ids(&cfg, Stage::Adapt).unwrap());
    }

    #[test]
    fn adapt_scalar_count_has_closed_form() {
        let cfg = ModelConfig { dct_mode: FrequencySelection::Top(4), ..ModelConfig::default() };
        let mut state = ModelState::init(&cfg, 1).unwrap();
        state.set_stage(Stage::Adapt, &cfg);
        let trainable: usize = state.params().filter(|p| p.trainable).map(|p| p.value.len()).sum();
        let (d, dp, da, depth, ce) = (64, 64, 16, 4, 16);
        let adapters = dp * da + da + depth * (da * d + d);
        let (k, dm) = (4, 32);
        let fpg = k * dm + dm + dp * dm + dp;
        let strips: usize = [7, 11, 21].iter().map(|k| 2 * (ce * k + ce)).sum();
        let mspg = ce * 25 + ce + strips + ce * ce + ce + ce * dp + dp;
        assert_eq!(trainable, adapters + fpg + mspg);
    }

    #[test]
    fn group_reinit_is_reproducible() {
        let cfg = small();
        let fresh = ModelState::init(&cfg, 11).unwrap();
        let mut other = fresh.clone();
        randomize(&mut other, &[Group::Adapter, Group::Fpg, Group::Mspg], 12);
        assert_ne!(other, fresh);
        for group in [Group::Adapter, Group::Fpg, Group::Mspg] {
            other.reinit_group(&cfg, group, 11).unwrap();
        }
        assert_eq!(other, fresh);
    }

    #[test]
    fn checkpoint_round_trip_is_byte_identical() {
        let cfg = small();
        let mut state = ModelState::init(&cfg, 13).unwrap();
        state.set_stage(Stage::Adapt, &cfg);
        let ck = Checkpoint::new(cfg.clone(), state).unwrap();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let other = ModelConfig { depth: 3, ..cfg };
        assert!(Checkpoint::new(other, back.state).is_err());
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = small();
        let a = forward(&image(64, 64, 1), &ModelState::init(&cfg, 2).unwrap(), &cfg).unwrap();
        let b = forward(&image(64, 64, 1), &ModelState::init(&cfg, 2).unwrap(), &cfg).unwrap();
        assert_eq!(a, b);
    }
}
