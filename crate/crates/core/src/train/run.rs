use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::crop::{stitch_max, width_crop};
use super::optim::{cosine_lr, AdamW, AdamWConfig};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::metrics::{iou_loss_grad, MetricsReport, DEFAULT_THRESHOLD};
use crate::model::{forward, forward_graph, Checkpoint, Group, ModelConfig, ModelState, Stage};
use crate::synth::Sample;
use crate::tensor_core::{Activation, Graph, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub lr_min: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
    pub use_fpg: bool,
    pub use_mspg: bool,
    pub use_adapters: bool,
    pub threshold: f64,
    /// Tile width for images wider than this; `None` feeds whole images.
    pub width_crop: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 2e-4,
            lr_min: 1e-7,
            epochs: 20,
            batch_size: 4,
            optimizer: AdamWConfig::default(),
            seed: 0,
            use_fpg: true,
            use_mspg: true,
            use_adapters: true,
            threshold: DEFAULT_THRESHOLD,
            width_crop: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_min <= self.lr0 && self.lr_min >= 0.0) {
            return Err(Error::InvalidArgument(format!("need 0 <= lr_min ({}) <= lr0 ({})", self.lr_min, self.lr0)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument("epochs and batch_size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::InvalidArgument(format!("threshold {} outside [0, 1]", self.threshold)));
        }
        Ok(())
    }

    /// `cfg` with this run's usage flags.
    pub fn apply_flags(&self, cfg: &ModelConfig) -> ModelConfig {
        ModelConfig { use_fpg: self.use_fpg, use_mspg: self.use_mspg, use_adapters: self.use_adapters, ..cfg.clone() }
    }
}

/// `cfg` with prompts and adapters switched off.
pub fn backbone_config(cfg: &ModelConfig) -> ModelConfig {
    ModelConfig { use_fpg: false, use_mspg: false, use_adapters: false, ..cfg.clone() }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedReport {
    pub dataset: String,
    pub report: MetricsReport,
}

/// Everything a run produced that is reproducible from its inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub name: String,
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub epoch_losses: Vec<f64>,
    pub trainable_scalars: usize,
    pub frozen_digest: String,
    pub evaluations: Vec<NamedReport>,
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

impl ExperimentResult {
    pub fn evaluation(&self, dataset: &str) -> Option<&MetricsReport> {
        self.evaluations.iter().find(|r| r.dataset == dataset).map(|r| &r.report)
    }
}

/// Named evaluation set.
pub struct EvalSet<'a> {
    pub name: &'a str,
    pub samples: &'a [Sample],
}

/// Loss and trainable-parameter gradients for one `[1, 1, H, W]` example.
pub fn example_gradients(state: &ModelState, cfg: &ModelConfig, image: &Tensor, mask: &Tensor) -> Result<(f64, Vec<(String, Tensor)>)> {
    let mut g = Graph::new();
    let x = g.input(image.clone(), false);
    let logits = forward_graph(&mut g, x, state, cfg)?;
    let prob = g.activation(logits, Activation::Sigmoid)?;
    let (loss, dprob) = iou_loss_grad(g.value(prob), mask)?;
    let grads = g.backward(prob, dprob)?;
    Ok((loss.loss, grads.into_param_grads()))
}

fn training_pairs(samples: &[Sample], crop: Option<usize>) -> Result<Vec<(Tensor, Tensor)>> {
    let mut out = Vec::new();
    for s in samples {
        match crop {
            Some(c) if s.image.w() != c => {
                let imgs = width_crop(&s.image, c)?;
                let masks = width_crop(&s.mask, c)?;
                out.extend(imgs.into_iter().zip(masks).map(|(i, m)| (i.image, m.image)));
            }
            _ => out.push((s.image.clone(), s.mask.clone())),
        }
    }
    Ok(out)
}

/// Mini-batch AdamW on the mean per-image IoU loss with a cosine schedule.
/// Returns the mean loss of each epoch.
///
/// Per-image gradients may run in parallel; they are summed in example
/// order, so the result does not depend on `exec`.
pub fn train_epochs(
    state: &mut ModelState,
    cfg: &ModelConfig,
    samples: &[Sample],
    tcfg: &TrainConfig,
    exec: Execution,
) -> Result<Vec<f64>> {
    tcfg.validate()?;
    let pairs = training_pairs(samples, tcfg.width_crop)?;
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let mut opt = AdamW::new(tcfg.optimizer);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut losses = Vec::with_capacity(tcfg.epochs);
    for epoch in 0..tcfg.epochs {
        let lr = cosine_lr(epoch, tcfg.epochs, tcfg.lr0, tcfg.lr_min)?;
        let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (b, batch) in order.chunks(tcfg.batch_size).enumerate() {
            let frozen: &ModelState = state;
            let results = exec.try_map_range(batch.len(), |k| {
                let (img, mask) = &pairs[batch[k]];
                example_gradients(frozen, cfg, img, mask)
            })?;
            let scale = 1.0 / batch.len() as f64;
            let mut iter = results.into_iter();
            let (mut batch_loss, mut total) = iter.next().expect("non-empty batch");
            for (loss, grads) in iter {
                batch_loss += loss;
                for ((_, acc), (_, g)) in total.iter_mut().zip(&grads) {
                    acc.add_assign(g)?;
                }
            }
            if !batch_loss.is_finite() {
                return Err(Error::NonFinite(format!("loss at epoch {epoch}, batch {b}")));
            }
            total.iter_mut().for_each(|(_, g)| g.scale(scale));
            opt.step(state, &total, lr)?;
            epoch_loss += batch_loss;
        }
        let mean = epoch_loss / pairs.len() as f64;
        log::info!("epoch {epoch}: lr {lr:.3e}, loss {mean:.6}");
        losses.push(mean);
    }
    Ok(losses)
}

/// Per-pixel defect probabilities. Images wider than `width_crop` are tiled,
/// and overlapping tile logits are merged by maximum before the sigmoid.
pub fn predict_probabilities(state: &ModelState, cfg: &ModelConfig, image: &Tensor, crop: Option<usize>) -> Result<Tensor> {
    let logits = match crop {
        Some(c) if image.w() != c => {
            let tiles =
                width_crop(image, c)?.into_iter().map(|t| Ok((t.span, forward(&t.image, state, cfg)?))).collect::<Result<Vec<_>>>()?;
            stitch_max(&tiles, image.w())?
        }
        _ => forward(image, state, cfg)?,
    };
    Ok(logits.map(crate::tensor_core::sigmoid))
}

pub fn evaluate_state(
    state: &ModelState,
    cfg: &ModelConfig,
    samples: &[Sample],
    threshold: f64,
    crop: Option<usize>,
    exec: Execution,
) -> Result<(MetricsReport, Vec<(f64, f64)>)> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate an empty dataset".into()));
    }
    let probs = exec.try_map_range(samples.len(), |i| predict_probabilities(state, cfg, &samples[i].image, crop))?;
    let gts: Vec<Tensor> = samples.iter().map(|s| s.mask.clone()).collect();
    MetricsReport::with_curve(&probs, &gts, threshold, exec)
}

/// Metrics of a checkpoint on `samples`, with the pooled PR curve.
pub fn evaluate(
    ck: &Checkpoint,
    samples: &[Sample],
    threshold: f64,
    crop: Option<usize>,
    exec: Execution,
) -> Result<(MetricsReport, Vec<(f64, f64)>)> {
    evaluate_state(&ck.state, &ck.config, samples, threshold, crop, exec)
}

pub struct PretrainOutcome {
    pub checkpoint: Checkpoint,
    pub epoch_losses: Vec<f64>,
}

/// Trains the backbone from scratch; prompt generators and adapters stay out
/// of the forward pass. The checkpoint keeps `cfg` as given.
pub fn run_pretrain(cfg: &ModelConfig, samples: &[Sample], tcfg: &TrainConfig, exec: Execution) -> Result<PretrainOutcome> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("pretraining set is empty".into()));
    }
    let mut state = ModelState::init(cfg, tcfg.seed)?;
    state.set_stage(Stage::Pretrain, cfg);
    let epoch_losses = train_epochs(&mut state, &backbone_config(cfg), samples, tcfg, exec)?;
    Ok(PretrainOutcome { checkpoint: Checkpoint::new(cfg.clone(), state)?, epoch_losses })
}

pub struct AdaptOutcome {
    pub result: ExperimentResult,
    pub checkpoint: Checkpoint,
}

/// Freezes the backbone of `pretrained`, re-initializes adapters and prompt
/// generators from `tcfg.seed`, trains the groups enabled by the flags and
/// evaluates on `evals`.
pub fn run_adapt(
    name: &str,
    pretrained: &Checkpoint,
    model: &ModelConfig,
    samples: &[Sample],
    evals: &[EvalSet],
    tcfg: &TrainConfig,
    exec: Execution,
) -> Result<AdaptOutcome> {
    let started = Instant::now();
    tcfg.validate()?;
    let cfg = tcfg.apply_flags(model);
    cfg.validate()?;
    let backbone = backbone_config(&cfg);
    if backbone_config(&pretrained.config)
        .param_specs()?
        .iter()
        .filter(|s| Group::of(&s.id) == Group::Backbone)
        .ne(backbone.param_specs()?.iter().filter(|s| Group::of(&s.id) == Group::Backbone))
    {
        return Err(Error::Checkpoint("model config does not match the checkpoint backbone".into()));
    }
    let mut state = pretrained.state.clone();
    for group in [Group::Adapter, Group::Fpg, Group::Mspg] {
        state.reinit_group(&cfg, group, tcfg.seed)?;
    }
    state.set_stage(Stage::Adapt, &cfg);
    state.check_layout(&cfg)?;
    if state.trainable_parameters().is_empty() {
        return Err(Error::NothingToTrain);
    }
    let digest = state.frozen_digest();
    let before = state.clone();
    let epoch_losses = train_epochs(&mut state, &cfg, samples, tcfg, exec)?;
    for p in state.params().filter(|p| !p.trainable) {
        let reference = if Group::of(&p.id) == Group::Backbone { &pretrained.state } else { &before };
        let original = reference.require(&p.id)?;
        let same = p.value.data().iter().zip(original.value.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            return Err(Error::InvalidArgument(format!("frozen parameter '{}' changed during adaptation", p.id)));
        }
    }
    if digest != state.frozen_digest() {
        return Err(Error::InvalidArgument("frozen parameter digest changed during adaptation".into()));
    }
    let evaluations = evals
        .iter()
        .map(|e| {
            let (report, _) = evaluate_state(&state, &cfg, e.samples, tcfg.threshold, tcfg.width_crop, exec)?;
            Ok(NamedReport { dataset: e.name.to_string(), report })
        })
        .collect::<Result<Vec<_>>>()?;
    let trainable_scalars = state.params().filter(|p| p.trainable).map(|p| p.value.len()).sum();
    let result = ExperimentResult {
        name: name.to_string(),
        seed: tcfg.seed,
        model: cfg.clone(),
        train: tcfg.clone(),
        epoch_losses,
        trainable_scalars,
        frozen_digest: digest,
        evaluations,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    Ok(AdaptOutcome { result, checkpoint: Checkpoint::new(cfg, state)? })
}

/// Per-image split before any cropping: the first `round(fraction * n)`
/// samples train and the rest are held out.
pub fn split_samples(samples: &[Sample], fraction: f64) -> Result<(&[Sample], &[Sample])> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidArgument(format!("split fraction {fraction} outside (0, 1)")));
    }
    let k = (fraction * samples.len() as f64).round() as usize;
    Ok(samples.split_at(k.min(samples.len())))
}
