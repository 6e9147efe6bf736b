//! Optimization, width cropping, the pretrain and adapt loops, evaluation and
//! the ablation harness.

mod ablation;
mod crop;
mod optim;
mod run;

pub use ablation::{run_ablation_suite, AblationEntry, AblationRow, AblationTable};
pub use crop::{stitch_max, tile_spans, width_crop, Tile, TileSpan, DEFAULT_CROP_WIDTH};
pub use optim::{adamw_update, cosine_lr, AdamW, AdamWConfig};
pub use run::{
    backbone_config, evaluate, evaluate_state, example_gradients, predict_probabilities, run_adapt, run_pretrain, split_samples,
    train_epochs, AdaptOutcome, EvalSet, ExperimentResult, NamedReport, PretrainOutcome, TrainConfig,
};
