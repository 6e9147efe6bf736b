use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use wrtsam::dct::FrequencySelection;
use wrtsam::model::ModelConfig;
use wrtsam::synth::ScenarioSpec;
use wrtsam::train::{AblationRow, TrainConfig};

/// Contents of a `--config` file. Every section is optional.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Pretraining settings; without this section `train` is used.
    pub pretrain: Option<TrainConfig>,
    pub scenario: Option<ScenarioSpec>,
    pub ablation: AblationSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSection {
    pub rows: Vec<String>,
    pub seeds: Vec<u64>,
}

impl Default for AblationSection {
    fn default() -> Self {
        AblationSection { rows: AblationRow::ALL.iter().map(|r| r.name().to_string()).collect(), seeds: vec![0, 1, 2] }
    }
}

impl CliConfig {
    pub fn load(path: Option<&Path>) -> Result<CliConfig> {
        let Some(path) = path else { return Ok(CliConfig::default()) };
        let text = fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))
    }

    pub fn ablation_rows(&self) -> Result<Vec<AblationRow>> {
        Ok(self.ablation.rows.iter().map(|r| AblationRow::parse(r)).collect::<wrtsam::Result<_>>()?)
    }
}

/// Usage flags shared by the training and evaluation subcommands.
#[derive(Clone, Debug, Default, clap::Args)]
pub struct Overrides {
    /// Seed for initialization, shuffling and generation.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Binarization threshold for reported metrics and masks.
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long, value_parser = on_off)]
    pub fpg: Option<bool>,
    #[arg(long, value_parser = on_off)]
    pub mspg: Option<bool>,
    #[arg(long, value_parser = on_off)]
    pub adapters: Option<bool>,
    /// top1, bot1, topK:<k> or botK:<k>.
    #[arg(long, value_parser = dct_mode)]
    pub dct_mode: Option<FrequencySelection>,
    /// Tile images wider than this many pixels.
    #[arg(long)]
    pub width_crop: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

fn on_off(s: &str) -> Result<bool, String> {
    match s {
        "on" => Ok(true),
        "off" => Ok(false),
        _ => Err(format!("expected 'on' or 'off', got '{s}'")),
    }
}

fn dct_mode(s: &str) -> Result<FrequencySelection, String> {
    s.parse().map_err(|e: wrtsam::Error| e.to_string())
}

impl Overrides {
    pub fn apply(&self, cfg: &mut CliConfig) -> Result<()> {
        for t in std::iter::once(&mut cfg.train).chain(cfg.pretrain.as_mut()) {
            if let Some(s) = self.seed {
                t.seed = s;
            }
            if let Some(th) = self.threshold {
                t.threshold = th;
            }
            if let Some(w) = self.width_crop {
                t.width_crop = Some(w);
            }
            if let Some(e) = self.epochs {
                t.epochs = e;
            }
        }
        let t = &mut cfg.train;
        t.use_fpg = self.fpg.unwrap_or(t.use_fpg);
        t.use_mspg = self.mspg.unwrap_or(t.use_mspg);
        t.use_adapters = self.adapters.unwrap_or(t.use_adapters);
        if let Some(m) = self.dct_mode {
            cfg.model.dct_mode = m;
        }
        if let Some(s) = self.seed {
            if let Some(sc) = cfg.scenario.as_mut() {
                sc.seed = s;
            }
        }
        cfg.train.validate()?;
        if let Some(p) = &cfg.pretrain {
            p.validate()?;
        }
        cfg.model.validate()?;
        if self.width_crop == Some(0) {
            bail!("--width-crop must be at least 1");
        }
        Ok(())
    }
}
