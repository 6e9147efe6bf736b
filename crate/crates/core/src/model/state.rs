use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{Group, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor_core::Parameter;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Adapt,
}

/// Parameter store keyed by stable id.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    params: BTreeMap<String, Parameter>,
    stage: Stage,
}

fn group_rng(seed: u64, group: Group) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(group as u64);
    rng
}

impl ModelState {
    /// Fresh pretrain-stage state. Each group draws from its own stream of
    /// the seeded generator, so re-initializing a group reproduces it.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut state = ModelState { params: BTreeMap::new(), stage: Stage::Pretrain };
        for group in [Group::Backbone, Group::Adapter, Group::Fpg, Group::Mspg] {
            state.reinit_group(cfg, group, seed)?;
        }
        state.set_stage(Stage::Pretrain, cfg);
        Ok(state)
    }

    pub fn from_parts(params: BTreeMap<String, Parameter>, stage: Stage) -> Self {
        ModelState { params, stage }
    }

    /// Replaces every parameter of `group` with its seeded initial value.
    pub fn reinit_group(&mut self, cfg: &ModelConfig, group: Group, seed: u64) -> Result<()> {
        let mut rng = group_rng(seed, group);
        for spec in cfg.param_specs()?.iter().filter(|s| Group::of(&s.id) == group) {
            let mut p = spec.materialize(&mut rng);
            if let Some(old) = self.params.get(&spec.id) {
                p.trainable = old.trainable;
            }
            self.params.insert(spec.id.clone(), p);
        }
        Ok(())
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    /// Sets the stage and the trainable flags it implies.
    pub fn set_stage(&mut self, stage: Stage, cfg: &ModelConfig) {
        self.stage = stage;
        let adapted = cfg.adapted_groups();
        for p in self.params.values_mut() {
            p.trainable = match stage {
                Stage::Pretrain => true,
                Stage::Adapt => adapted.contains(&Group::of(&p.id)),
            };
        }
    }

    pub fn get(&self, id: &str) -> Option<&Parameter> {
        self.params.get(id)
    }

    pub fn get_mut(&mut self, id: &str) -> Option<&mut Parameter> {
        self.params.get_mut(id)
    }

    pub fn require(&self, id: &str) -> Result<&Parameter> {
        self.params.get(id).ok_or_else(|| Error::InvalidArgument(format!("model has no parameter '{id}'")))
    }

    /// Parameters in id order.
    pub fn params(&self) -> impl Iterator<Item = &Parameter> {
        self.params.values()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.values_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count.
    pub fn scalar_count(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// Ids of the parameters an optimizer may update, in id order.
    pub fn trainable_parameters(&self) -> Vec<String> {
        self.params.values().filter(|p| p.trainable).map(|p| p.id.clone()).collect()
    }

    /// SHA-256 over the ids and exact bit patterns of the frozen parameters.
    pub fn frozen_digest(&self) -> String {
        let mut h = Sha256::new();
        for p in self.params.values().filter(|p| !p.trainable) {
            h.update((p.id.len() as u64).to_le_bytes());
            h.update(p.id.as_bytes());
            for v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Checks ids and shapes against the parameter layout of `cfg`.
    pub fn check_layout(&self, cfg: &ModelConfig) -> Result<()> {
        let specs = cfg.param_specs()?;
        if specs.len() != self.params.len() {
            return Err(Error::Checkpoint(format!("config expects {} parameters, state has {}", specs.len(), self.params.len())));
        }
        for s in specs {
            match self.params.get(&s.id) {
                Some(p) if p.value.shape() == s.shape => {}
                Some(p) => {
                    return Err(Error::Checkpoint(format!(
                        "parameter '{}' has shape {:?}, config expects {:?}",
                        s.id,
                        p.value.shape(),
                        s.shape
                    )))
                }
                None => return Err(Error::Checkpoint(format!("missing parameter '{}'", s.id))),
            }
        }
        Ok(())
    }
}

/// The ids that train in `stage` under the usage flags of `cfg`.
pub fn trainable_ids(cfg: &ModelConfig, stage: Stage) -> Result<Vec<String>> {
    let adapted = cfg.adapted_groups();
    let mut ids: Vec<String> =
        cfg.param_specs()?.into_iter().filter(|s| stage == Stage::Pretrain || adapted.contains(&Group::of(&s.id))).map(|s| s.id).collect();
    ids.sort();
    Ok(ids)
}
