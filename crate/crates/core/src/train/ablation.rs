use serde::{Deserialize, Serialize};

use super::run::{run_adapt, EvalSet, ExperimentResult, TrainConfig};
use crate::dct::FrequencySelection;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::model::{Checkpoint, ModelConfig};
use crate::synth::Sample;

/// One configuration of the ablation table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationRow {
    AdapterOnly,
    FpgTop1,
    FpgBot1,
    Mspg,
    Full,
}

impl AblationRow {
    pub const ALL: [AblationRow; 5] =
        [AblationRow::AdapterOnly, AblationRow::FpgTop1, AblationRow::FpgBot1, AblationRow::Mspg, AblationRow::Full];

    pub fn name(self) -> &'static str {
        match self {
            AblationRow::AdapterOnly => "adapter-only",
            AblationRow::FpgTop1 => "+fpg-top1",
            AblationRow::FpgBot1 => "+fpg-bot1",
            AblationRow::Mspg => "+mspg",
            AblationRow::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Result<AblationRow> {
        AblationRow::ALL.into_iter().find(|r| r.name() == s || r.name().trim_start_matches('+') == s).ok_or_else(|| {
            let names: Vec<&str> = AblationRow::ALL.iter().map(|r| r.name()).collect();
            Error::InvalidArgument(format!("unknown ablation row '{s}', expected one of {}", names.join(", ")))
        })
    }

    /// Model and train configs of this row, derived from the base ones.
    pub fn configure(self, model: &ModelConfig, train: &TrainConfig) -> (ModelConfig, TrainConfig) {
        let (fpg, mspg, mode) = match self {
            AblationRow::AdapterOnly => (false, false, model.dct_mode),
            AblationRow::FpgTop1 => (true, false, FrequencySelection::Top(1)),
            AblationRow::FpgBot1 => (true, false, FrequencySelection::Bottom(1)),
            AblationRow::Mspg => (false, true, model.dct_mode),
            AblationRow::Full => (true, true, FrequencySelection::Top(1)),
        };
        let model = ModelConfig { dct_mode: mode, ..model.clone() };
        let train = TrainConfig { use_fpg: fpg, use_mspg: mspg, use_adapters: true, ..train.clone() };
        (model, train)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationEntry {
    pub row: AblationRow,
    pub runs: Vec<ExperimentResult>,
}

/// Rows in request order, each with one run per seed in seed order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub entries: Vec<AblationEntry>,
}

impl AblationTable {
    pub fn entry(&self, row: AblationRow) -> Option<&AblationEntry> {
        self.entries.iter().find(|e| e.row == row)
    }

    /// Tab-separated summary: one line per row, seed and evaluation set.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("row\tseed\tdataset\trecall\tprecision\tauc\tiou\n");
        for e in &self.entries {
            for run in &e.runs {
                for ev in &run.evaluations {
                    let r = &ev.report;
                    let f = |x: Option<f64>| x.map_or_else(|| "undefined".to_string(), |v| format!("{v:.6}"));
                    out.push_str(&format!(
                        "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                        e.row.name(),
                        run.seed,
                        ev.dataset,
                        f(r.recall.get()),
                        f(r.precision.get()),
                        f(r.auc.get()),
                        f(r.iou.get())
                    ));
                }
            }
        }
        out
    }
}

/// Adapts `pretrained` once per row and seed. Every run starts from the same
/// frozen backbone; the seed drives adapter and generator initialization and
/// batch order.
#[allow(clippy::too_many_arguments)]
pub fn run_ablation_suite(
    pretrained: &Checkpoint,
    model: &ModelConfig,
    train: &TrainConfig,
    rows: &[AblationRow],
    seeds: &[u64],
    samples: &[Sample],
    evals: &[EvalSet],
    exec: Execution,
) -> Result<AblationTable> {
    if rows.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidArgument("ablation needs at least one row and one seed".into()));
    }
    let mut entries = Vec::with_capacity(rows.len());
    for &row in rows {
        let (m, t) = row.configure(model, train);
        let runs = seeds
            .iter()
            .map(|&seed| {
                let t = TrainConfig { seed, ..t.clone() };
                log::info!("ablation row {} seed {seed}", row.name());
                Ok(run_adapt(row.name(), pretrained, &m, samples, evals, &t, exec)?.result)
            })
            .collect::<Result<Vec<_>>>()?;
        entries.push(AblationEntry { row, runs });
    }
    Ok(AblationTable { seeds: seeds.to_vec(), entries })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_cover_the_five_configurations() {
        let names: Vec<&str> = AblationRow::ALL.iter().map(|r| r.name()).collect();
        assert_eq!(names, ["adapter-only", "+fpg-top1", "+fpg-bot1", "+mspg", "full"]);
        for r in AblationRow::ALL {
            assert_eq!(AblationRow::parse(r.name()).unwrap(), r);
        }
        assert_eq!(AblationRow::parse("mspg").unwrap(), AblationRow::Mspg);
        assert!(AblationRow::parse("nope").is_err());
    }

    #[test]
    fn row_flags() {
        let (m, t) = (ModelConfig::default(), TrainConfig::default());
        let (_, base) = AblationRow::AdapterOnly.configure(&m, &t);
        assert!(base.use_adapters && !base.use_fpg && !base.use_mspg);
        let (bm, bt) = AblationRow::FpgBot1.configure(&m, &t);
        assert_eq!(bm.dct_mode, FrequencySelection::Bottom(1));
        assert!(bt.use_fpg && !bt.use_mspg);
        let (fm, ft) = AblationRow::Full.configure(&m, &t);
        assert_eq!(fm.dct_mode, FrequencySelection::Top(1));
        assert!(ft.use_fpg && ft.use_mspg && ft.use_adapters);
    }
}
