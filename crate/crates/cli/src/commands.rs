use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::Serialize;
use wrtsam::gradsuite::{run_suite, run_suite_corrupted, GradRow};
use wrtsam::metrics::{binarize, write_pr_curve_csv, MetricsReport};
use wrtsam::model::Checkpoint;
use wrtsam::synth::{dataset_entries, generate_dataset, load_dataset, read_mask, read_png, write_png, Sample, ScenarioSpec};
use wrtsam::tensor_core::OpKind;
use wrtsam::train::{
    evaluate, predict_probabilities, run_ablation_suite, run_adapt, run_pretrain, split_samples, AblationRow, EvalSet, TrainConfig,
};
use wrtsam::{Execution, Tensor};

use crate::config::CliConfig;

/// Marks an error as a usage or configuration problem (exit code 1).
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn require(path: &Path) -> Result<()> {
    if !path.exists() {
        bail!("missing input: {}", path.display());
    }
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn write_curve(path: &Path, curve: &[(f64, f64)]) -> Result<()> {
    let mut buf = Vec::new();
    write_pr_curve_csv(curve, &mut buf)?;
    fs::write(path, buf).with_context(|| format!("cannot write {}", path.display()))
}

fn load_samples(dir: &Path) -> Result<Vec<Sample>> {
    require(dir)?;
    Ok(load_dataset(dir)?)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    require(path)?;
    Ok(Checkpoint::load(path)?)
}

/// Parses `NAME=DIR`.
pub fn parse_named_dir(s: &str) -> Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((n, d)) if !n.is_empty() && !d.is_empty() => Ok((n.to_string(), PathBuf::from(d))),
        _ => Err(format!("expected NAME=DIR, got '{s}'")),
    }
}

pub fn synth(cfg: &CliConfig, preset: Option<&str>, count: usize, seed: Option<u64>, out: &Path, exec: Execution) -> Result<()> {
    let mut spec = match (preset, &cfg.scenario) {
        (Some(p), _) => ScenarioSpec::preset(p).map_err(|e| usage(e.to_string()))?,
        (None, Some(s)) => s.clone(),
        (None, None) => return Err(usage("synth needs --preset or a [scenario] section in --config")),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    spec.validate().map_err(|e| usage(e.to_string()))?;
    let manifest = generate_dataset(&spec, count, out, exec)?;
    let defects: usize = manifest.samples.iter().map(|s| s.defects.len()).sum();
    println!(
        "{}: {} pairs of {}x{} with {} defects (seed {}) in {}",
        spec.name,
        manifest.count,
        spec.height,
        spec.width,
        defects,
        spec.seed,
        out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct PretrainReport<'a> {
    model: &'a wrtsam::model::ModelConfig,
    train: &'a TrainConfig,
    samples: usize,
    epoch_losses: &'a [f64],
}

pub fn pretrain(cfg: &CliConfig, data: &Path, out: &Path, exec: Execution) -> Result<()> {
    let samples = load_samples(data)?;
    let tcfg = cfg.pretrain.as_ref().unwrap_or(&cfg.train);
    let outcome = run_pretrain(&cfg.model, &samples, tcfg, exec)?;
    create_dir(out)?;
    outcome.checkpoint.save(&out.join("checkpoint.wrt"))?;
    write_json(
        &out.join("pretrain.json"),
        &PretrainReport { model: &cfg.model, train: tcfg, samples: samples.len(), epoch_losses: &outcome.epoch_losses },
    )?;
    println!("pretrained on {} samples, final loss {:.6}", samples.len(), outcome.epoch_losses.last().copied().unwrap_or(f64::NAN));
    Ok(())
}

type NamedSet = (String, Vec<Sample>);

/// Training samples and named evaluation sets. Without `--eval` the data is
/// split 8:2 per image and the held-out part is evaluated as `holdout`.
fn adapt_inputs(data: &Path, evals: &[(String, PathBuf)]) -> Result<(Vec<Sample>, Vec<NamedSet>)> {
    let samples = load_samples(data)?;
    if evals.is_empty() {
        let (train, held) = split_samples(&samples, 0.8)?;
        if held.is_empty() || train.is_empty() {
            bail!("{} holds too few samples for an 8:2 split; pass --eval", data.display());
        }
        return Ok((train.to_vec(), vec![("holdout".to_string(), held.to_vec())]));
    }
    let sets = evals.iter().map(|(n, d)| Ok((n.clone(), load_samples(d)?))).collect::<Result<Vec<_>>>()?;
    Ok((samples, sets))
}

pub fn adapt(cfg: &CliConfig, checkpoint: &Path, data: &Path, evals: &[(String, PathBuf)], out: &Path, exec: Execution) -> Result<()> {
    let ck = load_checkpoint(checkpoint)?;
    let (train, sets) = adapt_inputs(data, evals)?;
    let eval_sets: Vec<EvalSet> = sets.iter().map(|(n, s)| EvalSet { name: n, samples: s }).collect();
    let outcome = run_adapt("adapt", &ck, &cfg.model, &train, &eval_sets, &cfg.train, exec)?;
    create_dir(out)?;
    outcome.checkpoint.save(&out.join("checkpoint.wrt"))?;
    write_json(&out.join("result.json"), &outcome.result)?;
    for e in &outcome.result.evaluations {
        let r = &e.report;
        println!(
            "{}: recall {:?} precision {:?} iou {:?} auc {:?}",
            e.dataset,
            r.recall.get(),
            r.precision.get(),
            r.iou.get(),
            r.auc.get()
        );
    }
    Ok(())
}

pub fn eval(
    cfg: &CliConfig,
    checkpoint: Option<&Path>,
    predictions: Option<&Path>,
    data: &Path,
    out: &Path,
    exec: Execution,
) -> Result<()> {
    let threshold = cfg.train.threshold;
    let (report, curve) = match (checkpoint, predictions) {
        (Some(c), None) => {
            let ck = load_checkpoint(c)?;
            evaluate(&ck, &load_samples(data)?, threshold, cfg.train.width_crop, exec)?
        }
        (None, Some(p)) => {
            require(data)?;
            require(p)?;
            let entries = dataset_entries(data)?;
            let mut probs = Vec::with_capacity(entries.len());
            let mut gts = Vec::with_capacity(entries.len());
            for e in &entries {
                let name = Path::new(&e.image).file_name().ok_or_else(|| anyhow!("bad image path {}", e.image))?;
                let pred_path = p.join(name);
                require(&pred_path)?;
                probs.push(read_png(&pred_path)?);
                gts.push(read_mask(&data.join(&e.mask))?);
            }
            MetricsReport::with_curve(&probs, &gts, threshold, exec)?
        }
        _ => return Err(usage("eval needs exactly one of --checkpoint and --predictions")),
    };
    create_dir(out)?;
    write_json(&out.join("report.json"), &report)?;
    write_curve(&out.join("pr_curve.csv"), &curve)?;
    println!(
        "{} images: recall {:?} precision {:?} iou {:?} auc {:?}",
        report.images,
        report.recall.get(),
        report.precision.get(),
        report.iou.get(),
        report.auc.get()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn ablate(
    cfg: &CliConfig,
    checkpoint: &Path,
    data: &Path,
    evals: &[(String, PathBuf)],
    rows: Option<&[String]>,
    seeds: Option<&[u64]>,
    out: &Path,
    exec: Execution,
) -> Result<()> {
    let rows: Vec<AblationRow> = match rows {
        Some(r) => r.iter().map(|s| AblationRow::parse(s)).collect::<wrtsam::Result<_>>().map_err(|e| usage(e.to_string()))?,
        None => cfg.ablation_rows().map_err(|e| usage(e.to_string()))?,
    };
    let seeds = seeds.unwrap_or(&cfg.ablation.seeds);
    let ck = load_checkpoint(checkpoint)?;
    let (train, sets) = adapt_inputs(data, evals)?;
    let eval_sets: Vec<EvalSet> = sets.iter().map(|(n, s)| EvalSet { name: n, samples: s }).collect();
    let table = run_ablation_suite(&ck, &cfg.model, &cfg.train, &rows, seeds, &train, &eval_sets, exec)?;
    create_dir(out)?;
    write_json(&out.join("ablation.json"), &table)?;
    let tsv = table.to_tsv();
    fs::write(out.join("ablation.tsv"), &tsv)?;
    print!("{tsv}");
    Ok(())
}

fn png_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("cannot read {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            png_files(root, &p, out)?;
        } else if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            out.push(p.strip_prefix(root)?.to_path_buf());
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct PredictionEntry {
    image: String,
    mask: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    metrics: Option<MetricsReport>,
}

pub fn predict(
    cfg: &CliConfig,
    checkpoint: &Path,
    input: &Path,
    masks: Option<&Path>,
    probabilities: bool,
    out: &Path,
    exec: Execution,
) -> Result<()> {
    let ck = load_checkpoint(checkpoint)?;
    require(input)?;
    let (root, files, gt_root) = if input.is_dir() {
        let (root, gt) = if input.join("images").is_dir() && input.join("masks").is_dir() {
            (input.join("images"), Some(input.join("masks")))
        } else {
            (input.to_path_buf(), None)
        };
        let mut files = Vec::new();
        png_files(&root, &root, &mut files)?;
        (root, files, masks.map(Path::to_path_buf).or(gt))
    } else {
        let name = PathBuf::from(input.file_name().ok_or_else(|| anyhow!("bad input {}", input.display()))?);
        (input.parent().unwrap_or(Path::new(".")).to_path_buf(), vec![name], masks.map(Path::to_path_buf))
    };
    let threshold = cfg.train.threshold;
    let crop = cfg.train.width_crop;
    let probs = exec.try_map_range(files.len(), |i| -> Result<Tensor> {
        let img = read_png(&root.join(&files[i]))?;
        Ok(predict_probabilities(&ck.state, &ck.config, &img, crop)?)
    })?;
    let mut entries = Vec::with_capacity(files.len());
    for (rel, prob) in files.iter().zip(&probs) {
        let mask_rel = Path::new("masks").join(rel);
        let mask_path = out.join(&mask_rel);
        create_dir(mask_path.parent().expect("joined path has a parent"))?;
        write_png(&mask_path, &binarize(prob, threshold))?;
        if probabilities {
            let p = out.join("probabilities").join(rel);
            create_dir(p.parent().expect("joined path has a parent"))?;
            write_png(&p, prob)?;
        }
        let metrics = match gt_root.as_ref().map(|g| g.join(rel)).filter(|p| p.is_file()) {
            Some(gt) => {
                Some(MetricsReport::from_predictions(std::slice::from_ref(prob), &[read_mask(&gt)?], threshold, Execution::Sequential)?)
            }
            None => None,
        };
        entries.push(PredictionEntry { image: rel.display().to_string(), mask: mask_rel.display().to_string(), metrics });
    }
    write_json(&out.join("predictions.json"), &entries)?;
    println!("wrote {} masks to {}", entries.len(), out.join("masks").display());
    Ok(())
}

fn parse_op(name: &str) -> Result<OpKind> {
    OpKind::ALL.into_iter().find(|k| format!("{k:?}").eq_ignore_ascii_case(name)).ok_or_else(|| usage(format!("unknown op '{name}'")))
}

/// Returns whether every row passed.
pub fn gradcheck(corrupt: Option<&str>, out: Option<&Path>, exec: Execution) -> Result<bool> {
    let rows: Vec<GradRow> = match corrupt {
        Some(op) => run_suite_corrupted(parse_op(op)?, exec)?,
        None => run_suite(exec)?,
    };
    println!("{:<26} {:>12}  result", "op", "rel error");
    for r in &rows {
        println!("{:<26} {:>12.3e}  {}", r.name, r.max_rel_error, if r.passed { "pass" } else { "FAIL" });
    }
    if let Some(dir) = out {
        create_dir(dir)?;
        write_json(&dir.join("gradcheck.json"), &rows)?;
    }
    Ok(rows.iter().all(|r| r.passed))
}
