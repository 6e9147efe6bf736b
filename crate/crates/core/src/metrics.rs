//! Soft IoU loss and binary-segmentation metrics.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::tensor_core::Tensor;

pub const IOU_EPS: f64 = 1e-7;
pub const DEFAULT_THRESHOLD: f64 = 0.5;

const PROB_SLACK: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub loss: f64,
    pub intersec: f64,
    pub union: f64,
}

fn check_pair(op: &'static str, pred: &Tensor, gt: &Tensor) -> Result<()> {
    if pred.shape() != gt.shape() {
        return Err(Error::ShapeMismatch { op, expected: gt.shape().to_vec(), got: pred.shape().to_vec() });
    }
    if let Some(v) = gt.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::InvalidArgument(format!("{op}: ground truth must be binary, found {v}")));
    }
    Ok(())
}

fn check_probabilities(op: &'static str, pred: &Tensor) -> Result<()> {
    if let Some(v) = pred.data().iter().find(|&&v| !(-PROB_SLACK..=1.0 + PROB_SLACK).contains(&v)) {
        return Err(Error::InvalidArgument(format!("{op}: prediction {v} outside [0, 1]")));
    }
    Ok(())
}

/// `1 - I / (U + eps)` with `I = sum(p g)` and `U = sum(p) + sum(g) - I`.
pub fn iou_loss(pred: &Tensor, gt: &Tensor) -> Result<LossValue> {
    check_pair("iou_loss", pred, gt)?;
    check_probabilities("iou_loss", pred)?;
    let (mut inter, mut sp, mut sg) = (0.0, 0.0, 0.0);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        inter += p * g;
        sp += p;
        sg += g;
    }
    let union = sp + sg - inter;
    Ok(LossValue { loss: 1.0 - inter / (union + IOU_EPS), intersec: inter, union })
}

/// Loss together with its gradient with respect to `pred`.
pub fn iou_loss_grad(pred: &Tensor, gt: &Tensor) -> Result<(LossValue, Tensor)> {
    let value = iou_loss(pred, gt)?;
    let (i, d) = (value.intersec, value.union + IOU_EPS);
    let grad = gt.map(|g| -(g * d - i * (1.0 - g)) / (d * d));
    Ok((value, grad))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn merge(self, other: ConfusionCounts) -> ConfusionCounts {
        ConfusionCounts { tp: self.tp + other.tp, tn: self.tn + other.tn, fp: self.fp + other.fp, fn_: self.fn_ + other.fn_ }
    }
}

pub fn confusion(pred_mask: &Tensor, gt_mask: &Tensor) -> Result<ConfusionCounts> {
    check_pair("confusion", pred_mask, gt_mask)?;
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred_mask.data().iter().zip(gt_mask.data()) {
        match (p != 0.0, g != 0.0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// A fraction that reads 0 with `defined == false` when its denominator is 0.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ratio {
    pub value: f64,
    pub defined: bool,
}

impl Ratio {
    pub fn of(num: u64, den: u64) -> Ratio {
        if den == 0 {
            Ratio::undefined()
        } else {
            Ratio { value: num as f64 / den as f64, defined: true }
        }
    }

    pub fn undefined() -> Ratio {
        Ratio { value: 0.0, defined: false }
    }

    pub fn get(self) -> Option<f64> {
        self.defined.then_some(self.value)
    }
}

pub fn precision_recall(c: &ConfusionCounts) -> (Ratio, Ratio) {
    (Ratio::of(c.tp, c.tp + c.fp), Ratio::of(c.tp, c.tp + c.fn_))
}

pub fn mask_iou(c: &ConfusionCounts) -> Ratio {
    Ratio::of(c.tp, c.tp + c.fp + c.fn_)
}

/// Pixels with `prob >= threshold` become 1.
pub fn binarize(prob: &Tensor, threshold: f64) -> Tensor {
    prob.map(|p| if p >= threshold { 1.0 } else { 0.0 })
}

/// `(recall, precision)` points, one per distinct score in descending order,
/// preceded by `(0, first precision)`.
pub fn pr_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<(f64, f64)>> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch { op: "pr_curve", expected: vec![labels.len()], got: vec![scores.len()] });
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("pr_curve score {s}")));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return Err(Error::InvalidArgument("pr_auc needs at least one positive label".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = Vec::new();
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            tp += labels[order[i]] as usize;
            seen += 1;
            i += 1;
        }
        points.push((tp as f64 / positives as f64, tp as f64 / seen as f64));
    }
    points.insert(0, (0.0, points[0].1));
    Ok(points)
}

pub fn curve_area(points: &[(f64, f64)]) -> f64 {
    points.windows(2).map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0).sum()
}

pub fn pr_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    Ok(curve_area(&pr_curve(scores, labels)?))
}

pub fn write_pr_curve_csv<W: Write>(points: &[(f64, f64)], mut out: W) -> std::io::Result<()> {
    writeln!(out, "recall,precision")?;
    for (r, p) in points {
        writeln!(out, "{r},{p}")?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MacroAverages {
    pub precision: Ratio,
    pub recall: Ratio,
    pub iou: Ratio,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub threshold: f64,
    pub images: usize,
    pub counts: ConfusionCounts,
    pub precision: Ratio,
    pub recall: Ratio,
    pub iou: Ratio,
    /// Pooled-pixel PR-AUC; undefined when no pixel is positive.
    pub auc: Ratio,
    #[serde(rename = "macro")]
    pub macro_avg: MacroAverages,
}

fn mean_defined(values: impl Iterator<Item = Ratio>) -> Ratio {
    let (sum, n) = values.filter_map(Ratio::get).fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        Ratio::undefined()
    } else {
        Ratio { value: sum / n as f64, defined: true }
    }
}

impl MetricsReport {
    /// Micro metrics pool confusion counts and scores over every pixel; macro
    /// metrics average the per-image values that are defined.
    pub fn from_predictions(probs: &[Tensor], gts: &[Tensor], threshold: f64, exec: Execution) -> Result<MetricsReport> {
        Ok(Self::with_curve(probs, gts, threshold, exec)?.0)
    }

    /// Also returns the pooled PR curve (empty when AUC is undefined).
    pub fn with_curve(probs: &[Tensor], gts: &[Tensor], threshold: f64, exec: Execution) -> Result<(MetricsReport, Vec<(f64, f64)>)> {
        if probs.is_empty() {
            return Err(Error::InvalidArgument("cannot evaluate an empty dataset".into()));
        }
        if probs.len() != gts.len() {
            return Err(Error::InvalidArgument(format!("{} predictions for {} masks", probs.len(), gts.len())));
        }
        let per_image = exec.try_map_range(probs.len(), |i| {
            check_probabilities("evaluate", &probs[i])?;
            confusion(&binarize(&probs[i], threshold), &gts[i])
        })?;
        let counts = per_image.iter().fold(ConfusionCounts::default(), |a, &b| a.merge(b));
        let (precision, recall) = precision_recall(&counts);
        let scores: Vec<f64> = probs.iter().flat_map(|p| p.data().iter().copied()).collect();
        let labels: Vec<bool> = gts.iter().flat_map(|g| g.data().iter().map(|&v| v != 0.0)).collect();
        let (auc, curve) = if labels.iter().any(|&l| l) {
            let curve = pr_curve(&scores, &labels)?;
            (Ratio { value: curve_area(&curve), defined: true }, curve)
        } else {
            (Ratio::undefined(), Vec::new())
        };
        let macro_avg = MacroAverages {
            precision: mean_defined(per_image.iter().map(|c| precision_recall(c).0)),
            recall: mean_defined(per_image.iter().map(|c| precision_recall(c).1)),
            iou: mean_defined(per_image.iter().map(mask_iou)),
        };
        let report = MetricsReport { threshold, images: probs.len(), counts, precision, recall, iou: mask_iou(&counts), auc, macro_avg };
        Ok((report, curve))
    }
}
