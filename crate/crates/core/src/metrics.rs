//! Ranking and calibration metrics for sparse multi-risk targets.
//!
//! Predictions and labels are flat, event-major arrays of
//! `n_risks * n_horizons` cells per event, matching
//! [`crate::labels::SoftLabelMatrix`].
//!
//! Tie conventions: average precision treats a run of equal scores as a
//! single threshold (every member shares the precision at the end of the
//! run), AUROC gives half credit to tied pairs, and precision@K cuts ties
//! at the top-K boundary by original index order.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::labels::binarize_values;

/// Average precision; `None` when there are no positives.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "scores and labels differ in length");
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp, mut ap) = (0usize, 0usize, 0.0);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let mut group_pos = 0;
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                group_pos += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        tp += group_pos;
        if group_pos > 0 {
            ap += group_pos as f64 * tp as f64 / (tp + fp) as f64;
        }
    }
    Some(ap / n_pos as f64)
}

/// Area under the ROC curve from mid-ranks; `None` for single-class input.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "scores and labels differ in length");
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j share their mean
        let mid = (i + 1 + j) as f64 / 2.0;
        rank_sum += mid * order[i..j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

/// Fraction of positives among the `k` highest scores.
pub fn precision_at_k(scores: &[f64], labels: &[bool], k: usize) -> Result<f64> {
    ensure!(scores.len() == labels.len(), Shape, "scores and labels differ in length");
    ensure!(k >= 1 && k <= scores.len(), InvalidArgument, "K = {k} outside [1, {}]", scores.len());
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    Ok(order[..k].iter().filter(|&&i| labels[i]).count() as f64 / k as f64)
}

pub fn brier_score(pred: &[f64], labels: &[bool]) -> f64 {
    assert_eq!(pred.len(), labels.len(), "predictions and labels differ in length");
    if pred.is_empty() {
        return 0.0;
    }
    pred.iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let d = p - if y { 1.0 } else { 0.0 };
            d * d
        })
        .sum::<f64>()
        / pred.len() as f64
}

/// Mean per-event AP over events with at least one positive cell.
pub fn sample_auprc(pred: &[f64], labels: &[bool], cells_per_event: usize) -> Option<f64> {
    let aps: Vec<f64> = pred
        .chunks(cells_per_event)
        .zip(labels.chunks(cells_per_event))
        .filter_map(|(p, l)| average_precision(p, l))
        .collect();
    (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64)
}

/// Precision@K over the risk axis of every `(event, horizon)` slice,
/// averaged over slices with at least one positive.
pub fn mean_precision_at_k(
    pred: &[f64],
    labels: &[bool],
    n_risks: usize,
    n_horizons: usize,
    k: usize,
) -> Result<Option<f64>> {
    ensure!(k <= n_risks, InvalidArgument, "K = {k} exceeds {n_risks} risks");
    let cells = n_risks * n_horizons;
    let mut total = 0.0;
    let mut count = 0usize;
    let mut s = vec![0.0; n_risks];
    let mut l = vec![false; n_risks];
    for (p, y) in pred.chunks(cells).zip(labels.chunks(cells)) {
        for h in 0..n_horizons {
            for r in 0..n_risks {
                s[r] = p[r * n_horizons + h];
                l[r] = y[r * n_horizons + h];
            }
            if l.iter().any(|&v| v) {
                total += precision_at_k(&s, &l, k)?;
                count += 1;
            }
        }
    }
    Ok((count > 0).then(|| total / count as f64))
}

/// Metric values for one evaluation; undefined values are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub sample_auprc: Option<f64>,
    pub micro_auprc: Option<f64>,
    pub auroc: Option<f64>,
    pub p_at_1: Option<f64>,
    pub p_at_5: Option<f64>,
    pub brier: f64,
    /// Fraction of positive cells.
    pub prevalence: f64,
    pub n_events: usize,
    pub n_positive_events: usize,
}

impl MetricSet {
    /// Named values in a fixed order, for report aggregation.
    pub fn named(&self) -> Vec<(&'static str, Option<f64>)> {
        vec![
            ("sample_auprc", self.sample_auprc),
            ("micro_auprc", self.micro_auprc),
            ("auroc", self.auroc),
            ("p_at_1", self.p_at_1),
            ("p_at_5", self.p_at_5),
            ("brier", Some(self.brier)),
            ("prevalence", Some(self.prevalence)),
        ]
    }
}

/// Scores flat predictions against soft targets binarised at `beta`.
pub fn evaluate(pred: &[f64], soft_targets: &[f64], n_risks: usize, n_horizons: usize, beta: f64) -> Result<MetricSet> {
    ensure!(pred.len() == soft_targets.len(), Shape, "{} predictions for {} targets", pred.len(), soft_targets.len());
    let cells = n_risks * n_horizons;
    ensure!(cells > 0 && pred.len().is_multiple_of(cells), Shape, "predictions are not whole events");
    let labels = binarize_values(soft_targets, beta)?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    let p_at = |k: usize| -> Result<Option<f64>> {
        if k <= n_risks {
            mean_precision_at_k(pred, &labels, n_risks, n_horizons, k)
        } else {
            Ok(None)
        }
    };
    Ok(MetricSet {
        sample_auprc: sample_auprc(pred, &labels, cells),
        micro_auprc: average_precision(pred, &labels),
        auroc: auroc(pred, &labels),
        p_at_1: p_at(1)?,
        p_at_5: p_at(5)?,
        brier: brier_score(pred, &labels),
        prevalence: if labels.is_empty() { 0.0 } else { n_pos as f64 / labels.len() as f64 },
        n_events: pred.len() / cells,
        n_positive_events: labels.chunks(cells).filter(|c| c.iter().any(|&l| l)).count(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub per_fold: Vec<Option<f64>>,
}

/// `metric name -> {mean, std, per_fold}` across folds. Mean and
/// (population) standard deviation use the defined fold values only.
pub fn summarize(folds: &[MetricSet]) -> BTreeMap<String, MetricSummary> {
    let mut out = BTreeMap::new();
    let Some(first) = folds.first() else {
        return out;
    };
    for (i, (name, _)) in first.named().into_iter().enumerate() {
        let per_fold: Vec<Option<f64>> = folds.iter().map(|m| m.named()[i].1).collect();
        let vals: Vec<f64> = per_fold.iter().flatten().copied().collect();
        let (mean, std) = if vals.is_empty() {
            (None, None)
        } else {
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
            (Some(m), Some(v.sqrt()))
        };
        out.insert(name.to_string(), MetricSummary { mean, std, per_fold });
    }
    out
}

/// One row of a binarisation-threshold sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaRow {
    pub beta: f64,
    pub metrics: MetricSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaSweep {
    pub rows: Vec<BetaRow>,
    /// Positive-cell prevalence never increases as the threshold rises.
    pub prevalence_monotone: bool,
    /// Largest minus smallest sample AUPRC over the sweep.
    pub sample_auprc_range: Option<f64>,
}

/// Inclusive grid `start, start + step, ...` up to `end`, rounded to
/// avoid accumulated drift.
pub fn beta_grid(start: f64, end: f64, step: f64) -> Result<Vec<f64>> {
    ensure!(step > 0.0, InvalidArgument, "sweep step must be positive");
    ensure!(start <= end, InvalidArgument, "sweep start {start} exceeds end {end}");
    let n = ((end - start) / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|i| ((start + i as f64 * step) * 1e9).round() / 1e9).collect())
}

pub fn beta_sweep(
    pred: &[f64],
    soft_targets: &[f64],
    n_risks: usize,
    n_horizons: usize,
    betas: &[f64],
) -> Result<BetaSweep> {
    let rows = betas
        .iter()
        .map(|&beta| Ok(BetaRow { beta, metrics: evaluate(pred, soft_targets, n_risks, n_horizons, beta)? }))
        .collect::<Result<Vec<_>>>()?;
    let prevalence_monotone =
        rows.windows(2).all(|w| w[0].beta > w[1].beta || w[1].metrics.prevalence <= w[0].metrics.prevalence);
    let aps: Vec<f64> = rows.iter().filter_map(|r| r.metrics.sample_auprc).collect();
    let sample_auprc_range = (!aps.is_empty()).then(|| {
        aps.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - aps.iter().cloned().fold(f64::INFINITY, f64::min)
    });
    Ok(BetaSweep { rows, prevalence_monotone, sample_auprc_range })
}
