//! Losses, patient-level fold splitting, and the optimisation loop.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::events::Trajectory;
use crate::labels::{build_label_matrix, RiskInterval};
use crate::metrics::{evaluate, MetricSet};
use crate::model::{embedding_tensor, Group, MataFormer, Params};
use crate::numerics::{bce_term, focal_term, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    Mse,
    /// Soft-target focal loss.
    Focal,
    /// Cross-entropy on targets binarised at the training threshold.
    Bce,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub predictor_lr_multiplier: f64,
    pub weight_decay: f64,
    pub warmup_ratio: f64,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub seed: u64,
    pub loss_mode: LossMode,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub batch_size: usize,
    /// Fraction of training patients held out for early stopping.
    pub validation_fraction: f64,
    /// Binarisation threshold for validation metrics and BCE targets.
    pub beta: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 1e-3,
            predictor_lr_multiplier: 10.0,
            weight_decay: 0.01,
            warmup_ratio: 0.05,
            max_epochs: 20,
            early_stop_patience: 4,
            seed: 0,
            loss_mode: LossMode::Mse,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            batch_size: 4,
            validation_fraction: 0.15,
            beta: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.base_lr > 0.0, Config, "base_lr must be positive");
        ensure!(self.predictor_lr_multiplier > 0.0, Config, "predictor_lr_multiplier must be positive");
        ensure!((0.0..0.5).contains(&self.warmup_ratio), Config, "warmup_ratio must lie in [0, 0.5)");
        ensure!(self.weight_decay >= 0.0, Config, "weight_decay must be nonnegative");
        ensure!(self.batch_size >= 1, Config, "batch_size must be at least 1");
        ensure!(self.max_epochs >= 1, Config, "max_epochs must be at least 1");
        ensure!((0.0..1.0).contains(&self.validation_fraction), Config, "validation_fraction must lie in [0, 1)");
        ensure!(self.beta > 0.0 && self.beta < 1.0, Config, "beta must lie in (0, 1)");
        ensure!(
            (0.0..=1.0).contains(&self.focal_alpha) && self.focal_gamma >= 0.0,
            Config,
            "focal parameters out of range"
        );
        Ok(())
    }
}

fn masked_mean(pred: &Tensor, target: &Tensor, lengths: &[usize], f: impl Fn(f64, f64) -> f64) -> Result<f64> {
    ensure!(pred.shape() == target.shape(), Shape, "prediction {:?} vs target {:?}", pred.shape(), target.shape());
    ensure!(pred.shape().len() >= 2, Shape, "expected [B, S, ...] predictions");
    let (b, s) = (pred.shape()[0], pred.shape()[1]);
    ensure!(lengths.len() == b, Shape, "{} lengths for batch of {b}", lengths.len());
    ensure!(lengths.iter().all(|&l| l <= s), Shape, "length exceeds padded size {s}");
    let cells: usize = pred.shape()[2..].iter().product();
    let total: usize = lengths.iter().sum();
    ensure!(total > 0, InvalidArgument, "zero total sequence length");
    let mut acc = 0.0;
    for (n, &len) in lengths.iter().enumerate() {
        let lo = n * s * cells;
        let hi = lo + len * cells;
        acc += pred.data()[lo..hi].iter().zip(&target.data()[lo..hi]).map(|(&p, &y)| f(p, y)).sum::<f64>();
    }
    Ok(acc / (total * cells) as f64)
}

/// Sum of squared errors over valid positions divided by `cells * Σ L`.
pub fn mse_loss(pred: &Tensor, target: &Tensor, lengths: &[usize]) -> Result<f64> {
    masked_mean(pred, target, lengths, |p, y| (p - y) * (p - y))
}

/// Mean soft-target focal loss over valid cells.
pub fn focal_loss_soft(
    pred: &Tensor,
    target: &Tensor,
    lengths: &[usize],
    gamma: f64,
    alpha_balance: f64,
) -> Result<f64> {
    masked_mean(pred, target, lengths, |p, y| focal_term(p, y, gamma, alpha_balance))
}

/// Mean binary cross-entropy over valid cells.
pub fn bce_loss(pred: &Tensor, target: &Tensor, lengths: &[usize]) -> Result<f64> {
    masked_mean(pred, target, lengths, bce_term)
}

/// Assigns each patient (by event count) to a fold: longest first, each to
/// the currently lightest fold, lowest index on ties. The seed only orders
/// patients of equal length.
pub fn balanced_patient_split(lengths: &[usize], folds: usize, seed: u64) -> Result<Vec<usize>> {
    ensure!(folds >= 2, InvalidArgument, "need at least 2 folds, got {folds}");
    ensure!(lengths.len() >= folds, InvalidArgument, "{} patients cannot fill {folds} folds", lengths.len());
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order.sort_by(|&a, &b| lengths[b].cmp(&lengths[a]));
    let mut load = vec![0usize; folds];
    let mut assign = vec![0usize; lengths.len()];
    for p in order {
        let f = (0..folds).min_by_key(|&f| (load[f], f)).unwrap_or(0);
        assign[p] = f;
        load[f] += lengths[p];
    }
    Ok(assign)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldEntry {
    pub patient_id: String,
    pub fold: usize,
    pub events: usize,
}

/// Patient-to-fold assignment written by the `split` command.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldManifest {
    pub folds: usize,
    pub seed: u64,
    pub fold_events: Vec<usize>,
    pub patients: Vec<FoldEntry>,
}

impl FoldManifest {
    pub fn build(trajectories: &[Trajectory], folds: usize, seed: u64) -> Result<Self> {
        let lengths: Vec<usize> = trajectories.iter().map(Trajectory::len).collect();
        let assign = balanced_patient_split(&lengths, folds, seed)?;
        let mut fold_events = vec![0; folds];
        let patients = trajectories
            .iter()
            .zip(&assign)
            .map(|(t, &f)| {
                fold_events[f] += t.len();
                FoldEntry { patient_id: t.patient_id.clone(), fold: f, events: t.len() }
            })
            .collect();
        Ok(Self { folds, seed, fold_events, patients })
    }

    pub fn fold_of(&self, patient_id: &str) -> Option<usize> {
        self.patients.iter().find(|p| p.patient_id == patient_id).map(|p| p.fold)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// One patient ready for the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub patient_id: String,
    /// `[S, input_dim]`
    pub embeddings: Tensor,
    pub times: Vec<i64>,
    /// `[S, n_risks * horizons]` soft targets.
    pub targets: Tensor,
}

impl Sample {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// Pairs embedded trajectories with their soft targets.
pub fn build_samples(
    trajectories: &[Trajectory],
    intervals: &[RiskInterval],
    n_risks: usize,
    horizons: &[f64],
) -> Result<Vec<Sample>> {
    trajectories
        .iter()
        .map(|traj| {
            let emb = traj
                .embeddings
                .as_ref()
                .ok_or_else(|| Error::Data(format!("patient {} has no embeddings", traj.patient_id)))?;
            let y = build_label_matrix(traj, intervals, n_risks, horizons)?;
            let cells = y.cells_per_event();
            Ok(Sample {
                patient_id: traj.patient_id.clone(),
                embeddings: embedding_tensor(emb)?,
                times: traj.times(),
                targets: Tensor::new(vec![traj.len(), cells], y.values)?,
            })
        })
        .collect()
}

/// Linear warmup from 0 to `base_lr`, then cosine decay to 0 at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub total_steps: usize,
    pub warmup_steps: usize,
}

impl Schedule {
    pub fn new(base_lr: f64, total_steps: usize, warmup_ratio: f64) -> Self {
        Self { base_lr, total_steps, warmup_steps: (warmup_ratio * total_steps as f64).ceil() as usize }
    }

    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * step as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        self.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Adam with decoupled weight decay on matrix-shaped weights.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    steps: i32,
}

impl AdamW {
    pub fn new(params: &Params<Tensor>, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.fields().iter().map(|(_, t, _)| vec![0.0; t.len()]).collect();
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, m: zeros.clone(), v: zeros, steps: 0 }
    }

    /// Applies one update; `grads` follows [`Params::fields`] order.
    pub fn step(&mut self, params: &mut Params<Tensor>, grads: &[Vec<f64>], lr_backbone: f64, lr_predictor: f64) {
        self.steps += 1;
        let c1 = 1.0 - self.beta1.powi(self.steps);
        let c2 = 1.0 - self.beta2.powi(self.steps);
        for (k, (_, t, group)) in params.fields_mut().into_iter().enumerate() {
            let lr = match group {
                Group::Backbone => lr_backbone,
                Group::Predictor => lr_predictor,
            };
            let decay = if t.shape().len() == 2 { self.weight_decay } else { 0.0 };
            let (m, v, g) = (&mut self.m[k], &mut self.v[k], &grads[k]);
            for (i, w) in t.data_mut().iter_mut().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                *w -= lr * decay * *w;
                *w -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Loss and summed parameter gradients of one batch, normalised by the
/// batch's total cell count.
pub fn batch_gradients(model: &MataFormer, batch: &[&Sample], cfg: &TrainConfig) -> Result<(f64, Vec<Vec<f64>>)> {
    let cells = model.config.output_width();
    let total: usize = batch.iter().map(|s| s.len()).sum();
    ensure!(total > 0, InvalidArgument, "empty batch");
    let scale = 1.0 / (total * cells) as f64;
    let per_sample: Vec<Result<(f64, Vec<Vec<f64>>)>> = batch
        .par_iter()
        .map(|s| {
            let mut tape = Tape::new();
            let vars = model.register(&mut tape);
            let pred = model.forward_tape(&mut tape, &vars, &s.embeddings, &s.times, None)?;
            let target = match cfg.loss_mode {
                LossMode::Bce => s.targets.map(|y| if y > cfg.beta { 1.0 } else { 0.0 }),
                _ => s.targets.clone(),
            };
            let target = std::rc::Rc::new(target);
            let loss = match cfg.loss_mode {
                LossMode::Mse => tape.squared_error(pred, target, scale)?,
                LossMode::Focal => tape.focal_soft(pred, target, cfg.focal_gamma, cfg.focal_alpha, scale)?,
                LossMode::Bce => tape.bce(pred, target, scale)?,
            };
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite loss {value} on patient {} ({} events)",
                    s.patient_id,
                    s.len()
                )));
            }
            let mut g = tape.backward(loss).map_err(|e| Error::Numerical(format!("patient {}: {e}", s.patient_id)))?;
            let grads = vars
                .fields()
                .into_iter()
                .map(|(_, &v, _)| g.take(v).unwrap_or_else(|| vec![0.0; tape.value(v).len()]))
                .collect();
            Ok((value, grads))
        })
        .collect();

    let mut loss = 0.0;
    let mut acc: Option<Vec<Vec<f64>>> = None;
    for r in per_sample {
        let (l, g) = r?;
        loss += l;
        match &mut acc {
            None => acc = Some(g),
            Some(a) => {
                for (x, y) in a.iter_mut().zip(g) {
                    x.iter_mut().zip(y).for_each(|(p, q)| *p += q);
                }
            }
        }
    }
    Ok((loss, acc.unwrap_or_default()))
}

/// Predictions for every sample, in order.
pub fn predict_all(model: &MataFormer, samples: &[Sample]) -> Result<Vec<Tensor>> {
    samples.par_iter().map(|s| model.predict(&s.embeddings, &s.times)).collect()
}

/// Metrics of `model` on `samples`, all events pooled.
pub fn evaluate_samples(model: &MataFormer, samples: &[Sample], beta: f64) -> Result<MetricSet> {
    let preds = predict_all(model, samples)?;
    let pred: Vec<f64> = preds.iter().flat_map(|p| p.data().iter().copied()).collect();
    let target: Vec<f64> = samples.iter().flat_map(|s| s.targets.data().iter().copied()).collect();
    evaluate(&pred, &target, model.config.n_risks, model.config.horizons.len(), beta)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean batch loss over the epoch.
    pub loss: f64,
    pub lr_backbone: f64,
    pub lr_predictor: f64,
    pub validation: Option<MetricSet>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Weights from the epoch with the best validation sample AUPRC (the
    /// final weights when there is no validation set).
    pub model: MataFormer,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

/// Deterministic split of sample indices into (train, validation).
pub fn validation_split(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed));
    let n_val = ((n as f64) * fraction).round() as usize;
    let n_val = n_val.min(n.saturating_sub(1));
    let mut val = idx[..n_val].to_vec();
    let mut train = idx[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

/// Trains `model` with early stopping on validation sample AUPRC.
pub fn train(
    mut model: MataFormer,
    train_set: &[Sample],
    valid_set: &[Sample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    ensure!(!train_set.is_empty(), InvalidArgument, "empty training set");
    let steps_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let schedule = Schedule::new(cfg.base_lr, steps_per_epoch * cfg.max_epochs, cfg.warmup_ratio);
    let mut opt = AdamW::new(&model.params, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    let mut history = Vec::new();
    let mut best: Option<(f64, usize, MataFormer)> = None;
    let mut step = 0;
    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let (mut lr_b, mut lr_p) = (0.0, 0.0);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (loss, grads) = batch_gradients(&model, &batch, cfg).map_err(|e| match e {
                Error::Numerical(msg) => Error::Numerical(format!(
                    "{msg}; epoch {epoch}, step {step}, batch {:?}",
                    batch.iter().map(|s| (&s.patient_id, s.len())).collect::<Vec<_>>()
                )),
                other => other,
            })?;
            lr_b = schedule.lr(step);
            lr_p = lr_b * cfg.predictor_lr_multiplier;
            opt.step(&mut model.params, &grads, lr_b, lr_p);
            loss_sum += loss;
            step += 1;
        }
        let validation = if valid_set.is_empty() { None } else { Some(evaluate_samples(&model, valid_set, cfg.beta)?) };
        let record = EpochRecord {
            epoch,
            loss: loss_sum / steps_per_epoch as f64,
            lr_backbone: lr_b,
            lr_predictor: lr_p,
            validation: validation.clone(),
        };
        on_epoch(&record);
        history.push(record);

        let score = validation.as_ref().and_then(|m| m.sample_auprc).unwrap_or(f64::NEG_INFINITY);
        let improved = best.as_ref().is_none_or(|(b, _, _)| score > *b);
        if improved || valid_set.is_empty() {
            best = Some((score, epoch, model.clone()));
        } else if let Some((_, best_epoch, _)) = &best {
            if epoch - best_epoch >= cfg.early_stop_patience {
                log::info!("early stop at epoch {epoch}; best epoch {best_epoch}");
                break;
            }
        }
    }
    let (_, best_epoch, model) = best.expect("at least one epoch runs");
    Ok(TrainOutcome { model, history, best_epoch })
}

/// Train/validation/test partition of samples for one cross-validation fold.
pub fn fold_partition(
    samples: &[Sample],
    manifest: &FoldManifest,
    fold: usize,
    validation_fraction: f64,
    seed: u64,
) -> Result<(Vec<Sample>, Vec<Sample>, Vec<Sample>)> {
    ensure!(fold < manifest.folds, InvalidArgument, "fold {fold} of {}", manifest.folds);
    let mut rest = Vec::new();
    let mut test = Vec::new();
    for s in samples {
        let f = manifest
            .fold_of(&s.patient_id)
            .ok_or_else(|| Error::Data(format!("patient {} missing from fold manifest", s.patient_id)))?;
        if f == fold {
            test.push(s.clone());
        } else {
            rest.push(s.clone());
        }
    }
    let (tr, va) = validation_split(rest.len(), validation_fraction, seed);
    let train = tr.iter().map(|&i| rest[i].clone()).collect();
    let valid = va.iter().map(|&i| rest[i].clone()).collect();
    Ok((train, valid, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, TimeMode};
    use crate::numerics::grad_check;

    fn t4(b: usize, s: usize, r: usize, k: usize, data: Vec<f64>) -> Tensor {
        Tensor::new(vec![b, s, r, k], data).unwrap()
    }

    #[test]
    fn mse_examples() {
        let mut y = vec![0.0; 24];
        y[5] = 1.0;
        let pred = t4(1, 2, 3, 4, vec![0.0; 24]);
        let tgt = t4(1, 2, 3, 4, y.clone());
        assert!((mse_loss(&pred, &tgt, &[2]).unwrap() - 1.0 / 24.0).abs() < 1e-15);
        assert_eq!(mse_loss(&tgt, &tgt, &[2]).unwrap(), 0.0);

        let pred2 = t4(2, 2, 3, 4, vec![0.0; 48]);
        let tgt2 = t4(2, 2, 3, 4, [y.clone(), y].concat());
        assert!((mse_loss(&pred2, &tgt2, &[2, 2]).unwrap() - 1.0 / 24.0).abs() < 1e-15);
        assert!(mse_loss(&pred, &tgt, &[0]).is_err());
    }

    #[test]
    fn padding_is_ignored() {
        let pred = t4(1, 3, 1, 1, vec![0.2, 0.4, 0.9]);
        let tgt = t4(1, 3, 1, 1, vec![0.0, 1.0, 0.0]);
        let short_p = t4(1, 2, 1, 1, vec![0.2, 0.4]);
        let short_t = t4(1, 2, 1, 1, vec![0.0, 1.0]);
        assert_eq!(mse_loss(&pred, &tgt, &[2]).unwrap(), mse_loss(&short_p, &short_t, &[2]).unwrap());
        assert_eq!(bce_loss(&pred, &tgt, &[2]).unwrap(), bce_loss(&short_p, &short_t, &[2]).unwrap());
    }

    #[test]
    fn focal_and_bce_examples() {
        let p = t4(1, 1, 1, 1, vec![0.5]);
        let y = t4(1, 1, 1, 1, vec![1.0]);
        let f = focal_loss_soft(&p, &y, &[1], 2.0, 0.25).unwrap();
        assert!((f - 0.25 * 0.25 * 2f64.ln()).abs() < 1e-12);

        let p = t4(1, 2, 1, 1, vec![0.9, 0.2]);
        let y = t4(1, 2, 1, 1, vec![1.0, 0.0]);
        let b = bce_loss(&p, &y, &[2]).unwrap();
        assert!((b - (-(0.9f64.ln()) - 0.8f64.ln()) / 2.0).abs() < 1e-12);
        let f0 = focal_loss_soft(&p, &y, &[2], 0.0, 0.5).unwrap();
        assert!((f0 - 0.5 * b).abs() < 1e-12);

        let p1 = t4(1, 1, 1, 1, vec![1.0]);
        let y1 = t4(1, 1, 1, 1, vec![1.0]);
        assert!(focal_loss_soft(&p1, &y1, &[1], 2.0, 0.25).unwrap() < 1e-12);
    }

    #[test]
    fn loss_gradients_pass_grad_check() {
        let p = Tensor::vector(vec![0.1, 0.45, 0.8, 0.97]);
        let y = std::rc::Rc::new(Tensor::vector(vec![0.0, 0.6, 1.0, 0.3]));
        for mode in 0..4 {
            let y = y.clone();
            let r = grad_check(
                move |t, v| match mode {
                    0 => t.squared_error(v, y.clone(), 0.25),
                    1 => t.focal_soft(v, y.clone(), 2.0, 0.25, 0.25),
                    2 => t.focal_soft(v, y.clone(), 0.0, 0.5, 0.25),
                    _ => t.bce(v, y.clone(), 0.25),
                },
                &p,
                1e-6,
                1e-4,
            )
            .unwrap();
            assert!(r.passed, "mode {mode}: {:?}", r.worst());
        }
    }

    #[test]
    fn split_examples() {
        assert_eq!(
            balanced_patient_split(&[5, 5, 5, 5], 4, 0)
                .unwrap()
                .iter()
                .collect::<std::collections::BTreeSet<_>>()
                .len(),
            4
        );
        let lengths = [100, 50, 50, 1, 1, 1, 1];
        let a = balanced_patient_split(&lengths, 2, 7).unwrap();
        let mut load = [0; 2];
        for (p, &f) in a.iter().enumerate() {
            load[f] += lengths[p];
        }
        assert_eq!(load, [102, 102]);
        assert_eq!(a, balanced_patient_split(&lengths, 2, 7).unwrap());
        assert!(balanced_patient_split(&[1, 2], 4, 0).is_err());
        assert!(balanced_patient_split(&[1, 2], 1, 0).is_err());
    }

    #[test]
    fn schedule_endpoints() {
        let s = Schedule::new(1e-3, 100, 0.05);
        assert_eq!(s.lr(0), 0.0);
        assert!((s.lr(5) - 1e-3).abs() < 1e-15);
        assert!(s.lr(99) < 1e-5);
        assert!(s.lr(100).abs() < 1e-18);
        for k in 6..100 {
            assert!(s.lr(k) <= s.lr(k - 1));
        }
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let cfg = ModelConfig {
            n_layers: 0,
            d_model: 4,
            n_heads: 2,
            input_dim: 4,
            n_risks: 1,
            horizons: vec![6.0],
            time_mode: TimeMode::None,
            ..ModelConfig::default()
        };
        let mut m = MataFormer::init(cfg, 0).unwrap();
        let before = m.params.head_b.data()[0];
        let mut opt = AdamW::new(&m.params, 0.0);
        let grads: Vec<Vec<f64>> = m.params.fields().iter().map(|(_, t, _)| vec![0.5; t.len()]).collect();
        opt.step(&mut m.params, &grads, 0.01, 0.1);
        assert!((m.params.head_b.data()[0] - (before - 0.01)).abs() < 1e-9);
    }

    #[test]
    fn validation_split_is_deterministic() {
        let (a, b) = validation_split(20, 0.25, 3);
        assert_eq!(b.len(), 5);
        assert_eq!(a.len() + b.len(), 20);
        assert_eq!((a, b), validation_split(20, 0.25, 3));
    }
}
