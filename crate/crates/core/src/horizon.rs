//! Receptive fields of the Laplacian bias in physical time.
//!
//! A key at log distance `D` from a query with peak `mu` and slope `alpha`
//! is suppressed by `exp(-alpha |D - mu|)` relative to the peak. Keys inside
//! the cutoff `gamma` satisfy `|D - mu| <= gamma / alpha`, which maps back
//! through `D = ln(dt / tau + 1)` to a window of physical lags.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::events::Trajectory;
use crate::model::{embedding_tensor, MataFormer, TimeMode};

/// Default suppression cutoff, `exp(-5) ≈ 6.7e-3`.
pub const DEFAULT_GAMMA: f64 = 5.0;

/// `exp(-gamma)`, attention relative to the peak at penalty `gamma`.
pub fn relative_attention_ratio(gamma: f64) -> f64 {
    (-gamma).exp()
}

/// Physical lag `tau (e^mu - 1)` whose log distance equals `mu`.
pub fn mu_time_anchor(mu: f64, tau: f64) -> f64 {
    tau * mu.exp_m1()
}

/// `(t_min, t_max)` in seconds with `X = gamma / alpha`:
/// `t_min = max(0, tau (e^(mu - X) - 1))`, `t_max = tau (e^(mu + X) - 1)`.
pub fn physical_bounds(mu: f64, alpha: f64, gamma: f64, tau: f64) -> (f64, f64) {
    let x = gamma / alpha;
    let lo = (tau * (mu - x).exp_m1()).max(0.0);
    let hi = tau * (mu + x).exp_m1();
    (lo, hi)
}

/// Unrectified width `tau e^mu (e^X - e^-X)`; exceeds `t_max - t_min`
/// whenever the lower bound is clipped at zero.
pub fn bandwidth(mu: f64, alpha: f64, gamma: f64, tau: f64) -> f64 {
    let x = gamma / alpha;
    tau * mu.exp() * (x.exp() - (-x).exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReceptiveField {
    pub layer: usize,
    pub head: usize,
    pub mu: f64,
    pub alpha: f64,
    pub gamma_cutoff: f64,
    /// Log-space radius `gamma / alpha`.
    pub x: f64,
    pub t_min: f64,
    pub t_max: f64,
    pub bandwidth: f64,
}

impl ReceptiveField {
    pub fn new(layer: usize, head: usize, mu: f64, alpha: f64, gamma: f64, tau: f64) -> Self {
        let (t_min, t_max) = physical_bounds(mu, alpha, gamma, tau);
        Self {
            layer,
            head,
            mu,
            alpha,
            gamma_cutoff: gamma,
            x: gamma / alpha,
            t_min,
            t_max,
            bandwidth: bandwidth(mu, alpha, gamma, tau),
        }
    }
}

/// Fixed-width histogram over `[lo, hi]`; values outside are clipped into
/// the end bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn new(lo: f64, hi: f64, bins: usize) -> Self {
        Self { lo, hi, counts: vec![0; bins] }
    }

    fn bin(&self, v: f64) -> usize {
        let n = self.counts.len();
        let f = ((v - self.lo) / (self.hi - self.lo) * n as f64).floor();
        (f.max(0.0) as usize).min(n - 1)
    }

    pub fn add(&mut self, v: f64) {
        let b = self.bin(v);
        self.counts[b] += 1;
    }
}

/// Joint `(mu, alpha)` counts, row-major over mu bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointHistogram {
    pub mu: Histogram,
    pub alpha: Histogram,
    pub counts: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    fn of(v: &[f64]) -> Option<Self> {
        if v.is_empty() {
            return None;
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        Some(Self {
            min: v.iter().cloned().fold(f64::INFINITY, f64::min),
            max: v.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            mean,
            std: var.sqrt(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadReport {
    pub layer: usize,
    pub head: usize,
    pub static_mu: f64,
    pub static_alpha: f64,
    /// Static peak expressed as a probability of `gamma_mu`.
    pub static_mu_probability: f64,
    pub dynamic_mu: Option<Summary>,
    pub dynamic_alpha: Option<Summary>,
    /// Receptive field at the static prior.
    pub static_field: ReceptiveField,
    /// Receptive field at the mean dynamic parameters.
    pub dynamic_field: Option<ReceptiveField>,
    pub mu_histogram: Histogram,
    pub alpha_histogram: Histogram,
    pub joint_histogram: JointHistogram,
    /// Queries whose dynamic parameters differ from the static prior.
    pub queries_off_prior: usize,
    pub n_queries: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldReport {
    pub gamma_cutoff: f64,
    pub tau: f64,
    pub gamma_mu: f64,
    pub n_probe_events: usize,
    pub heads: Vec<HeadReport>,
}

pub const MU_BINS: usize = 20;
pub const ALPHA_BINS: usize = 25;

/// Per-layer, per-head distribution of dynamic `(mu, alpha)` over every
/// query of the probe trajectories, with receptive fields at cutoff `gamma`.
pub fn report_fields(model: &MataFormer, probes: &[Trajectory], gamma: f64) -> Result<FieldReport> {
    let cfg = &model.config;
    ensure!(
        cfg.time_mode == TimeMode::Mata,
        Config,
        "receptive-field analysis needs a temporal-bias model, checkpoint uses {:?}",
        cfg.time_mode
    );
    ensure!(gamma >= 0.0, InvalidArgument, "cutoff must be nonnegative");
    let nh = cfg.n_heads;
    let mut mus = vec![vec![Vec::new(); nh]; cfg.n_layers];
    let mut alphas = vec![vec![Vec::new(); nh]; cfg.n_layers];
    let mut n_events = 0;
    for traj in probes {
        let emb = traj
            .embeddings
            .as_ref()
            .ok_or_else(|| crate::Error::Data(format!("probe {} has no embeddings", traj.patient_id)))?;
        ensure!(
            emb[0].len() == cfg.input_dim,
            Config,
            "probe embeddings have dim {}, checkpoint expects {}",
            emb[0].len(),
            cfg.input_dim
        );
        let (_, trace) = model.inspect(&embedding_tensor(emb)?, &traj.times())?;
        n_events += traj.len();
        for (l, lt) in trace.layers.iter().enumerate() {
            for (h, ht) in lt.heads.iter().enumerate() {
                mus[l][h].extend_from_slice(&ht.mu);
                alphas[l][h].extend_from_slice(&ht.alpha);
            }
        }
    }

    let mut heads = Vec::new();
    for (l, layer) in model.params.layers.iter().enumerate() {
        let tp = layer.temporal.as_ref().expect("temporal parameters in mata mode");
        for h in 0..nh {
            let static_mu = tp.mu_bar(h, cfg.gamma_mu);
            let static_alpha = tp.alpha_bar.data()[h];
            let clamped_alpha = crate::attention::project_alpha(static_alpha, 0.0);
            let (m, a) = (&mus[l][h], &alphas[l][h]);
            let mut mu_hist = Histogram::new(0.0, cfg.gamma_mu, MU_BINS);
            let mut alpha_hist = Histogram::new(0.0, crate::attention::ALPHA_CEILING, ALPHA_BINS);
            let mut joint = vec![vec![0; ALPHA_BINS]; MU_BINS];
            for (&mv, &av) in m.iter().zip(a) {
                mu_hist.add(mv);
                alpha_hist.add(av);
                joint[mu_hist.bin(mv)][alpha_hist.bin(av)] += 1;
            }
            let dyn_mu = Summary::of(m);
            let dyn_alpha = Summary::of(a);
            let dynamic_field = match (&dyn_mu, &dyn_alpha) {
                (Some(mm), Some(aa)) => Some(ReceptiveField::new(l, h, mm.mean, aa.mean, gamma, cfg.tau)),
                _ => None,
            };
            heads.push(HeadReport {
                layer: l,
                head: h,
                static_mu,
                static_alpha,
                static_mu_probability: static_mu / cfg.gamma_mu,
                dynamic_mu: dyn_mu,
                dynamic_alpha: dyn_alpha,
                static_field: ReceptiveField::new(l, h, static_mu, clamped_alpha, gamma, cfg.tau),
                dynamic_field,
                mu_histogram: mu_hist.clone(),
                alpha_histogram: alpha_hist.clone(),
                joint_histogram: JointHistogram { mu: mu_hist, alpha: alpha_hist, counts: joint },
                queries_off_prior: m.iter().zip(a).filter(|(&mv, &av)| mv != static_mu || av != clamped_alpha).count(),
                n_queries: m.len(),
            });
        }
    }
    Ok(FieldReport { gamma_cutoff: gamma, tau: cfg.tau, gamma_mu: cfg.gamma_mu, n_probe_events: n_events, heads })
}
