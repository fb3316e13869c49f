//! Seeded synthetic cohorts with planted trigger-to-risk lags.
//!
//! Events arrive with log-normal gaps whose median is shifted per patient,
//! so event counts are a poor proxy for elapsed time. An event may be a
//! trigger; each trigger type opens risk intervals at fixed lags after it.
//! Several risks share a trigger type at different lags, which makes the
//! elapsed time since the trigger, not just its presence, decide which
//! risk is imminent.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::embeddings::{embed_synthetic, normalize, EmbeddingStore};
use crate::error::{ensure, Error, Result};
use crate::events::{textualize, write_trajectories, CategorySet, EventRecord, Trajectory};
use crate::labels::{binarize_values, build_label_matrix, write_intervals, RiskInterval};

const HOUR: f64 = 3600.0;

/// One planted rule: a trigger of `trigger_type` opens an interval for
/// `risk` starting `lag ± jitter` seconds later and lasting `duration`.
///
/// With `spacing = [lo, hi]` the trigger is announced by a primer event
/// (of `primer_type`, else of the trigger's own type) immediately before
/// it, and the rule applies only when the trigger follows the primer by a
/// gap in `[lo, hi]` seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LagRule {
    pub risk: usize,
    pub trigger_type: usize,
    pub lag: f64,
    pub jitter: f64,
    pub duration: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spacing: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub primer_type: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_patients: usize,
    pub mean_events_per_patient: f64,
    pub n_event_types: usize,
    pub n_risks: usize,
    pub lag_table: Vec<LagRule>,
    /// Median inter-event gap in seconds.
    pub gap_median: f64,
    /// Log-normal sigma of individual gaps.
    pub gap_sigma: f64,
    /// Log-normal sigma of the per-patient gap-median multiplier.
    pub patient_rate_sigma: f64,
    pub trigger_probability: f64,
    /// Weight of the event-type and trigger coordinates before normalisation.
    pub signal_strength: f64,
    pub embedding_dim: usize,
    /// Patients start at a uniform offset in `[0, start_spread)` seconds.
    pub start_spread: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        // Each trigger follows its own primer event. A primer minutes before
        // the trigger and one most of a day before lead to different risks.
        let spacing = [[120.0, 600.0], [12.0 * HOUR, 24.0 * HOUR]];
        let mut lag_table = Vec::new();
        for (g, lag_h) in [60.0, 64.0, 68.0, 72.0].into_iter().enumerate() {
            for (j, sp) in spacing.into_iter().enumerate() {
                lag_table.push(LagRule {
                    risk: 2 * g + j,
                    trigger_type: g,
                    lag: lag_h * HOUR,
                    jitter: 0.05 * lag_h * HOUR,
                    duration: HOUR,
                    spacing: Some(sp),
                    primer_type: Some(4 + g),
                });
            }
        }
        Self {
            n_patients: 600,
            mean_events_per_patient: 60.0,
            n_event_types: 16,
            n_risks: 8,
            lag_table,
            gap_median: 900.0,
            gap_sigma: 1.5,
            patient_rate_sigma: 1.0,
            trigger_probability: 0.03,
            signal_strength: 1.0,
            embedding_dim: 64,
            start_spread: 30.0 * 24.0 * HOUR,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn trigger_types(&self) -> Vec<usize> {
        let mut t: Vec<usize> = self.lag_table.iter().map(|r| r.trigger_type).collect();
        t.sort_unstable();
        t.dedup();
        t
    }

    /// Primer event type of each trigger type, aligned with `trigger_types`.
    pub fn primer_types(&self) -> Vec<Option<usize>> {
        self.trigger_types()
            .into_iter()
            .map(|g| {
                let rules: Vec<&LagRule> = self.lag_table.iter().filter(|r| r.trigger_type == g).collect();
                rules[0].spacing.map(|_| rules[0].primer_type.unwrap_or(g))
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.n_patients > 0, Config, "n_patients must be positive");
        ensure!(self.mean_events_per_patient >= 1.0, Config, "mean_events_per_patient must be at least 1");
        ensure!(self.n_risks > 0, Config, "n_risks must be positive");
        ensure!(self.gap_median > 0.0 && self.gap_sigma >= 0.0, Config, "bad gap distribution");
        ensure!(self.patient_rate_sigma >= 0.0, Config, "patient_rate_sigma must be nonnegative");
        ensure!((0.0..=1.0).contains(&self.trigger_probability), Config, "trigger_probability must lie in [0, 1]");
        ensure!(self.start_spread >= 0.0, Config, "start_spread must be nonnegative");
        for r in &self.lag_table {
            ensure!(r.lag > 0.0, Config, "lags must be positive");
            ensure!(r.jitter >= 0.0 && r.jitter < r.lag, Config, "jitter must lie in [0, lag)");
            ensure!(r.duration >= 0.0, Config, "durations must be nonnegative");
            if let Some([lo, hi]) = r.spacing {
                ensure!(0.0 <= lo && lo <= hi, Config, "spacing range [{lo}, {hi}] is invalid");
            }
            ensure!(
                self.lag_table
                    .iter()
                    .filter(|o| o.trigger_type == r.trigger_type)
                    .all(|o| o.spacing.is_some() == r.spacing.is_some() && o.primer_type == r.primer_type),
                Config,
                "trigger type {} mixes primer settings across its rules",
                r.trigger_type
            );
            if let Some(p) = r.primer_type {
                ensure!(r.spacing.is_some(), Config, "primer_type needs a spacing range");
                ensure!(p < self.n_event_types, Config, "primer type {p} outside {} event types", self.n_event_types);
                ensure!(
                    self.lag_table.iter().all(|o| o.trigger_type != p),
                    Config,
                    "primer type {p} is also a trigger type"
                );
            }
            ensure!(r.risk < self.n_risks, Config, "lag rule risk {} out of range", r.risk);
            ensure!(
                r.trigger_type < self.n_event_types,
                Config,
                "trigger type {} outside {} event types",
                r.trigger_type,
                self.n_event_types
            );
        }
        let n_trig = self.trigger_types().len();
        let n_primer = self.primer_types().iter().flatten().filter(|&&p| !self.trigger_types().contains(&p)).count();
        ensure!(n_trig + n_primer < self.n_event_types, Config, "need at least one non-trigger event type");
        ensure!(
            self.embedding_dim >= self.n_event_types + n_trig && self.embedding_dim >= 2,
            Config,
            "embedding_dim {} cannot hold {} type and {n_trig} trigger coordinates",
            self.embedding_dim,
            self.n_event_types
        );
        Ok(())
    }
}

/// Generated cohort; trajectories carry their embeddings.
#[derive(Debug, Clone)]
pub struct Cohort {
    pub trajectories: Vec<Trajectory>,
    pub intervals: Vec<RiskInterval>,
    /// Event type of every event, aligned with trajectories.
    pub event_types: Vec<Vec<usize>>,
    pub embeddings: EmbeddingStore,
}

fn event_for(pid: &str, t: i64, ty: usize, value: f64, categories: &CategorySet) -> EventRecord {
    let category = categories.names()[ty % categories.len()].clone();
    if ty.is_multiple_of(2) {
        EventRecord {
            patient_id: pid.to_string(),
            t,
            category,
            text: String::new(),
            metrics: vec![("code".into(), format!("E{ty:02}")), ("value".into(), format!("{value:.2}"))],
        }
    } else {
        EventRecord {
            patient_id: pid.to_string(),
            t,
            category,
            text: format!("event E{ty:02} observed, score {value:.2}"),
            metrics: vec![],
        }
    }
}

fn open_intervals(
    rules: &[LagRule],
    trigger_type: usize,
    spacing: Option<f64>,
    pid: &str,
    t: i64,
    rng: &mut ChaCha8Rng,
    out: &mut Vec<RiskInterval>,
) {
    let applies = |r: &LagRule| match (r.spacing, spacing) {
        (None, None) => true,
        (Some([lo, hi]), Some(gap)) => (lo..=hi).contains(&gap),
        _ => false,
    };
    for rule in rules.iter().filter(|r| r.trigger_type == trigger_type && applies(r)) {
        let start = t + (rule.lag + rule.jitter * rng.gen_range(-1.0..=1.0)).round() as i64;
        out.push(RiskInterval {
            patient_id: pid.to_string(),
            risk: rule.risk,
            t_start: start,
            t_end: start + rule.duration.round() as i64,
        });
    }
}

/// Builds the cohort deterministically from `config.seed`.
pub fn generate_cohort(config: &SynthConfig) -> Result<Cohort> {
    config.validate()?;
    let categories = CategorySet::default();
    let triggers = config.trigger_types();
    let primers = config.primer_types();
    let background: Vec<usize> =
        (0..config.n_event_types).filter(|t| !triggers.contains(t) && !primers.contains(&Some(*t))).collect();
    // distinct spacing ranges per trigger type; empty for single-event triggers
    let spacings: Vec<Vec<[f64; 2]>> = triggers
        .iter()
        .map(|&g| {
            let mut v: Vec<[f64; 2]> = Vec::new();
            for sp in config.lag_table.iter().filter(|r| r.trigger_type == g).filter_map(|r| r.spacing) {
                if !v.contains(&sp) {
                    v.push(sp);
                }
            }
            v
        })
        .collect();
    let count = Poisson::new(config.mean_events_per_patient)
        .map_err(|e| Error::Config(format!("event count distribution: {e}")))?;
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");

    // one independent stream per patient
    let mut root = ChaCha8Rng::seed_from_u64(config.seed);
    let patient_seeds: Vec<u64> = (0..config.n_patients).map(|_| root.gen()).collect();

    let mut cohort = Cohort {
        trajectories: Vec::with_capacity(config.n_patients),
        intervals: Vec::new(),
        event_types: Vec::with_capacity(config.n_patients),
        embeddings: EmbeddingStore::new(config.embedding_dim),
    };
    for (p, &ps) in patient_seeds.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(ps);
        let pid = format!("P{p:05}");
        let n = (count.sample(&mut rng) as usize).max(4);
        let shift = config.patient_rate_sigma * std_normal.sample(&mut rng);
        let mut t = (rng.gen::<f64>() * config.start_spread).floor();
        let mut events = Vec::with_capacity(n);
        let mut types = Vec::with_capacity(n);
        let mut vectors = Vec::with_capacity(n);
        // (trigger index, spacing) of a pair whose second event is due next
        let mut pending: Option<(usize, f64)> = None;
        for i in 0..n {
            let due = pending.take();
            if i > 0 {
                t += match due {
                    Some((_, gap)) => gap,
                    None => {
                        let z = config.gap_median.ln() + shift + config.gap_sigma * std_normal.sample(&mut rng);
                        z.exp().round()
                    }
                };
            }
            let ts = t as i64;
            let ty = if let Some((g, gap)) = due {
                open_intervals(&config.lag_table, triggers[g], Some(gap), &pid, ts, &mut rng, &mut cohort.intervals);
                triggers[g]
            } else if !triggers.is_empty() && rng.gen::<f64>() < config.trigger_probability {
                let g = rng.gen_range(0..triggers.len());
                if spacings[g].is_empty() {
                    open_intervals(&config.lag_table, triggers[g], None, &pid, ts, &mut rng, &mut cohort.intervals);
                } else {
                    let [lo, hi] = spacings[g][rng.gen_range(0..spacings[g].len())];
                    // a primer cut off by the end of the stay stays a lone event
                    let gap = rng.gen_range(lo..=hi).round();
                    pending = (i + 1 < n).then_some((g, gap));
                }
                primers[g].unwrap_or(triggers[g])
            } else {
                background[rng.gen_range(0..background.len())]
            };
            let value: f64 = rng.gen_range(0.0..100.0);
            let ev = event_for(&pid, ts, ty, value, &categories);
            let mut v = embed_synthetic(&textualize(&ev)?, config.embedding_dim, config.seed)?;
            v[ty] += config.signal_strength;
            if let Some(g) = triggers.iter().position(|&x| x == ty) {
                v[config.n_event_types + g] += config.signal_strength;
            }
            normalize(&mut v);
            cohort.embeddings.insert(crate::events::event_key(&pid, i), v.clone())?;
            events.push(ev);
            types.push(ty);
            vectors.push(v);
        }
        let mut traj = Trajectory::new(pid, events)?;
        traj.set_embeddings(vectors)?;
        cohort.trajectories.push(traj);
        cohort.event_types.push(types);
    }
    Ok(cohort)
}

/// Fraction of label cells above `beta` over the whole cohort.
pub fn positive_cell_prevalence(
    trajectories: &[Trajectory],
    intervals: &[RiskInterval],
    n_risks: usize,
    horizons: &[f64],
    beta: f64,
) -> Result<f64> {
    let mut pos = 0usize;
    let mut cells = 0usize;
    for traj in trajectories {
        let y = build_label_matrix(traj, intervals, n_risks, horizons)?;
        pos += binarize_values(&y.values, beta)?.iter().filter(|&&b| b).count();
        cells += y.values.len();
    }
    Ok(if cells == 0 { 0.0 } else { pos as f64 / cells as f64 })
}

pub const EVENTS_FILE: &str = "events.jsonl";
pub const INTERVALS_FILE: &str = "intervals.jsonl";
pub const EMBEDDINGS_FILE: &str = "embeddings.bin";
pub const CONFIG_FILE: &str = "synth_config.json";

/// Writes events, intervals, embeddings and the generating config into `dir`.
pub fn write_cohort(cohort: &Cohort, config: &SynthConfig, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_trajectories(&dir.join(EVENTS_FILE), &cohort.trajectories)?;
    write_intervals(&dir.join(INTERVALS_FILE), &cohort.intervals)?;
    cohort.embeddings.write(&dir.join(EMBEDDINGS_FILE))?;
    let cfg_path = dir.join(CONFIG_FILE);
    std::fs::write(&cfg_path, serde_json::to_string_pretty(config)?).map_err(|e| Error::io(&cfg_path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::DEFAULT_HORIZONS;

    fn small() -> SynthConfig {
        SynthConfig {
            n_patients: 20,
            mean_events_per_patient: 30.0,
            trigger_probability: 0.1,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn deterministic_files() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        write_cohort(&generate_cohort(&cfg).unwrap(), &cfg, &a).unwrap();
        write_cohort(&generate_cohort(&cfg).unwrap(), &cfg, &b).unwrap();
        for f in [EVENTS_FILE, INTERVALS_FILE, EMBEDDINGS_FILE] {
            assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap());
        }
    }

    #[test]
    fn zero_trigger_probability_gives_no_labels() {
        let cfg = SynthConfig { trigger_probability: 0.0, ..small() };
        let c = generate_cohort(&cfg).unwrap();
        assert!(c.intervals.is_empty());
        let prev = positive_cell_prevalence(&c.trajectories, &c.intervals, 8, &DEFAULT_HORIZONS, 0.5).unwrap();
        assert_eq!(prev, 0.0);
    }

    #[test]
    fn default_prevalence_is_sparse() {
        let c = generate_cohort(&SynthConfig::default()).unwrap();
        let prev = positive_cell_prevalence(&c.trajectories, &c.intervals, 8, &DEFAULT_HORIZONS, 0.5).unwrap();
        assert!((0.005..=0.03).contains(&prev), "prevalence {prev}");
    }

    #[test]
    fn primers_precede_their_triggers() {
        let cfg = SynthConfig::default();
        let c = generate_cohort(&cfg).unwrap();
        let primers = cfg.primer_types();
        let triggers = cfg.trigger_types();
        let mut pairs = 0;
        for types in &c.event_types {
            for (i, &ty) in types.iter().enumerate() {
                if let Some(g) = triggers.iter().position(|&t| t == ty) {
                    assert!(i > 0 && Some(types[i - 1]) == primers[g], "trigger without its primer");
                    pairs += 1;
                }
            }
        }
        assert!(pairs > 0);
    }

    #[test]
    fn six_hour_lag_labels_trigger_at_exp_minus_half() {
        let cfg = SynthConfig {
            n_risks: 1,
            lag_table: vec![LagRule {
                risk: 0,
                trigger_type: 0,
                lag: 6.0 * HOUR,
                jitter: 0.0,
                duration: HOUR,
                spacing: None,
                primer_type: None,
            }],
            ..small()
        };
        let c = generate_cohort(&cfg).unwrap();
        let mut checked = 0;
        for (traj, types) in c.trajectories.iter().zip(&c.event_types) {
            let y = build_label_matrix(traj, &c.intervals, 1, &[6.0]).unwrap();
            for (i, &ty) in types.iter().enumerate() {
                let t = traj.events[i].t;
                let own = c.intervals.iter().any(|iv| iv.patient_id == traj.patient_id && iv.t_start == t + 6 * 3600);
                // only isolated triggers: no other interval nearby
                let others = c.intervals.iter().filter(|iv| iv.patient_id == traj.patient_id).count();
                if ty == 0 && own && others == 1 {
                    assert!((y.get(i, 0, 0) - (-0.5f64).exp()).abs() < 1e-12);
                    checked += 1;
                }
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn intervals_follow_their_triggers() {
        let cfg = small();
        let c = generate_cohort(&cfg).unwrap();
        assert!(!c.intervals.is_empty());
        for iv in &c.intervals {
            let p: usize = iv.patient_id[1..].parse().unwrap();
            let traj = &c.trajectories[p];
            let ok = cfg.lag_table.iter().filter(|r| r.risk == iv.risk).any(|r| {
                traj.events.iter().zip(&c.event_types[p]).any(|(e, &ty)| {
                    let lag = (iv.t_start - e.t) as f64;
                    ty == r.trigger_type && (lag - r.lag).abs() <= r.jitter + 0.5
                })
            });
            assert!(ok, "{iv:?}");
        }
    }

    #[test]
    fn embeddings_are_unit_and_config_checked() {
        let c = generate_cohort(&small()).unwrap();
        for t in &c.trajectories {
            for v in t.embeddings.as_ref().unwrap() {
                let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                assert!((n - 1.0).abs() < 1e-12);
            }
        }
        let bad = SynthConfig { embedding_dim: 8, ..small() };
        assert!(generate_cohort(&bad).is_err());
    }
}
