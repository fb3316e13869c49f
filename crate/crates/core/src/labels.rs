//! Plateau-Gaussian soft labels: risk intervals become per-event targets in
//! `[0, 1]` that equal 1 inside an interval and decay as an unnormalised
//! Gaussian of the displacement (in hours) outside it.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::events::Trajectory;

pub const SECONDS_PER_HOUR: f64 = 3600.0;

pub const DEFAULT_HORIZONS: [f64; 4] = [6.0, 12.0, 24.0, 48.0];

/// Active window of one risk for one patient, in seconds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RiskInterval {
    pub patient_id: String,
    pub risk: usize,
    pub t_start: i64,
    pub t_end: i64,
}

impl RiskInterval {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.t_start <= self.t_end,
            Data,
            "interval for patient {} risk {} ends before it starts ({} > {})",
            self.patient_id,
            self.risk,
            self.t_start,
            self.t_end
        );
        Ok(())
    }
}

/// Distance in hours from `t` to the nearest point of the interval; zero inside.
pub fn displacement(t: i64, interval: &RiskInterval) -> f64 {
    if t < interval.t_start {
        (interval.t_start - t) as f64 / SECONDS_PER_HOUR
    } else if t > interval.t_end {
        (t - interval.t_end) as f64 / SECONDS_PER_HOUR
    } else {
        0.0
    }
}

/// `exp(-delta² / (2 sigma²))`
pub fn soft_label(delta: f64, sigma: f64) -> Result<f64> {
    ensure!(sigma > 0.0, InvalidArgument, "horizon scale must be positive, got {sigma}");
    ensure!(delta >= 0.0, InvalidArgument, "displacement must be nonnegative, got {delta}");
    Ok((-delta * delta / (2.0 * sigma * sigma)).exp())
}

/// Per-event `[n_risks × horizons]` targets, stored row-major as
/// `values[(event * n_risks + risk) * n_horizons + horizon]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftLabelMatrix {
    pub n_risks: usize,
    pub horizons: Vec<f64>,
    pub values: Vec<f64>,
}

impl SoftLabelMatrix {
    pub fn zeros(n_events: usize, n_risks: usize, horizons: &[f64]) -> Self {
        Self { n_risks, horizons: horizons.to_vec(), values: vec![0.0; n_events * n_risks * horizons.len()] }
    }

    pub fn cells_per_event(&self) -> usize {
        self.n_risks * self.horizons.len()
    }

    pub fn n_events(&self) -> usize {
        self.values.len() / self.cells_per_event().max(1)
    }

    pub fn get(&self, event: usize, risk: usize, horizon: usize) -> f64 {
        self.values[(event * self.n_risks + risk) * self.horizons.len() + horizon]
    }

    /// All cells of one event.
    pub fn event(&self, event: usize) -> &[f64] {
        let c = self.cells_per_event();
        &self.values[event * c..(event + 1) * c]
    }
}

/// Soft targets for every event of `traj`. Intervals of other patients are
/// ignored; overlapping intervals of one risk combine by maximum.
pub fn build_label_matrix(
    traj: &Trajectory,
    intervals: &[RiskInterval],
    n_risks: usize,
    horizons: &[f64],
) -> Result<SoftLabelMatrix> {
    build_from_times(&traj.times(), &traj.patient_id, intervals, n_risks, horizons)
}

pub(crate) fn build_from_times(
    times: &[i64],
    patient_id: &str,
    intervals: &[RiskInterval],
    n_risks: usize,
    horizons: &[f64],
) -> Result<SoftLabelMatrix> {
    ensure!(!horizons.is_empty(), InvalidArgument, "no horizons given");
    for &k in horizons {
        ensure!(k > 0.0, InvalidArgument, "horizon {k} must be positive");
    }
    let mut m = SoftLabelMatrix::zeros(times.len(), n_risks, horizons);
    let nk = horizons.len();
    for iv in intervals.iter().filter(|iv| iv.patient_id == patient_id) {
        iv.validate()?;
        ensure!(
            iv.risk < n_risks,
            Data,
            "interval risk {} out of range for {n_risks} risks (patient {patient_id})",
            iv.risk
        );
        for (i, &t) in times.iter().enumerate() {
            let delta = displacement(t, iv);
            let base = (i * n_risks + iv.risk) * nk;
            for (cell, &k) in m.values[base..base + nk].iter_mut().zip(horizons) {
                let y = (-delta * delta / (2.0 * k * k)).exp();
                if y > *cell {
                    *cell = y;
                }
            }
        }
    }
    Ok(m)
}

/// Elementwise `y > beta`.
pub fn binarize(y: &SoftLabelMatrix, beta: f64) -> Result<Vec<bool>> {
    binarize_values(&y.values, beta)
}

pub fn binarize_values(values: &[f64], beta: f64) -> Result<Vec<bool>> {
    ensure!(beta > 0.0 && beta < 1.0, InvalidArgument, "binarization threshold must lie in (0, 1), got {beta}");
    Ok(values.iter().map(|&v| v > beta).collect())
}

pub fn load_intervals(path: &Path) -> Result<Vec<RiskInterval>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse { path: path.to_path_buf(), line: n + 1, message };
        let iv: RiskInterval = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        iv.validate().map_err(|e| parse_err(e.to_string()))?;
        out.push(iv);
    }
    Ok(out)
}

pub fn write_intervals(path: &Path, intervals: &[RiskInterval]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for iv in intervals {
        serde_json::to_writer(&mut w, iv)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Soft labels of one patient as stored in a label archive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientLabels {
    pub patient_id: String,
    pub times: Vec<i64>,
    /// One row of `n_risks * horizons.len()` cells per event.
    pub values: Vec<Vec<f64>>,
}

/// On-disk soft-label archive written by the `label` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelArchive {
    pub n_risks: usize,
    pub horizons: Vec<f64>,
    pub patients: Vec<PatientLabels>,
}

impl LabelArchive {
    pub fn build(
        trajectories: &[Trajectory],
        intervals: &[RiskInterval],
        n_risks: usize,
        horizons: &[f64],
    ) -> Result<Self> {
        let patients = trajectories
            .iter()
            .map(|traj| {
                let m = build_label_matrix(traj, intervals, n_risks, horizons)?;
                Ok(PatientLabels {
                    patient_id: traj.patient_id.clone(),
                    times: traj.times(),
                    values: (0..traj.len()).map(|i| m.event(i).to_vec()).collect(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { n_risks, horizons: horizons.to_vec(), patients })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::EventRecord;
    use proptest::prelude::*;

    fn iv(risk: usize, t_start: i64, t_end: i64) -> RiskInterval {
        RiskInterval { patient_id: "p".into(), risk, t_start, t_end }
    }

    fn traj(times: &[i64]) -> Trajectory {
        let events = times
            .iter()
            .map(|&t| EventRecord {
                patient_id: "p".into(),
                t,
                category: "Nursing Notes".into(),
                text: "x".into(),
                metrics: vec![],
            })
            .collect();
        Trajectory::new("p", events).unwrap()
    }

    #[test]
    fn displacement_examples() {
        let i = iv(0, 100_000, 200_000);
        assert_eq!(displacement(150_000, &i), 0.0);
        assert_eq!(displacement(100_000 - 21_600, &i), 6.0);
        assert_eq!(displacement(200_000 + 3_600, &i), 1.0);
    }

    #[test]
    fn soft_label_examples() {
        assert_eq!(soft_label(0.0, 6.0).unwrap(), 1.0);
        assert!((soft_label(6.0, 6.0).unwrap() - 0.60653).abs() < 5e-6);
        assert!((soft_label(12.0, 6.0).unwrap() - 0.13534).abs() < 5e-6);
        assert!(soft_label(1.0, 0.0).is_err());
    }

    #[test]
    fn label_matrix_examples() {
        let t = traj(&[0, 3600, 7200]);
        let m = build_label_matrix(&t, &[], 2, &DEFAULT_HORIZONS).unwrap();
        assert!(m.values.iter().all(|&v| v == 0.0));

        let m = build_label_matrix(&t, &[iv(1, 0, 7200)], 2, &DEFAULT_HORIZONS).unwrap();
        for e in 0..3 {
            for k in 0..4 {
                assert_eq!(m.get(e, 0, k), 0.0);
                assert_eq!(m.get(e, 1, k), 1.0);
            }
        }

        // event at 10 h between intervals ending at 4 h and starting at 13 h
        let t = traj(&[36_000]);
        let ivs = [iv(0, 0, 4 * 3600), iv(0, 13 * 3600, 20 * 3600)];
        let m = build_label_matrix(&t, &ivs, 1, &[6.0]).unwrap();
        let expect = (-(3.0f64 * 3.0) / 72.0).exp().max((-(6.0f64 * 6.0) / 72.0).exp());
        assert_eq!(m.get(0, 0, 0), expect);

        assert!(build_label_matrix(&t, &[iv(3, 0, 1)], 2, &[6.0]).is_err());
    }

    #[test]
    fn binarize_examples() {
        let y = SoftLabelMatrix { n_risks: 1, horizons: vec![6.0], values: vec![1.0, (-0.5f64).exp(), 0.0] };
        assert_eq!(binarize(&y, 0.5).unwrap(), [true, true, false]);
        assert_eq!(binarize(&y, 0.6).unwrap(), [true, true, false]);
        assert_eq!(binarize(&y, 0.61).unwrap(), [true, false, false]);
        assert!(binarize(&y, 1.0).is_err());
        assert!(binarize(&y, 0.0).is_err());
    }

    #[test]
    fn intervals_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("iv.jsonl");
        let ivs = vec![iv(0, 1, 2), iv(3, 10, 10)];
        write_intervals(&p, &ivs).unwrap();
        assert_eq!(load_intervals(&p).unwrap(), ivs);
        std::fs::write(&p, "{\"patient_id\":\"p\",\"risk\":0,\"t_start\":5,\"t_end\":1}\n").unwrap();
        assert!(load_intervals(&p).is_err());
    }

    proptest! {
        #[test]
        fn monotone_in_delta(a in 0.0f64..100.0, b in 0.0f64..100.0, s in 0.1f64..50.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(soft_label(lo, s).unwrap() >= soft_label(hi, s).unwrap());
        }

        #[test]
        fn larger_horizons_decay_slower(d in 0.01f64..30.0, k1 in 1.0f64..24.0, gap in 0.5f64..24.0) {
            prop_assert!(soft_label(d, k1).unwrap() < soft_label(d, k1 + gap).unwrap());
        }
    }
}
