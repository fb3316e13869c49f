//! Experiment files and the fold and ablation runners shared by the
//! command line and the acceptance suite.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::embeddings::load_precomputed;
use crate::error::{ensure, Error, Result};
use crate::events::{load_trajectories, CategorySet, Trajectory};
use crate::labels::{load_intervals, RiskInterval};
use crate::metrics::{summarize, MetricSet, MetricSummary};
use crate::model::{MataFormer, ModelConfig, TimeMode};
use crate::synth::{Cohort, EMBEDDINGS_FILE, EVENTS_FILE, INTERVALS_FILE};
use crate::training::{build_samples, fold_partition, train, EpochRecord, FoldManifest, LossMode, Sample, TrainConfig};

pub const DEFAULT_FOLDS: usize = 4;

/// Input files; relative paths resolve against the config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    pub events: PathBuf,
    pub intervals: PathBuf,
    pub embeddings: PathBuf,
    /// Fold manifest; built from the trajectories when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub folds: Option<PathBuf>,
}

impl DataPaths {
    /// The files `synth` writes into `dir`.
    pub fn cohort_dir(dir: &Path) -> Self {
        Self {
            events: dir.join(EVENTS_FILE),
            intervals: dir.join(INTERVALS_FILE),
            embeddings: dir.join(EMBEDDINGS_FILE),
            folds: None,
        }
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.events);
        fix(&mut self.intervals);
        fix(&mut self.embeddings);
        if let Some(f) = self.folds.as_mut() {
            fix(f);
        }
    }
}

fn default_folds() -> usize {
    DEFAULT_FOLDS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<DataPaths>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_folds")]
    pub folds: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self { data: None, model: ModelConfig::default(), train: TrainConfig::default(), folds: DEFAULT_FOLDS }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(d) = cfg.data.as_mut() {
            d.resolve(base_dir);
        }
        cfg.model.validate()?;
        cfg.train.validate()?;
        ensure!(cfg.folds >= 2, Config, "need at least 2 folds, got {}", cfg.folds);
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

/// Embedded trajectories with their soft targets and fold assignment.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub trajectories: Vec<Trajectory>,
    pub intervals: Vec<RiskInterval>,
    pub samples: Vec<Sample>,
    pub manifest: FoldManifest,
}

impl Dataset {
    pub fn load(paths: &DataPaths, model: &ModelConfig, folds: usize, seed: u64) -> Result<Self> {
        let mut trajectories = load_trajectories(&paths.events, &CategorySet::default())?;
        let store = load_precomputed(&paths.embeddings)?;
        ensure!(
            store.dim() == model.input_dim,
            Data,
            "embeddings have dimension {}, model expects {}",
            store.dim(),
            model.input_dim
        );
        for t in trajectories.iter_mut() {
            store.attach(t)?;
        }
        let intervals = load_intervals(&paths.intervals)?;
        let manifest = match &paths.folds {
            Some(p) => FoldManifest::load(p)?,
            None => FoldManifest::build(&trajectories, folds, seed)?,
        };
        Self::assemble(trajectories, intervals, manifest, model)
    }

    pub fn from_cohort(cohort: &Cohort, model: &ModelConfig, folds: usize, seed: u64) -> Result<Self> {
        let manifest = FoldManifest::build(&cohort.trajectories, folds, seed)?;
        Self::assemble(cohort.trajectories.clone(), cohort.intervals.clone(), manifest, model)
    }

    fn assemble(
        trajectories: Vec<Trajectory>,
        intervals: Vec<RiskInterval>,
        manifest: FoldManifest,
        model: &ModelConfig,
    ) -> Result<Self> {
        if let Some(iv) = intervals.iter().find(|iv| iv.risk >= model.n_risks) {
            return Err(Error::Data(format!(
                "interval risk {} for patient {} exceeds the model's {} risks",
                iv.risk, iv.patient_id, model.n_risks
            )));
        }
        let samples = build_samples(&trajectories, &intervals, model.n_risks, &model.horizons)?;
        Ok(Self { trajectories, intervals, samples, manifest })
    }

    /// Trajectories assigned to `fold`.
    pub fn fold_trajectories(&self, fold: usize) -> Vec<Trajectory> {
        self.trajectories.iter().filter(|t| self.manifest.fold_of(&t.patient_id) == Some(fold)).cloned().collect()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FoldResult {
    pub fold: usize,
    pub seed: u64,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    pub test: MetricSet,
}

/// Trains on every fold but `fold` (minus a validation share) and scores
/// the held-out fold.
pub fn run_fold(
    data: &Dataset,
    fold: usize,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<(MataFormer, FoldResult)> {
    let (train_set, valid_set, test_set) =
        fold_partition(&data.samples, &data.manifest, fold, train_cfg.validation_fraction, train_cfg.seed)?;
    ensure!(!test_set.is_empty(), Data, "fold {fold} has no patients");
    let model = MataFormer::init(model_cfg.clone(), train_cfg.seed)?;
    let outcome = train(model, &train_set, &valid_set, train_cfg, on_epoch)?;
    let test = crate::training::evaluate_samples(&outcome.model, &test_set, train_cfg.beta)?;
    let result =
        FoldResult { fold, seed: train_cfg.seed, best_epoch: outcome.best_epoch, history: outcome.history, test };
    Ok((outcome.model, result))
}

/// Model and loss variants compared by the ablation runner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationMode {
    /// Full model: dynamic slope and peak.
    Mata,
    Sinusoidal,
    None,
    /// Soft-target focal loss over a grid of focusing and balance values.
    Focal,
    /// Peak fixed at its prior; slope stays dynamic.
    StaticPeak,
    /// Slope fixed at its prior; peak stays dynamic.
    StaticSlope,
}

impl AblationMode {
    pub const ALL: [AblationMode; 6] = [
        AblationMode::Mata,
        AblationMode::Sinusoidal,
        AblationMode::None,
        AblationMode::Focal,
        AblationMode::StaticPeak,
        AblationMode::StaticSlope,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationMode::Mata => "mata",
            AblationMode::Sinusoidal => "sinusoidal",
            AblationMode::None => "none",
            AblationMode::Focal => "focal",
            AblationMode::StaticPeak => "static-peak",
            AblationMode::StaticSlope => "static-slope",
        }
    }
}

impl FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown ablation mode {s:?}")))
    }
}

pub const FOCAL_GAMMAS: [f64; 3] = [1.0, 2.0, 4.0];
pub const FOCAL_ALPHAS: [f64; 3] = [0.25, 0.5, 0.75];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Variant {
    pub name: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// Concrete configurations for `mode` derived from the base experiment.
pub fn ablation_variants(mode: AblationMode, model: &ModelConfig, train: &TrainConfig) -> Vec<Variant> {
    let with_model = |name: &str, f: &dyn Fn(&mut ModelConfig)| {
        let mut m = model.clone();
        f(&mut m);
        Variant { name: name.to_string(), model: m, train: train.clone() }
    };
    let mata = |m: &mut ModelConfig| {
        m.time_mode = TimeMode::Mata;
        m.dynamic_alpha = true;
        m.dynamic_mu = true;
    };
    match mode {
        AblationMode::Mata => vec![with_model("mata", &mata)],
        AblationMode::Sinusoidal => vec![with_model("sinusoidal", &|m| m.time_mode = TimeMode::Sinusoidal)],
        AblationMode::None => vec![with_model("none", &|m| m.time_mode = TimeMode::None)],
        AblationMode::StaticPeak => vec![with_model("static-peak", &|m| {
            mata(m);
            m.dynamic_mu = false;
        })],
        AblationMode::StaticSlope => vec![with_model("static-slope", &|m| {
            mata(m);
            m.dynamic_alpha = false;
        })],
        AblationMode::Focal => {
            let mut out = Vec::new();
            for gamma in FOCAL_GAMMAS {
                for alpha in FOCAL_ALPHAS {
                    let mut v = with_model(&format!("focal-g{gamma}-a{alpha}"), &mata);
                    v.train.loss_mode = LossMode::Focal;
                    v.train.focal_gamma = gamma;
                    v.train.focal_alpha = alpha;
                    out.push(v);
                }
            }
            out
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct VariantReport {
    pub name: String,
    pub runs: Vec<FoldResult>,
    pub summary: BTreeMap<String, MetricSummary>,
}

/// Runs `variant` on each fold for each seed; seeds replace the training seed.
pub fn run_variant(
    data: &Dataset,
    variant: &Variant,
    folds: &[usize],
    seeds: &[u64],
    mut on_epoch: impl FnMut(&str, usize, u64, &EpochRecord),
) -> Result<VariantReport> {
    ensure!(!folds.is_empty() && !seeds.is_empty(), InvalidArgument, "no folds or seeds to run");
    let mut runs = Vec::new();
    for &fold in folds {
        for &seed in seeds {
            let train_cfg = TrainConfig { seed, ..variant.train.clone() };
            let (_, result) =
                run_fold(data, fold, &variant.model, &train_cfg, |r| on_epoch(&variant.name, fold, seed, r))?;
            runs.push(result);
        }
    }
    let tests: Vec<MetricSet> = runs.iter().map(|r| r.test.clone()).collect();
    Ok(VariantReport { name: variant.name.clone(), summary: summarize(&tests), runs })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_paths_resolve_against_file() {
        let text = r#"
            folds = 5
            [data]
            events = "c/events.jsonl"
            intervals = "/abs/intervals.jsonl"
            embeddings = "c/embeddings.bin"
            [model]
            n_layers = 1
            [train]
            max_epochs = 3
        "#;
        let cfg = ExperimentConfig::parse(text, Path::new("/work")).unwrap();
        let d = cfg.data.unwrap();
        assert_eq!(d.events, Path::new("/work/c/events.jsonl"));
        assert_eq!(d.intervals, Path::new("/abs/intervals.jsonl"));
        assert_eq!(cfg.model.n_layers, 1);
        assert_eq!(cfg.model.d_model, ModelConfig::default().d_model);
        assert_eq!(cfg.train.max_epochs, 3);
        assert_eq!(cfg.folds, 5);
    }

    #[test]
    fn config_rejects_unknown_keys_and_bad_values() {
        assert!(ExperimentConfig::parse("[model]\nwidth = 3\n", Path::new(".")).is_err());
        assert!(ExperimentConfig::parse("[train]\nbase_lr = -1.0\n", Path::new(".")).is_err());
        assert!(ExperimentConfig::parse("folds = 1\n", Path::new(".")).is_err());
    }

    #[test]
    fn ablation_modes_parse_and_expand() {
        for m in AblationMode::ALL {
            assert_eq!(m.name().parse::<AblationMode>().unwrap(), m);
        }
        assert!("bogus".parse::<AblationMode>().is_err());
        let base = ModelConfig::default();
        let tr = TrainConfig::default();
        let peak = &ablation_variants(AblationMode::StaticPeak, &base, &tr)[0];
        assert!(peak.model.dynamic_alpha && !peak.model.dynamic_mu);
        let slope = &ablation_variants(AblationMode::StaticSlope, &base, &tr)[0];
        assert!(!slope.model.dynamic_alpha && slope.model.dynamic_mu);
        let focal = ablation_variants(AblationMode::Focal, &base, &tr);
        assert_eq!(focal.len(), 9);
        assert!(focal.iter().all(|v| v.train.loss_mode == LossMode::Focal));
        let none = &ablation_variants(AblationMode::None, &base, &tr)[0];
        assert_eq!(none.model.time_mode, TimeMode::None);
    }
}
