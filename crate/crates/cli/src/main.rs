use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use mata_core::error::Error as CoreError;
use mata_core::events::{load_trajectories, CategorySet};
use mata_core::experiment::{
    ablation_variants, run_fold, run_variant, AblationMode, DataPaths, Dataset, ExperimentConfig, VariantReport,
};
use mata_core::horizon::report_fields;
use mata_core::labels::{load_intervals, LabelArchive, DEFAULT_HORIZONS};
use mata_core::metrics::{beta_grid, beta_sweep, evaluate, BetaSweep, MetricSet};
use mata_core::model::MataFormer;
use mata_core::synth::{generate_cohort, positive_cell_prevalence, write_cohort, SynthConfig};
use mata_core::training::{predict_all, FoldManifest, Sample};

const CHECKPOINT_FILE: &str = "model.json";
const HISTORY_FILE: &str = "history.json";
const RUN_FILE: &str = "run.json";
const FOLDS_FILE: &str = "folds.json";

#[derive(Parser)]
#[command(name = "mata", version, about = "Temporal-bias risk forecasting over irregular event streams")]
struct Cli {
    /// Worker threads for per-sample parallelism (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort: events, risk intervals and embeddings.
    Synth {
        /// Generator settings (TOML or JSON); defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        n_patients: Option<usize>,
    },
    /// Build the soft-label archive for every event.
    Label {
        #[arg(long)]
        events: PathBuf,
        #[arg(long)]
        intervals: PathBuf,
        /// Horizons in hours.
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_HORIZONS.to_vec())]
        horizons: Vec<f64>,
        /// Number of risks; inferred from the intervals when omitted.
        #[arg(long)]
        n_risks: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Assign patients to event-balanced folds.
    Split {
        #[arg(long)]
        events: PathBuf,
        #[arg(long, default_value_t = 4)]
        folds: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Manifest path; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train on all folds except the held-out one.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        fold: usize,
        /// Output directory for the checkpoint, history and run record.
        #[arg(long)]
        out: PathBuf,
        /// Cohort directory written by `synth`, overriding the config's data paths.
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
    /// Score a checkpoint on its held-out fold.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to the fold recorded next to the checkpoint.
        #[arg(long)]
        fold: Option<usize>,
        #[arg(long, default_value_t = 0.5)]
        beta: f64,
        /// Threshold sweep as start:end:step, e.g. 0.3:0.9:0.1.
        #[arg(long)]
        beta_sweep: Option<String>,
        /// Experiment config; defaults to the run record next to the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Convert learned slopes and peaks into physical attention windows.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Suppression cutoff: keys beyond exp(-gamma) relative weight are ignored.
        #[arg(long, default_value_t = 5.0)]
        gamma: f64,
        #[arg(long)]
        fold: Option<usize>,
        /// Largest number of held-out trajectories used as probes.
        #[arg(long, default_value_t = 64)]
        max_probes: usize,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and score one ablation variant (or grid) across folds and seeds.
    Ablate {
        /// mata, sinusoidal, none, focal, static-peak or static-slope.
        #[arg(long, value_parser = parse_mode)]
        mode: AblationMode,
        #[arg(long)]
        config: PathBuf,
        /// Held-out folds to run; all folds when omitted.
        #[arg(long, value_delimiter = ',')]
        fold: Vec<usize>,
        /// Number of seeds, counted up from the config's training seed.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_mode(s: &str) -> std::result::Result<AblationMode, String> {
    s.parse().map_err(|e: CoreError| e.to_string())
}

/// What `train` leaves next to the checkpoint so later commands can find
/// the data and fold it was trained against.
#[derive(Serialize, Deserialize)]
struct RunRecord {
    fold: usize,
    config: ExperimentConfig,
}

fn write_json(path: Option<&Path>, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            }
            std::fs::write(p, text + "\n").with_context(|| format!("writing {}", p.display()))
        }
        None => {
            use std::io::Write;
            match writeln!(std::io::stdout().lock(), "{text}") {
                Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
                other => other.context("writing to stdout"),
            }
        }
    }
}

fn load_synth_config(path: &Path) -> Result<SynthConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let cfg = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| CoreError::Config(format!("{}: {e}", path.display())))?
    } else {
        toml::from_str(&text).map_err(|e| CoreError::Config(format!("{}: {e}", path.display())))?
    };
    Ok(cfg)
}

fn experiment_with_data(mut cfg: ExperimentConfig, data_dir: Option<&Path>) -> Result<ExperimentConfig> {
    if let Some(dir) = data_dir {
        let folds = cfg.data.as_ref().and_then(|d| d.folds.clone());
        cfg.data = Some(DataPaths { folds, ..DataPaths::cohort_dir(dir) });
    }
    if cfg.data.is_none() {
        return Err(CoreError::Config("no [data] section and no --data-dir given".into()).into());
    }
    Ok(cfg)
}

fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let data = cfg.data.as_ref().expect("data paths checked");
    Ok(Dataset::load(data, &cfg.model, cfg.folds, cfg.train.seed)?)
}

/// Experiment config and fold for commands that start from a checkpoint.
fn checkpoint_context(
    checkpoint: &Path,
    config: Option<&Path>,
    data_dir: Option<&Path>,
    fold: Option<usize>,
) -> Result<(ExperimentConfig, usize)> {
    let (cfg, recorded_fold) = match config {
        Some(p) => (ExperimentConfig::load(p)?, None),
        None => {
            let run_path = checkpoint.parent().unwrap_or(Path::new(".")).join(RUN_FILE);
            let text = std::fs::read_to_string(&run_path).map_err(|e| {
                CoreError::Config(format!("no --config and no run record at {}: {e}", run_path.display()))
            })?;
            let run: RunRecord = serde_json::from_str(&text)?;
            (run.config, Some(run.fold))
        }
    };
    let fold = fold.or(recorded_fold).ok_or_else(|| CoreError::Config("--fold is required".into()))?;
    Ok((experiment_with_data(cfg, data_dir)?, fold))
}

fn fold_samples(data: &Dataset, fold: usize) -> Result<Vec<Sample>> {
    if fold >= data.manifest.folds {
        bail!(CoreError::InvalidArgument(format!("fold {fold} of {}", data.manifest.folds)));
    }
    Ok(data.samples.iter().filter(|s| data.manifest.fold_of(&s.patient_id) == Some(fold)).cloned().collect())
}

#[derive(Serialize)]
struct EvalReport {
    fold: usize,
    beta: f64,
    n_patients: usize,
    metrics: MetricSet,
    #[serde(skip_serializing_if = "Option::is_none")]
    beta_sweep: Option<BetaSweep>,
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { config, out_dir, seed, n_patients } => {
            let mut cfg = match &config {
                Some(p) => load_synth_config(p)?,
                None => SynthConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(n) = n_patients {
                cfg.n_patients = n;
            }
            let cohort = generate_cohort(&cfg)?;
            write_cohort(&cohort, &cfg, &out_dir)?;
            let events: usize = cohort.trajectories.iter().map(|t| t.len()).sum();
            let prevalence =
                positive_cell_prevalence(&cohort.trajectories, &cohort.intervals, cfg.n_risks, &DEFAULT_HORIZONS, 0.5)?;
            log::info!(
                "{} patients, {events} events, {} intervals, positive-cell prevalence {:.4} -> {}",
                cohort.trajectories.len(),
                cohort.intervals.len(),
                prevalence,
                out_dir.display()
            );
        }
        Command::Label { events, intervals, horizons, n_risks, out } => {
            let trajs = load_trajectories(&events, &CategorySet::default())?;
            let ivs = load_intervals(&intervals)?;
            let n_risks = n_risks.unwrap_or_else(|| ivs.iter().map(|i| i.risk + 1).max().unwrap_or(1));
            let archive = LabelArchive::build(&trajs, &ivs, n_risks, &horizons)?;
            write_json(Some(&out), &archive)?;
        }
        Command::Split { events, folds, seed, out } => {
            let trajs = load_trajectories(&events, &CategorySet::default())?;
            let manifest = FoldManifest::build(&trajs, folds, seed)?;
            log::info!("fold event counts {:?}", manifest.fold_events);
            write_json(out.as_deref(), &manifest)?;
        }
        Command::Train { config, fold, out, data_dir } => {
            let mut cfg = experiment_with_data(ExperimentConfig::load(&config)?, data_dir.as_deref())?;
            if let Some(d) = cfg.data.as_mut() {
                for p in [&mut d.events, &mut d.intervals, &mut d.embeddings].into_iter().chain(d.folds.as_mut()) {
                    *p = std::path::absolute(&*p)?;
                }
            }
            let data = load_dataset(&cfg)?;
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            // pin the manifest so eval sees the same folds
            if cfg.data.as_ref().is_some_and(|d| d.folds.is_none()) {
                let path = out.join(FOLDS_FILE);
                data.manifest.save(&path)?;
                cfg.data.as_mut().expect("checked").folds = Some(std::path::absolute(&path)?);
            }
            let (model, result) = run_fold(&data, fold, &cfg.model, &cfg.train, |r| {
                log::info!(
                    "epoch {} loss {:.6} lr {:.2e}/{:.2e} validation sample AUPRC {}",
                    r.epoch,
                    r.loss,
                    r.lr_backbone,
                    r.lr_predictor,
                    r.validation.as_ref().and_then(|m| m.sample_auprc).map_or("n/a".to_string(), |v| format!("{v:.4}"))
                );
            })?;
            model.save(&out.join(CHECKPOINT_FILE))?;
            write_json(Some(&out.join(HISTORY_FILE)), &result)?;
            write_json(Some(&out.join(RUN_FILE)), &RunRecord { fold, config: cfg })?;
            log::info!("best epoch {}; held-out sample AUPRC {:?}", result.best_epoch, result.test.sample_auprc);
        }
        Command::Eval { checkpoint, fold, beta, beta_sweep: sweep, config, data_dir, out } => {
            let model = MataFormer::load(&checkpoint)?;
            let (mut cfg, fold) = checkpoint_context(&checkpoint, config.as_deref(), data_dir.as_deref(), fold)?;
            cfg.model = model.config.clone();
            let data = load_dataset(&cfg)?;
            let test = fold_samples(&data, fold)?;
            let preds = predict_all(&model, &test)?;
            let pred: Vec<f64> = preds.iter().flat_map(|p| p.data().iter().copied()).collect();
            let target: Vec<f64> = test.iter().flat_map(|s| s.targets.data().iter().copied()).collect();
            let (r, k) = (cfg.model.n_risks, cfg.model.horizons.len());
            let metrics = evaluate(&pred, &target, r, k, beta)?;
            let beta_sweep = match sweep {
                Some(spec) => {
                    let parts: Vec<f64> = spec
                        .split(':')
                        .map(|x| x.trim().parse::<f64>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| {
                            CoreError::InvalidArgument(format!("bad sweep {spec:?}; expected start:end:step"))
                        })?;
                    if parts.len() != 3 {
                        bail!(CoreError::InvalidArgument(format!("bad sweep {spec:?}; expected start:end:step")));
                    }
                    let grid = beta_grid(parts[0], parts[1], parts[2])?;
                    let sw = beta_sweep(&pred, &target, r, k, &grid)?;
                    if !sw.prevalence_monotone {
                        log::warn!("positive prevalence is not monotone over the sweep");
                    }
                    Some(sw)
                }
                None => None,
            };
            let report = EvalReport { fold, beta, n_patients: test.len(), metrics, beta_sweep };
            write_json(out.as_deref(), &report)?;
        }
        Command::Analyze { checkpoint, gamma, fold, max_probes, config, data_dir, out } => {
            let model = MataFormer::load(&checkpoint)?;
            let (mut cfg, fold) = checkpoint_context(&checkpoint, config.as_deref(), data_dir.as_deref(), fold)?;
            cfg.model = model.config.clone();
            let data = load_dataset(&cfg)?;
            let mut probes = data.fold_trajectories(fold);
            probes.truncate(max_probes);
            let report = report_fields(&model, &probes, gamma)?;
            write_json(out.as_deref(), &report)?;
        }
        Command::Ablate { mode, config, fold, seeds, data_dir, out } => {
            let cfg = experiment_with_data(ExperimentConfig::load(&config)?, data_dir.as_deref())?;
            let data = load_dataset(&cfg)?;
            let folds = if fold.is_empty() { (0..data.manifest.folds).collect() } else { fold };
            let seed_list: Vec<u64> = (0..seeds.max(1)).map(|i| cfg.train.seed + i).collect();
            let mut reports: Vec<VariantReport> = Vec::new();
            for variant in ablation_variants(mode, &cfg.model, &cfg.train) {
                let report = run_variant(&data, &variant, &folds, &seed_list, |name, f, s, r| {
                    log::info!("{name} fold {f} seed {s} epoch {} loss {:.6}", r.epoch, r.loss);
                })?;
                if let Some(m) = report.summary.get("sample_auprc") {
                    log::info!("{}: sample AUPRC mean {:?} std {:?}", report.name, m.mean, m.std);
                }
                reports.push(report);
            }
            #[derive(Serialize)]
            struct AblationReport<'a> {
                mode: &'a str,
                folds: Vec<usize>,
                seeds: Vec<u64>,
                variants: Vec<VariantReport>,
            }
            write_json(
                out.as_deref(),
                &AblationReport { mode: mode.name(), folds, seeds: seed_list, variants: reports },
            )?;
        }
    }
    Ok(())
}

/// 1 usage or config, 2 data, 3 numerical.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<CoreError>() {
            return e.exit_code() as u8;
        }
        if cause.is::<std::io::Error>() || cause.is::<serde_json::Error>() {
            return 2;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // core errors already embed their source in the message
            let mut msg = String::new();
            for cause in e.chain() {
                let text = cause.to_string();
                if !msg.ends_with(&text) {
                    if !msg.is_empty() {
                        msg.push_str(": ");
                    }
                    msg.push_str(&text);
                }
            }
            eprintln!("error: {msg}");
            ExitCode::from(exit_code(&e))
        }
    }
}
