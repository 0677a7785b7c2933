//! Command-line front end: `synth`, `train`, `score`, `eval`, `sweep`.
//!
//! Hyperparameters resolve as flag, then `--config` TOML key, then the
//! built-in default.

use std::fs::File;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::{Deserialize, Serialize};

use crate::data::{synth_generate, FeatureSet, Manifest, SynthConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::network::Checkpoint;
use crate::sampler::{
    karras_schedule, noise_bounds, NoiseSchedule, ScheduleConfig, DEFAULT_LMS_ORDER, DEFAULT_RHO,
    DEFAULT_STEPS,
};
use crate::scoring::{score_dataset, ScoreTable, ScoringConfig, DEFAULT_SCORE_BATCH};
use crate::training::{
    train_checkpoint, write_training_log, OptimizerConfig, TrainConfig, TrainNoiseConfig,
};

#[derive(Debug, Parser)]
#[command(name = "diffvad", version, about = "Diffusion-reconstruction video anomaly scoring")]
pub struct Cli {
    /// TOML file with hyperparameter defaults (flags take precedence).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic feature file and manifest.
    Synth(SynthArgs),
    /// Train a denoiser on unlabeled features.
    Train(TrainArgs),
    /// Score segments with a trained checkpoint.
    Score(ScoreArgs),
    /// Frame-level AUC of a score file against manifest labels.
    Eval(EvalArgs),
    /// Train per (p_mean, p_std) and evaluate every (t, k).
    Sweep(SweepArgs),
}

/// Hyperparameters shared by train, score and sweep.
#[derive(Clone, Debug, Default, Args, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyper {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, allow_hyphen_values = true)]
    pub p_mean: Option<f64>,
    #[arg(long)]
    pub p_std: Option<f64>,
    /// Explicit schedule bounds; otherwise derived from p_mean/p_std.
    #[arg(long)]
    pub sigma_min: Option<f64>,
    #[arg(long)]
    pub sigma_max: Option<f64>,
    #[arg(long)]
    pub rho: Option<f64>,
    /// Sampling steps T.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Start index t (default T−1).
    #[arg(long)]
    pub start_t: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    pub k: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub ema_decay: Option<f64>,
    /// Mean-center features before training (recorded in the checkpoint).
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub center: Option<bool>,
    /// LMS order.
    #[arg(long)]
    pub order: Option<usize>,
    /// Score with the raw weights instead of the EMA.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub no_ema: Option<bool>,
}

impl Hyper {
    /// Field-wise `self` else `other`.
    pub fn or(self, other: Hyper) -> Hyper {
        Hyper {
            seed: self.seed.or(other.seed),
            p_mean: self.p_mean.or(other.p_mean),
            p_std: self.p_std.or(other.p_std),
            sigma_min: self.sigma_min.or(other.sigma_min),
            sigma_max: self.sigma_max.or(other.sigma_max),
            rho: self.rho.or(other.rho),
            steps: self.steps.or(other.steps),
            start_t: self.start_t.or(other.start_t),
            k: self.k.or(other.k),
            batch_size: self.batch_size.or(other.batch_size),
            epochs: self.epochs.or(other.epochs),
            lr: self.lr.or(other.lr),
            ema_decay: self.ema_decay.or(other.ema_decay),
            center: self.center.or(other.center),
            order: self.order.or(other.order),
            no_ema: self.no_ema.or(other.no_ema),
        }
    }

    pub fn load(path: &Path) -> Result<Hyper> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text)
            .map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let d = TrainConfig::default();
        let cfg = TrainConfig {
            noise: TrainNoiseConfig::new(
                self.p_mean.unwrap_or(d.noise.p_mean),
                self.p_std.unwrap_or(d.noise.p_std),
            )?,
            optim: OptimizerConfig {
                base_lr: self.lr.unwrap_or(d.optim.base_lr),
                ema_decay: self.ema_decay.unwrap_or(d.optim.ema_decay),
                ..d.optim
            },
            epochs: self.epochs.unwrap_or(d.epochs),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            seed: self.seed(),
            center: self.center.unwrap_or(d.center),
            ..d
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Schedule bounds: explicit overrides win; a missing side comes from
    /// `noise_bounds` of the given (or fallback) training noise.
    pub fn schedule_config(&self, fallback: TrainNoiseConfig) -> Result<ScheduleConfig> {
        let noise = TrainNoiseConfig::new(
            self.p_mean.unwrap_or(fallback.p_mean),
            self.p_std.unwrap_or(fallback.p_std),
        )?;
        let (lo, hi) = noise_bounds(&noise);
        ScheduleConfig::new(
            self.steps.unwrap_or(DEFAULT_STEPS),
            self.sigma_min.unwrap_or(lo),
            self.sigma_max.unwrap_or(hi),
            self.rho.unwrap_or(DEFAULT_RHO),
        )
    }

    pub fn scoring_config(&self) -> ScoringConfig {
        let steps = self.steps.unwrap_or(DEFAULT_STEPS);
        ScoringConfig {
            start_t: self.start_t.unwrap_or(steps.saturating_sub(1)),
            k: self.k.unwrap_or(1.0),
            batch_size: self.batch_size.unwrap_or(DEFAULT_SCORE_BATCH),
            order: self.order.unwrap_or(DEFAULT_LMS_ORDER),
        }
    }

    /// Argument checks that need no data: schedule shape and `t < T`.
    fn check_sampling(&self) -> Result<()> {
        let steps = self.steps.unwrap_or(DEFAULT_STEPS);
        if steps < 2 {
            return Err(Error::InvalidArgument(format!("--steps must be >= 2, got {steps}")));
        }
        let cfg = self.scoring_config();
        if cfg.start_t >= steps {
            return Err(Error::InvalidArgument(format!(
                "--start-t {} must be below --steps {steps}",
                cfg.start_t
            )));
        }
        if cfg.batch_size < 2 {
            return Err(Error::InvalidArgument("--batch-size must be >= 2 for scoring".into()));
        }
        if cfg.order == 0 {
            return Err(Error::InvalidArgument("--order must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Args)]
pub struct DataPaths {
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
}

impl DataPaths {
    /// Loads features and a label-free copy of the manifest.
    fn load_unlabeled(&self) -> Result<FeatureSet> {
        let mut fs = FeatureSet::load(&self.features, &self.manifest)?;
        fs.manifest = fs.manifest.without_labels();
        Ok(fs)
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory for `features.vadf` and `manifest.json`.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    #[arg(long)]
    pub features: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Total segments (normal + anomalous).
    #[arg(long, default_value_t = 21_000)]
    pub segments: usize,
    /// Fraction of segments drawn from the shifted cluster.
    #[arg(long, default_value_t = 1.0 / 21.0)]
    pub anomaly_fraction: f64,
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    #[arg(long, default_value_t = 3.0)]
    pub shift: f64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataPaths,
    /// Checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    /// Training log CSV (default: checkpoint path with `.log.csv`).
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[command(flatten)]
    pub hyper: Hyper,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[command(flatten)]
    pub data: DataPaths,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Score CSV path.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub hyper: Hyper,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Score CSV from `score`.
    #[arg(long)]
    pub scores: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// JSON report path (also printed to stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Optional per-frame CSV.
    #[arg(long)]
    pub frames: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub data: DataPaths,
    /// Results CSV.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_value = "-1.2")]
    pub p_means: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "1.2")]
    pub p_stds: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4,5,6,7,8,9")]
    pub ts: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.3,0.5,0.7,1")]
    pub ks: Vec<f64>,
    #[command(flatten)]
    pub hyper: Hyper,
}

pub fn run(cli: Cli) -> Result<()> {
    let file = match &cli.config {
        Some(p) => Hyper::load(p)?,
        None => Hyper::default(),
    };
    match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Train(a) => cmd_train(&a, a.hyper.clone().or(file)),
        Command::Score(a) => cmd_score(&a, a.hyper.clone().or(file)),
        Command::Eval(a) => cmd_eval(&a).map(|_| ()),
        Command::Sweep(a) => cmd_sweep(&a, a.hyper.clone().or(file)),
    }
}

pub fn cmd_synth(a: &SynthArgs) -> Result<()> {
    if !(0.0..=0.5).contains(&a.anomaly_fraction) {
        return Err(Error::InvalidArgument(format!(
            "--anomaly-fraction must be in [0, 0.5], got {}",
            a.anomaly_fraction
        )));
    }
    let n_anomalous = (a.anomaly_fraction * a.segments as f64).round() as usize;
    let cfg = SynthConfig {
        n_normal: a.segments - n_anomalous,
        n_anomalous,
        dim: a.dim,
        shift: a.shift,
        seed: a.seed,
        ..SynthConfig::default()
    };
    let fs = synth_generate(&cfg)?;
    let features = a.features.clone().unwrap_or_else(|| a.out.join("features.vadf"));
    let manifest = a.manifest.clone().unwrap_or_else(|| a.out.join("manifest.json"));
    if let Some(dir) = features.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs.save(&features, &manifest)?;
    info!(
        "wrote {} segments ({} anomalous) to {} and {}",
        fs.len(),
        n_anomalous,
        features.display(),
        manifest.display()
    );
    Ok(())
}

fn default_log_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".log.csv");
    PathBuf::from(s)
}

pub fn cmd_train(a: &TrainArgs, hyper: Hyper) -> Result<()> {
    let cfg = hyper.train_config()?;
    let fs = a.data.load_unlabeled()?;
    info!("training on {} segments of dim {}", fs.len(), fs.dim());
    let (ck, log) = train_checkpoint(&fs.features, &cfg, |_| {})?;
    ck.save(&a.out)?;
    write_training_log(&a.log.clone().unwrap_or_else(|| default_log_path(&a.out)), &log)
}

fn schedule_for(hyper: &Hyper, ck: &Checkpoint) -> Result<NoiseSchedule> {
    let trained = TrainNoiseConfig::new(ck.meta.p_mean, ck.meta.p_std)?;
    karras_schedule(&hyper.schedule_config(trained)?)
}

pub fn cmd_score(a: &ScoreArgs, hyper: Hyper) -> Result<()> {
    hyper.check_sampling()?;
    let ck = Checkpoint::load(&a.checkpoint)?;
    let fs = a.data.load_unlabeled()?;
    let schedule = schedule_for(&hyper, &ck)?;
    let cfg = hyper.scoring_config();
    info!("scoring {} segments from t = {} (sigma {:.4e})", fs.len(), cfg.start_t, schedule.sigma(cfg.start_t));
    let table = score_dataset(&ck, &schedule, &cfg, &fs, !hyper.no_ema.unwrap_or(false), hyper.seed())?;
    table.write_csv(&a.out)
}

#[derive(Serialize)]
struct ReportJson<'a> {
    #[serde(flatten)]
    report: &'a EvalReport,
    config: EvalEcho<'a>,
}

#[derive(Serialize)]
struct EvalEcho<'a> {
    scores: &'a Path,
    manifest: &'a Path,
    segment_len: usize,
    videos: usize,
    batches: usize,
    thresholds: Vec<f64>,
}

pub fn cmd_eval(a: &EvalArgs) -> Result<EvalReport> {
    let table = ScoreTable::read_csv(&a.scores)?;
    let manifest = Manifest::read(&a.manifest)?;
    if !manifest.has_labels() {
        return Err(Error::Manifest(format!(
            "{} carries no frame labels; eval needs a labeled manifest",
            a.manifest.display()
        )));
    }
    let report = evaluate(&table, &manifest)?;
    let json = serde_json::to_string_pretty(&ReportJson {
        report: &report,
        config: EvalEcho {
            scores: &a.scores,
            manifest: &a.manifest,
            segment_len: manifest.segment_len,
            videos: manifest.videos.len(),
            batches: table.batches.len(),
            thresholds: table.batches.iter().map(|b| b.l_th).collect(),
        },
    })?;
    println!("{json}");
    if let Some(out) = &a.out {
        crate::binio::write_atomic(out, format!("{json}\n").as_bytes())?;
    }
    if let Some(frames) = &a.frames {
        report.write_frames_csv(frames)?;
    }
    Ok(report)
}

#[derive(Debug, Serialize)]
struct SweepRow {
    p_mean: f64,
    p_std: f64,
    t: String,
    k: f64,
    auc: f64,
    flag_auc: f64,
}

pub fn cmd_sweep(a: &SweepArgs, hyper: Hyper) -> Result<()> {
    if a.p_means.is_empty() || a.p_stds.is_empty() || a.ts.is_empty() || a.ks.is_empty() {
        return Err(Error::InvalidArgument("every sweep list must be nonempty".into()));
    }
    for &t in &a.ts {
        Hyper { start_t: Some(t), ..hyper.clone() }.check_sampling()?;
    }
    let labeled = FeatureSet::load(&a.data.features, &a.data.manifest)?;
    if !labeled.manifest.has_labels() {
        return Err(Error::Manifest("sweep needs a labeled manifest".into()));
    }
    let unlabeled = FeatureSet {
        features: labeled.features.clone(),
        manifest: labeled.manifest.without_labels(),
    };

    let file = File::create(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let mut w = csv::Writer::from_writer(file);
    let mut emit = |row: SweepRow| -> Result<()> {
        w.serialize(&row)?;
        w.flush().map_err(|e| Error::io(&a.out, e))
    };

    for &p_mean in &a.p_means {
        for &p_std in &a.p_stds {
            let cell = Hyper {
                p_mean: Some(p_mean),
                p_std: Some(p_std),
                ..hyper.clone()
            };
            let cfg = cell.train_config()?;
            info!("sweep: training p_mean {p_mean} p_std {p_std}");
            let (ck, _) = train_checkpoint(&unlabeled.features, &cfg, |_| {})?;
            let schedule = schedule_for(&cell, &ck)?;
            // Best over t, per k.
            let mut best = vec![(f64::NEG_INFINITY, f64::NEG_INFINITY); a.ks.len()];
            for &t in &a.ts {
                let base = Hyper { start_t: Some(t), ..cell.clone() }.scoring_config();
                let table = score_dataset(
                    &ck,
                    &schedule,
                    &base,
                    &unlabeled,
                    !cell.no_ema.unwrap_or(false),
                    cell.seed(),
                )?;
                for (ki, &k) in a.ks.iter().enumerate() {
                    let report = evaluate(&table.rethreshold(k)?, &labeled.manifest)?;
                    let b = &mut best[ki];
                    *b = (b.0.max(report.auc), b.1.max(report.flag_auc));
                    emit(SweepRow {
                        p_mean,
                        p_std,
                        t: t.to_string(),
                        k,
                        auc: report.auc,
                        flag_auc: report.flag_auc,
                    })?;
                }
            }
            for (ki, &k) in a.ks.iter().enumerate() {
                emit(SweepRow {
                    p_mean,
                    p_std,
                    t: "best".into(),
                    k,
                    auc: best[ki].0,
                    flag_auc: best[ki].1,
                })?;
            }
        }
    }
    Ok(())
}
