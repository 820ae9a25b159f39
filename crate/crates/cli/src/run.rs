//! Dataset generation and single training runs.

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult, Context};
use delaylab::container::{write_atomic, Container};
use delaylab::dynamics::generate_dataset;
use delaylab::embedmetrics::{collect_embeddings, metric_suite, CSV_HEADER};
use delaylab::numerics::{pca, Tensor};
use delaylab::seed;
use delaylab::training::{train_with, EpochStats, TrainError, TrainObserver, TrainState};
use delaylab::{CheckpointRecord, LorenzParams, MetricConfig, MetricReport, ModelParams, ModelSpec, TrajectoryDataset};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub const RECORD_FILE: &str = "record.json";
pub const PROGRESS_FILE: &str = "progress.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const PCS_FILE: &str = "embedding_pcs.csv";
pub const TIMING_FILE: &str = "timing.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";
const PC_ROWS: usize = 2000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunFiles {
    pub metrics: String,
    pub train_log: String,
    pub embedding_pcs: Option<String>,
    pub timing: String,
    pub checkpoints: Vec<String>,
}

/// Immutable summary of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub schema_version: u32,
    pub status: RunStatus,
    pub error: Option<String>,
    pub config: ExperimentConfig,
    pub model: ModelSpec,
    pub seed: u64,
    pub noise_variance: f64,
    pub epochs_completed: usize,
    pub final_mase: Option<f64>,
    /// Final validation MASE below 1.
    pub included: bool,
    pub reports: Vec<MetricReport>,
    pub checkpoints: Vec<CheckpointRecord>,
    pub files: RunFiles,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Complete,
    Diverged,
}

impl RunRecord {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).ctx(&path.display().to_string())?;
        serde_json::from_str(&text).ctx(&path.display().to_string())
    }

    pub fn final_report(&self) -> Option<&MetricReport> {
        self.reports.last()
    }
}

/// Rewritten after every checkpoint; lets `--resume` pick up where a run stopped.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
struct Progress {
    reports: Vec<MetricReport>,
    log: Vec<EpochStats>,
    checkpoints: Vec<CheckpointRecord>,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).ctx("json")?;
    text.push('\n');
    write_atomic(path, text.as_bytes()).ctx(&path.display().to_string())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).ctx(&path.display().to_string())?;
    serde_json::from_str(&text).ctx(&path.display().to_string())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SimulationSummary {
    pub trajectories: usize,
    pub retained_steps: usize,
    pub train: usize,
    pub validation: usize,
    pub state_participation_ratio: f64,
    pub target_noise_variance: f64,
    pub observed_noise_variance: f64,
}

impl SimulationSummary {
    pub fn of(data: &TrajectoryDataset) -> CliResult<Self> {
        let mut rows = Vec::new();
        let mut residual = Vec::new();
        let stride = (data.trajectories.len() / 40).max(1);
        for tr in data.trajectories.iter().step_by(stride) {
            for s in &tr.states {
                rows.extend_from_slice(s);
            }
        }
        for tr in &data.trajectories {
            residual.extend(tr.observed.iter().zip(&tr.states).map(|(o, s)| o - s[0]));
        }
        let n = rows.len() / 3;
        let pr = pca(&Tensor::matrix(n, 3, rows)).and_then(|p| p.participation_ratio()).ctx("pca")?;
        Ok(Self {
            trajectories: data.trajectories.len(),
            retained_steps: data.trajectories.first().map_or(0, |t| t.len()),
            train: data.train.len(),
            validation: data.validation.len(),
            state_participation_ratio: pr,
            target_noise_variance: data.config.noise_variance,
            observed_noise_variance: residual.iter().map(|r| r * r).sum::<f64>() / residual.len().max(1) as f64,
        })
    }
}

pub fn simulate(cfg: &ExperimentConfig) -> CliResult<TrajectoryDataset> {
    cfg.sim.validate().map_err(|e| CliError::validation("sim", e.to_string()))?;
    generate_dataset(&cfg.sim, &LorenzParams::default()).ctx("simulate")
}

/// Load a dataset file, or simulate one from the config when `path` is absent.
pub fn dataset_for(cfg: &ExperimentConfig, path: Option<&Path>) -> CliResult<TrajectoryDataset> {
    match path {
        Some(p) => TrajectoryDataset::load(p).ctx(&p.display().to_string()),
        None => simulate(cfg),
    }
}

fn metric_config(cfg: &ExperimentConfig, run_seed: u64) -> MetricConfig {
    MetricConfig { seed: seed::derive(cfg.metrics.seed, run_seed), ..cfg.metrics.clone() }
}

fn checkpoint_name(epoch: usize) -> String {
    format!("{CHECKPOINT_DIR}/epoch_{epoch:05}.dlc")
}

fn metrics_csv(reports: &[MetricReport]) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    for r in reports {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

fn train_log_csv(log: &[EpochStats]) -> String {
    let mut s = String::from("epoch,train_loss,validation_mase\n");
    for e in log {
        let _ = writeln!(s, "{},{},{}", e.epoch, e.train_loss, e.validation_mase);
    }
    s
}

struct RunObserver<'a> {
    dir: &'a Path,
    dataset: &'a TrajectoryDataset,
    metrics: MetricConfig,
    seed: u64,
    progress: Progress,
    verbose: bool,
}

impl RunObserver<'_> {
    fn flush(&self) -> CliResult<()> {
        write_atomic(&self.dir.join(METRICS_FILE), metrics_csv(&self.progress.reports).as_bytes()).ctx("metrics.csv")?;
        write_atomic(&self.dir.join(TRAIN_LOG_FILE), train_log_csv(&self.progress.log).as_bytes()).ctx("train_log.csv")?;
        write_json(&self.dir.join(PROGRESS_FILE), &self.progress)
    }
}

impl TrainObserver for RunObserver<'_> {
    fn on_epoch(&mut self, stats: &EpochStats) -> Result<(), String> {
        self.progress.log.push(*stats);
        if self.verbose {
            eprintln!("epoch {} loss {:.6} val_mase {:.4}", stats.epoch, stats.train_loss, stats.validation_mase);
        }
        Ok(())
    }

    fn on_checkpoint(&mut self, state: &TrainState, record: &mut CheckpointRecord) -> Result<(), String> {
        let name = checkpoint_name(record.epoch);
        state.save(&self.dir.join(&name)).map_err(|e| e.to_string())?;
        record.snapshot = Some(name);
        let report = metric_suite(&state.params, self.dataset, record.epoch, self.seed, &self.metrics)
            .map_err(|e| e.to_string())?;
        self.progress.reports.push(report);
        self.progress.checkpoints.push(record.clone());
        self.flush().map_err(|e| e.to_string())
    }
}

fn write_pcs(dir: &Path, model: &ModelParams, dataset: &TrajectoryDataset, metrics: &MetricConfig) -> Option<String> {
    let cfg = MetricConfig { max_points: PC_ROWS, ..metrics.clone() };
    let sample = collect_embeddings(model, dataset, &cfg).ok()?;
    let p = pca(&sample.o).ok()?;
    let k = sample.dim().min(4);
    let proj = p.project(&sample.o, k);
    let mut s = String::new();
    let cols: Vec<String> = (1..=k).map(|i| format!("pc{i}")).collect();
    let _ = writeln!(s, "trajectory,time,{},x,y,z", cols.join(","));
    for r in 0..sample.len() {
        let pcs: Vec<String> = (0..k).map(|c| format!("{}", proj.at(r, c))).collect();
        let st = sample.true_states.row(r);
        let _ = writeln!(s, "{},{},{},{},{},{}", sample.traj_ids[r], sample.times[r], pcs.join(","), st[0], st[1], st[2]);
    }
    write_atomic(&dir.join(PCS_FILE), s.as_bytes()).ok()?;
    Some(PCS_FILE.to_string())
}

/// Options for one training run.
#[derive(Clone, Debug)]
pub struct RunRequest {
    pub spec: ModelSpec,
    pub seed: u64,
    pub out: PathBuf,
    pub resume: bool,
    pub verbose: bool,
}

/// Train one model with checkpoints, metrics and a final record.
pub fn train_run(cfg: &ExperimentConfig, dataset: &TrajectoryDataset, req: &RunRequest) -> CliResult<RunRecord> {
    let started = Instant::now();
    let dir = req.out.as_path();
    std::fs::create_dir_all(dir.join(CHECKPOINT_DIR)).ctx(&dir.display().to_string())?;
    req.spec.validate().map_err(|e| CliError::validation("model", e.to_string()))?;
    let train_cfg = delaylab::TrainConfig { seed: req.seed, ..cfg.train.clone() };
    train_cfg.validate().map_err(|e| CliError::validation("train", e.to_string()))?;
    let metrics = metric_config(cfg, req.seed);

    let progress_path = dir.join(PROGRESS_FILE);
    let (state, progress) = match (req.resume, progress_path.exists()) {
        (true, true) => {
            let progress: Progress = read_json(&progress_path)?;
            let state = match progress.checkpoints.last().and_then(|c| c.snapshot.clone()) {
                Some(name) => TrainState::load(&dir.join(name)).ctx("resume")?,
                None => fresh_state(&req.spec, req.seed, &train_cfg)?,
            };
            if state.params.spec != req.spec {
                return Err(CliError::validation("resume", "checkpoint model differs from requested model"));
            }
            let epoch = state.epoch;
            let progress = Progress {
                reports: progress.reports.into_iter().filter(|r| r.epoch <= epoch).collect(),
                log: progress.log.into_iter().filter(|e| e.epoch <= epoch).collect(),
                checkpoints: progress.checkpoints.into_iter().filter(|c| c.epoch <= epoch).collect(),
            };
            (state, progress)
        }
        _ => {
            let state = fresh_state(&req.spec, req.seed, &train_cfg)?;
            let initial = metric_suite(&state.params, dataset, 0, req.seed, &metrics).ctx("metrics")?;
            (state, Progress { reports: vec![initial], ..Progress::default() })
        }
    };

    let mut observer = RunObserver { dir, dataset, metrics: metrics.clone(), seed: req.seed, progress, verbose: req.verbose };
    observer.flush()?;
    let result = train_with(state, dataset, &train_cfg, &mut observer);
    let (status, error, final_state) = match result {
        Ok(out) => (RunStatus::Complete, None, Some(out.state)),
        Err(TrainError::Diverged { epoch, reason, last_good, .. }) => {
            (RunStatus::Diverged, Some(format!("diverged at epoch {epoch}: {reason}")), last_good.map(|b| *b))
        }
        Err(e) => return Err(CliError::runtime("train", e)),
    };
    let progress = observer.progress;
    let embedding_pcs = final_state.as_ref().and_then(|s| write_pcs(dir, &s.params, dataset, &metrics));
    let final_mase = match status {
        RunStatus::Complete => progress.log.last().map(|e| e.validation_mase).or(progress.reports.last().map(|r| r.mase)),
        RunStatus::Diverged => None,
    };
    let record = RunRecord {
        schema_version: 1,
        status,
        error: error.clone(),
        config: cfg.clone(),
        model: req.spec.clone(),
        seed: req.seed,
        noise_variance: dataset.config.noise_variance,
        epochs_completed: progress.log.last().map_or(0, |e| e.epoch),
        final_mase,
        included: final_mase.is_some_and(|m| m < 1.0),
        reports: progress.reports.clone(),
        checkpoints: progress.checkpoints.clone(),
        files: RunFiles {
            metrics: METRICS_FILE.into(),
            train_log: TRAIN_LOG_FILE.into(),
            embedding_pcs,
            timing: TIMING_FILE.into(),
            checkpoints: progress.checkpoints.iter().filter_map(|c| c.snapshot.clone()).collect(),
        },
    };
    write_json(&dir.join(TIMING_FILE), &serde_json::json!({ "wall_seconds": started.elapsed().as_secs_f64() }))?;
    write_json(&dir.join(RECORD_FILE), &record)?;
    match error {
        Some(msg) => Err(CliError::runtime("train", msg)),
        None => Ok(record),
    }
}

fn fresh_state(spec: &ModelSpec, seed_value: u64, train: &delaylab::TrainConfig) -> CliResult<TrainState> {
    let params = ModelParams::init(spec, seed::derive(seed_value, seed::stream::INIT)).ctx("init")?;
    Ok(TrainState::new(params, train.learning_rate, seed_value))
}

/// Human-readable summary of a record, run directory or container file.
pub fn inspect(path: &Path) -> CliResult<String> {
    let mut s = String::new();
    let record_path = if path.is_dir() { path.join(RECORD_FILE) } else { path.to_path_buf() };
    if record_path.extension().is_some_and(|e| e == "json") {
        let r = RunRecord::load(&record_path)?;
        let _ = writeln!(s, "record {}", record_path.display());
        let _ = writeln!(s, "model {} d={} seed={} noise={}", r.model.kind, r.model.d, r.seed, r.noise_variance);
        let _ = writeln!(s, "status {:?} epochs {}", r.status, r.epochs_completed);
        match r.final_mase {
            Some(m) => {
                let _ = writeln!(s, "final_mase {m:.6} included {}", r.included);
            }
            None => {
                let _ = writeln!(s, "final_mase absent");
            }
        }
        let _ = writeln!(s, "{CSV_HEADER}");
        for rep in &r.reports {
            let _ = writeln!(s, "{}", rep.csv_row());
        }
        return Ok(s);
    }
    let c = Container::load(path).ctx(&path.display().to_string())?;
    let _ = writeln!(s, "container {} kind={}", path.display(), c.kind);
    let _ = writeln!(s, "meta {}", serde_json::to_string(&c.meta).ctx("json")?);
    for (name, shape) in c.summary() {
        let _ = writeln!(s, "array {name} {shape:?}");
    }
    Ok(s)
}
