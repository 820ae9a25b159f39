//! Architecture × dimension × noise × seed grids.

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult, Context};
use crate::run::{self, RunRecord, RunRequest, RECORD_FILE};
use delaylab::models::ModelKind;
use delaylab::{ModelSpec, SimConfig, TrajectoryDataset};
use rayon::prelude::*;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub spec: ModelSpec,
    pub noise_variance: f64,
    pub seed: u64,
}

impl Cell {
    pub fn name(&self) -> String {
        format!("{}_d{}_noise{}_seed{}", self.spec.kind, self.spec.d, self.noise_variance, self.seed)
    }
}

pub fn cells(cfg: &ExperimentConfig) -> Vec<Cell> {
    let mut kinds = cfg.sweep.kinds.clone();
    if cfg.sweep.include_delay_mlp && !kinds.contains(&ModelKind::DelayMlp) {
        kinds.push(ModelKind::DelayMlp);
    }
    let mut out = Vec::new();
    for &kind in &kinds {
        for &d in &cfg.sweep.dims {
            for &noise_variance in &cfg.sweep.noise_variances {
                for seed in cfg.sweep.seeds() {
                    out.push(Cell { spec: cfg.model.spec(kind, d), noise_variance, seed });
                }
            }
        }
    }
    out
}

pub fn dataset_path(out: &Path, noise: f64) -> PathBuf {
    out.join("datasets").join(format!("noise{noise}.dlc"))
}

pub fn run_dir(out: &Path, cell: &Cell) -> PathBuf {
    out.join("runs").join(cell.name())
}

fn sim_for(cfg: &ExperimentConfig, noise: f64) -> SimConfig {
    SimConfig { noise_variance: noise, ..cfg.sim.clone() }
}

/// Load or create the shared dataset for each noise level.
fn datasets(cfg: &ExperimentConfig, out: &Path) -> CliResult<BTreeMap<u64, TrajectoryDataset>> {
    let mut map = BTreeMap::new();
    for &noise in &cfg.sweep.noise_variances {
        let path = dataset_path(out, noise);
        let sim = sim_for(cfg, noise);
        let data = match TrajectoryDataset::load(&path) {
            Ok(d) if d.config == sim => d,
            _ => {
                let d = delaylab::dynamics::generate_dataset(&sim, &delaylab::LorenzParams::default()).ctx("simulate")?;
                d.save(&path).ctx(&path.display().to_string())?;
                d
            }
        };
        map.insert(noise.to_bits(), data);
    }
    Ok(map)
}

#[derive(Debug)]
pub struct SweepOutcome {
    pub records: Vec<RunRecord>,
    pub skipped: usize,
    pub failures: Vec<(String, CliError)>,
}

/// Run every cell; cells whose record already exists are skipped.
pub fn sweep(cfg: &ExperimentConfig, out: &Path, jobs: usize, verbose: bool) -> CliResult<SweepOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(out).ctx(&out.display().to_string())?;
    let data = datasets(cfg, out)?;
    let all = cells(cfg);
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build().ctx("thread pool")?;
    let results: Vec<(String, bool, CliResult<RunRecord>)> = pool.install(|| {
        all.par_iter()
            .map(|cell| {
                let dir = run_dir(out, cell);
                let record_path = dir.join(RECORD_FILE);
                if let Ok(r) = RunRecord::load(&record_path) {
                    return (cell.name(), true, Ok(r));
                }
                let dataset = &data[&cell.noise_variance.to_bits()];
                let req = RunRequest { spec: cell.spec.clone(), seed: cell.seed, out: dir, resume: true, verbose: false };
                if verbose {
                    eprintln!("cell {} start", cell.name());
                }
                let r = run::train_run(cfg, dataset, &req);
                if verbose {
                    eprintln!("cell {} {}", cell.name(), if r.is_ok() { "done" } else { "failed" });
                }
                (cell.name(), false, r)
            })
            .collect()
    });
    let mut outcome = SweepOutcome { records: Vec::new(), skipped: 0, failures: Vec::new() };
    for (name, skipped, r) in results {
        match r {
            Ok(rec) => {
                outcome.skipped += skipped as usize;
                outcome.records.push(rec);
            }
            Err(e) => outcome.failures.push((name, e)),
        }
    }
    Ok(outcome)
}

/// All records below `dir`, sorted by path.
pub fn find_records(dir: &Path) -> CliResult<Vec<(PathBuf, RunRecord)>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let entries = std::fs::read_dir(&d).ctx(&d.display().to_string())?;
        for e in entries {
            let p = e.ctx("read_dir")?.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n == RECORD_FILE) {
                out.push((p.parent().map(Path::to_path_buf).unwrap_or_default(), RunRecord::load(&p)?));
            }
        }
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_combinatorics() {
        let mut cfg = ExperimentConfig::default();
        cfg.sweep.dims = vec![10, 25];
        cfg.sweep.noise_variances = vec![0.0, 0.1];
        cfg.sweep.seeds_per_cell = 3;
        let c = cells(&cfg);
        assert_eq!(c.len(), 24);
        let mut names: Vec<_> = c.iter().map(Cell::name).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), 24);
        cfg.sweep.include_delay_mlp = true;
        let c = cells(&cfg);
        assert_eq!(c.len(), 36);
        assert!(c.iter().any(|x| x.spec.kind == ModelKind::DelayMlp));
    }

    #[test]
    fn sweep_validates_before_running() {
        let mut cfg = ExperimentConfig::default();
        cfg.sweep.dims.clear();
        let dir = tempfile::tempdir().unwrap();
        let e = sweep(&cfg, dir.path(), 1, false).unwrap_err();
        assert_eq!(e.exit_code(), crate::error::EXIT_VALIDATION);
    }
}
