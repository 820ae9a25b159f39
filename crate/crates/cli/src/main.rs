use clap::{Parser, Subcommand};
use delaylab::models::ModelKind;
use delaylab_cli::error::{CliError, CliResult, Context};
use delaylab_cli::run::{self, RunRequest, SimulationSummary};
use delaylab_cli::{report, sweep, ExperimentConfig};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "delaylab", version, about = "Sequence models as delay embeddings of Lorenz dynamics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct Common {
    /// Experiment config (TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Use the reduced desk-scale preset.
    #[arg(long)]
    desk_scale: bool,
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> CliResult<ExperimentConfig> {
        Ok(ExperimentConfig::load_or_default(self.config.as_deref())?.with_desk_scale(self.desk_scale))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset container.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Override the observation noise variance.
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Train one model with checkpoints and metrics.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset container; simulated from the config when omitted.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, default_value = "lru")]
        kind: ModelKind,
        #[arg(long, default_value_t = 25)]
        dim: usize,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Continue from the latest checkpoint in --out.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        quiet: bool,
    },
    /// Run every cell of the configured grid.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Accepted for symmetry; completed cells are always skipped.
        #[arg(long)]
        resume: bool,
    },
    /// Tables and figures from run records.
    Report {
        /// Directory searched recursively for records.
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summary of a record, run directory or container file.
    Inspect { path: PathBuf },
}

fn execute(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Simulate { common, out, noise } => {
            let mut cfg = common.load()?;
            if let Some(s) = common.seed {
                cfg.sim.seed = s;
            }
            if let Some(v) = noise {
                cfg.sim.noise_variance = v;
            }
            let data = run::simulate(&cfg)?;
            data.save(&out).ctx(&out.display().to_string())?;
            let summary = SimulationSummary::of(&data)?;
            println!("{}", serde_json::to_string_pretty(&summary).ctx("json")?);
        }
        Command::Train { common, dataset, kind, dim, epochs, out, resume, quiet } => {
            let mut cfg = common.load()?;
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            cfg.validate()?;
            let seed = common.seed.unwrap_or(cfg.train.seed);
            let data = run::dataset_for(&cfg, dataset.as_deref())?;
            let spec = cfg.model.spec(kind, dim);
            let req = RunRequest { spec, seed, out: out.clone(), resume, verbose: !quiet };
            let record = run::train_run(&cfg, &data, &req)?;
            match record.final_mase {
                Some(m) => println!("final_mase={m} included={} record={}", record.included, out.join(run::RECORD_FILE).display()),
                None => println!("final_mase=absent record={}", out.join(run::RECORD_FILE).display()),
            }
        }
        Command::Sweep { common, out, jobs, resume: _ } => {
            let mut cfg = common.load()?;
            if let Some(s) = common.seed {
                cfg.sweep.base_seed = s;
            }
            let out = out.unwrap_or_else(|| cfg.output.dir.clone());
            let outcome = sweep::sweep(&cfg, &out, jobs, true)?;
            println!("records={} skipped={} failed={}", outcome.records.len(), outcome.skipped, outcome.failures.len());
            for (name, e) in &outcome.failures {
                eprintln!("{} cell={name}", e.machine_line());
            }
            let failed = outcome.failures.len();
            if let Some((name, e)) = outcome.failures.into_iter().next() {
                return Err(CliError::runtime("sweep", format!("{failed} cells failed; first {name}: {e}")));
            }
        }
        Command::Report { records, out } => {
            let files = report::report(&records, &out)?;
            for name in files.tables.keys() {
                println!("{}", out.join(name).display());
            }
        }
        Command::Inspect { path } => print!("{}", run::inspect(&path)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { delaylab_cli::error::EXIT_VALIDATION } else { 0 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.machine_line());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
