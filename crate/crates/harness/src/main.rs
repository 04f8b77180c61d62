use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use blind_mimo_harness::config::ExperimentConfig;
use blind_mimo_harness::experiment::{run_experiment, Prepared};
use blind_mimo_harness::output::{write_rows, write_summary, write_trials};
use blind_mimo_harness::sweep::{self, Link};
use clap::{Args, Parser, Subcommand};

/// Blind MIMO channel and source recovery experiments.
#[derive(Parser)]
#[command(name = "blind-mimo", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every SNR point and trial of a config and write per-trial rows.
    Run {
        config: PathBuf,
        #[command(flatten)]
        flags: Flags,
    },
    /// Step one numeric config field over a list of values.
    Sweep {
        config: PathBuf,
        /// Dotted field path, e.g. `dims.n_t` or `experiment.snr_db`.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, allow_hyphen_values = true)]
        values: String,
        /// `path=expression` recomputed at every point, e.g. `dims.n_r=8*dims.n_t`.
        #[arg(long = "link")]
        links: Vec<String>,
        #[command(flatten)]
        flags: Flags,
    },
    /// Check a config and list every violation.
    Validate { config: PathBuf },
}

#[derive(Args)]
struct Flags {
    /// Master seed (overrides the config).
    #[arg(long, env = "BLIND_MIMO_SEED")]
    seed: Option<u64>,
    #[arg(long)]
    trials: Option<usize>,
    /// Output CSV (summary CSV for sweeps).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; 0 uses every core.
    #[arg(long)]
    workers: Option<usize>,
    /// Directory for per-trial PVD step traces.
    #[arg(long)]
    diagnostics: Option<PathBuf>,
}

enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

fn config_err<T>(r: anyhow::Result<T>) -> Result<T, Failure> {
    r.map_err(Failure::Config)
}

fn runtime_err<T>(r: anyhow::Result<T>) -> Result<T, Failure> {
    r.map_err(Failure::Runtime)
}

fn base_dir(config: &Path) -> PathBuf {
    config
        .parent()
        .map_or_else(|| PathBuf::from("."), Path::to_path_buf)
}

fn load(config: &Path, flags: &Flags) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(s) = flags.seed {
        cfg.experiment.seed = s;
    }
    if let Some(t) = flags.trials {
        cfg.experiment.trials = t;
    }
    if let Some(w) = flags.workers {
        cfg.experiment.workers = w;
    }
    Ok(cfg)
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| {
        format!("cannot create {}", path.display())
    })?))
}

fn run(config: &Path, flags: &Flags) -> Result<(), Failure> {
    let cfg = config_err(load(config, flags))?;
    let out = flags
        .out
        .clone()
        .unwrap_or_else(|| cfg.experiment.output.clone());
    let prepared = config_err(Prepared::new(cfg, &base_dir(config)))?
        .with_diagnostics(flags.diagnostics.clone());
    let rows = runtime_err(run_experiment(&prepared))?;
    runtime_err(write_rows(create(&out).map_err(Failure::Runtime)?, &rows).map_err(Into::into))?;
    let failed = rows.iter().filter(|r| r.error.is_some()).count();
    eprintln!(
        "{} rows ({failed} failed) written to {}",
        rows.len(),
        out.display()
    );
    Ok(())
}

fn run_sweep(
    config: &Path,
    param: &str,
    values: &str,
    links: &[String],
    flags: &Flags,
) -> Result<(), Failure> {
    let cfg = config_err(load(config, flags))?;
    let values = config_err(sweep::parse_values(values))?;
    let links: Vec<Link> = config_err(links.iter().map(|l| l.parse()).collect())?;
    let out = flags
        .out
        .clone()
        .unwrap_or_else(|| cfg.experiment.output.clone());
    let points = config_err(sweep::plan(&cfg, param, &values, &links))?;
    let points = config_err(sweep::prepare(points, &base_dir(config)))?;
    let results = runtime_err(sweep::run(points, flags.diagnostics.as_deref()))?;

    let summary: Vec<_> = results.iter().flat_map(|p| p.summary()).collect();
    runtime_err(
        write_summary(create(&out).map_err(Failure::Runtime)?, &summary).map_err(Into::into),
    )?;
    let trials_out = sweep::trials_path(&out);
    let tagged: Vec<_> = results
        .iter()
        .flat_map(|p| p.rows.iter().map(move |r| (Some(p.label.as_str()), r)))
        .collect();
    runtime_err(
        write_trials(create(&trials_out).map_err(Failure::Runtime)?, &tagged).map_err(Into::into),
    )?;
    eprintln!(
        "{} summary rows written to {}, {} trial rows to {}",
        summary.len(),
        out.display(),
        tagged.len(),
        trials_out.display()
    );
    Ok(())
}

fn validate(config: &Path) -> Result<(), Failure> {
    let cfg = config_err(ExperimentConfig::load(config))?;
    let violations = cfg.validate();
    if !violations.is_empty() {
        for v in &violations {
            println!("{v}");
        }
        return Err(Failure::Config(anyhow::anyhow!(
            "{} violation(s)",
            violations.len()
        )));
    }
    config_err(Prepared::new(cfg, &base_dir(config)))?;
    println!("ok");
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Run { config, flags } => run(config, flags),
        Command::Sweep {
            config,
            param,
            values,
            links,
            flags,
        } => run_sweep(config, param, values, links, flags),
        Command::Validate { config } => validate(config),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("config error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
