use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fnls_core::harness::{self, Experiment, ExperimentConfig};
use fnls_core::Error;

/// Experiments on the truncated fractional cubic NLS.
#[derive(Parser, Debug)]
#[command(name = "fnls-lab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Draw a Gibbs-weighted Gaussian free field ensemble.
    Sample(Common),
    /// Integrate one trajectory of the truncated flow.
    Evolve(Common),
    /// Weighted observable statistics before and after the flow.
    Invariance(Common),
    /// Second Picard iterate norms across scales.
    PicardScaling(Common),
    /// Brute-force counting lemma audits.
    CountingAudit(Common),
    /// Base tensor norm audits.
    TensorAudit(Common),
    /// Random averaging operator diagnostics.
    RaoAudit(Common),
}

#[derive(Args, Debug)]
struct Common {
    /// TOML config file.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override `key=value` (repeatable): seed, threads, output_dir,
    /// params.<name> or <name>, grid.<name>=[...].
    #[arg(short = 's', long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(short, long)]
    output_dir: Option<PathBuf>,
    /// Validate the config and print it without running.
    #[arg(long)]
    dry_run: bool,
    /// List parameters and defaults for this experiment.
    #[arg(long)]
    list_params: bool,
}

fn build_config(experiment: Experiment, c: &Common) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &c.config {
        Some(path) => {
            let cfg = ExperimentConfig::from_file(path)?;
            if cfg.experiment != experiment {
                return Err(Error::Configuration(format!(
                    "config is for {}, not {}",
                    cfg.experiment.name(),
                    experiment.name()
                )));
            }
            cfg
        }
        None => ExperimentConfig::new(experiment),
    };
    for s in &c.set {
        cfg.apply_override(s)?;
    }
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    if let Some(t) = c.threads {
        cfg.threads = t;
    }
    if let Some(d) = &c.output_dir {
        cfg.output_dir = d.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(experiment: Experiment, c: &Common) -> Result<(), Error> {
    if c.list_params {
        println!("{}", harness::params_doc(experiment));
        return Ok(());
    }
    let cfg = build_config(experiment, c)?;
    if c.dry_run {
        println!("{}", serde_json::to_string_pretty(&cfg)?);
        println!("config_digest {}", cfg.digest());
        return Ok(());
    }
    let rec = harness::run(&cfg)?;
    for p in rec.write(&cfg.output_dir)? {
        println!("wrote {}", p.display());
    }
    for f in &rec.flags {
        eprintln!("flag: {f}");
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (experiment, common) = match &cli.command {
        Command::Sample(c) => (Experiment::Sample, c),
        Command::Evolve(c) => (Experiment::Evolve, c),
        Command::Invariance(c) => (Experiment::Invariance, c),
        Command::PicardScaling(c) => (Experiment::PicardScaling, c),
        Command::CountingAudit(c) => (Experiment::CountingAudit, c),
        Command::TensorAudit(c) => (Experiment::TensorAudit, c),
        Command::RaoAudit(c) => (Experiment::RaoAudit, c),
    };
    match execute(experiment, common) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 3 } else { 2 })
        }
    }
}
