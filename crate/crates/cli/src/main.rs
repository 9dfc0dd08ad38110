use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use eta_core::experiment::{resolve_config, RunConfig, RunDir, Scenario, CONFIG_FILE};
use eta_core::Error;

/// Synthetic depth-completion test-time adaptation lab.
///
/// Configuration precedence, lowest first: scenario preset, the run
/// directory's existing config.toml, --config FILE (replaces the previous),
/// then --set overrides in order.
#[derive(Parser)]
#[command(name = "eta-lab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate source train/val sets and the shifted target stream.
    Synth(Common),
    /// Train the depth completion model on the source set.
    TrainDepth(Common),
    /// Train the energy models against the run's depth checkpoint.
    TrainEnergy {
        #[command(flatten)]
        common: Common,
        /// Warm-start from an energy checkpoint bound to the same depth model.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Adapt over the target stream with every configured method.
    Adapt(Common),
    /// Score predictions against target ground truth into metrics.csv.
    Eval(Common),
    /// Write summary tables and charts from metrics.csv.
    Report(Common),
    /// Run every stage in order.
    All(Common),
}

#[derive(Args)]
struct Common {
    /// Scenario preset: fog, illum or outdoor2indoor.
    #[arg(long)]
    scenario: Option<Scenario>,
    #[arg(long)]
    seed: Option<u64>,
    /// TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one value, e.g. --set adapt.learning_rate=0.01
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Run directory; defaults to <out-root>/<scenario>-s<seed>.
    #[arg(long)]
    run_dir: Option<PathBuf>,
    #[arg(long, env = "ETA_LAB_OUT", default_value = "runs")]
    out_root: PathBuf,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } => 2,
        Error::MissingArtifact { .. } | Error::MissingSample { .. } => 3,
        Error::NonFinite(_) => 4,
        Error::FingerprintMismatch { .. } => 5,
        _ => 1,
    }
}

fn open(c: &Common) -> eta_core::Result<RunDir> {
    let first: RunConfig = resolve_config(c.scenario, c.seed, c.config.as_deref(), &c.set)?;
    let root = c
        .run_dir
        .clone()
        .unwrap_or_else(|| c.out_root.join(format!("{}-s{}", first.scenario, first.seed)));
    let existing = root.join(CONFIG_FILE);
    let cfg = if c.config.is_none() && existing.exists() {
        let stored = resolve_config(None, None, Some(&existing), &[])?;
        if c.scenario.is_some_and(|s| s != stored.scenario) || c.seed.is_some_and(|s| s != stored.seed) {
            return Err(Error::Config {
                key: "scenario/seed".into(),
                message: format!(
                    "{} holds a {} run with seed {}; pick another --run-dir",
                    root.display(),
                    stored.scenario,
                    stored.seed
                ),
            });
        }
        resolve_config(None, None, Some(&existing), &c.set)?
    } else {
        first
    };
    RunDir::create(&root, cfg)
}

fn run(cli: Cli) -> eta_core::Result<Vec<PathBuf>> {
    match cli.command {
        Command::Synth(c) => open(&c)?.synth(),
        Command::TrainDepth(c) => open(&c)?.train_depth(),
        Command::TrainEnergy { common, init } => open(&common)?.train_energy(init.as_deref()),
        Command::Adapt(c) => open(&c)?.adapt(),
        Command::Eval(c) => open(&c)?.eval(),
        Command::Report(c) => open(&c)?.report(),
        Command::All(c) => open(&c)?.all(),
    }
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(paths) => {
            let mut seen = std::collections::HashSet::new();
            for p in paths.iter().filter(|p| seen.insert(p.as_path())) {
                println!("{}", absolute(p).display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
