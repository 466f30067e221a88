use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use uaplab_cli::config::parse_assignment;
use uaplab_cli::{replay, run, validate, ExperimentConfig, Kind, ReportRecord, RunError};

#[derive(Parser)]
#[command(name = "uaplab", version, about = "Seeded experiments on Transformer approximation properties")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Layers needed before every token reaches every other.
    Connectivity(RunArgs),
    /// Automorphism group of a pattern or pattern sequence.
    Aut(RunArgs),
    /// Monte-Carlo kernel limit condition.
    KernelLimit(RunArgs),
    /// Token distinguishability over random mixer parameters.
    Distinguish(RunArgs),
    /// Train a model to interpolate a random dataset.
    Train(RunArgs),
    /// Equivariance of each mixer under its declared symmetry group.
    Equivariance(RunArgs),
    /// Static checks of a config without running it.
    Validate {
        #[command(flatten)]
        args: RunArgs,
        /// Experiment kind, when the config does not name one.
        #[arg(long)]
        kind: Option<String>,
    },
    /// Re-run a report from its echoed config and compare the results.
    Replay {
        report: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// TOML file with flat keys.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set trials=50`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    pattern: Option<String>,
    #[arg(long)]
    kernel: Option<String>,
    #[arg(long)]
    mixers: Option<String>,
    #[arg(long)]
    trials: Option<usize>,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Write the training history CSV here.
    #[arg(long)]
    csv: Option<PathBuf>,
}

impl RunArgs {
    fn load(&self, kind: Option<Kind>) -> anyhow::Result<ExperimentConfig> {
        let mut overrides = self.set.iter().map(|s| parse_assignment(s)).collect::<anyhow::Result<Vec<_>>>()?;
        let mut flag = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                overrides.push((k.to_string(), v));
            }
        };
        flag("seed", self.seed.map(|v| v.to_string()));
        flag("d", self.d.map(|v| v.to_string()));
        flag("n", self.n.map(|v| v.to_string()));
        flag("pattern", self.pattern.clone());
        flag("kernel", self.kernel.clone());
        flag("mixers", self.mixers.clone());
        flag("trials", self.trials.map(|v| v.to_string()));
        flag("report", self.report.as_ref().map(|p| p.display().to_string()));
        flag("csv", self.csv.as_ref().map(|p| p.display().to_string()));
        if let Some(k) = kind {
            overrides.push(("kind".into(), k.as_str().into()));
        }
        ExperimentConfig::load(self.config.as_deref(), &overrides)
    }
}

fn emit(record: &ReportRecord, csv: Option<String>) -> anyhow::Result<()> {
    match &record.config.report {
        Some(path) => {
            std::fs::write(path, record.to_json()).with_context(|| format!("writing {}", path.display()))?;
            for c in &record.checks {
                eprintln!("{} {}: {} ({})", if c.pass { "PASS" } else { "FAIL" }, c.name, c.observed, c.requirement);
            }
        }
        None => println!("{}", record.to_json()),
    }
    if let (Some(path), Some(text)) = (&record.config.csv, csv) {
        std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn execute(cli: Cli) -> anyhow::Result<ExitCode> {
    let (args, kind) = match &cli.command {
        Command::Connectivity(a) => (a, Kind::Connectivity),
        Command::Aut(a) => (a, Kind::Automorphisms),
        Command::KernelLimit(a) => (a, Kind::KernelLimit),
        Command::Distinguish(a) => (a, Kind::Distinguish),
        Command::Train(a) => (a, Kind::Interpolate),
        Command::Equivariance(a) => (a, Kind::Equivariance),
        Command::Validate { args, kind } => {
            let kind = kind
                .as_deref()
                .map(|k| Kind::parse(k).with_context(|| format!("unknown kind '{k}'")))
                .transpose()?;
            let diags = validate(&args.load(kind)?);
            for d in &diags {
                println!("{d}");
            }
            return Ok(if diags.is_empty() { ExitCode::SUCCESS } else { ExitCode::from(2) });
        }
        Command::Replay { report } => {
            let text = std::fs::read_to_string(report).with_context(|| format!("reading {}", report.display()))?;
            let old = ReportRecord::from_json(&text)?;
            let (_, same) = replay(&old)?;
            println!("{}", if same { "identical" } else { "DIFFERENT" });
            return Ok(if same { ExitCode::SUCCESS } else { ExitCode::FAILURE });
        }
    };
    let cfg = args.load(Some(kind))?;
    match run(&cfg) {
        Ok((record, sidecars)) => {
            emit(&record, sidecars.history_csv)?;
            Ok(if record.pass { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Err(e @ RunError::Invalid(_)) => {
            eprint!("{e}");
            Ok(ExitCode::from(2))
        }
        Err(e) => Err(e.into()),
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
