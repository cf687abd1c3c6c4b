use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use dkvb::harness::ScenarioKind;
use dkvb_cli::commands::{self, SweepAxis};
use dkvb_cli::config::RunConfig;
use dkvb_cli::{error_record, report};

#[derive(Parser)]
#[command(name = "dkvb", version, about = "Discrete key-value bottleneck continual-learning runs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Initialise and freeze keys, write a checkpoint and print its key hash.
    InitKeys(Common),
    /// Train and evaluate over one or more seeds.
    Run(Common),
    /// One full run per value of d_key or K.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// d_key or k
        #[arg(long)]
        axis: SweepAxis,
        /// Comma-separated axis values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<usize>,
    },
    /// Summarise every run below a directory.
    Report {
        dir: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Number of seeded runs [default: 5].
    #[arg(long)]
    runs: Option<usize>,
    /// First seed; runs use consecutive seeds from here.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    scenario: Option<ScenarioKind>,
}

impl Common {
    /// Config file with command-line overrides applied.
    fn load(&self) -> Result<(RunConfig, PathBuf)> {
        let mut c = RunConfig::load(&self.config)?;
        if self.runs.is_some() || self.seed.is_some() {
            c.run.seeds = None;
        }
        if let Some(n) = self.runs {
            c.run.runs = Some(n);
        }
        if let Some(s) = self.seed {
            c.run.seed = Some(s);
        }
        if let Some(m) = &self.method {
            c.model.method = m.clone();
        }
        if let Some(k) = self.scenario {
            c.scenario.kind = k;
        }
        let out = self.out.clone().unwrap_or_else(|| c.output.dir.clone());
        Ok((c, out))
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_record(&e));
            ExitCode::FAILURE
        }
    }
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::InitKeys(common) => {
            let (config, out) = common.load()?;
            let keys = commands::init_keys(&config, &out)?;
            println!("key_hash {:016x}", keys.key_hash);
            println!("checkpoint {}", keys.path.display());
        }
        Command::Run(common) => {
            let (config, out) = common.load()?;
            let summary = commands::run(&config, &out)?;
            let a = &summary.aggregate;
            for (seed, o) in &summary.outcomes {
                println!("seed {seed}: acc {:.4} macro-f1 {:.4} bwt {}", o.accuracy(), o.macro_f1(), fmt_opt(o.bwt()));
            }
            println!(
                "{} {} over {} runs: acc {} macro-f1 {} bwt {}",
                a.method,
                a.scenario,
                a.seeds.len(),
                a.accuracy,
                a.macro_f1,
                a.bwt.map_or("-".into(), |b| b.to_string())
            );
        }
        Command::Sweep { common, axis, values } => {
            let (config, out) = common.load()?;
            let points = commands::sweep(&config, axis, &values, &out)?;
            println!("{} accuracy", axis.name());
            for p in points {
                println!("{} {}", p.value, p.accuracy);
            }
        }
        Command::Report { dir } => {
            let (_, table) = report::report(&dir).with_context(|| format!("report {}", dir.display()))?;
            print!("{table}");
        }
    }
    Ok(())
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or("-".into(), |v| format!("{v:.4}"))
}
