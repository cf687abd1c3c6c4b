use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use dkvb::bottleneck::{write_checkpoint, Checkpoint};
use dkvb::embed_store::Dataset;
use dkvb::harness::{curve_table, mean_std, run_scenario, to_jsonl, DkvbModel, KeyInitKind, Learner, RunOutcome};

use crate::config::{AnyLearner, Method, RunConfig};

pub const KEYS_FILE: &str = "keys.ckpt";
pub const R_FILE: &str = "r_matrix.txt";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TIMINGS_FILE: &str = "timings.jsonl";
pub const CURVE_FILE: &str = "curve.dat";
pub const AGGREGATE_FILE: &str = "aggregate.json";

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

/// Result of `init-keys`.
#[derive(Clone, Debug)]
pub struct KeysOutcome {
    pub path: PathBuf,
    pub key_hash: u64,
    pub checkpoint: Checkpoint,
}

/// Initialises and freezes keys for the configured strategy and writes them
/// as `<out>/keys.ckpt`.
pub fn init_keys(config: &RunConfig, out: &Path) -> Result<KeysOutcome> {
    let Method::Dkvb(decoder) = config.method()? else {
        bail!("model.method: init-keys needs a dkvb method");
    };
    if config.key_init.strategy == KeyInitKind::Incremental {
        bail!("key_init.strategy: INCREMENTAL keys are initialised per task during `run`");
    }
    let seed = config.seeds().first().copied().context("run: needs at least one seed")?;
    let dataset = config.dataset()?;
    let scenario = config.scenario(&dataset, seed)?;
    let bottleneck = config.bottleneck_config(decoder, scenario.num_classes);
    let mut model = DkvbModel::new(bottleneck, &scenario, config.train.clone(), config.key_strategy()?, seed)?;
    model.prepare(&scenario)?;

    let checkpoint = Checkpoint::from_bottleneck(&model.bottleneck, None);
    create_dir(out)?;
    let path = out.join(KEYS_FILE);
    write_checkpoint(&path, &checkpoint)?;
    Ok(KeysOutcome {
        path,
        key_hash: checkpoint.key_hash,
        checkpoint,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(xs: &[f64]) -> Self {
        let (mean, std) = mean_std(xs);
        MeanStd { mean, std }
    }
}

impl fmt::Display for MeanStd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.4} ± {:.4}", self.mean, self.std)
    }
}

/// Mean and sample standard deviation over seeds. Wall-clock timings are
/// left out so the file is reproducible.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub method: String,
    pub scenario: String,
    pub seeds: Vec<u64>,
    pub accuracy: MeanStd,
    pub macro_f1: MeanStd,
    pub bwt: Option<MeanStd>,
}

#[derive(Debug)]
pub struct RunSummary {
    pub aggregate: Aggregate,
    pub outcomes: Vec<(u64, RunOutcome)>,
}

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed-{seed}"))
}

fn run_one(config: &RunConfig, dataset: &Dataset, seed: u64, dir: &Path) -> Result<RunOutcome> {
    let method = config.method()?.name();
    let scenario = config.scenario(dataset, seed)?;
    let mut learner = config.learner(&scenario, seed)?;
    let outcome = run_scenario(&scenario, learner.as_learner()).with_context(|| format!("seed {seed}"))?;

    create_dir(dir)?;
    write(&dir.join(R_FILE), outcome.r.to_text())?;
    write(&dir.join(METRICS_FILE), to_jsonl(&outcome.metric_records(seed, &method))?)?;
    write(&dir.join(TIMINGS_FILE), to_jsonl(&outcome.timing_records(seed, &method))?)?;
    if let Some(curve) = &outcome.curve {
        write(&dir.join(CURVE_FILE), curve_table(curve))?;
    }
    if let AnyLearner::Dkvb(m) = &learner {
        write_checkpoint(dir.join(KEYS_FILE), &Checkpoint::from_bottleneck(&m.bottleneck, Some(&m.registry)))?;
    }
    Ok(outcome)
}

/// Validates the whole configuration, then runs every seed into
/// `<out>/seed-<s>/` and writes `<out>/aggregate.json`.
pub fn run(config: &RunConfig, out: &Path) -> Result<RunSummary> {
    let seeds = config.validate()?;
    run_validated(config, &seeds, out)
}

fn run_validated(config: &RunConfig, seeds: &[u64], out: &Path) -> Result<RunSummary> {
    let dataset = config.dataset()?;
    let mut outcomes = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        outcomes.push((seed, run_one(config, &dataset, seed, &seed_dir(out, seed))?));
    }
    let acc: Vec<f64> = outcomes.iter().map(|(_, o)| o.accuracy()).collect();
    let f1: Vec<f64> = outcomes.iter().map(|(_, o)| o.macro_f1()).collect();
    let bwt: Option<Vec<f64>> = outcomes.iter().map(|(_, o)| o.bwt()).collect();
    let aggregate = Aggregate {
        method: config.method()?.name(),
        scenario: config.scenario.kind.name().into(),
        seeds: seeds.to_vec(),
        accuracy: MeanStd::of(&acc),
        macro_f1: MeanStd::of(&f1),
        bwt: bwt.map(|b| MeanStd::of(&b)),
    };
    let mut json = serde_json::to_string_pretty(&aggregate)?;
    json.push('\n');
    write(&out.join(AGGREGATE_FILE), json)?;
    Ok(RunSummary { aggregate, outcomes })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    DKey,
    K,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::DKey => "d_key",
            SweepAxis::K => "k",
        }
    }
}

impl FromStr for SweepAxis {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "d_key" | "d-key" | "dkey" => Ok(SweepAxis::DKey),
            "k" | "codebook_size" | "codebook-size" => Ok(SweepAxis::K),
            other => bail!("unknown sweep axis {other:?} (expected d_key or k)"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: usize,
    pub accuracy: MeanStd,
}

/// One full run per axis value into `<out>/<axis>-<value>/`, plus the
/// three-column table `<out>/sweep_<axis>.dat` (value, mean, std).
pub fn sweep(config: &RunConfig, axis: SweepAxis, values: &[usize], out: &Path) -> Result<Vec<SweepPoint>> {
    if values.is_empty() {
        bail!("sweep: needs at least one value");
    }
    if !matches!(config.method()?, Method::Dkvb(_)) {
        bail!("model.method: sweeps vary the bottleneck and need a dkvb method");
    }
    let configs: Vec<RunConfig> = values
        .iter()
        .map(|&v| {
            let mut c = config.clone();
            match axis {
                SweepAxis::DKey => c.bottleneck.d_key = v,
                SweepAxis::K => c.bottleneck.codebook_size = v,
            }
            c
        })
        .collect();
    let mut seeds = Vec::new();
    for (c, v) in configs.iter().zip(values) {
        seeds.push(c.validate().with_context(|| format!("{} = {v}", axis.name()))?);
    }

    let mut points = Vec::new();
    let mut table = String::new();
    for ((c, &v), s) in configs.iter().zip(values).zip(&seeds) {
        let summary = run_validated(c, s, &out.join(format!("{}-{v}", axis.name())))?;
        let acc = summary.aggregate.accuracy;
        table.push_str(&format!("{v} {:?} {:?}\n", acc.mean, acc.std));
        points.push(SweepPoint { value: v, accuracy: acc });
    }
    write(&out.join(format!("sweep_{}.dat", axis.name())), table)?;
    Ok(points)
}
