//! TOML run configuration and its translation into toolkit objects.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use dkvb::baselines::{BaselineMethod, DerppConfig, EwcMode, ProbeLearner};
use dkvb::bottleneck::{read_checkpoint, Bottleneck, BottleneckConfig, DecoderKind, Layout, Segmentation};
use dkvb::embed_store::{
    build_scenario, generate_synthetic, generic_corpus, Dataset, EmbeddingRecord, Grouping, Manifest, ScenarioRequest,
    SyntheticSpec,
};
use dkvb::harness::{DkvbModel, Hyperparams, KeyInitKind, KeyInitStrategy, Learner, ScenarioKind, ScenarioSpec};
use dkvb::heads::{PoolingMode, PoolingOp, PoolingPosition};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSection,
    pub scenario: ScenarioSection,
    pub model: ModelSection,
    pub bottleneck: BottleneckSection,
    pub key_init: KeyInitSection,
    pub train: Hyperparams,
    pub baseline: BaselineSection,
    pub run: RunSection,
    pub output: OutputSection,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    /// Manifest of embedding files; exclusive with `synthetic`.
    pub manifest: Option<PathBuf>,
    pub synthetic: Option<SyntheticSpec>,
    /// Unlabelled corpus for GENERIC keys.
    pub generic: Option<GenericSection>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenericSection {
    /// Train split of this manifest is used as the corpus.
    pub manifest: Option<PathBuf>,
    /// Or: this many documents from the synthetic generator's background
    /// vocabulary.
    pub synthetic_docs: Option<usize>,
    #[serde(default = "default_generic_seed")]
    pub seed: u64,
}

fn default_generic_seed() -> u64 {
    99
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSection {
    pub kind: ScenarioKind,
    pub classes_per_task: Option<usize>,
    pub domains_per_task: Option<usize>,
    /// Explicit groups of class / domain / task-type IDs.
    pub groups: Option<Vec<Vec<u32>>>,
    /// Shuffle task order per seed. Single-head CIL defaults to a fixed order.
    pub shuffle: Option<bool>,
}

impl Default for ScenarioSection {
    fn default() -> Self {
        ScenarioSection {
            kind: ScenarioKind::Cil,
            classes_per_task: None,
            domains_per_task: None,
            groups: None,
            shuffle: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// dkvb-np | dkvb-p | ncl | ewc | derpp
    pub method: String,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection { method: "dkvb-np".into() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BottleneckSection {
    pub segmentation: Segmentation,
    pub d_key: usize,
    pub codebook_size: usize,
    /// Defaults to the class count (non-parametric) or `d_key` (parametric).
    pub d_value: Option<usize>,
    pub pooling_mode: PoolingMode,
    pub pooling_position: PoolingPosition,
}

impl Default for BottleneckSection {
    fn default() -> Self {
        let d = BottleneckConfig::default();
        BottleneckSection {
            segmentation: d.segmentation,
            d_key: d.d_key,
            codebook_size: d.codebook_size,
            d_value: None,
            pooling_mode: d.pooling.mode,
            pooling_position: d.pooling.position,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KeyInitSection {
    pub strategy: KeyInitKind,
    /// Defaults per strategy: 3, or 1 for GENERIC.
    pub epochs: Option<usize>,
    pub gamma: f64,
    pub batch_size: usize,
    /// Frozen keys from `init-keys`; ORACLE and GENERIC initialise in
    /// process when absent.
    pub checkpoint: Option<PathBuf>,
}

impl Default for KeyInitSection {
    fn default() -> Self {
        let s = KeyInitStrategy::new(KeyInitKind::Oracle);
        KeyInitSection {
            strategy: s.kind,
            epochs: None,
            gamma: s.gamma,
            batch_size: s.batch_size,
            checkpoint: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineSection {
    pub ewc_lambda: f64,
    /// additive | online
    pub ewc_mode: String,
    pub ewc_decay: f64,
    pub fisher_samples: Option<usize>,
    pub derpp: DerppConfig,
}

impl Default for BaselineSection {
    fn default() -> Self {
        let lambda = match BaselineMethod::ewc_default() {
            BaselineMethod::Ewc { lambda, .. } => lambda,
            _ => unreachable!(),
        };
        BaselineSection {
            ewc_lambda: lambda,
            ewc_mode: "additive".into(),
            ewc_decay: 1.0,
            fisher_samples: None,
            derpp: DerppConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    /// Explicit seed list; otherwise `runs` seeds counting up from `seed`.
    pub seeds: Option<Vec<u64>>,
    pub runs: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { dir: PathBuf::from("runs") }
    }
}

pub const DEFAULT_RUNS: usize = 5;
pub const DEFAULT_SEED: u64 = 1;

/// A built learner; DKVB models are kept concrete so their keys can be
/// checkpointed.
pub enum AnyLearner {
    Dkvb(Box<DkvbModel>),
    Probe(Box<ProbeLearner>),
}

impl AnyLearner {
    pub fn as_learner(&mut self) -> &mut dyn Learner {
        match self {
            AnyLearner::Dkvb(m) => m.as_mut(),
            AnyLearner::Probe(p) => p.as_mut(),
        }
    }
}

/// What a run trains.
#[derive(Clone, Debug, PartialEq)]
pub enum Method {
    Dkvb(DecoderKind),
    Baseline(BaselineMethod),
}

impl Method {
    pub fn name(&self) -> String {
        match self {
            Method::Dkvb(DecoderKind::NonParametric) => "dkvb-np".into(),
            Method::Dkvb(DecoderKind::Parametric) => "dkvb-p".into(),
            Method::Baseline(b) => b.name().into(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut config: RunConfig =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        config.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(config)
    }

    /// Makes relative paths relative to the config file's directory.
    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = &mut self.dataset.manifest {
            fix(p);
        }
        if let Some(GenericSection { manifest: Some(p), .. }) = &mut self.dataset.generic {
            fix(p);
        }
        if let Some(p) = &mut self.key_init.checkpoint {
            fix(p);
        }
    }

    pub fn seeds(&self) -> Vec<u64> {
        if let Some(s) = &self.run.seeds {
            return s.clone();
        }
        let base = self.run.seed.unwrap_or(DEFAULT_SEED);
        (0..self.run.runs.unwrap_or(DEFAULT_RUNS) as u64).map(|i| base + i).collect()
    }

    pub fn method(&self) -> Result<Method> {
        Ok(match self.model.method.to_ascii_lowercase().as_str() {
            "dkvb-np" | "dkvb" => Method::Dkvb(DecoderKind::NonParametric),
            "dkvb-p" => Method::Dkvb(DecoderKind::Parametric),
            "ewc" => {
                let b = &self.baseline;
                let mode = match b.ewc_mode.as_str() {
                    "additive" => EwcMode::Additive,
                    "online" => EwcMode::Online { decay: b.ewc_decay },
                    other => bail!("baseline.ewc_mode: unknown mode {other:?}"),
                };
                Method::Baseline(BaselineMethod::Ewc {
                    lambda: b.ewc_lambda,
                    mode,
                    fisher_samples: b.fisher_samples,
                })
            }
            "derpp" | "der++" => Method::Baseline(BaselineMethod::Derpp(self.baseline.derpp)),
            other => Method::Baseline(
                other.parse().map_err(|_| anyhow::anyhow!("model.method: unknown method {other:?}"))?,
            ),
        })
    }

    pub fn dataset(&self) -> Result<Dataset> {
        match (&self.dataset.manifest, &self.dataset.synthetic) {
            (Some(_), Some(_)) => bail!("dataset: give either manifest or synthetic, not both"),
            (None, None) => bail!("dataset: needs a manifest or a synthetic section"),
            (Some(path), None) => {
                let manifest = Manifest::load(path).with_context(|| format!("dataset.manifest {}", path.display()))?;
                Ok(Dataset::from_manifest(&manifest)?)
            }
            (None, Some(spec)) => Ok(generate_synthetic(spec).context("dataset.synthetic")?),
        }
    }

    pub fn scenario(&self, dataset: &Dataset, seed: u64) -> Result<ScenarioSpec> {
        let s = &self.scenario;
        let grouping = match (s.classes_per_task, s.domains_per_task, &s.groups) {
            (None, None, None) => Grouping::Default,
            (Some(n), None, None) => Grouping::ClassesPerTask(n),
            (None, Some(n), None) => Grouping::DomainsPerTask(n),
            (None, None, Some(g)) => Grouping::Explicit(g.clone()),
            _ => bail!("scenario: classes_per_task, domains_per_task and groups are exclusive"),
        };
        let mut req = ScenarioRequest::new(s.kind, seed).grouping(grouping);
        req.shuffle = s.shuffle.unwrap_or(s.kind != ScenarioKind::SingleHeadCil);
        build_scenario(dataset, &req).context("scenario")
    }

    pub fn bottleneck_config(&self, decoder: DecoderKind, num_classes: usize) -> BottleneckConfig {
        let b = &self.bottleneck;
        let k = &self.key_init;
        BottleneckConfig {
            segmentation: b.segmentation,
            d_key: b.d_key,
            codebook_size: b.codebook_size,
            d_value: b
                .d_value
                .unwrap_or_else(|| BottleneckConfig::default_d_value(decoder, b.d_key, num_classes)),
            pooling: PoolingOp {
                mode: b.pooling_mode,
                position: b.pooling_position,
            },
            decoder,
            ema_decay: k.gamma,
            init_epochs: k.epochs.unwrap_or(k.strategy.default_epochs()),
        }
    }

    fn generic_corpus(&self) -> Result<Vec<Arc<EmbeddingRecord>>> {
        let Some(g) = &self.dataset.generic else {
            bail!("dataset.generic: GENERIC keys need a corpus section");
        };
        let records = match (&g.manifest, g.synthetic_docs) {
            (Some(path), None) => {
                let manifest = Manifest::load(path).with_context(|| format!("dataset.generic.manifest {}", path.display()))?;
                Dataset::from_manifest(&manifest)?.train.records
            }
            (None, Some(docs)) => {
                let Some(spec) = &self.dataset.synthetic else {
                    bail!("dataset.generic.synthetic_docs: needs a synthetic dataset");
                };
                generic_corpus(spec, docs, g.seed)?.records
            }
            _ => bail!("dataset.generic: give exactly one of manifest or synthetic_docs"),
        };
        Ok(records.into_iter().map(Arc::new).collect())
    }

    pub fn key_strategy(&self) -> Result<KeyInitStrategy> {
        let k = &self.key_init;
        let mut s = match k.strategy {
            KeyInitKind::Generic => KeyInitStrategy::generic(self.generic_corpus()?),
            kind => KeyInitStrategy::new(kind),
        };
        if let Some(e) = k.epochs {
            s.epochs = e;
        }
        s.gamma = k.gamma;
        s.batch_size = k.batch_size;
        Ok(s)
    }

    /// Builds the learner for one seed. With a checkpoint the stored keys
    /// are used frozen and no key initialisation runs.
    pub fn learner(&self, scenario: &ScenarioSpec, seed: u64) -> Result<AnyLearner> {
        let hp = self.train.clone();
        Ok(match self.method()? {
            Method::Baseline(b) => AnyLearner::Probe(Box::new(ProbeLearner::new(b, scenario, hp, seed)?)),
            Method::Dkvb(decoder) => {
                let config = self.bottleneck_config(decoder, scenario.num_classes);
                let layout = Layout {
                    t: scenario.t,
                    h: scenario.h,
                    cls_flag: scenario.cls_flag,
                };
                AnyLearner::Dkvb(Box::new(match &self.key_init.checkpoint {
                    Some(path) if self.key_init.strategy != KeyInitKind::Incremental => {
                        let cp = read_checkpoint(path)
                            .with_context(|| format!("key_init.checkpoint {}", path.display()))?;
                        if (cp.d_key, cp.codebook_size) != (config.d_key, config.codebook_size) {
                            bail!(
                                "key_init.checkpoint: keys are d_key={} K={}, config wants d_key={} K={}",
                                cp.d_key,
                                cp.codebook_size,
                                config.d_key,
                                config.codebook_size
                            );
                        }
                        let b = Bottleneck::with_keys(config, layout, cp.keys, seed)?;
                        DkvbModel::with_bottleneck(b, scenario, hp, seed)?
                    }
                    Some(_) => bail!("key_init.checkpoint: INCREMENTAL keys are initialised per task"),
                    None => DkvbModel::new(config, scenario, hp, self.key_strategy()?, seed)?,
                }))
            }
        })
    }

    /// Everything that can be checked without writing anything.
    pub fn validate(&self) -> Result<Vec<u64>> {
        let seeds = self.seeds();
        if seeds.is_empty() {
            bail!("run: needs at least one seed");
        }
        let mut sorted = seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != seeds.len() {
            bail!("run.seeds: seeds must be distinct");
        }
        self.train.validate().context("train")?;
        self.method()?;
        let dataset = self.dataset()?;
        for &seed in &seeds {
            let scenario = self.scenario(&dataset, seed)?;
            self.learner(&scenario, seed)?;
        }
        Ok(seeds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_takes_defaults() {
        let c: RunConfig = toml::from_str("").unwrap();
        assert_eq!(c.train, Hyperparams::default());
        assert_eq!(c.bottleneck.d_key, 12);
        assert_eq!(c.bottleneck.codebook_size, 4096);
        assert_eq!(c.key_init.gamma, 0.2);
        assert_eq!(c.seeds(), vec![1, 2, 3, 4, 5]);
        assert_eq!(c.method().unwrap(), Method::Dkvb(DecoderKind::NonParametric));
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let err = toml::from_str::<RunConfig>("[train]\nepoch = 3\n").unwrap_err();
        assert!(err.to_string().contains("epoch"), "{err}");
    }

    #[test]
    fn method_names() {
        let mut c = RunConfig::default();
        for (name, want) in [("dkvb-p", "dkvb-p"), ("ncl", "ncl"), ("ewc", "ewc"), ("der++", "derpp")] {
            c.model.method = name.into();
            assert_eq!(c.method().unwrap().name(), want);
        }
        c.model.method = "lwf".into();
        assert!(c.method().is_err());
    }
}
