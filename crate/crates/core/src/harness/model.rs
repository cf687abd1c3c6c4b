use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::learner::{epoch_order, Hyperparams, Learner, Predictor, STREAM_DROPOUT, STREAM_INIT};
use super::scenario::{ScenarioSpec, TaskSet};
use crate::bottleneck::{Bottleneck, BottleneckConfig, DecoderKind, Layout, Representation};
use crate::embed_store::EmbeddingRecord;
use crate::error::{Error, Result};
use crate::heads::{
    decode_nonparametric, decode_parametric, nonparametric_backward, route, HeadRegistry, ParametricDecoder,
    TaskHead,
};
use crate::numkit::{cross_entropy_with_grad, lazy_step, AdamWConfig, Matrix, OptimState, RngStream, RowGrads};
use crate::Float;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KeyInitKind {
    /// EMA over each task's training data right before the task.
    Incremental,
    /// EMA once over the training data of all tasks.
    Oracle,
    /// EMA once over a separate unlabelled corpus.
    Generic,
}

impl KeyInitKind {
    pub fn default_epochs(self) -> usize {
        match self {
            KeyInitKind::Generic => 1,
            _ => 3,
        }
    }
}

impl fmt::Display for KeyInitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KeyInitKind::Incremental => "incremental",
            KeyInitKind::Oracle => "oracle",
            KeyInitKind::Generic => "generic",
        })
    }
}

impl FromStr for KeyInitKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "incremental" => Ok(KeyInitKind::Incremental),
            "oracle" => Ok(KeyInitKind::Oracle),
            "generic" => Ok(KeyInitKind::Generic),
            other => Err(Error::InvalidConfig(format!("unknown key init {other:?}"))),
        }
    }
}

/// Default EMA batch size for key initialisation.
pub const KEY_INIT_BATCH: usize = 256;

#[derive(Clone, Debug)]
pub struct KeyInitStrategy {
    pub kind: KeyInitKind,
    pub epochs: usize,
    pub gamma: f64,
    pub batch_size: usize,
    /// Unlabelled encodings for GENERIC.
    pub corpus: Option<Vec<Arc<EmbeddingRecord>>>,
}

impl KeyInitStrategy {
    pub fn new(kind: KeyInitKind) -> Self {
        KeyInitStrategy {
            kind,
            epochs: kind.default_epochs(),
            gamma: 0.2,
            batch_size: KEY_INIT_BATCH,
            corpus: None,
        }
    }

    pub fn generic(corpus: Vec<Arc<EmbeddingRecord>>) -> Self {
        KeyInitStrategy {
            corpus: Some(corpus),
            ..KeyInitStrategy::new(KeyInitKind::Generic)
        }
    }

    pub fn validate(&self, scenario: &ScenarioSpec) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("key_init.batch_size: must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::InvalidConfig(format!(
                "key_init.gamma: {} outside [0, 1]",
                self.gamma
            )));
        }
        if self.kind == KeyInitKind::Generic {
            let corpus = match &self.corpus {
                Some(c) if !c.is_empty() => c,
                _ => {
                    return Err(Error::InvalidConfig(
                        "key_init.corpus: GENERIC needs a non-empty corpus".into(),
                    ))
                }
            };
            let train: HashSet<u64> = scenario
                .tasks
                .iter()
                .flat_map(|t| t.train.iter().map(|r| r.id))
                .collect();
            if corpus.iter().any(|r| train.contains(&r.id)) {
                return Err(Error::InvalidConfig(
                    "key_init.corpus: GENERIC corpus overlaps the training data".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Seeded shuffle of the EMA input stream.
fn ema_order(records: &[Arc<EmbeddingRecord>], seed: u64, tag: u64) -> Vec<Arc<EmbeddingRecord>> {
    let mut out = records.to_vec();
    out.shuffle(&mut RngStream::new(seed, STREAM_INIT | tag));
    out
}

/// Bottleneck with a non-parametric or parametric decoder, trained with a
/// lazy optimizer per value table.
#[derive(Clone, Debug)]
pub struct DkvbModel {
    pub bottleneck: Bottleneck,
    pub registry: HeadRegistry,
    value_optim: Vec<OptimState>,
    decoder_optim: BTreeMap<Option<u32>, (OptimState, OptimState)>,
    hp: Hyperparams,
    strategy: KeyInitStrategy,
    num_classes: usize,
    multi_head: bool,
    seed: u64,
    steps: u64,
    /// Every value row that received an update, per head.
    touched: Vec<BTreeSet<usize>>,
    keys_ready: bool,
}

/// One sample's loss and gradients.
struct SampleGrad {
    loss: f64,
    rep: Representation,
    drep: Matrix,
    decoder: Option<(Matrix, Matrix)>,
}

impl DkvbModel {
    /// Fresh model with random keys; keys are initialised per the strategy
    /// in [`Learner::prepare`] / [`Learner::begin_task`].
    pub fn new(
        config: BottleneckConfig,
        scenario: &ScenarioSpec,
        hp: Hyperparams,
        strategy: KeyInitStrategy,
        seed: u64,
    ) -> Result<Self> {
        let layout = Layout {
            t: scenario.t,
            h: scenario.h,
            cls_flag: scenario.cls_flag,
        };
        let bottleneck = Bottleneck::new(config, layout, seed)?;
        DkvbModel::build(bottleneck, scenario, hp, strategy, seed, false)
    }

    /// Model over already frozen keys (e.g. loaded from a checkpoint); no
    /// key initialisation is run.
    pub fn with_bottleneck(bottleneck: Bottleneck, scenario: &ScenarioSpec, hp: Hyperparams, seed: u64) -> Result<Self> {
        if !bottleneck.is_frozen() {
            return Err(Error::InvalidState("preset keys must be frozen".into()));
        }
        let strategy = KeyInitStrategy::new(KeyInitKind::Oracle);
        DkvbModel::build(bottleneck, scenario, hp, strategy, seed, true)
    }

    fn build(
        bottleneck: Bottleneck,
        scenario: &ScenarioSpec,
        hp: Hyperparams,
        strategy: KeyInitStrategy,
        seed: u64,
        keys_ready: bool,
    ) -> Result<Self> {
        hp.validate()?;
        scenario.validate()?;
        if !keys_ready {
            strategy.validate(scenario)?;
        }
        let config = &bottleneck.config;
        let n = scenario.num_classes;
        if config.decoder == DecoderKind::NonParametric && config.d_value != n {
            return Err(Error::InvalidConfig(format!(
                "d_value: non-parametric decoding needs d_value == {n} classes, got {}",
                config.d_value
            )));
        }
        let values_cfg = AdamWConfig {
            lr: hp.values_lr,
            weight_decay: hp.weight_decay,
            ..Default::default()
        };
        let value_optim = bottleneck
            .codebooks
            .iter()
            .map(|cb| OptimState::for_params(&cb.values, values_cfg))
            .collect();
        let multi_head = scenario.kind.multi_head();
        let mut model = DkvbModel {
            touched: vec![BTreeSet::new(); bottleneck.num_heads()],
            registry: HeadRegistry::multi(),
            bottleneck,
            value_optim,
            decoder_optim: BTreeMap::new(),
            hp,
            strategy,
            num_classes: n,
            multi_head,
            seed,
            steps: 0,
            keys_ready,
        };
        if !multi_head {
            let head = model.new_head((0..n as u32).collect(), None);
            model.registry = HeadRegistry::single(head);
            model.add_decoder_optim(None);
        }
        Ok(model)
    }

    fn new_head(&self, classes: Vec<u32>, task: Option<u32>) -> TaskHead {
        let decoder = (self.bottleneck.config.decoder == DecoderKind::Parametric).then(|| {
            let in_dim = self.bottleneck.num_heads() * self.bottleneck.config.d_value;
            let counter = STREAM_INIT | 0x1000 | task.map_or(0xfff, u64::from);
            ParametricDecoder::new(in_dim, classes.len(), self.hp.dropout, &mut RngStream::new(self.seed, counter))
        });
        TaskHead { classes, decoder }
    }

    fn add_decoder_optim(&mut self, task: Option<u32>) {
        let cfg = AdamWConfig {
            lr: self.hp.decoder_lr,
            weight_decay: self.hp.weight_decay,
            ..Default::default()
        };
        if let Ok(TaskHead { decoder: Some(d), .. }) = self.registry.head(task) {
            let st = (OptimState::for_params(&d.weight, cfg), OptimState::for_params(&d.bias, cfg));
            self.decoder_optim.insert(task, st);
        }
    }

    pub fn hyperparams(&self) -> &Hyperparams {
        &self.hp
    }

    /// Value rows updated so far, per head.
    pub fn touched_rows(&self) -> &[BTreeSet<usize>] {
        &self.touched
    }

    fn task_key(&self, task: &TaskSet) -> Option<u32> {
        self.multi_head.then_some(task.task_id)
    }

    fn run_ema(&mut self, data: &[Arc<EmbeddingRecord>], tag: u64) -> Result<()> {
        let data = ema_order(data, self.seed, tag);
        let s = &self.strategy;
        let (batch, gamma, epochs) = (s.batch_size, s.gamma, s.epochs);
        self.bottleneck.ema_init(&data, batch, gamma, epochs)
    }

    /// Loss and gradients for one record under the routed head.
    fn sample_grad(&self, record: &EmbeddingRecord, task: Option<u32>, rng: &mut RngStream) -> Result<SampleGrad> {
        let rep = self.bottleneck.forward(&record.z, record.valid())?;
        let head = self.registry.head(task)?;
        let target = head.classes.binary_search(&record.label).map_err(|_| {
            Error::Routing(format!("label {} outside the routed head", record.label))
        })?;
        match &head.decoder {
            None => {
                let global = decode_nonparametric(&rep, self.num_classes)?;
                let scoped = route(&global, task, &self.registry)?;
                let (loss, g) = cross_entropy_with_grad(&scoped.logits, target)?;
                let mut dglobal = vec![0.0; self.num_classes];
                for (&c, &gi) in scoped.classes.iter().zip(&g) {
                    dglobal[c as usize] = gi;
                }
                let drep = nonparametric_backward(&rep, &dglobal);
                Ok(SampleGrad { loss, rep, drep, decoder: None })
            }
            Some(dec) => {
                let (logits, cache) = decode_parametric(&rep, dec, rng, true)?;
                let (loss, g) = cross_entropy_with_grad(&logits, target)?;
                let grads = dec.backward(&cache, &g);
                let drep = Matrix::from_vec(rep.num_heads(), rep.values.cols(), grads.input)?;
                Ok(SampleGrad {
                    loss,
                    rep,
                    drep,
                    decoder: Some((grads.weight, grads.bias)),
                })
            }
        }
    }

    /// One minibatch step; returns the mean loss.
    pub fn train_step(&mut self, batch: &[&EmbeddingRecord], task: Option<u32>) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        self.bottleneck.verify_frozen()?;
        let base = self.steps.wrapping_mul(1 << 16);
        let this = &*self;
        let results: Vec<SampleGrad> = batch
            .par_iter()
            .enumerate()
            .map(|(i, r)| {
                let mut rng = RngStream::new(this.seed, STREAM_DROPOUT | ((base + i as u64) & ((1 << 40) - 1)));
                this.sample_grad(r, task, &mut rng)
            })
            .collect::<Result<_>>()?;

        // sequential reduction in batch order keeps the sums deterministic
        let scale = 1.0 / batch.len() as Float;
        let mut value_grads = self.bottleneck.zero_value_grads();
        let mut dec_grads: Option<(Matrix, Matrix)> = None;
        let mut loss = 0.0;
        for mut s in results {
            loss += s.loss;
            s.drep.as_mut_slice().iter_mut().for_each(|x| *x *= scale);
            s.rep.backprop(&s.drep, &mut value_grads);
            if let Some((w, b)) = s.decoder {
                let acc = dec_grads.get_or_insert_with(|| (Matrix::zeros(w.rows(), w.cols()), Matrix::zeros(1, b.cols())));
                for (a, g) in acc.0.as_mut_slice().iter_mut().zip(w.as_slice()) {
                    *a += scale * g;
                }
                for (a, g) in acc.1.as_mut_slice().iter_mut().zip(b.as_slice()) {
                    *a += scale * g;
                }
            }
        }

        for (c, grads) in value_grads.iter().enumerate() {
            lazy_step(&mut self.bottleneck.codebooks[c].values, grads, &mut self.value_optim[c])?;
            self.touched[c].extend(grads.touched());
        }
        if let Some((w, b)) = dec_grads {
            let (ow, ob) = self
                .decoder_optim
                .get_mut(&task)
                .ok_or_else(|| Error::InvalidState("decoder has no optimizer state".into()))?;
            let dec = self
                .registry
                .head_mut(task)?
                .decoder
                .as_mut()
                .expect("parametric head");
            lazy_step(&mut dec.weight, &RowGrads::dense(&w), ow)?;
            lazy_step(&mut dec.bias, &RowGrads::dense(&b), ob)?;
        }
        self.steps += 1;
        Ok(loss / batch.len() as f64)
    }

    /// Routed logits for a record, in the head's class order.
    pub fn logits(&self, record: &EmbeddingRecord, task_id: Option<u32>) -> Result<(Vec<u32>, Vec<Float>)> {
        let rep = self.bottleneck.forward(&record.z, record.valid())?;
        let head = self.registry.head(task_id)?;
        match &head.decoder {
            None => {
                let global = decode_nonparametric(&rep, self.num_classes)?;
                let s = route(&global, task_id, &self.registry)?;
                Ok((s.classes, s.logits))
            }
            Some(dec) => {
                // dropout is inactive outside training; the stream is unused
                let (logits, _) = decode_parametric(&rep, dec, &mut RngStream::new(0, 0), false)?;
                Ok((head.classes.clone(), logits))
            }
        }
    }
}

impl Predictor for DkvbModel {
    fn predict(&self, record: &EmbeddingRecord, task_id: Option<u32>) -> Result<u32> {
        let (classes, logits) = self.logits(record, task_id)?;
        let mut best = 0;
        for (i, &x) in logits.iter().enumerate() {
            if x > logits[best] {
                best = i;
            }
        }
        Ok(classes[best])
    }
}

impl Learner for DkvbModel {
    fn method(&self) -> &str {
        match self.bottleneck.config.decoder {
            DecoderKind::NonParametric => "dkvb-np",
            DecoderKind::Parametric => "dkvb-p",
        }
    }

    fn epochs(&self) -> usize {
        self.hp.epochs
    }

    fn prepare(&mut self, scenario: &ScenarioSpec) -> Result<()> {
        if self.keys_ready {
            return Ok(());
        }
        match self.strategy.kind {
            KeyInitKind::Incremental => {}
            KeyInitKind::Oracle => {
                let all: Vec<Arc<EmbeddingRecord>> =
                    scenario.tasks.iter().flat_map(|t| t.train.iter().cloned()).collect();
                self.run_ema(&all, 0xffff)?;
                self.keys_ready = true;
            }
            KeyInitKind::Generic => {
                let corpus = self.strategy.corpus.clone().unwrap_or_default();
                self.run_ema(&corpus, 0xfffe)?;
                self.keys_ready = true;
            }
        }
        Ok(())
    }

    fn begin_task(&mut self, _scenario: &ScenarioSpec, task: &TaskSet) -> Result<()> {
        if self.strategy.kind == KeyInitKind::Incremental && !self.keys_ready {
            // values are untouched by the EMA, which moves keys only
            self.bottleneck.reopen();
            self.run_ema(&task.train, u64::from(task.task_id))?;
        }
        if self.multi_head && !self.registry.contains(task.task_id) {
            let head = self.new_head(task.classes.iter().copied().collect(), Some(task.task_id));
            self.registry.register(task.task_id, head)?;
            self.add_decoder_optim(Some(task.task_id));
        }
        Ok(())
    }

    fn train_epoch(&mut self, task: &TaskSet, epoch: usize) -> Result<f64> {
        let order = epoch_order(self.seed, task.task_id, epoch, task.train.len());
        let key = self.task_key(task);
        let (mut total, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(self.hp.batch_size) {
            let batch: Vec<&EmbeddingRecord> = chunk.iter().map(|&i| task.train[i].as_ref()).collect();
            total += self.train_step(&batch, key)?;
            batches += 1;
        }
        Ok(if batches == 0 { 0.0 } else { total / batches as f64 })
    }
}
