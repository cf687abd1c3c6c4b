//! Frozen-encoder baselines: a linear probe on mean-pooled embeddings,
//! trained naively (NCL), with EWC regularisation, or with DER++ replay.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::embed_store::EmbeddingRecord;
use crate::error::{Error, Result};
use crate::harness::learner::{epoch_order, STREAM_INIT, STREAM_REPLAY};
use crate::harness::{Hyperparams, Learner, Predictor, ScenarioSpec, TaskSet};
use crate::heads::{pool, PoolingMode};
use crate::numkit::{cross_entropy_with_grad, lazy_step, AdamWConfig, Matrix, OptimState, RngStream, RowGrads};
use crate::Float;

pub const DEFAULT_EWC_LAMBDA: f64 = 5000.0;
pub const DEFAULT_BUFFER_SIZE: usize = 256;
pub const DEFAULT_REPLAY_SAMPLES: usize = 16;

/// A pooled embedding with its label.
#[derive(Clone, Debug, PartialEq)]
pub struct PooledSample {
    pub x: Vec<Float>,
    pub label: u32,
}

impl PooledSample {
    pub fn from_record(r: &EmbeddingRecord) -> Result<Self> {
        Ok(PooledSample {
            x: pool(&r.z, PoolingMode::Mean, r.valid(), false)?,
            label: r.label,
        })
    }
}

/// `logits = Wᵀx + b` over the global class set.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe {
    /// `h x n_classes`.
    pub weight: Matrix,
    /// `1 x n_classes`.
    pub bias: Matrix,
}

/// Gradients with the probe's shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeGrads {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl ProbeGrads {
    pub fn zeros(probe: &LinearProbe) -> Self {
        ProbeGrads {
            weight: Matrix::zeros(probe.weight.rows(), probe.weight.cols()),
            bias: Matrix::zeros(1, probe.bias.cols()),
        }
    }

    /// `self += scale * x ⊗ dlogits` (and the bias part).
    fn accumulate(&mut self, x: &[Float], dlogits: &[Float], scale: Float) {
        for (i, &xi) in x.iter().enumerate() {
            for (g, &d) in self.weight.row_mut(i).iter_mut().zip(dlogits) {
                *g += scale * xi * d;
            }
        }
        for (g, &d) in self.bias.row_mut(0).iter_mut().zip(dlogits) {
            *g += scale * d;
        }
    }
}

impl LinearProbe {
    /// Uniform `±1/sqrt(h)` weights, zero bias.
    pub fn new(h: usize, n_classes: usize, rng: &mut RngStream) -> Self {
        let bound = 1.0 / (h.max(1) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        LinearProbe {
            weight: Matrix::from_fn(h, n_classes, |_, _| dist.sample(rng) as Float),
            bias: Matrix::zeros(1, n_classes),
        }
    }

    pub fn n_classes(&self) -> usize {
        self.weight.cols()
    }

    pub fn logits(&self, x: &[Float]) -> Result<Vec<Float>> {
        if x.len() != self.weight.rows() {
            return Err(Error::InvalidInput(format!(
                "probe expects {} inputs, got {}",
                self.weight.rows(),
                x.len()
            )));
        }
        let mut acc: Vec<f64> = self.bias.row(0).iter().map(|&b| b as f64).collect();
        for (i, &xi) in x.iter().enumerate() {
            for (a, &w) in acc.iter_mut().zip(self.weight.row(i)) {
                *a += w as f64 * xi as f64;
            }
        }
        Ok(acc.into_iter().map(|a| a as Float).collect())
    }

    /// Class with the largest logit among `scope` (all classes when empty).
    pub fn predict(&self, x: &[Float], scope: &[u32]) -> Result<u32> {
        let logits = self.logits(x)?;
        let mut best: Option<(u32, Float)> = None;
        let all: Vec<u32>;
        let scope = if scope.is_empty() {
            all = (0..logits.len() as u32).collect();
            &all
        } else {
            scope
        };
        for &c in scope {
            let v = logits[c as usize];
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((c, v));
            }
        }
        Ok(best.expect("non-empty scope").0)
    }

    fn params(&self) -> impl Iterator<Item = &Float> {
        self.weight.as_slice().iter().chain(self.bias.as_slice())
    }
}

/// Cross-entropy over the classes in `scope` (sorted global IDs); returns
/// the loss and the gradient scattered back onto the full logit vector.
pub fn scoped_cross_entropy(logits: &[Float], scope: &[u32], label: u32) -> Result<(f64, Vec<Float>)> {
    let target = scope
        .binary_search(&label)
        .map_err(|_| Error::Routing(format!("label {label} outside the routed head")))?;
    let scoped: Vec<Float> = scope.iter().map(|&c| logits[c as usize]).collect();
    let (loss, g) = cross_entropy_with_grad(&scoped, target)?;
    let mut full = vec![0.0; logits.len()];
    for (&c, &gi) in scope.iter().zip(&g) {
        full[c as usize] = gi;
    }
    Ok((loss, full))
}

/// Mean CE loss and gradient of the probe over a batch.
fn batch_ce(probe: &LinearProbe, batch: &[&PooledSample], scope: &[u32], grads: &mut ProbeGrads, weight: Float) -> Result<f64> {
    let mut loss = 0.0;
    let scale = weight / batch.len() as Float;
    for s in batch {
        let logits = probe.logits(&s.x)?;
        let (l, g) = scoped_cross_entropy(&logits, scope, s.label)?;
        loss += l;
        grads.accumulate(&s.x, &g, scale);
    }
    Ok(weight as f64 * loss / batch.len() as f64)
}

/// AdamW state for both probe tensors.
#[derive(Clone, Debug)]
pub struct ProbeOptimizer {
    weight: OptimState,
    bias: OptimState,
}

impl ProbeOptimizer {
    pub fn new(probe: &LinearProbe, config: AdamWConfig) -> Self {
        ProbeOptimizer {
            weight: OptimState::for_params(&probe.weight, config),
            bias: OptimState::for_params(&probe.bias, config),
        }
    }

    pub fn step(&mut self, probe: &mut LinearProbe, grads: &ProbeGrads) -> Result<()> {
        lazy_step(&mut probe.weight, &RowGrads::dense(&grads.weight), &mut self.weight)?;
        lazy_step(&mut probe.bias, &RowGrads::dense(&grads.bias), &mut self.bias)
    }
}

/// One plain cross-entropy step on the probe. Returns the batch loss.
pub fn ncl_step(batch: &[&PooledSample], scope: &[u32], probe: &mut LinearProbe, opt: &mut ProbeOptimizer) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let mut grads = ProbeGrads::zeros(probe);
    let loss = batch_ce(probe, batch, scope, &mut grads, 1.0)?;
    opt.step(probe, &grads)?;
    Ok(loss)
}

/// Diagonal Fisher estimate and the parameters it was taken at.
#[derive(Clone, Debug, PartialEq)]
pub struct FisherDiag {
    pub fisher: ProbeGrads,
    pub anchor: LinearProbe,
}

/// Empirical diagonal Fisher: mean over (up to `samples`) data points of
/// the squared per-sample CE gradient at the current probe.
pub fn fisher_estimate(data: &[PooledSample], scope: &[u32], probe: &LinearProbe, samples: Option<usize>) -> Result<FisherDiag> {
    let n = samples.map_or(data.len(), |s| s.min(data.len()));
    if n == 0 {
        return Err(Error::InvalidInput("Fisher estimate needs data".into()));
    }
    let mut fisher = ProbeGrads::zeros(probe);
    for s in &data[..n] {
        let mut g = ProbeGrads::zeros(probe);
        let logits = probe.logits(&s.x)?;
        let (_, d) = scoped_cross_entropy(&logits, scope, s.label)?;
        g.accumulate(&s.x, &d, 1.0);
        for (f, gi) in fisher
            .weight
            .as_mut_slice()
            .iter_mut()
            .chain(fisher.bias.as_mut_slice())
            .zip(g.weight.as_slice().iter().chain(g.bias.as_slice()))
        {
            *f += gi * gi / n as Float;
        }
    }
    Ok(FisherDiag {
        fisher,
        anchor: probe.clone(),
    })
}

fn check_anchor(probe: &LinearProbe, a: &FisherDiag) -> Result<()> {
    if a.anchor.weight.shape() != probe.weight.shape() || a.fisher.weight.shape() != probe.weight.shape() {
        return Err(Error::InvalidConfig(format!(
            "EWC anchor shape {:?} does not match probe {:?}",
            a.anchor.weight.shape(),
            probe.weight.shape()
        )));
    }
    Ok(())
}

/// `(λ/2) Σ_anchors Σ_i F_i (θ_i − θ*_i)²`.
pub fn ewc_loss(probe: &LinearProbe, anchors: &[FisherDiag], lambda: f64) -> Result<f64> {
    let mut total = 0.0;
    for a in anchors {
        check_anchor(probe, a)?;
        let f = a.fisher.weight.as_slice().iter().chain(a.fisher.bias.as_slice());
        for ((&p, &s), &fi) in probe.params().zip(a.anchor.params()).zip(f) {
            let d = p as f64 - s as f64;
            total += fi as f64 * d * d;
        }
    }
    Ok(0.5 * lambda * total)
}

/// Adds the penalty gradient `λ Σ F (θ − θ*)` to `grads`.
pub fn ewc_grad(probe: &LinearProbe, anchors: &[FisherDiag], lambda: f64, grads: &mut ProbeGrads) -> Result<()> {
    for a in anchors {
        check_anchor(probe, a)?;
        let f = a.fisher.weight.as_slice().iter().chain(a.fisher.bias.as_slice());
        let g = grads.weight.as_mut_slice().iter_mut().chain(grads.bias.as_mut_slice());
        for (((g, &p), &s), &fi) in g.zip(probe.params()).zip(a.anchor.params()).zip(f) {
            *g += (lambda * fi as f64 * (p as f64 - s as f64)) as Float;
        }
    }
    Ok(())
}

/// CE step plus the EWC penalty. With `lambda == 0` this is [`ncl_step`].
pub fn ewc_step(
    batch: &[&PooledSample],
    scope: &[u32],
    probe: &mut LinearProbe,
    opt: &mut ProbeOptimizer,
    anchors: &[FisherDiag],
    lambda: f64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let mut grads = ProbeGrads::zeros(probe);
    let mut loss = batch_ce(probe, batch, scope, &mut grads, 1.0)?;
    if lambda != 0.0 && !anchors.is_empty() {
        loss += ewc_loss(probe, anchors, lambda)?;
        ewc_grad(probe, anchors, lambda, &mut grads)?;
    }
    opt.step(probe, &grads)?;
    Ok(loss)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum EwcMode {
    /// One `(Fisher, anchor)` pair per finished task.
    Additive,
    /// A single running pair: `F <- decay*F + F_new`, anchor at the latest task.
    Online { decay: f64 },
}

/// Accumulated EWC anchors.
#[derive(Clone, Debug)]
pub struct Ewc {
    pub lambda: f64,
    pub mode: EwcMode,
    pub anchors: Vec<FisherDiag>,
}

impl Ewc {
    pub fn new(lambda: f64, mode: EwcMode) -> Self {
        Ewc {
            lambda,
            mode,
            anchors: Vec::new(),
        }
    }

    pub fn consolidate(&mut self, fisher: FisherDiag) {
        match self.mode {
            EwcMode::Additive => self.anchors.push(fisher),
            EwcMode::Online { decay } => {
                let mut fisher = fisher;
                if let Some(prev) = self.anchors.pop() {
                    let old = prev.fisher.weight.as_slice().iter().chain(prev.fisher.bias.as_slice());
                    let new = fisher.fisher.weight.as_mut_slice().iter_mut().chain(fisher.fisher.bias.as_mut_slice());
                    for (n, &o) in new.zip(old) {
                        *n += decay as Float * o;
                    }
                }
                self.anchors.push(fisher);
            }
        }
    }
}

/// One stored replay item.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplayItem {
    pub x: Vec<Float>,
    pub label: u32,
    /// Full-width probe logits at insertion time.
    pub logits: Vec<Float>,
    /// Classes of the head the item was trained under.
    pub scope: Arc<Vec<u32>>,
}

/// Fixed-capacity reservoir.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<ReplayItem>,
    seen: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer {
            capacity,
            items: Vec::with_capacity(capacity),
            seen: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn seen(&self) -> u64 {
        self.seen
    }

    pub fn items(&self) -> &[ReplayItem] {
        &self.items
    }

    /// Reservoir insertion: after `n` offers every offered item is held
    /// with probability `capacity / n`.
    pub fn insert(&mut self, item: ReplayItem, rng: &mut RngStream) {
        self.seen += 1;
        if self.items.len() < self.capacity {
            self.items.push(item);
        } else if self.capacity > 0 {
            let j = rng.gen_range(0..self.seen);
            if (j as usize) < self.capacity {
                self.items[j as usize] = item;
            }
        }
    }

    /// Up to `n` distinct items drawn uniformly.
    pub fn sample(&self, n: usize, rng: &mut RngStream) -> Vec<&ReplayItem> {
        let n = n.min(self.items.len());
        if n == 0 {
            return Vec::new();
        }
        index::sample(rng, self.items.len(), n)
            .into_iter()
            .map(|i| &self.items[i])
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DerppConfig {
    pub alpha: f64,
    pub beta: f64,
    pub buffer_size: usize,
    pub replay_samples: usize,
}

impl Default for DerppConfig {
    fn default() -> Self {
        DerppConfig {
            alpha: 0.5,
            beta: 0.5,
            buffer_size: DEFAULT_BUFFER_SIZE,
            replay_samples: DEFAULT_REPLAY_SAMPLES,
        }
    }
}

/// `CE(batch) + α·MSE(logits on replay, stored logits) + β·CE(replay)`,
/// then the batch enters the buffer with the logits of this step's forward
/// pass. Replay draws and reservoir decisions come from `rng`.
pub fn derpp_step(
    batch: &[&PooledSample],
    scope: &Arc<Vec<u32>>,
    buffer: &mut ReplayBuffer,
    probe: &mut LinearProbe,
    opt: &mut ProbeOptimizer,
    config: &DerppConfig,
    rng: &mut RngStream,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let mut grads = ProbeGrads::zeros(probe);
    let forward: Vec<Vec<Float>> = batch.iter().map(|s| probe.logits(&s.x)).collect::<Result<_>>()?;
    let mut loss = batch_ce(probe, batch, scope, &mut grads, 1.0)?;

    let replay = buffer.sample(config.replay_samples, rng);
    if !replay.is_empty() {
        let m = replay.len() as Float;
        for item in &replay {
            let logits = probe.logits(&item.x)?;
            if config.alpha != 0.0 {
                let n = logits.len() as Float;
                let mut d = vec![0.0; logits.len()];
                let mut mse = 0.0;
                for ((di, &l), &s) in d.iter_mut().zip(&logits).zip(&item.logits) {
                    let e = l - s;
                    mse += (e * e) as f64;
                    *di = 2.0 * e / n;
                }
                loss += config.alpha * mse / (n as f64 * m as f64);
                grads.accumulate(&item.x, &d, config.alpha as Float / m);
            }
            if config.beta != 0.0 {
                let (l, d) = scoped_cross_entropy(&logits, &item.scope, item.label)?;
                loss += config.beta * l / m as f64;
                grads.accumulate(&item.x, &d, config.beta as Float / m);
            }
        }
    }
    opt.step(probe, &grads)?;
    for (s, logits) in batch.iter().zip(forward) {
        buffer.insert(
            ReplayItem {
                x: s.x.clone(),
                label: s.label,
                logits,
                scope: scope.clone(),
            },
            rng,
        );
    }
    Ok(loss)
}

/// Which probe-training rule a [`ProbeLearner`] applies.
#[derive(Clone, Debug, PartialEq)]
pub enum BaselineMethod {
    Ncl,
    Ewc { lambda: f64, mode: EwcMode, fisher_samples: Option<usize> },
    Derpp(DerppConfig),
}

impl BaselineMethod {
    pub fn name(&self) -> &'static str {
        match self {
            BaselineMethod::Ncl => "ncl",
            BaselineMethod::Ewc { .. } => "ewc",
            BaselineMethod::Derpp(_) => "derpp",
        }
    }

    pub fn ewc_default() -> Self {
        BaselineMethod::Ewc {
            lambda: DEFAULT_EWC_LAMBDA,
            mode: EwcMode::Additive,
            fisher_samples: None,
        }
    }
}

impl fmt::Display for BaselineMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BaselineMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ncl" => Ok(BaselineMethod::Ncl),
            "ewc" => Ok(BaselineMethod::ewc_default()),
            "derpp" | "der++" => Ok(BaselineMethod::Derpp(DerppConfig::default())),
            other => Err(Error::InvalidConfig(format!("unknown baseline {other:?}"))),
        }
    }
}

/// Linear-probe learner for the harness.
#[derive(Clone, Debug)]
pub struct ProbeLearner {
    method: BaselineMethod,
    hp: Hyperparams,
    seed: u64,
    pub probe: LinearProbe,
    opt: ProbeOptimizer,
    multi_head: bool,
    all_classes: Arc<Vec<u32>>,
    /// task ID -> classes, for multi-head routing.
    scopes: std::collections::BTreeMap<u32, Arc<Vec<u32>>>,
    ewc: Ewc,
    buffer: ReplayBuffer,
    replay_rng: RngStream,
    /// pooled training data of the current task
    pooled: Vec<PooledSample>,
}

impl ProbeLearner {
    pub fn new(method: BaselineMethod, scenario: &ScenarioSpec, hp: Hyperparams, seed: u64) -> Result<Self> {
        hp.validate()?;
        if let BaselineMethod::Ewc { lambda, .. } = method {
            if !(lambda.is_finite() && lambda >= 0.0) {
                return Err(Error::InvalidConfig(format!("lambda: {lambda} is not valid")));
            }
        }
        let n = scenario.num_classes;
        let probe = LinearProbe::new(scenario.h, n, &mut RngStream::new(seed, STREAM_INIT));
        let config = AdamWConfig {
            lr: hp.decoder_lr,
            weight_decay: hp.weight_decay,
            ..Default::default()
        };
        let (lambda, mode) = match method {
            BaselineMethod::Ewc { lambda, mode, .. } => (lambda, mode),
            _ => (0.0, EwcMode::Additive),
        };
        let capacity = match method {
            BaselineMethod::Derpp(c) => c.buffer_size,
            _ => 0,
        };
        Ok(ProbeLearner {
            opt: ProbeOptimizer::new(&probe, config),
            probe,
            method,
            hp,
            seed,
            multi_head: scenario.kind.multi_head(),
            all_classes: Arc::new((0..n as u32).collect()),
            scopes: Default::default(),
            ewc: Ewc::new(lambda, mode),
            buffer: ReplayBuffer::new(capacity),
            replay_rng: RngStream::new(seed, STREAM_REPLAY),
            pooled: Vec::new(),
        })
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    pub fn ewc(&self) -> &Ewc {
        &self.ewc
    }

    fn scope(&self, task_id: Option<u32>) -> Result<Arc<Vec<u32>>> {
        match (self.multi_head, task_id) {
            (false, None) => Ok(self.all_classes.clone()),
            (false, Some(t)) => Err(Error::Routing(format!(
                "task ID {t} supplied to a single-head model"
            ))),
            (true, None) => Err(Error::Routing("multi-head model needs a task ID".into())),
            (true, Some(t)) => self
                .scopes
                .get(&t)
                .cloned()
                .ok_or_else(|| Error::Routing(format!("unknown task ID {t}"))),
        }
    }

    fn task_key(&self, task: &TaskSet) -> Option<u32> {
        self.multi_head.then_some(task.task_id)
    }
}

impl Predictor for ProbeLearner {
    fn predict(&self, record: &EmbeddingRecord, task_id: Option<u32>) -> Result<u32> {
        let scope = self.scope(task_id)?;
        let x = PooledSample::from_record(record)?.x;
        self.probe.predict(&x, &scope)
    }
}

impl Learner for ProbeLearner {
    fn method(&self) -> &str {
        self.method.name()
    }

    fn epochs(&self) -> usize {
        self.hp.epochs
    }

    fn begin_task(&mut self, _scenario: &ScenarioSpec, task: &TaskSet) -> Result<()> {
        if self.multi_head {
            self.scopes
                .insert(task.task_id, Arc::new(task.classes.iter().copied().collect()));
        }
        self.pooled = task
            .train
            .iter()
            .map(|r| PooledSample::from_record(r))
            .collect::<Result<_>>()?;
        Ok(())
    }

    fn train_epoch(&mut self, task: &TaskSet, epoch: usize) -> Result<f64> {
        if self.pooled.len() != task.train.len() {
            return Err(Error::InvalidState("train_epoch before begin_task".into()));
        }
        let scope = self.scope(self.task_key(task))?;
        let order = epoch_order(self.seed, task.task_id, epoch, self.pooled.len());
        let (mut total, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(self.hp.batch_size) {
            let batch: Vec<&PooledSample> = chunk.iter().map(|&i| &self.pooled[i]).collect();
            total += match &self.method {
                BaselineMethod::Ncl => ncl_step(&batch, &scope, &mut self.probe, &mut self.opt)?,
                BaselineMethod::Ewc { .. } => ewc_step(
                    &batch,
                    &scope,
                    &mut self.probe,
                    &mut self.opt,
                    &self.ewc.anchors,
                    self.ewc.lambda,
                )?,
                BaselineMethod::Derpp(c) => derpp_step(
                    &batch,
                    &scope,
                    &mut self.buffer,
                    &mut self.probe,
                    &mut self.opt,
                    c,
                    &mut self.replay_rng,
                )?,
            };
            batches += 1;
        }
        Ok(if batches == 0 { 0.0 } else { total / batches as f64 })
    }

    fn end_task(&mut self, task: &TaskSet) -> Result<()> {
        if let BaselineMethod::Ewc { fisher_samples, .. } = self.method {
            if !self.pooled.is_empty() {
                let scope = self.scope(self.task_key(task))?;
                let f = fisher_estimate(&self.pooled, &scope, &self.probe, fisher_samples)?;
                self.ewc.consolidate(f);
            }
        }
        self.pooled.clear();
        Ok(())
    }
}
