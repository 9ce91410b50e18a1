//! BPR training with the interaction-rate regularizer.
//!
//! The objective is `L_debias = L_BPR + lambda_f * L_IPL`, where `L_IPL` is the
//! population standard deviation over items of the model-expected rate
//! `r_hat_i = sum_{u in U_i} sigma(y_ui) / |U_i|^(2 - gamma)`.
//!
//! All gradients are analytic. For LightGCN they are first taken with respect
//! to the propagated embeddings and then mapped back onto the base tables
//! through the (symmetric) propagation operator.

use std::borrow::Cow;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{InteractionLog, SplitBundle};
use crate::estimator::rate_denominator;
use crate::model::{self, dot, EmbeddingTable, Model, ModelError, ModelKind};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("model shape ({model_users}, {model_items}) does not match split ({log_users}, {log_items})")]
    ShapeMismatch {
        model_users: usize,
        model_items: usize,
        log_users: usize,
        log_items: usize,
    },
    #[error("training log is empty")]
    EmptyTrain,
    #[error("empty batch")]
    EmptyBatch,
    #[error("item {0} has no training users; its rate is undefined")]
    ItemWithoutUsers(u32),
    #[error("loss diverged at epoch {epoch}, step {step}: {breakdown:?}")]
    Diverged {
        epoch: usize,
        step: usize,
        breakdown: LossBreakdown,
    },
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow; `-ln sigma(x) = softplus(-x)`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BprTriple {
    pub user: u32,
    pub pos: u32,
    pub neg: u32,
}

/// Draws BPR triples: a training interaction uniformly at random (so users appear
/// in proportion to their degree) and a uniform negative by rejection.
///
/// Users whose positives cover the whole catalog cannot yield a negative and are skipped.
pub struct BprSampler<'a> {
    train: &'a InteractionLog,
    eligible: usize,
}

impl<'a> BprSampler<'a> {
    pub fn new(train: &'a InteractionLog) -> Self {
        let n_items = train.n_items();
        let saturated: Vec<u32> = (0..train.n_users() as u32)
            .filter(|&u| train.user_degree(u) >= n_items && n_items > 0)
            .collect();
        if !saturated.is_empty() {
            log::warn!(
                "{} users interacted with every item and are skipped by the sampler",
                saturated.len()
            );
        }
        let eligible = train.n_interactions()
            - saturated.iter().map(|&u| train.user_degree(u)).sum::<usize>();
        Self { train, eligible }
    }

    pub fn sample<R: Rng>(&self, batch_size: usize, rng: &mut R) -> Vec<BprTriple> {
        if self.eligible == 0 {
            return Vec::new();
        }
        let offsets = self.train.user_offsets();
        let flat = self.train.flat_items();
        let n_items = self.train.n_items() as u32;
        let mut batch = Vec::with_capacity(batch_size);
        while batch.len() < batch_size {
            let r = rng.random_range(0..flat.len());
            let user = (offsets.partition_point(|&o| o <= r) - 1) as u32;
            let positives = self.train.items_of(user);
            if positives.len() as u32 >= n_items {
                continue;
            }
            let neg = loop {
                let j = rng.random_range(0..n_items);
                if positives.binary_search(&j).is_err() {
                    break j;
                }
            };
            batch.push(BprTriple {
                user,
                pos: flat[r],
                neg,
            });
        }
        batch
    }
}

pub fn sample_bpr_batch<R: Rng>(train: &InteractionLog, batch_size: usize, rng: &mut R) -> Vec<BprTriple> {
    BprSampler::new(train).sample(batch_size, rng)
}

/// Gradient with respect to the model's base user and item tables.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub users: EmbeddingTable,
    pub items: EmbeddingTable,
}

impl Gradients {
    pub fn zeros_like(model: &Model) -> Self {
        Self {
            users: EmbeddingTable::zeros(model.n_users(), model.dim()),
            items: EmbeddingTable::zeros(model.n_items(), model.dim()),
        }
    }

    pub fn norm(&self) -> f64 {
        (self.users.squared_norm() + self.items.squared_norm()).sqrt()
    }

    pub fn add_scaled(&mut self, alpha: f64, other: &Gradients) {
        for (a, b) in self
            .users
            .values_mut()
            .iter_mut()
            .zip(other.users.values())
            .chain(self.items.values_mut().iter_mut().zip(other.items.values()))
        {
            *a += alpha * b;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_bpr: f64,
    pub l_ipl: f64,
    pub l_total: f64,
    pub grad_norm: f64,
}

/// Items the regularizer's standard deviation runs over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IplScope {
    /// Distinct positive items of the current batch, each with all its training users.
    Batch,
    /// Every item with at least one training user.
    Full,
}

impl std::str::FromStr for IplScope {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "batch" => Ok(IplScope::Batch),
            "full" => Ok(IplScope::Full),
            other => Err(format!("unknown IPL scope {other:?}")),
        }
    }
}

struct Effective<'a> {
    users: Cow<'a, EmbeddingTable>,
    items: Cow<'a, EmbeddingTable>,
}

fn effective(model: &Model) -> Result<Effective<'_>> {
    Ok(match model.kind() {
        ModelKind::Mf => Effective {
            users: Cow::Borrowed(model.user_embeddings()),
            items: Cow::Borrowed(model.item_embeddings()),
        },
        ModelKind::LightGcn => {
            let (u, i) = model.propagate()?;
            Effective {
                users: Cow::Owned(u),
                items: Cow::Owned(i),
            }
        }
    })
}

/// Maps gradients taken w.r.t. the scoring embeddings onto the base tables.
fn pull_back(model: &Model, grads: Gradients) -> Result<Gradients> {
    match model.kind() {
        ModelKind::Mf => Ok(grads),
        ModelKind::LightGcn => {
            let g = model.graph().ok_or(ModelError::MissingGraph)?;
            let (users, items) = model::propagate(g, &grads.users, &grads.items, model.n_layers());
            Ok(Gradients { users, items })
        }
    }
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    y.iter_mut().zip(x).for_each(|(y, x)| *y += alpha * x);
}

/// Mean `-ln sigma(y_pos - y_neg)`; accumulates its gradient w.r.t. the scoring embeddings.
fn bpr_data_term(eff: &Effective<'_>, batch: &[BprTriple], grads: &mut Gradients) -> f64 {
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    for t in batch {
        let (u, p, n) = (t.user as usize, t.pos as usize, t.neg as usize);
        let eu = eff.users.row(u);
        let ep = eff.items.row(p);
        let en = eff.items.row(n);
        let x = dot(eu, ep) - dot(eu, en);
        loss += softplus(-x);
        // d/dx softplus(-x) = -sigma(-x)
        let g = -sigmoid(-x) * scale;
        let diff: Vec<f64> = ep.iter().zip(en).map(|(a, b)| a - b).collect();
        axpy(g, &diff, grads.users.row_mut(u));
        axpy(g, eu, grads.items.row_mut(p));
        axpy(-g, eu, grads.items.row_mut(n));
    }
    loss * scale
}

/// `l2 * ||rows touched by the batch||^2` on the base tables, each distinct row once.
fn l2_term(model: &Model, batch: &[BprTriple], l2: f64, grads: &mut Gradients) -> f64 {
    if l2 == 0.0 {
        return 0.0;
    }
    let mut users: Vec<u32> = batch.iter().map(|t| t.user).collect();
    let mut items: Vec<u32> = batch.iter().flat_map(|t| [t.pos, t.neg]).collect();
    users.sort_unstable();
    users.dedup();
    items.sort_unstable();
    items.dedup();
    let mut reg = 0.0;
    for &u in &users {
        let e = model.user_embeddings().row(u as usize);
        reg += dot(e, e);
        axpy(2.0 * l2, e, grads.users.row_mut(u as usize));
    }
    for &i in &items {
        let e = model.item_embeddings().row(i as usize);
        reg += dot(e, e);
        axpy(2.0 * l2, e, grads.items.row_mut(i as usize));
    }
    l2 * reg
}

/// `r_hat_i` for each item over all its training users.
fn expected_rates(eff: &Effective<'_>, items: &[u32], train: &InteractionLog, gamma: f64) -> Result<Vec<f64>> {
    items
        .iter()
        .map(|&i| {
            let users = train.users_of(i);
            if users.is_empty() {
                return Err(TrainError::ItemWithoutUsers(i));
            }
            let ei = eff.items.row(i as usize);
            let s: f64 = users
                .iter()
                .map(|&u| sigmoid(dot(eff.users.row(u as usize), ei)))
                .sum();
            Ok(s / rate_denominator(users.len() as f64, gamma))
        })
        .collect()
}

/// Population std of `r_hat` over `items` with divisor `m_effective`; adds
/// `weight * d std` to `grads` (w.r.t. the scoring embeddings) when `weight != 0`.
fn ipl_term(
    eff: &Effective<'_>,
    items: &[u32],
    train: &InteractionLog,
    gamma: f64,
    m_effective: usize,
    weight: f64,
    grads: &mut Gradients,
) -> Result<f64> {
    if items.is_empty() {
        return Ok(0.0);
    }
    let rates = expected_rates(eff, items, train, gamma)?;
    let m = m_effective as f64;
    let mean = rates.iter().sum::<f64>() / m;
    let var = rates.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / m;
    let std = var.sqrt();
    // zero variance is the regularizer's optimum; take the zero subgradient there
    if weight == 0.0 || std == 0.0 {
        return Ok(std);
    }
    for (&i, &r) in items.iter().zip(&rates) {
        let users = train.users_of(i);
        let d_rate = weight * (r - mean) / (m * std) / rate_denominator(users.len() as f64, gamma);
        let ei = eff.items.row(i as usize);
        let mut gi = vec![0.0; ei.len()];
        for &u in users {
            let eu = eff.users.row(u as usize);
            let s = sigmoid(dot(eu, ei));
            let coef = d_rate * s * (1.0 - s);
            axpy(coef, ei, grads.users.row_mut(u as usize));
            axpy(coef, eu, &mut gi);
        }
        axpy(1.0, &gi, grads.items.row_mut(i as usize));
    }
    Ok(std)
}

/// Mean BPR loss over the batch plus `l2` times the squared norm of touched rows,
/// with its exact gradient.
pub fn bpr_loss_and_grads(model: &Model, batch: &[BprTriple], l2: f64) -> Result<(f64, Gradients)> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let eff = effective(model)?;
    let mut g = Gradients::zeros_like(model);
    let data = bpr_data_term(&eff, batch, &mut g);
    drop(eff);
    let mut g = pull_back(model, g)?;
    let reg = l2_term(model, batch, l2, &mut g);
    Ok((data + reg, g))
}

/// The interaction-rate regularizer over `items` and its gradient.
pub fn ipl_regularizer(
    model: &Model,
    items: &[u32],
    train: &InteractionLog,
    gamma: f64,
    m_effective: usize,
) -> Result<(f64, Gradients)> {
    let eff = effective(model)?;
    let mut g = Gradients::zeros_like(model);
    let l = ipl_term(&eff, items, train, gamma, m_effective, 1.0, &mut g)?;
    drop(eff);
    Ok((l, pull_back(model, g)?))
}

/// Model-expected rates `r_hat_i`, exposed for inspection and equivalence checks.
pub fn model_expected_rates(model: &Model, items: &[u32], train: &InteractionLog, gamma: f64) -> Result<Vec<f64>> {
    let eff = effective(model)?;
    expected_rates(&eff, items, train, gamma)
}

/// Items with at least one training user.
pub fn rated_items(train: &InteractionLog) -> Vec<u32> {
    (0..train.n_items() as u32)
        .filter(|&i| train.item_degree(i) > 0)
        .collect()
}

fn batch_items(batch: &[BprTriple]) -> Vec<u32> {
    let mut items: Vec<u32> = batch.iter().map(|t| t.pos).collect();
    items.sort_unstable();
    items.dedup();
    items
}

/// `L_debias` and its gradient for one batch. With `lambda_f = 0` the IPL
/// value is still reported but contributes nothing to the gradient.
pub fn debias_loss_and_grads(
    model: &Model,
    batch: &[BprTriple],
    train: &InteractionLog,
    l2: f64,
    lambda_f: f64,
    gamma: f64,
    ipl_items: &[u32],
) -> Result<(LossBreakdown, Gradients)> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let eff = effective(model)?;
    let mut g = Gradients::zeros_like(model);
    let data = bpr_data_term(&eff, batch, &mut g);
    let l_ipl = ipl_term(&eff, ipl_items, train, gamma, ipl_items.len(), lambda_f, &mut g)?;
    drop(eff);
    let mut g = pull_back(model, g)?;
    let l_bpr = data + l2_term(model, batch, l2, &mut g);
    let breakdown = LossBreakdown {
        l_bpr,
        l_ipl,
        l_total: l_bpr + lambda_f * l_ipl,
        grad_norm: g.norm(),
    };
    Ok((breakdown, g))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    /// Per-parameter learning rates scaled by accumulated squared gradients.
    Adagrad,
}

impl std::str::FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adagrad" | "adaptive" => Ok(OptimizerKind::Adagrad),
            other => Err(format!("unknown optimizer {other:?}")),
        }
    }
}

const ADAGRAD_EPS: f64 = 1e-10;

struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    acc_users: Vec<f64>,
    acc_items: Vec<f64>,
}

impl Optimizer {
    fn new(kind: OptimizerKind, lr: f64, model: &Model) -> Self {
        let (nu, ni) = match kind {
            OptimizerKind::Sgd => (0, 0),
            OptimizerKind::Adagrad => (
                model.n_users() * model.dim(),
                model.n_items() * model.dim(),
            ),
        };
        Self {
            kind,
            lr,
            acc_users: vec![0.0; nu],
            acc_items: vec![0.0; ni],
        }
    }

    fn apply(&mut self, model: &mut Model, grads: &Gradients) {
        let lr = self.lr;
        let step = |params: &mut [f64], g: &[f64], acc: &mut [f64], kind: OptimizerKind| match kind {
            OptimizerKind::Sgd => params.iter_mut().zip(g).for_each(|(p, g)| *p -= lr * g),
            OptimizerKind::Adagrad => {
                for ((p, g), a) in params.iter_mut().zip(g).zip(acc.iter_mut()) {
                    if *g != 0.0 {
                        *a += g * g;
                        *p -= lr * g / (a.sqrt() + ADAGRAD_EPS);
                    }
                }
            }
        };
        step(
            model.user_embeddings_mut().values_mut(),
            grads.users.values(),
            &mut self.acc_users,
            self.kind,
        );
        step(
            model.item_embeddings_mut().values_mut(),
            grads.items.values(),
            &mut self.acc_items,
            self.kind,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopping {
    pub patience: usize,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub lambda_f: f64,
    pub gamma: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    /// Epochs between validation Recall@k evaluations; 0 disables them.
    pub eval_every: usize,
    pub ipl_scope: IplScope,
    pub early_stopping: Option<EarlyStopping>,
    /// Defaults to `ceil(train interactions / batch_size)`.
    pub steps_per_epoch: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 1024,
            learning_rate: 0.05,
            l2: 1e-4,
            lambda_f: 0.0,
            gamma: 1.826,
            optimizer: OptimizerKind::Sgd,
            seed: 0,
            eval_every: 0,
            ipl_scope: IplScope::Batch,
            early_stopping: None,
            steps_per_epoch: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.to_owned()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad("learning_rate must be finite and non-negative");
        }
        if !(self.l2.is_finite() && self.l2 >= 0.0) {
            return bad("l2 must be finite and non-negative");
        }
        if !(self.lambda_f.is_finite() && self.lambda_f >= 0.0) {
            return bad("lambda_f must be finite and non-negative");
        }
        if !self.gamma.is_finite() {
            return bad("gamma must be finite");
        }
        if let Some(es) = self.early_stopping {
            if es.k == 0 || self.eval_every == 0 {
                return bad("early stopping needs k >= 1 and eval_every >= 1");
            }
        }
        Ok(())
    }
}

/// Snapshot logged once before training (epoch 0) and after every epoch.
///
/// The loss fields are evaluated on a fixed probe batch drawn once at the
/// start, so they are a pure function of the parameters; `mean_step_total`
/// averages the losses of the epoch's optimization steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub mean_step_total: Option<f64>,
    pub val_recall: Option<f64>,
}

pub fn write_trace_csv<W: std::io::Write>(trace: &[EpochRecord], mut out: W) -> std::io::Result<()> {
    writeln!(out, "epoch,l_bpr,l_ipl,l_total,val_recall")?;
    for r in trace {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.epoch,
            r.loss.l_bpr,
            r.loss.l_ipl,
            r.loss.l_total,
            r.val_recall.map(|v| v.to_string()).unwrap_or_default()
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

/// Observer hooks for a training run.
pub trait TrainObserver {
    fn on_step(&mut self, _epoch: usize, _step: usize, _loss: &LossBreakdown, _model: &Model) {}

    fn on_epoch(&mut self, _record: &EpochRecord) -> Control {
        Control::Continue
    }
}

pub struct NoopObserver;

impl TrainObserver for NoopObserver {}

const PROBE_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

/// Mini-batch optimizer over `L_debias`.
///
/// Batches are drawn from `ChaCha8Rng::seed_from_u64(config.seed)` and nothing
/// else consumes that stream, so a run is reproducible from its seed.
pub struct Trainer<'a> {
    model: Model,
    train: &'a InteractionLog,
    sampler: BprSampler<'a>,
    config: TrainConfig,
    rng: ChaCha8Rng,
    optimizer: Optimizer,
    full_items: Vec<u32>,
    probe: Vec<BprTriple>,
    steps: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(mut model: Model, train: &'a InteractionLog, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if model.n_users() != train.n_users() || model.n_items() != train.n_items() {
            return Err(TrainError::ShapeMismatch {
                model_users: model.n_users(),
                model_items: model.n_items(),
                log_users: train.n_users(),
                log_items: train.n_items(),
            });
        }
        if train.is_empty() {
            return Err(TrainError::EmptyTrain);
        }
        if model.kind() == ModelKind::LightGcn && model.graph().is_none() {
            model.attach_graph(train)?;
        }
        let sampler = BprSampler::new(train);
        let mut probe_rng = ChaCha8Rng::seed_from_u64(config.seed ^ PROBE_STREAM);
        let probe = sampler.sample(config.batch_size, &mut probe_rng);
        if probe.is_empty() {
            return Err(TrainError::EmptyBatch);
        }
        let optimizer = Optimizer::new(config.optimizer, config.learning_rate, &model);
        let steps = config
            .steps_per_epoch
            .unwrap_or_else(|| train.n_interactions().div_ceil(config.batch_size));
        Ok(Self {
            full_items: rated_items(train),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            model,
            train,
            sampler,
            config,
            optimizer,
            probe,
            steps,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.steps
    }

    fn ipl_items(&self, batch: &[BprTriple]) -> Cow<'_, [u32]> {
        match self.config.ipl_scope {
            IplScope::Batch => Cow::Owned(batch_items(batch)),
            IplScope::Full => Cow::Borrowed(&self.full_items),
        }
    }

    /// Loss of the current parameters on the probe batch.
    pub fn probe_loss(&self) -> Result<LossBreakdown> {
        let items = self.ipl_items(&self.probe);
        let c = &self.config;
        let (loss, _) = debias_loss_and_grads(&self.model, &self.probe, self.train, c.l2, c.lambda_f, c.gamma, &items)?;
        Ok(loss)
    }

    /// One optimization step on a freshly sampled batch.
    pub fn step(&mut self) -> Result<LossBreakdown> {
        let batch = self.sampler.sample(self.config.batch_size, &mut self.rng);
        if batch.is_empty() {
            return Err(TrainError::EmptyBatch);
        }
        let c = &self.config;
        let items = match c.ipl_scope {
            IplScope::Batch => batch_items(&batch),
            IplScope::Full => self.full_items.clone(),
        };
        let (loss, grads) =
            debias_loss_and_grads(&self.model, &batch, self.train, c.l2, c.lambda_f, c.gamma, &items)?;
        if loss.l_total.is_finite() {
            self.optimizer.apply(&mut self.model, &grads);
        }
        Ok(loss)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub trace: Vec<EpochRecord>,
    /// Epoch whose parameters were returned (differs from the last one under early stopping).
    pub best_epoch: usize,
}

fn validation_recall(model: &Model, train: &InteractionLog, validation: &InteractionLog, k: usize) -> Result<Option<f64>> {
    let users: Vec<u32> = (0..validation.n_users() as u32)
        .filter(|&u| validation.user_degree(u) > 0)
        .collect();
    if users.is_empty() {
        return Ok(None);
    }
    let scorer = model.scorer()?;
    let run = model::top_k(&scorer, &users, k, Some(train), false)?;
    Ok(crate::eval::precision_recall_ndcg(&run, validation, k, false)
        .ok()
        .map(|a| a.recall))
}

/// Trains `model` on `split.train`, evaluating on `split.validation` every
/// `eval_every` epochs. Aborts if the loss becomes non-finite.
pub fn train(
    model: Model,
    split: &SplitBundle,
    config: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    train_on(model, &split.train, Some(&split.validation), config, observer)
}

pub fn train_on(
    model: Model,
    train_log: &InteractionLog,
    validation: Option<&InteractionLog>,
    config: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(model, train_log, config.clone())?;
    let val_k = config.early_stopping.map(|e| e.k).unwrap_or(20);
    let evaluate = |t: &Trainer<'_>, epoch: usize| -> Result<Option<f64>> {
        match validation {
            Some(v) if config.eval_every > 0 && epoch % config.eval_every == 0 => {
                validation_recall(t.model(), train_log, v, val_k)
            }
            _ => Ok(None),
        }
    };

    let mut trace = vec![EpochRecord {
        epoch: 0,
        loss: trainer.probe_loss()?,
        mean_step_total: None,
        val_recall: evaluate(&trainer, 0)?,
    }];
    let mut best: Option<(f64, usize, Model)> = None;
    let mut since_best = 0usize;

    for epoch in 1..=config.epochs {
        let mut total = 0.0;
        for step in 0..trainer.steps_per_epoch() {
            let loss = trainer.step()?;
            if !loss.l_total.is_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    step,
                    breakdown: loss,
                });
            }
            total += loss.l_total;
            observer.on_step(epoch, step, &loss, trainer.model());
        }
        let record = EpochRecord {
            epoch,
            loss: trainer.probe_loss()?,
            mean_step_total: Some(total / trainer.steps_per_epoch().max(1) as f64),
            val_recall: evaluate(&trainer, epoch)?,
        };
        trace.push(record);
        let mut stop = observer.on_epoch(&record) == Control::Stop;

        if let (Some(es), Some(recall)) = (config.early_stopping, record.val_recall) {
            if best.as_ref().is_none_or(|b| recall > b.0) {
                best = Some((recall, epoch, trainer.model().clone()));
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= es.patience {
                    log::info!("early stopping at epoch {epoch}");
                    stop = true;
                }
            }
        }
        if stop {
            break;
        }
    }

    let last_epoch = trace.last().map(|r| r.epoch).unwrap_or(0);
    let (model, best_epoch) = match best {
        Some((_, epoch, model)) => (model, epoch),
        None => (trainer.into_model(), last_epoch),
    };
    Ok(TrainOutcome {
        model,
        trace,
        best_epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelSpec;
    use approx::assert_abs_diff_eq;

    #[test]
    fn stable_sigmoid_and_softplus() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert_abs_diff_eq!(softplus(0.0), std::f64::consts::LN_2, epsilon = 1e-15);
        assert!(softplus(-800.0) >= 0.0 && softplus(-800.0) < 1e-300);
        assert_abs_diff_eq!(softplus(800.0), 800.0, epsilon = 1e-12);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) == 1.0);
    }

    #[test]
    fn forced_negative() {
        let log = InteractionLog::from_index_pairs(1, 2, [(0, 0)]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = sample_bpr_batch(&log, 200, &mut rng);
        assert_eq!(batch.len(), 200);
        assert!(batch.iter().all(|t| t.pos == 0 && t.neg == 1));
        assert!(sample_bpr_batch(&log, 0, &mut rng).is_empty());
    }

    #[test]
    fn saturated_users_are_skipped() {
        let log = InteractionLog::from_index_pairs(2, 2, [(0, 0), (0, 1), (1, 0)]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batch = sample_bpr_batch(&log, 50, &mut rng);
        assert!(batch.iter().all(|t| t.user == 1 && t.neg == 1));
        let full = InteractionLog::from_index_pairs(1, 1, [(0, 0)]);
        assert!(sample_bpr_batch(&full, 5, &mut rng).is_empty());
    }

    #[test]
    fn user_frequency_tracks_degree() {
        // degrees 3 and 1 over 5 items: user 0 drawn with probability 3/4
        let log = InteractionLog::from_index_pairs(2, 5, [(0, 0), (0, 1), (0, 2), (1, 3)]);
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let batch = sample_bpr_batch(&log, n, &mut rng);
        let hits = batch.iter().filter(|t| t.user == 0).count() as f64;
        let sd = (n as f64 * 0.75 * 0.25).sqrt();
        assert!((hits - 0.75 * n as f64).abs() < 3.0 * sd, "hits = {hits}");
        for t in &batch {
            assert!(log.contains(t.user, t.pos));
            assert!(!log.contains(t.user, t.neg));
        }
    }

    fn two_item_mf(eu: &[f64], ep: &[f64], en: &[f64]) -> Model {
        Model::from_parts(
            ModelKind::Mf,
            EmbeddingTable::from_values(1, eu.len(), eu.to_vec()),
            EmbeddingTable::from_values(2, eu.len(), [ep, en].concat()),
            0,
        )
        .unwrap()
    }

    #[test]
    fn equal_scores_cost_ln2() {
        let m = two_item_mf(&[1.0, 2.0], &[0.5, 0.5], &[0.5, 0.5]);
        let (l, _) = bpr_loss_and_grads(&m, &[BprTriple { user: 0, pos: 0, neg: 1 }], 0.0).unwrap();
        assert_abs_diff_eq!(l, 0.693147, epsilon = 1e-6);
    }

    #[test]
    fn bpr_asymptotics() {
        let t = [BprTriple { user: 0, pos: 0, neg: 1 }];
        let big = two_item_mf(&[1.0], &[500.0], &[-500.0]);
        assert!(bpr_loss_and_grads(&big, &t, 0.0).unwrap().0 < 1e-300);
        let bad = two_item_mf(&[1.0], &[-500.0], &[500.0]);
        assert_abs_diff_eq!(bpr_loss_and_grads(&bad, &t, 0.0).unwrap().0, 1000.0, epsilon = 1e-9);
    }

    #[test]
    fn single_triple_gradient_matches_differences() {
        let t = [BprTriple { user: 0, pos: 0, neg: 1 }];
        let m = two_item_mf(&[0.3, -1.2], &[0.8, 0.1], &[-0.4, 0.6]);
        let l2 = 0.05;
        let (_, g) = bpr_loss_and_grads(&m, &t, l2).unwrap();
        let h = 1e-6;
        let mut max_rel: f64 = 0.0;
        for (table, idx) in [(0, 0), (0, 1), (1, 0), (1, 1), (1, 2), (1, 3)] {
            let mut plus = m.clone();
            let mut minus = m.clone();
            let (p, q, a) = if table == 0 {
                (plus.user_embeddings_mut(), minus.user_embeddings_mut(), g.users.values()[idx])
            } else {
                (plus.item_embeddings_mut(), minus.item_embeddings_mut(), g.items.values()[idx])
            };
            p.values_mut()[idx] += h;
            q.values_mut()[idx] -= h;
            let fd = (bpr_loss_and_grads(&plus, &t, l2).unwrap().0 - bpr_loss_and_grads(&minus, &t, l2).unwrap().0)
                / (2.0 * h);
            max_rel = max_rel.max((fd - a).abs() / a.abs().max(1e-8));
        }
        assert!(max_rel < 1e-5, "max relative error {max_rel}");
    }

    #[test]
    fn zero_variance_regularizer() {
        let m = Model::from_parts(
            ModelKind::Mf,
            EmbeddingTable::zeros(2, 2),
            EmbeddingTable::zeros(2, 2),
            0,
        )
        .unwrap();
        // each item has 1 user: r_hat = sigma(0) = 0.5 for both
        let log = InteractionLog::from_index_pairs(2, 2, [(0, 0), (1, 1)]);
        let (l, g) = ipl_regularizer(&m, &[0, 1], &log, 1.5, 2).unwrap();
        assert_eq!(l, 0.0);
        assert_eq!(g.norm(), 0.0);
    }

    #[test]
    fn gamma_two_is_plain_sigmoid_sum() {
        let log = InteractionLog::from_index_pairs(3, 2, [(0, 0), (1, 0), (2, 0), (2, 1)]);
        let m = Model::init(&ModelSpec { init_scale: Some(0.7), ..ModelSpec::mf(3, 2, 3) }, 5).unwrap();
        let rates = model_expected_rates(&m, &[0, 1], &log, 2.0).unwrap();
        for (i, r) in [0u32, 1].iter().zip(rates) {
            let direct: f64 = log.users_of(*i).iter().map(|&u| sigmoid(m.score(u, *i).unwrap())).sum();
            assert_eq!(r, direct);
        }
    }

    #[test]
    fn regularizer_rejects_cold_items() {
        let log = InteractionLog::from_index_pairs(1, 2, [(0, 0)]);
        let m = Model::init(&ModelSpec::mf(1, 2, 2), 0).unwrap();
        assert!(matches!(
            ipl_regularizer(&m, &[0, 1], &log, 1.5, 2),
            Err(TrainError::ItemWithoutUsers(1))
        ));
    }

    #[test]
    fn loss_decomposition_holds_every_step() {
        struct Check;
        impl TrainObserver for Check {
            fn on_step(&mut self, _: usize, _: usize, l: &LossBreakdown, _: &Model) {
                let expect = l.l_bpr + 0.3 * l.l_ipl;
                assert!((l.l_total - expect).abs() <= 1e-6 * expect.abs().max(1e-12));
            }
        }
        let pairs: Vec<(u32, u32)> = (0..10u32).flat_map(|u| (0..6u32).filter(move |i| (u + i) % 3 != 0).map(move |i| (u, i))).collect();
        let log = InteractionLog::from_index_pairs(10, 6, pairs);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 8,
            lambda_f: 0.3,
            gamma: 1.4,
            ..TrainConfig::default()
        };
        let m = Model::init(&ModelSpec::mf(10, 6, 4), 1).unwrap();
        train_on(m, &log, None, &cfg, &mut Check).unwrap();
    }

    #[test]
    fn zero_learning_rate_freezes_everything() {
        let log = InteractionLog::from_index_pairs(4, 4, [(0, 0), (1, 1), (2, 2), (3, 3), (0, 1)]);
        let m = Model::init(&ModelSpec::mf(4, 4, 3), 2).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 4,
            learning_rate: 0.0,
            lambda_f: 0.1,
            ..TrainConfig::default()
        };
        let out = train_on(m.clone(), &log, None, &cfg, &mut NoopObserver).unwrap();
        assert_eq!(out.model.user_embeddings(), m.user_embeddings());
        assert_eq!(out.model.item_embeddings(), m.item_embeddings());
        assert_eq!(out.trace.len(), 4);
        assert!(out.trace.iter().all(|r| r.loss == out.trace[0].loss));
    }

    #[test]
    fn config_validation() {
        let bad = TrainConfig {
            lambda_f: -1.0,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(TrainError::Config(_))));
        let es = TrainConfig {
            early_stopping: Some(EarlyStopping { patience: 2, k: 5 }),
            ..TrainConfig::default()
        };
        assert!(es.validate().is_err());
    }

    #[test]
    fn shape_mismatch() {
        let log = InteractionLog::from_index_pairs(2, 2, [(0, 0)]);
        let m = Model::init(&ModelSpec::mf(3, 2, 2), 0).unwrap();
        assert!(matches!(
            Trainer::new(m, &log, TrainConfig::default()),
            Err(TrainError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn divergence_is_reported() {
        let log = InteractionLog::from_index_pairs(2, 3, [(0, 0), (1, 1)]);
        let m = Model::init(&ModelSpec { init_scale: Some(1.0), ..ModelSpec::mf(2, 3, 2) }, 0).unwrap();
        let cfg = TrainConfig {
            epochs: 50,
            batch_size: 2,
            learning_rate: 1e200,
            ..TrainConfig::default()
        };
        let r = train_on(m, &log, None, &cfg, &mut NoopObserver);
        assert!(matches!(r, Err(TrainError::Diverged { .. })), "{r:?}");
    }

    #[test]
    fn early_stopping_restores_best() {
        let pairs: Vec<(u32, u32)> = (0..12u32).flat_map(|u| (0..8u32).filter(move |i| (u + i) % 2 == 0).map(move |i| (u, i))).collect();
        let log = InteractionLog::from_index_pairs(12, 8, pairs);
        let split = crate::dataset::stratified_split(&log, Default::default(), 4).unwrap();
        let cfg = TrainConfig {
            epochs: 30,
            batch_size: 16,
            eval_every: 1,
            early_stopping: Some(EarlyStopping { patience: 2, k: 3 }),
            ..TrainConfig::default()
        };
        let m = Model::init(&ModelSpec::mf(12, 8, 4), 0).unwrap();
        let out = train(m, &split, &cfg, &mut NoopObserver).unwrap();
        assert!(out.best_epoch >= 1);
        assert!(out.trace.iter().skip(1).all(|r| r.val_recall.is_some()));
    }

    fn planted_block() -> InteractionLog {
        InteractionLog::from_index_pairs(4, 4, [(0, 0), (1, 0), (1, 1), (2, 2), (2, 3), (3, 3)])
    }

    fn block_config() -> TrainConfig {
        TrainConfig {
            epochs: 50,
            batch_size: 6,
            learning_rate: 0.1,
            l2: 1e-4,
            gamma: 1.5,
            seed: 11,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn planted_block_is_recovered() {
        let train_log = planted_block();
        let test = InteractionLog::from_index_pairs(4, 4, [(0, 1), (3, 2)]);
        let m = Model::init(&ModelSpec { init_scale: Some(0.1), ..ModelSpec::mf(4, 4, 4) }, 3).unwrap();
        let cfg = TrainConfig { epochs: 300, ..block_config() };
        let out = train_on(m, &train_log, None, &cfg, &mut NoopObserver).unwrap();
        let scorer = out.model.scorer().unwrap();
        let run = model::top_k(&scorer, &[0, 3], 1, Some(&train_log), false).unwrap();
        let acc = crate::eval::precision_recall_ndcg(&run, &test, 1, false).unwrap();
        assert_eq!(acc.recall, 100.0);
        let first = out.trace.first().unwrap().loss.l_bpr;
        let last = out.trace.last().unwrap().loss.l_bpr;
        assert!(last < first, "{first} -> {last}");
    }

    #[test]
    fn bpr_loss_drops_over_50_epochs() {
        let m = Model::init(&ModelSpec::mf(4, 4, 4), 0).unwrap();
        let out = train_on(m, &planted_block(), None, &block_config(), &mut NoopObserver).unwrap();
        assert!(out.trace[50].loss.l_bpr < out.trace[0].loss.l_bpr);
    }

    #[test]
    fn tiny_lambda_is_continuous() {
        let m = Model::init(&ModelSpec::mf(4, 4, 4), 9).unwrap();
        let cfg = TrainConfig { epochs: 1, ..block_config() };
        let a = train_on(m.clone(), &planted_block(), None, &cfg, &mut NoopObserver).unwrap().model;
        let cfg_b = TrainConfig { lambda_f: 1e-12, ..cfg };
        let b = train_on(m, &planted_block(), None, &cfg_b, &mut NoopObserver).unwrap().model;
        let diff: f64 = a
            .user_embeddings()
            .values()
            .iter()
            .chain(a.item_embeddings().values())
            .zip(b.user_embeddings().values().iter().chain(b.item_embeddings().values()))
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(diff < 1e-6, "{diff}");
    }

    #[test]
    fn two_point_population_std() {
        // r_hat = (s, s + 1) is reachable with gamma = 2 and sigma sums; std is 0.5 regardless of s
        let log = InteractionLog::from_index_pairs(3, 2, [(0, 0), (1, 1), (2, 1)]);
        let big = 40.0;
        let m = Model::from_parts(
            ModelKind::Mf,
            EmbeddingTable::from_values(3, 1, vec![1.0, 1.0, 1.0]),
            EmbeddingTable::from_values(2, 1, vec![-big, big]),
            0,
        )
        .unwrap();
        let (l, _) = ipl_regularizer(&m, &[0, 1], &log, 2.0, 2).unwrap();
        assert_abs_diff_eq!(l, 1.0, epsilon = 1e-12);
        let log1 = InteractionLog::from_index_pairs(3, 2, [(0, 0), (1, 1)]);
        let (l1, _) = ipl_regularizer(&m, &[0, 1], &log1, 2.0, 2).unwrap();
        assert_abs_diff_eq!(l1, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn ipl_gradient_matches_differences() {
        let pairs = [(0, 0), (0, 1), (1, 1), (1, 2), (2, 3), (3, 0), (3, 4), (2, 4), (1, 4)];
        let log = InteractionLog::from_index_pairs(4, 5, pairs);
        let items: Vec<u32> = (0..5).collect();
        let m = Model::init(&ModelSpec { init_scale: Some(0.8), ..ModelSpec::mf(4, 5, 3) }, 21).unwrap();
        let (_, g) = ipl_regularizer(&m, &items, &log, 1.3, 5).unwrap();
        let h = 1e-6;
        let f = |m: &Model| ipl_regularizer(m, &items, &log, 1.3, 5).unwrap().0;
        for idx in 0..12 {
            for items_table in [false, true] {
                let mut p = m.clone();
                let mut q = m.clone();
                let (tp, tq, a) = if items_table {
                    (p.item_embeddings_mut(), q.item_embeddings_mut(), g.items.values()[idx])
                } else {
                    (p.user_embeddings_mut(), q.user_embeddings_mut(), g.users.values()[idx])
                };
                tp.values_mut()[idx] += h;
                tq.values_mut()[idx] -= h;
                let fd = (f(&p) - f(&q)) / (2.0 * h);
                let rel = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-6);
                assert!(rel < 1e-4, "idx {idx}: fd {fd} vs {a}");
            }
        }
    }
}
