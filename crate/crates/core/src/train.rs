//! Optimizers and training loops for the five regimes: clean, adversarial
//! training (at), trades, the full similarity objective (afsl), and the
//! ablation ladder s1/s2/s3.
//!
//! Every run is a pure function of (dataset, config): batches and inner
//! attacks derive per-step seeds from the config seed, so identical inputs
//! give bitwise-identical parameters. The inner maximisation re-attacks the
//! current parameters each step with no warm start — the simplest correct
//! min-max realisation.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attack::{self, AttackConfig, LossTarget};
use crate::data::{self, make_paired_batch, Dataset};
use crate::error::{Error, Result};
use crate::eval::{roc_auc, video_level_scores, EvalCondition};
use crate::loss::{afsl_loss, at_loss, lbce, trades_loss, LossWeights, PairedBatch};
use crate::model::{init_params, ArchitectureSpec, Classifier, ModelParams};
use crate::tensor::{Graph, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

/// Seed stream for snapshot-time attacks, disjoint from the per-step
/// streams (`2*step` and `2*step + 1`), which stay far below this bit.
const SNAPSHOT_STREAM: u64 = 1 << 62;

/// Training regime. `s1`..`s3` are the ablation ladder: `s1` is clean
/// training under the ablation's naming, `s2` adds the adversarial
/// similarity term, `s3` is the full objective (same as `afsl`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Clean,
    At,
    Trades,
    Afsl,
    S1,
    S2,
    S3,
}

pub const ALL_REGIMES: [Regime; 7] =
    [Regime::Clean, Regime::At, Regime::Trades, Regime::Afsl, Regime::S1, Regime::S2, Regime::S3];

impl Regime {
    pub fn as_str(&self) -> &'static str {
        match self {
            Regime::Clean => "clean",
            Regime::At => "at",
            Regime::Trades => "trades",
            Regime::Afsl => "afsl",
            Regime::S1 => "s1",
            Regime::S2 => "s2",
            Regime::S3 => "s3",
        }
    }

    /// Whether the regime runs the inner maximisation each step.
    pub fn needs_adversary(&self) -> bool {
        !matches!(self, Regime::Clean | Regime::S1)
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ALL_REGIMES
            .iter()
            .find(|r| r.as_str() == s)
            .copied()
            .ok_or_else(|| Error::InvalidConfig(format!("unknown regime '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
}

impl OptimizerConfig {
    pub fn adam() -> Self {
        OptimizerConfig { kind: OptimizerKind::Adam, lr: 3e-4 }
    }

    pub fn sgd() -> Self {
        OptimizerConfig { kind: OptimizerKind::Sgd, lr: 2e-3 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::InvalidConfig(format!("learning rate must be > 0, got {}", self.lr)));
        }
        Ok(())
    }
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self::adam()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub regime: Regime,
    #[serde(default = "default_architecture")]
    pub architecture: String,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    #[serde(default = "default_steps_per_epoch")]
    pub steps_per_epoch: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Inner-maximisation attack for the adversarial regimes.
    #[serde(default = "AttackConfig::pgd_train")]
    pub attack: AttackConfig,
    #[serde(default)]
    pub loss_weights: LossWeights,
    #[serde(default = "default_trades_beta")]
    pub trades_beta: f64,
    /// Also measure robust AUC (under `attack`) in per-epoch snapshots.
    #[serde(default)]
    pub snapshot_robust: bool,
    pub seed: u64,
}

fn default_architecture() -> String {
    "tiny-cnn".into()
}

fn default_steps_per_epoch() -> usize {
    200
}

fn default_batch_size() -> usize {
    16
}

fn default_trades_beta() -> f64 {
    6.0
}

impl TrainConfig {
    /// Defaults: tiny-cnn, Adam at 3e-4, batch 16, PGD5 inner attack; ten
    /// 200-step epochs make the default 2,000-step budget.
    pub fn new(regime: Regime, seed: u64) -> Self {
        TrainConfig {
            regime,
            architecture: default_architecture(),
            optimizer: OptimizerConfig::default(),
            epochs: 10,
            steps_per_epoch: default_steps_per_epoch(),
            batch_size: default_batch_size(),
            attack: AttackConfig::pgd_train(),
            loss_weights: LossWeights::default(),
            trades_beta: default_trades_beta(),
            snapshot_robust: false,
            seed,
        }
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.steps_per_epoch == 0 {
            return Err(Error::InvalidConfig("steps_per_epoch must be >= 1".into()));
        }
        if self.batch_size == 0 || self.batch_size % 2 != 0 {
            return Err(Error::InvalidConfig(format!(
                "batch_size must be even and positive, got {}",
                self.batch_size
            )));
        }
        if !(self.trades_beta.is_finite() && self.trades_beta >= 0.0) {
            return Err(Error::InvalidConfig(format!("trades_beta must be >= 0, got {}", self.trades_beta)));
        }
        self.optimizer.validate()?;
        self.attack.validate()?;
        self.loss_weights.validate()
    }
}

/// Per-step loss components; absent terms don't apply to the regime.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub total: f64,
    pub dcl: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub asl: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub srl: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kl: Option<f64>,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSnapshot {
    pub epoch: usize,
    pub step: usize,
    pub clean_auc: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub robust_auc: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub steps: Vec<StepRecord>,
    pub snapshots: Vec<EpochSnapshot>,
}

/// First and second moment estimates per parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Vec<f64>> =
            params.tensors().iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        AdamState { t: 0, m: zeros.clone(), v: zeros }
    }

    pub fn timestep(&self) -> u64 {
        self.t
    }
}

fn check_grads(params: &ModelParams, grads: &[Tensor], op: &str) -> Result<()> {
    if grads.len() != params.tensors().len() {
        return Err(Error::ShapeMismatch {
            op: op.into(),
            detail: format!("{} gradients for {} parameters", grads.len(), params.tensors().len()),
        });
    }
    for ((name, tensor), grad) in params.tensors().iter().zip(grads) {
        if grad.shape() != tensor.shape() {
            return Err(Error::ShapeMismatch {
                op: op.into(),
                detail: format!("gradient for '{name}': {:?} vs {:?}", grad.shape(), tensor.shape()),
            });
        }
        if grad.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { context: format!("{op} gradient for '{name}'") });
        }
    }
    Ok(())
}

/// Standard bias-corrected Adam update. A zero gradient leaves parameters
/// bitwise unchanged (the state timestep still advances).
pub fn adam_step(
    params: &mut ModelParams,
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if !(lr.is_finite() && lr > 0.0) {
        return Err(Error::InvalidConfig(format!("learning rate must be > 0, got {lr}")));
    }
    check_grads(params, grads, "adam_step")?;
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    for (i, (_, tensor)) in params.tensors_mut().iter_mut().enumerate() {
        let g = grads[i].data();
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        for (j, p) in tensor.data_mut().iter_mut().enumerate() {
            m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g[j];
            v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPSILON);
        }
    }
    Ok(())
}

/// Plain gradient descent step.
pub fn sgd_step(params: &mut ModelParams, grads: &[Tensor], lr: f64) -> Result<()> {
    if !(lr.is_finite() && lr > 0.0) {
        return Err(Error::InvalidConfig(format!("learning rate must be > 0, got {lr}")));
    }
    check_grads(params, grads, "sgd_step")?;
    for (i, (_, tensor)) in params.tensors_mut().iter_mut().enumerate() {
        let g = grads[i].data();
        for (j, p) in tensor.data_mut().iter_mut().enumerate() {
            *p -= lr * g[j];
        }
    }
    Ok(())
}

enum Optimizer {
    Adam { lr: f64, state: AdamState },
    Sgd { lr: f64 },
}

impl Optimizer {
    fn new(cfg: &OptimizerConfig, params: &ModelParams) -> Self {
        match cfg.kind {
            OptimizerKind::Adam => Optimizer::Adam { lr: cfg.lr, state: AdamState::new(params) },
            OptimizerKind::Sgd => Optimizer::Sgd { lr: cfg.lr },
        }
    }

    fn step(&mut self, params: &mut ModelParams, grads: &[Tensor]) -> Result<()> {
        match self {
            Optimizer::Adam { lr, state } => adam_step(params, grads, state, *lr),
            Optimizer::Sgd { lr } => sgd_step(params, grads, *lr),
        }
    }
}

fn concat_axis0(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape()[1..] != b.shape()[1..] {
        return Err(Error::ShapeMismatch {
            op: "concat_axis0".into(),
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    let mut shape = a.shape().to_vec();
    shape[0] += b.shape()[0];
    let mut data = Vec::with_capacity(a.numel() + b.numel());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::new(shape, data)
}

fn split_axis0(t: &Tensor, at: usize) -> (Tensor, Tensor) {
    let block = t.numel() / t.shape()[0];
    let mut head_shape = t.shape().to_vec();
    let mut tail_shape = t.shape().to_vec();
    head_shape[0] = at;
    tail_shape[0] = t.shape()[0] - at;
    let head = Tensor::new(head_shape, t.data()[..at * block].to_vec()).expect("head split");
    let tail = Tensor::new(tail_shape, t.data()[at * block..].to_vec()).expect("tail split");
    (head, tail)
}

/// Holds out every fifth identity group for per-epoch snapshots; the rest
/// feeds the batch sampler. A group is a source video together with every
/// fake derived from it, so the fold never shares an identity with the pool
/// and fold metrics measure generalisation rather than recall. The fold is a
/// pure function of source ids, so it is identical across regimes and runs.
pub fn snapshot_split(dataset: &Dataset) -> Result<(Dataset, Dataset)> {
    let has_real = dataset.samples().iter().any(|s| s.label() == 1);
    let has_fake = dataset.samples().iter().any(|s| s.label() == 0);
    if !has_real || !has_fake {
        return Err(Error::ClassExhausted("training needs both classes present".into()));
    }
    let sources: Vec<usize> = dataset
        .samples()
        .iter()
        .map(|s| s.source_video())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let fold: std::collections::BTreeSet<usize> =
        sources.iter().copied().step_by(5).collect();
    let (mut pool, mut held) = (Vec::new(), Vec::new());
    for s in dataset.samples() {
        if fold.contains(&s.source_video()) {
            held.push(s.clone());
        } else {
            pool.push(s.clone());
        }
    }
    let both = |part: &[crate::data::Sample]| {
        part.iter().any(|s| s.label() == 1) && part.iter().any(|s| s.label() == 0)
    };
    if !both(&held) || !both(&pool) {
        return Err(Error::ClassExhausted(
            "snapshot fold needs both classes on each side; dataset has too few identity groups".into(),
        ));
    }
    Ok((
        Dataset::from_samples(dataset.config().clone(), pool)?,
        Dataset::from_samples(dataset.config().clone(), held)?,
    ))
}

fn wrap_step_error(err: Error, step: usize) -> Error {
    match err {
        Error::NonFinite { context } => {
            Error::NonFinite { context: format!("step {step}: {context}") }
        }
        other => other,
    }
}

/// Generates the adversarial counterpart of the batch under the regime's
/// inner maximisation.
fn attack_batch(
    params: &ModelParams,
    batch: PairedBatch,
    regime: Regime,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<PairedBatch> {
    let p = batch.pair_count();
    let x = concat_axis0(batch.real(), batch.fake())?;
    let labels = batch.labels();
    let x_adv = match regime {
        Regime::Trades => {
            // TRADES' inner maximisation targets the KL term, not the
            // classification loss. The KL gradient vanishes exactly at the
            // clean point (softmax(q) - p == 0 when q == p), so a random
            // start is mandatory or the attack never moves.
            let inner = AttackConfig { random_start: true, ..cfg.attack.clone() };
            let clean_logits = params.logits(&x)?;
            let mut eval = |xt: &Tensor| -> Result<(Vec<f64>, Tensor)> {
                let mut g = Graph::new();
                let xn = g.leaf(xt.clone(), true);
                let logits_adv = params.logits_graph(&mut g, xn)?;
                let clean = g.constant(clean_logits.clone());
                let rows = crate::loss::kl_divergence_rows(&mut g, clean, logits_adv)?;
                let total = g.sum(rows)?;
                let row_values = g.value(rows).data().to_vec();
                let grads = g.backward(total)?;
                let grad =
                    grads.get(&xn).cloned().unwrap_or_else(|| Tensor::zeros(xt.shape().to_vec()));
                Ok((row_values, grad))
            };
            attack::linf_ascend(&x, &inner, seed, &mut eval)?.0
        }
        Regime::Afsl | Regime::S2 | Regime::S3 => {
            // Adversaries come from the configured attack — by default the
            // classification-loss PGD, so the similarity term aligns exactly
            // the perturbation directions a classification attack exploits.
            // When the config selects the feature-dissimilarity target
            // instead, a random start is forced: cosine similarity is
            // maximal at the clean point, so its gradient vanishes there.
            let inner = if cfg.attack.loss_target == LossTarget::FeatureDissimilarity {
                AttackConfig { random_start: true, ..cfg.attack.clone() }
            } else {
                cfg.attack.clone()
            };
            attack::pgd(params, &x, &labels, &inner, seed)?
        }
        _ => attack::pgd(params, &x, &labels, &cfg.attack, seed)?,
    };
    let (real_adv, fake_adv) = split_axis0(&x_adv, p);
    batch.with_adversarial(real_adv, fake_adv)
}

struct StepOutcome {
    record: StepRecord,
    grads: Vec<Tensor>,
}

fn train_step(
    params: &ModelParams,
    batch: &PairedBatch,
    cfg: &TrainConfig,
    step: usize,
) -> Result<StepOutcome> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, true);
    let labels = batch.labels();
    let (total_node, dcl, asl, srl, kl) = match cfg.regime {
        Regime::Clean | Regime::S1 => {
            let x = g.constant(concat_axis0(batch.real(), batch.fake())?);
            let logits = bound.logits(&mut g, x)?;
            let loss = lbce(&mut g, logits, &labels, &cfg.loss_weights)?;
            let v = g.value(loss).scalar_value()?;
            (loss, v, None, None, None)
        }
        Regime::At => {
            let loss = at_loss(&mut g, &bound, batch, &cfg.loss_weights)?;
            let v = g.value(loss).scalar_value()?;
            (loss, v, None, None, None)
        }
        Regime::Trades => {
            let terms = trades_loss(&mut g, &bound, batch, cfg.trades_beta, &cfg.loss_weights)?;
            let clean = g.value(terms.clean).scalar_value()?;
            let kl = g.value(terms.kl).scalar_value()?;
            (terms.total, clean, None, None, Some(kl))
        }
        Regime::Afsl | Regime::S3 | Regime::S2 => {
            let weights = if cfg.regime == Regime::S2 {
                LossWeights { beta2: 0.0, ..cfg.loss_weights.clone() }
            } else {
                cfg.loss_weights.clone()
            };
            let terms = afsl_loss(&mut g, &bound, batch, &weights)?;
            let dcl = g.value(terms.dcl).scalar_value()?;
            let asl = g.value(terms.asl).scalar_value()?;
            let srl = g.value(terms.srl).scalar_value()?;
            (terms.total, dcl, Some(asl), Some(srl), None)
        }
    };
    let total = g.value(total_node).scalar_value()?;
    if !total.is_finite() {
        return Err(Error::NonFinite { context: "training loss".into() });
    }
    let grad_map = g.backward(total_node)?;
    let mut grads = Vec::with_capacity(bound.param_ids().len());
    let mut sq_norm = 0.0;
    for id in bound.param_ids() {
        let grad = grad_map
            .get(id)
            .cloned()
            .ok_or_else(|| Error::Numerical("parameter missing from gradient map".into()))?;
        sq_norm += grad.data().iter().map(|v| v * v).sum::<f64>();
        grads.push(grad);
    }
    Ok(StepOutcome {
        record: StepRecord {
            step,
            total,
            dcl,
            asl,
            srl,
            kl,
            grad_norm: sq_norm.sqrt(),
        },
        grads,
    })
}

fn snapshot(params: &ModelParams, fold: &Dataset, cfg: &TrainConfig, epoch: usize, step: usize) -> Result<EpochSnapshot> {
    let (x, labels, videos) = fold.stacked()?;
    let video_auc = |scores: &[f64]| -> Result<f64> {
        let clip_scores: Vec<(usize, f64)> =
            videos.iter().copied().zip(scores.iter().copied()).collect();
        let per_video = video_level_scores(&clip_scores)?;
        let label_of: std::collections::BTreeMap<usize, u8> =
            videos.iter().copied().zip(labels.iter().copied()).collect();
        let v_scores: Vec<f64> = per_video.iter().map(|&(_, s)| s).collect();
        let v_labels: Vec<u8> = per_video.iter().map(|&(v, _)| label_of[&v]).collect();
        roc_auc(&v_scores, &v_labels)
    };
    let clean_auc = video_auc(&params.scores(&x)?)?;
    let robust_auc = if cfg.snapshot_robust {
        let seed = data::derive_seed(cfg.seed, SNAPSHOT_STREAM | step as u64);
        let x_adv = attack::pgd(params, &x, &labels, &cfg.attack, seed)?;
        Some(video_auc(&params.scores(&x_adv)?)?)
    } else {
        None
    };
    Ok(EpochSnapshot { epoch, step, clean_auc, robust_auc })
}

/// Trains a model from scratch under the configured regime and returns the
/// final parameters plus the full history (one record per step, one
/// snapshot per epoch on the held-out fold).
pub fn train(dataset: &Dataset, cfg: &TrainConfig) -> Result<(ModelParams, TrainHistory)> {
    cfg.validate()?;
    let input_shape = dataset.config().input_shape();
    let arch = ArchitectureSpec::by_id(&cfg.architecture, input_shape)?;
    let mut params = init_params(&arch, cfg.seed)?;
    let (pool, fold) = snapshot_split(dataset)?;
    let mut optimizer = Optimizer::new(&cfg.optimizer, &params);
    let mut history = TrainHistory::default();

    for step in 0..cfg.total_steps() {
        let batch_seed = data::derive_seed(cfg.seed, 2 * step as u64);
        let attack_seed = data::derive_seed(cfg.seed, 2 * step as u64 + 1);
        let outcome = (|| -> Result<StepOutcome> {
            let mut batch = make_paired_batch(&pool, cfg.batch_size, batch_seed)?;
            if cfg.regime.needs_adversary() {
                batch = attack_batch(&params, batch, cfg.regime, cfg, attack_seed)?;
            }
            train_step(&params, &batch, cfg, step)
        })()
        .map_err(|e| wrap_step_error(e, step))?;
        optimizer.step(&mut params, &outcome.grads)?;
        history.steps.push(outcome.record);
        if (step + 1) % cfg.steps_per_epoch == 0 {
            let epoch = (step + 1) / cfg.steps_per_epoch;
            history.snapshots.push(snapshot(&params, &fold, cfg, epoch, step)?);
        }
    }
    Ok((params, history))
}

/// One row of the ablation table: held-out clean and robust (PGD10)
/// video-level AUC.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub regime: Regime,
    pub clean_auc: f64,
    pub robust_auc: f64,
}

/// Trains S1/S2/S3 with identical data order (same seed) and evaluates each
/// on the held-out fold under PGD10.
pub fn run_ablation(dataset: &Dataset, base: &TrainConfig) -> Result<Vec<AblationRow>> {
    base.validate()?;
    let (_, fold) = snapshot_split(dataset)?;
    let mut rows = Vec::with_capacity(3);
    for regime in [Regime::S1, Regime::S2, Regime::S3] {
        let cfg = TrainConfig { regime, ..base.clone() };
        let (params, _) = train(dataset, &cfg)?;
        let pgd10 = EvalCondition::Pgd { attack: AttackConfig::pgd(10, base.attack.epsilon) };
        let report = crate::eval::robust_eval(
            &params,
            &fold,
            &[EvalCondition::Clean, pgd10],
            None,
            base.seed,
            2,
        )?;
        rows.push(AblationRow {
            regime,
            clean_auc: report.results[0].auc_video,
            robust_auc: report.results[1].auc_video,
        });
    }
    Ok(rows)
}
