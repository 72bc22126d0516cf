//! Training objectives for the real/fake task.
//!
//! The core objective combines three terms: a logit-adjusted cross-entropy
//! (`dcl`), a clean-to-adversarial feature alignment term (`asl`, one minus
//! cosine), and a real-to-fake feature separation term (`srl`, plain
//! cosine). Baseline objectives — adversarial training on perturbed samples
//! only, and clean cross-entropy plus a KL consistency term — share the same
//! building blocks.
//!
//! All losses are built on a [`Graph`] so the training loop can
//! differentiate them with respect to bound model parameters.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{init_params, ArchitectureSpec, BoundModel, ModelParams};
use crate::tensor::{grad_check, BatteryEntry, Graph, NodeId, Tensor};

/// Scalar knobs of the combined objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Weight of the clean/adversarial alignment term.
    pub beta1: f64,
    /// Weight of the real/fake separation term.
    pub beta2: f64,
    /// Temperature on the log-prior logit adjustment.
    pub tau: f64,
    /// Class priors over {fake, real}; must lie in (0,1) and sum to 1.
    pub priors: [f64; 2],
    /// When set, the classification term also sees adversarial samples.
    pub dcl_includes_adv: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            beta1: 1.0,
            beta2: 0.1,
            tau: 1.0,
            priors: [0.8, 0.2],
            dcl_includes_adv: false,
        }
    }
}

impl LossWeights {
    /// Uniform class priors: the logit adjustment cancels exactly.
    pub fn balanced() -> Self {
        LossWeights { priors: [0.5, 0.5], ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta1.is_finite() && self.beta1 >= 0.0) {
            return Err(Error::InvalidConfig(format!("beta1 must be >= 0, got {}", self.beta1)));
        }
        if !(self.beta2.is_finite() && self.beta2 >= 0.0) {
            return Err(Error::InvalidConfig(format!("beta2 must be >= 0, got {}", self.beta2)));
        }
        if !self.tau.is_finite() {
            return Err(Error::InvalidConfig("tau must be finite".into()));
        }
        for p in self.priors {
            if !(p > 0.0 && p < 1.0) {
                return Err(Error::InvalidConfig(format!(
                    "priors must lie strictly in (0,1), got {:?}",
                    self.priors
                )));
            }
        }
        if (self.priors[0] + self.priors[1] - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidConfig(format!(
                "priors must sum to 1 within 1e-12, got {:?}",
                self.priors
            )));
        }
        Ok(())
    }
}

/// Equal-sized real and fake clip batches, optionally with adversarial
/// counterparts. Row `p` of `real` is paired with row `p` of `fake`.
#[derive(Debug, Clone)]
pub struct PairedBatch {
    real: Tensor,
    fake: Tensor,
    real_adv: Option<Tensor>,
    fake_adv: Option<Tensor>,
}

impl PairedBatch {
    /// Pairs two `[p, c, h, w]` batches of equal shape.
    pub fn new(real: Tensor, fake: Tensor) -> Result<Self> {
        if real.shape().len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "paired batch".into(),
                detail: format!("expected rank-4 model inputs, got {:?}", real.shape()),
            });
        }
        if real.shape() != fake.shape() {
            return Err(Error::ShapeMismatch {
                op: "paired batch".into(),
                detail: format!("real {:?} vs fake {:?}", real.shape(), fake.shape()),
            });
        }
        if real.shape()[0] == 0 {
            return Err(Error::ShapeMismatch {
                op: "paired batch".into(),
                detail: "empty batch".into(),
            });
        }
        Ok(PairedBatch { real, fake, real_adv: None, fake_adv: None })
    }

    /// Attaches adversarial counterparts of the same shapes.
    pub fn with_adversarial(mut self, real_adv: Tensor, fake_adv: Tensor) -> Result<Self> {
        if real_adv.shape() != self.real.shape() || fake_adv.shape() != self.fake.shape() {
            return Err(Error::ShapeMismatch {
                op: "paired batch adversarial".into(),
                detail: format!(
                    "adversarial shapes {:?}/{:?} vs clean {:?}",
                    real_adv.shape(),
                    fake_adv.shape(),
                    self.real.shape()
                ),
            });
        }
        self.real_adv = Some(real_adv);
        self.fake_adv = Some(fake_adv);
        Ok(self)
    }

    pub fn pair_count(&self) -> usize {
        self.real.shape()[0]
    }

    pub fn real(&self) -> &Tensor {
        &self.real
    }

    pub fn fake(&self) -> &Tensor {
        &self.fake
    }

    pub fn real_adv(&self) -> Option<&Tensor> {
        self.real_adv.as_ref()
    }

    pub fn fake_adv(&self) -> Option<&Tensor> {
        self.fake_adv.as_ref()
    }

    pub fn has_adversarial(&self) -> bool {
        self.real_adv.is_some() && self.fake_adv.is_some()
    }

    /// Labels matching the `[real; fake]` concatenation order: real is 1.
    pub fn labels(&self) -> Vec<u8> {
        let p = self.pair_count();
        let mut v = vec![1u8; p];
        v.extend(std::iter::repeat(0u8).take(p));
        v
    }

    fn require_adversarial(&self, loss: &str) -> Result<(&Tensor, &Tensor)> {
        match (&self.real_adv, &self.fake_adv) {
            (Some(r), Some(f)) => Ok((r, f)),
            _ => Err(Error::InvalidConfig(format!(
                "{loss} requires a batch with adversarial counterparts"
            ))),
        }
    }
}

/// Sums each row of an `[n, k]` node into an `[n]` node.
fn row_sum(g: &mut Graph, t: NodeId) -> Result<NodeId> {
    let shape = g.value(t).shape().to_vec();
    let (n, k) = (shape[0], shape[1]);
    let ones = g.constant(Tensor::full(vec![k, 1], 1.0)?);
    let col = g.matmul(t, ones)?;
    g.reshape(col, vec![n])
}

/// Per-sample logit-adjusted cross-entropy: row `n` is
/// `-log softmax(z_n + tau * ln priors)[y_n]`.
pub fn lbce_rows(g: &mut Graph, logits: NodeId, labels: &[u8], weights: &LossWeights) -> Result<NodeId> {
    weights.validate()?;
    let shape = g.value(logits).shape().to_vec();
    if shape.len() != 2 || shape[1] != 2 {
        return Err(Error::ShapeMismatch {
            op: "lbce".into(),
            detail: format!("expected [n, 2] logits, got {shape:?}"),
        });
    }
    let n = shape[0];
    if labels.len() != n {
        return Err(Error::ShapeMismatch {
            op: "lbce".into(),
            detail: format!("{n} logit rows but {} labels", labels.len()),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::InvalidLabel { label: bad as i64 });
    }
    let adjustment = Tensor::new(
        vec![2],
        vec![weights.tau * weights.priors[0].ln(), weights.tau * weights.priors[1].ln()],
    )?;
    let adj = g.constant(adjustment);
    let adjusted = g.bias_add(logits, adj)?;
    let lsm = g.log_softmax(adjusted)?;
    let mut onehot = vec![0.0; n * 2];
    for (r, &y) in labels.iter().enumerate() {
        onehot[r * 2 + y as usize] = 1.0;
    }
    let mask = g.constant(Tensor::new(vec![n, 2], onehot)?);
    let picked = g.mul(lsm, mask)?;
    let rows = row_sum(g, picked)?;
    g.scale(rows, -1.0)
}

/// Mean logit-adjusted cross-entropy over the batch.
pub fn lbce(g: &mut Graph, logits: NodeId, labels: &[u8], weights: &LossWeights) -> Result<NodeId> {
    let rows = lbce_rows(g, logits, labels, weights)?;
    g.mean(rows)
}

/// Mean of `1 - cos(clean_n, adv_n)` over rows; zero when the adversarial
/// features already align with the clean ones. Range `[0, 2]`.
pub fn adversarial_similarity_loss(g: &mut Graph, emb_clean: NodeId, emb_adv: NodeId) -> Result<NodeId> {
    let cos = g.cosine_rows(emb_clean, emb_adv)?;
    let mean = g.mean(cos)?;
    let neg = g.scale(mean, -1.0)?;
    g.add_const(neg, 1.0)
}

/// Mean of `cos(real_p, fake_p)` over pairs: penalises real and fake
/// embeddings that point the same way. Range `[-1, 1]`.
pub fn similarity_regularization_loss(g: &mut Graph, emb_real: NodeId, emb_fake: NodeId) -> Result<NodeId> {
    let cos = g.cosine_rows(emb_real, emb_fake)?;
    g.mean(cos)
}

/// Per-row `KL(softmax(logits_p) || softmax(logits_q))` of two `[n, k]`
/// logit tensors.
pub fn kl_divergence_rows(g: &mut Graph, logits_p: NodeId, logits_q: NodeId) -> Result<NodeId> {
    let sp = g.value(logits_p).shape().to_vec();
    let sq = g.value(logits_q).shape().to_vec();
    if sp != sq || sp.len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "kl_divergence_rows".into(),
            detail: format!("{sp:?} vs {sq:?}"),
        });
    }
    let lp = g.log_softmax(logits_p)?;
    let lq = g.log_softmax(logits_q)?;
    let p = g.exp(lp)?;
    let diff = g.sub(lp, lq)?;
    let terms = g.mul(p, diff)?;
    row_sum(g, terms)
}

/// Node handles for the combined objective and its component breakdown.
#[derive(Debug, Clone, Copy)]
pub struct AfslTerms {
    pub total: NodeId,
    pub dcl: NodeId,
    pub asl: NodeId,
    pub srl: NodeId,
}

/// Combined objective: `dcl + beta1 * asl + beta2 * srl`.
///
/// `dcl` is the logit-adjusted cross-entropy on clean samples (adversarial
/// samples are appended when `weights.dcl_includes_adv` is set), `asl`
/// aligns clean and adversarial embeddings over all rows, and `srl`
/// separates the paired real/fake clean embeddings.
pub fn afsl_loss(
    g: &mut Graph,
    model: &BoundModel,
    batch: &PairedBatch,
    weights: &LossWeights,
) -> Result<AfslTerms> {
    weights.validate()?;
    let (real_adv, fake_adv) = batch.require_adversarial("afsl_loss")?;
    let p = batch.pair_count();

    let x_real = g.constant(batch.real().clone());
    let x_fake = g.constant(batch.fake().clone());
    let x_clean = g.concat(&[x_real, x_fake], 0)?;
    let emb_clean = model.encode(g, x_clean)?;
    let logits_clean = model.classify(g, emb_clean)?;

    let x_real_adv = g.constant(real_adv.clone());
    let x_fake_adv = g.constant(fake_adv.clone());
    let x_adv = g.concat(&[x_real_adv, x_fake_adv], 0)?;
    let emb_adv = model.encode(g, x_adv)?;

    let labels = batch.labels();
    let dcl = if weights.dcl_includes_adv {
        let logits_adv = model.classify(g, emb_adv)?;
        let all_logits = g.concat(&[logits_clean, logits_adv], 0)?;
        let mut all_labels = labels.clone();
        all_labels.extend_from_slice(&labels);
        lbce(g, all_logits, &all_labels, weights)?
    } else {
        lbce(g, logits_clean, &labels, weights)?
    };

    let asl = adversarial_similarity_loss(g, emb_clean, emb_adv)?;

    let emb_real = g.slice(emb_clean, 0, 0, p)?;
    let emb_fake = g.slice(emb_clean, 0, p, p)?;
    let srl = similarity_regularization_loss(g, emb_real, emb_fake)?;

    let asl_w = g.scale(asl, weights.beta1)?;
    let srl_w = g.scale(srl, weights.beta2)?;
    let partial = g.add(dcl, asl_w)?;
    let total = g.add(partial, srl_w)?;
    Ok(AfslTerms { total, dcl, asl, srl })
}

/// Adversarial-training objective: cross-entropy on the perturbed samples
/// only. The similarity weights in `weights` are ignored by design.
pub fn at_loss(
    g: &mut Graph,
    model: &BoundModel,
    batch: &PairedBatch,
    weights: &LossWeights,
) -> Result<NodeId> {
    let (real_adv, fake_adv) = batch.require_adversarial("at_loss")?;
    let x_real_adv = g.constant(real_adv.clone());
    let x_fake_adv = g.constant(fake_adv.clone());
    let x_adv = g.concat(&[x_real_adv, x_fake_adv], 0)?;
    let logits = model.logits(g, x_adv)?;
    lbce(g, logits, &batch.labels(), weights)
}

/// Node handles for the consistency objective.
#[derive(Debug, Clone, Copy)]
pub struct TradesTerms {
    pub total: NodeId,
    pub clean: NodeId,
    pub kl: NodeId,
}

/// Consistency objective: clean cross-entropy plus
/// `trades_beta * mean KL(softmax(logits_clean) || softmax(logits_adv))`.
pub fn trades_loss(
    g: &mut Graph,
    model: &BoundModel,
    batch: &PairedBatch,
    trades_beta: f64,
    weights: &LossWeights,
) -> Result<TradesTerms> {
    if !(trades_beta.is_finite() && trades_beta >= 0.0) {
        return Err(Error::InvalidConfig(format!("trades_beta must be >= 0, got {trades_beta}")));
    }
    let (real_adv, fake_adv) = batch.require_adversarial("trades_loss")?;

    let x_real = g.constant(batch.real().clone());
    let x_fake = g.constant(batch.fake().clone());
    let x_clean = g.concat(&[x_real, x_fake], 0)?;
    let logits_clean = model.logits(g, x_clean)?;
    let clean = lbce(g, logits_clean, &batch.labels(), weights)?;

    let x_real_adv = g.constant(real_adv.clone());
    let x_fake_adv = g.constant(fake_adv.clone());
    let x_adv = g.concat(&[x_real_adv, x_fake_adv], 0)?;
    let logits_adv = model.logits(g, x_adv)?;

    let kl_rows = kl_divergence_rows(g, logits_clean, logits_adv)?;
    let kl = g.mean(kl_rows)?;
    let kl_w = g.scale(kl, trades_beta)?;
    let total = g.add(clean, kl_w)?;
    Ok(TradesTerms { total, clean, kl })
}

/// Binds an architecture's parameters out of one flat `[total]` node by
/// slicing and reshaping, so a gradient check can perturb every parameter
/// through a single input tensor.
pub fn bind_from_flat(g: &mut Graph, arch: &ArchitectureSpec, flat: NodeId) -> Result<BoundModel> {
    let shapes = arch.param_shapes()?;
    let mut nodes = Vec::with_capacity(shapes.len());
    let mut offset = 0usize;
    for (_, shape) in &shapes {
        let numel: usize = shape.iter().product();
        let piece = g.slice(flat, 0, offset, numel)?;
        nodes.push(g.reshape(piece, shape.clone())?);
        offset += numel;
    }
    if g.value(flat).numel() != offset {
        return Err(Error::ShapeMismatch {
            op: "bind_from_flat".into(),
            detail: format!("flat tensor holds {} values, architecture needs {offset}", g.value(flat).numel()),
        });
    }
    BoundModel::from_nodes(arch.clone(), nodes)
}

/// Concatenates all parameters of `params` into one flat tensor, in binding
/// order.
pub fn flatten_params(params: &ModelParams) -> Tensor {
    let total: usize = params.tensors().iter().map(|(_, t)| t.numel()).sum();
    let mut data = Vec::with_capacity(total);
    for (_, t) in params.tensors() {
        data.extend_from_slice(t.data());
    }
    Tensor::new(vec![total], data).expect("parameters are finite")
}

fn random_unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; n * d];
    for r in 0..n {
        let mut norm = 0.0;
        for j in 0..d {
            let v: f64 = rng.random_range(-1.0..1.0);
            data[r * d + j] = v;
            norm += v * v;
        }
        let norm = norm.sqrt().max(1e-3);
        for j in 0..d {
            data[r * d + j] /= norm;
        }
    }
    Tensor::new(vec![n, d], data).expect("finite rows")
}

fn random_clips(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| rng.random_range(0.1..0.9)).collect();
    Tensor::new(shape.to_vec(), data).expect("finite clips")
}

/// Gradient-battery entries for every loss function, checked with respect
/// to logits/embeddings where the loss is a direct function of them, and
/// with respect to all model parameters for the composite objectives.
pub fn loss_gradient_battery(seed: u64) -> Result<Vec<BatteryEntry>> {
    loss_gradient_battery_with_tolerance(seed, None)
}

/// Like [`loss_gradient_battery`] but with a single tolerance replacing
/// every case's default, for callers that sweep strictness.
pub fn loss_gradient_battery_with_tolerance(
    seed: u64,
    tolerance: Option<f64>,
) -> Result<Vec<BatteryEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    let tol = |default: f64| tolerance.unwrap_or(default);

    // lbce with respect to logits.
    {
        let logits = Tensor::new(
            vec![4, 2],
            (0..8).map(|_| rng.random_range(-2.0..2.0)).collect(),
        )?;
        let labels = vec![1u8, 0, 1, 0];
        let weights = LossWeights::default();
        let report = grad_check(
            move |g, x| lbce(g, x, &labels, &weights),
            &logits,
            tol(1e-4),
        )?;
        entries.push(BatteryEntry::from_report("lbce", tol(1e-4), &report));
    }

    // asl with respect to the clean embeddings.
    {
        let emb_adv = random_unit_rows(&mut rng, 3, 5);
        let emb_clean = random_unit_rows(&mut rng, 3, 5);
        let report = grad_check(
            move |g, x| {
                let adv = g.constant(emb_adv.clone());
                adversarial_similarity_loss(g, x, adv)
            },
            &emb_clean,
            tol(1e-5),
        )?;
        entries.push(BatteryEntry::from_report(
            "adversarial_similarity_loss",
            tol(1e-5),
            &report,
        ));
    }

    // srl with respect to the real embeddings.
    {
        let emb_fake = random_unit_rows(&mut rng, 3, 5);
        let emb_real = random_unit_rows(&mut rng, 3, 5);
        let report = grad_check(
            move |g, x| {
                let fake = g.constant(emb_fake.clone());
                similarity_regularization_loss(g, x, fake)
            },
            &emb_real,
            tol(1e-5),
        )?;
        entries.push(BatteryEntry::from_report(
            "similarity_regularization_loss",
            tol(1e-5),
            &report,
        ));
    }

    // The composite objectives, differentiated through every model
    // parameter on a micro architecture.
    let arch = ArchitectureSpec::micro_cnn([1, 4, 4]);
    let params = init_params(&arch, seed ^ 0x105e)?;
    let flat = flatten_params(&params);
    let batch = PairedBatch::new(
        random_clips(&mut rng, &[2, 1, 4, 4]),
        random_clips(&mut rng, &[2, 1, 4, 4]),
    )?
    .with_adversarial(
        random_clips(&mut rng, &[2, 1, 4, 4]),
        random_clips(&mut rng, &[2, 1, 4, 4]),
    )?;

    {
        let (arch, batch) = (arch.clone(), batch.clone());
        let weights = LossWeights::default();
        let report = grad_check(
            move |g, x| {
                let bound = bind_from_flat(g, &arch, x)?;
                Ok(afsl_loss(g, &bound, &batch, &weights)?.total)
            },
            &flat,
            tol(1e-4),
        )?;
        entries.push(BatteryEntry::from_report("afsl_loss", tol(1e-4), &report));
    }
    {
        let (arch, batch) = (arch.clone(), batch.clone());
        let weights = LossWeights::default();
        let report = grad_check(
            move |g, x| {
                let bound = bind_from_flat(g, &arch, x)?;
                at_loss(g, &bound, &batch, &weights)
            },
            &flat,
            tol(1e-4),
        )?;
        entries.push(BatteryEntry::from_report("at_loss", tol(1e-4), &report));
    }
    {
        let (arch, batch) = (arch.clone(), batch.clone());
        let weights = LossWeights::default();
        let report = grad_check(
            move |g, x| {
                let bound = bind_from_flat(g, &arch, x)?;
                Ok(trades_loss(g, &bound, &batch, 6.0, &weights)?.total)
            },
            &flat,
            tol(1e-4),
        )?;
        entries.push(BatteryEntry::from_report("trades_loss", tol(1e-4), &report));
    }

    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro_setup(seed: u64) -> (ModelParams, PairedBatch) {
        let arch = ArchitectureSpec::micro_cnn([1, 4, 4]);
        let params = init_params(&arch, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xbeef);
        let batch = PairedBatch::new(
            random_clips(&mut rng, &[3, 1, 4, 4]),
            random_clips(&mut rng, &[3, 1, 4, 4]),
        )
        .unwrap()
        .with_adversarial(
            random_clips(&mut rng, &[3, 1, 4, 4]),
            random_clips(&mut rng, &[3, 1, 4, 4]),
        )
        .unwrap();
        (params, batch)
    }

    fn eval_afsl(params: &ModelParams, batch: &PairedBatch, w: &LossWeights) -> (f64, f64, f64, f64) {
        let mut g = Graph::new();
        let bound = params.bind(&mut g, false);
        let terms = afsl_loss(&mut g, &bound, batch, w).unwrap();
        (
            g.value(terms.total).scalar_value().unwrap(),
            g.value(terms.dcl).scalar_value().unwrap(),
            g.value(terms.asl).scalar_value().unwrap(),
            g.value(terms.srl).scalar_value().unwrap(),
        )
    }

    #[test]
    fn lbce_balanced_equals_plain_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let raw: Vec<f64> = (0..10).map(|_| rng.random_range(-3.0..3.0)).collect();
        let labels = vec![1u8, 0, 0, 1, 1];
        let mut g = Graph::new();
        let logits = g.constant(Tensor::new(vec![5, 2], raw.clone()).unwrap());
        let loss = lbce(&mut g, logits, &labels, &LossWeights::balanced()).unwrap();
        let got = g.value(loss).scalar_value().unwrap();
        // Plain cross-entropy computed independently.
        let mut expected = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let (a, b) = (raw[r * 2], raw[r * 2 + 1]);
            let m = a.max(b);
            let lse = m + ((a - m).exp() + (b - m).exp()).ln();
            let z = if y == 0 { a } else { b };
            expected += lse - z;
        }
        expected /= labels.len() as f64;
        assert!((got - expected).abs() < 1e-12, "got {got}, expected {expected}");
    }

    #[test]
    fn lbce_zero_logits_with_default_priors() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::zeros(vec![1, 2]));
        let loss = lbce(&mut g, logits, &[1], &LossWeights::default()).unwrap();
        let got = g.value(loss).scalar_value().unwrap();
        assert!((got - 1.6094).abs() < 1e-4, "got {got}");
        // And exactly -ln(0.2).
        assert!((got + 0.2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn lbce_confident_correct_goes_to_zero() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::new(vec![1, 2], vec![-30.0, 30.0]).unwrap());
        let loss = lbce(&mut g, logits, &[1], &LossWeights::default()).unwrap();
        assert!(g.value(loss).scalar_value().unwrap() < 1e-8);
    }

    #[test]
    fn lbce_rejects_out_of_range_label() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::zeros(vec![1, 2]));
        let err = lbce(&mut g, logits, &[2], &LossWeights::default()).unwrap_err();
        assert!(matches!(err, Error::InvalidLabel { label: 2 }));
    }

    #[test]
    fn lbce_is_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let raw: Vec<f64> = (0..8).map(|_| rng.random_range(-4.0..4.0)).collect();
            let labels: Vec<u8> = (0..4).map(|_| u8::from(rng.random_range(0.0..1.0) < 0.5)).collect();
            let mut g = Graph::new();
            let logits = g.constant(Tensor::new(vec![4, 2], raw).unwrap());
            let loss = lbce(&mut g, logits, &labels, &LossWeights::default()).unwrap();
            assert!(g.value(loss).scalar_value().unwrap() >= 0.0);
        }
    }

    #[test]
    fn asl_known_configurations() {
        let e = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let orth = Tensor::new(vec![2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let anti = Tensor::new(vec![2, 2], vec![-1.0, 0.0, 0.0, -1.0]).unwrap();
        let run = |a: &Tensor, b: &Tensor| {
            let mut g = Graph::new();
            let an = g.constant(a.clone());
            let bn = g.constant(b.clone());
            let l = adversarial_similarity_loss(&mut g, an, bn).unwrap();
            g.value(l).scalar_value().unwrap()
        };
        assert!((run(&e, &e) - 0.0).abs() < 1e-12);
        assert!((run(&e, &orth) - 1.0).abs() < 1e-12);
        assert!((run(&e, &anti) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn srl_known_configurations() {
        let e = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let orth = Tensor::new(vec![2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let anti = Tensor::new(vec![2, 2], vec![-1.0, 0.0, 0.0, -1.0]).unwrap();
        let run = |a: &Tensor, b: &Tensor| {
            let mut g = Graph::new();
            let an = g.constant(a.clone());
            let bn = g.constant(b.clone());
            let l = similarity_regularization_loss(&mut g, an, bn).unwrap();
            g.value(l).scalar_value().unwrap()
        };
        assert!((run(&e, &e) - 1.0).abs() < 1e-12);
        assert!((run(&e, &orth) - 0.0).abs() < 1e-12);
        assert!((run(&e, &anti) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn kl_of_identical_logits_is_zero() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::new(vec![2, 2], vec![1.0, -0.5, 0.3, 0.9]).unwrap());
        let rows = kl_divergence_rows(&mut g, a, a).unwrap();
        for &v in g.value(rows).data() {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn kl_crossed_logits_match_direct_evaluation() {
        // softmax(2,0) vs softmax(0,2): KL = (p - q) * 2 with p = sigmoid(2).
        let mut g = Graph::new();
        let a = g.constant(Tensor::new(vec![1, 2], vec![2.0, 0.0]).unwrap());
        let b = g.constant(Tensor::new(vec![1, 2], vec![0.0, 2.0]).unwrap());
        let rows = kl_divergence_rows(&mut g, a, b).unwrap();
        let got = g.value(rows).data()[0];
        let p = 1.0 / (1.0 + (-2.0f64).exp());
        let expected = p * (p / (1.0 - p)).ln() + (1.0 - p) * ((1.0 - p) / p).ln();
        assert!((got - expected).abs() < 1e-12, "got {got}, expected {expected}");
        assert!((got - 1.5232).abs() < 1e-4);
    }

    #[test]
    fn afsl_total_recomposes_from_breakdown() {
        let (params, batch) = micro_setup(5);
        let w = LossWeights::default();
        let (total, dcl, asl, srl) = eval_afsl(&params, &batch, &w);
        assert!((total - (dcl + w.beta1 * asl + w.beta2 * srl)).abs() < 1e-12);
    }

    #[test]
    fn afsl_with_zero_betas_is_pure_dcl() {
        let (params, batch) = micro_setup(6);
        let w = LossWeights { beta1: 0.0, beta2: 0.0, ..Default::default() };
        let (total, dcl, _, _) = eval_afsl(&params, &batch, &w);
        assert_eq!(total, dcl);
    }

    #[test]
    fn afsl_is_linear_in_betas() {
        let (params, batch) = micro_setup(7);
        let base = LossWeights::default();
        let (t0, _, asl, srl) = eval_afsl(&params, &batch, &base);
        let bumped1 = LossWeights { beta1: base.beta1 + 0.5, ..base.clone() };
        let (t1, _, _, _) = eval_afsl(&params, &batch, &bumped1);
        assert!(((t1 - t0) / 0.5 - asl).abs() < 1e-10);
        let bumped2 = LossWeights { beta2: base.beta2 + 0.25, ..base.clone() };
        let (t2, _, _, _) = eval_afsl(&params, &batch, &bumped2);
        assert!(((t2 - t0) / 0.25 - srl).abs() < 1e-10);
    }

    #[test]
    fn afsl_requires_adversarial_tensors() {
        let (params, batch) = micro_setup(8);
        let clean_only = PairedBatch::new(batch.real().clone(), batch.fake().clone()).unwrap();
        let mut g = Graph::new();
        let bound = params.bind(&mut g, false);
        let err = afsl_loss(&mut g, &bound, &clean_only, &LossWeights::default()).unwrap_err();
        assert!(matches!(err, Error::InvalidConfig(_)));
    }

    #[test]
    fn afsl_is_invariant_to_joint_pair_permutation() {
        let (params, batch) = micro_setup(9);
        let w = LossWeights::default();
        let (t_orig, ..) = eval_afsl(&params, &batch, &w);

        // Reverse the pair order of every tensor jointly.
        let perm = |t: &Tensor| {
            let p = t.shape()[0];
            let row = t.numel() / p;
            let mut data = Vec::with_capacity(t.numel());
            for r in (0..p).rev() {
                data.extend_from_slice(&t.data()[r * row..(r + 1) * row]);
            }
            Tensor::new(t.shape().to_vec(), data).unwrap()
        };
        let permuted = PairedBatch::new(perm(batch.real()), perm(batch.fake()))
            .unwrap()
            .with_adversarial(perm(batch.real_adv().unwrap()), perm(batch.fake_adv().unwrap()))
            .unwrap();
        let (t_perm, ..) = eval_afsl(&params, &permuted, &w);
        assert!((t_orig - t_perm).abs() < 1e-12, "{t_orig} vs {t_perm}");
    }

    #[test]
    fn at_equals_lbce_on_adversarial_batch() {
        let (params, batch) = micro_setup(10);
        let w = LossWeights::default();
        let mut g = Graph::new();
        let bound = params.bind(&mut g, false);
        let at = at_loss(&mut g, &bound, &batch, &w).unwrap();
        let got = g.value(at).scalar_value().unwrap();

        // Independent recomposition through the convenience forward pass.
        let p = batch.pair_count();
        let mut data = batch.real_adv().unwrap().data().to_vec();
        data.extend_from_slice(batch.fake_adv().unwrap().data());
        let mut shape = batch.real().shape().to_vec();
        shape[0] = 2 * p;
        let x_adv = Tensor::new(shape, data).unwrap();
        let logits = params.logits(&x_adv).unwrap();
        let mut g2 = Graph::new();
        let ln = g2.constant(logits);
        let reference = lbce(&mut g2, ln, &batch.labels(), &w).unwrap();
        let expected = g2.value(reference).scalar_value().unwrap();
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn at_with_identity_attack_equals_clean_lbce() {
        let (params, batch) = micro_setup(11);
        let w = LossWeights::default();
        let identity = PairedBatch::new(batch.real().clone(), batch.fake().clone())
            .unwrap()
            .with_adversarial(batch.real().clone(), batch.fake().clone())
            .unwrap();
        let mut g = Graph::new();
        let bound = params.bind(&mut g, false);
        let at = at_loss(&mut g, &bound, &identity, &w).unwrap();
        let trades = trades_loss(&mut g, &bound, &identity, 6.0, &w).unwrap();
        let at_v = g.value(at).scalar_value().unwrap();
        let clean_v = g.value(trades.clean).scalar_value().unwrap();
        assert!((at_v - clean_v).abs() < 1e-12);
    }

    #[test]
    fn trades_collapses_when_adversarial_equals_clean() {
        let (params, batch) = micro_setup(12);
        let w = LossWeights::default();
        let identity = PairedBatch::new(batch.real().clone(), batch.fake().clone())
            .unwrap()
            .with_adversarial(batch.real().clone(), batch.fake().clone())
            .unwrap();
        let mut g = Graph::new();
        let bound = params.bind(&mut g, false);
        let terms = trades_loss(&mut g, &bound, &identity, 6.0, &w).unwrap();
        let total = g.value(terms.total).scalar_value().unwrap();
        let clean = g.value(terms.clean).scalar_value().unwrap();
        let kl = g.value(terms.kl).scalar_value().unwrap();
        assert!(kl.abs() < 1e-12);
        assert!((total - clean).abs() < 1e-12);
    }

    #[test]
    fn trades_beta_zero_equals_clean_loss() {
        let (params, batch) = micro_setup(13);
        let w = LossWeights::default();
        let mut g = Graph::new();
        let bound = params.bind(&mut g, false);
        let terms = trades_loss(&mut g, &bound, &batch, 0.0, &w).unwrap();
        let total = g.value(terms.total).scalar_value().unwrap();
        let clean = g.value(terms.clean).scalar_value().unwrap();
        assert!((total - clean).abs() < 1e-12);
    }

    #[test]
    fn loss_weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        let bad_beta = LossWeights { beta1: -0.1, ..Default::default() };
        assert!(bad_beta.validate().is_err());
        let bad_priors = LossWeights { priors: [0.7, 0.2], ..Default::default() };
        assert!(bad_priors.validate().is_err());
        let edge_priors = LossWeights { priors: [1.0, 0.0], ..Default::default() };
        assert!(edge_priors.validate().is_err());
    }

    #[test]
    fn paired_batch_shape_validation() {
        let a = Tensor::zeros(vec![2, 1, 4, 4]);
        let b = Tensor::zeros(vec![3, 1, 4, 4]);
        assert!(PairedBatch::new(a.clone(), b).is_err());
        let vec_shape = Tensor::zeros(vec![8]);
        assert!(PairedBatch::new(vec_shape.clone(), vec_shape).is_err());
        let ok = PairedBatch::new(a.clone(), a.clone()).unwrap();
        assert_eq!(ok.labels(), vec![1, 1, 0, 0]);
        assert!(ok.clone().with_adversarial(Tensor::zeros(vec![1, 1, 4, 4]), a).is_err());
    }

    #[test]
    fn battery_covers_all_losses_and_passes() {
        let entries = loss_gradient_battery(21).unwrap();
        let names: Vec<&str> = entries.iter().map(|e| e.name.as_str()).collect();
        for expected in [
            "lbce",
            "adversarial_similarity_loss",
            "similarity_regularization_loss",
            "afsl_loss",
            "at_loss",
            "trades_loss",
        ] {
            assert!(names.contains(&expected), "missing {expected}");
        }
        for e in &entries {
            assert!(e.pass, "{} failed: {} > {}", e.name, e.max_rel_error, e.tolerance);
        }
    }
}
