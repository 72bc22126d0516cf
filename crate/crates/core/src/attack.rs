//! Gradient-based evasion attacks.
//!
//! All attacks are pure functions of `(model, x, y, cfg, seed)` and share
//! two hard guarantees, fuzzed in the test suite: the perturbation never
//! exceeds the configured norm budget (within 1e-9), and outputs stay in
//! the `[0,1]` data box.
//!
//! The L-inf ascent engine tracks the best-so-far iterate per sample by
//! attacked-loss value, which makes the monotonicity of the returned trace
//! a construction-time property rather than a hope.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{lbce_rows, LossWeights};
use crate::model::Classifier;
use crate::tensor::{Graph, Tensor};

/// Default L-inf budget: 8/255 in input units.
pub const DEFAULT_LINF_EPSILON: f64 = 8.0 / 255.0;

/// CW margin saturation threshold.
pub const CW_KAPPA: f64 = 0.0;

/// CW perturbation-size weight.
pub const CW_C: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackNorm {
    Linf,
    L2,
}

/// Which objective the inner ascent maximizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossTarget {
    /// Cross-entropy of the model's logits (the standard choice).
    Classification,
    /// `1 - cos` between clean and perturbed embeddings.
    FeatureDissimilarity,
}

/// Perturbation-budget and iteration settings shared by all attacks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub norm: AttackNorm,
    pub epsilon: f64,
    pub steps: usize,
    /// Per-iteration step; `None` means the `2.5 * epsilon / steps`
    /// heuristic.
    #[serde(default)]
    pub step_size: Option<f64>,
    #[serde(default)]
    pub random_start: bool,
    pub loss_target: LossTarget,
}

impl AttackConfig {
    /// One-step sign attack at budget `epsilon`.
    pub fn fgsm(epsilon: f64) -> Self {
        AttackConfig {
            norm: AttackNorm::Linf,
            epsilon,
            steps: 1,
            step_size: Some(if epsilon > 0.0 { epsilon } else { 1.0 }),
            random_start: false,
            loss_target: LossTarget::Classification,
        }
    }

    /// Iterative L-inf attack with the default step heuristic.
    pub fn pgd(steps: usize, epsilon: f64) -> Self {
        AttackConfig {
            norm: AttackNorm::Linf,
            epsilon,
            steps,
            step_size: None,
            random_start: true,
            loss_target: LossTarget::Classification,
        }
    }

    /// Training inner-max default: 5 steps, no random start, so runs stay
    /// deterministic per seed.
    pub fn pgd_train() -> Self {
        AttackConfig { random_start: false, ..Self::pgd(5, DEFAULT_LINF_EPSILON) }
    }

    /// Evaluation default: 10 steps with random start.
    pub fn pgd_eval() -> Self {
        Self::pgd(10, DEFAULT_LINF_EPSILON)
    }

    /// L2 margin attack defaults: 50 steps within a unit-norm ball.
    pub fn cw2() -> Self {
        AttackConfig {
            norm: AttackNorm::L2,
            epsilon: 1.0,
            steps: 50,
            step_size: None,
            random_start: false,
            loss_target: LossTarget::Classification,
        }
    }

    /// Effective per-iteration step size.
    pub fn step(&self) -> f64 {
        match self.step_size {
            Some(s) => s,
            None => {
                if self.epsilon > 0.0 {
                    2.5 * self.epsilon / self.steps as f64
                } else {
                    1.0
                }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return Err(Error::InvalidConfig(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        if self.steps == 0 {
            return Err(Error::InvalidConfig("attack steps must be >= 1".into()));
        }
        if let Some(s) = self.step_size {
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::InvalidConfig(format!("step_size must be > 0, got {s}")));
            }
        }
        Ok(())
    }
}

/// Largest absolute elementwise deviation between two equal-shaped tensors.
pub fn linf_deviation(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.max_abs_diff(b)
}

/// Euclidean deviation per leading-axis row.
pub fn l2_deviations(a: &Tensor, b: &Tensor) -> Result<Vec<f64>> {
    if a.shape() != b.shape() || a.shape().is_empty() {
        return Err(Error::ShapeMismatch {
            op: "l2_deviations".into(),
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    let n = a.shape()[0];
    let block = a.numel() / n;
    Ok((0..n)
        .map(|r| {
            a.data()[r * block..(r + 1) * block]
                .iter()
                .zip(&b.data()[r * block..(r + 1) * block])
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt()
        })
        .collect())
}

fn check_input_box(x: &Tensor, op: &str) -> Result<()> {
    if x.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::InvalidConfig(format!("{op}: input values must lie in [0,1]")));
    }
    Ok(())
}

fn check_labels(y: &[u8], n: usize, op: &str) -> Result<()> {
    if y.len() != n {
        return Err(Error::ShapeMismatch {
            op: op.into(),
            detail: format!("{n} samples but {} labels", y.len()),
        });
    }
    if let Some(&bad) = y.iter().find(|&&l| l > 1) {
        return Err(Error::InvalidLabel { label: bad as i64 });
    }
    Ok(())
}

/// Sign with a genuine zero at zero (`f64::signum` maps +0 to +1).
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Evaluates per-sample attacked losses and the gradient of their sum with
/// respect to the input batch.
type LossGrad<'a> = dyn FnMut(&Tensor) -> Result<(Vec<f64>, Tensor)> + 'a;

/// Per-sample cross-entropy rows (balanced priors, i.e. plain CE) and the
/// input gradient, for the classification loss target.
fn classification_rows<'a, M: Classifier>(model: &'a M, y: &'a [u8]) -> Box<LossGrad<'a>> {
    let weights = LossWeights::balanced();
    Box::new(move |x: &Tensor| {
        let mut g = Graph::new();
        let xn = g.leaf(x.clone(), true);
        let logits = model.logits_graph(&mut g, xn)?;
        let rows = lbce_rows(&mut g, logits, y, &weights)?;
        let total = g.sum(rows)?;
        let row_values = g.value(rows).data().to_vec();
        let grads = g.backward(total)?;
        let grad = grads.get(&xn).cloned().unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));
        Ok((row_values, grad))
    })
}

/// Per-sample `1 - cos(f(x0), f(x))` rows and input gradient, for the
/// feature-dissimilarity loss target.
fn feature_rows<'a, M: Classifier>(model: &'a M, x0: &Tensor) -> Result<Box<LossGrad<'a>>> {
    let clean_emb = {
        let mut g = Graph::new();
        let xn = g.constant(x0.clone());
        let emb = model.embed_graph(&mut g, xn)?;
        g.value(emb).clone()
    };
    Ok(Box::new(move |x: &Tensor| {
        let mut g = Graph::new();
        let xn = g.leaf(x.clone(), true);
        let emb = model.embed_graph(&mut g, xn)?;
        let clean = g.constant(clean_emb.clone());
        let cos = g.cosine_rows(emb, clean)?;
        let neg = g.scale(cos, -1.0)?;
        let rows = g.add_const(neg, 1.0)?;
        let total = g.sum(rows)?;
        let row_values = g.value(rows).data().to_vec();
        let grads = g.backward(total)?;
        let grad = grads.get(&xn).cloned().unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));
        Ok((row_values, grad))
    }))
}

/// Projected sign-gradient ascent in the L-inf ball around `x0`,
/// intersected with the `[0,1]` box.
///
/// Evaluates `steps + 1` points (the start and each iterate), keeps the
/// best-so-far iterate per sample by loss value, and returns it along with
/// the trace of mean best loss after each evaluation (non-decreasing by
/// construction).
pub(crate) fn linf_ascend(
    x0: &Tensor,
    cfg: &AttackConfig,
    seed: u64,
    eval: &mut LossGrad<'_>,
) -> Result<(Tensor, Vec<f64>)> {
    cfg.validate()?;
    if cfg.norm != AttackNorm::Linf {
        return Err(Error::InvalidConfig("this attack supports the linf norm only".into()));
    }
    let n = x0.shape()[0];
    let block = x0.numel() / n;
    let eps = cfg.epsilon;
    let alpha = cfg.step();

    let mut current = if cfg.random_start && eps > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = x0
            .data()
            .iter()
            .map(|&v| (v + rng.random_range(-eps..eps)).clamp(0.0, 1.0))
            .collect();
        Tensor::checked(x0.shape().to_vec(), data, "pgd random start")?
    } else {
        x0.clone()
    };

    let mut best_x = current.clone();
    let mut best_loss = vec![f64::NEG_INFINITY; n];
    let mut trace = Vec::with_capacity(cfg.steps + 1);

    for step_idx in 0..=cfg.steps {
        let (rows, grad) = eval(&current)?;
        if rows.len() != n {
            return Err(Error::ShapeMismatch {
                op: "linf_ascend".into(),
                detail: format!("loss returned {} rows for {n} samples", rows.len()),
            });
        }
        for (r, &loss) in rows.iter().enumerate() {
            if !loss.is_finite() {
                return Err(Error::NonFinite { context: format!("attack loss (sample {r})") });
            }
            if loss > best_loss[r] {
                best_loss[r] = loss;
                best_x.data_mut()[r * block..(r + 1) * block]
                    .copy_from_slice(&current.data()[r * block..(r + 1) * block]);
            }
        }
        trace.push(best_loss.iter().sum::<f64>() / n as f64);
        if step_idx == cfg.steps {
            break;
        }
        let stepped: Vec<f64> = current
            .data()
            .iter()
            .zip(grad.data())
            .zip(x0.data())
            .map(|((&cur, &gv), &orig)| {
                let moved = cur + alpha * sign(gv);
                let delta = (moved - orig).clamp(-eps, eps);
                (orig + delta).clamp(0.0, 1.0)
            })
            .collect();
        current = Tensor::checked(x0.shape().to_vec(), stepped, "pgd iterate")?;
    }
    Ok((best_x, trace))
}

/// One-step sign attack: `clip(x + epsilon * sign(grad_x loss), 0, 1)`.
pub fn fgsm<M: Classifier>(model: &M, x: &Tensor, y: &[u8], epsilon: f64) -> Result<Tensor> {
    if !(epsilon.is_finite() && epsilon >= 0.0) {
        return Err(Error::InvalidConfig(format!("epsilon must be >= 0, got {epsilon}")));
    }
    check_input_box(x, "fgsm")?;
    check_labels(y, x.shape()[0], "fgsm")?;
    let mut eval = classification_rows(model, y);
    let (_, grad) = eval(x)?;
    let data: Vec<f64> = x
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&v, &gv)| (v + epsilon * sign(gv)).clamp(0.0, 1.0))
        .collect();
    Tensor::checked(x.shape().to_vec(), data, "fgsm output")
}

/// Iterative projected ascent under the L-inf budget; returns the
/// best-so-far iterate.
pub fn pgd<M: Classifier>(model: &M, x: &Tensor, y: &[u8], cfg: &AttackConfig, seed: u64) -> Result<Tensor> {
    Ok(pgd_traced(model, x, y, cfg, seed)?.0)
}

/// Like [`pgd`] but also returns the mean best-loss trace, one entry per
/// evaluated point.
pub fn pgd_traced<M: Classifier>(
    model: &M,
    x: &Tensor,
    y: &[u8],
    cfg: &AttackConfig,
    seed: u64,
) -> Result<(Tensor, Vec<f64>)> {
    check_input_box(x, "pgd")?;
    check_labels(y, x.shape()[0], "pgd")?;
    match cfg.loss_target {
        LossTarget::Classification => {
            let mut eval = classification_rows(model, y);
            linf_ascend(x, cfg, seed, &mut eval)
        }
        LossTarget::FeatureDissimilarity => {
            let mut eval = feature_rows(model, x)?;
            linf_ascend(x, cfg, seed, &mut eval)
        }
    }
}

/// L2 margin attack: gradient descent on
/// `max(z_y - z_other, -kappa) + c * ||delta||^2` with the perturbation
/// renormalised into the L2 ball each step. Returns, per sample, the
/// iterate with the lowest saturated margin (ties broken by smaller
/// perturbation, so an already-misclassified input comes back unchanged).
pub fn cw_margin<M: Classifier>(
    model: &M,
    x: &Tensor,
    y: &[u8],
    cfg: &AttackConfig,
    _seed: u64,
) -> Result<Tensor> {
    cfg.validate()?;
    if cfg.norm != AttackNorm::L2 {
        return Err(Error::InvalidConfig("cw_margin supports the l2 norm only".into()));
    }
    check_input_box(x, "cw_margin")?;
    let n = x.shape()[0];
    check_labels(y, n, "cw_margin")?;
    let block = x.numel() / n;
    let eps = cfg.epsilon;
    let alpha = cfg.step();

    // Margin mask: +1 on the true-class logit, -1 on the other.
    let mut mask = vec![0.0; n * 2];
    for (r, &label) in y.iter().enumerate() {
        mask[r * 2 + label as usize] = 1.0;
        mask[r * 2 + (1 - label) as usize] = -1.0;
    }
    let mask = Tensor::new(vec![n, 2], mask)?;

    let mut current = x.clone();
    let mut best_x = x.clone();
    let mut best_key = vec![(f64::INFINITY, f64::INFINITY); n];

    for step_idx in 0..=cfg.steps {
        let mut g = Graph::new();
        let xn = g.leaf(current.clone(), true);
        let logits = model.logits_graph(&mut g, xn)?;
        let mask_n = g.constant(mask.clone());
        let masked = g.mul(logits, mask_n)?;
        let ones = g.constant(Tensor::full(vec![2, 1], 1.0)?);
        let margins_col = g.matmul(masked, ones)?;
        let margins = g.reshape(margins_col, vec![n])?;
        let shifted = g.add_const(margins, CW_KAPPA)?;
        let saturated_raw = g.relu(shifted)?;
        let saturated = g.add_const(saturated_raw, -CW_KAPPA)?;

        let x0n = g.constant(x.clone());
        let delta = g.sub(xn, x0n)?;
        let flat = g.reshape(delta, vec![n, block])?;
        let sq = g.mul(flat, flat)?;
        let ones_b = g.constant(Tensor::full(vec![block, 1], 1.0)?);
        let norm2_col = g.matmul(sq, ones_b)?;
        let norm2 = g.reshape(norm2_col, vec![n])?;
        let penal = g.scale(norm2, CW_C)?;
        let objective_rows = g.add(saturated, penal)?;
        let total = g.sum(objective_rows)?;

        let sat_values = g.value(saturated).data().to_vec();
        let norm_values: Vec<f64> = g.value(norm2).data().iter().map(|v| v.sqrt()).collect();
        for r in 0..n {
            let key = (sat_values[r], norm_values[r]);
            if key < best_key[r] {
                best_key[r] = key;
                best_x.data_mut()[r * block..(r + 1) * block]
                    .copy_from_slice(&current.data()[r * block..(r + 1) * block]);
            }
        }
        if step_idx == cfg.steps {
            break;
        }

        let grads = g.backward(total)?;
        let grad = grads.get(&xn).cloned().unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));
        let mut next = current.data().to_vec();
        for r in 0..n {
            let gblock = &grad.data()[r * block..(r + 1) * block];
            let gnorm = gblock.iter().map(|v| v * v).sum::<f64>().sqrt();
            if gnorm <= 1e-12 {
                continue;
            }
            // Normalised descent step on the objective, then projection.
            let mut dnorm2 = 0.0;
            for i in 0..block {
                let idx = r * block + i;
                let moved = next[idx] - alpha * gblock[i] / gnorm;
                let d = moved - x.data()[idx];
                next[idx] = x.data()[idx] + d;
                dnorm2 += d * d;
            }
            let dnorm = dnorm2.sqrt();
            if dnorm > eps {
                let shrink = if eps > 0.0 { eps / dnorm } else { 0.0 };
                for i in 0..block {
                    let idx = r * block + i;
                    let d = (next[idx] - x.data()[idx]) * shrink;
                    next[idx] = x.data()[idx] + d;
                }
            }
            for i in 0..block {
                let idx = r * block + i;
                next[idx] = next[idx].clamp(0.0, 1.0);
            }
        }
        current = Tensor::checked(x.shape().to_vec(), next, "cw iterate")?;
    }
    Ok(best_x)
}

/// Outcome of a transfer attack: the crafted batch plus per-sample success
/// on the target model.
#[derive(Debug, Clone)]
pub struct TransferOutcome {
    pub x_adv: Tensor,
    pub success: Vec<bool>,
}

/// Black-box attack: PGD against `surrogate` only, evaluated on `target`.
/// Target gradients are never accessed.
pub fn transfer_attack<S: Classifier, T: Classifier>(
    surrogate: &S,
    target: &T,
    x: &Tensor,
    y: &[u8],
    cfg: &AttackConfig,
    seed: u64,
) -> Result<TransferOutcome> {
    if surrogate.input_shape() != target.input_shape() {
        return Err(Error::ShapeMismatch {
            op: "transfer_attack".into(),
            detail: format!(
                "surrogate expects {:?}, target expects {:?}",
                surrogate.input_shape(),
                target.input_shape()
            ),
        });
    }
    let x_adv = pgd(surrogate, x, y, cfg, seed)?;
    let preds = target.predict(&x_adv)?;
    let success = preds.iter().zip(y).map(|(&p, &label)| p != label).collect();
    Ok(TransferOutcome { x_adv, success })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ArchitectureSpec, LinearModel, ModelParams};

    fn cnn_model(seed: u64) -> ModelParams {
        init_params(&ArchitectureSpec::micro_cnn([1, 4, 4]), seed).unwrap()
    }

    fn random_batch(seed: u64, n: usize) -> (Tensor, Vec<u8>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..n * 16).map(|_| rng.random_range(0.05..0.95)).collect();
        let x = Tensor::new(vec![n, 1, 4, 4], data).unwrap();
        let y: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
        (x, y)
    }

    fn loss_at<M: Classifier>(model: &M, x: &Tensor, y: &[u8]) -> f64 {
        let mut eval = classification_rows(model, y);
        let (rows, _) = eval(x).unwrap();
        rows.iter().sum::<f64>() / rows.len() as f64
    }

    #[test]
    fn fgsm_zero_epsilon_is_identity() {
        let model = cnn_model(1);
        let (x, y) = random_batch(2, 3);
        let x_adv = fgsm(&model, &x, &y, 0.0).unwrap();
        assert_eq!(x_adv.data(), x.data());
    }

    #[test]
    fn fgsm_respects_budget_and_box() {
        let model = cnn_model(3);
        let (x, y) = random_batch(4, 4);
        let eps = 8.0 / 255.0;
        let x_adv = fgsm(&model, &x, &y, eps).unwrap();
        assert!(linf_deviation(&x_adv, &x).unwrap() <= eps + 1e-9);
        assert!(x_adv.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn fgsm_on_linear_model_matches_analytic_direction() {
        // Logits (w.x, -w.x): raising the fake logit means moving along
        // +sign(w), so the label-1 perturbation is +eps*sign(w) wherever
        // the box allows it.
        let d = 9;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut weights = w.clone();
        weights.extend(w.iter().map(|v| -v));
        let model = LinearModel::new(
            [1, 3, 3],
            Tensor::new(vec![2, d], weights).unwrap(),
            Tensor::zeros(vec![2]),
        )
        .unwrap();
        let x = Tensor::full(vec![1, 1, 3, 3], 0.5).unwrap();
        let eps = 0.1;
        let x_adv = fgsm(&model, &x, &[1], eps).unwrap();
        for i in 0..d {
            let expected = 0.5 + eps * sign(w[i]);
            assert!(
                (x_adv.data()[i] - expected).abs() < 1e-12,
                "element {i}: got {}, expected {expected}",
                x_adv.data()[i]
            );
        }
    }

    #[test]
    fn pgd_trace_is_non_decreasing_and_beats_start() {
        let model = cnn_model(5);
        let (x, y) = random_batch(6, 4);
        let cfg = AttackConfig { random_start: false, ..AttackConfig::pgd(8, 8.0 / 255.0) };
        let (x_adv, trace) = pgd_traced(&model, &x, &y, &cfg, 0).unwrap();
        for pair in trace.windows(2) {
            assert!(pair[1] >= pair[0] - 1e-15, "trace decreased: {trace:?}");
        }
        assert!(loss_at(&model, &x_adv, &y) >= loss_at(&model, &x, &y) - 1e-12);
    }

    #[test]
    fn pgd_respects_budget_and_box() {
        let model = cnn_model(8);
        let (x, y) = random_batch(9, 4);
        let cfg = AttackConfig::pgd(10, 8.0 / 255.0);
        let x_adv = pgd(&model, &x, &y, &cfg, 11).unwrap();
        assert!(linf_deviation(&x_adv, &x).unwrap() <= cfg.epsilon + 1e-9);
        assert!(x_adv.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn pgd_is_deterministic_per_seed() {
        let model = cnn_model(12);
        let (x, y) = random_batch(13, 3);
        let cfg = AttackConfig::pgd(5, 8.0 / 255.0);
        let a = pgd(&model, &x, &y, &cfg, 99).unwrap();
        let b = pgd(&model, &x, &y, &cfg, 99).unwrap();
        let c = pgd(&model, &x, &y, &cfg, 100).unwrap();
        assert_eq!(a.data(), b.data());
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn pgd_single_step_equals_fgsm_with_step_size_on_linear_model() {
        let model = LinearModel::random([1, 3, 3], 21);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let data: Vec<f64> = (0..9).map(|_| rng.random_range(0.2..0.8)).collect();
        let x = Tensor::new(vec![1, 1, 3, 3], data).unwrap();
        let y = vec![1u8];
        let eps = 0.05;
        let cfg = AttackConfig {
            step_size: Some(0.03),
            random_start: false,
            ..AttackConfig::pgd(1, eps)
        };
        let via_pgd = pgd(&model, &x, &y, &cfg, 0).unwrap();
        // fgsm at the step size, then projection onto the eps ball (a no-op
        // here since step < eps).
        let via_fgsm = fgsm(&model, &x, &y, 0.03).unwrap();
        assert_eq!(via_pgd.data(), via_fgsm.data());
    }

    #[test]
    fn pgd_attains_analytic_maximum_on_linear_model() {
        // For a linear model the attacked CE loss is monotone in the logit
        // margin, so the box maximum sits at the vertex
        // clip(x + eps*sign(w0 - w1), 0, 1) for label 1.
        let model = LinearModel::random([1, 3, 3], 31);
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let data: Vec<f64> = (0..9).map(|_| rng.random_range(0.3..0.7)).collect();
        let x = Tensor::new(vec![1, 1, 3, 3], data).unwrap();
        let y = vec![1u8];
        let eps = 0.08;
        let cfg = AttackConfig { random_start: false, ..AttackConfig::pgd(10, eps) };
        let x_adv = pgd(&model, &x, &y, &cfg, 0).unwrap();

        let w = model.weights();
        let vertex: Vec<f64> = (0..9)
            .map(|i| {
                let dir = sign(w.data()[i] - w.data()[9 + i]);
                (x.data()[i] + eps * dir).clamp(0.0, 1.0)
            })
            .collect();
        let vertex = Tensor::new(vec![1, 1, 3, 3], vertex).unwrap();
        let attained = loss_at(&model, &x_adv, &y);
        let analytic = loss_at(&model, &vertex, &y);
        assert!(
            (attained - analytic).abs() <= 1e-9,
            "attained {attained} vs analytic maximum {analytic}"
        );
    }

    #[test]
    fn pgd_rejects_l2_norm() {
        let model = cnn_model(1);
        let (x, y) = random_batch(2, 2);
        let cfg = AttackConfig { norm: AttackNorm::L2, ..AttackConfig::pgd(3, 0.1) };
        assert!(matches!(pgd(&model, &x, &y, &cfg, 0), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn feature_dissimilarity_target_also_ascends() {
        let model = cnn_model(17);
        let (x, y) = random_batch(18, 3);
        let cfg = AttackConfig {
            loss_target: LossTarget::FeatureDissimilarity,
            random_start: false,
            ..AttackConfig::pgd(6, 8.0 / 255.0)
        };
        let (x_adv, trace) = pgd_traced(&model, &x, &y, &cfg, 0).unwrap();
        assert!(trace.last().unwrap() >= trace.first().unwrap());
        assert!(linf_deviation(&x_adv, &x).unwrap() <= cfg.epsilon + 1e-9);
    }

    #[test]
    fn cw_zero_epsilon_is_identity() {
        let model = cnn_model(23);
        let (x, y) = random_batch(24, 3);
        let cfg = AttackConfig { epsilon: 0.0, ..AttackConfig::cw2() };
        let x_adv = cw_margin(&model, &x, &y, &cfg, 0).unwrap();
        assert_eq!(x_adv.data(), x.data());
    }

    #[test]
    fn cw_returns_input_when_already_misclassified() {
        let model = cnn_model(25);
        let (x, _) = random_batch(26, 3);
        // Label everything as the opposite of the model's prediction, so
        // every sample starts misclassified and zero perturbation is
        // optimal.
        let wrong: Vec<u8> = model.predict(&x).unwrap().iter().map(|&p| 1 - p).collect();
        let x_adv = cw_margin(&model, &x, &wrong, &AttackConfig::cw2(), 0).unwrap();
        assert_eq!(x_adv.data(), x.data());
    }

    #[test]
    fn cw_respects_l2_budget_and_box() {
        let model = cnn_model(27);
        let (x, y) = random_batch(28, 4);
        let cfg = AttackConfig { epsilon: 0.7, ..AttackConfig::cw2() };
        let x_adv = cw_margin(&model, &x, &y, &cfg, 0).unwrap();
        for d in l2_deviations(&x_adv, &x).unwrap() {
            assert!(d <= cfg.epsilon + 1e-9, "l2 deviation {d}");
        }
        assert!(x_adv.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn cw_matches_grid_search_oracle_on_linear_model() {
        let model = LinearModel::random([1, 2, 2], 41);
        let x = Tensor::full(vec![1, 1, 2, 2], 0.5).unwrap();
        let y = vec![1u8];
        let eps = 0.2;
        let cfg = AttackConfig { epsilon: eps, ..AttackConfig::cw2() };
        let x_adv = cw_margin(&model, &x, &y, &cfg, 0).unwrap();

        let margin = |pt: &Tensor| {
            let logits = {
                let mut g = Graph::new();
                let xn = g.constant(pt.clone());
                let l = model.logits_graph(&mut g, xn).unwrap();
                g.value(l).data().to_vec()
            };
            (logits[1] - logits[0]).max(-CW_KAPPA)
        };

        // 1000 random directions on the sphere of radius eps.
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut grid_best = margin(&x);
        for _ in 0..1000 {
            let dir: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-9 {
                continue;
            }
            let candidate: Vec<f64> = x
                .data()
                .iter()
                .zip(&dir)
                .map(|(&v, &d)| (v + eps * d / norm).clamp(0.0, 1.0))
                .collect();
            let t = Tensor::new(vec![1, 1, 2, 2], candidate).unwrap();
            grid_best = grid_best.min(margin(&t));
        }
        let attained = margin(&x_adv);
        assert!(
            attained <= grid_best + 1e-3,
            "cw margin {attained} vs grid best {grid_best}"
        );
    }

    #[test]
    fn transfer_degenerate_equals_white_box() {
        let model = cnn_model(51);
        let (x, y) = random_batch(52, 3);
        let cfg = AttackConfig::pgd_eval();
        let white = pgd(&model, &x, &y, &cfg, 5).unwrap();
        let outcome = transfer_attack(&model, &model, &x, &y, &cfg, 5).unwrap();
        assert_eq!(outcome.x_adv.data(), white.data());
    }

    #[test]
    fn transfer_zero_epsilon_changes_nothing() {
        let surrogate = cnn_model(53);
        let target = cnn_model(54);
        let (x, y) = random_batch(55, 3);
        let cfg = AttackConfig { epsilon: 0.0, random_start: false, ..AttackConfig::pgd_eval() };
        let outcome = transfer_attack(&surrogate, &target, &x, &y, &cfg, 0).unwrap();
        assert_eq!(outcome.x_adv.data(), x.data());
        let baseline = target.predict(&x).unwrap();
        let unchanged: Vec<bool> = baseline.iter().zip(&y).map(|(&p, &l)| p != l).collect();
        assert_eq!(outcome.success, unchanged);
    }

    #[test]
    fn transfer_rejects_shape_mismatch() {
        let surrogate = cnn_model(56);
        let target = init_params(&ArchitectureSpec::micro_cnn([1, 6, 6]), 57).unwrap();
        let (x, y) = random_batch(58, 2);
        let err = transfer_attack(&surrogate, &target, &x, &y, &AttackConfig::pgd_eval(), 0).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
    }

    #[test]
    fn budget_fuzz_small() {
        // A heavier 1000-case fuzz lives in the acceptance suite; this is
        // the fast regression version.
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        for trial in 0..30 {
            let model = cnn_model(100 + trial);
            let (x, y) = random_batch(200 + trial, 2);
            let eps = rng.random_range(0.0..0.2);
            let which = trial % 3;
            let (x_adv, is_l2) = match which {
                0 => (fgsm(&model, &x, &y, eps).unwrap(), false),
                1 => {
                    let cfg = AttackConfig::pgd(4, eps);
                    (pgd(&model, &x, &y, &cfg, trial).unwrap(), false)
                }
                _ => {
                    let cfg = AttackConfig { epsilon: eps, steps: 10, ..AttackConfig::cw2() };
                    (cw_margin(&model, &x, &y, &cfg, trial).unwrap(), true)
                }
            };
            assert!(x_adv.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            if is_l2 {
                for d in l2_deviations(&x_adv, &x).unwrap() {
                    assert!(d <= eps + 1e-9);
                }
            } else {
                assert!(linf_deviation(&x_adv, &x).unwrap() <= eps + 1e-9);
            }
        }
    }

    #[test]
    fn attack_config_validation() {
        assert!(AttackConfig::pgd_eval().validate().is_ok());
        let bad_eps = AttackConfig { epsilon: -0.1, ..AttackConfig::pgd_eval() };
        assert!(bad_eps.validate().is_err());
        let bad_steps = AttackConfig { steps: 0, ..AttackConfig::pgd_eval() };
        assert!(bad_steps.validate().is_err());
        let bad_step_size = AttackConfig { step_size: Some(0.0), ..AttackConfig::pgd_eval() };
        assert!(bad_step_size.validate().is_err());
    }

    #[test]
    fn attack_rejects_out_of_box_input() {
        let model = cnn_model(61);
        let x = Tensor::full(vec![1, 1, 4, 4], 1.5).unwrap();
        let err = fgsm(&model, &x, &[0], 0.1).unwrap_err();
        assert!(matches!(err, Error::InvalidConfig(_)));
    }
}
