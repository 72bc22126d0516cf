//! Finite-difference verification of analytic gradients.
//!
//! [`grad_check`] compares the gradient computed by [`Graph::backward`]
//! against central differences, elementwise, using a relative error measure.
//! [`gradient_battery`] runs one seeded check per primitive op; higher-level
//! modules contribute their own battery entries for composite losses.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId, Tensor};

/// Step used for central differences.
pub const FD_STEP: f64 = 1e-5;

/// Relative tolerance for plain arithmetic primitives.
pub const PRIMITIVE_TOLERANCE: f64 = 1e-5;

/// Relaxed tolerance for ops that compose `exp` and friends, where finite
/// differences themselves carry more error.
pub const COMPOSITE_TOLERANCE: f64 = 1e-4;

/// Outcome of a single gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest relative error over all input elements.
    pub max_rel_error: f64,
    /// Flat index of the worst element.
    pub worst_index: usize,
    /// Whether `max_rel_error` is within the requested tolerance.
    pub pass: bool,
}

/// One named battery case result.
#[derive(Debug, Clone)]
pub struct BatteryEntry {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl BatteryEntry {
    pub fn from_report(name: &str, tolerance: f64, report: &GradCheckReport) -> Self {
        BatteryEntry {
            name: name.to_string(),
            max_rel_error: report.max_rel_error,
            tolerance,
            pass: report.max_rel_error <= tolerance,
        }
    }
}

fn eval_scalar<F>(build: &F, input: &Tensor) -> Result<f64>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let x = g.constant(input.clone());
    let out = build(&mut g, x)?;
    g.value(out).scalar_value()
}

/// Checks the analytic gradient of a scalar-valued function of one tensor.
///
/// `build` must construct the same computation every time it is called; it
/// receives a fresh graph and the node holding the (possibly perturbed)
/// input. The relative error of element `i` is
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn grad_check<F>(build: F, input: &Tensor, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let x = g.leaf(input.clone(), true);
    let out = build(&mut g, x)?;
    if g.value(out).numel() != 1 {
        return Err(Error::NonScalarLoss { shape: g.value(out).shape().to_vec() });
    }
    let grads = g.backward(out)?;
    let analytic = grads
        .get(&x)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(input.shape().to_vec()));

    let mut max_rel_error = 0.0;
    let mut worst_index = 0;
    for i in 0..input.numel() {
        let mut plus = input.clone();
        plus.data_mut()[i] += FD_STEP;
        let mut minus = input.clone();
        minus.data_mut()[i] -= FD_STEP;
        let numeric = (eval_scalar(&build, &plus)? - eval_scalar(&build, &minus)?) / (2.0 * FD_STEP);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / 1.0_f64.max(a.abs()).max(numeric.abs());
        if rel > max_rel_error {
            max_rel_error = rel;
            worst_index = i;
        }
    }
    Ok(GradCheckReport { max_rel_error, worst_index, pass: max_rel_error <= tolerance })
}

/// Uniform sample in `[lo, hi)`.
fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let numel = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).expect("finite random data")
}

/// Uniform magnitude in `[0.2, 1)` with random sign: stays away from the
/// relu kink and from zero norms.
fn rand_tensor_signed(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let numel = shape.iter().product();
    let data: Vec<f64> = (0..numel)
        .map(|_| {
            let mag = rng.random_range(0.2..1.0);
            if rng.random_range(0.0..1.0) < 0.5 {
                -mag
            } else {
                mag
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("finite random data")
}

/// Reduces an arbitrary node to a scalar with a fixed random weighting, so
/// that per-element gradient errors cannot cancel out.
fn weighted_readout(g: &mut Graph, y: NodeId, weights: &Tensor) -> Result<NodeId> {
    let n = g.value(y).numel();
    let flat = g.reshape(y, vec![n])?;
    let w = g.constant(weights.clone());
    let prod = g.mul(flat, w)?;
    g.sum(prod)
}

type Build = Box<dyn Fn(&mut Graph, NodeId) -> Result<NodeId>>;

struct Case {
    name: &'static str,
    tolerance: f64,
    input: Tensor,
    build: Build,
}

fn primitive_cases(seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases: Vec<Case> = Vec::new();
    let mut readout_weights = {
        let mut w_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0001);
        move |n: usize| {
            let data: Vec<f64> = (0..n).map(|_| w_rng.random_range(0.5..1.5)).collect();
            Tensor::new(vec![n], data).expect("finite weights")
        }
    };

    macro_rules! case {
        ($name:expr, $tol:expr, $input:expr, $build:expr) => {
            cases.push(Case { name: $name, tolerance: $tol, input: $input, build: Box::new($build) })
        };
    }

    let p = PRIMITIVE_TOLERANCE;
    let c = COMPOSITE_TOLERANCE;

    let other = rand_tensor_signed(&mut rng, &[3, 4]);
    let w12 = readout_weights(12);
    {
        let (o, w) = (other.clone(), w12.clone());
        case!("add", p, rand_tensor_signed(&mut rng, &[3, 4]), move |g, x| {
            let o = g.constant(o.clone());
            let y = g.add(x, o)?;
            weighted_readout(g, y, &w)
        });
    }
    {
        let (o, w) = (other.clone(), w12.clone());
        case!("sub_lhs", p, rand_tensor_signed(&mut rng, &[3, 4]), move |g, x| {
            let o = g.constant(o.clone());
            let y = g.sub(x, o)?;
            weighted_readout(g, y, &w)
        });
    }
    {
        let (o, w) = (other.clone(), w12.clone());
        case!("sub_rhs", p, rand_tensor_signed(&mut rng, &[3, 4]), move |g, x| {
            let o = g.constant(o.clone());
            let y = g.sub(o, x)?;
            weighted_readout(g, y, &w)
        });
    }
    {
        let (o, w) = (other.clone(), w12.clone());
        case!("mul_lhs", p, rand_tensor_signed(&mut rng, &[3, 4]), move |g, x| {
            let o = g.constant(o.clone());
            let y = g.mul(x, o)?;
            weighted_readout(g, y, &w)
        });
    }
    {
        let (o, w) = (other.clone(), w12.clone());
        case!("mul_rhs", p, rand_tensor_signed(&mut rng, &[3, 4]), move |g, x| {
            let o = g.constant(o.clone());
            let y = g.mul(o, x)?;
            weighted_readout(g, y, &w)
        });
    }
    {
        let w = w12.clone();
        case!("scale", p, rand_tensor_signed(&mut rng, &[3, 4]), move |g, x| {
            let y = g.scale(x, -1.7)?;
            weighted_readout(g, y, &w)
        });
    }
    {
        let w = w12.clone();
        case!("add_const", p, rand_tensor_signed(&mut rng, &[3, 4]), move |g, x| {
            let y = g.add_const(x, 0.9)?;
            weighted_readout(g, y, &w)
        });
    }

    {
        let rhs = rand_tensor_signed(&mut rng, &[4, 2]);
        let w = readout_weights(6);
        case!("matmul_lhs", p, rand_tensor_signed(&mut rng, &[3, 4]), move |g, x| {
            let r = g.constant(rhs.clone());
            let y = g.matmul(x, r)?;
            weighted_readout(g, y, &w)
        });
    }
    {
        let lhs = rand_tensor_signed(&mut rng, &[3, 4]);
        let w = readout_weights(6);
        case!("matmul_rhs", p, rand_tensor_signed(&mut rng, &[4, 2]), move |g, x| {
            let l = g.constant(lhs.clone());
            let y = g.matmul(l, x)?;
            weighted_readout(g, y, &w)
        });
    }
    {
        let w = w12.clone();
        case!("transpose2d", p, rand_tensor_signed(&mut rng, &[3, 4]), move |g, x| {
            let y = g.transpose2d(x)?;
            weighted_readout(g, y, &w)
        });
    }
    {
        let bias = rand_tensor_signed(&mut rng, &[4]);
        let w = w12.clone();
        case!("bias_add_input", p, rand_tensor_signed(&mut rng, &[3, 4]), move |g, x| {
            let b = g.constant(bias.clone());
            let y = g.bias_add(x, b)?;
            weighted_readout(g, y, &w)
        });
    }
    {
        let mat = rand_tensor_signed(&mut rng, &[3, 4]);
        let w = w12.clone();
        case!("bias_add_bias", p, rand_tensor_signed(&mut rng, &[4]), move |g, x| {
            let m = g.constant(mat.clone());
            let y = g.bias_add(m, x)?;
            weighted_readout(g, y, &w)
        });
    }

    let conv_x = rand_tensor_signed(&mut rng, &[2, 2, 5, 5]);
    let conv_w = rand_tensor_signed(&mut rng, &[3, 2, 3, 3]);
    let conv_b = rand_tensor_signed(&mut rng, &[3]);
    let conv_out_weights = readout_weights(2 * 3 * 3 * 3);
    {
        let (wt, bt, ro) = (conv_w.clone(), conv_b.clone(), conv_out_weights.clone());
        case!("conv2d_input", p, conv_x.clone(), move |g, x| {
            let w = g.constant(wt.clone());
            let b = g.constant(bt.clone());
            let y = g.conv2d(x, w, Some(b), 2, 1)?;
            weighted_readout(g, y, &ro)
        });
    }
    {
        let (xt, bt, ro) = (conv_x.clone(), conv_b.clone(), conv_out_weights.clone());
        case!("conv2d_weight", p, conv_w.clone(), move |g, w| {
            let x = g.constant(xt.clone());
            let b = g.constant(bt.clone());
            let y = g.conv2d(x, w, Some(b), 2, 1)?;
            weighted_readout(g, y, &ro)
        });
    }
    {
        let (xt, wt, ro) = (conv_x.clone(), conv_w.clone(), conv_out_weights.clone());
        case!("conv2d_bias", p, conv_b.clone(), move |g, b| {
            let x = g.constant(xt.clone());
            let w = g.constant(wt.clone());
            let y = g.conv2d(x, w, Some(b), 2, 1)?;
            weighted_readout(g, y, &ro)
        });
    }

    {
        let w = w12.clone();
        case!("relu", p, rand_tensor_signed(&mut rng, &[3, 4]), move |g, x| {
            let y = g.relu(x)?;
            weighted_readout(g, y, &w)
        });
    }
    {
        let w = w12.clone();
        case!("sigmoid", c, rand_tensor_signed(&mut rng, &[3, 4]), move |g, x| {
            let y = g.sigmoid(x)?;
            weighted_readout(g, y, &w)
        });
    }
    {
        let w = w12.clone();
        case!("exp", c, rand_tensor_signed(&mut rng, &[3, 4]), move |g, x| {
            let y = g.exp(x)?;
            weighted_readout(g, y, &w)
        });
    }
    {
        let w = w12.clone();
        case!("log", c, rand_tensor(&mut rng, &[3, 4], 0.3, 2.0), move |g, x| {
            let y = g.log(x)?;
            weighted_readout(g, y, &w)
        });
    }

    case!("sum", p, rand_tensor_signed(&mut rng, &[3, 4]), |g, x| g.sum(x));
    case!("mean", p, rand_tensor_signed(&mut rng, &[3, 4]), |g, x| g.mean(x));
    {
        let w = readout_weights(6);
        case!("global_avg_pool", p, rand_tensor_signed(&mut rng, &[2, 3, 4, 4]), move |g, x| {
            let y = g.global_avg_pool(x)?;
            weighted_readout(g, y, &w)
        });
    }
    {
        let w = w12.clone();
        case!("reshape", p, rand_tensor_signed(&mut rng, &[3, 4]), move |g, x| {
            let y = g.reshape(x, vec![2, 6])?;
            weighted_readout(g, y, &w)
        });
    }
    {
        let tail = rand_tensor_signed(&mut rng, &[2, 3]);
        let w = readout_weights(12);
        case!("concat_axis0", p, rand_tensor_signed(&mut rng, &[2, 3]), move |g, x| {
            let t = g.constant(tail.clone());
            let y = g.concat(&[x, t], 0)?;
            weighted_readout(g, y, &w)
        });
    }
    {
        let tail = rand_tensor_signed(&mut rng, &[2, 2]);
        let w = readout_weights(10);
        case!("concat_axis1", p, rand_tensor_signed(&mut rng, &[2, 3]), move |g, x| {
            let t = g.constant(tail.clone());
            let y = g.concat(&[x, t], 1)?;
            weighted_readout(g, y, &w)
        });
    }
    {
        let w = readout_weights(6);
        case!("slice_axis0", p, rand_tensor_signed(&mut rng, &[4, 3]), move |g, x| {
            let y = g.slice(x, 0, 1, 2)?;
            weighted_readout(g, y, &w)
        });
    }
    {
        let w = readout_weights(8);
        case!("slice_axis1", p, rand_tensor_signed(&mut rng, &[4, 3]), move |g, x| {
            let y = g.slice(x, 1, 0, 2)?;
            weighted_readout(g, y, &w)
        });
    }
    {
        let w = w12.clone();
        case!("l2_normalize_axis1", p, rand_tensor_signed(&mut rng, &[3, 4]), move |g, x| {
            let y = g.l2_normalize(x, 1)?;
            weighted_readout(g, y, &w)
        });
    }
    {
        let w = w12.clone();
        case!("l2_normalize_axis0", p, rand_tensor_signed(&mut rng, &[3, 4]), move |g, x| {
            let y = g.l2_normalize(x, 0)?;
            weighted_readout(g, y, &w)
        });
    }
    {
        let other_rows = rand_tensor_signed(&mut rng, &[3, 4]);
        let w = readout_weights(3);
        case!("cosine_rows_lhs", p, rand_tensor_signed(&mut rng, &[3, 4]), move |g, x| {
            let o = g.constant(other_rows.clone());
            let y = g.cosine_rows(x, o)?;
            weighted_readout(g, y, &w)
        });
    }
    {
        let other_rows = rand_tensor_signed(&mut rng, &[3, 4]);
        let w = readout_weights(3);
        case!("cosine_rows_rhs", p, rand_tensor_signed(&mut rng, &[3, 4]), move |g, x| {
            let o = g.constant(other_rows.clone());
            let y = g.cosine_rows(o, x)?;
            weighted_readout(g, y, &w)
        });
    }
    {
        let other_vec = rand_tensor_signed(&mut rng, &[5]);
        case!("cosine_similarity", p, rand_tensor_signed(&mut rng, &[5]), move |g, x| {
            let o = g.constant(other_vec.clone());
            g.cosine_similarity(x, o)
        });
    }
    {
        let w = w12.clone();
        case!("log_softmax", c, rand_tensor_signed(&mut rng, &[3, 4]), move |g, x| {
            let y = g.log_softmax(x)?;
            weighted_readout(g, y, &w)
        });
    }

    cases
}

/// Runs one seeded gradient check per primitive op and returns the entries
/// in a stable order. Plain arithmetic uses [`PRIMITIVE_TOLERANCE`]; ops
/// composing `exp` use [`COMPOSITE_TOLERANCE`].
pub fn gradient_battery(seed: u64) -> Result<Vec<BatteryEntry>> {
    gradient_battery_with_tolerance(seed, None)
}

/// Like [`gradient_battery`] but with a single tolerance replacing every
/// case's default, for callers that sweep strictness.
pub fn gradient_battery_with_tolerance(
    seed: u64,
    tolerance: Option<f64>,
) -> Result<Vec<BatteryEntry>> {
    let mut entries = Vec::new();
    for case in primitive_cases(seed) {
        let tol = tolerance.unwrap_or(case.tolerance);
        let report = grad_check(case.build, &case.input, tol)?;
        entries.push(BatteryEntry::from_report(case.name, tol, &report));
    }
    Ok(entries)
}
