//! Central finite differences, the independent oracle for [`Graph::backward`].
//!
//! [`Graph::backward`]: crate::Graph::backward

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, OpKind, Var};
use crate::error::{Error, Result};
use crate::layers::{BatchNormLayer, Conv2d, OperLayer};
use crate::loss::{hybrid_loss_graph, LossConfig};
use crate::model::{ModelConfig, OSegNetModel};
use crate::tensor::Tensor;

/// Central-difference gradient of `f` at `x`:
/// `(f(x + eps·e_i) - f(x - eps·e_i)) / (2·eps)` per element.
///
/// The divisor is the step actually representable in `f32`, which removes
/// the rounding of `x ± eps` from the estimate.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, eps: f32) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    let indices: Vec<usize> = (0..x.len()).collect();
    let partial = finite_diff_at(&mut f, x, eps, &indices)?;
    Tensor::new(x.shape(), partial.into_iter().map(|v| v as f32).collect())
}

/// Central differences for the listed flat indices only.
pub fn finite_diff_at<F>(f: &mut F, x: &Tensor, eps: f32, indices: &[usize]) -> Result<Vec<f64>>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if eps <= 0.0 || !eps.is_finite() {
        return Err(Error::invalid("eps", format!("{eps} must be positive")));
    }
    let mut probe = x.clone();
    indices
        .iter()
        .map(|&i| {
            let orig = x.data()[i];
            let up = orig + eps;
            let down = orig - eps;
            probe.data_mut()[i] = up;
            let f_up = f(&probe)?;
            probe.data_mut()[i] = down;
            let f_down = f(&probe)?;
            probe.data_mut()[i] = orig;
            Ok((f_up - f_down) / (up as f64 - down as f64))
        })
        .collect()
}

/// Scale-normalised gradient discrepancy:
/// `max_i |a_i - n_i| / max(max_i |a_i|, max_i |n_i|, floor)`.
///
/// Normalising by the tensor's own gradient magnitude keeps `f32` rounding
/// noise on individual near-zero entries from dominating; `floor` takes
/// over when the whole gradient is close to zero.
pub fn relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let mut diff = 0.0f64;
    let mut scale = floor;
    for (&a, &n) in analytic.iter().zip(numeric) {
        diff = diff.max((a - n).abs());
        scale = scale.max(a.abs()).max(n.abs());
    }
    diff / scale
}

/// Absolute floor for near-zero gradients.
pub const GRAD_FLOOR: f64 = 1e-5;

/// Threshold for checks of a single operation in isolation.
pub const ISOLATED_THRESHOLD: f64 = 1e-3;
/// Threshold for the whole-model check at `f32`.
pub const END_TO_END_THRESHOLD: f64 = 1e-2;

/// Layer kinds reported by [`run_gradcheck`], in report order.
pub const KINDS: [&str; 6] = [
    "conv",
    "oper",
    "oper-transpose",
    "batchnorm",
    "dice",
    "focal",
];

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub kind: &'static str,
    /// Which tensor was checked, e.g. `oper Q=3 kernel` or `decoder.block2.bias`.
    pub label: String,
    pub error: f64,
    pub threshold: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.error < self.threshold
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradcheckReport {
    pub isolated: Vec<CheckResult>,
    pub end_to_end: Vec<CheckResult>,
    /// Number of model parameters sampled by the end-to-end check.
    pub sampled_params: usize,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.isolated
            .iter()
            .chain(&self.end_to_end)
            .all(CheckResult::passed)
    }

    /// The worst failing check, if any.
    pub fn worst_failure(&self) -> Option<&CheckResult> {
        self.isolated
            .iter()
            .chain(&self.end_to_end)
            .filter(|c| !c.passed())
            .max_by(|a, b| (a.error / a.threshold).total_cmp(&(b.error / b.threshold)))
    }

    /// Largest isolated error per kind, with the tensor that produced it.
    pub fn max_by_kind(&self, results: &[CheckResult]) -> Vec<(&'static str, f64, String)> {
        KINDS
            .iter()
            .filter_map(|&kind| {
                results
                    .iter()
                    .filter(|c| c.kind == kind)
                    .max_by(|a, b| a.error.total_cmp(&b.error))
                    .map(|c| (kind, c.error, c.label.clone()))
            })
            .collect()
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let sections = [
            ("isolated", &self.isolated, ISOLATED_THRESHOLD),
            ("end-to-end", &self.end_to_end, END_TO_END_THRESHOLD),
        ];
        for (title, results, threshold) in sections {
            s.push_str(&format!("{title} (threshold {threshold:e})\n"));
            for (kind, err, label) in self.max_by_kind(results) {
                let verdict = if err < threshold { "ok" } else { "FAIL" };
                s.push_str(&format!(
                    "  {kind:<15} max rel err {err:.3e}  [{label}] {verdict}\n"
                ));
            }
        }
        s.push_str(&format!(
            "end-to-end sampled parameters: {}\n",
            self.sampled_params
        ));
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradcheckOptions {
    pub q_order: usize,
    pub seed: u64,
    /// Input size of the end-to-end model; a multiple of 32.
    pub size: usize,
    /// Minimum number of model parameters sampled end to end.
    pub samples: usize,
    /// Corrupts one backward rule (negative control).
    pub fault: Option<(OpKind, f32)>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            q_order: 3,
            seed: 0,
            size: 32,
            samples: 200,
            fault: None,
        }
    }
}

fn new_graph(fault: Option<(OpKind, f32)>) -> Graph {
    let mut g = Graph::new();
    if let Some((kind, factor)) = fault {
        g.inject_fault(kind, factor);
    }
    g
}

fn random_tensor(shape: &[usize], lo: f32, hi: f32, rng: &mut ChaCha8Rng) -> Tensor {
    let len = shape.iter().product();
    Tensor::new(shape, (0..len).map(|_| rng.random_range(lo..hi)).collect()).expect("valid shape")
}

fn binary_tensor(shape: &[usize], p: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let len = shape.iter().product();
    let data = (0..len)
        .map(|_| if rng.random_bool(p) { 1.0 } else { 0.0 })
        .collect();
    Tensor::new(shape, data).expect("valid shape")
}

/// `Σ out ⊙ w` with a fixed random weighting, so every output element
/// contributes a distinct slope.
fn weighted_sum(g: &mut Graph, out: Var, weights: &Tensor) -> Result<Var> {
    let w = g.constant(weights.clone());
    let m = g.mul(out, w)?;
    Ok(g.sum(m))
}

/// Compares analytic and central-difference gradients for each of
/// `inputs`. `build` records the loss and returns it with the leaves
/// holding `inputs`, in order.
fn check_inputs<B>(
    kind: &'static str,
    prefix: &str,
    names: &[&str],
    inputs: &[Tensor],
    eps: f32,
    fault: Option<(OpKind, f32)>,
    build: B,
) -> Result<Vec<CheckResult>>
where
    B: Fn(&mut Graph, &[Tensor]) -> Result<(Var, Vec<Var>)>,
{
    let mut g = new_graph(fault);
    let (loss, leaves) = build(&mut g, inputs)?;
    g.backward(loss)?;
    let mut out = Vec::with_capacity(inputs.len());
    for (i, name) in names.iter().enumerate() {
        let analytic: Vec<f64> = g
            .grad(leaves[i])
            .expect("leaf gradient")
            .data()
            .iter()
            .map(|&v| v as f64)
            .collect();
        let all: Vec<usize> = (0..inputs[i].len()).collect();
        let mut f = |t: &Tensor| {
            let mut probe = inputs.to_vec();
            probe[i] = t.clone();
            let mut g = new_graph(fault);
            let (loss, _) = build(&mut g, &probe)?;
            Ok(g.scalar(loss))
        };
        let numeric = finite_diff_at(&mut f, &inputs[i], eps, &all)?;
        out.push(CheckResult {
            kind,
            label: format!("{prefix} {name}"),
            error: relative_error(&analytic, &numeric, GRAD_FLOOR),
            threshold: ISOLATED_THRESHOLD,
        });
    }
    Ok(out)
}

fn layer_check(
    kind: &'static str,
    prefix: &str,
    layer: &OperLayer,
    x: Tensor,
    rng: &mut ChaCha8Rng,
    fault: Option<(OpKind, f32)>,
) -> Result<Vec<CheckResult>> {
    let out_shape = layer.apply(&x)?.shape().to_vec();
    let w = random_tensor(&out_shape, -1.0, 1.0, rng);
    let mut bias = layer.bias.clone();
    bias.data_mut()
        .iter_mut()
        .for_each(|b| *b = rng.random_range(-0.5..0.5));
    let inputs = [x, layer.kernel.clone(), bias];
    check_inputs(
        kind,
        prefix,
        &["input", "kernel", "bias"],
        &inputs,
        1e-2,
        fault,
        |g, t| {
            let mut l = layer.clone();
            l.kernel = t[1].clone();
            l.bias = t[2].clone();
            let x = g.leaf(t[0].clone());
            let mut params = Vec::new();
            let out = l.forward(g, x, &mut params)?;
            Ok((weighted_sum(g, out, &w)?, vec![x, params[0], params[1]]))
        },
    )
}

/// Isolated checks of every layer kind for polynomial order `q`.
pub fn isolated_checks(
    q: usize,
    seed: u64,
    fault: Option<(OpKind, f32)>,
) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results = Vec::new();

    for stride in [1, 2] {
        let conv = Conv2d::new(3, 4, 3, stride, &mut rng);
        let x = random_tensor(&[2, 3, 6, 6], -1.0, 1.0, &mut rng);
        let w = random_tensor(conv.apply(&x)?.shape(), -1.0, 1.0, &mut rng);
        let bias = random_tensor(&[4], -0.5, 0.5, &mut rng);
        let inputs = [x, conv.kernel.clone(), bias];
        let prefix = format!("conv stride {stride}");
        results.extend(check_inputs(
            "conv",
            &prefix,
            &["input", "kernel", "bias"],
            &inputs,
            1e-2,
            fault,
            |g, t| {
                let mut c = conv.clone();
                c.kernel = t[1].clone();
                c.bias = t[2].clone();
                let x = g.leaf(t[0].clone());
                let mut params = Vec::new();
                let out = c.forward(g, x, &mut params)?;
                Ok((weighted_sum(g, out, &w)?, vec![x, params[0], params[1]]))
            },
        )?);
    }

    // Inputs stay inside the tanh range the decoder sees.
    let oper = OperLayer::new(q, 2, 3, 3, 1, false, &mut rng)?;
    let x = random_tensor(&[2, 2, 5, 5], -0.9, 0.9, &mut rng);
    results.extend(layer_check(
        "oper",
        &format!("oper Q={q}"),
        &oper,
        x,
        &mut rng,
        fault,
    )?);

    let oper_t = OperLayer::new(q, 2, 3, 3, 2, true, &mut rng)?;
    let x = random_tensor(&[2, 2, 4, 4], -0.9, 0.9, &mut rng);
    results.extend(layer_check(
        "oper-transpose",
        &format!("oper-transpose Q={q}"),
        &oper_t,
        x,
        &mut rng,
        fault,
    )?);

    let bn = BatchNormLayer::new(3);
    let x = random_tensor(&[2, 3, 4, 4], -2.0, 2.0, &mut rng);
    let w = random_tensor(&[2, 3, 4, 4], -1.0, 1.0, &mut rng);
    let gamma = random_tensor(&[3], 0.5, 1.5, &mut rng);
    let beta = random_tensor(&[3], -0.5, 0.5, &mut rng);
    let inputs = [x, gamma, beta];
    results.extend(check_inputs(
        "batchnorm",
        "batchnorm",
        &["input", "gamma", "beta"],
        &inputs,
        1e-2,
        fault,
        |g, t| {
            let mut l = bn.clone();
            l.gamma = t[1].clone();
            l.beta = t[2].clone();
            let x = g.leaf(t[0].clone());
            let mut params = Vec::new();
            let (out, _) = l.forward(g, x, true, &mut params)?;
            Ok((weighted_sum(g, out, &w)?, vec![x, params[0], params[1]]))
        },
    )?);

    let target = binary_tensor(&[2, 1, 4, 4], 0.4, &mut rng);
    let pred = random_tensor(&[2, 1, 4, 4], 0.05, 0.95, &mut rng);
    let loss = LossConfig::default();
    results.extend(check_inputs(
        "dice",
        "dice",
        &["prediction"],
        std::slice::from_ref(&pred),
        1e-3,
        fault,
        |g, t| {
            let p = g.leaf(t[0].clone());
            Ok((g.dice_loss(&target, p, loss.dice_smooth)?, vec![p]))
        },
    )?);
    results.extend(check_inputs(
        "focal",
        "focal",
        &["prediction"],
        &[pred],
        1e-3,
        fault,
        |g, t| {
            let p = g.leaf(t[0].clone());
            Ok((
                g.focal_loss(&target, p, loss.gamma, loss.alpha, loss.prob_clip)?,
                vec![p],
            ))
        },
    )?);
    Ok(results)
}

/// Batch of the whole-model check. At size 32 the deepest batch norm sees
/// one pixel per image, so a batch of two makes it nearly a sign function.
const E2E_BATCH: usize = 4;
const E2E_EPS: f32 = 1e-3;

/// Layer kind of a model tensor name.
pub fn kind_of(name: &str) -> &'static str {
    if name.contains(".bn.") {
        "batchnorm"
    } else if name.starts_with("encoder.") {
        "conv"
    } else if name.starts_with("decoder.head") {
        "oper"
    } else {
        "oper-transpose"
    }
}

/// Whole-model check: hybrid loss of a small model in training mode,
/// differentiated with respect to at least `opts.samples` parameters
/// spread over every tensor. Errors are normalised by the largest gradient
/// within each layer kind, since biases feeding a batch norm have an
/// exactly zero gradient.
pub fn end_to_end_check(opts: &GradcheckOptions) -> Result<(Vec<CheckResult>, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0xe2e);
    let config = ModelConfig {
        q_order: opts.q_order,
        input_size: opts.size,
        encoder_channels: vec![4, 8, 8, 8, 8],
    };
    let model = OSegNetModel::build(config, &mut rng)?;
    let batch = [E2E_BATCH, 1, opts.size, opts.size];
    let x = random_tensor(&batch, 0.0, 1.0, &mut rng);
    let target = binary_tensor(&batch, 0.3, &mut rng);
    let loss_cfg = LossConfig::default();
    let loss_of = |m: &OSegNetModel, g: &mut Graph| -> Result<(Var, Vec<Var>)> {
        let xv = g.constant(x.clone());
        let pass = m.forward_graph(g, xv, true)?;
        Ok((
            hybrid_loss_graph(g, &target, pass.output, &loss_cfg)?,
            pass.params,
        ))
    };

    let mut g = new_graph(opts.fault);
    let (loss, leaves) = loss_of(&model, &mut g)?;
    g.backward(loss)?;

    let params = model.parameters();
    let mut per = 1;
    while params.iter().map(|(_, t)| t.len().min(per)).sum::<usize>() < opts.samples {
        per += 1;
    }
    let mut entries = Vec::new();
    let mut sampled = 0;
    for (ti, (name, t)) in params.iter().enumerate() {
        let mut idx: Vec<usize> = (0..t.len()).collect();
        idx.shuffle(&mut rng);
        idx.truncate(per);
        idx.sort_unstable();
        sampled += idx.len();
        let grad = g.grad(leaves[ti]).expect("parameter gradient");
        let analytic: Vec<f64> = idx.iter().map(|&i| grad.data()[i] as f64).collect();
        let mut f = |probe: &Tensor| {
            let mut m = model.clone();
            *m.parameters_mut()[ti].1 = probe.clone();
            let mut g = new_graph(opts.fault);
            let (loss, _) = loss_of(&m, &mut g)?;
            Ok(g.scalar(loss))
        };
        let numeric = finite_diff_at(&mut f, t, E2E_EPS, &idx)?;
        entries.push((name.clone(), analytic, numeric));
    }

    let mut results = Vec::new();
    for kind in KINDS {
        let group: Vec<_> = entries
            .iter()
            .filter(|(n, _, _)| kind_of(n) == kind)
            .collect();
        let scale = group
            .iter()
            .flat_map(|(_, a, n)| a.iter().chain(n))
            .fold(GRAD_FLOOR, |m, v| m.max(v.abs()));
        for (name, a, n) in group {
            let diff = a
                .iter()
                .zip(n)
                .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
            results.push(CheckResult {
                kind,
                label: name.clone(),
                error: diff / scale,
                threshold: END_TO_END_THRESHOLD,
            });
        }
    }
    Ok((results, sampled))
}

pub fn run_gradcheck(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let isolated = isolated_checks(opts.q_order, opts.seed, opts.fault)?;
    let (end_to_end, sampled_params) = end_to_end_check(opts)?;
    Ok(GradcheckReport {
        isolated,
        end_to_end,
        sampled_params,
    })
}
