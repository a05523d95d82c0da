//! Self-checks of the differentiation engine and the objectives: central
//! finite differences per primitive and per composed loss, an end-to-end
//! check of the meta gradient, closed-form loss fixtures and probability
//! invariants.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::AugmentConfig;
use crate::losses::{
    backdoor_from_parts, backdoor_probabilities, backdoor_probability, contrastive_loss, msr_loss, total_loss,
    uniformity_loss, BackdoorInputs, BatchEmbeddings, NegativesMode,
};
use crate::nn::{init_params, Downsample, ModelBundle, ModelConfig, WeightActivation};
use crate::tensor::{ConvSpec, Graph, NodeId, Result as TResult, Tensor};
use crate::train::{make_minibatch, meta_gradient, meta_objective_value, Minibatch, TrainingConfig};

/// Step of the central differences.
pub const FD_STEP: f64 = 1e-5;
/// Tolerance of first-order checks.
pub const FD_TOL: f64 = 1e-4;
/// Tolerance of second-order and meta-gradient checks.
pub const SECOND_ORDER_TOL: f64 = 1e-3;
/// Magnitude below which errors are measured absolutely.
pub const REL_FLOOR: f64 = 1e-3;

pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub instances: usize,
    /// Worst relative error, when the check is numeric.
    pub max_rel_err: Option<f64>,
    pub tolerance: Option<f64>,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn numeric(name: &str, instances: usize, err: f64, tol: f64) -> Self {
        Self {
            name: name.into(),
            instances,
            max_rel_err: Some(err),
            tolerance: Some(tol),
            passed: err <= tol,
            detail: String::new(),
        }
    }

    fn failed(name: &str, detail: String) -> Self {
        Self {
            name: name.into(),
            instances: 0,
            max_rel_err: None,
            tolerance: None,
            passed: false,
            detail,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn first_failure(&self) -> Option<&CheckResult> {
        self.checks.iter().find(|c| !c.passed)
    }
}

type Build = dyn Fn(&mut Graph, &[NodeId]) -> TResult<NodeId>;

/// A differentiable test function of a few tensors.
pub struct Case {
    pub inputs: Vec<Tensor>,
    /// Inputs that gradients are taken with respect to.
    pub diff: Vec<bool>,
    pub build: Box<Build>,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("finite")
}

/// Values bounded away from zero by `gap`, random sign.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = rng.gen_range(gap..1.5);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("finite")
}

fn random_tensor(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor {
    let s = small_shape(rng);
    uniform(rng, &s, lo, hi)
}

fn small_shape(rng: &mut ChaCha8Rng) -> Vec<usize> {
    let rank = rng.gen_range(1..=3);
    (0..rank).map(|_| rng.gen_range(1..=4)).collect()
}

/// Central-difference comparison of `d sum(R ⊙ build(inputs)) / d inputs`
/// and, through the retained gradient, of one directional second
/// derivative. Returns the worst first- and second-order errors.
pub fn check_case(case: &Case, rng: &mut ChaCha8Rng, second_order: bool) -> TResult<(f64, f64)> {
    let mut g = Graph::new();
    let ph: Vec<NodeId> = case.inputs.iter().map(|t| g.placeholder(t.shape())).collect();
    for (&p, t) in ph.iter().zip(&case.inputs) {
        g.bind(p, t.clone())?;
    }
    let y = (case.build)(&mut g, &ph)?;
    let yshape = g.shape(y).to_vec();
    let r = g.leaf(uniform(rng, &yshape, -1.0, 1.0));
    let prod = g.mul(y, r)?;
    let f = g.sum(prod)?;
    let wrt: Vec<usize> = (0..ph.len()).filter(|&k| case.diff[k]).collect();
    let wrt_nodes: Vec<NodeId> = wrt.iter().map(|&k| ph[k]).collect();

    // second-order scalar s = Σ <u_k, ∇_k f>, built before perturbing
    let retained = g.gradient_retained(f, &wrt_nodes)?;
    let mut s = None;
    for (&gr, &k) in retained.iter().zip(&wrt) {
        let u = g.leaf(uniform(rng, case.inputs[k].shape(), -1.0, 1.0));
        let p = g.mul(gr, u)?;
        let p = g.sum(p)?;
        s = Some(match s {
            None => p,
            Some(acc) => g.add(acc, p)?,
        });
    }
    let s = s.expect("at least one differentiable input");
    let grads = g.evaluate(&retained)?;
    let hess = if second_order {
        Some(g.gradient(s, &wrt_nodes)?)
    } else {
        None
    };

    let mut worst1: f64 = 0.0;
    let mut worst2: f64 = 0.0;
    for (slot, &k) in wrt.iter().enumerate() {
        let base = case.inputs[k].clone();
        for j in 0..base.len() {
            let eval = |delta: f64, g: &mut Graph| -> TResult<(f64, f64)> {
                let mut d = base.data().to_vec();
                d[j] += delta;
                g.bind(ph[k], Tensor::new(base.shape().to_vec(), d)?)?;
                let fv = g.value(f)?.item();
                let sv = if second_order { g.value(s)?.item() } else { 0.0 };
                Ok((fv, sv))
            };
            let (fp, sp) = eval(FD_STEP, &mut g)?;
            let (fm, sm) = eval(-FD_STEP, &mut g)?;
            let n1 = (fp - fm) / (2.0 * FD_STEP);
            worst1 = worst1.max(rel_err(grads[slot].data()[j], n1, REL_FLOOR));
            if let Some(h) = &hess {
                let n2 = (sp - sm) / (2.0 * FD_STEP);
                worst2 = worst2.max(rel_err(h[slot].data()[j], n2, REL_FLOOR));
            }
        }
        g.bind(ph[k], base)?;
    }
    Ok((worst1, worst2))
}

fn unary(input: Tensor, op: fn(&mut Graph, NodeId) -> TResult<NodeId>) -> Case {
    Case {
        inputs: vec![input],
        diff: vec![true],
        build: Box::new(move |g, x| op(g, x[0])),
    }
}

fn binary(a: Tensor, b: Tensor, op: fn(&mut Graph, NodeId, NodeId) -> TResult<NodeId>) -> Case {
    Case {
        inputs: vec![a, b],
        diff: vec![true, true],
        build: Box::new(move |g, x| op(g, x[0], x[1])),
    }
}

/// Draws one random instance of a case.
pub type CaseGen = fn(&mut ChaCha8Rng) -> Case;

/// Random-instance generators, one per primitive.
pub fn primitive_cases() -> Vec<(&'static str, CaseGen)> {
    vec![
        ("add", |r| {
            let s = small_shape(r);
            binary(uniform(r, &s, -2.0, 2.0), uniform(r, &s, -2.0, 2.0), Graph::add)
        }),
        ("sub", |r| {
            let s = small_shape(r);
            binary(uniform(r, &s, -2.0, 2.0), uniform(r, &s, -2.0, 2.0), Graph::sub)
        }),
        ("mul", |r| {
            let s = small_shape(r);
            binary(uniform(r, &s, -2.0, 2.0), uniform(r, &s, -2.0, 2.0), Graph::mul)
        }),
        ("div", |r| {
            let s = small_shape(r);
            binary(uniform(r, &s, -2.0, 2.0), away_from_zero(r, &s, 0.5), Graph::div)
        }),
        ("neg", |r| unary(random_tensor(r, -2.0, 2.0), Graph::neg)),
        ("exp", |r| unary(random_tensor(r, -2.0, 2.0), Graph::exp)),
        ("log", |r| unary(random_tensor(r, 0.2, 3.0), Graph::log)),
        ("pow", |r| {
            let p = r.gen_range(-2.0..3.0);
            let x = random_tensor(r, 0.3, 2.0);
            Case {
                inputs: vec![x],
                diff: vec![true],
                build: Box::new(move |g, x| g.pow(x[0], p)),
            }
        }),
        ("scale", |r| {
            let c = r.gen_range(-3.0..3.0);
            Case {
                inputs: vec![random_tensor(r, -2.0, 2.0)],
                diff: vec![true],
                build: Box::new(move |g, x| g.scale(x[0], c)),
            }
        }),
        ("shift", |r| {
            let c = r.gen_range(-3.0..3.0);
            Case {
                inputs: vec![random_tensor(r, -2.0, 2.0)],
                diff: vec![true],
                build: Box::new(move |g, x| g.shift(x[0], c)),
            }
        }),
        ("relu", |r| {
            unary(
                {
                    let s = small_shape(r);
                    away_from_zero(r, &s, 0.01)
                },
                Graph::relu,
            )
        }),
        ("softplus", |r| unary(random_tensor(r, -4.0, 4.0), Graph::softplus)),
        ("sigmoid", |r| unary(random_tensor(r, -4.0, 4.0), Graph::sigmoid)),
        ("matmul", |r| {
            let (m, k, n) = (r.gen_range(1..=4), r.gen_range(1..=4), r.gen_range(1..=4));
            binary(
                uniform(r, &[m, k], -1.0, 1.0),
                uniform(r, &[k, n], -1.0, 1.0),
                Graph::matmul,
            )
        }),
        ("transpose", |r| {
            let s = [r.gen_range(1..=4), r.gen_range(1..=4)];
            unary(uniform(r, &s, -1.0, 1.0), Graph::transpose)
        }),
        ("reshape", |r| {
            let (a, b) = (r.gen_range(1..=4), r.gen_range(1..=4));
            Case {
                inputs: vec![uniform(r, &[a, b], -1.0, 1.0)],
                diff: vec![true],
                build: Box::new(move |g, x| g.reshape(x[0], &[b, a])),
            }
        }),
        ("broadcast", |r| {
            let full = small_shape(r);
            let small: Vec<usize> = full.iter().map(|&d| if r.gen_bool(0.5) { 1 } else { d }).collect();
            Case {
                inputs: vec![uniform(r, &small, -1.0, 1.0)],
                diff: vec![true],
                build: Box::new(move |g, x| g.broadcast_to(x[0], &full)),
            }
        }),
        ("sum_to", |r| {
            let full = small_shape(r);
            let small: Vec<usize> = full.iter().map(|&d| if r.gen_bool(0.5) { 1 } else { d }).collect();
            Case {
                inputs: vec![uniform(r, &full, -1.0, 1.0)],
                diff: vec![true],
                build: Box::new(move |g, x| g.sum_to(x[0], &small)),
            }
        }),
        ("sum", |r| unary(random_tensor(r, -1.0, 1.0), Graph::sum)),
        ("mean", |r| unary(random_tensor(r, -1.0, 1.0), Graph::mean)),
        ("dot", |r| {
            let s = small_shape(r);
            binary(uniform(r, &s, -1.0, 1.0), uniform(r, &s, -1.0, 1.0), Graph::dot_last)
        }),
        ("conv2d", |r| conv_case(r)),
        ("conv2d_input_grad", |r| {
            let (xs, ws, spec) = conv_geometry(r);
            let gy_shape = conv_out(&xs, &ws, spec);
            Case {
                inputs: vec![uniform(r, &gy_shape, -1.0, 1.0), uniform(r, &ws, -1.0, 1.0)],
                diff: vec![true, true],
                build: Box::new(move |g, x| g.conv2d_input_grad(x[0], x[1], spec, &xs)),
            }
        }),
        ("conv2d_weight_grad", |r| {
            let (xs, ws, spec) = conv_geometry(r);
            let gy_shape = conv_out(&xs, &ws, spec);
            Case {
                inputs: vec![uniform(r, &xs, -1.0, 1.0), uniform(r, &gy_shape, -1.0, 1.0)],
                diff: vec![true, true],
                build: Box::new(move |g, x| g.conv2d_weight_grad(x[0], x[1], spec, &ws)),
            }
        }),
        ("max_pool", |r| {
            let s = [
                r.gen_range(1..=2),
                2 * r.gen_range(1..=2),
                2 * r.gen_range(1..=2),
                r.gen_range(1..=3),
            ];
            unary(separated(r, &s), Graph::max_pool2)
        }),
        ("max_pool_scatter", |r| {
            let s = [
                r.gen_range(1..=2),
                2 * r.gen_range(1..=2),
                2 * r.gen_range(1..=2),
                r.gen_range(1..=3),
            ];
            let pooled = [s[0], s[1] / 2, s[2] / 2, s[3]];
            Case {
                inputs: vec![uniform(r, &pooled, -1.0, 1.0), separated(r, &s)],
                diff: vec![true, false],
                build: Box::new(|g, x| g.pool_scatter(x[0], x[1])),
            }
        }),
        ("concat", |r| {
            let base = small_shape(r);
            let axis = r.gen_range(0..base.len());
            let mut other = base.clone();
            other[axis] = r.gen_range(1..=3);
            binary_owned(
                uniform(r, &base, -1.0, 1.0),
                uniform(r, &other, -1.0, 1.0),
                move |g, a, b| g.concat(&[a, b], axis),
            )
        }),
        ("slice", |r| {
            let s = small_shape(r);
            let axis = r.gen_range(0..s.len());
            let len = r.gen_range(1..=s[axis]);
            let start = r.gen_range(0..=s[axis] - len);
            Case {
                inputs: vec![uniform(r, &s, -1.0, 1.0)],
                diff: vec![true],
                build: Box::new(move |g, x| g.slice(x[0], axis, start, len)),
            }
        }),
        ("pad", |r| {
            let s = small_shape(r);
            let axis = r.gen_range(0..s.len());
            let mut full = s.clone();
            full[axis] += r.gen_range(0..=3);
            let start = r.gen_range(0..=full[axis] - s[axis]);
            Case {
                inputs: vec![uniform(r, &s, -1.0, 1.0)],
                diff: vec![true],
                build: Box::new(move |g, x| g.pad_axis(x[0], &full, axis, start)),
            }
        }),
        ("l2_normalize", |r| {
            unary(random_tensor(r, -1.0, 1.0), Graph::l2_normalize)
        }),
        ("global_avg_pool", |r| {
            let s = [
                r.gen_range(1..=2),
                r.gen_range(1..=3),
                r.gen_range(1..=3),
                r.gen_range(1..=3),
            ];
            unary(uniform(r, &s, -1.0, 1.0), Graph::global_avg_pool)
        }),
    ]
}

fn binary_owned(a: Tensor, b: Tensor, op: impl Fn(&mut Graph, NodeId, NodeId) -> TResult<NodeId> + 'static) -> Case {
    Case {
        inputs: vec![a, b],
        diff: vec![true, true],
        build: Box::new(move |g, x| op(g, x[0], x[1])),
    }
}

/// Distinct values with gaps far above the difference step, so window
/// maxima never swap under perturbation.
fn separated(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|k| k as f64 * 0.05).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        vals.swap(i, j);
    }
    Tensor::new(shape.to_vec(), vals).expect("finite")
}

fn conv_geometry(r: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>, ConvSpec) {
    let stride = r.gen_range(1..=2);
    let pad = r.gen_range(0..=1);
    let k = r.gen_range(1..=3);
    let h = r.gen_range(k.max(2)..=5);
    let w = r.gen_range(k.max(2)..=5);
    let (cin, cout) = (r.gen_range(1..=3), r.gen_range(1..=3));
    (
        vec![r.gen_range(1..=2), h, w, cin],
        vec![k, k, cin, cout],
        ConvSpec { stride, pad },
    )
}

fn conv_out(xs: &[usize], ws: &[usize], spec: ConvSpec) -> Vec<usize> {
    let oh = (xs[1] + 2 * spec.pad - ws[0]) / spec.stride + 1;
    let ow = (xs[2] + 2 * spec.pad - ws[1]) / spec.stride + 1;
    vec![xs[0], oh, ow, ws[3]]
}

fn conv_case(r: &mut ChaCha8Rng) -> Case {
    let (xs, ws, spec) = conv_geometry(r);
    Case {
        inputs: vec![uniform(r, &xs, -1.0, 1.0), uniform(r, &ws, -1.0, 1.0)],
        diff: vec![true, true],
        build: Box::new(move |g, x| g.conv2d(x[0], x[1], spec)),
    }
}

fn unit_rows(g: &mut Graph, x: NodeId) -> TResult<NodeId> {
    g.l2_normalize(x)
}

fn loss_err(e: crate::losses::LossError) -> crate::tensor::TensorError {
    match e {
        crate::losses::LossError::Tensor(t) => t,
        other => crate::tensor::TensorError::ShapeMismatch {
            op: "loss",
            detail: other.to_string(),
        },
    }
}

/// Random instances of every composed objective, with unit embeddings
/// obtained by normalizing free inputs.
pub fn loss_cases() -> Vec<(&'static str, CaseGen)> {
    vec![
        ("contrastive_loss", |r| {
            let n = r.gen_range(1..=3);
            let d = r.gen_range(2..=4);
            let mode = if r.gen_bool(0.5) {
                NegativesMode::CrossView
            } else {
                NegativesMode::Simclr
            };
            let tau = r.gen_range(0.3..1.0);
            Case {
                inputs: vec![uniform(r, &[2 * n, d], -1.0, 1.0)],
                diff: vec![true],
                build: Box::new(move |g, x| {
                    let h = unit_rows(g, x[0])?;
                    contrastive_loss(g, h, tau, mode).map_err(loss_err)
                }),
            }
        }),
        ("backdoor_probability", |r| {
            let n = r.gen_range(1..=3);
            let (strata, d) = (r.gen_range(1..=3), r.gen_range(2..=4));
            let tau = r.gen_range(0.3..1.0);
            Case {
                inputs: vec![
                    uniform(r, &[2 * n, d], -1.0, 1.0),
                    uniform(r, &[2 * n, strata, d], -1.0, 1.0),
                ],
                diff: vec![true, true],
                build: Box::new(move |g, x| {
                    let h = unit_rows(g, x[0])?;
                    let p = unit_rows(g, x[1])?;
                    backdoor_probabilities(g, h, p, tau).map_err(loss_err)
                }),
            }
        }),
        ("msr_loss", |r| {
            let n = r.gen_range(1..=3);
            let (strata, d) = (r.gen_range(1..=3), r.gen_range(2..=4));
            let tau = r.gen_range(0.3..1.0);
            Case {
                inputs: vec![
                    uniform(r, &[2 * n, d], -1.0, 1.0),
                    uniform(r, &[2 * n, strata, d], -1.0, 1.0),
                ],
                diff: vec![true, true],
                build: Box::new(move |g, x| {
                    let h = unit_rows(g, x[0])?;
                    let p = unit_rows(g, x[1])?;
                    msr_loss(g, h, p, tau).map_err(loss_err)
                }),
            }
        }),
        ("total_loss", |r| {
            let n = r.gen_range(1..=3);
            let (strata, d) = (r.gen_range(1..=3), r.gen_range(2..=4));
            let lambda = r.gen_range(0.0..2.0);
            Case {
                inputs: vec![
                    uniform(r, &[2 * n, d], -1.0, 1.0),
                    uniform(r, &[2 * n, strata, d], -1.0, 1.0),
                ],
                diff: vec![true, true],
                build: Box::new(move |g, x| {
                    let h = unit_rows(g, x[0])?;
                    let p = unit_rows(g, x[1])?;
                    let ct = contrastive_loss(g, h, 0.5, NegativesMode::CrossView).map_err(loss_err)?;
                    let msr = msr_loss(g, h, p, 0.5).map_err(loss_err)?;
                    total_loss(g, ct, msr, lambda).map_err(loss_err)
                }),
            }
        }),
        ("uniformity_loss", |r| {
            let (b, n, c) = (r.gen_range(1..=2), r.gen_range(2..=4), r.gen_range(2..=4));
            let t = r.gen_range(0.5..3.0);
            Case {
                inputs: vec![uniform(r, &[b, n, c], -1.0, 1.0)],
                diff: vec![true],
                build: Box::new(move |g, x| {
                    let a = g.softplus(x[0])?;
                    let a = unit_rows(g, a)?;
                    uniformity_loss(g, a, t).map_err(loss_err)
                }),
            }
        }),
    ]
}

/// Runs every primitive and loss generator `instances` times.
pub fn gradient_suite(seed: u64, instances: usize) -> Vec<CheckResult> {
    let mut out = Vec::new();
    let all = primitive_cases().into_iter().chain(loss_cases());
    for (k, (name, make)) in all.enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((k as u64 + 1) << 32));
        let mut w1: f64 = 0.0;
        let mut w2: f64 = 0.0;
        let mut error = None;
        for i in 0..instances {
            let case = make(&mut rng);
            // second-order check on a tenth of the instances keeps runtime low
            match check_case(&case, &mut rng, i % 10 == 0) {
                Ok((a, b)) => {
                    w1 = w1.max(a);
                    w2 = w2.max(b);
                }
                Err(e) => {
                    error = Some(e.to_string());
                    break;
                }
            }
        }
        match error {
            Some(e) => out.push(CheckResult::failed(name, e)),
            None => {
                let mut c = CheckResult::numeric(name, instances, w1, FD_TOL);
                c.passed &= w2 <= SECOND_ORDER_TOL;
                c.detail = format!("second-order max rel err {w2:.2e}");
                out.push(c);
            }
        }
    }
    out
}

/// The smallest configuration of the full model used by the meta check.
pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        image_size: 8,
        in_channels: 3,
        encoder_channels: vec![3, 4],
        downsample: Downsample::Stride,
        projection_hidden: 4,
        projection_dim: 4,
        msr_channels: vec![3],
        semantic_vectors: 2,
        weight_activation: WeightActivation::Softplus,
    }
}

pub fn tiny_batch(seed: u64, model: &ModelConfig, n: usize) -> Minibatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = model.image_size;
    let images: Vec<Tensor> = (0..n)
        .map(|_| uniform(&mut rng, &[s, s, model.in_channels], 0.0, 1.0))
        .collect();
    let idx: Vec<usize> = (0..n).collect();
    let aug = AugmentConfig {
        crop_scale: (0.5, 1.0),
        ..AugmentConfig::default()
    };
    make_minibatch(&images, &idx, &aug, &mut rng)
}

/// Worst relative error of the meta gradient against central differences
/// of the whole look-ahead computation, over every `f_msr` coordinate.
pub fn meta_gradient_error(
    bundle: &ModelBundle,
    batch: &Minibatch,
    config: &TrainingConfig,
) -> crate::train::Result<f64> {
    let (_, grads) = meta_gradient(bundle, batch, config)?;
    let mut worst: f64 = 0.0;
    for (k, grad) in grads.iter().enumerate() {
        for j in 0..grad.len() {
            let probe = |delta: f64| -> crate::train::Result<f64> {
                let mut b = bundle.clone();
                let mut d = b.msr.tensors[k].data().to_vec();
                d[j] += delta;
                b.msr.tensors[k] = Tensor::new(b.msr.tensors[k].shape().to_vec(), d)?;
                meta_objective_value(&b, batch, config)
            };
            let numeric = (probe(FD_STEP)? - probe(-FD_STEP)?) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(grad.data()[j], numeric, 1e-6));
        }
    }
    Ok(worst)
}

/// Meta-gradient checks on the tiny model (`c = 4, n = 2, N = 2, d_p = 4`):
/// the default objective, and the second-order path alone (`γ = 0`).
pub fn meta_suite(seed: u64) -> Vec<CheckResult> {
    let model = tiny_model();
    let bundle = init_params(seed, &model).expect("valid tiny model");
    let batch = tiny_batch(seed, &model, 2);
    let variants = [
        (
            "meta_gradient",
            TrainingConfig {
                alpha: 0.05,
                ..TrainingConfig::default()
            },
        ),
        (
            "meta_gradient_second_order_path",
            TrainingConfig {
                alpha: 0.05,
                gamma: 0.0,
                ..TrainingConfig::default()
            },
        ),
    ];
    variants
        .into_iter()
        .map(|(name, cfg)| match meta_gradient_error(&bundle, &batch, &cfg) {
            Ok(e) => CheckResult::numeric(name, 1, e, SECOND_ORDER_TOL),
            Err(e) => CheckResult::failed(name, e.to_string()),
        })
        .collect()
}

fn fixture(name: &str, got: Result<f64, String>, want: f64) -> CheckResult {
    match got {
        Ok(v) => {
            let mut c = CheckResult::numeric(name, 1, (v - want).abs(), 1e-10);
            c.detail = format!("got {v}, expected {want}");
            c
        }
        Err(e) => CheckResult::failed(name, e),
    }
}

fn uniformity_pair(a: [f64; 2], b: [f64; 2], t: f64) -> Result<f64, String> {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::new(vec![1, 2, 2], vec![a[0], a[1], b[0], b[1]]).map_err(|e| e.to_string())?);
    let l = uniformity_loss(&mut g, x, t).map_err(|e| e.to_string())?;
    g.value(l).map(|v| v.item()).map_err(|e| e.to_string())
}

/// Closed-form values of the objectives.
pub fn fixture_suite() -> Vec<CheckResult> {
    let e = vec![0.6, 0.8];
    let single = BatchEmbeddings {
        views: [vec![vec![1.0, 0.0]], vec![vec![0.0, 1.0]]],
        tau: 0.5,
    };
    let identical = BatchEmbeddings {
        views: [vec![e.clone(), e.clone()], vec![e.clone(), e.clone()]],
        tau: 0.5,
    };
    let no_negatives = BackdoorInputs {
        anchor: vec![1.0, 0.0, 0.0],
        positives: vec![vec![0.0, 1.0, 0.0], vec![0.6, 0.8, 0.0]],
        negatives: vec![],
    };
    vec![
        fixture(
            "contrastive_single_sample",
            single
                .contrastive_loss(NegativesMode::CrossView)
                .map_err(|e| e.to_string()),
            0.0,
        ),
        fixture(
            "contrastive_identical_pairs",
            identical
                .contrastive_loss(NegativesMode::CrossView)
                .map_err(|e| e.to_string()),
            4.0 * 2f64.ln(),
        ),
        fixture(
            "backdoor_no_negatives",
            backdoor_probability(&no_negatives, 0.5).map_err(|e| e.to_string()),
            1.0,
        ),
        fixture(
            "uniformity_coincident",
            uniformity_pair([0.6, 0.8], [0.6, 0.8], 2.0),
            0.0,
        ),
        fixture(
            "uniformity_orthogonal",
            uniformity_pair([1.0, 0.0], [0.0, 1.0], 2.0),
            -4.0,
        ),
    ]
}

fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Range and monotonicity of the interventional probability, and the sign
/// and zero set of `L_msr`, over `configs` random draws.
pub fn invariant_suite(seed: u64, configs: usize) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut range_fail = None;
    let mut mono_fail = None;
    let mut msr_fail = None;
    for i in 0..configs {
        let strata = rng.gen_range(1..=6);
        let tau = rng.gen_range(0.1..2.0);
        let sims: Vec<f64> = (0..strata).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mass = if rng.gen_bool(0.2) {
            0.0
        } else {
            rng.gen_range(0.0..20.0)
        };
        let p_of = |s: &[f64]| -> f64 {
            let mut g = Graph::new();
            let sn = g.leaf(Tensor::new(vec![1, s.len()], s.to_vec()).expect("finite"));
            let d = g.leaf(Tensor::new(vec![1, 1], vec![mass]).expect("finite"));
            let p = backdoor_from_parts(&mut g, sn, d, tau).expect("valid");
            g.value(p).expect("finite").item()
        };
        let p = p_of(&sims);
        if !(p > 0.0 && p <= 1.0) && range_fail.is_none() {
            range_fail = Some(format!("config {i}: P = {p}"));
        }
        if mass > 0.0 {
            let t = rng.gen_range(0..strata);
            let mut up = sims.clone();
            up[t] += rng.gen_range(0.01..0.5);
            let q = p_of(&up);
            if !(q > p) && mono_fail.is_none() {
                mono_fail = Some(format!("config {i}: raising s_{t} moved P from {p} to {q}"));
            }
        }

        // L_msr on a random batch: zero exactly when N = 1 (no negatives)
        let n = rng.gen_range(1..=3);
        let d = rng.gen_range(2..=4);
        let mut g = Graph::new();
        let h: Vec<f64> = (0..2 * n).flat_map(|_| random_unit(&mut rng, d)).collect();
        let pos: Vec<f64> = (0..2 * n * strata).flat_map(|_| random_unit(&mut rng, d)).collect();
        let hn = g.leaf(Tensor::new(vec![2 * n, d], h).expect("finite"));
        let pn = g.leaf(Tensor::new(vec![2 * n, strata, d], pos).expect("finite"));
        let probs = backdoor_probabilities(&mut g, hn, pn, tau).expect("valid");
        let l = msr_loss(&mut g, hn, pn, tau).expect("valid");
        let lv = g.value(l).expect("finite").item();
        let all_one = g.value(probs).expect("finite").data().iter().all(|&p| p == 1.0);
        let ok = lv >= 0.0 && ((lv == 0.0) == all_one) && (all_one == (n == 1));
        if !ok && msr_fail.is_none() {
            msr_fail = Some(format!("config {i}: N = {n}, L_msr = {lv}, all P = 1: {all_one}"));
        }
    }
    let result = |name: &str, fail: Option<String>| CheckResult {
        name: name.into(),
        instances: configs,
        max_rel_err: None,
        tolerance: None,
        passed: fail.is_none(),
        detail: fail.unwrap_or_default(),
    };
    vec![
        result("backdoor_probability_range", range_fail),
        result("backdoor_probability_monotone", mono_fail),
        result("msr_loss_nonnegative", msr_fail),
    ]
}

/// Everything `verify` runs.
pub fn run_all(seed: u64) -> VerifyReport {
    let mut checks = gradient_suite(seed, 100);
    checks.extend(meta_suite(seed));
    checks.extend(fixture_suite());
    checks.extend(invariant_suite(seed, 1000));
    VerifyReport { checks }
}

/// Start and end state of minimizing `L_uni` alone.
#[derive(Clone, Debug, Serialize)]
pub struct UniformityRun {
    pub initial_mean_dot: f64,
    pub final_mean_dot: f64,
    pub initial_loss: f64,
    pub final_loss: f64,
}

fn mean_pairwise_dot(rows: &[f64], n: usize, d: usize) -> f64 {
    let mut s = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            s += (0..d).map(|k| rows[i * d + k] * rows[j * d + k]).sum::<f64>();
        }
    }
    s / (n * (n - 1) / 2) as f64
}

/// Gradient descent with Adam on `L_uni(normalize(x))` for `n` vectors in
/// `R^d`, from random unit vectors.
pub fn uniformity_descent(seed: u64, n: usize, d: usize, t: f64, steps: usize, lr: f64) -> TResult<UniformityRun> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init: Vec<f64> = (0..n).flat_map(|_| random_unit(&mut rng, d)).collect();
    let mut params = vec![Tensor::new(vec![1, n, d], init)?];
    let mut opt = crate::train::Optimizer::new(crate::train::OptimizerKind::Adam, 0.0, &params);
    let eval = |x: &Tensor| -> TResult<(f64, Vec<f64>, Tensor)> {
        let mut g = Graph::new();
        let xn = g.leaf(x.clone());
        let a = g.l2_normalize(xn)?;
        let l = uniformity_loss(&mut g, a, t).map_err(loss_err)?;
        let vals = g.evaluate(&[l, a])?;
        let grad = g.gradient(l, &[xn])?.remove(0);
        Ok((vals[0].item(), vals[1].data().to_vec(), grad))
    };
    let (initial_loss, a0, _) = eval(&params[0])?;
    for _ in 0..steps {
        let (_, _, grad) = eval(&params[0])?;
        opt.update(&mut params, &[grad], lr);
    }
    let (final_loss, a1, _) = eval(&params[0])?;
    Ok(UniformityRun {
        initial_mean_dot: mean_pairwise_dot(&a0, n, d),
        final_mean_dot: mean_pairwise_dot(&a1, n, d),
        initial_loss,
        final_loss,
    })
}

/// Exhaustive k-NN: full sort of every training point per query.
pub fn knn_brute_force(
    train: &crate::eval::Features,
    labels: &[usize],
    test: &crate::eval::Features,
    k: usize,
) -> Vec<usize> {
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    (0..test.rows)
        .map(|q| {
            let mut d: Vec<(f64, usize)> = (0..train.rows)
                .map(|i| {
                    let dot: f64 = test.row(q).iter().zip(train.row(i)).map(|(a, b)| a * b).sum();
                    (1.0 - dot, i)
                })
                .collect();
            d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut count = vec![0usize; classes];
            let mut dist = vec![0.0f64; classes];
            for &(dv, i) in &d[..k] {
                count[labels[i]] += 1;
                dist[labels[i]] += dv;
            }
            (0..classes)
                .max_by(|&a, &b| {
                    count[a]
                        .cmp(&count[b])
                        .then(dist[b].total_cmp(&dist[a]))
                        .then(b.cmp(&a))
                })
                .expect("at least one class")
        })
        .collect()
}

/// Random instances of at most `max_points` points on which `knn_classify`
/// must agree with the exhaustive oracle; returns the mismatching instance
/// indices.
pub fn knn_oracle_suite(seed: u64, instances: usize, max_points: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = Vec::new();
    for inst in 0..instances {
        let n = rng.gen_range(1..=max_points * 3 / 4);
        let q = rng.gen_range(1..=max_points - n);
        let d = rng.gen_range(1..=8);
        let classes = rng.gen_range(1..=6);
        let k = rng.gen_range(1..=n.min(15));
        let rows = |rng: &mut ChaCha8Rng, m: usize| -> Vec<Vec<f64>> {
            let mut out: Vec<Vec<f64>> = (0..m).map(|_| random_unit(rng, d)).collect();
            // exact duplicates exercise the tie rules
            if m > 3 {
                out[m - 1] = out[0].clone();
            }
            out
        };
        let train = crate::eval::Features::from_rows(&rows(&mut rng, n));
        let test = crate::eval::Features::from_rows(&rows(&mut rng, q));
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..classes)).collect();
        let truth: Vec<usize> = (0..q).map(|_| rng.gen_range(0..classes)).collect();
        let want = knn_brute_force(&train, &labels, &test, k);
        let got = crate::eval::knn_predict(&train, &labels, &test, k);
        let acc = crate::eval::knn_classify(&train, &labels, &test, &truth, k);
        let want_acc = crate::eval::accuracy(&want, &truth);
        if got.ok().as_ref() != Some(&want) || acc.map_or(true, |a| a != want_acc) {
            bad.push(inst);
        }
    }
    bad
}
