//! Finite-difference verification of reverse-mode gradients.
//!
//! [`run_suite`] checks every tape operation and every training loss on
//! random small instances in 64-bit precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::objectives;
use crate::tensor::Tensor;
use crate::uad::{self, GaussianField};

/// Central-difference gradient of a scalar function:
/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every element `i`.
pub fn finite_difference_gradient(
    mut f: impl FnMut(&Tensor<f64>) -> f64,
    x: &Tensor<f64>,
    h: f64,
) -> Tensor<f64> {
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// Floor under the magnitude used to normalize gradient differences, so
/// entries whose true gradient is (numerically) zero are compared absolutely.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-4;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR);
    (analytic - numeric).abs() / scale
}

/// Elementwise maximum of [`relative_error`] over two gradients.
pub fn max_relative_error(analytic: &Tensor<f64>, numeric: &Tensor<f64>) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shapes");
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

/// Acceptance threshold for [`max_relative_error`].
pub const TOLERANCE: f64 = 1e-4;

/// Finite-difference step.
pub const STEP: f64 = 1e-5;

/// Builds a scalar from differentiable inputs and constant side data.
pub type Build = fn(&mut Tape<f64>, &[Var], &[Tensor<f64>]) -> Result<Var>;

/// Random differentiable inputs and constant side data for one instance.
pub type Generate = fn(&mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Vec<Tensor<f64>>);

pub struct GradCase {
    pub name: &'static str,
    pub generate: Generate,
    pub build: Build,
}

/// Worst relative error between backward and central differences over all
/// differentiable inputs of one instance.
pub fn check(inputs: &[Tensor<f64>], consts: &[Tensor<f64>], build: Build) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars, consts)?;
    tape.backward(out)?;
    let mut worst: f64 = 0.0;
    for (i, x) in inputs.iter().enumerate() {
        let analytic = tape.grad(vars[i]).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
        let mut failure = None;
        let numeric = finite_difference_gradient(
            |probe| {
                let mut t = Tape::new();
                let vs: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, v)| t.constant(if j == i { probe.clone() } else { v.clone() }))
                    .collect();
                match build(&mut t, &vs, consts) {
                    Ok(o) => t.value(o).item(),
                    Err(e) => {
                        failure = Some(e);
                        f64::NAN
                    }
                }
            },
            x,
            STEP,
        );
        if let Some(e) = failure {
            return Err(e);
        }
        worst = worst.max(max_relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.sample(StandardNormal)).collect()).expect("shape")
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape")
}

fn binary(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| if rng.random_bool(0.4) { 1.0 } else { 0.0 }).collect()).expect("shape")
}

/// Values bounded away from zero, for kinks at the origin.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    normal(rng, shape).map(|v| if v >= 0.0 { v + 0.1 } else { v - 0.1 })
}

/// `sum(x * W)` with fixed, position-dependent weights, so every output
/// element reaches the scalar with a distinct coefficient.
pub fn readout(tape: &mut Tape<f64>, x: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let w = (0..n).map(|i| (0.7 * i as f64 + 0.3).cos() + 0.1).collect();
    let w = tape.constant(Tensor::new(&shape, w)?);
    let p = tape.mul(x, w)?;
    Ok(tape.sum(p))
}

fn rand_normal(rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let s = small(rng);
    normal(rng, &s)
}

fn rand_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<f64> {
    let s = small(rng);
    uniform(rng, &s, lo, hi)
}

/// Probabilities whose Laplacian magnitude lies in `[0.01, 0.99]`
/// everywhere, so boundary terms stay clear of the `abs` and clamp kinks.
fn boundary_safe_probs(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor<f64> {
    let sigmoid = |v: f64| 1.0 / (1.0 + (-v).exp());
    let mut p = normal(rng, &[1, h, w]).map(sigmoid);
    for _ in 0..1000 {
        let mut tape = Tape::new();
        let pv = tape.constant(p.clone());
        let k = tape.constant(Tensor::from_f64(&[1, 1, 3, 3], &objectives::LAPLACIAN).expect("kernel"));
        let lap = tape.conv2d(pv, k, None, 1, 1).expect("conv");
        let bad: Vec<usize> = tape
            .value(lap)
            .data()
            .iter()
            .enumerate()
            .filter(|(_, v)| !(0.01..=0.99).contains(&v.abs()))
            .map(|(i, _)| i)
            .collect();
        if bad.is_empty() {
            break;
        }
        for i in bad {
            p.data_mut()[i] = sigmoid(rng.sample(StandardNormal));
        }
    }
    p
}

fn seg_logits(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor<f64> {
    boundary_safe_probs(rng, h, w).map(|p| (p / (1.0 - p)).ln())
}

fn small(rng: &mut ChaCha8Rng) -> [usize; 3] {
    [rng.random_range(1..=3), rng.random_range(2..=5), rng.random_range(2..=5)]
}

macro_rules! case {
    ($name:expr, |$rng:ident| $gen:expr, |$t:ident, $v:ident, $c:ident| $body:expr) => {
        GradCase {
            name: $name,
            generate: |$rng| $gen,
            build: |$t, $v, $c| {
                let _ = &$c;
                $body
            },
        }
    };
}

/// Every checked operation and loss.
pub fn registry() -> Vec<GradCase> {
    vec![
        case!("add", |r| { let s = small(r); (vec![normal(r, &s), normal(r, &s)], vec![]) },
            |t, v, c| { let o = t.add(v[0], v[1])?; readout(t, o) }),
        case!("sub", |r| { let s = small(r); (vec![normal(r, &s), normal(r, &s)], vec![]) },
            |t, v, c| { let o = t.sub(v[0], v[1])?; readout(t, o) }),
        case!("mul", |r| { let s = small(r); (vec![normal(r, &s), normal(r, &s)], vec![]) },
            |t, v, c| { let o = t.mul(v[0], v[1])?; readout(t, o) }),
        case!("scale", |r| (vec![rand_normal(r)], vec![]),
            |t, v, c| { let o = t.scale(v[0], -1.7); readout(t, o) }),
        case!("add_scalar", |r| (vec![rand_normal(r)], vec![]),
            |t, v, c| { let o = t.add_scalar(v[0], 0.4); let o = t.square(o); readout(t, o) }),
        case!("one_minus", |r| (vec![rand_normal(r)], vec![]),
            |t, v, c| { let o = t.one_minus(v[0]); let o = t.square(o); readout(t, o) }),
        case!("mul_broadcast", |r| { let [c, h, w] = small(r); (vec![normal(r, &[c + 1, h, w]), normal(r, &[1, h, w])], vec![]) },
            |t, v, c| { let o = t.mul_broadcast(v[0], v[1])?; readout(t, o) }),
        case!("gelu", |r| (vec![rand_normal(r).map(|x| 2.0 * x)], vec![]),
            |t, v, c| { let o = t.gelu(v[0]); readout(t, o) }),
        case!("sigmoid", |r| (vec![rand_normal(r).map(|x| 3.0 * x)], vec![]),
            |t, v, c| { let o = t.sigmoid(v[0]); readout(t, o) }),
        case!("softplus", |r| (vec![rand_normal(r).map(|x| 3.0 * x)], vec![]),
            |t, v, c| { let o = t.softplus(v[0]); readout(t, o) }),
        case!("abs", |r| (vec![{ let s = small(r); away_from_zero(r, &s) }], vec![]),
            |t, v, c| { let o = t.abs(v[0]); readout(t, o) }),
        case!("square", |r| (vec![rand_normal(r)], vec![]),
            |t, v, c| { let o = t.square(v[0]); readout(t, o) }),
        case!("exp", |r| (vec![rand_normal(r)], vec![]),
            |t, v, c| { let o = t.exp(v[0]); readout(t, o) }),
        case!("clamp", |r| (vec![rand_uniform(r, -2.0, 2.0).map(|x| if (x.abs() - 1.0).abs() < 0.05 { x * 0.9 } else { x })], vec![]),
            |t, v, c| { let o = t.clamp(v[0], -1.0, 1.0); readout(t, o) }),
        case!("sum", |r| (vec![rand_normal(r)], vec![]),
            |t, v, c| { let o = t.square(v[0]); Ok(t.sum(o)) }),
        case!("mean", |r| (vec![rand_normal(r)], vec![]),
            |t, v, c| { let o = t.square(v[0]); Ok(t.mean(o)) }),
        case!("reshape", |r| { let [c, h, w] = small(r); (vec![normal(r, &[c, h, w])], vec![]) },
            |t, v, c| { let s = t.shape(v[0]).to_vec(); let o = t.reshape(v[0], &[s[0] * s[1], s[2]])?; readout(t, o) }),
        case!("transpose", |r| { let [_, h, w] = small(r); (vec![normal(r, &[h, w])], vec![]) },
            |t, v, c| { let o = t.transpose(v[0])?; readout(t, o) }),
        case!("concat", |r| { let [c, h, w] = small(r); (vec![normal(r, &[c, h, w]), normal(r, &[c + 1, h, w])], vec![]) },
            |t, v, c| { let o = t.concat(&[v[0], v[1]], 0)?; readout(t, o) }),
        case!("narrow", |r| { let [c, h, w] = small(r); (vec![normal(r, &[c, h + 2, w])], vec![]) },
            |t, v, c| { let o = t.narrow(v[0], 1, 1, 2)?; readout(t, o) }),
        case!("conv2d", |r| {
                let [c, h, w] = small(r);
                let co = r.random_range(1..=3);
                (vec![normal(r, &[c, h + 1, w + 1]), normal(r, &[co, c, 3, 3]), normal(r, &[co])], vec![])
            },
            |t, v, c| { let o = t.conv2d(v[0], v[1], Some(v[2]), 1, 1)?; readout(t, o) }),
        case!("conv2d_stride2", |r| {
                let [c, h, w] = small(r);
                let co = r.random_range(1..=3);
                (vec![normal(r, &[c, 2 * h, 2 * w]), normal(r, &[co, c, 3, 3])], vec![])
            },
            |t, v, c| { let o = t.conv2d(v[0], v[1], None, 2, 1)?; readout(t, o) }),
        case!("conv2d_2x2", |r| {
                let [c, h, w] = small(r);
                (vec![normal(r, &[c, 2 * h, 2 * w]), normal(r, &[2, c, 2, 2]), normal(r, &[2])], vec![])
            },
            |t, v, c| { let o = t.conv2d(v[0], v[1], Some(v[2]), 2, 0)?; readout(t, o) }),
        case!("pointwise_conv2d", |r| {
                let [c, h, w] = small(r);
                (vec![normal(r, &[c, h, w]), normal(r, &[3, c, 1, 1]), normal(r, &[3])], vec![])
            },
            |t, v, c| { let o = t.pointwise_conv2d(v[0], v[1], Some(v[2]))?; readout(t, o) }),
        case!("depthwise_conv2d", |r| {
                let [c, h, w] = small(r);
                let k = 2 * r.random_range(1..=2) + 1;
                (vec![normal(r, &[c, h + 2, w + 2]), normal(r, &[c, 1, k, k]), normal(r, &[c])], vec![])
            },
            |t, v, c| { let k = t.shape(v[1])[2]; let o = t.depthwise_conv2d(v[0], v[1], Some(v[2]), (k - 1) / 2)?; readout(t, o) }),
        case!("matmul", |r| { let [m, k, n] = small(r); (vec![normal(r, &[m, k]), normal(r, &[k, n])], vec![]) },
            |t, v, c| { let o = t.matmul(v[0], v[1])?; readout(t, o) }),
        case!("matmul_nt", |r| { let [m, k, n] = small(r); (vec![normal(r, &[m, k]), normal(r, &[n, k])], vec![]) },
            |t, v, c| { let o = t.matmul_nt(v[0], v[1])?; readout(t, o) }),
        case!("matmul_tn", |r| { let [m, k, n] = small(r); (vec![normal(r, &[k, m]), normal(r, &[k, n])], vec![]) },
            |t, v, c| { let o = t.matmul_t(v[0], v[1], true, false)?; readout(t, o) }),
        case!("matmul_tt", |r| { let [m, k, n] = small(r); (vec![normal(r, &[k, m]), normal(r, &[n, k])], vec![]) },
            |t, v, c| { let o = t.matmul_t(v[0], v[1], true, true)?; readout(t, o) }),
        case!("linear", |r| { let [m, k, n] = small(r); (vec![normal(r, &[m, k]), normal(r, &[k, n]), normal(r, &[n])], vec![]) },
            |t, v, c| { let o = t.linear(v[0], v[1], Some(v[2]))?; readout(t, o) }),
        case!("softmax_rows", |r| { let [_, h, w] = small(r); (vec![normal(r, &[h, w])], vec![]) },
            |t, v, c| { let o = t.softmax(v[0], 1)?; readout(t, o) }),
        case!("softmax_cols", |r| { let [_, h, w] = small(r); (vec![normal(r, &[h, w])], vec![]) },
            |t, v, c| { let o = t.softmax(v[0], 0)?; readout(t, o) }),
        case!("layer_norm", |r| {
                let [_, n, c] = small(r);
                let c = c + 1;
                (vec![normal(r, &[n, c]), normal(r, &[c]), normal(r, &[c])], vec![])
            },
            |t, v, c| { let o = t.layer_norm(v[0], v[1], v[2], 1e-5)?; readout(t, o) }),
        case!("bilinear_upsample", |r| { let s = small(r); (vec![normal(r, &s)], vec![]) },
            |t, v, c| { let o = t.bilinear_upsample(v[0], 2)?; readout(t, o) }),
        case!("bilinear_upsample_x4", |r| { let s = small(r); (vec![normal(r, &s)], vec![]) },
            |t, v, c| { let o = t.bilinear_upsample(v[0], 4)?; readout(t, o) }),
        case!("sample_variance", |r| {
                let [_, h, w] = small(r);
                let n = r.random_range(2..=5);
                ((0..n).map(|_| normal(r, &[1, h, w])).collect(), vec![])
            },
            |t, v, c| { let o = t.sample_variance(v)?; readout(t, o) }),
        case!("minmax_normalize", |r| { let [_, h, w] = small(r); (vec![normal(r, &[1, h, w])], vec![]) },
            |t, v, c| { let o = t.minmax_normalize(v[0]); readout(t, o) }),
        case!("bce_with_logits", |r| { let s = small(r); (vec![normal(r, &s).map(|x| 3.0 * x)], vec![binary(r, &s)]) },
            |t, v, c| t.bce_with_logits(v[0], &c[0], None)),
        case!("bce_with_logits_masked", |r| { let s = small(r); (vec![normal(r, &s).map(|x| 3.0 * x)], vec![binary(r, &s)]) },
            |t, v, c| { let m: Vec<bool> = (0..c[0].numel()).map(|i| i % 3 != 0).collect(); t.bce_with_logits(v[0], &c[0], Some(&m)) }),
        case!("bce_prob", |r| { let s = small(r); (vec![uniform(r, &s, 0.05, 0.95)], vec![binary(r, &s)]) },
            |t, v, c| t.bce_prob(v[0], &c[0], None, 1e-6)),
        case!("dice_with_logits", |r| { let s = small(r); (vec![normal(r, &s).map(|x| 2.0 * x)], vec![binary(r, &s)]) },
            |t, v, c| t.dice_with_logits(v[0], &c[0], 1.0)),
        case!("kl_standard_normal", |r| { let s = small(r); (vec![normal(r, &s), uniform(r, &s, 0.3, 2.0)], vec![]) },
            |t, v, c| t.kl_standard_normal(v[0], v[1])),
        case!("loss.bce", |r| { let [_, h, w] = small(r); (vec![normal(r, &[1, h, w]), normal(r, &[1, h, w])], vec![binary(r, &[1, h, w]), binary(r, &[1, h, w])]) },
            |t, v, c| objectives::bce_loss(t, v, &[&c[0], &c[1]])),
        case!("loss.dice", |r| { let [_, h, w] = small(r); (vec![normal(r, &[1, h, w]), normal(r, &[1, h, w])], vec![binary(r, &[1, h, w]), binary(r, &[1, h, w])]) },
            |t, v, c| objectives::dice_loss(t, v, &[&c[0], &c[1]])),
        case!("loss.boundary_extract", |r| { let [_, h, w] = small(r); (vec![boundary_safe_probs(r, h + 2, w + 2)], vec![]) },
            |t, v, c| { let o = objectives::boundary_extract(t, v[0])?; readout(t, o) }),
        case!("loss.seg", |r| {
                let [_, h, w] = small(r);
                (vec![seg_logits(r, h + 2, w + 2)], vec![binary(r, &[1, h + 2, w + 2])])
            },
            |t, v, c| Ok(objectives::seg_loss(t, v, &[&c[0]], 1.0)?.total)),
        case!("loss.kl", |r| { let [_, h, w] = small(r); (vec![normal(r, &[1, h, w]), uniform(r, &[1, h, w], 0.3, 2.0)], vec![]) },
            |t, v, c| objectives::kl_standard_normal(t, &[GaussianField { mu: v[0], sigma: v[1] }])),
        case!("loss.uncertainty", |r| {
                let [_, h, w] = small(r);
                (vec![normal(r, &[1, h, w]), uniform(r, &[1, h, w], 0.3, 2.0)], vec![normal(r, &[1, h, w]), binary(r, &[1, h, w])])
            },
            |t, v, c| {
                let f = GaussianField { mu: v[0], sigma: v[1] };
                let x = uad::reparameterize(t, &f, c[0].clone())?;
                Ok(objectives::uncertainty_loss_with_samples(t, &[f], &[x], &[&c[1]], 0.2)?.total)
            }),
        case!("loss.total", |r| {
                let [_, h, w] = small(r);
                let (h, w) = (4 * h, 4 * w);
                (
                    vec![
                        seg_logits(r, h, w),
                        normal(r, &[1, h / 4, w / 4]),
                        uniform(r, &[1, h / 4, w / 4], 0.3, 2.0),
                        normal(r, &[1, h / 4, w / 4]),
                        uniform(r, &[1, h / 4, w / 4], 0.3, 2.0),
                    ],
                    vec![binary(r, &[1, h, w])],
                )
            },
            |t, v, c| {
                let local = [GaussianField { mu: v[1], sigma: v[2] }];
                let global = [GaussianField { mu: v[3], sigma: v[4] }];
                let mut rng = ChaCha8Rng::seed_from_u64(17);
                let w = objectives::LossWeights::default();
                Ok(objectives::total_loss(t, &v[..1], &[&c[0]], Some(&local), Some(&global), &w, &mut rng)?.total)
            }),
        case!("uad.aggregate", |r| {
                let [c, h, w] = small(r);
                (vec![normal(r, &[c, h, w]), normal(r, &[c, h, w]), uniform(r, &[1, h, w], 0.0, 1.0), uniform(r, &[1, h, w], 0.0, 1.0)], vec![])
            },
            |t, v, c| { let o = uad::aggregate(t, v[0], v[1], v[2], v[3])?; readout(t, o) }),
    ]
}

/// Runs every case on `instances` random instances and returns the worst
/// relative error per case.
pub fn run_suite(instances: usize, seed: u64) -> Result<Vec<(&'static str, f64)>> {
    if instances == 0 {
        return Err(Error::Config("gradient suite needs at least one instance".into()));
    }
    registry()
        .into_iter()
        .enumerate()
        .map(|(k, case)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (k as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
            let mut worst: f64 = 0.0;
            for _ in 0..instances {
                let (inputs, consts) = (case.generate)(&mut rng);
                let e = check(&inputs, &consts, case.build)
                    .map_err(|e| Error::Autodiff(format!("{}: {e}", case.name)))?;
                worst = worst.max(e);
            }
            Ok((case.name, worst))
        })
        .collect()
}
