//! Uncertainty-aggregated decoder.
//!
//! Each fused branch predicts a per-pixel Gaussian `N(mu, sigma^2)`. `T`
//! reparameterized samples `mu + sigma * eps` give a variance map which,
//! min-max normalized, becomes that branch's uncertainty `U`. The branches
//! are then blended as `(1 - U_G) F_G + (1 - U_L) F_L`.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv, Graph, Init};
use crate::tensor::{Real, Tensor};

/// Lower bound added to the softplus output so `sigma > 0`.
pub const SIGMA_FLOOR: f64 = 1e-4;

/// Per-pixel mean and standard deviation maps, each `[1,h,w]`.
#[derive(Clone, Copy, Debug)]
pub struct GaussianField {
    pub mu: Var,
    pub sigma: Var,
}

/// `Phi_mu` and `Phi_sigma`: independent 1x1 heads `D_f -> 1`.
#[derive(Clone, Debug)]
pub struct GaussianHead {
    pub mu: Conv,
    pub sigma: Conv,
}

impl GaussianHead {
    pub fn new<T: Real>(init: &mut Init<T>, name: &str, channels: usize) -> Self {
        init.scope(name, |s| GaussianHead {
            mu: s.conv("mu", 1, channels, 1, true),
            sigma: s.conv("sigma", 1, channels, 1, true),
        })
    }
}

/// `mu = Phi_mu(F)`, `sigma = softplus(Phi_sigma(F)) + floor`.
pub fn predict_distribution<T: Real>(g: &mut Graph<T>, f: Var, head: &GaussianHead) -> Result<GaussianField> {
    let mu = head.mu.forward(g, f, 1, 0)?;
    let raw = head.sigma.forward(g, f, 1, 0)?;
    let sp = g.softplus(raw);
    let sigma = g.add_scalar(sp, T::lit(SIGMA_FLOOR));
    Ok(GaussianField { mu, sigma })
}

/// Standard-normal noise shaped like `shape`.
pub fn standard_normal<T: Real>(shape: &[usize], rng: &mut impl Rng) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| T::lit(rng.sample::<f64, _>(StandardNormal)))
        .collect();
    Tensor::new(shape, data).expect("noise shape")
}

/// `mu + sigma ⊙ eps` for a fixed noise tensor; differentiable in both.
pub fn reparameterize<T: Real>(tape: &mut Tape<T>, field: &GaussianField, eps: Tensor<T>) -> Result<Var> {
    let e = tape.constant(eps);
    let scaled = tape.mul(field.sigma, e)?;
    tape.add(field.mu, scaled)
}

/// `T` independent reparameterized draws.
pub fn reparameterized_samples<T: Real>(
    tape: &mut Tape<T>,
    field: &GaussianField,
    count: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Var>> {
    if count < 2 {
        return Err(Error::Config(format!(
            "need at least 2 samples to estimate variance, got {count}"
        )));
    }
    let shape = tape.shape(field.mu).to_vec();
    (0..count)
        .map(|_| {
            let eps = standard_normal(&shape, rng);
            reparameterize(tape, field, eps)
        })
        .collect()
}

/// Min-max normalized per-pixel variance across samples. A flat variance
/// map yields all zeros.
pub fn uncertainty_map<T: Real>(tape: &mut Tape<T>, samples: &[Var]) -> Result<Var> {
    let var = tape.sample_variance(samples)?;
    Ok(tape.minmax_normalize(var))
}

/// `F_out = (1 - U_G) F_G + (1 - U_L) F_L` with `U` broadcast over channels.
pub fn aggregate<T: Real>(tape: &mut Tape<T>, f_local: Var, f_global: Var, u_local: Var, u_global: Var) -> Result<Var> {
    if tape.shape(f_local) != tape.shape(f_global) {
        return Err(Error::dim(
            "aggregate",
            "branch shape",
            format!("{:?}", tape.shape(f_local)),
            format!("{:?}", tape.shape(f_global)),
        ));
    }
    let wl = tape.one_minus(u_local);
    let wg = tape.one_minus(u_global);
    let gl = tape.mul_broadcast(f_local, wl)?;
    let gg = tape.mul_broadcast(f_global, wg)?;
    tape.add(gg, gl)
}

/// 1x1 conv `D_f -> 1` followed by a 4x bilinear upsample to input size.
pub fn segmentation_head<T: Real>(g: &mut Graph<T>, f_out: Var, head: &Conv, input_size: (usize, usize)) -> Result<Var> {
    let (_, h, w) = g.value(f_out).chw("segmentation_head")?;
    if h * 4 != input_size.0 || w * 4 != input_size.1 {
        return Err(Error::dim(
            "segmentation_head",
            "feature extent (stride 4)",
            format!("{}x{}", input_size.0 / 4, input_size.1 / 4),
            format!("{h}x{w}"),
        ));
    }
    let s = head.forward(g, f_out, 1, 0)?;
    g.bilinear_upsample(s, 4)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_sigma_samples_equal_mean() {
        let mut tape = Tape::<f64>::new();
        let mu = tape.constant(Tensor::from_f64(&[1, 2, 2], &[0.5, -1.0, 2.0, 3.0]).unwrap());
        let sigma = tape.constant(Tensor::zeros(&[1, 2, 2]));
        let field = GaussianField { mu, sigma };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for s in reparameterized_samples(&mut tape, &field, 4, &mut rng).unwrap() {
            assert_eq!(tape.value(s), tape.value(mu));
        }
    }

    #[test]
    fn fewer_than_two_samples_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let mu = tape.constant(Tensor::zeros(&[1, 1, 1]));
        let field = GaussianField { mu, sigma: mu };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(reparameterized_samples(&mut tape, &field, 1, &mut rng).is_err());
    }

    #[test]
    fn single_high_variance_pixel_maps_to_one() {
        // Samples (a, a+/-d) with d chosen so one pixel has variance 4 and
        // the others 1.
        let mut tape = Tape::<f64>::new();
        let s1 = tape.constant(Tensor::from_f64(&[1, 1, 3], &[0.0, 0.0, 0.0]).unwrap());
        let s2 = tape.constant(
            Tensor::from_f64(&[1, 1, 3], &[2f64.sqrt(), 2f64.sqrt(), 8f64.sqrt()]).unwrap(),
        );
        let u = uncertainty_map(&mut tape, &[s1, s2]).unwrap();
        let v = tape.value(u).to_f64_vec();
        assert!(v[0].abs() < 1e-12 && v[1].abs() < 1e-12);
        assert!((v[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn aggregate_scalar_case() {
        let mut tape = Tape::<f64>::new();
        let c = |t: &mut Tape<f64>, v: f64| t.constant(Tensor::from_f64(&[1, 1, 1], &[v]).unwrap());
        let (fl, fg, ul, ug) = (c(&mut tape, 2.0), c(&mut tape, 4.0), c(&mut tape, 0.5), c(&mut tape, 0.25));
        let out = aggregate(&mut tape, fl, fg, ul, ug).unwrap();
        assert_eq!(tape.value(out).item(), 4.0);
    }
}
