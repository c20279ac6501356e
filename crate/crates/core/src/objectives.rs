//! Training objectives.
//!
//! The segmentation loss is dice + BCE + a boundary BCE weighted by
//! `gamma`, where boundaries come from a 3x3 Laplacian. Each uncertainty
//! branch adds the BCE of one reparameterized sample plus an `eta`-weighted
//! KL divergence to the standard normal. All batch-level losses operate on
//! the concatenation of per-item maps, so sums (dice) span the whole batch.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};
use crate::uad::{reparameterize, standard_normal, GaussianField};

pub const DICE_SMOOTH: f64 = 1.0;

/// Probability clamp used by the boundary BCE.
pub const BOUNDARY_EPS: f64 = 1e-3;

pub const LAPLACIAN: [f64; 9] = [-1.0, -1.0, -1.0, -1.0, 8.0, -1.0, -1.0, -1.0, -1.0];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// Boundary term weight.
    pub gamma: f64,
    /// KL weight inside each uncertainty loss.
    pub eta: f64,
    /// Global-branch uncertainty weight.
    pub lambda1: f64,
    /// Local-branch uncertainty weight.
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            gamma: 1.0,
            eta: 0.2,
            lambda1: 0.5,
            lambda2: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("gamma", self.gamma),
            ("eta", self.eta),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("loss weight {name} must be nonnegative, got {v}")));
            }
        }
        Ok(())
    }
}

fn stack<T: Real>(tape: &mut Tape<T>, items: &[Var]) -> Result<Var> {
    match items {
        [] => Err(Error::Config("empty batch".into())),
        [one] => Ok(*one),
        many => tape.concat(many, 0),
    }
}

fn stack_targets<T: Real>(targets: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = targets.first().ok_or_else(|| Error::Config("empty batch".into()))?;
    let rows: usize = targets.iter().map(|t| t.shape()[0]).sum();
    let mut shape = first.shape().to_vec();
    shape[0] = rows;
    let data = targets.iter().flat_map(|t| t.data().iter().copied()).collect();
    Tensor::new(&shape, data)
}

/// Mean binary cross-entropy of sigmoid(`logits`) against a binary target.
pub fn bce_loss<T: Real>(tape: &mut Tape<T>, logits: &[Var], targets: &[&Tensor<T>]) -> Result<Var> {
    let x = stack(tape, logits)?;
    let y = stack_targets(targets)?;
    tape.bce_with_logits(x, &y, None)
}

/// `1 - (2 Σ p y + s) / (Σ p + Σ y + s)` with `p = sigmoid(logits)`.
pub fn dice_loss<T: Real>(tape: &mut Tape<T>, logits: &[Var], targets: &[&Tensor<T>]) -> Result<Var> {
    let x = stack(tape, logits)?;
    let y = stack_targets(targets)?;
    tape.dice_with_logits(x, &y, T::lit(DICE_SMOOTH))
}

/// `clamp(|Laplacian(mask)|, 0, 1)` with zero padding; `mask` is `[1,H,W]`.
pub fn boundary_extract<T: Real>(tape: &mut Tape<T>, mask: Var) -> Result<Var> {
    let kernel = tape.constant(Tensor::from_f64(&[1, 1, 3, 3], &LAPLACIAN)?);
    let lap = tape.conv2d(mask, kernel, None, 1, 1)?;
    let mag = tape.abs(lap);
    Ok(tape.clamp(mag, T::zero(), T::one()))
}

/// [`boundary_extract`] on a plain tensor, outside any graph.
pub fn boundary_of<T: Real>(mask: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let m = tape.constant(mask.clone());
    let b = boundary_extract(&mut tape, m)?;
    Ok(tape.value(b).clone())
}

/// Interior positions of a `[1,H,W]` map: everything but the 1-pixel frame.
pub fn interior_mask(h: usize, w: usize) -> Vec<bool> {
    (0..h * w)
        .map(|i| {
            let (y, x) = (i / w, i % w);
            y > 0 && x > 0 && y + 1 < h && x + 1 < w
        })
        .collect()
}

/// Per-term values of a segmentation loss, for logging.
#[derive(Clone, Copy, Debug)]
pub struct SegTerms {
    pub total: Var,
    pub dice: Var,
    pub bce: Var,
    pub boundary: Var,
}

/// `dice + bce + gamma * bce(|S|, |Y|)` over a batch of `[1,H,W]` logits.
pub fn seg_loss<T: Real>(tape: &mut Tape<T>, logits: &[Var], targets: &[&Tensor<T>], gamma: f64) -> Result<SegTerms> {
    if logits.len() != targets.len() {
        return Err(Error::dim("seg_loss", "batch", logits.len(), targets.len()));
    }
    let dice = dice_loss(tape, logits, targets)?;
    let bce = bce_loss(tape, logits, targets)?;
    let mut edges = Vec::with_capacity(logits.len());
    let mut edge_targets = Vec::with_capacity(logits.len());
    let mut mask = Vec::new();
    for (&s, y) in logits.iter().zip(targets) {
        let (_, h, w) = y.chw("seg_loss")?;
        let p = tape.sigmoid(s);
        edges.push(boundary_extract(tape, p)?);
        edge_targets.push(boundary_of(y)?);
        mask.extend(interior_mask(h, w));
    }
    let e = stack(tape, &edges)?;
    let et = stack_targets(&edge_targets.iter().collect::<Vec<_>>())?;
    let boundary = tape.bce_prob(e, &et, Some(&mask), T::lit(BOUNDARY_EPS))?;
    let db = tape.add(dice, bce)?;
    let wb = tape.scale(boundary, T::lit(gamma));
    let total = tape.add(db, wb)?;
    Ok(SegTerms {
        total,
        dice,
        bce,
        boundary,
    })
}

/// Mean `0.5 (mu^2 + sigma^2 - 1 - ln sigma^2)` over a batch of fields.
pub fn kl_standard_normal<T: Real>(tape: &mut Tape<T>, fields: &[GaussianField]) -> Result<Var> {
    let mus: Vec<Var> = fields.iter().map(|f| f.mu).collect();
    let sigmas: Vec<Var> = fields.iter().map(|f| f.sigma).collect();
    let mu = stack(tape, &mus)?;
    let sigma = stack(tape, &sigmas)?;
    tape.kl_standard_normal(mu, sigma)
}

/// Nearest-neighbour downsample of a `[1,H,W]` mask by an integer factor,
/// sampling the centre pixel of each cell.
pub fn downsample_nearest<T: Real>(mask: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let (c, h, w) = mask.chw("downsample_nearest")?;
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::Config(format!(
            "cannot downsample {h}x{w} by {factor}"
        )));
    }
    let (oh, ow) = (h / factor, w / factor);
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                out.push(mask.get(&[ch, y * factor + factor / 2, x * factor + factor / 2]));
            }
        }
    }
    Tensor::new(&[c, oh, ow], out)
}

/// Resizes a full-resolution mask to the field's resolution.
pub fn target_for_field<T: Real>(tape: &Tape<T>, field: &GaussianField, mask: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, fh, _) = tape.value(field.mu).chw("uncertainty_loss")?;
    let (_, h, _) = mask.chw("uncertainty_loss")?;
    if fh == 0 || h % fh != 0 {
        return Err(Error::dim("uncertainty_loss", "field height", format!("divisor of {h}"), fh));
    }
    downsample_nearest(mask, h / fh)
}

#[derive(Clone, Copy, Debug)]
pub struct UncTerms {
    pub total: Var,
    pub bce: Var,
    pub kl: Var,
}

/// `bce(x*, Y) + eta * KL(N(mu, sigma^2) || N(0, I))` with `x*` one fresh
/// reparameterized draw per field, and `Y` downsampled to field resolution.
pub fn uncertainty_loss<T: Real>(
    tape: &mut Tape<T>,
    fields: &[GaussianField],
    targets: &[&Tensor<T>],
    eta: f64,
    rng: &mut impl Rng,
) -> Result<UncTerms> {
    let mut samples = Vec::with_capacity(fields.len());
    let mut small = Vec::with_capacity(fields.len());
    for (f, y) in fields.iter().zip(targets) {
        let eps = standard_normal(tape.shape(f.mu), rng);
        samples.push(reparameterize(tape, f, eps)?);
        small.push(target_for_field(tape, f, y)?);
    }
    uncertainty_loss_with_samples(tape, fields, &samples, &small.iter().collect::<Vec<_>>(), eta)
}

/// [`uncertainty_loss`] with caller-supplied samples and field-resolution
/// targets.
pub fn uncertainty_loss_with_samples<T: Real>(
    tape: &mut Tape<T>,
    fields: &[GaussianField],
    samples: &[Var],
    targets: &[&Tensor<T>],
    eta: f64,
) -> Result<UncTerms> {
    let bce = bce_loss(tape, samples, targets)?;
    let kl = kl_standard_normal(tape, fields)?;
    let wkl = tape.scale(kl, T::lit(eta));
    let total = tape.add(bce, wkl)?;
    Ok(UncTerms { total, bce, kl })
}

#[derive(Clone, Copy, Debug)]
pub struct TotalTerms {
    pub total: Var,
    pub seg: SegTerms,
    pub unc_global: Option<UncTerms>,
    pub unc_local: Option<UncTerms>,
}

/// `L_seg + lambda1 L_unc(global) + lambda2 L_unc(local)`. A branch passed
/// as `None` (uncertainty disabled) contributes nothing.
pub fn total_loss<T: Real>(
    tape: &mut Tape<T>,
    logits: &[Var],
    targets: &[&Tensor<T>],
    local: Option<&[GaussianField]>,
    global: Option<&[GaussianField]>,
    weights: &LossWeights,
    rng: &mut impl Rng,
) -> Result<TotalTerms> {
    weights.validate()?;
    let seg = seg_loss(tape, logits, targets, weights.gamma)?;
    let mut total = seg.total;
    // Global branch draws first so both orders of evaluation agree.
    let unc_global = match global {
        Some(f) => Some(uncertainty_loss(tape, f, targets, weights.eta, rng)?),
        None => None,
    };
    let unc_local = match local {
        Some(f) => Some(uncertainty_loss(tape, f, targets, weights.eta, rng)?),
        None => None,
    };
    for (terms, w) in [(unc_global, weights.lambda1), (unc_local, weights.lambda2)] {
        if let Some(t) = terms {
            let s = tape.scale(t.total, T::lit(w));
            total = tape.add(total, s)?;
        }
    }
    Ok(TotalTerms {
        total,
        seg,
        unc_global,
        unc_local,
    })
}
