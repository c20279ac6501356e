//! Tiled inference: logits, masks, uncertainty maps and evaluation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{derive_seed, reassemble, tile_tensor, Scene};
use crate::error::Result;
use crate::kernels;
use crate::metrics::{confusion_counts, ConfusionCounts, Report};
use crate::model::{Noise, Uaglnet};
use crate::nn::{Graph, ParamStore};
use crate::tensor::{Real, Tensor};

/// Network outputs for one tile, detached from any graph.
#[derive(Clone, Debug)]
pub struct TileOutput<T> {
    pub logits: Tensor<T>,
    /// Uncertainty maps at tile resolution, zero for a branch without one.
    pub u_local: Tensor<T>,
    pub u_global: Tensor<T>,
}

fn upsample4<T: Real>(u: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = u.chw("upsample")?;
    let mut out = vec![T::zero(); c * h * w * 16];
    kernels::upsample(c, h, w, 4, u.data(), &mut out);
    Tensor::new(&[c, 4 * h, 4 * w], out)
}

/// Runs the model in inference mode on one `[3,H,W]` image whose sides are
/// multiples of 32. Sampling noise comes from `noise_seed`; `None` uses
/// zero noise.
pub fn infer_tile<T: Real>(
    model: &Uaglnet,
    params: &ParamStore<T>,
    image: &Tensor<T>,
    noise_seed: Option<u64>,
) -> Result<TileOutput<T>> {
    let (_, h, w) = image.chw("infer")?;
    let mut g = Graph::new(params, false, 0);
    let x = g.constant(image.clone());
    let mut rng;
    let noise = match noise_seed {
        Some(s) => {
            rng = ChaCha8Rng::seed_from_u64(s);
            Noise::Random(&mut rng)
        }
        None => Noise::Zero,
    };
    let out = model.forward(&mut g, x, noise)?;
    let up = |g: &Graph<T>, u: Option<crate::autodiff::Var>| match u {
        Some(v) => upsample4(g.value(v)),
        None => Ok(Tensor::zeros(&[1, h, w])),
    };
    Ok(TileOutput {
        logits: g.value(out.logits).clone(),
        u_local: up(&g, out.u_local)?,
        u_global: up(&g, out.u_global)?,
    })
}

/// Full-resolution outputs of an arbitrary-size image, computed tile by
/// tile and stitched back together.
pub fn infer_image<T: Real>(
    model: &Uaglnet,
    params: &ParamStore<T>,
    image: &Tensor<T>,
    tile: usize,
    seed: Option<u64>,
) -> Result<TileOutput<T>> {
    let (tiles, plan) = tile_tensor(image, tile)?;
    let mut logits = Vec::with_capacity(tiles.len());
    let mut ul = Vec::with_capacity(tiles.len());
    let mut ug = Vec::with_capacity(tiles.len());
    for (i, t) in tiles.iter().enumerate() {
        let o = infer_tile(model, params, t, seed.map(|s| derive_seed(&[s, i as u64])))?;
        logits.push(o.logits);
        ul.push(o.u_local);
        ug.push(o.u_global);
    }
    Ok(TileOutput {
        logits: reassemble(&logits, &plan)?,
        u_local: reassemble(&ul, &plan)?,
        u_global: reassemble(&ug, &plan)?,
    })
}

/// Binary mask of `sigmoid(logit) >= threshold`.
pub fn threshold_mask<T: Real>(logits: &Tensor<T>, threshold: f64) -> Tensor<T> {
    let cut = (threshold / (1.0 - threshold)).ln();
    logits.map(|v| if v.as_f64() >= cut { T::one() } else { T::zero() })
}

/// Micro-averaged report over `scenes`; scene `i` samples its noise from
/// `derive_seed([seed, i])`, so repeated runs agree exactly.
pub fn evaluate_scenes<T: Real>(
    model: &Uaglnet,
    params: &ParamStore<T>,
    scenes: impl IntoIterator<Item = Result<Scene<T>>>,
    tile: usize,
    threshold: f64,
    seed: u64,
) -> Result<Report> {
    let mut counts = ConfusionCounts::default();
    for (i, scene) in scenes.into_iter().enumerate() {
        let scene = scene?;
        let out = infer_image(model, params, &scene.image, tile, Some(derive_seed(&[seed, i as u64])))?;
        counts += confusion_counts(&out.logits, &scene.mask, threshold)?;
    }
    Ok(Report::new(counts))
}
