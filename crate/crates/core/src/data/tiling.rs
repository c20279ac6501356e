//! Zero-pad to a tile multiple, split into non-overlapping tiles, and put
//! them back together.

use super::Scene;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Geometry of a tiling: source extent, padded extent and tile origins in
/// row-major order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TilePlan {
    pub tile: usize,
    pub source: (usize, usize),
    pub padded: (usize, usize),
    pub origins: Vec<(usize, usize)>,
}

impl TilePlan {
    pub fn rows(&self) -> usize {
        self.padded.0 / self.tile
    }

    pub fn cols(&self) -> usize {
        self.padded.1 / self.tile
    }
}

pub fn tile_plan(height: usize, width: usize, tile: usize) -> Result<TilePlan> {
    if tile == 0 || tile % 32 != 0 {
        return Err(Error::Config(format!("tile size must be a positive multiple of 32, got {tile}")));
    }
    let pad = |n: usize| n.div_ceil(tile) * tile;
    let padded = (pad(height), pad(width));
    let origins = (0..padded.0 / tile)
        .flat_map(|r| (0..padded.1 / tile).map(move |c| (r * tile, c * tile)))
        .collect();
    Ok(TilePlan {
        tile,
        source: (height, width),
        padded,
        origins,
    })
}

/// Splits a `[C,H,W]` tensor into zero-padded `[C,tile,tile]` pieces.
pub fn tile_tensor<T: Real>(t: &Tensor<T>, tile: usize) -> Result<(Vec<Tensor<T>>, TilePlan)> {
    let (c, h, w) = t.chw("tile")?;
    let plan = tile_plan(h, w, tile)?;
    let d = t.data();
    let tiles = plan
        .origins
        .iter()
        .map(|&(oy, ox)| {
            let mut out = vec![T::zero(); c * tile * tile];
            for ch in 0..c {
                for y in 0..tile.min(h.saturating_sub(oy)) {
                    let span = tile.min(w.saturating_sub(ox));
                    let src = ch * h * w + (oy + y) * w + ox;
                    let dst = ch * tile * tile + y * tile;
                    out[dst..dst + span].copy_from_slice(&d[src..src + span]);
                }
            }
            Tensor::new(&[c, tile, tile], out)
        })
        .collect::<Result<_>>()?;
    Ok((tiles, plan))
}

/// Inverse of [`tile_tensor`]: stitches tiles into the padded extent and
/// crops back to the source extent.
pub fn reassemble<T: Real>(tiles: &[Tensor<T>], plan: &TilePlan) -> Result<Tensor<T>> {
    if tiles.len() != plan.origins.len() {
        return Err(Error::dim("reassemble", "tile count", plan.origins.len(), tiles.len()));
    }
    let c = tiles[0].shape()[0];
    let (h, w) = plan.source;
    let tile = plan.tile;
    let mut out = vec![T::zero(); c * h * w];
    for (t, &(oy, ox)) in tiles.iter().zip(&plan.origins) {
        if t.shape() != [c, tile, tile] {
            return Err(Error::dim(
                "reassemble",
                "tile shape",
                format!("[{c}, {tile}, {tile}]"),
                format!("{:?}", t.shape()),
            ));
        }
        let d = t.data();
        for ch in 0..c {
            for y in 0..tile.min(h.saturating_sub(oy)) {
                let span = tile.min(w.saturating_sub(ox));
                let dst = ch * h * w + (oy + y) * w + ox;
                let src = ch * tile * tile + y * tile;
                out[dst..dst + span].copy_from_slice(&d[src..src + span]);
            }
        }
    }
    Tensor::new(&[c, h, w], out)
}

/// Image and mask tiles of one scene.
#[derive(Clone, Debug)]
pub struct TileSet<T> {
    pub tiles: Vec<Scene<T>>,
    pub plan: TilePlan,
}

impl<T: Real> TileSet<T> {
    pub fn reassemble(&self) -> Result<Scene<T>> {
        let images: Vec<_> = self.tiles.iter().map(|s| s.image.clone()).collect();
        let masks: Vec<_> = self.tiles.iter().map(|s| s.mask.clone()).collect();
        let seed = self.tiles.first().map_or(0, |s| s.seed);
        Scene::new(reassemble(&images, &self.plan)?, reassemble(&masks, &self.plan)?, seed)
    }
}

pub fn tile_image<T: Real>(scene: &Scene<T>, tile: usize) -> Result<TileSet<T>> {
    let (images, plan) = tile_tensor(&scene.image, tile)?;
    let (masks, _) = tile_tensor(&scene.mask, tile)?;
    let tiles = images
        .into_iter()
        .zip(masks)
        .map(|(i, m)| Scene::new(i, m, scene.seed))
        .collect::<Result<_>>()?;
    Ok(TileSet { tiles, plan })
}
