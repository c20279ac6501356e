//! Synthetic scenes, image files, tiling and augmentation.

mod augment;
mod pnm;
mod scene;
mod tiling;

pub use augment::{augment, crop, hflip};
pub use pnm::{decode_pnm, encode_pgm, encode_ppm, load_image, save_gray, save_image, save_mask};
pub use scene::{generate_synthetic_scene, Difficulty};
pub use tiling::{reassemble, tile_image, tile_plan, tile_tensor, TilePlan, TileSet};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// An RGB image in `[0,1]` with its binary footprint mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene<T> {
    /// `[3,H,W]`.
    pub image: Tensor<T>,
    /// `[1,H,W]`, entries exactly 0 or 1.
    pub mask: Tensor<T>,
    pub seed: u64,
}

impl<T: Real> Scene<T> {
    pub fn new(image: Tensor<T>, mask: Tensor<T>, seed: u64) -> Result<Self> {
        let (c, h, w) = image.chw("scene")?;
        let (mc, mh, mw) = mask.chw("scene")?;
        if c != 3 {
            return Err(Error::dim("scene", "image channels", 3, c));
        }
        if mc != 1 || (mh, mw) != (h, w) {
            return Err(Error::dim("scene", "mask shape", format!("[1, {h}, {w}]"), format!("{:?}", mask.shape())));
        }
        if mask.data().iter().any(|&v| v != T::zero() && v != T::one()) {
            return Err(Error::Domain {
                op: "scene",
                msg: "mask must be binary".into(),
            });
        }
        Ok(Scene { image, mask, seed })
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.mask.sum().as_f64() / self.mask.numel() as f64
    }

    pub fn cast<U: Real>(&self) -> Scene<U> {
        Scene {
            image: self.image.cast(),
            mask: self.mask.cast(),
            seed: self.seed,
        }
    }
}

/// Mixes a sequence of integers into one well-spread 64-bit seed.
///
/// Used to give every (run seed, split, step, item) its own independent
/// random stream without any shared generator state.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h = 0x6a09_e667_f3bc_c909u64;
    for &p in parts {
        h = splitmix(h ^ p);
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A reproducible collection of synthetic scenes.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub seed: u64,
    pub count: usize,
    pub size: usize,
    pub difficulty: Difficulty,
}

impl DatasetSpec {
    pub fn scene_seed(&self, index: usize) -> u64 {
        derive_seed(&[self.seed, index as u64])
    }

    pub fn scene<T: Real>(&self, index: usize) -> Result<Scene<T>> {
        generate_synthetic_scene(self.scene_seed(index), self.size, &self.difficulty)
    }

    pub fn scenes<T: Real>(&self) -> Result<Vec<Scene<T>>> {
        (0..self.count).map(|i| self.scene(i)).collect()
    }
}
