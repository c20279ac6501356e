use rand::Rng;

use super::Scene;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

fn crop_tensor<T: Real>(t: &Tensor<T>, y0: usize, x0: usize, size: usize) -> Result<Tensor<T>> {
    let (c, h, w) = t.chw("crop")?;
    let d = t.data();
    let mut out = Vec::with_capacity(c * size * size);
    for ch in 0..c {
        for y in y0..y0 + size {
            let row = ch * h * w + y * w;
            out.extend_from_slice(&d[row + x0..row + x0 + size]);
        }
    }
    Tensor::new(&[c, size, size], out)
}

fn flip_tensor<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    let (_, _, w) = t.chw("hflip").expect("checked by scene");
    let mut out = t.clone();
    for row in out.data_mut().chunks_mut(w) {
        row.reverse();
    }
    out
}

/// Square crop with top-left corner `(y0, x0)`, applied to image and mask.
pub fn crop<T: Real>(scene: &Scene<T>, y0: usize, x0: usize, size: usize) -> Result<Scene<T>> {
    if size == 0 || y0 + size > scene.height() || x0 + size > scene.width() {
        return Err(Error::Config(format!(
            "crop {size}x{size} at ({y0},{x0}) exceeds the {}x{} source",
            scene.height(),
            scene.width()
        )));
    }
    Ok(Scene {
        image: crop_tensor(&scene.image, y0, x0, size)?,
        mask: crop_tensor(&scene.mask, y0, x0, size)?,
        seed: scene.seed,
    })
}

/// Horizontal mirror of image and mask.
pub fn hflip<T: Real>(scene: &Scene<T>) -> Scene<T> {
    Scene {
        image: flip_tensor(&scene.image),
        mask: flip_tensor(&scene.mask),
        seed: scene.seed,
    }
}

/// Uniform random crop of `crop_size`, then a horizontal flip with
/// probability 0.5.
pub fn augment<T: Real>(scene: &Scene<T>, rng: &mut impl Rng, crop_size: usize) -> Result<Scene<T>> {
    if crop_size == 0 || crop_size > scene.height() || crop_size > scene.width() {
        return Err(Error::Config(format!(
            "crop size {crop_size} larger than the {}x{} source",
            scene.height(),
            scene.width()
        )));
    }
    let y0 = rng.random_range(0..=scene.height() - crop_size);
    let x0 = rng.random_range(0..=scene.width() - crop_size);
    let out = crop(scene, y0, x0, crop_size)?;
    Ok(if rng.random_bool(0.5) { hflip(&out) } else { out })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn marker_scene() -> Scene<f64> {
        let mut image = Tensor::zeros(&[3, 8, 8]);
        let mut mask = Tensor::zeros(&[1, 8, 8]);
        image.set(&[1, 2, 5], 1.0);
        mask.set(&[0, 2, 5], 1.0);
        Scene::new(image, mask, 0).unwrap()
    }

    #[test]
    fn double_flip_is_identity() {
        let s = marker_scene();
        assert_eq!(hflip(&hflip(&s)), s);
    }

    #[test]
    fn marker_stays_aligned() {
        let s = marker_scene();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let a = augment(&s, &mut rng, 6).unwrap();
            let img: Vec<usize> = (0..36).filter(|&i| a.image.data()[36 + i] == 1.0).collect();
            let msk: Vec<usize> = (0..36).filter(|&i| a.mask.data()[i] == 1.0).collect();
            assert_eq!(img, msk);
        }
    }

    #[test]
    fn oversized_crop_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(augment(&marker_scene(), &mut rng, 9).is_err());
        assert!(crop(&marker_scene(), 4, 0, 5).is_err());
    }
}
