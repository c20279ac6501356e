//! Procedural aerial-style scenes with exact building masks.

use std::f64::consts::{FRAC_PI_2, PI};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::Scene;
use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::{Real, Tensor};

/// Image degradations applied after rendering. The mask is never degraded.
#[derive(Clone, Debug, PartialEq)]
pub struct Difficulty {
    /// Standard deviation of additive Gaussian noise, in 8-bit units.
    pub noise_std: f64,
    /// Box-downsample then bilinear-upsample factor; 1 disables it.
    pub degrade: usize,
    /// Draw tree-row strips across the image on top of buildings.
    pub occlusion: bool,
}

impl Default for Difficulty {
    fn default() -> Self {
        Self::clean()
    }
}

impl Difficulty {
    pub fn clean() -> Self {
        Difficulty {
            noise_std: 0.0,
            degrade: 1,
            occlusion: false,
        }
    }

    pub fn noisy(noise_std: f64) -> Self {
        Difficulty {
            noise_std,
            ..Self::clean()
        }
    }

    pub fn degraded(factor: usize) -> Self {
        Difficulty {
            degrade: factor,
            ..Self::clean()
        }
    }

    fn validate(&self, size: usize) -> Result<()> {
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config(format!("noise std must be nonnegative, got {}", self.noise_std)));
        }
        if self.degrade == 0 || size % self.degrade != 0 {
            return Err(Error::Config(format!(
                "degradation factor {} must divide the scene size {size}",
                self.degrade
            )));
        }
        Ok(())
    }
}

pub const MAX_FOREGROUND: f64 = 0.6;
pub const MIN_BUILDINGS: usize = 3;
pub const MAX_BUILDINGS: usize = 20;

struct Building {
    cx: f64,
    cy: f64,
    half_a: f64,
    half_b: f64,
    angle: f64,
    color: [f64; 3],
}

impl Building {
    /// Rect-frame coordinates of a pixel centre.
    fn local(&self, x: usize, y: usize) -> (f64, f64) {
        let (dx, dy) = (x as f64 + 0.5 - self.cx, y as f64 + 0.5 - self.cy);
        let (s, c) = self.angle.sin_cos();
        (c * dx + s * dy, -s * dx + c * dy)
    }

    fn contains(&self, x: usize, y: usize) -> bool {
        let (u, v) = self.local(x, y);
        u.abs() <= self.half_a && v.abs() <= self.half_b
    }

    fn bounding_radius(&self) -> f64 {
        self.half_a.hypot(self.half_b)
    }

    fn pixels(&self, size: usize) -> Vec<usize> {
        let r = self.bounding_radius();
        let lo = |c: f64| (c - r).floor().max(0.0) as usize;
        let hi = |c: f64| ((c + r).ceil() as usize).min(size);
        let mut out = Vec::new();
        for y in lo(self.cy)..hi(self.cy) {
            for x in lo(self.cx)..hi(self.cx) {
                if self.contains(x, y) {
                    out.push(y * size + x);
                }
            }
        }
        out
    }
}

fn roof_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    if rng.random_bool(0.25) {
        // Terracotta.
        let v = rng.random_range(0.6..0.85);
        [v, v * 0.5, v * 0.4]
    } else {
        let v = rng.random_range(0.55..0.9);
        let tint = rng.random_range(-0.06..0.06);
        [v + tint, v, v - tint]
    }
}

fn place_buildings(rng: &mut ChaCha8Rng, size: usize) -> (Vec<Building>, Vec<bool>) {
    let target = rng.random_range(MIN_BUILDINGS..=(size / 16).clamp(MIN_BUILDINGS, MAX_BUILDINGS));
    let s = size as f64;
    let mut occupied = vec![false; size * size];
    let mut mask = vec![false; size * size];
    let mut area = 0usize;
    let mut buildings = Vec::new();
    let mut scale = 1.0;
    let mut failures = 0;
    while buildings.len() < target {
        if failures > 0 && failures % 100 == 0 {
            if buildings.len() >= MIN_BUILDINGS {
                break;
            }
            scale *= 0.8;
        }
        let side = |rng: &mut ChaCha8Rng| (rng.random_range(s / 6.0..s / 3.0) * scale).max(4.0) / 2.0;
        let (half_a, half_b) = (side(rng), side(rng));
        let angle = if rng.random_bool(0.5) { 0.0 } else { rng.random_range(0.0..FRAC_PI_2) };
        let (sn, cs) = angle.sin_cos();
        let ext_x = half_a * cs.abs() + half_b * sn.abs();
        let ext_y = half_a * sn.abs() + half_b * cs.abs();
        if 2.0 * ext_x + 2.0 >= s || 2.0 * ext_y + 2.0 >= s {
            failures += 1;
            continue;
        }
        let b = Building {
            cx: rng.random_range(ext_x + 1.0..s - ext_x - 1.0),
            cy: rng.random_range(ext_y + 1.0..s - ext_y - 1.0),
            half_a,
            half_b,
            angle,
            color: roof_color(rng),
        };
        let px = b.pixels(size);
        if px.is_empty()
            || px.iter().any(|&i| occupied[i])
            || (area + px.len()) as f64 > MAX_FOREGROUND * (size * size) as f64
        {
            failures += 1;
            continue;
        }
        area += px.len();
        for &i in &px {
            mask[i] = true;
            let (y, x) = ((i / size) as isize, (i % size) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (yy, xx) = (y + dy, x + dx);
                    if (0..size as isize).contains(&yy) && (0..size as isize).contains(&xx) {
                        occupied[yy as usize * size + xx as usize] = true;
                    }
                }
            }
        }
        buildings.push(b);
    }
    (buildings, mask)
}

fn background(rng: &mut ChaCha8Rng, size: usize) -> Vec<f64> {
    let base = [
        rng.random_range(0.22..0.35),
        rng.random_range(0.30..0.45),
        rng.random_range(0.15..0.28),
    ];
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            let theta = rng.random_range(0.0..PI);
            let freq = rng.random_range(1.0..4.0) * 2.0 * PI / size as f64;
            (theta.cos() * freq, theta.sin() * freq, rng.random_range(0.0..2.0 * PI), rng.random_range(0.02..0.05))
        })
        .collect();
    let plane = size * size;
    let mut img = vec![0.0; 3 * plane];
    for y in 0..size {
        for x in 0..size {
            let mut t: f64 = waves
                .iter()
                .map(|&(fx, fy, ph, amp)| amp * (fx * x as f64 + fy * y as f64 + ph).sin())
                .sum();
            t += rng.random_range(-0.02..0.02);
            for (ch, b) in base.iter().enumerate() {
                img[ch * plane + y * size + x] = b + t;
            }
        }
    }
    img
}

fn draw_buildings(img: &mut [f64], buildings: &[Building], size: usize) {
    let plane = size * size;
    for b in buildings {
        for i in b.pixels(size) {
            let (u, _) = b.local(i % size, i / size);
            // Gabled roof: one slope slightly darker than the other.
            let shade = if u < 0.0 { 0.94 } else { 1.0 };
            for ch in 0..3 {
                img[ch * plane + i] = b.color[ch] * shade;
            }
        }
    }
}

fn draw_occluders(rng: &mut ChaCha8Rng, img: &mut [f64], size: usize) {
    let plane = size * size;
    let tree = [0.12, 0.26, 0.10];
    for _ in 0..rng.random_range(1..=3) {
        let theta = rng.random_range(0.0..PI);
        let (nx, ny) = (theta.cos(), theta.sin());
        let offset = rng.random_range(0.0..size as f64) * (nx.abs() + ny.abs());
        let half_width = rng.random_range(0.75..1.5);
        for y in 0..size {
            for x in 0..size {
                let d = nx * (x as f64 + 0.5) + ny * (y as f64 + 0.5) - offset;
                if d.abs() <= half_width {
                    for (ch, t) in tree.iter().enumerate() {
                        img[ch * plane + y * size + x] = *t;
                    }
                }
            }
        }
    }
}

fn degrade(img: &[f64], size: usize, factor: usize) -> Vec<f64> {
    let small = size / factor;
    let mut down = vec![0.0; 3 * small * small];
    let norm = 1.0 / (factor * factor) as f64;
    for ch in 0..3 {
        for y in 0..size {
            for x in 0..size {
                down[ch * small * small + (y / factor) * small + x / factor] += img[ch * size * size + y * size + x] * norm;
            }
        }
    }
    let mut up = vec![0.0; 3 * size * size];
    kernels::upsample(3, small, small, factor, &down, &mut up);
    up
}

/// Renders a `size x size` scene. Identical arguments give bit-identical
/// scenes.
pub fn generate_synthetic_scene<T: Real>(seed: u64, size: usize, difficulty: &Difficulty) -> Result<Scene<T>> {
    if size == 0 || size % 32 != 0 {
        return Err(Error::Config(format!("scene size must be a positive multiple of 32, got {size}")));
    }
    difficulty.validate(size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = background(&mut rng, size);
    let (buildings, mask) = place_buildings(&mut rng, size);
    draw_buildings(&mut img, &buildings, size);
    if difficulty.occlusion {
        draw_occluders(&mut rng, &mut img, size);
    }
    if difficulty.degrade > 1 {
        img = degrade(&img, size, difficulty.degrade);
    }
    if difficulty.noise_std > 0.0 {
        let noise = Normal::new(0.0, difficulty.noise_std / 255.0).expect("finite std");
        for v in img.iter_mut() {
            *v += noise.sample(&mut rng);
        }
    }
    for v in img.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    let mask: Vec<f64> = mask.into_iter().map(|m| if m { 1.0 } else { 0.0 }).collect();
    Scene::new(
        Tensor::from_f64(&[3, size, size], &img)?,
        Tensor::from_f64(&[1, size, size], &mask)?,
        seed,
    )
}
