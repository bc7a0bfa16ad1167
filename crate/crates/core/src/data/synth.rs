//! Procedural change pairs: a textured background shared by both dates,
//! saturated objects appearing or disappearing between them, plus
//! unchanged distractor objects, illumination shift and sensor noise that
//! grow with `difficulty`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ChangeSample;
use crate::error::{config_err, Result};
use crate::tensor::Tensor;

pub const DEFAULT_DIFFICULTY: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub seed: u64,
    pub count: usize,
    pub size: usize,
    pub difficulty: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            count: 800,
            size: 64,
            difficulty: DEFAULT_DIFFICULTY,
        }
    }
}

impl SynthConfig {
    pub fn generate(&self) -> Result<Vec<ChangeSample>> {
        synth_generate(self.seed, self.count, self.size, self.difficulty)
    }
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
    Disc { cy: f64, cx: f64, r: f64 },
}

impl Shape {
    fn random<R: Rng>(rng: &mut R, size: usize) -> Self {
        let s = size as f64;
        if rng.random_bool(0.5) {
            let h = rng.random_range(s / 8.0..s / 3.5);
            let w = rng.random_range(s / 8.0..s / 3.5);
            let y0 = rng.random_range(0.0..s - h);
            let x0 = rng.random_range(0.0..s - w);
            Shape::Rect {
                y0,
                x0,
                y1: y0 + h,
                x1: x0 + w,
            }
        } else {
            let r = rng.random_range(s / 14.0..s / 6.0);
            Shape::Disc {
                cy: rng.random_range(r..s - r),
                cx: rng.random_range(r..s - r),
                r,
            }
        }
    }

    /// Pixel centres inside the shape.
    fn contains(&self, y: usize, x: usize) -> bool {
        let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
        match *self {
            Shape::Rect { y0, x0, y1, x1 } => py >= y0 && py < y1 && px >= x0 && px < x1,
            Shape::Disc { cy, cx, r } => (py - cy).powi(2) + (px - cx).powi(2) <= r * r,
        }
    }
}

/// Object colours stay out of the background's value band, so an object
/// always differs from whatever lies beneath it.
fn object_color<R: Rng>(rng: &mut R) -> [f64; 3] {
    std::array::from_fn(|_| {
        if rng.random_bool(0.5) {
            rng.random_range(0.0..0.22)
        } else {
            rng.random_range(0.78..1.0)
        }
    })
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn paint(img: &mut [f64], size: usize, shape: &Shape, color: [f64; 3]) {
    let plane = size * size;
    for y in 0..size {
        for x in 0..size {
            if shape.contains(y, x) {
                for (c, v) in color.iter().enumerate() {
                    img[c * plane + y * size + x] = quantize(*v);
                }
            }
        }
    }
}

/// Smooth colour field from a coarse lattice plus fine shared grain, all in
/// `[0.26, 0.74]`.
fn background<R: Rng>(rng: &mut R, size: usize) -> Vec<f64> {
    let cell = 8usize;
    let nodes = size / cell + 2;
    let plane = size * size;
    let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.08..0.08));
    let mut out = vec![0.0; 3 * plane];
    for (c, t) in tint.iter().enumerate() {
        let lattice: Vec<f64> = (0..nodes * nodes)
            .map(|_| (rng.random_range(0.38..0.62) + t).clamp(0.3, 0.7))
            .collect();
        for y in 0..size {
            let fy = y as f64 / cell as f64;
            let (gy, ty) = (fy.floor() as usize, fy.fract());
            for x in 0..size {
                let fx = x as f64 / cell as f64;
                let (gx, tx) = (fx.floor() as usize, fx.fract());
                let at = |i: usize, j: usize| lattice[i * nodes + j];
                let v = (1.0 - ty) * ((1.0 - tx) * at(gy, gx) + tx * at(gy, gx + 1))
                    + ty * ((1.0 - tx) * at(gy + 1, gx) + tx * at(gy + 1, gx + 1));
                out[c * plane + y * size + x] = v;
            }
        }
    }
    for y in 0..size {
        for x in 0..size {
            let grain = rng.random_range(-0.04..0.04);
            for c in 0..3 {
                let i = c * plane + y * size + x;
                out[i] = quantize(out[i] + grain);
            }
        }
    }
    out
}

fn generate_one(seed: u64, index: usize, size: usize, difficulty: f64) -> Result<ChangeSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let plane = size * size;

    let mut t1 = background(&mut rng, size);
    let distractors = (4.0 * difficulty).round() as usize;
    for _ in 0..distractors {
        let shape = Shape::random(&mut rng, size);
        let color = object_color(&mut rng);
        paint(&mut t1, size, &shape, color);
    }
    let mut t2 = t1.clone();

    let changes = rng.random_range(1..=3);
    let mut support = vec![false; plane];
    for _ in 0..changes {
        let shape = Shape::random(&mut rng, size);
        let color = object_color(&mut rng);
        let target = if rng.random_bool(0.5) { &mut t2 } else { &mut t1 };
        paint(target, size, &shape, color);
        for y in 0..size {
            for x in 0..size {
                support[y * size + x] |= shape.contains(y, x);
            }
        }
    }
    // Label is the part of the change support that actually differs.
    let label: Vec<f64> = (0..plane)
        .map(|i| {
            let differs = (0..3).any(|c| t1[c * plane + i] != t2[c * plane + i]);
            if support[i] && differs {
                1.0
            } else {
                0.0
            }
        })
        .collect();

    if difficulty > 0.0 {
        let gain = 1.0 + rng.random_range(-0.15..0.15) * difficulty;
        let offset = rng.random_range(-0.08..0.08) * difficulty;
        let noise = Normal::new(0.0, 0.03 * difficulty).map_err(|e| config_err!("noise: {e}"))?;
        for v in t2.iter_mut() {
            *v = *v * gain + offset;
        }
        for img in [&mut t1, &mut t2] {
            for v in img.iter_mut() {
                *v = quantize(*v + noise.sample(&mut rng));
            }
        }
    }

    ChangeSample::new(
        format!("synth_{index:05}"),
        Tensor::new(&[3, size, size], t1)?,
        Tensor::new(&[3, size, size], t2)?,
        Tensor::new(&[size, size], label)?,
    )
}

/// `n` samples of `size`×`size`, each a pure function of `(seed, index)`.
pub fn synth_generate(seed: u64, n: usize, size: usize, difficulty: f64) -> Result<Vec<ChangeSample>> {
    if size == 0 || !size.is_multiple_of(16) {
        return Err(config_err!("synthetic tile size must be a positive multiple of 16, got {size}"));
    }
    if !(0.0..=1.0).contains(&difficulty) {
        return Err(config_err!("difficulty must lie in [0,1], got {difficulty}"));
    }
    (0..n)
        .into_par_iter()
        .map(|i| generate_one(seed, i, size, difficulty))
        .collect()
}
