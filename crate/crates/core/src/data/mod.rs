//! Bitemporal tile pairs: on-disk datasets, synthetic generation, splits and
//! batch iteration.

mod io;
mod split;
mod synth;

pub use io::{load_dataset, read_image, read_mask, save_dataset, save_sample};
pub use split::{iterate_batches, split, split_sizes, DatasetSplit, Part};
pub use synth::{synth_generate, SynthConfig, DEFAULT_DIFFICULTY};

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One co-registered image pair with its binary change label.
#[derive(Debug, Clone, PartialEq)]
pub struct ChangeSample {
    /// `[3,h,w]` in `[0,1]`.
    pub image_t1: Tensor,
    /// `[3,h,w]` in `[0,1]`.
    pub image_t2: Tensor,
    /// `[h,w]` in `{0,1}`.
    pub label: Tensor,
    pub id: String,
}

impl ChangeSample {
    pub fn new(id: impl Into<String>, image_t1: Tensor, image_t2: Tensor, label: Tensor) -> Result<Self> {
        let id = id.into();
        let bad = |reason: String| Error::Sample {
            id: id.clone(),
            reason,
        };
        if image_t1.rank() != 3 || image_t1.shape()[0] != 3 {
            return Err(bad(format!("t1 image must be [3,h,w], got {:?}", image_t1.shape())));
        }
        if image_t2.shape() != image_t1.shape() {
            return Err(bad(format!(
                "t1 {:?} and t2 {:?} dimensions differ",
                image_t1.shape(),
                image_t2.shape()
            )));
        }
        if label.shape() != &image_t1.shape()[1..] {
            return Err(bad(format!(
                "label {:?} does not match image {:?}",
                label.shape(),
                image_t1.shape()
            )));
        }
        if label.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(bad("label is not binary".into()));
        }
        Ok(Self {
            image_t1,
            image_t2,
            label,
            id,
        })
    }

    pub fn height(&self) -> usize {
        self.label.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.label.shape()[1]
    }

    pub fn changed_pixels(&self) -> usize {
        self.label.data().iter().filter(|&&v| v == 1.0).count()
    }

    /// Random horizontal/vertical flip and transpose, applied identically to
    /// both images and the label. Square tiles only.
    pub fn augmented<R: Rng + ?Sized>(&self, rng: &mut R) -> Self {
        let (flip_h, flip_v, transpose) = (rng.random_bool(0.5), rng.random_bool(0.5), rng.random_bool(0.5));
        let transpose = transpose && self.height() == self.width();
        let map = |t: &Tensor| -> Tensor {
            let (planes, h, w) = match t.rank() {
                2 => (1, t.shape()[0], t.shape()[1]),
                _ => (t.shape()[0], t.shape()[1], t.shape()[2]),
            };
            let mut out = vec![0.0; t.numel()];
            for p in 0..planes {
                let src = &t.data()[p * h * w..(p + 1) * h * w];
                let dst = &mut out[p * h * w..(p + 1) * h * w];
                for y in 0..h {
                    for x in 0..w {
                        let (mut sy, mut sx) = (y, x);
                        if transpose {
                            (sy, sx) = (sx, sy);
                        }
                        if flip_v {
                            sy = h - 1 - sy;
                        }
                        if flip_h {
                            sx = w - 1 - sx;
                        }
                        dst[y * w + x] = src[sy * w + sx];
                    }
                }
            }
            Tensor::new(t.shape(), out).expect("same shape")
        };
        Self {
            image_t1: map(&self.image_t1),
            image_t2: map(&self.image_t2),
            label: map(&self.label),
            id: self.id.clone(),
        }
    }
}

/// Fraction of changed pixels over a sample set.
pub fn changed_fraction(samples: &[ChangeSample]) -> f64 {
    let changed: usize = samples.iter().map(ChangeSample::changed_pixels).sum();
    let total: usize = samples.iter().map(|s| s.label.numel()).sum();
    if total == 0 {
        0.0
    } else {
        changed as f64 / total as f64
    }
}
