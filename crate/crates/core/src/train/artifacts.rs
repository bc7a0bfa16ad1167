//! Inference products: probability, binary and confusion rasters, and the
//! retrieved stage-4/5 change maps.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Rgb, RgbImage};

use crate::data::ChangeSample;
use crate::error::{config_err, Error, Result};
use crate::losses::downsample_label;
use crate::metrics::{binarize, confusion, ConfusionCounts};
use crate::model::{batched, DsferNet};
use crate::nn::Mode;
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const TP_COLOR: [u8; 3] = [255, 255, 255];
pub const FP_COLOR: [u8; 3] = [0, 255, 255];
pub const TN_COLOR: [u8; 3] = [0, 0, 0];
pub const FN_COLOR: [u8; 3] = [255, 0, 0];

#[derive(Debug, Clone)]
pub struct Inference {
    /// `[h,w]` changed-class probability.
    pub prob: Tensor,
    /// `[h,w]` in `{0,1}`.
    pub binary: Tensor,
    /// Present when a label was supplied.
    pub confusion: Option<ConfusionCounts>,
    pub confusion_image: Option<RgbImage>,
}

fn plane(t: &Tensor) -> Result<Tensor> {
    let s = t.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    if t.numel() != h * w {
        return Err(config_err!("expected a single-channel map, got {:?}", s));
    }
    t.reshape(&[h, w])
}

/// Eval-mode prediction for one pair; `label` (`[h,w]`) adds the confusion
/// rendering.
pub fn infer(net: &DsferNet, t1: &Tensor, t2: &Tensor, label: Option<&Tensor>) -> Result<Inference> {
    let prob = plane(&net.predict(t1, t2)?)?;
    let binary = binarize(&prob);
    let (confusion, confusion_image) = match label {
        Some(l) => (Some(confusion(&binary, l)?), Some(confusion_image(&binary, l)?)),
        None => (None, None),
    };
    Ok(Inference {
        prob,
        binary,
        confusion,
        confusion_image,
    })
}

/// TP white, FP cyan, TN black, FN red.
pub fn confusion_image(pred: &Tensor, label: &Tensor) -> Result<RgbImage> {
    if pred.shape() != label.shape() || pred.rank() != 2 {
        return Err(config_err!(
            "confusion image needs equal [h,w] maps, got {:?} and {:?}",
            pred.shape(),
            label.shape()
        ));
    }
    let w = pred.shape()[1];
    Ok(RgbImage::from_fn(w as u32, pred.shape()[0] as u32, |x, y| {
        let i = y as usize * w + x as usize;
        Rgb(match (pred.data()[i] > 0.5, label.data()[i] > 0.5) {
            (true, true) => TP_COLOR,
            (true, false) => FP_COLOR,
            (false, false) => TN_COLOR,
            (false, true) => FN_COLOR,
        })
    }))
}

/// 8-bit grayscale of an `[h,w]` map; with `normalize` the values are
/// min-max stretched first, otherwise clamped to `[0,1]`.
pub fn gray_image(map: &Tensor, normalize: bool) -> GrayImage {
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let d = map.data();
    let (lo, hi) = if normalize {
        d.iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    } else {
        (0.0, 1.0)
    };
    let span = hi - lo;
    GrayImage::from_fn(w as u32, h as u32, |x, y| {
        let v = d[y as usize * w + x as usize];
        let u = if span > 0.0 { (v - lo) / span } else { 0.0 };
        image::Luma([(u.clamp(0.0, 1.0) * 255.0).round() as u8])
    })
}

fn save(path: PathBuf, f: impl FnOnce(&Path) -> image::ImageResult<()>) -> Result<PathBuf> {
    f(&path).map_err(|source| Error::Image {
        path: path.clone(),
        source,
    })?;
    Ok(path)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes `<stem>_prob.png`, `<stem>_binary.png` and, when available,
/// `<stem>_confusion.png`.
pub fn write_inference(inf: &Inference, out_dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
    ensure_dir(out_dir)?;
    let mut written = vec![
        save(out_dir.join(format!("{stem}_prob.png")), |p| gray_image(&inf.prob, false).save(p))?,
        save(out_dir.join(format!("{stem}_binary.png")), |p| {
            gray_image(&inf.binary, false).save(p)
        })?,
    ];
    if let Some(img) = &inf.confusion_image {
        written.push(save(out_dir.join(format!("{stem}_confusion.png")), |p| img.save(p))?);
    }
    Ok(written)
}

/// Retrieved change maps at stage 4 (`h/8`) and stage 5 (`h/16`).
#[derive(Debug, Clone)]
pub struct RetrievalMaps {
    pub stage4: Tensor,
    pub stage5: Tensor,
}

impl RetrievalMaps {
    pub fn stage(&self, stage: usize) -> &Tensor {
        if stage == 4 {
            &self.stage4
        } else {
            &self.stage5
        }
    }
}

pub fn export_retrieval(net: &DsferNet, sample: &ChangeSample) -> Result<RetrievalMaps> {
    let mut tape = Tape::new();
    let a = tape.constant(batched(&sample.image_t1)?);
    let b = tape.constant(batched(&sample.image_t2)?);
    let out = net.forward(&mut tape, a, b, Mode::Eval)?;
    let [d4, d5] = out
        .dsfr
        .ok_or_else(|| config_err!("model has no retrieval modules"))?;
    Ok(RetrievalMaps {
        stage4: plane(tape.value(d4.retrieved))?,
        stage5: plane(tape.value(d5.retrieved))?,
    })
}

/// Mean over `factor`×`factor` blocks of a `[c,h,w]` image.
pub fn average_pool(img: &Tensor, factor: usize) -> Result<Tensor> {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(config_err!("cannot pool {h}x{w} by {factor}"));
    }
    let (ho, wo) = (h / factor, w / factor);
    let mut out = vec![0.0; c * ho * wo];
    let norm = (factor * factor) as f64;
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[ch * ho * wo + (y / factor) * wo + x / factor] += img.data()[ch * h * w + y * w + x] / norm;
            }
        }
    }
    Tensor::new(&[c, ho, wo], out)
}

/// Side-by-side panel at stage resolution, enlarged by `zoom`: t1, t2, the
/// downsampled label and the normalized retrieved map.
pub fn retrieval_panel(sample: &ChangeSample, map: &Tensor, stage: usize, zoom: usize) -> Result<RgbImage> {
    let factor = 1usize << (stage - 1);
    let t1 = average_pool(&sample.image_t1, factor)?;
    let t2 = average_pool(&sample.image_t2, factor)?;
    let label = downsample_label(&sample.label, stage)?;
    let label = plane(&label)?;
    let (h, w) = (map.shape()[0], map.shape()[1]);
    if t1.shape()[1..] != [h, w] {
        return Err(config_err!("retrieved map {:?} does not match stage {stage}", map.shape()));
    }
    let gray = gray_image(map, true);
    let zoom = zoom.max(1);
    let tile = |x: usize, y: usize, t: usize| -> [u8; 3] {
        let i = y * w + x;
        let byte = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        match t {
            0 | 1 => {
                let img = if t == 0 { &t1 } else { &t2 };
                let d = img.data();
                [byte(d[i]), byte(d[h * w + i]), byte(d[2 * h * w + i])]
            }
            2 => [byte(label.data()[i]); 3],
            _ => [gray.get_pixel(x as u32, y as u32)[0]; 3],
        }
    };
    Ok(RgbImage::from_fn((4 * w * zoom) as u32, (h * zoom) as u32, |px, py| {
        let (px, py) = (px as usize / zoom, py as usize / zoom);
        Rgb(tile(px % w, py, px / w))
    }))
}

/// Writes `<id>_fr4.png`, `<id>_fr5.png` (stage resolution, min-max
/// normalized) and `<id>_panel4.png`, `<id>_panel5.png` (enlarged back to
/// the input size).
pub fn write_retrieval(maps: &RetrievalMaps, sample: &ChangeSample, out_dir: &Path) -> Result<Vec<PathBuf>> {
    ensure_dir(out_dir)?;
    let mut written = Vec::new();
    for stage in [4, 5] {
        let map = maps.stage(stage);
        written.push(save(out_dir.join(format!("{}_fr{stage}.png", sample.id)), |p| {
            gray_image(map, true).save(p)
        })?);
        let panel = retrieval_panel(sample, map, stage, 1 << (stage - 1))?;
        written.push(save(out_dir.join(format!("{}_panel{stage}.png", sample.id)), |p| panel.save(p))?);
    }
    Ok(written)
}

/// IoU between the upper half of the min-max normalized map and the label
/// downsampled to the same stage.
pub fn retrieval_overlap(map: &Tensor, label: &Tensor, stage: usize) -> Result<f64> {
    let down = plane(&downsample_label(label, stage)?)?;
    if down.shape() != map.shape() {
        return Err(config_err!("map {:?} vs label {:?}", map.shape(), down.shape()));
    }
    let (lo, hi) = map
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = hi - lo;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&v, &l) in map.data().iter().zip(down.data()) {
        let active = span > 0.0 && (v - lo) / span > 0.5;
        let changed = l > 0.5;
        inter += (active && changed) as usize;
        union += (active || changed) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}
