use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use rayon::prelude::*;

use super::ChangeSample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const LABEL_THRESHOLD: u8 = 127;

fn sample_err(id: &str, reason: impl Into<String>) -> Error {
    Error::Sample {
        id: id.to_string(),
        reason: reason.into(),
    }
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Decodes a PNG into a `[3,h,w]` tensor in `[0,1]`.
pub fn read_image(path: &Path) -> Result<Tensor> {
    let img = open_image(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = f64::from(px[c]) / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data)
}

/// Decodes a PNG into an `[h,w]` mask: 1 where the gray value exceeds 127.
pub fn read_mask(path: &Path) -> Result<Tensor> {
    let img = open_image(path)?.to_luma8();
    let (w, h) = img.dimensions();
    let data = img
        .pixels()
        .map(|p| if p[0] > LABEL_THRESHOLD { 1.0 } else { 0.0 })
        .collect();
    Tensor::new(&[h as usize, w as usize], data)
}

fn require(id: &str, path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(sample_err(id, format!("missing file {}", path.display())))
    }
}

fn load_one(root: &Path, file: &str) -> Result<ChangeSample> {
    let id = Path::new(file)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| file.to_string());
    let paths = [root.join("A").join(file), root.join("B").join(file), root.join("label").join(file)];
    for p in &paths {
        require(&id, p)?;
    }
    let t1 = read_image(&paths[0])?;
    let t2 = read_image(&paths[1])?;
    let label = read_mask(&paths[2])?;
    let dims = |t: &Tensor| {
        let s = t.shape();
        format!("{}x{}", s[s.len() - 1], s[s.len() - 2])
    };
    if t1.shape()[1..] != t2.shape()[1..] || t1.shape()[1..] != *label.shape() {
        return Err(sample_err(
            &id,
            format!(
                "dimension mismatch: A {}, B {}, label {}",
                dims(&t1),
                dims(&t2),
                dims(&label)
            ),
        ));
    }
    ChangeSample::new(id, t1, t2, label)
}

/// Loads `<root>/A/*.png` with their `B/` and `label/` counterparts, sorted
/// by file name.
pub fn load_dataset(root: impl AsRef<Path>) -> Result<Vec<ChangeSample>> {
    let root = root.as_ref();
    let dir_a = root.join("A");
    let entries = fs::read_dir(&dir_a).map_err(|e| Error::io(&dir_a, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(&dir_a, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.to_ascii_lowercase().ends_with(".png") {
            files.push(name);
        }
    }
    files.sort();
    files.par_iter().map(|f| load_one(root, f)).collect()
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn rgb_image(t: &Tensor) -> RgbImage {
    let (h, w) = (t.shape()[1], t.shape()[2]);
    let plane = h * w;
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        let d = t.data();
        image::Rgb([to_byte(d[i]), to_byte(d[plane + i]), to_byte(d[2 * plane + i])])
    })
}

fn save_png(img: impl FnOnce(&Path) -> image::ImageResult<()>, path: PathBuf) -> Result<()> {
    img(&path).map_err(|source| Error::Image { path, source })
}

/// Writes one sample into the `A/`, `B/`, `label/` layout.
pub fn save_sample(root: &Path, sample: &ChangeSample) -> Result<()> {
    let file = format!("{}.png", sample.id);
    let (h, w) = (sample.height(), sample.width());
    let label = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([if sample.label.data()[y as usize * w + x as usize] > 0.5 { 255 } else { 0 }])
    });
    save_png(|p| rgb_image(&sample.image_t1).save(p), root.join("A").join(&file))?;
    save_png(|p| rgb_image(&sample.image_t2).save(p), root.join("B").join(&file))?;
    save_png(|p| label.save(p), root.join("label").join(&file))
}

/// Materializes samples as 8-bit PNGs under `root`.
pub fn save_dataset(root: impl AsRef<Path>, samples: &[ChangeSample]) -> Result<()> {
    let root = root.as_ref();
    for sub in ["A", "B", "label"] {
        let d = root.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    samples.par_iter().try_for_each(|s| save_sample(root, s))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_conversion_rounds_and_clamps() {
        assert_eq!(to_byte(-0.2), 0);
        assert_eq!(to_byte(1.7), 255);
        assert_eq!(to_byte(128.0 / 255.0), 128);
        assert_eq!(to_byte(0.5), 128);
    }
}
