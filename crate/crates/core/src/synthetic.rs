//! Seeded two-class toy images for smoke tests and overfit checks.
//!
//! Class 0 (`blob`) is a bright Gaussian spot near the centre, class 1
//! (`stripes`) is a pattern of horizontal bands. Both carry Gaussian pixel
//! noise and are quantised to 8 bits, so in-memory samples equal what the
//! loader reads back from the PNGs written by [`write_png_dataset`].

use std::path::{Path, PathBuf};

use image::GrayImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{normalize, Dataset, Sample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CLASS_NAMES: [&str; 2] = ["blob", "stripes"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub per_class: usize,
    pub size: usize,
    pub seed: u64,
    /// Standard deviation of the additive noise, in 8-bit intensity units.
    pub noise: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            per_class: 20,
            size: 32,
            seed: 0,
            noise: 12.0,
        }
    }
}

fn blob(size: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let (cx, cy) = (c + rng.random_range(-1.5..1.5), c + rng.random_range(-1.5..1.5));
    let sigma = size as f64 / 6.0 * rng.random_range(0.85..1.15);
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let r2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
            out.push(40.0 + 190.0 * (-r2 / (2.0 * sigma * sigma)).exp());
        }
    }
    out
}

fn stripes(size: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let period = rng.random_range(4..=6);
    let phase = rng.random_range(0..period);
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        let on = (y + phase) % period < period / 2;
        out.extend(std::iter::repeat_n(if on { 200.0 } else { 40.0 }, size));
    }
    out
}

/// 8-bit pixels of every image, class 0 first, with their labels.
pub fn generate_pixels(spec: &SyntheticSpec) -> Result<Vec<(Vec<u8>, usize)>> {
    if spec.per_class == 0 || spec.size == 0 {
        return Err(Error::config("synthetic set needs per_class > 0 and size > 0"));
    }
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::config(format!("noise: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(2 * spec.per_class);
    for label in 0..2 {
        for _ in 0..spec.per_class {
            let clean = if label == 0 { blob(spec.size, &mut rng) } else { stripes(spec.size, &mut rng) };
            let pixels = clean
                .into_iter()
                .map(|v| (v + noise.sample(&mut rng)).round().clamp(0.0, 255.0) as u8)
                .collect();
            out.push((pixels, label));
        }
    }
    Ok(out)
}

fn file_name(label: usize, index: usize) -> PathBuf {
    PathBuf::from(CLASS_NAMES[label]).join(format!("{index:04}.png"))
}

pub fn generate(spec: &SyntheticSpec) -> Dataset {
    let pixels = generate_pixels(spec).expect("valid synthetic spec");
    let samples = pixels
        .into_iter()
        .enumerate()
        .map(|(i, (px, label))| Sample {
            image: Tensor::new(
                vec![spec.size, spec.size, 1],
                px.iter().map(|&v| normalize(v as f32)).collect(),
            )
            .expect("size×size pixels"),
            label,
            source_path: file_name(label, i % spec.per_class),
        })
        .collect();
    Dataset {
        samples,
        class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        skipped: 0,
    }
}

/// Writes `root/blob/NNNN.png` and `root/stripes/NNNN.png`.
pub fn write_png_dataset(root: &Path, spec: &SyntheticSpec) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for name in CLASS_NAMES {
        let dir = root.join(name);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    for (i, (px, label)) in generate_pixels(spec)?.into_iter().enumerate() {
        let path = root.join(file_name(label, i % spec.per_class));
        let img = GrayImage::from_raw(spec.size as u32, spec.size as u32, px).expect("size×size pixels");
        img.save(&path)
            .map_err(|e| Error::io(&path, std::io::Error::other(e.to_string())))?;
        written.push(path);
    }
    Ok(written)
}
