//! Two-class image directories to normalised, split and batched tensors.
//!
//! Class indices follow the lexicographic order of the class directory
//! names. Images are converted to luminance, resized with half-pixel-centre
//! bilinear sampling and scaled to `[0, 1]`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::DynamicImage;
use log::{info, warn};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding::{shuffle_rng, stream_rng};
use crate::tensor::Tensor;

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `H×W×1`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    pub label: usize,
    pub source_path: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub class_names: Vec<String>,
    /// Files that could not be decoded and were left out.
    pub skipped: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    /// Samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            class_names: self.class_names.clone(),
            skipped: 0,
        }
    }
}

/// Single-channel image with real-valued pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Plane {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::data(format!("image has zero extent {width}x{height}")));
        }
        if data.len() != width * height {
            return Err(Error::data(format!(
                "{width}x{height} image needs {} pixels, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Plane {
            width,
            height,
            data,
        })
    }

    pub fn at(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }
}

/// Collapses interleaved 8-bit pixels to luminance. One channel is kept
/// as-is, two channels are luma plus alpha, three or four use
/// `0.299R + 0.587G + 0.114B` with any alpha ignored.
pub fn to_grayscale(pixels: &[u8], width: usize, height: usize, channels: usize) -> Result<Plane> {
    if !(1..=4).contains(&channels) {
        return Err(Error::data(format!("unsupported channel count {channels}")));
    }
    if pixels.len() != width * height * channels {
        return Err(Error::data(format!(
            "{width}x{height}x{channels} image needs {} bytes, got {}",
            width * height * channels,
            pixels.len()
        )));
    }
    let data = pixels
        .chunks(channels)
        .map(|px| match channels {
            1 | 2 => px[0] as f32,
            _ => 0.299 * px[0] as f32 + 0.587 * px[1] as f32 + 0.114 * px[2] as f32,
        })
        .collect();
    Plane::new(width, height, data)
}

/// Bilinear resampling with half-pixel centres: source coordinate
/// `(dst + 0.5)·(in/out) − 0.5`, clamped to the image.
pub fn resize_bilinear(image: &Plane, target: usize) -> Result<Plane> {
    if target == 0 {
        return Err(Error::data("resize target must be positive"));
    }
    let axis = |n_in: usize| -> Vec<(usize, usize, f64)> {
        let scale = n_in as f64 / target as f64;
        (0..target)
            .map(|d| {
                let src = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(n_in - 1);
                (lo, hi, src - lo as f64)
            })
            .collect()
    };
    let xs = axis(image.width);
    let ys = axis(image.height);
    let mut out = Vec::with_capacity(target * target);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = image.at(x0, y0) as f64 * (1.0 - fx) + image.at(x1, y0) as f64 * fx;
            let bottom = image.at(x0, y1) as f64 * (1.0 - fx) + image.at(x1, y1) as f64 * fx;
            out.push((top * (1.0 - fy) + bottom * fy) as f32);
        }
    }
    Plane::new(target, target, out)
}

/// Maps an 8-bit intensity to `[0, 1]`.
pub fn normalize(value: f32) -> f32 {
    value / 255.0
}

fn decoded_to_plane(img: &DynamicImage) -> Result<Plane> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img {
        DynamicImage::ImageLuma8(b) => to_grayscale(b.as_raw(), w, h, 1),
        DynamicImage::ImageLumaA8(b) => to_grayscale(b.as_raw(), w, h, 2),
        DynamicImage::ImageRgb8(b) => to_grayscale(b.as_raw(), w, h, 3),
        DynamicImage::ImageRgba8(b) => to_grayscale(b.as_raw(), w, h, 4),
        DynamicImage::ImageLuma16(_) | DynamicImage::ImageLumaA16(_) => {
            to_grayscale(img.to_luma8().as_raw(), w, h, 1)
        }
        _ => to_grayscale(img.to_rgba8().as_raw(), w, h, 4),
    }
}

/// Grayscale, resize to `size×size`, normalise: returns an `S×S×1` tensor.
pub fn preprocess(img: &DynamicImage, size: usize) -> Result<Tensor<f32>> {
    let plane = resize_bilinear(&decoded_to_plane(img)?, size)?;
    let data = plane.data.iter().map(|&v| normalize(v).clamp(0.0, 1.0)).collect();
    Tensor::new(vec![size, size, 1], data)
}

pub fn load_image(path: &Path, size: usize) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|e| Error::data(format!("cannot decode {}: {e}", path.display())))?;
    preprocess(&img, size)
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    out.sort();
    Ok(out)
}

/// The two class directories under `root`, sorted by name.
pub fn class_dirs(root: &Path) -> Result<Vec<(String, PathBuf)>> {
    if !root.is_dir() {
        return Err(Error::Layout(format!("{} is not a directory", root.display())));
    }
    let dirs: Vec<(String, PathBuf)> = sorted_entries(root)?
        .into_iter()
        .filter(|p| p.is_dir())
        .filter_map(|p| {
            let name = p.file_name()?.to_str()?.to_owned();
            (!name.starts_with('.')).then_some((name, p))
        })
        .collect();
    if dirs.len() != 2 {
        return Err(Error::Layout(format!(
            "{} must contain exactly two class directories, found {}: {:?}",
            root.display(),
            dirs.len(),
            dirs.iter().map(|(n, _)| n).collect::<Vec<_>>()
        )));
    }
    Ok(dirs)
}

/// Class names plus every image path with its label.
pub type ClassImages = (Vec<String>, Vec<(PathBuf, usize)>);

/// Image files of every class, labelled by class-directory order.
pub fn list_images(root: &Path) -> Result<ClassImages> {
    let dirs = class_dirs(root)?;
    let mut files = Vec::new();
    for (label, (_, dir)) in dirs.iter().enumerate() {
        files.extend(
            sorted_entries(dir)?
                .into_iter()
                .filter(|p| p.is_file() && is_image(p))
                .map(|p| (p, label)),
        );
    }
    Ok((dirs.into_iter().map(|(n, _)| n).collect(), files))
}

/// Decodes `files` in parallel; order is preserved and failures are
/// skipped with a warning.
pub fn load_samples(files: &[(PathBuf, usize)], size: usize) -> (Vec<Sample>, usize) {
    let decoded: Vec<Option<Sample>> = files
        .par_iter()
        .map(|(path, label)| match load_image(path, size) {
            Ok(image) => Some(Sample {
                image,
                label: *label,
                source_path: path.clone(),
            }),
            Err(e) => {
                warn!("skipping {}: {e}", path.display());
                None
            }
        })
        .collect();
    let skipped = decoded.iter().filter(|s| s.is_none()).count();
    (decoded.into_iter().flatten().collect(), skipped)
}

pub fn load_dataset(root: &Path, size: usize) -> Result<Dataset> {
    let (class_names, files) = list_images(root)?;
    let (samples, skipped) = load_samples(&files, size);
    let ds = Dataset {
        samples,
        class_names,
        skipped,
    };
    if skipped > 0 {
        warn!("{skipped} undecodable file(s) skipped under {}", root.display());
    }
    for (name, count) in ds.class_names.iter().zip(ds.class_counts()) {
        if count == 0 {
            return Err(Error::data(format!("class {name} has no usable images")));
        }
        info!("class {name}: {count} images");
    }
    Ok(ds)
}

/// Fraction of every class sent to the training side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub train_fraction: f64,
    #[serde(default)]
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(train_fraction: f64, seed: u64) -> Result<Self> {
        let s = SplitSpec {
            train_fraction,
            seed,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::config(format!(
                "train_fraction {} must lie strictly between 0 and 1",
                self.train_fraction
            )));
        }
        Ok(())
    }
}

/// `round(n · fraction)` with halves rounded up. The small offset absorbs
/// binary representation error, e.g. `5 · 0.7 = 3.4999…` rounds to 4.
pub fn round_half_up(n: usize, fraction: f64) -> usize {
    (n as f64 * fraction + 0.5 + 1e-9).floor() as usize
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Per class: shuffle with the seed, send the first
/// `round_half_up(n_class · fraction)` to train and the rest to test. Both
/// index lists come back sorted.
pub fn stratified_split_indices(labels: &[usize], num_classes: usize, spec: &SplitSpec) -> Result<SplitIndices> {
    spec.validate()?;
    let mut by_class: BTreeMap<usize, Vec<usize>> = (0..num_classes).map(|c| (c, Vec::new())).collect();
    for (i, &l) in labels.iter().enumerate() {
        by_class
            .get_mut(&l)
            .ok_or_else(|| Error::data(format!("label {l} out of range for {num_classes} classes")))?
            .push(i);
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (class, mut members) in by_class {
        let n = members.len();
        if n == 0 {
            return Err(Error::data(format!("class {class} is empty")));
        }
        let n_train = round_half_up(n, spec.train_fraction);
        if n_train == 0 || n_train == n {
            return Err(Error::config(format!(
                "train fraction {} leaves class {class} ({n} samples) with an empty {} side",
                spec.train_fraction,
                if n_train == 0 { "train" } else { "test" }
            )));
        }
        members.shuffle(&mut stream_rng(spec.seed, class as u64));
        train.extend_from_slice(&members[..n_train]);
        test.extend_from_slice(&members[n_train..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(SplitIndices { train, test })
}

pub fn stratified_split(dataset: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset)> {
    let idx = stratified_split_indices(&dataset.labels(), dataset.num_classes(), spec)?;
    Ok((dataset.subset(&idx.train), dataset.subset(&idx.test)))
}

/// Index batches for one epoch: a shuffle keyed by `(seed, epoch)`, cut into
/// runs of `batch_size` with a possibly shorter final batch.
pub fn batches(len: usize, batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::config("batch_size must be at least 1"));
    }
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut shuffle_rng(seed, epoch));
    Ok(order.chunks(batch_size).map(|c| c.to_vec()).collect())
}

/// Stacks the images of `samples[indices]` into a `B×H×W×1` batch.
pub fn collate(samples: &[Sample], indices: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
    let images: Vec<Tensor<f32>> = indices.iter().map(|&i| samples[i].image.clone()).collect();
    let labels = indices.iter().map(|&i| samples[i].label).collect();
    Ok((Tensor::stack(&images)?, labels))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitSide {
    Train,
    Test,
}

/// One `path,label,split` record of a frozen split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: usize,
    pub split: SplitSide,
}

/// Manifest records in dataset order.
pub fn manifest_entries(files: &[(PathBuf, usize)], split: &SplitIndices) -> Vec<ManifestEntry> {
    let mut side = vec![SplitSide::Test; files.len()];
    for &i in &split.train {
        side[i] = SplitSide::Train;
    }
    files
        .iter()
        .zip(side)
        .map(|((path, label), split)| ManifestEntry {
            path: path.clone(),
            label: *label,
            split,
        })
        .collect()
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
    for e in entries {
        w.serialize(e)
            .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .enumerate()
        .map(|(i, rec)| rec.map_err(|e| Error::Manifest(format!("{} line {}: {e}", path.display(), i + 1))))
        .collect()
}
