//! Dataset ingestion: the synthetic blob task, image folders, CIFAR binary
//! records, per-class subsampling and evaluation-time corruptions.
//!
//! Images are stored channel-first in f64, already normalized by the
//! configured per-channel mean/std; prompt composition happens in this
//! normalized space.

use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::{self, Image, Interpolation};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset {
    pub train: Dataset,
    pub eval: Dataset,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceKind {
    Synthetic,
    ImageFolder,
    CifarBinary,
}

/// Parameters of the synthetic blob task: per-class Gaussian coefficient
/// blobs rendered as low-frequency cosine textures. `margin` scales the
/// distance between class centers; `noise` the within-class spread.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub train_per_class: usize,
    pub eval_per_class: usize,
    pub image_size: usize,
    pub frequencies: usize,
    pub margin: f64,
    pub noise: f64,
    pub class_seed: u64,
    pub train_seed: u64,
    pub eval_seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        // the margin preset: comfortably separable at desk scale
        SyntheticSpec {
            classes: 4,
            train_per_class: 64,
            eval_per_class: 64,
            image_size: 32,
            frequencies: 3,
            margin: 4.0,
            noise: 0.25,
            class_seed: 99,
            train_seed: 11,
            eval_seed: 12,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorruptionKind {
    GaussianNoise,
    Blur,
    Contrast,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
pub struct DatasetSpec {
    pub source: SourceKind,
    /// Root directory for image-folder / cifar-binary sources.
    pub path: Option<PathBuf>,
    pub synthetic: SyntheticSpec,
    /// Per-class fraction of the training split to keep, in (0, 1].
    pub subset_fraction: f64,
    pub subset_seed: u64,
    /// Applied at evaluation time only.
    pub corruption: Option<CorruptionSpec>,
    pub pixel_mean: Vec<f64>,
    pub pixel_std: Vec<f64>,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            source: SourceKind::Synthetic,
            path: None,
            synthetic: SyntheticSpec::default(),
            subset_fraction: 1.0,
            subset_seed: 0,
            corruption: None,
            pixel_mean: vec![0.0, 0.0, 0.0],
            pixel_std: vec![1.0, 1.0, 1.0],
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.subset_fraction > 0.0 && self.subset_fraction <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "subset fraction must be in (0, 1], got {}",
                self.subset_fraction
            )));
        }
        if let Some(c) = &self.corruption {
            if c.severity > 5 {
                return Err(Error::InvalidConfig(format!("corruption severity {} outside 0..=5", c.severity)));
            }
        }
        if self.pixel_mean.len() != self.pixel_std.len() {
            return Err(Error::InvalidConfig("pixel mean/std length mismatch".into()));
        }
        if self.pixel_std.iter().any(|&s| s <= 0.0) {
            return Err(Error::InvalidConfig("pixel std must be positive".into()));
        }
        match self.source {
            SourceKind::Synthetic => {
                let s = &self.synthetic;
                if s.classes == 0 || s.train_per_class == 0 || s.eval_per_class == 0 || s.image_size == 0 {
                    return Err(Error::InvalidConfig("synthetic sizes must be positive".into()));
                }
                if s.frequencies == 0 {
                    return Err(Error::InvalidConfig("synthetic needs at least one basis frequency".into()));
                }
            }
            SourceKind::ImageFolder | SourceKind::CifarBinary => {
                if self.path.is_none() {
                    return Err(Error::Dataset("dataset path is required for this source".into()));
                }
            }
        }
        Ok(())
    }

    /// Loads both splits, resized to `native_size`, normalized, with the
    /// training split subsampled per `subset_fraction`.
    pub fn load(&self, native_size: usize) -> Result<SplitDataset> {
        self.validate()?;
        let mut split = match self.source {
            SourceKind::Synthetic => SplitDataset {
                train: synthetic_blobs(&self.synthetic, self.synthetic.train_per_class, self.synthetic.train_seed),
                eval: synthetic_blobs(&self.synthetic, self.synthetic.eval_per_class, self.synthetic.eval_seed),
            },
            SourceKind::ImageFolder => load_image_folder(self.path.as_ref().unwrap())?,
            SourceKind::CifarBinary => load_cifar_binary(self.path.as_ref().unwrap())?,
        };
        for ds in [&mut split.train, &mut split.eval] {
            for img in &mut ds.images {
                *img = util::resize_image(img, native_size, Interpolation::Bilinear)?;
                normalize_inplace(img, &self.pixel_mean, &self.pixel_std)?;
            }
        }
        if self.subset_fraction < 1.0 {
            split.train = subsample(&split.train, self.subset_fraction, self.subset_seed)?;
        }
        Ok(split)
    }
}

fn normalize_inplace(img: &mut Image, mean: &[f64], std: &[f64]) -> Result<()> {
    let c = img.dim().0;
    if mean.len() < c {
        return Err(Error::InvalidConfig(format!(
            "pixel mean has {} channels, image has {c}",
            mean.len()
        )));
    }
    for ch in 0..c {
        img.index_axis_mut(ndarray::Axis(0), ch)
            .mapv_inplace(|v| (v - mean[ch]) / std[ch]);
    }
    Ok(())
}

// ---- synthetic blobs -------------------------------------------------

fn cosine_basis(side: usize, freqs: usize) -> Vec<ndarray::Array2<f64>> {
    let mut planes = Vec::with_capacity(freqs * freqs);
    for fx in 0..freqs {
        for fy in 0..freqs {
            let mut p = ndarray::Array2::zeros((side, side));
            for y in 0..side {
                let by = (std::f64::consts::PI * fx as f64 * (y as f64 + 0.5) / side as f64).cos();
                for x in 0..side {
                    let bx = (std::f64::consts::PI * fy as f64 * (x as f64 + 0.5) / side as f64).cos();
                    p[[y, x]] = by * bx;
                }
            }
            planes.push(p);
        }
    }
    planes
}

/// Renders `per_class` images per class. Class centers depend only on
/// `class_seed`, so different sample seeds draw fresh examples of the *same*
/// classes.
pub fn synthetic_blobs(spec: &SyntheticSpec, per_class: usize, sample_seed: u64) -> Dataset {
    let side = spec.image_size;
    let nb = spec.frequencies * spec.frequencies;
    let basis = cosine_basis(side, spec.frequencies);

    let mut class_rng = util::seeded_rng(spec.class_seed, "blob_centers", &[]);
    let centers: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| {
            let raw = util::normal_vec(&mut class_rng, 3 * nb, 1.0);
            let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
            raw.iter().map(|v| v / norm * spec.margin).collect()
        })
        .collect();

    let mut rng = util::seeded_rng(sample_seed, "blob_samples", &[]);
    let mut images = Vec::with_capacity(spec.classes * per_class);
    let mut labels = Vec::with_capacity(spec.classes * per_class);
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..per_class {
            let eps = util::normal_vec(&mut rng, 3 * nb, spec.noise);
            let mut img = Array3::zeros((3, side, side));
            for ch in 0..3 {
                for (b, plane) in basis.iter().enumerate() {
                    let coeff = center[ch * nb + b] + eps[ch * nb + b];
                    let mut slice = img.index_axis_mut(ndarray::Axis(0), ch);
                    slice.zip_mut_with(plane, |o, &p| *o += coeff * p);
                }
            }
            img.mapv_inplace(|v: f64| 0.5 + 0.5 * v.tanh());
            images.push(img);
            labels.push(c);
        }
    }
    Dataset { images, labels, num_classes: spec.classes }
}

// ---- image folder ----------------------------------------------------

fn load_split_dir(dir: &Path) -> Result<Dataset> {
    let mut class_dirs: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::Dataset(format!("cannot read {}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(Error::Dataset(format!("no class directories under {}", dir.display())));
    }
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (c, cd) in class_dirs.iter().enumerate() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(cd)
            .map_err(|e| Error::Dataset(format!("cannot read {}: {e}", cd.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
                    .unwrap_or(false)
            })
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::Dataset(format!("class directory {} is empty", cd.display())));
        }
        for f in files {
            let img = image::open(&f).map_err(|e| Error::Dataset(format!("{}: {e}", f.display())))?;
            let rgb = img.to_rgb8();
            let (w, h) = rgb.dimensions();
            let mut arr = Array3::zeros((3, h as usize, w as usize));
            for (x, y, px) in rgb.enumerate_pixels() {
                for ch in 0..3 {
                    arr[[ch, y as usize, x as usize]] = px.0[ch] as f64 / 255.0;
                }
            }
            images.push(arr);
            labels.push(c);
        }
    }
    let num_classes = class_dirs.len();
    Ok(Dataset { images, labels, num_classes })
}

/// `root/train/<class>/*.png` plus optional `root/val/...`; evaluation falls
/// back to the training split when no val directory exists.
pub fn load_image_folder(root: &Path) -> Result<SplitDataset> {
    if !root.exists() {
        return Err(Error::Dataset(format!("dataset path {} does not exist", root.display())));
    }
    let train_dir = root.join("train");
    let train = if train_dir.is_dir() { load_split_dir(&train_dir)? } else { load_split_dir(root)? };
    let val_dir = root.join("val");
    let eval = if val_dir.is_dir() { load_split_dir(&val_dir)? } else { train.clone() };
    if eval.num_classes != train.num_classes {
        return Err(Error::Dataset(format!(
            "train has {} classes but val has {}",
            train.num_classes, eval.num_classes
        )));
    }
    Ok(SplitDataset { train, eval })
}

// ---- CIFAR binary ----------------------------------------------------

const CIFAR_RECORD: usize = 3073; // label byte + 3 * 1024 pixels
const CIFAR_SIDE: usize = 32;

fn read_cifar_file(path: &Path) -> Result<(Vec<Image>, Vec<usize>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Dataset(format!(
            "{} is not a multiple of the {CIFAR_RECORD}-byte record size",
            path.display()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for r in 0..n {
        let rec = &bytes[r * CIFAR_RECORD..(r + 1) * CIFAR_RECORD];
        labels.push(rec[0] as usize);
        let mut img = Array3::zeros((3, CIFAR_SIDE, CIFAR_SIDE));
        for ch in 0..3 {
            for y in 0..CIFAR_SIDE {
                for x in 0..CIFAR_SIDE {
                    img[[ch, y, x]] = rec[1 + ch * 1024 + y * CIFAR_SIDE + x] as f64 / 255.0;
                }
            }
        }
        images.push(img);
    }
    Ok((images, labels))
}

/// Standard layout: `data_batch_*.bin` for training, `test_batch.bin` for
/// evaluation.
pub fn load_cifar_binary(root: &Path) -> Result<SplitDataset> {
    if !root.exists() {
        return Err(Error::Dataset(format!("dataset path {} does not exist", root.display())));
    }
    let mut train_files: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|e| Error::Dataset(format!("cannot read {}: {e}", root.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .map(|n| n.starts_with("data_batch") && n.ends_with(".bin"))
                .unwrap_or(false)
        })
        .collect();
    train_files.sort();
    if train_files.is_empty() {
        return Err(Error::Dataset(format!("no data_batch_*.bin under {}", root.display())));
    }
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for f in &train_files {
        let (mut i, mut l) = read_cifar_file(f)?;
        images.append(&mut i);
        labels.append(&mut l);
    }
    let num_classes = labels.iter().copied().max().unwrap_or(0) + 1;
    let train = Dataset { images, labels, num_classes };

    let test_path = root.join("test_batch.bin");
    let eval = if test_path.exists() {
        let (images, labels) = read_cifar_file(&test_path)?;
        Dataset { images, labels, num_classes }
    } else {
        train.clone()
    };
    Ok(SplitDataset { train, eval })
}

// ---- subsampling -----------------------------------------------------

/// Keeps `ceil(fraction * n_c)` seeded picks per class, without replacement.
pub fn subsample(dataset: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidConfig(format!("subset fraction must be in (0, 1], got {fraction}")));
    }
    if fraction == 1.0 {
        return Ok(dataset.clone());
    }
    let mut keep: Vec<usize> = Vec::new();
    for c in 0..dataset.num_classes {
        let mut idx: Vec<usize> = (0..dataset.len()).filter(|&i| dataset.labels[i] == c).collect();
        let m = ((fraction * idx.len() as f64).ceil() as usize).min(idx.len());
        let mut rng = util::seeded_rng(seed, "subsample", &[c as u64]);
        for i in 0..m {
            let j = i + rng.random_range(0..idx.len() - i);
            idx.swap(i, j);
        }
        let mut chosen = idx[..m].to_vec();
        chosen.sort_unstable();
        keep.extend(chosen);
    }
    keep.sort_unstable();
    Ok(Dataset {
        images: keep.iter().map(|&i| dataset.images[i].clone()).collect(),
        labels: keep.iter().map(|&i| dataset.labels[i]).collect(),
        num_classes: dataset.num_classes,
    })
}

// ---- corruptions -----------------------------------------------------

/// Noise standard deviation per severity (pixel units).
pub const NOISE_SIGMA: [f64; 6] = [0.0, 0.04, 0.08, 0.12, 0.18, 0.26];
/// Gaussian blur sigma per severity.
pub const BLUR_SIGMA: [f64; 6] = [0.0, 0.4, 0.8, 1.2, 1.6, 2.0];
/// Contrast retention factor per severity (1 = unchanged).
pub const CONTRAST_FACTOR: [f64; 6] = [1.0, 0.75, 0.6, 0.45, 0.3, 0.15];

/// Applies one corruption at the given severity; severity 0 is the identity
/// for every kind. Deterministic under `seed`.
pub fn corrupt(image: &Image, kind: CorruptionKind, severity: u8, seed: u64) -> Result<Image> {
    if severity > 5 {
        return Err(Error::InvalidConfig(format!("severity {severity} outside 0..=5")));
    }
    if severity == 0 {
        return Ok(image.clone());
    }
    let s = severity as usize;
    Ok(match kind {
        CorruptionKind::GaussianNoise => {
            let mut rng = util::seeded_rng(seed, "corrupt_noise", &[]);
            let mut out = image.clone();
            let sigma = NOISE_SIGMA[s];
            out.mapv_inplace(|v| {
                let z: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng);
                v + sigma * z
            });
            out
        }
        CorruptionKind::Blur => gaussian_blur(image, BLUR_SIGMA[s]),
        CorruptionKind::Contrast => {
            let f = CONTRAST_FACTOR[s];
            let (c, _, _) = image.dim();
            let mut out = image.clone();
            for ch in 0..c {
                let mut plane = out.index_axis_mut(ndarray::Axis(0), ch);
                let mean = plane.sum() / plane.len() as f64;
                plane.mapv_inplace(|v| mean + f * (v - mean));
            }
            out
        }
    })
}

fn gaussian_blur(image: &Image, sigma: f64) -> Image {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    for i in -radius..=radius {
        kernel.push((-(i as f64 * i as f64) / (2.0 * sigma * sigma)).exp());
    }
    let sum: f64 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= sum;
    }
    let (c, h, w) = image.dim();
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    // horizontal then vertical pass, edge-clamped
    let mut tmp = Image::zeros((c, h, w));
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, k) in kernel.iter().enumerate() {
                    let sx = clamp(x as isize + ki as isize - radius, w);
                    acc += k * image[[ch, y, sx]];
                }
                tmp[[ch, y, x]] = acc;
            }
        }
    }
    let mut out = Image::zeros((c, h, w));
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, k) in kernel.iter().enumerate() {
                    let sy = clamp(y as isize + ki as isize - radius, h);
                    acc += k * tmp[[ch, sy, x]];
                }
                out[[ch, y, x]] = acc;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blob_spec() -> SyntheticSpec {
        SyntheticSpec { classes: 3, train_per_class: 5, eval_per_class: 4, image_size: 8, ..Default::default() }
    }

    #[test]
    fn synthetic_counts_and_determinism() {
        let spec = blob_spec();
        let a = synthetic_blobs(&spec, 5, 1);
        let b = synthetic_blobs(&spec, 5, 1);
        assert_eq!(a.len(), 15);
        assert_eq!(a.num_classes, 3);
        assert_eq!(a.images, b.images);
        let c = synthetic_blobs(&spec, 5, 2);
        assert_ne!(a.images, c.images);
    }

    #[test]
    fn synthetic_pixels_in_unit_interval() {
        let ds = synthetic_blobs(&blob_spec(), 3, 7);
        for img in &ds.images {
            for &v in img.iter() {
                assert!((0.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn subsample_full_fraction_is_identity() {
        let ds = synthetic_blobs(&blob_spec(), 5, 1);
        let out = subsample(&ds, 1.0, 3).unwrap();
        assert_eq!(out, ds);
    }

    #[test]
    fn subsample_counts_per_class() {
        let spec = SyntheticSpec { classes: 2, ..blob_spec() };
        let ds = synthetic_blobs(&spec, 100, 1);
        let out = subsample(&ds, 0.1, 5).unwrap();
        for c in 0..2 {
            let n = out.labels.iter().filter(|&&l| l == c).count();
            assert_eq!(n, 10);
        }
    }

    #[test]
    fn subsample_seeds_differ_but_counts_match() {
        let ds = synthetic_blobs(&blob_spec(), 5, 1);
        let a = subsample(&ds, 0.5, 1).unwrap();
        let b = subsample(&ds, 0.5, 2).unwrap();
        assert_eq!(a.len(), b.len());
        assert_ne!(a.images, b.images);
        assert_eq!(a.images, subsample(&ds, 0.5, 1).unwrap().images);
    }

    #[test]
    fn subsample_rejects_bad_fraction() {
        let ds = synthetic_blobs(&blob_spec(), 2, 1);
        assert!(subsample(&ds, 0.0, 0).is_err());
        assert!(subsample(&ds, -0.5, 0).is_err());
    }

    #[test]
    fn corruption_severity_zero_is_identity() {
        let ds = synthetic_blobs(&blob_spec(), 1, 1);
        for kind in [CorruptionKind::GaussianNoise, CorruptionKind::Blur, CorruptionKind::Contrast] {
            let out = corrupt(&ds.images[0], kind, 0, 9).unwrap();
            assert_eq!(out, ds.images[0]);
        }
    }

    #[test]
    fn noise_sigma_matches_table() {
        let img = Array3::zeros((3, 64, 64)); // > 10^4 pixels
        for severity in 1..=5u8 {
            let out = corrupt(&img, CorruptionKind::GaussianNoise, severity, 4).unwrap();
            let n = out.len() as f64;
            let mean = out.sum() / n;
            let var = out.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let sigma = var.sqrt();
            let expect = NOISE_SIGMA[severity as usize];
            assert!(
                (sigma - expect).abs() / expect < 0.05,
                "severity {severity}: measured {sigma}, table {expect}"
            );
        }
    }

    #[test]
    fn blur_preserves_constant_images() {
        let img = Array3::from_elem((3, 16, 16), 0.37);
        let out = corrupt(&img, CorruptionKind::Blur, 3, 0).unwrap();
        for &v in out.iter() {
            assert!((v - 0.37).abs() < 1e-12);
        }
    }

    #[test]
    fn corruption_deterministic_under_seed() {
        let ds = synthetic_blobs(&blob_spec(), 1, 1);
        let a = corrupt(&ds.images[0], CorruptionKind::GaussianNoise, 3, 5).unwrap();
        let b = corrupt(&ds.images[0], CorruptionKind::GaussianNoise, 3, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn missing_paths_are_dataset_errors() {
        let spec = DatasetSpec {
            source: SourceKind::ImageFolder,
            path: Some(PathBuf::from("/nonexistent/nowhere")),
            ..Default::default()
        };
        assert!(matches!(spec.load(32), Err(Error::Dataset(_))));
        let spec = DatasetSpec { source: SourceKind::CifarBinary, path: None, ..Default::default() };
        assert!(matches!(spec.load(32), Err(Error::Dataset(_))));
    }

    #[test]
    fn cifar_record_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        // two records: labels 1 and 0, constant pixel planes
        let mut bytes = Vec::new();
        for (label, val) in [(1u8, 255u8), (0u8, 128u8)] {
            bytes.push(label);
            bytes.extend(std::iter::repeat_n(val, 3072));
        }
        std::fs::write(dir.path().join("data_batch_1.bin"), &bytes).unwrap();
        let split = load_cifar_binary(dir.path()).unwrap();
        assert_eq!(split.train.len(), 2);
        assert_eq!(split.train.labels, vec![1, 0]);
        assert!((split.train.images[0][[0, 0, 0]] - 1.0).abs() < 1e-12);
        assert!((split.train.images[1][[2, 31, 31]] - 128.0 / 255.0).abs() < 1e-12);
        // falls back to train when no test batch exists
        assert_eq!(split.eval.len(), 2);
    }
}
