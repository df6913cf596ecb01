//! Image corpora: CIFAR binary records, a raw tensor container, preprocessing,
//! pad-and-crop augmentation and synthetic datasets.
//!
//! # Raw tensor container
//!
//! All integers little-endian.
//!
//! | offset | size | field |
//! |---|---|---|
//! | 0 | 8 | magic `CRMNRAW1` |
//! | 8 | 4 | `n`, image count |
//! | 12 | 4 | `c`, channels (must be 3) |
//! | 16 | 4 | `h` |
//! | 20 | 4 | `w` (must equal `h`) |
//! | 24 | 1 | label width in bytes: 1, 2 or 4 |
//! | 25 | 3 | reserved, zero |
//! | 28 | 4 | class count |
//! | 32 | `n·lw` | labels |
//! | ... | `n·c·h·w` | pixel bytes, image-major then channel, row, column |
//!
//! Pixels are scaled by 1/255 exactly as CIFAR records are.

use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::init;
use crate::tensor::Tensor;

pub const RAW_MAGIC: &[u8; 8] = b"CRMNRAW1";
pub const RAW_HEADER_LEN: usize = 32;
pub const CIFAR_EXTENT: usize = 32;
const CIFAR_PIXELS: usize = 3 * CIFAR_EXTENT * CIFAR_EXTENT;

/// Fraction of a training pool held out for validation.
pub const VALIDATION_FRACTION: f64 = 0.1;

/// Per-image standard-deviation floor of global contrast normalization is
/// `sqrt(GCN_VARIANCE_FLOOR)`.
pub const GCN_VARIANCE_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CifarVariant {
    C10,
    C100,
}

impl CifarVariant {
    pub fn label_bytes(self) -> usize {
        match self {
            CifarVariant::C10 => 1,
            CifarVariant::C100 => 2,
        }
    }

    pub fn classes(self) -> usize {
        match self {
            CifarVariant::C10 => 10,
            CifarVariant::C100 => 100,
        }
    }

    pub fn record_len(self) -> usize {
        self.label_bytes() + CIFAR_PIXELS
    }
}

impl std::str::FromStr for CifarVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "c10" | "cifar10" => Ok(CifarVariant::C10),
            "c100" | "cifar100" => Ok(CifarVariant::C100),
            _ => Err(Error::Input(format!("unknown CIFAR variant {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizeMode {
    MeanPixel,
    Gcn,
}

impl std::str::FromStr for NormalizeMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean_pixel" | "mean-pixel" => Ok(NormalizeMode::MeanPixel),
            "gcn" => Ok(NormalizeMode::Gcn),
            _ => Err(Error::Input(format!("unknown normalization {s:?}"))),
        }
    }
}

/// Everything done to raw pixel bytes, recorded so a dataset can be
/// re-derived from its source file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessManifest {
    /// Multiplier applied to each pixel byte.
    pub pixel_scale: f64,
    pub normalization: Option<NormalizeMode>,
    /// Training-split mean image `[3×E×E]` for mean-pixel subtraction.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_image: Option<Vec<f32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gcn_variance_floor: Option<f64>,
}

impl Default for PreprocessManifest {
    fn default() -> Self {
        PreprocessManifest {
            pixel_scale: 1.0 / 255.0,
            normalization: None,
            mean_image: None,
            gcn_variance_floor: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageDataset {
    /// `[N×3×E×E]`.
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
    pub preprocessing: PreprocessManifest,
}

impl ImageDataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        let ds = ImageDataset {
            images,
            labels,
            classes,
            split,
            preprocessing: PreprocessManifest::default(),
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        match *self.images.shape() {
            [n, 3, h, w] if h == w && n == self.labels.len() => {}
            _ => return Err(Error::dim("dataset", self.images.shape(), &[self.labels.len(), 3])),
        }
        if let Some((i, &l)) = self.labels.iter().enumerate().find(|(_, &l)| l >= self.classes) {
            return Err(Error::Input(format!(
                "label {l} of image {i} is outside {} classes",
                self.classes
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn extent(&self) -> usize {
        self.images.shape()[2]
    }

    fn image_len(&self) -> usize {
        self.images.shape()[1..].iter().product()
    }

    /// Images and labels at `indices`, in that order.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
        let images = self.images.gather_rows(indices)?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((images, labels))
    }

    pub fn subset(&self, indices: &[usize], split: Split) -> Result<Self> {
        let (images, labels) = self.batch(indices)?;
        Ok(ImageDataset {
            images,
            labels,
            classes: self.classes,
            split,
            preprocessing: self.preprocessing.clone(),
        })
    }

    /// Concatenates datasets of identical image shape, e.g. the five CIFAR-10
    /// training files.
    pub fn concat(parts: Vec<ImageDataset>) -> Result<Self> {
        let mut iter = parts.into_iter();
        let first = iter
            .next()
            .ok_or_else(|| Error::Input("no datasets to concatenate".into()))?;
        let inner = first.images.shape()[1..].to_vec();
        let mut data = first.images.into_data();
        let mut labels = first.labels;
        let mut classes = first.classes;
        for p in iter {
            if p.images.shape()[1..] != inner[..] {
                return Err(Error::dim("concat", &inner, &p.images.shape()[1..]));
            }
            classes = classes.max(p.classes);
            data.extend_from_slice(p.images.data());
            labels.extend_from_slice(&p.labels);
        }
        let mut shape = vec![labels.len()];
        shape.extend_from_slice(&inner);
        ImageDataset::new(Tensor::new(&shape, data)?, labels, classes, first.split)
    }

    /// Label count of the most frequent class divided by the dataset size.
    pub fn majority_fraction(&self) -> f64 {
        let mut counts = vec![0usize; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts.into_iter().max().unwrap_or(0) as f64 / self.len().max(1) as f64
    }

    /// SHA-256 over labels (u32 LE) and pixel values (f32 LE), hex encoded.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for &l in &self.labels {
            h.update((l as u32).to_le_bytes());
        }
        for &v in self.images.data() {
            h.update(v.to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Parses CIFAR records. CIFAR-100 records carry a coarse and a fine label;
/// the fine label is used.
pub fn parse_cifar(bytes: &[u8], variant: CifarVariant, split: Split) -> Result<ImageDataset> {
    let rec = variant.record_len();
    if bytes.is_empty() {
        return Err(Error::format(0, "empty CIFAR file"));
    }
    if !bytes.len().is_multiple_of(rec) {
        let whole = bytes.len() / rec * rec;
        return Err(Error::format(
            whole as u64,
            format!("truncated record: {} trailing bytes, records are {rec} bytes", bytes.len() - whole),
        ));
    }
    let n = bytes.len() / rec;
    let mut images = Vec::with_capacity(n * CIFAR_PIXELS);
    let mut labels = Vec::with_capacity(n);
    for (i, r) in bytes.chunks_exact(rec).enumerate() {
        let label = r[variant.label_bytes() - 1] as usize;
        if label >= variant.classes() {
            let offset = (i * rec + variant.label_bytes() - 1) as u64;
            return Err(Error::format(offset, format!("label {label} out of range")));
        }
        labels.push(label);
        images.extend(r[variant.label_bytes()..].iter().map(|&b| b as f32 / 255.0));
    }
    let images = Tensor::new(&[n, 3, CIFAR_EXTENT, CIFAR_EXTENT], images)?;
    ImageDataset::new(images, labels, variant.classes(), split)
}

pub fn load_cifar_binary(path: &Path, variant: CifarVariant, split: Split) -> Result<ImageDataset> {
    parse_cifar(&std::fs::read(path)?, variant, split)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RawHeader {
    pub n: u32,
    pub channels: u32,
    pub height: u32,
    pub width: u32,
    pub label_width: u8,
    pub classes: u32,
}

impl RawHeader {
    pub fn to_bytes(&self) -> [u8; RAW_HEADER_LEN] {
        let mut b = [0u8; RAW_HEADER_LEN];
        b[..8].copy_from_slice(RAW_MAGIC);
        b[8..12].copy_from_slice(&self.n.to_le_bytes());
        b[12..16].copy_from_slice(&self.channels.to_le_bytes());
        b[16..20].copy_from_slice(&self.height.to_le_bytes());
        b[20..24].copy_from_slice(&self.width.to_le_bytes());
        b[24] = self.label_width;
        b[28..32].copy_from_slice(&self.classes.to_le_bytes());
        b
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < RAW_HEADER_LEN {
            return Err(Error::format(bytes.len() as u64, "header shorter than 32 bytes"));
        }
        if &bytes[..8] != RAW_MAGIC {
            return Err(Error::format(0, "bad magic"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        let h = RawHeader {
            n: u32_at(8),
            channels: u32_at(12),
            height: u32_at(16),
            width: u32_at(20),
            label_width: bytes[24],
            classes: u32_at(28),
        };
        if bytes[25..28] != [0, 0, 0] {
            return Err(Error::format(25, "reserved bytes must be zero"));
        }
        if h.channels != 3 {
            return Err(Error::format(12, format!("expected 3 channels, got {}", h.channels)));
        }
        if h.height == 0 || h.height != h.width {
            return Err(Error::format(16, format!("images must be square, got {}x{}", h.height, h.width)));
        }
        if !matches!(h.label_width, 1 | 2 | 4) {
            return Err(Error::format(24, format!("label width {} not in {{1, 2, 4}}", h.label_width)));
        }
        if h.classes == 0 {
            return Err(Error::format(28, "class count is zero"));
        }
        Ok(h)
    }

    fn pixels_per_image(&self) -> u64 {
        self.channels as u64 * self.height as u64 * self.width as u64
    }

    /// Total file length the header implies.
    pub fn file_len(&self) -> u64 {
        RAW_HEADER_LEN as u64 + self.n as u64 * (self.label_width as u64 + self.pixels_per_image())
    }
}

/// Parses a raw tensor container.
pub fn parse_raw(bytes: &[u8], split: Split) -> Result<ImageDataset> {
    let h = RawHeader::parse(bytes)?;
    let expected = h.file_len();
    if bytes.len() as u64 != expected {
        return Err(Error::format(
            bytes.len().min(expected as usize) as u64,
            format!("header implies {expected} bytes, file has {}", bytes.len()),
        ));
    }
    let n = h.n as usize;
    let lw = h.label_width as usize;
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let off = RAW_HEADER_LEN + i * lw;
        let mut buf = [0u8; 4];
        buf[..lw].copy_from_slice(&bytes[off..off + lw]);
        let label = u32::from_le_bytes(buf);
        if label >= h.classes {
            return Err(Error::format(off as u64, format!("label {label} outside {} classes", h.classes)));
        }
        labels.push(label as usize);
    }
    let pix = &bytes[RAW_HEADER_LEN + n * lw..];
    let images = pix.iter().map(|&b| b as f32 / 255.0).collect();
    let e = h.height as usize;
    let images = Tensor::new(&[n, 3, e, e], images)?;
    ImageDataset::new(images, labels, h.classes as usize, split)
}

pub fn load_raw(path: &Path, split: Split) -> Result<ImageDataset> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_raw(&bytes, split)
}

/// Serialises labels and pixel bytes (`[N×3×E×E]`) into a raw container.
pub fn encode_raw(labels: &[u32], pixels: &[u8], extent: u32, classes: u32, label_width: u8) -> Result<Vec<u8>> {
    let h = RawHeader {
        n: labels.len() as u32,
        channels: 3,
        height: extent,
        width: extent,
        label_width,
        classes,
    };
    // Round-trip the header through the parser so the writer cannot emit
    // files the reader rejects.
    RawHeader::parse(&h.to_bytes())?;
    if pixels.len() as u64 != labels.len() as u64 * h.pixels_per_image() {
        return Err(Error::Input(format!(
            "{} pixel bytes for {} images of extent {extent}",
            pixels.len(),
            labels.len()
        )));
    }
    let max = if label_width == 4 { u32::MAX as u64 } else { (1u64 << (8 * label_width)) - 1 };
    let mut out = h.to_bytes().to_vec();
    for &l in labels {
        if l >= classes || l as u64 > max {
            return Err(Error::Input(format!("label {l} does not fit")));
        }
        out.extend_from_slice(&l.to_le_bytes()[..label_width as usize]);
    }
    out.extend_from_slice(pixels);
    Ok(out)
}

/// Fits normalization statistics on `train` (mean image or GCN settings).
pub fn fit_normalization(train: &ImageDataset, mode: NormalizeMode) -> PreprocessManifest {
    let mut m = train.preprocessing.clone();
    m.normalization = Some(mode);
    match mode {
        NormalizeMode::MeanPixel => {
            let d = train.image_len();
            let mut acc = vec![0f64; d];
            for img in train.images.data().chunks_exact(d) {
                for (a, &v) in acc.iter_mut().zip(img) {
                    *a += v as f64;
                }
            }
            let n = train.len().max(1) as f64;
            m.mean_image = Some(acc.into_iter().map(|a| (a / n) as f32).collect());
            m.gcn_variance_floor = None;
        }
        NormalizeMode::Gcn => {
            m.mean_image = None;
            m.gcn_variance_floor = Some(GCN_VARIANCE_FLOOR);
        }
    }
    m
}

/// Applies fitted statistics to any split.
pub fn apply_normalization(ds: &ImageDataset, manifest: &PreprocessManifest) -> Result<ImageDataset> {
    let d = ds.image_len();
    let mut out = ds.clone();
    match manifest.normalization {
        None => {}
        Some(NormalizeMode::MeanPixel) => {
            let mean = manifest
                .mean_image
                .as_ref()
                .ok_or_else(|| Error::Input("mean-pixel normalization without a mean image".into()))?;
            if mean.len() != d {
                return Err(Error::dim("normalize", &[mean.len()], &ds.images.shape()[1..]));
            }
            for img in out.images.data_mut().chunks_exact_mut(d) {
                for (v, &m) in img.iter_mut().zip(mean) {
                    *v -= m;
                }
            }
        }
        Some(NormalizeMode::Gcn) => {
            let floor = manifest.gcn_variance_floor.unwrap_or(GCN_VARIANCE_FLOOR);
            for img in out.images.data_mut().chunks_exact_mut(d) {
                let mean = img.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
                let var = img.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
                let sd = var.max(floor).sqrt();
                for v in img.iter_mut() {
                    *v = ((*v as f64 - mean) / sd) as f32;
                }
            }
        }
    }
    out.preprocessing = manifest.clone();
    Ok(out)
}

/// Fits on `ds` and applies to it.
pub fn normalize(ds: &ImageDataset, mode: NormalizeMode) -> Result<ImageDataset> {
    apply_normalization(ds, &fit_normalization(ds, mode))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    pub pad: usize,
    pub crop: usize,
    pub flip: bool,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            pad: 4,
            crop: CIFAR_EXTENT,
            flip: false,
        }
    }
}

impl AugmentPolicy {
    /// Policy for images of extent `e`: pad 4 and crop back to `e`.
    pub fn for_extent(e: usize) -> Self {
        AugmentPolicy {
            crop: e,
            ..Self::default()
        }
    }

    pub fn validate(&self, extent: usize) -> Result<()> {
        if self.crop > extent + 2 * self.pad {
            return Err(Error::Input(format!(
                "crop {} exceeds padded extent {}",
                self.crop,
                extent + 2 * self.pad
            )));
        }
        Ok(())
    }
}

/// One image `[3×E×E]` zero-padded by `pad`, cropped at `(dy, dx)` of the
/// padded frame to `crop×crop`, optionally mirrored left-right.
pub fn crop_image(img: &[f32], extent: usize, pad: usize, crop: usize, dy: usize, dx: usize, flip: bool) -> Vec<f32> {
    let mut out = vec![0f32; 3 * crop * crop];
    for c in 0..3 {
        for y in 0..crop {
            let sy = (y + dy) as isize - pad as isize;
            if sy < 0 || sy >= extent as isize {
                continue;
            }
            for x in 0..crop {
                let sx = (x + dx) as isize - pad as isize;
                if sx < 0 || sx >= extent as isize {
                    continue;
                }
                let ox = if flip { crop - 1 - x } else { x };
                out[(c * crop + y) * crop + ox] = img[(c * extent + sy as usize) * extent + sx as usize];
            }
        }
    }
    out
}

/// Random pad-and-crop (and flip if enabled) of a batch `[b×3×E×E]`.
pub fn augment(batch: &Tensor<f32>, policy: &AugmentPolicy, rng: &mut impl Rng) -> Result<Tensor<f32>> {
    let (b, e) = match *batch.shape() {
        [b, 3, h, w] if h == w => (b, h),
        _ => return Err(Error::dim("augment", batch.shape(), &[0, 3])),
    };
    policy.validate(e)?;
    let span = e + 2 * policy.pad - policy.crop;
    let d = 3 * e * e;
    let mut out = Vec::with_capacity(b * 3 * policy.crop * policy.crop);
    for img in batch.data().chunks_exact(d) {
        let dy = rng.gen_range(0..=span);
        let dx = rng.gen_range(0..=span);
        let flip = policy.flip && rng.gen_bool(0.5);
        out.extend(crop_image(img, e, policy.pad, policy.crop, dy, dx, flip));
    }
    Tensor::new(&[b, 3, policy.crop, policy.crop], out)
}

/// Seeded train/validation split of `n` indices; validation gets
/// `round(n · fraction)` of them. Both halves are sorted.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut init::seeded(seed));
    let n_val = ((n as f64) * fraction).round() as usize;
    let mut val = idx[..n_val].to_vec();
    let mut train = idx[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

/// Holds out 10% of `ds` for validation.
pub fn split_validation(ds: &ImageDataset, seed: u64) -> Result<(ImageDataset, ImageDataset)> {
    let (train, val) = split_indices(ds.len(), VALIDATION_FRACTION, seed);
    Ok((ds.subset(&train, Split::Train)?, ds.subset(&val, Split::Val)?))
}

/// Class-separable images of extent `extent`.
///
/// Class `k` has a prototype made of a colour offset per channel and an
/// oriented sinusoidal grating; each sample adds Gaussian noise (sd 0.15)
/// and clamps to [0,1]. Labels cycle `0, 1, .., classes-1`.
pub fn synth_images(classes: usize, per_class: usize, extent: usize, seed: u64) -> Result<ImageDataset> {
    if classes == 0 || extent == 0 {
        return Err(Error::Input("synthetic dataset needs classes and a positive extent".into()));
    }
    let mut rng = init::seeded(seed);
    let e = extent;
    let protos: Vec<Vec<f32>> = (0..classes)
        .map(|_| {
            let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
            let freq: f64 = rng.gen_range(1.0..4.0) * std::f64::consts::TAU / e as f64;
            let colour: Vec<f64> = (0..3).map(|_| rng.gen_range(0.3..0.7)).collect();
            let amp: Vec<f64> = (0..3).map(|_| rng.gen_range(-0.25..0.25)).collect();
            let (s, c) = theta.sin_cos();
            let mut p = Vec::with_capacity(3 * e * e);
            for ch in 0..3 {
                for y in 0..e {
                    for x in 0..e {
                        let phase = freq * (c * x as f64 + s * y as f64);
                        p.push((colour[ch] + amp[ch] * phase.sin()) as f32);
                    }
                }
            }
            p
        })
        .collect();
    let n = classes * per_class;
    let noise = init::normal(&mut rng, n * 3 * e * e, 0.15);
    let mut images = Vec::with_capacity(n * 3 * e * e);
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    for (i, &l) in labels.iter().enumerate() {
        let z = &noise[i * 3 * e * e..(i + 1) * 3 * e * e];
        images.extend(protos[l].iter().zip(z).map(|(&p, &z)| (p + z as f32).clamp(0.0, 1.0)));
    }
    ImageDataset::new(Tensor::new(&[n, 3, e, e], images)?, labels, classes, Split::Train)
}

/// 32×32 synthetic dataset.
pub fn synth_dataset(classes: usize, per_class: usize, seed: u64) -> Result<ImageDataset> {
    synth_images(classes, per_class, CIFAR_EXTENT, seed)
}
