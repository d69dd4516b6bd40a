//! Images, masks and the on-disk dataset layout.
//!
//! A dataset directory holds one subdirectory per appearance domain:
//!
//! ```text
//! <root>/<domain_id>/images/<name>.png   8-bit grayscale
//! <root>/<domain_id>/masks/<name>.png    8-bit, values {0, 255}
//! <root>/<domain_id>/dataset.json        optional metadata (seed)
//! ```
//!
//! Images are held in memory as `f32` in `[0, 1]`, masks as `u8` in `{0, 1}`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{ColorType, GrayImage, ImageReader};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Single-channel image, row-major, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::Shape(format!(
                "image buffer of {} values does not match {width}x{height}",
                pixels.len()
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::InvalidValue(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    /// Builds an image by clamping every value into `[0, 1]`; NaN becomes 0.
    pub fn from_clamped(width: usize, height: usize, mut pixels: Vec<f32>) -> Result<Self> {
        for v in pixels.iter_mut() {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Self::new(width, height, pixels)
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    pub fn mean(&self) -> f32 {
        (self.pixels.iter().map(|&v| v as f64).sum::<f64>() / self.pixels.len() as f64) as f32
    }

    pub fn into_pixels(self) -> Vec<f32> {
        self.pixels
    }

    fn to_gray8(&self) -> GrayImage {
        let raw = self
            .pixels
            .iter()
            .map(|&v| (v * 255.0).round() as u8)
            .collect();
        GrayImage::from_raw(self.width as u32, self.height as u32, raw)
            .expect("buffer length checked at construction")
    }
}

/// Binary label grid, row-major, values in `{0, 1}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    labels: Vec<u8>,
}

impl Mask {
    pub fn new(width: usize, height: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != width * height {
            return Err(Error::Shape(format!(
                "mask buffer of {} values does not match {width}x{height}",
                labels.len()
            )));
        }
        if let Some(v) = labels.iter().find(|&&v| v > 1) {
            return Err(Error::InvalidValue(format!("mask label {v} is not binary")));
        }
        Ok(Self {
            width,
            height,
            labels,
        })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            labels: vec![0; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn foreground_count(&self) -> usize {
        self.labels.iter().filter(|&&v| v == 1).count()
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.foreground_count() as f64 / self.labels.len() as f64
    }

    fn to_gray8(&self) -> GrayImage {
        let raw = self.labels.iter().map(|&v| v * 255).collect();
        GrayImage::from_raw(self.width as u32, self.height as u32, raw)
            .expect("buffer length checked at construction")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// File stem used on disk.
    pub name: String,
    pub image: Image,
    pub mask: Mask,
    pub domain_id: String,
}

impl Sample {
    pub fn new(name: impl Into<String>, image: Image, mask: Mask, domain_id: impl Into<String>) -> Result<Self> {
        if image.width() != mask.width() || image.height() != mask.height() {
            return Err(Error::Shape(format!(
                "image {}x{} and mask {}x{} differ",
                image.width(),
                image.height(),
                mask.width(),
                mask.height()
            )));
        }
        Ok(Self {
            name: name.into(),
            image,
            mask,
            domain_id: domain_id.into(),
        })
    }

    pub fn resolution(&self) -> usize {
        self.image.width()
    }
}

/// An ordered, immutable collection of samples sharing one resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    seed: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DomainMetadata {
    domain_id: String,
    seed: Option<u64>,
    count: usize,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, seed: Option<u64>) -> Result<Self> {
        let Some(first) = samples.first() else {
            return Err(Error::EmptyDataset("dataset has no samples".into()));
        };
        let (w, h) = (first.image.width(), first.image.height());
        if let Some(s) = samples
            .iter()
            .find(|s| s.image.width() != w || s.image.height() != h)
        {
            return Err(Error::Shape(format!(
                "sample `{}` is {}x{}, expected {w}x{h}",
                s.name,
                s.image.width(),
                s.image.height()
            )));
        }
        Ok(Self { samples, seed })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn resolution(&self) -> usize {
        self.samples[0].resolution()
    }

    /// Distinct domain ids in order of first appearance.
    pub fn domain_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = Vec::new();
        for s in &self.samples {
            if !ids.contains(&s.domain_id) {
                ids.push(s.domain_id.clone());
            }
        }
        ids
    }

    /// A new dataset holding the samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let samples = indices
            .iter()
            .map(|&i| {
                self.samples.get(i).cloned().ok_or_else(|| {
                    Error::InvalidValue(format!("sample index {i} out of range {}", self.len()))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(samples, self.seed)
    }

    /// SHA-256 over names, domain tags and 8-bit quantized content, hex encoded.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for s in &self.samples {
            hasher.update(s.domain_id.as_bytes());
            hasher.update([0]);
            hasher.update(s.name.as_bytes());
            hasher.update([0]);
            hasher.update(s.image.to_gray8().as_raw());
            hasher.update(s.mask.labels());
        }
        hex::encode(hasher.finalize())
    }
}

fn read_gray8(path: &Path) -> Result<GrayImage> {
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    let img = reader.decode().map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    if img.color() != ColorType::L8 {
        return Err(Error::InvalidDatasetFile {
            path: path.to_path_buf(),
            reason: format!("expected 8-bit grayscale, found {:?}", img.color()),
        });
    }
    Ok(img.into_luma8())
}

fn png_stems(dir: &Path) -> Result<Vec<String>> {
    let mut stems = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                stems.push(stem.to_string());
            }
        }
    }
    stems.sort();
    Ok(stems)
}

fn load_domain(dir: &Path, domain_id: &str, resolution: usize) -> Result<(Vec<Sample>, Option<u64>)> {
    let images_dir = dir.join("images");
    let masks_dir = dir.join("masks");
    let image_stems = png_stems(&images_dir)?;
    let mask_stems = if masks_dir.is_dir() {
        png_stems(&masks_dir)?
    } else {
        Vec::new()
    };
    if let Some(orphan) = mask_stems.iter().find(|m| image_stems.binary_search(m).is_err()) {
        return Err(Error::InvalidDatasetFile {
            path: masks_dir.join(format!("{orphan}.png")),
            reason: "mask has no matching image".into(),
        });
    }

    let mut samples = Vec::with_capacity(image_stems.len());
    for stem in &image_stems {
        let image_path = images_dir.join(format!("{stem}.png"));
        let mask_path = masks_dir.join(format!("{stem}.png"));
        if !mask_path.is_file() {
            return Err(Error::InvalidDatasetFile {
                path: image_path,
                reason: format!("missing mask {}", mask_path.display()),
            });
        }
        let img = read_gray8(&image_path)?;
        let msk = read_gray8(&mask_path)?;
        for (path, im) in [(&image_path, &img), (&mask_path, &msk)] {
            if im.width() as usize != resolution || im.height() as usize != resolution {
                return Err(Error::InvalidDatasetFile {
                    path: path.clone(),
                    reason: format!(
                        "size {}x{} does not match configured resolution {resolution}x{resolution}",
                        im.width(),
                        im.height()
                    ),
                });
            }
        }
        let pixels = img.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
        let mut labels = Vec::with_capacity(msk.as_raw().len());
        for &v in msk.as_raw() {
            match v {
                0 => labels.push(0),
                255 => labels.push(1),
                other => {
                    return Err(Error::InvalidDatasetFile {
                        path: mask_path.clone(),
                        reason: format!("mask value {other} is neither 0 nor 255"),
                    })
                }
            }
        }
        let image = Image::new(resolution, resolution, pixels)?;
        let mask = Mask::new(resolution, resolution, labels)?;
        samples.push(Sample::new(stem.clone(), image, mask, domain_id)?);
    }

    let meta_path = dir.join("dataset.json");
    let seed = if meta_path.is_file() {
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: DomainMetadata = serde_json::from_str(&text)?;
        meta.seed
    } else {
        None
    };
    Ok((samples, seed))
}

fn dir_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Loads every sample under `path` in lexicographic (domain, filename) order.
///
/// `path` may be a single domain directory (containing `images/`) or a root
/// holding one or more domain directories.
pub fn load_dataset(path: impl AsRef<Path>, resolution: usize) -> Result<Dataset> {
    let path = path.as_ref();
    if !path.is_dir() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found"),
        ));
    }
    let mut domain_dirs: Vec<PathBuf> = Vec::new();
    if path.join("images").is_dir() {
        domain_dirs.push(path.to_path_buf());
    } else {
        for entry in fs::read_dir(path).map_err(|e| Error::io(path, e))? {
            let p = entry.map_err(|e| Error::io(path, e))?.path();
            if p.join("images").is_dir() {
                domain_dirs.push(p);
            }
        }
        domain_dirs.sort();
    }

    let mut samples = Vec::new();
    let mut seed = None;
    for dir in &domain_dirs {
        let (mut s, domain_seed) = load_domain(dir, &dir_name(dir), resolution)?;
        seed = seed.or(domain_seed);
        samples.append(&mut s);
    }
    if samples.is_empty() {
        return Err(Error::EmptyDataset(format!("no samples found under {}", path.display())));
    }
    Dataset::new(samples, seed)
}

/// Writes `ds` under `root` using the documented layout, one directory per domain.
pub fn save_dataset(ds: &Dataset, root: impl AsRef<Path>) -> Result<()> {
    let root = root.as_ref();
    let mut by_domain: BTreeMap<&str, usize> = BTreeMap::new();
    for s in ds.samples() {
        let dir = root.join(&s.domain_id);
        let images = dir.join("images");
        let masks = dir.join("masks");
        if !by_domain.contains_key(s.domain_id.as_str()) {
            fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
            fs::create_dir_all(&masks).map_err(|e| Error::io(&masks, e))?;
        }
        *by_domain.entry(s.domain_id.as_str()).or_default() += 1;

        let image_path = images.join(format!("{}.png", s.name));
        s.image.to_gray8().save(&image_path).map_err(|source| Error::Image {
            path: image_path.clone(),
            source,
        })?;
        let mask_path = masks.join(format!("{}.png", s.name));
        s.mask.to_gray8().save(&mask_path).map_err(|source| Error::Image {
            path: mask_path.clone(),
            source,
        })?;
    }
    for (domain_id, count) in by_domain {
        let meta = DomainMetadata {
            domain_id: domain_id.to_string(),
            seed: ds.seed(),
            count,
        };
        let path = root.join(domain_id).join("dataset.json");
        let text = serde_json::to_string_pretty(&meta)?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
