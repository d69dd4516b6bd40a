//! Synthetic speckled vessel cross-sections with controllable appearance domains.
//!
//! Anatomy (the ellipses, hence the mask) is drawn from a stream that depends
//! only on the sample seed, so one seed yields the same mask under every
//! [`DomainSpec`]. Appearance is drawn from a second, independent stream.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{save_dataset, Dataset, Image, Mask, Sample};
use crate::error::{Error, Result};
use crate::imgproc::gaussian_blur;
use crate::seed::{derived_rng, sample_seed, Rng};

/// Appearance recipe for one synthetic "scanner".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub domain_id: String,
    /// Multiplicative speckle amplitude, `>= 0`.
    pub speckle_strength: f64,
    /// Tissue intensity, in `[0, 1]`.
    pub base_brightness: f64,
    /// Gain about mid-gray, `> 0`.
    pub contrast_gain: f64,
    /// Gaussian blur in pixels, `>= 0`.
    pub blur_sigma: f64,
    /// Chance of an acoustic shadow band, in `[0, 1]`.
    pub shadow_probability: f64,
}

const MIN_CONTRAST_GAIN: f64 = 1e-3;

impl DomainSpec {
    /// Returns a copy with every field forced into its valid range, logging each change.
    pub fn clamped(&self) -> DomainSpec {
        let mut out = self.clone();
        let fix = |name: &str, v: &mut f64, lo: f64, hi: f64| {
            let fixed = if v.is_nan() { lo } else { v.clamp(lo, hi) };
            if fixed != *v {
                log::warn!("domain `{}`: {name}={v} clamped to {fixed}", self.domain_id);
                *v = fixed;
            }
        };
        fix("speckle_strength", &mut out.speckle_strength, 0.0, f64::MAX);
        fix("base_brightness", &mut out.base_brightness, 0.0, 1.0);
        fix("contrast_gain", &mut out.contrast_gain, MIN_CONTRAST_GAIN, f64::MAX);
        fix("blur_sigma", &mut out.blur_sigma, 0.0, f64::MAX);
        fix("shadow_probability", &mut out.shadow_probability, 0.0, 1.0);
        out
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config("domain_spec", e.to_string()))
    }
}

/// The four shipped domains. `A` is the training domain; `B`, `C`, `D` move
/// progressively further away from it in every appearance parameter.
pub fn canonical_domains() -> [DomainSpec; 4] {
    let spec = |id: &str, speckle, base, gain, blur, shadow| DomainSpec {
        domain_id: id.to_string(),
        speckle_strength: speckle,
        base_brightness: base,
        contrast_gain: gain,
        blur_sigma: blur,
        shadow_probability: shadow,
    };
    [
        spec("A", 0.20, 0.45, 1.00, 0.5, 0.00),
        spec("B", 0.30, 0.55, 0.85, 0.9, 0.10),
        spec("C", 0.45, 0.62, 0.70, 1.3, 0.20),
        spec("D", 0.60, 0.72, 0.55, 1.8, 0.30),
    ]
}

pub fn canonical_domain(id: &str) -> Option<DomainSpec> {
    canonical_domains().into_iter().find(|d| d.domain_id == id)
}

/// One elliptical vessel in normalized `[0, 1]^2` image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Vessel {
    pub center: (f64, f64),
    pub radii: (f64, f64),
    pub rotation: f64,
}

impl Vessel {
    /// Squared normalized radius of point `(x, y)`, with radii grown by `grow`.
    fn level(&self, x: f64, y: f64, grow: f64) -> f64 {
        let (dx, dy) = (x - self.center.0, y - self.center.1);
        let (s, c) = self.rotation.sin_cos();
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / (self.radii.0 + grow)).powi(2) + (v / (self.radii.1 + grow)).powi(2)
    }

    fn extent(&self) -> f64 {
        self.radii.0.max(self.radii.1)
    }
}

/// The anatomy of one image: one or more non-overlapping vessels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnatomySpec {
    pub vessels: Vec<Vessel>,
}

/// Thickness of the bright wall band around each lumen, normalized.
pub const WALL_THICKNESS: f64 = 0.025;
const MARGIN: f64 = 0.05;
const FOREGROUND_RANGE: (f64, f64) = (0.01, 0.40);

impl AnatomySpec {
    pub fn single(center: (f64, f64), radii: (f64, f64), rotation: f64) -> Self {
        Self {
            vessels: vec![Vessel {
                center,
                radii,
                rotation,
            }],
        }
    }

    pub fn count(&self) -> usize {
        self.vessels.len()
    }

    /// Draws a random anatomy whose rasterized foreground fraction lies in
    /// `[1%, 40%]`, resampling otherwise.
    pub fn sample(rng: &mut Rng, resolution: usize) -> Self {
        loop {
            let count = if rng.random::<f64>() < 0.25 { 2 } else { 1 };
            let mut vessels: Vec<Vessel> = Vec::with_capacity(count);
            let mut attempts = 0;
            while vessels.len() < count && attempts < 100 {
                attempts += 1;
                let rx: f64 = rng.random_range(0.08..0.20);
                let ry: f64 = rng.random_range(0.06..0.16);
                let rotation = rng.random_range(0.0..PI);
                let reach = rx.max(ry) + WALL_THICKNESS + MARGIN;
                let cx = rng.random_range(reach..1.0 - reach);
                let cy = rng.random_range(reach..1.0 - reach);
                let v = Vessel {
                    center: (cx, cy),
                    radii: (rx, ry),
                    rotation,
                };
                let clear = vessels.iter().all(|o| {
                    let d = ((o.center.0 - cx).powi(2) + (o.center.1 - cy).powi(2)).sqrt();
                    d > o.extent() + v.extent() + 2.0 * WALL_THICKNESS
                });
                if clear {
                    vessels.push(v);
                }
            }
            let anatomy = AnatomySpec { vessels };
            let frac = anatomy.rasterize(resolution).foreground_fraction();
            if (FOREGROUND_RANGE.0..=FOREGROUND_RANGE.1).contains(&frac) {
                return anatomy;
            }
        }
    }

    /// Mask of all lumen interiors, sampled at pixel centers.
    pub fn rasterize(&self, resolution: usize) -> Mask {
        let labels = pixel_centers(resolution)
            .map(|(x, y)| u8::from(self.vessels.iter().any(|v| v.level(x, y, 0.0) <= 1.0)))
            .collect();
        Mask::new(resolution, resolution, labels).expect("sized by construction")
    }

    fn in_wall(&self, x: f64, y: f64) -> bool {
        self.vessels
            .iter()
            .any(|v| v.level(x, y, 0.0) > 1.0 && v.level(x, y, WALL_THICKNESS) <= 1.0)
    }
}

fn pixel_centers(resolution: usize) -> impl Iterator<Item = (f64, f64)> {
    let r = resolution as f64;
    (0..resolution).flat_map(move |y| (0..resolution).map(move |x| ((x as f64 + 0.5) / r, (y as f64 + 0.5) / r)))
}

/// Intensity relations of the noise-free rendering, relative to tissue brightness.
const LUMEN_FACTOR: f64 = 0.15;
const WALL_BOOST: f64 = 0.35;
const SHADOW_FACTOR: f64 = 0.35;

/// Renders `anatomy` in the appearance of `dspec`.
pub fn render(anatomy: &AnatomySpec, mask: &Mask, dspec: &DomainSpec, resolution: usize, rng: &mut Rng) -> Image {
    let base = dspec.base_brightness;
    let lumen = base * LUMEN_FACTOR;
    let wall = (base + WALL_BOOST).min(1.0);

    let shadow = if rng.random::<f64>() < dspec.shadow_probability {
        let x0 = rng.random_range(0.0..0.9);
        let width = rng.random_range(0.05..0.15);
        let y0 = rng.random_range(0.3..0.7);
        Some((x0, x0 + width, y0))
    } else {
        None
    };

    let mut pixels: Vec<f32> = pixel_centers(resolution)
        .zip(mask.labels())
        .map(|((x, y), &label)| {
            let mut v = if label == 1 {
                lumen
            } else if anatomy.in_wall(x, y) {
                wall
            } else {
                base
            };
            if let Some((sx0, sx1, sy0)) = shadow {
                if x >= sx0 && x < sx1 && y >= sy0 {
                    v *= SHADOW_FACTOR;
                }
            }
            v = (v - 0.5) * dspec.contrast_gain + 0.5;
            v.clamp(0.0, 1.0) as f32
        })
        .collect();

    if dspec.speckle_strength > 0.0 {
        for v in pixels.iter_mut() {
            let g: f64 = StandardNormal.sample(rng);
            *v = (*v as f64 * (1.0 + dspec.speckle_strength * g)).clamp(0.0, 1.0) as f32;
        }
    }
    if dspec.blur_sigma > 0.0 {
        pixels = gaussian_blur(&pixels, resolution, resolution, dspec.blur_sigma as f32);
    }
    Image::from_clamped(resolution, resolution, pixels).expect("sized by construction")
}

/// Deterministic sample for `(rng_seed, dspec)`. Out-of-range spec fields are
/// clamped with a warning.
pub fn synth_sample(rng_seed: u64, dspec: &DomainSpec, resolution: usize) -> Sample {
    let dspec = dspec.clamped();
    let mut anatomy_rng = derived_rng("anatomy", rng_seed, 0);
    let mut appearance_rng = derived_rng("appearance", rng_seed, 0);
    let anatomy = AnatomySpec::sample(&mut anatomy_rng, resolution);
    let mask = anatomy.rasterize(resolution);
    let image = render(&anatomy, &mask, &dspec, resolution, &mut appearance_rng);
    Sample::new(format!("{rng_seed:020}"), image, mask, dspec.domain_id.clone())
        .expect("image and mask share resolution")
}

/// `n` samples of one domain; sample `i` uses seed [`sample_seed`]`(seed, i)`
/// and is named by its zero-padded index.
pub fn synth_domain_dataset(dspec: &DomainSpec, n: usize, seed: u64, resolution: usize) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::InvalidValue("dataset size must be at least 1".into()));
    }
    let samples: Vec<Sample> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut s = synth_sample(sample_seed(seed, i as u64), dspec, resolution);
            s.name = format!("{i:06}");
            s
        })
        .collect();
    Dataset::new(samples, Some(seed))
}

/// Generates and writes a domain dataset under `out`.
pub fn write_domain_dataset(
    dspec: &DomainSpec,
    n: usize,
    seed: u64,
    resolution: usize,
    out: impl AsRef<Path>,
) -> Result<Dataset> {
    let ds = synth_domain_dataset(dspec, n, seed, resolution)?;
    save_dataset(&ds, out)?;
    Ok(ds)
}
