//! Stacked spatial and domain transforms.
//!
//! Seven transforms are applied in a fixed order, each gated by a Bernoulli
//! draw with its own probability and parameterized by a magnitude drawn
//! uniformly from its range:
//!
//! | # | transform  | kind    | magnitude                          |
//! |---|------------|---------|------------------------------------|
//! | 1 | crop       | spatial | window scale (fraction of side)    |
//! | 2 | flip       | spatial | none (horizontal mirror)           |
//! | 3 | blur       | domain  | Gaussian sigma, pixels             |
//! | 4 | sharpen    | domain  | unsharp-mask amount                |
//! | 5 | noise      | domain  | additive Gaussian std              |
//! | 6 | brightness | domain  | additive shift                     |
//! | 7 | contrast   | domain  | gain about the image mean          |
//!
//! Spatial transforms act on image and mask alike (mask by nearest neighbour);
//! domain transforms act on the image only. Every step clamps to `[0, 1]`.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Image, Mask};
use crate::error::{Error, Result};
use crate::imgproc::{flip_horizontal, gaussian_blur, resize_bilinear, resize_nearest};
use crate::seed::{rng, Rng};

/// Probability plus uniform magnitude range for one transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformSetting {
    pub probability: f64,
    pub range: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlipSetting {
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransformConfig {
    pub crop: TransformSetting,
    pub flip: FlipSetting,
    pub blur: TransformSetting,
    pub sharpen: TransformSetting,
    pub noise: TransformSetting,
    pub brightness: TransformSetting,
    pub contrast: TransformSetting,
}

impl Default for TransformConfig {
    fn default() -> Self {
        let domain = |lo, hi| TransformSetting {
            probability: 0.10,
            range: [lo, hi],
        };
        Self {
            crop: TransformSetting {
                probability: 0.50,
                range: [0.7, 0.9],
            },
            flip: FlipSetting { probability: 0.05 },
            blur: domain(0.25, 1.5),
            sharpen: domain(0.5, 2.0),
            noise: domain(0.01, 0.1),
            brightness: domain(-0.2, 0.2),
            contrast: domain(0.7, 1.3),
        }
    }
}

impl TransformConfig {
    /// Every transform disabled.
    pub fn disabled() -> Self {
        let mut cfg = Self::default();
        cfg.set_all_probabilities(0.0);
        cfg
    }

    pub fn set_all_probabilities(&mut self, p: f64) {
        self.crop.probability = p;
        self.flip.probability = p;
        for s in self.domain_settings_mut() {
            s.probability = p;
        }
    }

    fn domain_settings_mut(&mut self) -> [&mut TransformSetting; 5] {
        [
            &mut self.blur,
            &mut self.sharpen,
            &mut self.noise,
            &mut self.brightness,
            &mut self.contrast,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let settings = [
            ("crop", &self.crop),
            ("blur", &self.blur),
            ("sharpen", &self.sharpen),
            ("noise", &self.noise),
            ("brightness", &self.brightness),
            ("contrast", &self.contrast),
        ];
        for (name, s) in settings {
            if !(0.0..=1.0).contains(&s.probability) {
                return Err(Error::config(
                    format!("transforms.{name}.probability"),
                    "must lie in [0, 1]",
                ));
            }
            if !(s.range[0] <= s.range[1]) {
                return Err(Error::config(format!("transforms.{name}.range"), "lower bound exceeds upper bound"));
            }
        }
        if !(0.0..=1.0).contains(&self.flip.probability) {
            return Err(Error::config("transforms.flip.probability", "must lie in [0, 1]"));
        }
        if !(self.crop.range[0] > 0.0 && self.crop.range[1] <= 1.0) {
            return Err(Error::config("transforms.crop.range", "crop scale must lie in (0, 1]"));
        }
        for (name, s) in [("blur", &self.blur), ("noise", &self.noise)] {
            if s.range[0] < 0.0 {
                return Err(Error::config(format!("transforms.{name}.range"), "must be non-negative"));
            }
        }
        if self.contrast.range[0] <= 0.0 {
            return Err(Error::config("transforms.contrast.range", "gain must be positive"));
        }
        Ok(())
    }
}

/// Crop window in resolution-independent form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Crop {
    /// Side length as a fraction of the image side.
    pub scale: f64,
    /// Position in `[0, 1]^2` along the valid placement range.
    pub position: (f64, f64),
}

impl Crop {
    /// Pixel window `(x0, y0, width, height)` for a `width x height` image.
    pub fn window(&self, width: usize, height: usize) -> (usize, usize, usize, usize) {
        let cw = ((self.scale * width as f64).round() as usize).clamp(1, width);
        let ch = ((self.scale * height as f64).round() as usize).clamp(1, height);
        let x0 = (self.position.0 * (width - cw) as f64).round() as usize;
        let y0 = (self.position.1 * (height - ch) as f64).round() as usize;
        (x0, y0, cw, ch)
    }
}

/// Realized spatial parameters (`a`): which spatial transforms fire and how.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SpatialParams {
    pub crop: Option<Crop>,
    pub flip: bool,
}

impl SpatialParams {
    pub fn identity() -> Self {
        Self::default()
    }

    /// Active flags in stacking order: crop, flip.
    pub fn active(&self) -> [bool; 2] {
        [self.crop.is_some(), self.flip]
    }

    pub fn sample(rng: &mut Rng, cfg: &TransformConfig) -> Self {
        let crop_on = rng.random::<f64>() < cfg.crop.probability;
        let scale = uniform(rng, cfg.crop.range);
        let position = (rng.random::<f64>(), rng.random::<f64>());
        let flip = rng.random::<f64>() < cfg.flip.probability;
        Self {
            crop: crop_on.then_some(Crop { scale, position }),
            flip,
        }
    }
}

/// Realized domain parameters (`d`).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DomainParams {
    pub blur: Option<f64>,
    pub sharpen: Option<f64>,
    /// Noise std and the seed of its noise field.
    pub noise: Option<(f64, u64)>,
    pub brightness: Option<f64>,
    pub contrast: Option<f64>,
}

impl DomainParams {
    pub fn identity() -> Self {
        Self::default()
    }

    /// Active flags in stacking order: blur, sharpen, noise, brightness, contrast.
    pub fn active(&self) -> [bool; 5] {
        [
            self.blur.is_some(),
            self.sharpen.is_some(),
            self.noise.is_some(),
            self.brightness.is_some(),
            self.contrast.is_some(),
        ]
    }

    pub fn sample(rng: &mut Rng, cfg: &TransformConfig) -> Self {
        // Each transform consumes a fixed number of draws whether or not it fires.
        let gate = |rng: &mut Rng, s: &TransformSetting| {
            let on = rng.random::<f64>() < s.probability;
            let magnitude = uniform(rng, s.range);
            on.then_some(magnitude)
        };
        let blur = gate(rng, &cfg.blur);
        let sharpen = gate(rng, &cfg.sharpen);
        let noise_std = gate(rng, &cfg.noise);
        let noise_seed: u64 = rng.random();
        let brightness = gate(rng, &cfg.brightness);
        let contrast = gate(rng, &cfg.contrast);
        Self {
            blur,
            sharpen,
            noise: noise_std.map(|s| (s, noise_seed)),
            brightness,
            contrast,
        }
    }
}

fn uniform(rng: &mut Rng, range: [f64; 2]) -> f64 {
    let u: f64 = rng.random();
    range[0] + u * (range[1] - range[0])
}

const SHARPEN_SIGMA: f32 = 1.0;

fn clamp_all(v: &mut [f32]) {
    for x in v.iter_mut() {
        *x = x.clamp(0.0, 1.0);
    }
}

/// Applies the active domain transforms in order blur, sharpen, noise,
/// brightness, contrast.
pub fn apply_domain(x: &Image, d: &DomainParams) -> Image {
    let (w, h) = (x.width(), x.height());
    let mut px = x.pixels().to_vec();
    if let Some(sigma) = d.blur {
        px = gaussian_blur(&px, w, h, sigma as f32);
        clamp_all(&mut px);
    }
    if let Some(amount) = d.sharpen {
        let low = gaussian_blur(&px, w, h, SHARPEN_SIGMA);
        for (v, l) in px.iter_mut().zip(low) {
            *v += amount as f32 * (*v - l);
        }
        clamp_all(&mut px);
    }
    if let Some((std, seed)) = d.noise {
        let mut noise_rng = rng(seed);
        for v in px.iter_mut() {
            let g: f32 = StandardNormal.sample(&mut noise_rng);
            *v += std as f32 * g;
        }
        clamp_all(&mut px);
    }
    if let Some(shift) = d.brightness {
        px.iter_mut().for_each(|v| *v += shift as f32);
        clamp_all(&mut px);
    }
    if let Some(gain) = d.contrast {
        let mean = (px.iter().map(|&v| v as f64).sum::<f64>() / px.len() as f64) as f32;
        px.iter_mut().for_each(|v| *v = (*v - mean) * gain as f32 + mean);
        clamp_all(&mut px);
    }
    Image::new(w, h, px).expect("values clamped, size unchanged")
}

/// Applies crop-and-resize then horizontal flip to image and mask together.
pub fn apply_spatial(x: &Image, l: &Mask, a: &SpatialParams) -> Result<(Image, Mask)> {
    let (w, h) = (x.width(), x.height());
    if l.width() != w || l.height() != h {
        return Err(Error::Shape(format!(
            "image {w}x{h} and mask {}x{} differ",
            l.width(),
            l.height()
        )));
    }
    let mut px = x.pixels().to_vec();
    let mut lb = l.labels().to_vec();
    if let Some(crop) = a.crop {
        let window = crop.window(w, h);
        px = resize_bilinear(&px, w, window, w, h);
        lb = resize_nearest(&lb, w, window, w, h);
        clamp_all(&mut px);
    }
    if a.flip {
        px = flip_horizontal(&px, w, h);
        lb = flip_horizontal(&lb, w, h);
    }
    Ok((Image::new(w, h, px)?, Mask::new(w, h, lb)?))
}

/// The four stacked-transform views of one sample plus the two spatially
/// transformed labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Quadruple {
    pub x_a1d1: Image,
    pub x_a2d2: Image,
    pub x_a1d2: Image,
    pub x_a2d1: Image,
    pub l1: Mask,
    pub l2: Mask,
}

impl Quadruple {
    pub fn from_params(
        x: &Image,
        l: &Mask,
        a1: &SpatialParams,
        a2: &SpatialParams,
        d1: &DomainParams,
        d2: &DomainParams,
    ) -> Result<Self> {
        let (x1, l1) = apply_spatial(x, l, a1)?;
        let (x2, l2) = apply_spatial(x, l, a2)?;
        Ok(Self {
            x_a1d1: apply_domain(&x1, d1),
            x_a2d2: apply_domain(&x2, d2),
            x_a1d2: apply_domain(&x1, d2),
            x_a2d1: apply_domain(&x2, d1),
            l1,
            l2,
        })
    }
}

/// Draws `a1, a2, d1, d2` (in that order) and builds the quadruple.
pub fn make_quadruple(x: &Image, l: &Mask, cfg: &TransformConfig, rng: &mut Rng) -> Result<Quadruple> {
    let a1 = SpatialParams::sample(rng, cfg);
    let a2 = SpatialParams::sample(rng, cfg);
    let d1 = DomainParams::sample(rng, cfg);
    let d2 = DomainParams::sample(rng, cfg);
    Quadruple::from_params(x, l, &a1, &a2, &d1, &d2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng;
    use crate::synth::AnatomySpec;

    fn ramp(res: usize) -> Image {
        let px = (0..res * res)
            .map(|i| ((i % res) as f32 + (i / res) as f32 * 0.5) / (1.5 * res as f32))
            .collect();
        Image::new(res, res, px).unwrap()
    }

    #[test]
    fn zero_probabilities_activate_nothing() {
        let cfg = TransformConfig::disabled();
        let mut r = rng(1);
        for _ in 0..200 {
            assert_eq!(SpatialParams::sample(&mut r, &cfg).active(), [false; 2]);
            assert_eq!(DomainParams::sample(&mut r, &cfg).active(), [false; 5]);
        }
    }

    #[test]
    fn crop_scale_and_window_in_bounds() {
        let mut cfg = TransformConfig::default();
        cfg.crop.probability = 1.0;
        let mut r = rng(2);
        for _ in 0..500 {
            let c = SpatialParams::sample(&mut r, &cfg).crop.unwrap();
            assert!((0.7..=0.9).contains(&c.scale));
            let (x0, y0, w, h) = c.window(64, 64);
            assert!(x0 + w <= 64 && y0 + h <= 64);
        }
    }

    #[test]
    fn sampling_is_seeded() {
        let cfg = TransformConfig::default();
        let a = (SpatialParams::sample(&mut rng(9), &cfg), DomainParams::sample(&mut rng(9), &cfg));
        let b = (SpatialParams::sample(&mut rng(9), &cfg), DomainParams::sample(&mut rng(9), &cfg));
        assert_eq!(a, b);
    }

    #[test]
    fn inactive_domain_is_identity() {
        let x = ramp(16);
        assert_eq!(apply_domain(&x, &DomainParams::identity()), x);
    }

    #[test]
    fn brightness_shift_on_constant() {
        let x = Image::filled(8, 8, 0.5).unwrap();
        let d = DomainParams {
            brightness: Some(0.2),
            ..Default::default()
        };
        let y = apply_domain(&x, &d);
        assert!(y.pixels().iter().all(|v| (v - 0.7).abs() < 1e-6));
    }

    #[test]
    fn contrast_preserves_mean() {
        let mut r = rng(4);
        for _ in 0..20 {
            let px: Vec<f32> = (0..256).map(|_| r.random_range(0.3..0.7)).collect();
            let x = Image::new(16, 16, px).unwrap();
            let gain = r.random_range(0.7..1.3);
            let y = apply_domain(
                &x,
                &DomainParams {
                    contrast: Some(gain),
                    ..Default::default()
                },
            );
            assert!((y.mean() - x.mean()).abs() < 1e-6, "{} vs {}", y.mean(), x.mean());
        }
    }

    #[test]
    fn flip_is_an_involution() {
        let x = ramp(12);
        let l = AnatomySpec::single((0.3, 0.4), (0.2, 0.1), 0.2).rasterize(12);
        let a = SpatialParams {
            crop: None,
            flip: true,
        };
        let (x1, l1) = apply_spatial(&x, &l, &a).unwrap();
        assert_ne!(x1, x);
        let (x2, l2) = apply_spatial(&x1, &l1, &a).unwrap();
        assert_eq!(x2, x);
        assert_eq!(l2, l);
    }

    #[test]
    fn spatial_identity() {
        let x = ramp(12);
        let l = AnatomySpec::single((0.5, 0.5), (0.2, 0.1), 0.0).rasterize(12);
        let (x1, l1) = apply_spatial(&x, &l, &SpatialParams::identity()).unwrap();
        assert_eq!((x1, l1), (x, l));
    }

    #[test]
    fn centered_crop_scales_foreground_area() {
        let res = 128;
        let l = AnatomySpec::single((0.5, 0.5), (0.15, 0.10), 0.4).rasterize(res);
        let x = Image::filled(res, res, 0.5).unwrap();
        let a = SpatialParams {
            crop: Some(Crop {
                scale: 0.8,
                position: (0.5, 0.5),
            }),
            flip: false,
        };
        let (_, cropped) = apply_spatial(&x, &l, &a).unwrap();
        let ratio = cropped.foreground_count() as f64 / l.foreground_count() as f64;
        let expected = 1.0 / 0.64;
        assert!((ratio - expected).abs() / expected < 0.05, "{ratio} vs {expected}");
    }

    #[test]
    fn mismatched_shapes_rejected() {
        let x = ramp(8);
        let l = Mask::empty(4, 4);
        assert!(apply_spatial(&x, &l, &SpatialParams::identity()).is_err());
    }

    #[test]
    fn disabled_quadruple_collapses() {
        let x = ramp(16);
        let l = AnatomySpec::single((0.5, 0.5), (0.2, 0.1), 0.0).rasterize(16);
        let q = make_quadruple(&x, &l, &TransformConfig::disabled(), &mut rng(3)).unwrap();
        for img in [&q.x_a1d1, &q.x_a2d2, &q.x_a1d2, &q.x_a2d1] {
            assert_eq!(img, &x);
        }
        assert_eq!(q.l1, l);
        assert_eq!(q.l2, l);
    }

    #[test]
    fn shared_domain_params_give_shared_images() {
        let x = ramp(16);
        let l = Mask::empty(16, 16);
        let mut cfg = TransformConfig::default();
        cfg.set_all_probabilities(0.7);
        let mut r = rng(5);
        let a1 = SpatialParams::sample(&mut r, &cfg);
        let a2 = SpatialParams::sample(&mut r, &cfg);
        let d = DomainParams::sample(&mut r, &cfg);
        let q = Quadruple::from_params(&x, &l, &a1, &a2, &d, &d).unwrap();
        assert_eq!(q.x_a1d1, q.x_a1d2);
        assert_eq!(q.x_a2d1, q.x_a2d2);
    }

    #[test]
    fn quadruple_is_reproducible() {
        let x = ramp(16);
        let l = AnatomySpec::single((0.5, 0.5), (0.2, 0.1), 0.0).rasterize(16);
        let mut cfg = TransformConfig::default();
        cfg.set_all_probabilities(0.5);
        let a = make_quadruple(&x, &l, &cfg, &mut rng(8)).unwrap();
        let b = make_quadruple(&x, &l, &cfg, &mut rng(8)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn validation_names_key() {
        let mut cfg = TransformConfig::default();
        cfg.noise.probability = 1.5;
        match cfg.validate() {
            Err(Error::Config { key, .. }) => assert_eq!(key, "transforms.noise.probability"),
            other => panic!("{other:?}"),
        }
    }
}
