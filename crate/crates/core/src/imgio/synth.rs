//! Procedural two-camera pedestrian dataset.
//!
//! Each identity is a banded "pedestrian" texture (head, torso, legs,
//! shoes) with identity-specific colors and an optional stripe pattern.
//! The camera-1 view of a sample is the camera-0 view pushed through a
//! configurable photometric shift (hue rotation, gamma, additive noise),
//! mimicking a disjoint camera with different illumination. Everything is
//! deterministic given the seed.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::color::{hsv_to_rgb, rgb_to_hsv};
use crate::error::{Error, Result};
use crate::imgio::{ManifestRow, PedestrianImage};

/// Photometric perturbation applied to camera-1 views.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraShift {
    /// Hue rotation in [0, 1) turns.
    pub hue_rotation: f64,
    /// Gamma applied to the value channel.
    pub gamma: f64,
    /// Additive Gaussian noise sigma on each RGB channel (0..255 scale).
    pub noise_sigma: f64,
}

impl CameraShift {
    pub fn zero() -> Self {
        Self {
            hue_rotation: 0.0,
            gamma: 1.0,
            noise_sigma: 0.0,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.hue_rotation == 0.0 && self.gamma == 1.0 && self.noise_sigma == 0.0
    }
}

impl Default for CameraShift {
    /// The shift used by the synthetic two-camera benchmark.
    fn default() -> Self {
        Self {
            hue_rotation: 0.07,
            gamma: 1.25,
            noise_sigma: 10.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_ids: usize,
    /// Samples per identity per camera.
    pub per_camera: usize,
    pub height: usize,
    pub width: usize,
    pub shift: CameraShift,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_ids: 100,
            per_camera: 1,
            height: 64,
            width: 24,
            shift: CameraShift::default(),
            seed: 0,
        }
    }
}

struct IdentityStyle {
    torso: (f64, f64, f64),
    legs: (f64, f64, f64),
    accent: (f64, f64, f64),
    stripe_period: usize, // 0 = no stripes
    hair_value: f64,
}

fn sample_style(rng: &mut ChaCha8Rng) -> IdentityStyle {
    let color = |rng: &mut ChaCha8Rng| {
        (
            rng.random::<f64>(),
            0.55 + 0.45 * rng.random::<f64>(),
            0.45 + 0.5 * rng.random::<f64>(),
        )
    };
    let torso = color(rng);
    let legs = color(rng);
    let accent = color(rng);
    let stripe_period = if rng.random::<f64>() < 0.5 {
        2 + rng.random_range(0..4usize)
    } else {
        0
    };
    let hair_value = 0.05 + 0.3 * rng.random::<f64>();
    IdentityStyle {
        torso,
        legs,
        accent,
        stripe_period,
        hair_value,
    }
}

/// Body silhouette half-width (in pixels) for a given row fraction.
fn silhouette_half_width(frac: f64, width: usize) -> f64 {
    let w = width as f64;
    if frac < 0.16 {
        // head: circle-ish
        let t = (frac / 0.16) * 2.0 - 1.0;
        0.18 * w * (1.0 - t * t).max(0.0).sqrt()
    } else if frac < 0.2 {
        0.10 * w // neck
    } else if frac < 0.55 {
        0.30 * w // torso
    } else if frac < 0.95 {
        0.24 * w // legs
    } else {
        0.27 * w // shoes
    }
}

fn render_base(cfg: &SynthConfig, style: &IdentityStyle, rng: &mut ChaCha8Rng) -> PedestrianImage {
    let (h, w) = (cfg.height, cfg.width);
    let mut pixels = vec![[0u8; 3]; h * w];
    let mut mask = vec![false; h * w];
    let cx = (w as f64 - 1.0) / 2.0;
    let texture = Normal::new(0.0, 6.0).unwrap();

    for y in 0..h {
        let frac = y as f64 / h as f64;
        let half = silhouette_half_width(frac, w);
        for x in 0..w {
            let idx = y * w + x;
            let inside = (x as f64 - cx).abs() <= half;
            let (hue, sat, val) = if !inside {
                // background: vertical gray gradient
                (0.0, 0.0, 0.12 + 0.1 * frac)
            } else if frac < 0.16 {
                if frac < 0.08 {
                    (0.08, 0.35, style.hair_value) // hair
                } else {
                    (0.07, 0.45, 0.75) // skin
                }
            } else if frac < 0.55 {
                let striped = style.stripe_period > 0 && (x / style.stripe_period) % 2 == 1;
                if striped {
                    style.accent
                } else {
                    style.torso
                }
            } else if frac < 0.95 {
                style.legs
            } else {
                (0.06, 0.3, 0.15) // shoes
            };
            let (r, g, b) = hsv_to_rgb(hue, sat, val);
            let jitter = texture.sample(rng);
            let px = [
                (r as f64 + jitter).round().clamp(0.0, 255.0) as u8,
                (g as f64 + jitter).round().clamp(0.0, 255.0) as u8,
                (b as f64 + jitter).round().clamp(0.0, 255.0) as u8,
            ];
            pixels[idx] = px;
            mask[idx] = inside;
        }
    }
    PedestrianImage {
        id: String::new(),
        camera: 0,
        width: w,
        height: h,
        pixels,
        mask: Some(mask),
    }
}

fn apply_shift(base: &PedestrianImage, shift: &CameraShift, rng: &mut ChaCha8Rng) -> Vec<[u8; 3]> {
    if shift.is_zero() {
        return base.pixels.clone();
    }
    let noise = Normal::new(0.0, shift.noise_sigma.max(1e-12)).unwrap();
    base.pixels
        .iter()
        .map(|&[r, g, b]| {
            let (h, s, v) = rgb_to_hsv(r, g, b);
            let h2 = (h + shift.hue_rotation).rem_euclid(1.0);
            let v2 = v.powf(shift.gamma);
            let (r2, g2, b2) = hsv_to_rgb(h2, s, v2);
            let mut out = [r2, g2, b2];
            if shift.noise_sigma > 0.0 {
                for c in out.iter_mut() {
                    let n = noise.sample(rng);
                    *c = (*c as f64 + n).round().clamp(0.0, 255.0) as u8;
                }
            }
            out
        })
        .collect()
}

/// Generate `n_ids x 2 cameras x per_camera` images. Identity `i` gets the
/// zero-padded label `format!("{:04}", i + 1)`.
pub fn synthesize_dataset(cfg: &SynthConfig) -> Result<Vec<PedestrianImage>> {
    if cfg.n_ids < 2 {
        return Err(Error::Config(format!(
            "synthetic dataset needs at least 2 identities, got {}",
            cfg.n_ids
        )));
    }
    if cfg.height < 16 || cfg.width < 8 {
        return Err(Error::Config(format!(
            "synthetic image size {}x{} is degenerate (minimum 16x8)",
            cfg.height, cfg.width
        )));
    }
    if cfg.per_camera < 1 {
        return Err(Error::Config("per_camera must be at least 1".into()));
    }
    if !(0.0..1.0).contains(&cfg.shift.hue_rotation) || cfg.shift.gamma <= 0.0 || cfg.shift.noise_sigma < 0.0
    {
        return Err(Error::Config("invalid camera shift parameters".into()));
    }

    let mut images = Vec::with_capacity(cfg.n_ids * 2 * cfg.per_camera);
    for i in 0..cfg.n_ids {
        let id = format!("{:04}", i + 1);
        let mut style_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        style_rng.set_stream((i as u64) << 1);
        let style = sample_style(&mut style_rng);
        for s in 0..cfg.per_camera {
            let mut base_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_BA5E);
            base_rng.set_stream(((i as u64) << 16) | s as u64);
            let mut base = render_base(cfg, &style, &mut base_rng);
            base.id = id.clone();

            let mut shift_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xCA11_0CA1);
            shift_rng.set_stream(((i as u64) << 16) | s as u64);
            let shifted = apply_shift(&base, &cfg.shift, &mut shift_rng);

            let mut cam1 = base.clone();
            cam1.camera = 1;
            cam1.pixels = shifted;
            images.push(base);
            images.push(cam1);
        }
    }
    Ok(images)
}

/// Write a synthetic dataset to `dir` as PNGs plus a `manifest.jsonl`
/// loadable through `DatasetLayout::SyntheticManifest`.
pub fn write_synthetic_dataset(cfg: &SynthConfig, dir: &Path) -> Result<usize> {
    let images = synthesize_dataset(cfg)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    fs::create_dir_all(dir.join("masks")).map_err(|e| Error::io(dir, e))?;
    let manifest_path = dir.join("manifest.jsonl");
    let mut manifest = String::new();
    for (i, img) in images.iter().enumerate() {
        let file = format!("{}_cam{}_{:03}.png", img.id, img.camera, i);
        let mask_file = format!("masks/{}", file);
        let mut rgb = image::RgbImage::new(img.width as u32, img.height as u32);
        for y in 0..img.height {
            for x in 0..img.width {
                rgb.put_pixel(x as u32, y as u32, image::Rgb(img.rgb(x, y)));
            }
        }
        let path = dir.join(&file);
        rgb.save(&path).map_err(|e| Error::Image {
            path: path.clone(),
            source: e,
        })?;
        if let Some(m) = &img.mask {
            let mut gray = image::GrayImage::new(img.width as u32, img.height as u32);
            for y in 0..img.height {
                for x in 0..img.width {
                    gray.put_pixel(
                        x as u32,
                        y as u32,
                        image::Luma([if m[y * img.width + x] { 255 } else { 0 }]),
                    );
                }
            }
            let mpath = dir.join(&mask_file);
            gray.save(&mpath).map_err(|e| Error::Image {
                path: mpath.clone(),
                source: e,
            })?;
        }
        let row = ManifestRow {
            id: img.id.clone(),
            camera: img.camera,
            file,
            mask: img.mask.as_ref().map(|_| mask_file),
        };
        manifest.push_str(&serde_json::to_string(&row).unwrap());
        manifest.push('\n');
    }
    fs::write(&manifest_path, manifest).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(images.len())
}
