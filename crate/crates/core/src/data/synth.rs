//! Class-textured synthetic images.
//!
//! Class `k` is a plaid of two random-phase cosines, one horizontal and one
//! vertical, at `(3 + k(k + 1)) · size / 64` cycles per image (3, 5, 9, 15),
//! scaled by a class contrast `0.18 + 0.06k`, plus mild pixel noise. The
//! cycle counts are odd and distinct modulo 8, so at 64² with 8-pixel
//! patches every class sweeps all phases across patches and no two classes
//! share a patch-to-patch phase step.
//!
//! `overlap` jitters each sample's frequency by up to `overlap · size / 64`
//! cycles (half the smallest class spacing), its contrast by up to `±overlap · 50%`
//! and its orientations by up to `±overlap · 45°`; at `overlap = 0` the
//! frequency alone identifies the class.

use std::fs;
use std::path::Path;

use rand::Rng as _;

use super::image::encode_ppm;
use super::manifest::{Manifest, Record, MANIFEST_FILE};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

pub const COMPONENTS: usize = 2;
pub const PIXEL_NOISE: f64 = 0.02;
pub const DEFAULT_OVERLAP: f64 = 0.2;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub per_class: usize,
    pub image_size: usize,
    pub seed: u64,
    pub overlap: f64,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=4).contains(&self.num_classes) {
            return Err(Error::Config(format!(
                "num_classes must be 2, 3 or 4, got {}",
                self.num_classes
            )));
        }
        if self.per_class == 0 || self.image_size < 4 {
            return Err(Error::Config("per_class must be positive and image_size at least 4".into()));
        }
        if !(0.0..=1.0).contains(&self.overlap) {
            return Err(Error::Config(format!("overlap {} outside [0, 1]", self.overlap)));
        }
        Ok(())
    }
}

pub fn class_frequency(class: usize, image_size: usize) -> f64 {
    (3 + class * (class + 1)) as f64 * image_size as f64 / 64.0
}

pub fn class_contrast(class: usize) -> f64 {
    0.18 + 0.06 * class as f64
}

pub fn class_name(class: usize) -> String {
    format!("class{class}")
}

/// One `[3, size, size]` image in `[0, 1]`.
pub fn synth_image(class: usize, size: usize, overlap: f64, rng: &mut Rng) -> Tensor {
    let freq = class_frequency(class, size) + overlap * size as f64 / 64.0 * rng.random_range(-1.0..=1.0);
    let contrast = class_contrast(class) * (1.0 + overlap * rng.random_range(-0.5..=0.5));
    let comps: Vec<(f64, f64, f64)> = (0..COMPONENTS)
        .map(|j| {
            let step = std::f64::consts::PI / COMPONENTS as f64;
            let theta = j as f64 * step + overlap * 0.5 * step * rng.random_range(-1.0..=1.0);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let k = std::f64::consts::TAU * freq / size as f64;
            (k * theta.cos(), k * theta.sin(), phase)
        })
        .collect();
    let gains = [1.0, 0.85, 0.7];
    let norm = (2.0 / COMPONENTS as f64).sqrt();
    let plane = size * size;
    let mut data = vec![0.0; 3 * plane];
    for y in 0..size {
        for x in 0..size {
            let t: f64 = comps
                .iter()
                .map(|&(kx, ky, ph)| (kx * x as f64 + ky * y as f64 + ph).cos())
                .sum::<f64>()
                * norm;
            for (c, g) in gains.iter().enumerate() {
                let noise = PIXEL_NOISE * rng::standard_normal(rng);
                data[c * plane + y * size + x] = (0.5 + contrast * g * t + noise).clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new([3, size, size], data).expect("synthetic image shape")
}

/// Writes `out_root/<class>/<class>_<i>.ppm` plus `out_root/manifest.json`.
pub fn synth_generate(cfg: &SynthConfig, out_root: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let classes: Vec<String> = (0..cfg.num_classes).map(class_name).collect();
    let mut records = Vec::with_capacity(cfg.num_classes * cfg.per_class);
    for (c, name) in classes.iter().enumerate() {
        let dir = out_root.join(name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for i in 0..cfg.per_class {
            let mut r = rng::stream(cfg.seed, "synth", (c * cfg.per_class + i) as u64);
            let img = synth_image(c, cfg.image_size, cfg.overlap, &mut r);
            let file = format!("{name}_{i:04}.ppm");
            let path = dir.join(&file);
            fs::write(&path, encode_ppm(&img)?).map_err(|e| Error::io(&path, e))?;
            records.push(Record {
                id: format!("{name}/{name}_{i:04}"),
                path: format!("{name}/{file}"),
                label: c,
                tag: None,
            });
        }
    }
    let manifest = Manifest::new(classes, records, out_root)?;
    manifest.write(&out_root.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Ratio of mean squared finite-difference gradient to variance of the
/// first channel; proportional to squared spatial frequency for a cosine
/// texture.
pub fn frequency_statistic(img: &Tensor) -> f64 {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let px = &img.data()[..h * w];
    let mean = px.iter().sum::<f64>() / px.len() as f64;
    let var = px.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / px.len() as f64;
    let mut grad = 0.0;
    let mut n = 0usize;
    for y in 0..h - 1 {
        for x in 0..w - 1 {
            let p = px[y * w + x];
            let dx = px[y * w + x + 1] - p;
            let dy = px[(y + 1) * w + x] - p;
            grad += dx * dx + dy * dy;
            n += 1;
        }
    }
    grad / n as f64 / var.max(1e-12)
}
