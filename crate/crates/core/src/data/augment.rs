//! Random resized crop, horizontal flip, color jitter and grayscale.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, CHANNELS};
use crate::tensor::Tensor;

const CROP_ATTEMPTS: usize = 10;
const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Crop area as a fraction of the image.
    pub crop_scale: (f64, f64),
    /// Crop width / height.
    pub crop_ratio: (f64, f64),
    pub flip_p: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    /// Fraction of a full turn the hue rotation may reach.
    pub hue: f64,
    pub jitter_p: f64,
    pub grayscale_p: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop_scale: (0.2, 1.0),
            crop_ratio: (3.0 / 4.0, 4.0 / 3.0),
            flip_p: 0.5,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            hue: 0.1,
            jitter_p: 0.8,
            grayscale_p: 0.1,
        }
    }
}

impl AugmentConfig {
    /// Every transformation disabled.
    pub fn identity() -> Self {
        Self {
            crop_scale: (1.0, 1.0),
            crop_ratio: (1.0, 1.0),
            flip_p: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            hue: 0.0,
            jitter_p: 0.0,
            grayscale_p: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::InvalidAugment(m));
        let (lo, hi) = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return bad(format!("crop scale range ({lo}, {hi}) must lie within (0, 1]"));
        }
        let (rlo, rhi) = self.crop_ratio;
        if !(rlo > 0.0 && rlo <= rhi) {
            return bad(format!("crop ratio range ({rlo}, {rhi}) invalid"));
        }
        for (name, p) in [
            ("flip_p", self.flip_p),
            ("jitter_p", self.jitter_p),
            ("grayscale_p", self.grayscale_p),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} is not a probability"));
            }
        }
        for (name, s) in [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
        ] {
            if !(0.0..=1.0).contains(&s) {
                return bad(format!("{name} strength {s} outside [0, 1]"));
            }
        }
        if !(0.0..=0.5).contains(&self.hue) {
            return bad(format!("hue strength {} outside [0, 0.5]", self.hue));
        }
        Ok(())
    }
}

/// Two independent draws of the augmentation applied to one `[S, S, 3]` image.
pub fn augment_pair(image: &Tensor, config: &AugmentConfig, rng: &mut ChaCha8Rng) -> (Tensor, Tensor) {
    let a = augment_image(image, config, rng);
    let b = augment_image(image, config, rng);
    (a, b)
}

pub fn augment_image(image: &Tensor, config: &AugmentConfig, rng: &mut ChaCha8Rng) -> Tensor {
    let size = image.shape()[0];
    let (cx, cy, cw, ch) = crop_window(size, config, rng);
    let mut px = resize_crop(image.data(), size, cx, cy, cw, ch);
    if rng.gen::<f64>() < config.flip_p {
        flip(&mut px, size);
    }
    if rng.gen::<f64>() < config.jitter_p {
        jitter(&mut px, config, rng);
    }
    if rng.gen::<f64>() < config.grayscale_p {
        for p in px.chunks_exact_mut(CHANNELS) {
            let g = luma(p);
            p.fill(g);
        }
    }
    Tensor::new(image.shape().to_vec(), px).expect("finite pixels")
}

fn crop_window(size: usize, config: &AugmentConfig, rng: &mut ChaCha8Rng) -> (usize, usize, usize, usize) {
    let area = (size * size) as f64;
    let (lo, hi) = config.crop_scale;
    let (rlo, rhi) = (config.crop_ratio.0.ln(), config.crop_ratio.1.ln());
    for _ in 0..CROP_ATTEMPTS {
        let target = area * if lo < hi { rng.gen_range(lo..=hi) } else { lo };
        let ratio = if rlo < rhi { rng.gen_range(rlo..=rhi) } else { rlo }.exp();
        let w = (target * ratio).sqrt().round() as usize;
        let h = (target / ratio).sqrt().round() as usize;
        if w >= 1 && h >= 1 && w <= size && h <= size {
            let x = rng.gen_range(0..=size - w);
            let y = rng.gen_range(0..=size - h);
            return (x, y, w, h);
        }
    }
    (0, 0, size, size)
}

/// Bilinear resampling of a crop window back to `size × size`, pixel
/// centers aligned so a full-image window is reproduced exactly.
fn resize_crop(src: &[f64], size: usize, x0: usize, y0: usize, w: usize, h: usize) -> Vec<f64> {
    let mut out = vec![0.0; size * size * CHANNELS];
    let sample = |pos: usize, extent: usize| -> (usize, usize, f64) {
        let s = ((pos as f64 + 0.5) * extent as f64 / size as f64 - 0.5).clamp(0.0, (extent - 1) as f64);
        let i = s.floor() as usize;
        let j = (i + 1).min(extent - 1);
        (i, j, s - i as f64)
    };
    for y in 0..size {
        let (ya, yb, fy) = sample(y, h);
        for x in 0..size {
            let (xa, xb, fx) = sample(x, w);
            let at = |yy: usize, xx: usize, c: usize| src[((y0 + yy) * size + x0 + xx) * CHANNELS + c];
            for c in 0..CHANNELS {
                let top = at(ya, xa, c) * (1.0 - fx) + at(ya, xb, c) * fx;
                let bot = at(yb, xa, c) * (1.0 - fx) + at(yb, xb, c) * fx;
                out[(y * size + x) * CHANNELS + c] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

fn flip(px: &mut [f64], size: usize) {
    for row in px.chunks_exact_mut(size * CHANNELS) {
        for x in 0..size / 2 {
            for c in 0..CHANNELS {
                row.swap(x * CHANNELS + c, (size - 1 - x) * CHANNELS + c);
            }
        }
    }
}

fn luma(p: &[f64]) -> f64 {
    p.iter().zip(&LUMA).map(|(a, b)| a * b).sum()
}

fn factor(strength: f64, rng: &mut ChaCha8Rng) -> f64 {
    if strength > 0.0 {
        rng.gen_range(1.0 - strength..=1.0 + strength)
    } else {
        1.0
    }
}

fn jitter(px: &mut [f64], config: &AugmentConfig, rng: &mut ChaCha8Rng) {
    let mut order = [0usize, 1, 2, 3];
    order.shuffle(rng);
    for op in order {
        match op {
            0 => {
                let f = factor(config.brightness, rng);
                px.iter_mut().for_each(|v| *v *= f);
            }
            1 => {
                let f = factor(config.contrast, rng);
                let m = px.chunks_exact(CHANNELS).map(luma).sum::<f64>() / (px.len() / CHANNELS) as f64;
                px.iter_mut().for_each(|v| *v = (*v - m) * f + m);
            }
            2 => {
                let f = factor(config.saturation, rng);
                for p in px.chunks_exact_mut(CHANNELS) {
                    let g = luma(p);
                    p.iter_mut().for_each(|v| *v = (*v - g) * f + g);
                }
            }
            _ => {
                if config.hue > 0.0 {
                    let theta = 2.0 * PI * rng.gen_range(-config.hue..=config.hue);
                    let m = hue_rotation(theta);
                    for p in px.chunks_exact_mut(CHANNELS) {
                        let q = [p[0], p[1], p[2]];
                        for (r, row) in m.iter().enumerate() {
                            p[r] = row[0] * q[0] + row[1] * q[1] + row[2] * q[2];
                        }
                    }
                }
            }
        }
        px.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }
}

/// Rotation by `theta` about the gray axis `(1, 1, 1)/√3`.
fn hue_rotation(theta: f64) -> [[f64; 3]; 3] {
    let (c, s) = (theta.cos(), theta.sin());
    let k = (1.0 - c) / 3.0;
    let r = s / 3f64.sqrt();
    [[c + k, k - r, k + r], [k + r, c + k, k - r], [k - r, k + r, c + k]]
}
