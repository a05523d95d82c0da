//! Rasterized class glyphs over striped background textures.

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Sample, CHANNELS};
use crate::tensor::Tensor;

const SHAPES: usize = 10;

/// Glyph membership for box coordinates `u, v ∈ [-1, 1]` (v grows downward).
fn inside(shape: usize, u: f64, v: f64) -> bool {
    let r2 = u * u + v * v;
    let within = |a: f64, lo: f64, hi: f64| a >= lo && a <= hi;
    match shape {
        0 => r2 <= 0.81,
        1 => u.abs() <= 0.75 && v.abs() <= 0.75,
        2 => within(v, -0.8, 0.8) && u.abs() <= (v + 0.8) / 1.6 * 0.9,
        3 => (u.abs() <= 0.25 && v.abs() <= 0.9) || (v.abs() <= 0.25 && u.abs() <= 0.9),
        4 => within(r2, 0.25, 0.81),
        5 => u.abs() + v.abs() <= 0.9,
        6 => u.abs() <= 0.9 && ((v - 0.45).abs() <= 0.2 || (v + 0.45).abs() <= 0.2),
        7 => ((u - v).abs() <= 0.3 || (u + v).abs() <= 0.3) && u.abs() <= 0.9 && v.abs() <= 0.9,
        8 => (within(u, -0.9, -0.4) && v.abs() <= 0.9) || (within(v, 0.4, 0.9) && u.abs() <= 0.9),
        _ => (within(v, -0.9, -0.4) && u.abs() <= 0.9) || (u.abs() <= 0.25 && v.abs() <= 0.9),
    }
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6 % 2.0 - 1.0).abs());
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Base color of background id `b`: evenly spaced hues.
pub(super) fn background_color(b: usize, classes: usize) -> [f64; 3] {
    hsv(b as f64 / classes as f64, 0.65, 0.75)
}

pub(super) fn render(size: usize, classes: usize, label: usize, background: usize, rng: &mut ChaCha8Rng) -> Sample {
    let base = background_color(background, classes);
    let angle = PI * background as f64 / classes as f64;
    let freq = 2.0 + (background % 3) as f64;
    let phase = rng.gen_range(0.0..2.0 * PI);
    let (ca, sa) = (angle.cos(), angle.sin());

    let lo = size / 2;
    let hi = size * 3 / 4;
    let side = rng.gen_range(lo..=hi);
    let x0 = rng.gen_range(0..=size - side);
    let y0 = rng.gen_range(0..=size - side);
    let mut fg = [0.0; 3];
    for _ in 0..20 {
        fg = [rng.gen(), rng.gen(), rng.gen()];
        let d: f64 = fg.iter().zip(&base).map(|(a, b)| (a - b).powi(2)).sum();
        if d.sqrt() >= 0.5 {
            break;
        }
    }
    let shape = label % SHAPES;
    let cut = label / SHAPES;

    let mut data = vec![0.0; size * size * CHANNELS];
    let mut mask = vec![false; size * size];
    for y in 0..size {
        for x in 0..size {
            let k = y * size + x;
            let in_box = x >= x0 && x < x0 + side && y >= y0 && y < y0 + side;
            let hit = in_box && {
                let u = ((x - x0) as f64 + 0.5) / side as f64 * 2.0 - 1.0;
                let v = ((y - y0) as f64 + 0.5) / side as f64 * 2.0 - 1.0;
                inside(shape, u, v) && (cut == 0 || ((y - y0) / (cut + 1)).is_multiple_of(2))
            };
            mask[k] = hit;
            let px = &mut data[k * CHANNELS..(k + 1) * CHANNELS];
            if hit {
                for (p, c) in px.iter_mut().zip(&fg) {
                    *p = (c + rng.gen_range(-0.03..0.03)).clamp(0.0, 1.0);
                }
            } else {
                let t = (x as f64 * ca + y as f64 * sa) / size as f64;
                let wave = 1.0 + 0.25 * (2.0 * PI * freq * t + phase).sin();
                for (p, c) in px.iter_mut().zip(&base) {
                    *p = (c * wave + rng.gen_range(-0.03..0.03)).clamp(0.0, 1.0);
                }
            }
        }
    }
    Sample {
        image: Tensor::new(vec![size, size, CHANNELS], data).expect("finite pixels"),
        label,
        mask: Some(mask),
        background: Some(background),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn every_shape_has_area_and_differs() {
        let grid: Vec<Vec<bool>> = (0..SHAPES)
            .map(|s| {
                (0..400)
                    .map(|k| {
                        let u = (k % 20) as f64 / 10.0 - 0.95;
                        let v = (k / 20) as f64 / 10.0 - 0.95;
                        inside(s, u, v)
                    })
                    .collect()
            })
            .collect();
        for (i, g) in grid.iter().enumerate() {
            assert!(g.iter().filter(|&&b| b).count() > 40, "shape {i} too small");
            for h in &grid[i + 1..] {
                assert_ne!(g, h);
            }
        }
    }

    #[test]
    fn mask_matches_rendered_colors() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = render(32, 10, 3, 7, &mut rng);
        let mask = s.mask.unwrap();
        assert!(mask.iter().any(|&m| m) && mask.iter().any(|&m| !m));
    }

    #[test]
    fn palette_is_distinct() {
        for a in 0..10 {
            for b in a + 1..10 {
                assert_ne!(background_color(a, 10), background_color(b, 10));
            }
        }
    }
}
