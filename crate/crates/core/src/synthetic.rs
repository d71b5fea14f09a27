//! Deterministic synthetic crack images.
//!
//! A crack is a random walk with slowly drifting heading, drawn a little
//! darker than a noisy, gently shaded background.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::mask::BinaryMask;
use crate::tensor::Tensor;
use crate::trainer::Sample;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub height: usize,
    pub width: usize,
    /// Inclusive range of cracks per image.
    pub min_cracks: usize,
    pub max_cracks: usize,
    /// Crack half-width in pixels (a pixel is crack when its distance to the
    /// path is at most this).
    pub half_width: f64,
    /// Standard deviation-ish amplitude of the background noise.
    pub noise: f64,
    /// Brightness drop of crack pixels.
    pub contrast: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            height: 64,
            width: 64,
            min_cracks: 1,
            max_cracks: 2,
            half_width: 1.0,
            noise: 0.05,
            contrast: 0.35,
        }
    }
}

fn walk<R: Rng>(rng: &mut R, h: f64, w: f64) -> Vec<(f64, f64)> {
    // Start on a random edge, heading roughly inward.
    let edge = rng.random_range(0..4);
    let (mut y, mut x, mut heading) = match edge {
        0 => (0.0, rng.random_range(0.0..w), core::f64::consts::FRAC_PI_2),
        1 => (h - 1.0, rng.random_range(0.0..w), -core::f64::consts::FRAC_PI_2),
        2 => (rng.random_range(0.0..h), 0.0, 0.0),
        _ => (rng.random_range(0.0..h), w - 1.0, core::f64::consts::PI),
    };
    heading += rng.random_range(-0.6..0.6);
    let mut points = alloc::vec![(y, x)];
    let max_len = 4 * (h + w) as usize;
    for _ in 0..max_len {
        heading += rng.random_range(-0.35..0.35);
        y += libm::sin(heading);
        x += libm::cos(heading);
        if y < -1.0 || x < -1.0 || y > h || x > w {
            break;
        }
        points.push((y, x));
    }
    points
}

fn segment_distance(py: f64, px: f64, (ay, ax): (f64, f64), (by, bx): (f64, f64)) -> f64 {
    let (dy, dx) = (by - ay, bx - ax);
    let len2 = dy * dy + dx * dx;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((py - ay) * dy + (px - ax) * dx) / len2).clamp(0.0, 1.0)
    };
    let (qy, qx) = (ay + t * dy - py, ax + t * dx - px);
    libm::sqrt(qy * qy + qx * qx)
}

/// One RGB image in `[0,1]` and its crack mask, fully determined by `seed`.
pub fn generate(cfg: &SyntheticConfig, seed: u64) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (cfg.height, cfg.width);
    let mut mask = BinaryMask::zeros(h, w);
    let n = rng.random_range(cfg.min_cracks..=cfg.max_cracks.max(cfg.min_cracks));
    for _ in 0..n {
        let path = walk(&mut rng, h as f64, w as f64);
        let reach = libm::ceil(cfg.half_width) as i64 + 1;
        for pair in path.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            let y0 = (a.0.min(b.0) as i64 - reach).max(0);
            let y1 = (a.0.max(b.0) as i64 + reach).min(h as i64 - 1);
            let x0 = (a.1.min(b.1) as i64 - reach).max(0);
            let x1 = (a.1.max(b.1) as i64 + reach).min(w as i64 - 1);
            for yy in y0..=y1 {
                for xx in x0..=x1 {
                    if segment_distance(yy as f64, xx as f64, a, b) <= cfg.half_width {
                        mask.set(yy as usize, xx as usize, true);
                    }
                }
            }
        }
    }
    let base: [f64; 3] = core::array::from_fn(|_| rng.random_range(0.5..0.7));
    let (gy, gx) = (rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1));
    let mut image = Tensor::zeros(&[3, h, w]);
    let data = image.data_mut();
    for y in 0..h {
        for x in 0..w {
            let shade = gy * y as f64 / h as f64 + gx * x as f64 / w as f64;
            let grain = rng.random_range(-cfg.noise..=cfg.noise);
            let crack = if mask.get(y, x) { cfg.contrast } else { 0.0 };
            for (c, &b) in base.iter().enumerate() {
                let tint = rng.random_range(-cfg.noise..=cfg.noise) * 0.3;
                data[c * h * w + y * w + x] = (b + shade + grain + tint - crack).clamp(0.0, 1.0);
            }
        }
    }
    Sample { image, mask }
}

/// `count` samples with seeds `seed, seed + 1, ...`.
pub fn dataset(cfg: &SyntheticConfig, count: usize, seed: u64) -> Vec<Sample> {
    (0..count as u64).map(|i| generate(cfg, seed.wrapping_add(i))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_nonempty() {
        let cfg = SyntheticConfig::default();
        let a = generate(&cfg, 5);
        assert_eq!(a, generate(&cfg, 5));
        assert_ne!(a, generate(&cfg, 6));
        let frac = a.mask.count() as f64 / (64.0 * 64.0);
        assert!(frac > 0.01 && frac < 0.4, "crack fraction {frac}");
        assert!(a.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
