//! Seeded synthetic scenes: smooth low-rank backgrounds with light noise.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::hsi::HsiCube;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    /// Number of background materials.
    pub rank: usize,
    /// Uniform noise amplitude as a fraction of each band's range.
    pub noise: f64,
}

impl SceneConfig {
    pub fn new(height: usize, width: usize, bands: usize) -> Self {
        Self {
            height,
            width,
            bands,
            rank: 3,
            noise: 0.02,
        }
    }
}

/// Linear mix of `rank` smooth spectra with smooth, positive abundance maps,
/// plus per-band uniform noise of at most `noise` times the band's range.
pub fn smooth_scene(cfg: &SceneConfig, seed: u64) -> Result<HsiCube> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w, b) = (cfg.height, cfg.width, cfg.bands);
    let spectra: Vec<Vec<f64>> = (0..cfg.rank)
        .map(|_| {
            let (a, f, p) = (
                rng.random_range(0.2..0.8),
                rng.random_range(0.5..2.0),
                rng.random_range(0.0..TAU),
            );
            let slope = rng.random_range(-0.3..0.3);
            (0..b)
                .map(|k| {
                    let t = k as f64 / b.max(2).saturating_sub(1) as f64;
                    a + 0.25 * (TAU * f * t + p).sin() + slope * t
                })
                .collect()
        })
        .collect();
    let fields: Vec<[f64; 6]> = (0..cfg.rank)
        .map(|_| {
            [
                rng.random_range(0.5..1.5),
                rng.random_range(0.5..1.5),
                rng.random_range(0.0..TAU),
                rng.random_range(0.0..TAU),
                rng.random_range(0.3..1.0),
                rng.random_range(0.3..1.0),
            ]
        })
        .collect();
    let mut clean = vec![0.0f64; h * w * b];
    for r in 0..h {
        for c in 0..w {
            let (y, x) = (r as f64 / h as f64, c as f64 / w as f64);
            let raw: Vec<f64> = fields
                .iter()
                .map(|f| {
                    1.2 + f[4] * (TAU * f[0] * x + f[2]).sin() + f[5] * (TAU * f[1] * y + f[3]).cos()
                })
                .collect();
            let total: f64 = raw.iter().sum();
            for k in 0..b {
                let v: f64 = raw.iter().zip(&spectra).map(|(a, s)| a * s[k]).sum::<f64>() / total;
                clean[(k * h + r) * w + c] = v;
            }
        }
    }
    let mut data = Vec::with_capacity(clean.len());
    for band in clean.chunks(h * w) {
        let (lo, hi) = band
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, u), &v| (l.min(v), u.max(v)));
        let amp = cfg.noise * (hi - lo);
        for &v in band {
            let n = if amp > 0.0 { rng.random_range(-amp..=amp) } else { 0.0 };
            data.push((v + n) as f32);
        }
    }
    HsiCube::new(h, w, b, data)
}
