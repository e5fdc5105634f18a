//! Synthetic well-lit scenes and their gamma-darkened, noisy counterparts.
//! These are the bundled assets; `examples/make_samples.rs` regenerates them.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use walmafa::FeatureMap;

use crate::error::CliResult;
use crate::imageio::{ensure_dir, save_rgb};

pub const DARKEN_GAIN: f64 = 0.25;
pub const DARKEN_GAMMA: f64 = 1.8;
pub const NOISE_SIGMA: f64 = 0.01;
pub const TRAIN_PAIRS: usize = 8;
pub const TRAIN_SIZE: usize = 64;
/// The swap-experiment pair is deliberately not a multiple of 8 in width.
pub const PAIR_SIZE: (usize, usize) = (96, 124);

/// Smooth illumination, a few coloured discs and rectangles, and a striped
/// texture patch.
pub fn scene(seed: u64, h: usize, w: usize) -> FeatureMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: [f64; 3] = [rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7)];
    let tilt = (rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3));
    let discs: Vec<(f64, f64, f64, [f64; 3])> = (0..4)
        .map(|_| {
            let col = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
            (rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.08..0.22), col)
        })
        .collect();
    let rects: Vec<(f64, f64, f64, f64, [f64; 3])> = (0..3)
        .map(|_| {
            let (y0, x0) = (rng.gen_range(0.0..0.7), rng.gen_range(0.0..0.7));
            let col = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
            (y0, x0, y0 + rng.gen_range(0.1..0.3), x0 + rng.gen_range(0.1..0.3), col)
        })
        .collect();
    let period = rng.gen_range(3.0..7.0);
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::PI);
    let patch = (rng.gen_range(0.1..0.5), rng.gen_range(0.1..0.5));
    FeatureMap::from_fn(h, w, 3, |y, x, c| {
        let (v, u) = (y as f64 / h as f64, x as f64 / w as f64);
        let mut val = base[c] + tilt.0 * (v - 0.5) + tilt.1 * (u - 0.5);
        for &(y0, x0, y1, x1, col) in &rects {
            if v >= y0 && v < y1 && u >= x0 && u < x1 {
                val = 0.4 * val + 0.6 * col[c];
            }
        }
        for &(cy, cx, r, col) in &discs {
            let d = ((v - cy).powi(2) + (u - cx).powi(2)).sqrt();
            let t = ((r - d) * 40.0).clamp(0.0, 1.0);
            val = (1.0 - t) * val + t * col[c];
        }
        if v > patch.0 && v < patch.0 + 0.35 && u > patch.1 && u < patch.1 + 0.35 {
            let s = (x as f64 * angle.cos() + y as f64 * angle.sin()) * std::f64::consts::TAU / period;
            val += 0.15 * s.sin();
        }
        val.clamp(0.0, 1.0)
    })
}

/// `gain * x^gamma` plus Gaussian sensor noise.
pub fn darken(high: &FeatureMap, seed: u64) -> FeatureMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let noise = Normal::new(0.0, NOISE_SIGMA).expect("positive sigma");
    let data = high
        .data()
        .iter()
        .map(|&v| (DARKEN_GAIN * v.powf(DARKEN_GAMMA) + noise.sample(&mut rng)).clamp(0.0, 1.0))
        .collect();
    let (h, w, c) = high.shape();
    FeatureMap::from_vec(h, w, c, data).expect("same length")
}

/// Writes `pair/{low,high}.png` and `train/{low,high}/NN.png` under `root`.
pub fn write_bundle(root: &Path) -> CliResult<()> {
    let pair = root.join("pair");
    ensure_dir(&pair)?;
    let (h, w) = PAIR_SIZE;
    let high = scene(1000, h, w);
    save_rgb(&pair.join("high.png"), &high)?;
    save_rgb(&pair.join("low.png"), &darken(&high, 1000))?;
    for side in ["low", "high"] {
        ensure_dir(&root.join("train").join(side))?;
    }
    for k in 0..TRAIN_PAIRS as u64 {
        let high = scene(k, TRAIN_SIZE, TRAIN_SIZE);
        let name = format!("{k:02}.png");
        save_rgb(&root.join("train/high").join(&name), &high)?;
        save_rgb(&root.join("train/low").join(&name), &darken(&high, k))?;
    }
    Ok(())
}
