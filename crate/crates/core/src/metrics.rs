//! PSNR and single-scale SSIM.

use crate::error::{Error, Result};
use crate::tensor::FeatureMap;

/// Reported in place of +inf for identical images.
pub const PSNR_CAP_DB: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

#[derive(Clone, Debug, PartialEq)]
pub struct QualityReport {
    pub psnr: f64,
    pub ssim: f64,
    /// Local SSIM averaged over channels, `H x W x 1`.
    pub ssim_map: FeatureMap,
}

pub fn mse(a: &FeatureMap, b: &FeatureMap) -> Result<f64> {
    a.expect_same_shape(b, "mse")?;
    let n = a.data().len() as f64;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n)
}

/// `10 log10(peak^2 / MSE)`, or [`PSNR_CAP_DB`] when the images are equal.
pub fn psnr(a: &FeatureMap, b: &FeatureMap, peak: f64) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok(10.0 * (peak * peak / m).log10())
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let r = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Half-sample symmetric reflection: `... b a | a b c ... z | z y ...`.
#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

/// Separable Gaussian filtering of one plane.
fn blur(plane: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        let row = &plane[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0.0;
            for (j, kv) in k.iter().enumerate() {
                acc += kv * row[reflect(x as isize + j as isize - r, w)];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, kv) in k.iter().enumerate() {
                acc += kv * tmp[reflect(y as isize + j as isize - r, h) * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// SSIM for a dynamic range of 1. Returns `(mean, map)`.
pub fn ssim(a: &FeatureMap, b: &FeatureMap) -> Result<(f64, FeatureMap)> {
    a.expect_same_shape(b, "ssim")?;
    let (h, w, c) = a.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::param(format!(
            "ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let c1 = K1 * K1;
    let c2 = K2 * K2;
    let k = gaussian_kernel();
    let n = h * w;
    let mut map = vec![0.0; n];
    for ch in 0..c {
        let pa = a.plane(ch);
        let pb = b.plane(ch);
        let aa: Vec<f64> = pa.iter().map(|v| v * v).collect();
        let bb: Vec<f64> = pb.iter().map(|v| v * v).collect();
        let ab: Vec<f64> = pa.iter().zip(pb).map(|(x, y)| x * y).collect();
        let mu_a = blur(pa, h, w, &k);
        let mu_b = blur(pb, h, w, &k);
        let e_aa = blur(&aa, h, w, &k);
        let e_bb = blur(&bb, h, w, &k);
        let e_ab = blur(&ab, h, w, &k);
        for i in 0..n {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
            let den = (ma * ma + mb * mb + c1) * (va + vb + c2);
            map[i] += num / den;
        }
    }
    map.iter_mut().for_each(|v| *v /= c as f64);
    let mean = map.iter().sum::<f64>() / n as f64;
    Ok((mean, FeatureMap::from_vec(h, w, 1, map)?))
}

pub fn quality(a: &FeatureMap, b: &FeatureMap) -> Result<QualityReport> {
    let psnr = psnr(a, b, 1.0)?;
    let (ssim, ssim_map) = ssim(a, b)?;
    Ok(QualityReport { psnr, ssim, ssim_map })
}
