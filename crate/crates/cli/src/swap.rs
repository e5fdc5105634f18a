//! The frequency-component swap experiment: which parts of the well-lit
//! image's spectrum, transplanted into the low-light one, restore it.

use std::path::{Path, PathBuf};

use serde::Serialize;
use walmafa::fourier::{fft2d_polar, ifft2d_polar, swap_polar, PolarComponent, PolarSpectrum};
use walmafa::metrics::quality;
use walmafa::wavelet::{dwt2d, iwt2d, swap_bands, BandSelection, WaveletBands};
use walmafa::FeatureMap;

use crate::error::{CliError, CliResult};
use crate::imageio::{crop_to, ensure_dir, from_rgb8, load_rgb, to_rgb8, pad_to_multiple, save_gray, save_rgb, write_json};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    SwapLl,
    SwapAmplitude,
    SwapLlThenHigh,
    SwapAmplitudeThenPhase,
    SwapHighOnly,
    SwapPhaseOnly,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::SwapLl,
        Variant::SwapAmplitude,
        Variant::SwapLlThenHigh,
        Variant::SwapAmplitudeThenPhase,
        Variant::SwapHighOnly,
        Variant::SwapPhaseOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::SwapLl => "swap_ll",
            Variant::SwapAmplitude => "swap_amplitude",
            Variant::SwapLlThenHigh => "swap_ll_then_high",
            Variant::SwapAmplitudeThenPhase => "swap_amplitude_then_phase",
            Variant::SwapHighOnly => "swap_high_only",
            Variant::SwapPhaseOnly => "swap_phase_only",
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct Scores {
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct VariantReport {
    pub variant: Variant,
    pub image: PathBuf,
    /// SSIM map against the high image.
    pub ssim_map: PathBuf,
    pub vs_low: Scores,
    pub vs_high: Scores,
    /// Largest imaginary part dropped by the inverse FFT; zero for wavelet
    /// variants.
    pub max_imag_residual: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SwapReport {
    pub pair_id: String,
    pub height: usize,
    pub width: usize,
    pub low_vs_high: Scores,
    pub variants: Vec<VariantReport>,
}

impl SwapReport {
    pub fn variant(&self, v: Variant) -> &VariantReport {
        self.variants.iter().find(|r| r.variant == v).expect("every variant is reported")
    }
}

/// A variant image before clamping, plus the dropped imaginary residual.
pub struct SwapOutput {
    pub variant: Variant,
    pub image: FeatureMap,
    pub max_imag_residual: f64,
}

fn wavelet_variant(low: &WaveletBands, high: &WaveletBands, steps: &[BandSelection], h: usize, w: usize) -> CliResult<FeatureMap> {
    let mut bands = low.clone();
    for &which in steps {
        bands = swap_bands(&bands, high, which)?;
    }
    crop_to(&iwt2d(&bands)?, h, w)
}

fn fourier_variant(low: &PolarSpectrum, high: &PolarSpectrum, steps: &[PolarComponent]) -> CliResult<(FeatureMap, f64)> {
    let mut spec = low.clone();
    for &which in steps {
        spec = swap_polar(&spec, high, which)?;
    }
    let rec = ifft2d_polar(&spec)?;
    Ok((rec.image, rec.max_imag_residual))
}

/// All six variants of `low` with components taken from `high`. The wavelet
/// variants work on reflect-padded even-sized copies and are cropped back.
pub fn swap_variants(low: &FeatureMap, high: &FeatureMap) -> CliResult<Vec<SwapOutput>> {
    if low.shape() != high.shape() {
        return Err(CliError::input(format!(
            "low image is {}x{}, high image is {}x{}",
            low.height(),
            low.width(),
            high.height(),
            high.width()
        )));
    }
    let (h, w, _) = low.shape();
    let lb = dwt2d(&pad_to_multiple(low, 2)?)?;
    let hb = dwt2d(&pad_to_multiple(high, 2)?)?;
    let ls = fft2d_polar(low);
    let hs = fft2d_polar(high);
    use BandSelection::{High, Ll};
    use PolarComponent::{Amplitude, Phase};
    let mut out = Vec::with_capacity(6);
    for variant in Variant::ALL {
        let (image, max_imag_residual) = match variant {
            Variant::SwapLl => (wavelet_variant(&lb, &hb, &[Ll], h, w)?, 0.0),
            Variant::SwapLlThenHigh => (wavelet_variant(&lb, &hb, &[Ll, High], h, w)?, 0.0),
            Variant::SwapHighOnly => (wavelet_variant(&lb, &hb, &[High], h, w)?, 0.0),
            Variant::SwapAmplitude => fourier_variant(&ls, &hs, &[Amplitude])?,
            Variant::SwapAmplitudeThenPhase => fourier_variant(&ls, &hs, &[Amplitude, Phase])?,
            Variant::SwapPhaseOnly => fourier_variant(&ls, &hs, &[Phase])?,
        };
        if max_imag_residual > 1e-6 {
            log::warn!("{}: spectrum not Hermitian, dropped imaginary part up to {max_imag_residual:.3e}", variant.name());
        }
        out.push(SwapOutput {
            variant,
            image,
            max_imag_residual,
        });
    }
    Ok(out)
}

fn scores(a: &FeatureMap, b: &FeatureMap) -> CliResult<(Scores, FeatureMap)> {
    let q = quality(a, b)?;
    Ok((Scores { psnr: q.psnr, ssim: q.ssim }, q.ssim_map))
}

/// Runs the experiment, writing variant PNGs, SSIM maps and `swap_report.json`
/// into `out_dir`. Scores are computed on the 8-bit images as written.
pub fn run_swap(low_path: &Path, high_path: &Path, out_dir: &Path) -> CliResult<SwapReport> {
    let low = load_rgb(low_path)?;
    let high = load_rgb(high_path)?;
    let outputs = swap_variants(&low, &high)?;
    ensure_dir(out_dir)?;
    let pair_id = low_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "pair".into());
    let (low_vs_high, _) = scores(&low, &high)?;
    let mut variants = Vec::new();
    for o in outputs {
        let clamped = from_rgb8(&to_rgb8(&o.image));
        let (vs_low, _) = scores(&clamped, &low)?;
        let (vs_high, map) = scores(&clamped, &high)?;
        let image = out_dir.join(format!("{}.png", o.variant.name()));
        let ssim_map = out_dir.join(format!("{}_ssim_map.png", o.variant.name()));
        save_rgb(&image, &clamped)?;
        save_gray(&ssim_map, &map)?;
        variants.push(VariantReport {
            variant: o.variant,
            image,
            ssim_map,
            vs_low,
            vs_high,
            max_imag_residual: o.max_imag_residual,
        });
    }
    let report = SwapReport {
        pair_id,
        height: low.height(),
        width: low.width(),
        low_vs_high,
        variants,
    };
    write_json(&out_dir.join("swap_report.json"), &report)?;
    Ok(report)
}

pub fn print_report(r: &SwapReport) {
    println!("pair {} ({}x{})", r.pair_id, r.height, r.width);
    println!(
        "{:<26} {:>10} {:>8} {:>10} {:>8}",
        "variant", "psnr/low", "ssim/low", "psnr/high", "ssim/high"
    );
    println!(
        "{:<26} {:>10} {:>8} {:>10.3} {:>8.4}",
        "low (unchanged)", "-", "-", r.low_vs_high.psnr, r.low_vs_high.ssim
    );
    for v in &r.variants {
        println!(
            "{:<26} {:>10.3} {:>8.4} {:>10.3} {:>8.4}",
            v.variant.name(),
            v.vs_low.psnr,
            v.vs_low.ssim,
            v.vs_high.psnr,
            v.vs_high.ssim
        );
    }
}
