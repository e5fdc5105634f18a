use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;
use walmafa::metrics::quality;

use crate::error::{CliError, CliResult};
use crate::imageio::{ensure_dir, load_rgb, match_files, write_json};
use crate::Precision;

#[derive(Clone, Debug, Serialize)]
pub struct PairScore {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct MetricsReport {
    pub pairs: Vec<PairScore>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

/// PSNR and SSIM of every same-named pair in `a_dir` and `b_dir`.
pub fn run_metrics(a_dir: &Path, b_dir: &Path, out: Option<&Path>, precision: Precision) -> CliResult<MetricsReport> {
    let matched = match_files(a_dir, b_dir)?;
    let pairs: Vec<PairScore> = matched
        .par_iter()
        .map(|(name, pa, pb)| {
            let a = precision.round_map(load_rgb(pa)?);
            let b = precision.round_map(load_rgb(pb)?);
            if a.shape() != b.shape() {
                return Err(CliError::input(format!("{name}: images differ in size")));
            }
            let q = quality(&a, &b)?;
            Ok(PairScore {
                name: name.clone(),
                psnr: q.psnr,
                ssim: q.ssim,
            })
        })
        .collect::<CliResult<_>>()?;
    let n = pairs.len() as f64;
    let report = MetricsReport {
        mean_psnr: pairs.iter().map(|p| p.psnr).sum::<f64>() / n,
        mean_ssim: pairs.iter().map(|p| p.ssim).sum::<f64>() / n,
        pairs,
    };
    if let Some(dir) = out {
        ensure_dir(dir)?;
        write_json(&dir.join("metrics.json"), &report)?;
    }
    Ok(report)
}

pub fn print_report(r: &MetricsReport) {
    for p in &r.pairs {
        println!("{:<32} psnr {:>8.3} dB  ssim {:.4}", p.name, p.psnr, p.ssim);
    }
    println!("mean over {} pairs: psnr {:.3} dB  ssim {:.4}", r.pairs.len(), r.mean_psnr, r.mean_ssim);
}
