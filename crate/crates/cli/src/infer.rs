use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use walmafa::checkpoint::load_params;
use walmafa::config::KeyValues;
use walmafa::metrics::quality;
use walmafa::model::{ModelConfig, WalMaFa, SIZE_MULTIPLE};
use walmafa::{FeatureMap, ParamStore};

use crate::error::{at, CliError, CliResult};
use crate::imageio::{crop_to, ensure_dir, file_name, list_pngs, load_rgb, pad_to_multiple, save_rgb, write_json};
use crate::swap::Scores;
use crate::train::sidecar;
use crate::Precision;

#[derive(Clone, Debug)]
pub struct InferOptions {
    pub checkpoint: PathBuf,
    /// PNG files or directories of them.
    pub inputs: Vec<PathBuf>,
    pub out: PathBuf,
    /// A reference PNG (single input) or a directory matched by file name.
    pub reference: Option<PathBuf>,
    /// Overrides the config stored next to the checkpoint.
    pub config: Option<PathBuf>,
    pub precision: Precision,
}

#[derive(Clone, Debug, Serialize)]
pub struct ImageReport {
    pub input: PathBuf,
    pub output: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference: Option<PathBuf>,
    /// Enhanced image against the reference.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub enhanced: Option<Scores>,
    /// Unprocessed input against the reference.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input_scores: Option<Scores>,
}

#[derive(Clone, Debug, Serialize)]
pub struct InferReport {
    pub checkpoint: PathBuf,
    pub images: Vec<ImageReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_enhanced: Option<Scores>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_input: Option<Scores>,
}

/// Loads a checkpoint and the config stored beside it (or `config`), and
/// checks that they describe the same network.
pub fn load_model(checkpoint: &Path, config: Option<&Path>) -> CliResult<(WalMaFa, ParamStore)> {
    let cfg_path = config.map(Path::to_path_buf).unwrap_or_else(|| sidecar(checkpoint));
    if !cfg_path.exists() {
        return Err(CliError::input(format!(
            "no model config at {}; pass --config",
            cfg_path.display()
        )));
    }
    let kv = KeyValues::load(&cfg_path).map_err(at(&cfg_path))?;
    let model = WalMaFa::new(ModelConfig::from_key_values(&kv)?)?;
    let params = load_params(checkpoint).map_err(at(checkpoint))?;
    model.check_params(&params)?;
    Ok((model, params))
}

/// Reflect-pads to the network's size multiple, runs it, crops back.
pub fn enhance(model: &WalMaFa, params: &ParamStore, image: &FeatureMap) -> CliResult<FeatureMap> {
    let padded = pad_to_multiple(image, SIZE_MULTIPLE)?;
    let out = model.forward(params, &padded)?;
    crop_to(&out.enhanced, image.height(), image.width())
}

fn expand_inputs(inputs: &[PathBuf]) -> CliResult<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            files.extend(list_pngs(p)?);
        } else {
            files.push(p.clone());
        }
    }
    if files.is_empty() {
        return Err(CliError::input("no input images"));
    }
    Ok(files)
}

fn reference_for(reference: &Option<PathBuf>, input: &Path, single: bool) -> CliResult<Option<PathBuf>> {
    let Some(r) = reference else { return Ok(None) };
    if r.is_dir() {
        let p = r.join(file_name(input));
        if !p.is_file() {
            return Err(CliError::input(format!("no reference {} for {}", p.display(), input.display())));
        }
        Ok(Some(p))
    } else if single {
        Ok(Some(r.clone()))
    } else {
        Err(CliError::input("with several inputs --reference must be a directory"))
    }
}

fn mean_scores(s: impl Iterator<Item = Scores>) -> Option<Scores> {
    let all: Vec<Scores> = s.collect();
    if all.is_empty() {
        return None;
    }
    let n = all.len() as f64;
    Some(Scores {
        psnr: all.iter().map(|s| s.psnr).sum::<f64>() / n,
        ssim: all.iter().map(|s| s.ssim).sum::<f64>() / n,
    })
}

pub fn run_infer(opts: &InferOptions) -> CliResult<InferReport> {
    let (model, mut params) = load_model(&opts.checkpoint, opts.config.as_deref())?;
    opts.precision.round_params(&mut params);
    let files = expand_inputs(&opts.inputs)?;
    let single = files.len() == 1;
    let refs: Vec<Option<PathBuf>> = files
        .iter()
        .map(|f| reference_for(&opts.reference, f, single))
        .collect::<CliResult<_>>()?;
    ensure_dir(&opts.out)?;
    let images: Vec<ImageReport> = files
        .par_iter()
        .zip(refs.into_par_iter())
        .map(|(input, reference)| -> CliResult<ImageReport> {
            let image = opts.precision.round_map(load_rgb(input)?);
            let enhanced = opts.precision.round_map(enhance(&model, &params, &image)?.map(|v| v.clamp(0.0, 1.0)));
            let output = opts.out.join(file_name(input));
            save_rgb(&output, &enhanced)?;
            let (enh_scores, in_scores) = match &reference {
                Some(r) => {
                    let target = opts.precision.round_map(load_rgb(r)?);
                    if target.shape() != image.shape() {
                        return Err(CliError::input(format!("{} and {} differ in size", input.display(), r.display())));
                    }
                    let qe = quality(&enhanced, &target)?;
                    let qi = quality(&image, &target)?;
                    (
                        Some(Scores { psnr: qe.psnr, ssim: qe.ssim }),
                        Some(Scores { psnr: qi.psnr, ssim: qi.ssim }),
                    )
                }
                None => (None, None),
            };
            Ok(ImageReport {
                input: input.clone(),
                output,
                reference,
                enhanced: enh_scores,
                input_scores: in_scores,
            })
        })
        .collect::<CliResult<_>>()?;
    let report = InferReport {
        checkpoint: opts.checkpoint.clone(),
        mean_enhanced: mean_scores(images.iter().filter_map(|i| i.enhanced)),
        mean_input: mean_scores(images.iter().filter_map(|i| i.input_scores)),
        images,
    };
    write_json(&opts.out.join("infer_report.json"), &report)?;
    Ok(report)
}

pub fn print_report(r: &InferReport) {
    for img in &r.images {
        match (img.enhanced, img.input_scores) {
            (Some(e), Some(i)) => println!(
                "{} -> {}  psnr {:.3} dB (input {:.3})  ssim {:.4} (input {:.4})",
                img.input.display(),
                img.output.display(),
                e.psnr,
                i.psnr,
                e.ssim,
                i.ssim
            ),
            _ => println!("{} -> {}", img.input.display(), img.output.display()),
        }
    }
    if let (Some(e), Some(i)) = (r.mean_enhanced, r.mean_input) {
        println!(
            "mean over {} images: psnr {:.3} dB (input {:.3})  ssim {:.4} (input {:.4})",
            r.images.len(),
            e.psnr,
            i.psnr,
            e.ssim,
            i.ssim
        );
    }
}
