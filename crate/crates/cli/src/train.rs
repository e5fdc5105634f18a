//! Toy-scale training on a directory of `low/` and `high/` PNG pairs.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use walmafa::checkpoint::save_params;
use walmafa::config::KeyValues;
use walmafa::metrics::psnr;
use walmafa::model::{LossRecord, ModelConfig, WalMaFa, SIZE_MULTIPLE};
use walmafa::train::{train_step, AdamState, TrainConfig};
use walmafa::{FeatureMap, ParamStore};

use crate::error::{at, CliError, CliResult};
use crate::imageio::{crop_to, ensure_dir, load_rgb, match_files, pad_to_multiple, write_json};
use crate::Precision;

/// Keys accepted in a training config besides the model and optimizer ones.
pub const EXTRA_KEYS: [&str; 1] = ["eval_every"];
pub const DEFAULT_EVAL_EVERY: usize = 20;

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub data: PathBuf,
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: u64,
    pub precision: Precision,
    /// Print one line per step.
    pub verbose: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Losses {
    pub total: f64,
    pub charbonnier: f64,
    pub wavelet: f64,
    pub fourier: f64,
}

impl From<LossRecord> for Losses {
    fn from(r: LossRecord) -> Self {
        Losses {
            total: r.total,
            charbonnier: r.charbonnier,
            wavelet: r.wavelet,
            fourier: r.fourier,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct StepLog {
    pub step: usize,
    pub learning_rate: f64,
    #[serde(flatten)]
    pub losses: Losses,
}

/// Full-image evaluation after `step` updates.
#[derive(Clone, Debug, Serialize)]
pub struct EvalLog {
    pub step: usize,
    #[serde(flatten)]
    pub losses: Losses,
    /// Mean PSNR of the enhanced images against the high images.
    pub psnr: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainReport {
    pub seed: u64,
    pub precision: Precision,
    pub pairs: Vec<String>,
    pub parameter_count: usize,
    pub steps: Vec<StepLog>,
    pub evals: Vec<EvalLog>,
    pub best_step: usize,
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
    /// Mean PSNR of the unprocessed low images against the high images.
    pub psnr_low: f64,
    pub seconds: f64,
}

impl TrainReport {
    pub fn initial(&self) -> &EvalLog {
        &self.evals[0]
    }

    pub fn last(&self) -> &EvalLog {
        self.evals.last().expect("evaluated at step 0")
    }
}

/// Model and optimizer settings from an optional config file. Unknown keys
/// are rejected.
pub fn load_config(path: Option<&Path>) -> CliResult<(ModelConfig, TrainConfig, usize)> {
    let kv = match path {
        Some(p) => KeyValues::load(p).map_err(at(p))?,
        None => KeyValues::new(),
    };
    let known: Vec<&str> = ModelConfig::KEYS
        .iter()
        .chain(TrainConfig::KEYS.iter())
        .chain(EXTRA_KEYS.iter())
        .copied()
        .collect();
    kv.reject_unknown(&known)?;
    let eval_every = kv.parsed("eval_every")?.unwrap_or(DEFAULT_EVAL_EVERY);
    if eval_every == 0 {
        return Err(CliError::input("eval_every must be positive"));
    }
    Ok((ModelConfig::from_key_values(&kv)?, TrainConfig::from_key_values(&kv)?, eval_every))
}

/// Path of the config written next to a checkpoint.
pub fn sidecar(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint.as_os_str().to_owned();
    name.push(".cfg");
    PathBuf::from(name)
}

pub struct Pair {
    pub name: String,
    pub low: FeatureMap,
    pub high: FeatureMap,
}

/// Loads `dir/low/*.png` with the same-named `dir/high/*.png`.
pub fn load_pairs(dir: &Path, precision: Precision) -> CliResult<Vec<Pair>> {
    let matched = match_files(&dir.join("low"), &dir.join("high"))?;
    matched
        .into_iter()
        .map(|(name, lp, hp)| {
            let low = precision.round_map(load_rgb(&lp)?);
            let high = precision.round_map(load_rgb(&hp)?);
            if low.shape() != high.shape() {
                return Err(CliError::input(format!("{name}: low and high images differ in size")));
            }
            Ok(Pair { name, low, high })
        })
        .collect()
}

fn random_crop(rng: &mut ChaCha8Rng, pair: &Pair, size: usize) -> CliResult<(FeatureMap, FeatureMap)> {
    let (h, w, _) = pair.low.shape();
    let top = rng.gen_range(0..=h - size);
    let left = rng.gen_range(0..=w - size);
    Ok((pair.low.crop(top, left, size, size)?, pair.high.crop(top, left, size, size)?))
}

/// Mean losses and PSNR over whole images, each reflect-padded to the size
/// multiple the network needs.
pub fn evaluate(model: &WalMaFa, params: &ParamStore, pairs: &[Pair]) -> CliResult<(Losses, f64)> {
    let per_pair: Vec<(LossRecord, f64)> = pairs
        .par_iter()
        .map(|p| -> CliResult<(LossRecord, f64)> {
            let low = pad_to_multiple(&p.low, SIZE_MULTIPLE)?;
            let high = pad_to_multiple(&p.high, SIZE_MULTIPLE)?;
            let record = model.losses(params, &low, &high)?;
            let out = model.forward(params, &low)?;
            let enhanced = crop_to(&out.enhanced, p.high.height(), p.high.width())?.map(|v| v.clamp(0.0, 1.0));
            Ok((record, psnr(&enhanced, &p.high, 1.0)?))
        })
        .collect::<CliResult<_>>()?;
    let n = per_pair.len() as f64;
    let mut acc = Losses {
        total: 0.0,
        charbonnier: 0.0,
        wavelet: 0.0,
        fourier: 0.0,
    };
    let mut mean_psnr = 0.0;
    for (r, p) in &per_pair {
        acc.total += r.total / n;
        acc.charbonnier += r.charbonnier / n;
        acc.wavelet += r.wavelet / n;
        acc.fourier += r.fourier / n;
        mean_psnr += p / n;
    }
    if !acc.total.is_finite() {
        return Err(CliError::Numeric(format!("evaluation loss is {}", acc.total)));
    }
    Ok((acc, mean_psnr))
}

fn save_checkpoint(path: &Path, params: &ParamStore, kv: &KeyValues, precision: Precision) -> CliResult<()> {
    save_params(params, path, precision.dtype()).map_err(at(path))?;
    let cfg = sidecar(path);
    kv.save(&cfg).map_err(at(&cfg))
}

pub fn run_train(opts: &TrainOptions) -> CliResult<TrainReport> {
    let start = Instant::now();
    let (model_cfg, train_cfg, eval_every) = load_config(opts.config.as_deref())?;
    let pairs = load_pairs(&opts.data, opts.precision)?;
    if pairs.is_empty() {
        return Err(CliError::input(format!("no training pairs in {}", opts.data.display())));
    }
    let crop = train_cfg.crop_size;
    if let Some(p) = pairs.iter().find(|p| p.low.height() < crop || p.low.width() < crop) {
        return Err(CliError::input(format!(
            "{} is {}x{}, smaller than crop_size {crop}",
            p.name,
            p.low.height(),
            p.low.width()
        )));
    }
    let model = WalMaFa::new(model_cfg.clone())?;
    let mut params = model.init_params(opts.seed)?;
    opts.precision.round_params(&mut params);
    let mut kv = model_cfg.to_key_values();
    kv.extend(&train_cfg.to_key_values());
    kv.set("eval_every", eval_every);

    ensure_dir(&opts.out)?;
    let best_path = opts.out.join("best.ckpt");
    let last_path = opts.out.join("last.ckpt");
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(1));
    let mut order: Vec<usize> = Vec::new();
    let mut state = AdamState::new();
    let mut steps = Vec::with_capacity(train_cfg.steps);
    let mut evals = Vec::new();

    let psnr_low = pairs.iter().map(|p| psnr(&p.low, &p.high, 1.0)).sum::<walmafa::Result<f64>>()? / pairs.len() as f64;
    let (losses, mean_psnr) = evaluate(&model, &params, &pairs)?;
    print_eval(0, &losses, mean_psnr);
    evals.push(EvalLog {
        step: 0,
        losses,
        psnr: mean_psnr,
    });
    save_checkpoint(&best_path, &params, &kv, opts.precision)?;
    let mut best = (0, losses.charbonnier);

    for step in 0..train_cfg.steps {
        let mut batch = Vec::with_capacity(train_cfg.batch_size);
        for _ in 0..train_cfg.batch_size {
            if order.is_empty() {
                order = (0..pairs.len()).collect();
                order.shuffle(&mut rng);
            }
            let i = order.pop().expect("refilled above");
            batch.push(random_crop(&mut rng, &pairs[i], crop)?);
        }
        let lr = train_cfg.learning_rate_at(state.step as usize);
        let record = train_step(&model, &mut params, &batch, &mut state, &train_cfg)?;
        opts.precision.round_params(&mut params);
        let log = StepLog {
            step,
            learning_rate: lr,
            losses: record.into(),
        };
        if opts.verbose {
            print_step(&log);
        }
        steps.push(log);

        let done = step + 1;
        if done % eval_every == 0 || done == train_cfg.steps {
            let (losses, mean_psnr) = evaluate(&model, &params, &pairs)?;
            print_eval(done, &losses, mean_psnr);
            evals.push(EvalLog {
                step: done,
                losses,
                psnr: mean_psnr,
            });
            if losses.charbonnier < best.1 {
                best = (done, losses.charbonnier);
                save_checkpoint(&best_path, &params, &kv, opts.precision)?;
            }
        }
    }
    save_checkpoint(&last_path, &params, &kv, opts.precision)?;

    let report = TrainReport {
        seed: opts.seed,
        precision: opts.precision,
        pairs: pairs.iter().map(|p| p.name.clone()).collect(),
        parameter_count: params.num_scalars(),
        steps,
        evals,
        best_step: best.0,
        best_checkpoint: best_path,
        last_checkpoint: last_path,
        psnr_low,
        seconds: start.elapsed().as_secs_f64(),
    };
    write_json(&opts.out.join("train_report.json"), &report)?;
    println!(
        "best checkpoint at step {} (charbonnier {:.5}); low-vs-high psnr {:.3} dB; {:.1} s",
        report.best_step, best.1, report.psnr_low, report.seconds
    );
    Ok(report)
}

fn print_step(s: &StepLog) {
    println!(
        "step {:>5}  lr {:.3e}  total {:.6}  charbonnier {:.6}  wavelet {:.6}  fourier {:.6}",
        s.step, s.learning_rate, s.losses.total, s.losses.charbonnier, s.losses.wavelet, s.losses.fourier
    );
}

fn print_eval(step: usize, l: &Losses, psnr: f64) {
    println!(
        "eval after {step:>5} steps  total {:.6}  charbonnier {:.6}  wavelet {:.6}  fourier {:.6}  psnr {psnr:.3} dB",
        l.total, l.charbonnier, l.wavelet, l.fourier
    );
}
