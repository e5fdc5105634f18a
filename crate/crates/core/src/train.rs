//! Adam on the total loss with a cosine-annealed learning rate.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rayon::prelude::*;

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{LossRecord, LossTargets, WalMaFa};
use crate::tensor::{FeatureMap, Gradients, ParamStore};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Side of the square training crops; a multiple of 8.
    pub crop_size: usize,
    pub learning_rate: f64,
    pub min_learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 200,
            batch_size: 8,
            crop_size: 64,
            learning_rate: 8e-4,
            min_learning_rate: 1e-6,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub const KEYS: [&'static str; 8] = [
        "steps",
        "batch_size",
        "crop_size",
        "learning_rate",
        "min_learning_rate",
        "beta1",
        "beta2",
        "adam_eps",
    ];

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::param("steps and batch_size must be positive"));
        }
        if self.crop_size == 0 || self.crop_size % 8 != 0 {
            return Err(Error::param(format!("crop_size {} must be a positive multiple of 8", self.crop_size)));
        }
        if !(self.learning_rate >= 0.0 && self.min_learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::param("learning rates must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_eps <= 0.0 {
            return Err(Error::param("betas must lie in [0, 1) and adam_eps must be positive"));
        }
        Ok(())
    }

    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        let d = TrainConfig::default();
        let cfg = TrainConfig {
            steps: kv.parsed("steps")?.unwrap_or(d.steps),
            batch_size: kv.parsed("batch_size")?.unwrap_or(d.batch_size),
            crop_size: kv.parsed("crop_size")?.unwrap_or(d.crop_size),
            learning_rate: kv.parsed("learning_rate")?.unwrap_or(d.learning_rate),
            min_learning_rate: kv.parsed("min_learning_rate")?.unwrap_or(d.min_learning_rate),
            beta1: kv.parsed("beta1")?.unwrap_or(d.beta1),
            beta2: kv.parsed("beta2")?.unwrap_or(d.beta2),
            adam_eps: kv.parsed("adam_eps")?.unwrap_or(d.adam_eps),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("steps", self.steps);
        kv.set("batch_size", self.batch_size);
        kv.set("crop_size", self.crop_size);
        kv.set("learning_rate", format!("{:?}", self.learning_rate));
        kv.set("min_learning_rate", format!("{:?}", self.min_learning_rate));
        kv.set("beta1", format!("{:?}", self.beta1));
        kv.set("beta2", format!("{:?}", self.beta2));
        kv.set("adam_eps", format!("{:?}", self.adam_eps));
        kv
    }

    /// Cosine decay from `learning_rate` at step 0 to `min_learning_rate`
    /// at `steps`.
    pub fn learning_rate_at(&self, step: usize) -> f64 {
        let t = (step.min(self.steps) as f64) / self.steps as f64;
        self.min_learning_rate + 0.5 * (self.learning_rate - self.min_learning_rate) * (1.0 + (PI * t).cos())
    }
}

#[derive(Clone, Debug, Default)]
pub struct AdamState {
    pub step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    /// One Adam update. A zero learning rate leaves `params` untouched.
    pub fn update(&mut self, params: &mut ParamStore, grads: &Gradients, lr: f64, cfg: &TrainConfig) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - cfg.beta1.powi(t);
        let bias2 = 1.0 - cfg.beta2.powi(t);
        for (name, g) in grads {
            let n = g.len();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            for i in 0..n {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            }
            if lr == 0.0 {
                continue;
            }
            let p = params.values_mut(name)?;
            for i in 0..n {
                let mhat = m[i] / bias1;
                let vhat = v[i] / bias2;
                p[i] -= lr * mhat / (vhat.sqrt() + cfg.adam_eps);
            }
        }
        Ok(())
    }
}

/// Loss and gradients of one `(low, high)` pair.
pub fn pair_gradients(
    model: &WalMaFa,
    params: &ParamStore,
    low: &FeatureMap,
    high: &FeatureMap,
) -> Result<(LossRecord, Gradients)> {
    let targets = LossTargets::new(high)?;
    let mut g = Graph::new(params);
    let vars = model.build_loss(&mut g, low, &targets)?;
    let record = vars.record(&g);
    if !record.total.is_finite() {
        let trail: Vec<String> = g.stage_norms().iter().map(|(s, n)| format!("{s}={n:.4e}")).collect();
        return Err(Error::numeric("loss", format!("non-finite total; stage rms: {}", trail.join(", "))));
    }
    Ok((record, g.backward(vars.total)?))
}

/// Mean loss and mean gradient over `batch`. Pairs are evaluated in
/// parallel and reduced in batch order, so the result does not depend on
/// the thread count.
pub fn batch_gradients(
    model: &WalMaFa,
    params: &ParamStore,
    batch: &[(FeatureMap, FeatureMap)],
) -> Result<(LossRecord, Gradients)> {
    if batch.is_empty() {
        return Err(Error::param("empty training batch"));
    }
    let per_pair: Vec<(LossRecord, Gradients)> = batch
        .par_iter()
        .map(|(low, high)| pair_gradients(model, params, low, high))
        .collect::<Result<_>>()?;
    let scale = 1.0 / batch.len() as f64;
    let mut record = LossRecord {
        total: 0.0,
        charbonnier: 0.0,
        wavelet: 0.0,
        fourier: 0.0,
    };
    let mut grads = Gradients::new();
    for (r, g) in &per_pair {
        record.total += r.total;
        record.charbonnier += r.charbonnier;
        record.wavelet += r.wavelet;
        record.fourier += r.fourier;
        for (name, values) in g {
            let acc = grads.entry(name.clone()).or_insert_with(|| vec![0.0; values.len()]);
            acc.iter_mut().zip(values).for_each(|(a, v)| *a += v);
        }
    }
    record.total *= scale;
    record.charbonnier *= scale;
    record.wavelet *= scale;
    record.fourier *= scale;
    grads.values_mut().for_each(|g| g.iter_mut().for_each(|v| *v *= scale));
    Ok((record, grads))
}

/// Evaluates the batch at the current parameters, then applies one Adam
/// step with the scheduled learning rate. Returns the pre-update losses.
pub fn train_step(
    model: &WalMaFa,
    params: &mut ParamStore,
    batch: &[(FeatureMap, FeatureMap)],
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<LossRecord> {
    let lr = cfg.learning_rate_at(state.step as usize);
    let (record, grads) = batch_gradients(model, params, batch)?;
    state.update(params, &grads, lr, cfg)?;
    Ok(record)
}
