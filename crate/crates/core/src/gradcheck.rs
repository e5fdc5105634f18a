//! Central-difference verification of the analytic gradients produced by
//! [`Graph::backward`].

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::ParamStore;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub step: f64,
    /// Entries checked per parameter tensor; smaller tensors are checked
    /// exhaustively.
    pub samples_per_param: usize,
    pub seed: u64,
    /// When set, each entry is also differenced with step `h / 32`. If the
    /// two quotients differ by more than this fraction of the finer one,
    /// the loss has a jump or a kink within `h` of the evaluation point;
    /// the entry is then excluded and listed in
    /// [`GradCheckReport::nonsmooth`]. The test never consults the
    /// analytic gradient.
    pub kink_threshold: Option<f64>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-3,
            samples_per_param: 6,
            seed: 0,
            kink_threshold: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    /// Largest |analytic gradient| over the whole tensor.
    pub max_abs_grad: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub params: Vec<ParamCheck>,
    pub skipped_frozen: Vec<String>,
    /// Entries excluded by the kink test.
    pub nonsmooth: Vec<(String, usize)>,
}

impl GradCheckReport {
    /// Trainable parameters whose analytic gradient is identically zero.
    pub fn dead_params(&self) -> Vec<&str> {
        self.params
            .iter()
            .filter(|p| p.max_abs_grad == 0.0)
            .map(|p| p.name.as_str())
            .collect()
    }
}

/// Compares analytic gradients of `loss` against central differences
/// `(L(p + h) - L(p - h)) / 2h` for a sample of entries of every trainable
/// parameter. Relative error is `|analytic - numeric| / (|numeric| + 1e-8)`.
pub fn grad_check<F>(params: &ParamStore, loss: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let evaluate = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(store);
        let out = loss(&mut g)?;
        let v = g.value(out);
        if v.data().len() != 1 {
            return Err(Error::shape("grad_check loss must be scalar"));
        }
        Ok(v.item())
    };

    let analytic = {
        let mut g = Graph::new(params);
        let out = loss(&mut g)?;
        g.backward(out)?
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = params.clone();
    let mut report = GradCheckReport::default();

    let names: Vec<String> = params.names().map(str::to_owned).collect();
    for name in names {
        let param = params.get(&name)?;
        if !param.is_trainable() {
            report.skipped_frozen.push(name);
            continue;
        }
        let zeros = vec![0.0; param.len()];
        let grad = analytic.get(&name).unwrap_or(&zeros);
        let indices: Vec<usize> = if param.len() <= opts.samples_per_param {
            (0..param.len()).collect()
        } else {
            let mut idx = sample(&mut rng, param.len(), opts.samples_per_param).into_vec();
            idx.sort_unstable();
            idx
        };
        let mut difference = |i: usize, h: f64| -> Result<f64> {
            let original = param.data()[i];
            work.values_mut(&name)?[i] = original + h;
            let plus = evaluate(&work)?;
            work.values_mut(&name)?[i] = original - h;
            let minus = evaluate(&work)?;
            work.values_mut(&name)?[i] = original;
            let numeric = (plus - minus) / (2.0 * h);
            if !numeric.is_finite() {
                return Err(Error::numeric(format!("`{name}`[{i}]"), "non-finite finite difference"));
            }
            Ok(numeric)
        };
        let mut check = ParamCheck {
            name: name.clone(),
            checked: indices.len(),
            max_rel_error: 0.0,
            max_abs_grad: grad.iter().fold(0.0, |m, g| m.max(g.abs())),
        };
        for &i in &indices {
            let numeric = difference(i, opts.step)?;
            if let Some(threshold) = opts.kink_threshold {
                let fine = difference(i, opts.step / 32.0)?;
                if (numeric - fine).abs() > threshold * fine.abs() + 1e-8 {
                    report.nonsmooth.push((name.clone(), i));
                    check.checked -= 1;
                    continue;
                }
            }
            let rel = (grad[i] - numeric).abs() / (numeric.abs() + 1e-8);
            if rel > check.max_rel_error {
                check.max_rel_error = rel;
            }
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((name.clone(), i));
            }
        }
        report.params.push(check);
    }
    Ok(report)
}
