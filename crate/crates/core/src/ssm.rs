//! Diagonal state-space recurrence with zero-order-hold discretization.
//!
//! Continuous system `h' = A h + B x`, `y = C h + D x` with diagonal `A`.
//! With timescale `delta`:
//!
//! ```text
//! A_bar = exp(delta * A)
//! B_bar = (delta * A)^-1 (exp(delta * A) - 1) * delta * B
//! h(t)  = A_bar h(t-1) + B_bar x(t),   h(0) = 0
//! y(t)  = C h(t) + D x(t)
//! ```
//!
//! The selective variant derives `delta`, `B` and `C` from each input step
//! through learned linear maps.

use crate::error::{Error, Result};
use crate::ops::Activation;

/// Below this `|delta * A|` the ZOH input gain uses its series expansion.
pub const SERIES_THRESHOLD: f64 = 1e-6;

/// `(exp(z) - 1) / z` evaluated directly; undefined at `z = 0`.
pub fn zoh_gain_exact(z: f64) -> f64 {
    z.exp_m1() / z
}

/// First-order expansion `1 + z / 2` of [`zoh_gain_exact`] around zero.
pub fn zoh_gain_series(z: f64) -> f64 {
    1.0 + 0.5 * z
}

/// The ZOH input gain `(exp(z) - 1) / z` and its derivative in `z`,
/// switching to the series form near zero.
#[inline]
pub(crate) fn zoh_gain(z: f64) -> (f64, f64) {
    if z.abs() < SERIES_THRESHOLD {
        (zoh_gain_series(z), 0.5 + z / 3.0)
    } else {
        let em1 = z.exp_m1();
        (em1 / z, (z * z.exp() - em1) / (z * z))
    }
}

/// Discretizes one diagonal entry. Returns `(A_bar, B_bar)`.
pub fn zoh_discretize(a: f64, b: f64, delta: f64) -> Result<(f64, f64)> {
    if !(delta > 0.0) {
        return Err(Error::param(format!("timescale must be positive, got {delta}")));
    }
    let z = delta * a;
    Ok((z.exp(), zoh_gain(z).0 * delta * b))
}

/// A sequence of `len` steps with `dims` features, stored step-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanSequence {
    len: usize,
    dims: usize,
    values: Vec<f64>,
}

impl ScanSequence {
    pub fn new(len: usize, dims: usize, values: Vec<f64>) -> Result<Self> {
        if len == 0 || dims == 0 || values.len() != len * dims {
            return Err(Error::shape(format!(
                "sequence of {len}x{dims} cannot hold {} values",
                values.len()
            )));
        }
        Ok(ScanSequence { len, dims, values })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn get(&self, t: usize, d: usize) -> f64 {
        self.values[t * self.dims + d]
    }

    /// Values laid out feature-major, `[d][t]`.
    pub(crate) fn to_planar(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.values.len()];
        for t in 0..self.len {
            for d in 0..self.dims {
                out[d * self.len + t] = self.values[t * self.dims + d];
            }
        }
        out
    }

    pub(crate) fn from_planar(len: usize, dims: usize, planar: &[f64]) -> Self {
        let mut values = vec![0.0; len * dims];
        for d in 0..dims {
            for t in 0..len {
                values[t * dims + d] = planar[d * len + t];
            }
        }
        ScanSequence { len, dims, values }
    }
}

/// Continuous, time-invariant parameters of a diagonal SSM over `dims`
/// independent channels, each with `state_size` modes.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmParams {
    pub state_size: usize,
    /// `dims x state_size` diagonal entries of `A`, all `<= 0`.
    pub a: Vec<f64>,
    /// `dims x state_size`
    pub b: Vec<f64>,
    /// `dims x state_size`
    pub c: Vec<f64>,
    /// `dims`
    pub d_skip: Vec<f64>,
    /// `dims`, all `> 0`
    pub delta: Vec<f64>,
}

impl SsmParams {
    pub fn dims(&self) -> usize {
        self.d_skip.len()
    }

    fn validate(&self) -> Result<()> {
        let dn = self.dims() * self.state_size;
        if self.state_size == 0
            || self.a.len() != dn
            || self.b.len() != dn
            || self.c.len() != dn
            || self.delta.len() != self.dims()
        {
            return Err(Error::shape("inconsistent SSM parameter shapes"));
        }
        if let Some(a) = self.a.iter().find(|&&a| !(a <= 0.0)) {
            return Err(Error::param(format!("diagonal of A must be <= 0, found {a}")));
        }
        Ok(())
    }

    /// ZOH-discretizes and broadcasts the parameters over `len` steps.
    pub fn discretize(&self, len: usize) -> Result<ScanParams> {
        self.validate()?;
        let n = self.state_size;
        let dims = self.dims();
        let mut a_bar = vec![0.0; dims * n];
        let mut b_bar = vec![0.0; dims * n];
        for d in 0..dims {
            for k in 0..n {
                let (ab, bb) = zoh_discretize(self.a[d * n + k], self.b[d * n + k], self.delta[d])?;
                a_bar[d * n + k] = ab;
                b_bar[d * n + k] = bb;
            }
        }
        let repeat = |v: &[f64]| v.iter().copied().cycle().take(len * v.len()).collect();
        ScanParams::new(len, dims, n, repeat(&a_bar), repeat(&b_bar), repeat(&self.c), self.d_skip.clone())
    }
}

/// Discrete per-step parameters, each `len x dims x state` step-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanParams {
    len: usize,
    dims: usize,
    state: usize,
    a_bar: Vec<f64>,
    b_bar: Vec<f64>,
    c: Vec<f64>,
    d_skip: Vec<f64>,
}

impl ScanParams {
    pub fn new(
        len: usize,
        dims: usize,
        state: usize,
        a_bar: Vec<f64>,
        b_bar: Vec<f64>,
        c: Vec<f64>,
        d_skip: Vec<f64>,
    ) -> Result<Self> {
        let total = len * dims * state;
        if a_bar.len() != total || b_bar.len() != total || c.len() != total || d_skip.len() != dims {
            return Err(Error::shape(format!(
                "scan parameters must be {len}x{dims}x{state} with {dims} skip gains"
            )));
        }
        Ok(ScanParams {
            len,
            dims,
            state,
            a_bar,
            b_bar,
            c,
            d_skip,
        })
    }

    /// Same discrete parameters at every step.
    pub fn time_invariant(
        len: usize,
        dims: usize,
        state: usize,
        a_bar: &[f64],
        b_bar: &[f64],
        c: &[f64],
        d_skip: Vec<f64>,
    ) -> Result<Self> {
        let repeat = |v: &[f64]| v.iter().copied().cycle().take(len * v.len()).collect::<Vec<_>>();
        if a_bar.len() != dims * state || b_bar.len() != dims * state || c.len() != dims * state {
            return Err(Error::shape(format!("time-invariant parameters must be {dims}x{state}")));
        }
        Self::new(len, dims, state, repeat(a_bar), repeat(b_bar), repeat(c), d_skip)
    }
}

/// Runs the recurrence from a zero state.
pub fn scan(params: &ScanParams, x: &ScanSequence) -> Result<ScanSequence> {
    if x.len != params.len || x.dims != params.dims {
        return Err(Error::shape(format!(
            "sequence {}x{} does not match scan parameters {}x{}",
            x.len, x.dims, params.len, params.dims
        )));
    }
    let (len, dims, n) = (params.len, params.dims, params.state);
    let mut y = vec![0.0; len * dims];
    let mut h = vec![0.0; n];
    for d in 0..dims {
        h.iter_mut().for_each(|v| *v = 0.0);
        for t in 0..len {
            let u = x.values[t * dims + d];
            let base = (t * dims + d) * n;
            let ab = &params.a_bar[base..base + n];
            let bb = &params.b_bar[base..base + n];
            let cc = &params.c[base..base + n];
            let mut acc = 0.0;
            for k in 0..n {
                h[k] = ab[k] * h[k] + bb[k] * u;
                acc += cc[k] * h[k];
            }
            if !acc.is_finite() {
                return Err(Error::numeric(format!("scan step {t}"), "non-finite state"));
            }
            y[t * dims + d] = acc + params.d_skip[d] * u;
        }
    }
    ScanSequence::new(len, dims, y)
}

/// Learned maps of the selective scan over `dims` features and `state`
/// modes. Matrices are row-major `out x in`.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectiveWeights {
    pub dims: usize,
    pub state: usize,
    /// `dims x dims`
    pub dt_weight: Vec<f64>,
    /// `dims`
    pub dt_bias: Vec<f64>,
    /// `state x dims`
    pub b_weight: Vec<f64>,
    /// `state x dims`
    pub c_weight: Vec<f64>,
    /// `dims x state`; `A = -exp(a_log)`
    pub a_log: Vec<f64>,
    /// `dims`
    pub d_skip: Vec<f64>,
}

impl SelectiveWeights {
    fn validate(&self) -> Result<()> {
        let (d, n) = (self.dims, self.state);
        if self.dt_weight.len() != d * d
            || self.dt_bias.len() != d
            || self.b_weight.len() != n * d
            || self.c_weight.len() != n * d
            || self.a_log.len() != d * n
            || self.d_skip.len() != d
        {
            return Err(Error::shape(format!("selective weights inconsistent with {d} dims / {n} states")));
        }
        Ok(())
    }
}

/// Selective scan: per step, `delta = softplus(W_dt x + b_dt)`,
/// `B = W_B x`, `C = W_C x`, then ZOH and the recurrence.
pub fn selective_scan_channel(x: &ScanSequence, weights: &SelectiveWeights) -> Result<ScanSequence> {
    weights.validate()?;
    if x.dims != weights.dims {
        return Err(Error::shape(format!(
            "sequence has {} dims, weights expect {}",
            x.dims, weights.dims
        )));
    }
    let (len, dims, n) = (x.len, x.dims, weights.state);
    let linear = |w: &[f64], rows: usize, bias: Option<&[f64]>| -> Vec<f64> {
        // planar [row][t]
        let mut out = vec![0.0; rows * len];
        for r in 0..rows {
            for t in 0..len {
                let mut acc = bias.map_or(0.0, |b| b[r]);
                for d in 0..dims {
                    acc += w[r * dims + d] * x.get(t, d);
                }
                out[r * len + t] = acc;
            }
        }
        out
    };
    let delta: Vec<f64> = linear(&weights.dt_weight, dims, Some(&weights.dt_bias))
        .into_iter()
        .map(|v| Activation::Softplus.apply(v))
        .collect();
    let b = linear(&weights.b_weight, n, None);
    let c = linear(&weights.c_weight, n, None);
    let a: Vec<f64> = weights.a_log.iter().map(|v| -v.exp()).collect();
    let kernel = SelectiveKernel {
        len,
        dims,
        state: n,
        u: &x.to_planar(),
        delta: &delta,
        b: &b,
        c: &c,
        a: &a,
        d_skip: &weights.d_skip,
    };
    let (y, _) = kernel.forward()?;
    Ok(ScanSequence::from_planar(len, dims, &y))
}

/// Inputs of the selective recurrence in planar layout: `u`, `delta` are
/// `[d][t]`, `b`, `c` are `[n][t]`, `a` is `[d][n]`.
pub(crate) struct SelectiveKernel<'a> {
    pub len: usize,
    pub dims: usize,
    pub state: usize,
    pub u: &'a [f64],
    pub delta: &'a [f64],
    pub b: &'a [f64],
    pub c: &'a [f64],
    pub a: &'a [f64],
    pub d_skip: &'a [f64],
}

pub(crate) struct SelectiveGrads {
    pub u: Vec<f64>,
    pub delta: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub a: Vec<f64>,
    pub d_skip: Vec<f64>,
}

impl SelectiveKernel<'_> {
    /// Returns `y` (planar `[d][t]`) and the hidden states `[d][t][n]`.
    pub fn forward(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let (len, dims, n) = (self.len, self.dims, self.state);
        let mut y = vec![0.0; dims * len];
        let mut states = vec![0.0; dims * len * n];
        let mut h = vec![0.0; n];
        for d in 0..dims {
            h.iter_mut().for_each(|v| *v = 0.0);
            let a = &self.a[d * n..(d + 1) * n];
            for t in 0..len {
                let dt = self.delta[d * len + t];
                let u = self.u[d * len + t];
                let mut acc = 0.0;
                for k in 0..n {
                    let z = dt * a[k];
                    let (gain, _) = zoh_gain(z);
                    h[k] = z.exp() * h[k] + gain * dt * self.b[k * len + t] * u;
                    acc += self.c[k * len + t] * h[k];
                }
                if !acc.is_finite() {
                    return Err(Error::numeric(format!("selective scan step {t}"), "non-finite state"));
                }
                states[(d * len + t) * n..(d * len + t + 1) * n].copy_from_slice(&h);
                y[d * len + t] = acc + self.d_skip[d] * u;
            }
        }
        Ok((y, states))
    }

    pub fn backward(&self, states: &[f64], grad_y: &[f64]) -> SelectiveGrads {
        let (len, dims, n) = (self.len, self.dims, self.state);
        let mut g = SelectiveGrads {
            u: vec![0.0; dims * len],
            delta: vec![0.0; dims * len],
            b: vec![0.0; n * len],
            c: vec![0.0; n * len],
            a: vec![0.0; dims * n],
            d_skip: vec![0.0; dims],
        };
        let mut gh = vec![0.0; n];
        for d in 0..dims {
            gh.iter_mut().for_each(|v| *v = 0.0);
            let a = &self.a[d * n..(d + 1) * n];
            for t in (0..len).rev() {
                let i = d * len + t;
                let gy = grad_y[i];
                let u = self.u[i];
                let dt = self.delta[i];
                g.d_skip[d] += gy * u;
                let mut gu = gy * self.d_skip[d];
                let mut gdt = 0.0;
                let h_t = &states[i * n..(i + 1) * n];
                for k in 0..n {
                    g.c[k * len + t] += gy * h_t[k];
                    // gradient flowing into h(t) from y(t) and from h(t+1)
                    gh[k] += gy * self.c[k * len + t];
                    let h_prev = if t > 0 { states[(i - 1) * n + k] } else { 0.0 };
                    let z = dt * a[k];
                    let abar = z.exp();
                    let (gain, dgain) = zoh_gain(z);
                    let bk = self.b[k * len + t];
                    let g_abar = gh[k] * h_prev;
                    let g_bbar = gh[k] * u;
                    gu += gh[k] * gain * dt * bk;
                    // B_bar = gain(z) * dt * b
                    let gz = g_abar * abar + g_bbar * dgain * dt * bk;
                    gdt += gz * a[k] + g_bbar * gain * bk;
                    g.a[d * n + k] += gz * dt;
                    g.b[k * len + t] += g_bbar * gain * dt;
                    gh[k] *= abar;
                }
                g.u[i] += gu;
                g.delta[i] += gdt;
            }
        }
        g
    }
}
