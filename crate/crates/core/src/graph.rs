//! A small reverse-mode tape over [`FeatureMap`] values.
//!
//! Every operation records its inputs and whatever it needs for the
//! backward sweep. Parameters are not nodes: operations reference them by
//! name in the borrowed [`ParamStore`], and [`Graph::backward`] returns the
//! accumulated gradient of each trainable parameter it touched.

use rustfft::num_complex::Complex64;
use rustfft::FftDirection;

use crate::error::{Error, Result};
use crate::fourier::{self, fft2_unitary, phase_of};
use crate::ops::{self, Activation, ConvGeometry};
use crate::ssm::SelectiveKernel;
use crate::tensor::{FeatureMap, Gradients, ParamStore};
use crate::wavelet;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Input,
    Conv {
        x: Var,
        weight: String,
        bias: Option<String>,
        geom: ConvGeometry,
    },
    LayerNorm {
        x: Var,
        gain: String,
        shift: String,
        xhat: FeatureMap,
        inv_std: Vec<f64>,
    },
    Act {
        x: Var,
        kind: Activation,
    },
    Add(Var, Var),
    Mul(Var, Var),
    ScaleParam {
        x: Var,
        name: String,
    },
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
    },
    Unshuffle(Var),
    Shuffle(Var),
    Dwt(Var),
    Iwt(Var),
    FftPolar {
        x: Var,
        spectrum: Vec<Complex64>,
    },
    IfftPolar(Var),
    SelectiveScan {
        u: Var,
        delta: Var,
        b: Var,
        c: Var,
        a_log: String,
        d_skip: String,
        states: Vec<f64>,
    },
    Charbonnier {
        x: Var,
        target: FeatureMap,
    },
    RmsDiff {
        x: Var,
        target: FeatureMap,
    },
    WeightedSum(Vec<(Var, f64)>),
    Sum(Var),
}

struct Node {
    value: FeatureMap,
    op: Op,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    stage: String,
    /// `(stage, rms)` of the last value produced by every finished stage.
    stage_norms: Vec<(String, f64)>,
    max_imag_residual: f64,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            stage: String::from("graph"),
            stage_norms: Vec::new(),
            max_imag_residual: 0.0,
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    /// Label used in numeric errors raised by subsequent operations.
    pub fn set_stage(&mut self, stage: impl Into<String>) {
        if let Some(last) = self.nodes.last() {
            let rms = (last.value.sum_squares() / last.value.data().len() as f64).sqrt();
            self.stage_norms.push((self.stage.clone(), rms));
        }
        self.stage = stage.into();
    }

    /// RMS of the final value of each completed stage, in order.
    pub fn stage_norms(&self) -> &[(String, f64)] {
        &self.stage_norms
    }

    pub fn stage(&self) -> &str {
        &self.stage
    }

    pub fn value(&self, v: Var) -> &FeatureMap {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Largest imaginary residue discarded by any inverse FFT so far.
    pub fn max_imag_residual(&self) -> f64 {
        self.max_imag_residual
    }

    fn push(&mut self, value: FeatureMap, op: Op, what: &str) -> Result<Var> {
        if !value.is_finite() {
            let trail: Vec<String> = self.stage_norms.iter().map(|(s, n)| format!("{s}={n:.4e}")).collect();
            let message = if trail.is_empty() {
                "non-finite activation".to_string()
            } else {
                format!("non-finite activation; stage rms: {}", trail.join(", "))
            };
            return Err(Error::numeric(format!("{}/{what}", self.stage), message));
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn input(&mut self, value: FeatureMap) -> Result<Var> {
        self.push(value, Op::Input, "input")
    }

    pub fn conv(&mut self, x: Var, weight: &str, bias: Option<&str>, stride: usize, groups: usize) -> Result<Var> {
        let w = self.params.get(weight)?;
        let b = bias.map(|b| self.params.get(b)).transpose()?;
        let geom = ConvGeometry::from_weight(w, stride, groups)?;
        let value = ops::conv2d(self.value(x), w, b, stride, groups)?;
        self.push(
            value,
            Op::Conv {
                x,
                weight: weight.to_owned(),
                bias: bias.map(str::to_owned),
                geom,
            },
            "conv",
        )
    }

    pub fn layer_norm(&mut self, x: Var, gain: &str, shift: &str, eps: f64) -> Result<Var> {
        let g = self.params.values(gain)?;
        let s = self.params.values(shift)?;
        let (value, xhat, inv_std) = ops::layer_norm_with_stats(self.value(x), g, s, eps)?;
        self.push(
            value,
            Op::LayerNorm {
                x,
                gain: gain.to_owned(),
                shift: shift.to_owned(),
                xhat,
                inv_std,
            },
            "layer_norm",
        )
    }

    pub fn act(&mut self, x: Var, kind: Activation) -> Result<Var> {
        if kind == Activation::Identity {
            return Ok(x);
        }
        let value = ops::activate(self.value(x), kind);
        self.push(value, Op::Act { x, kind }, "activation")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        va.expect_same_shape(vb, "add")?;
        let mut out = va.clone();
        out.data_mut().iter_mut().zip(vb.data()).for_each(|(o, v)| *o += v);
        self.push(out, Op::Add(a, b), "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        va.expect_same_shape(vb, "mul")?;
        let mut out = va.clone();
        out.data_mut().iter_mut().zip(vb.data()).for_each(|(o, v)| *o *= v);
        self.push(out, Op::Mul(a, b), "mul")
    }

    /// Multiplies by a single-valued parameter.
    pub fn scale_by(&mut self, x: Var, name: &str) -> Result<Var> {
        let p = self.params.get(name)?;
        if p.len() != 1 {
            return Err(Error::shape(format!("`{name}` is not a scalar parameter")));
        }
        let s = p.data()[0];
        let value = self.value(x).map(|v| v * s);
        self.push(
            value,
            Op::ScaleParam {
                x,
                name: name.to_owned(),
            },
            "scale",
        )
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&FeatureMap> = parts.iter().map(|&v| self.value(v)).collect();
        let value = FeatureMap::concat_channels(&values)?;
        self.push(value, Op::Concat(parts.to_vec()), "concat")
    }

    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(x).slice_channels(start, len)?;
        self.push(value, Op::Slice { x, start }, "slice")
    }

    pub fn pixel_unshuffle(&mut self, x: Var) -> Result<Var> {
        let value = ops::pixel_unshuffle(self.value(x))?;
        self.push(value, Op::Unshuffle(x), "pixel_unshuffle")
    }

    pub fn pixel_shuffle(&mut self, x: Var) -> Result<Var> {
        let value = ops::pixel_shuffle(self.value(x))?;
        self.push(value, Op::Shuffle(x), "pixel_shuffle")
    }

    /// Haar analysis; output stacks `[LL, LH, HL, HH]` along channels.
    pub fn dwt(&mut self, x: Var) -> Result<Var> {
        let value = wavelet::dwt2d_stacked(self.value(x))?;
        self.push(value, Op::Dwt(x), "dwt")
    }

    pub fn iwt(&mut self, x: Var) -> Result<Var> {
        let value = wavelet::iwt2d_stacked(self.value(x))?;
        self.push(value, Op::Iwt(x), "iwt")
    }

    /// Unitary FFT in polar form; output stacks `[amplitude, phase]`.
    pub fn fft_polar(&mut self, x: Var) -> Result<Var> {
        let (h, w, c) = self.value(x).shape();
        let spectrum = fourier::spectrum(self.value(x));
        let mut data: Vec<f64> = spectrum.iter().map(|z| z.norm()).collect();
        data.extend(spectrum.iter().map(|&z| phase_of(z)));
        let value = FeatureMap::from_vec(h, w, 2 * c, data)?;
        self.push(value, Op::FftPolar { x, spectrum }, "fft")
    }

    /// Inverse of [`Graph::fft_polar`] keeping the real part.
    pub fn ifft_polar(&mut self, x: Var) -> Result<Var> {
        let spec = fourier::PolarSpectrum::from_stacked(self.value(x))?;
        let rec = fourier::ifft2d_polar(&spec)?;
        self.max_imag_residual = self.max_imag_residual.max(rec.max_imag_residual);
        self.push(rec.image, Op::IfftPolar(x), "ifft")
    }

    /// Selective scan over the flattened spatial positions of `u`.
    ///
    /// `u` and `delta` are `(H, W, E)`, `b` and `c` are `(H, W, N)`;
    /// `a_log` is an `[E, N]` parameter (`A = -exp(a_log)`) and `d_skip` has
    /// `E` entries.
    pub fn selective_scan(&mut self, u: Var, delta: Var, b: Var, c: Var, a_log: &str, d_skip: &str) -> Result<Var> {
        let (h, w, dims) = self.value(u).shape();
        let state = self.value(b).channels();
        if self.value(delta).shape() != (h, w, dims)
            || self.value(b).shape() != (h, w, state)
            || self.value(c).shape() != (h, w, state)
        {
            return Err(Error::shape("selective scan inputs disagree in shape"));
        }
        let a_param = self.params.get(a_log)?;
        let d_param = self.params.get(d_skip)?;
        if a_param.shape() != [dims, state] || d_param.len() != dims {
            return Err(Error::shape(format!(
                "selective scan expects a_log [{dims}, {state}] and {dims} skip gains"
            )));
        }
        let a: Vec<f64> = a_param.data().iter().map(|v| -v.exp()).collect();
        let kernel = SelectiveKernel {
            len: h * w,
            dims,
            state,
            u: self.value(u).data(),
            delta: self.value(delta).data(),
            b: self.value(b).data(),
            c: self.value(c).data(),
            a: &a,
            d_skip: d_param.data(),
        };
        let (y, states) = kernel.forward().map_err(|e| match e {
            Error::Numeric { location, message } => Error::numeric(format!("{}/{location}", self.stage), message),
            other => other,
        })?;
        let value = FeatureMap::from_vec(h, w, dims, y)?;
        self.push(
            value,
            Op::SelectiveScan {
                u,
                delta,
                b,
                c,
                a_log: a_log.to_owned(),
                d_skip: d_skip.to_owned(),
                states,
            },
            "selective_scan",
        )
    }

    /// `sqrt(mean((x - target)^2) + eps^2)` as a 1x1x1 value.
    pub fn charbonnier(&mut self, x: Var, target: &FeatureMap, eps: f64) -> Result<Var> {
        let v = self.value(x);
        v.expect_same_shape(target, "charbonnier")?;
        let ms = mean_sq_diff(v, target);
        let value = FeatureMap::scalar((ms + eps * eps).sqrt());
        self.push(
            value,
            Op::Charbonnier {
                x,
                target: target.clone(),
            },
            "charbonnier",
        )
    }

    /// `sqrt(mean((x - target)^2))` as a 1x1x1 value.
    pub fn rms_diff(&mut self, x: Var, target: &FeatureMap) -> Result<Var> {
        let v = self.value(x);
        v.expect_same_shape(target, "rms_diff")?;
        let value = FeatureMap::scalar(mean_sq_diff(v, target).sqrt());
        self.push(
            value,
            Op::RmsDiff {
                x,
                target: target.clone(),
            },
            "rms_diff",
        )
    }

    /// Weighted sum of scalar values.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut acc = 0.0;
        for &(v, w) in terms {
            let val = self.value(v);
            if val.data().len() != 1 {
                return Err(Error::shape("weighted_sum takes scalar values"));
            }
            acc += w * val.item();
        }
        self.push(FeatureMap::scalar(acc), Op::WeightedSum(terms.to_vec()), "weighted_sum")
    }

    /// Sum of every entry as a 1x1x1 value.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().sum();
        self.push(FeatureMap::scalar(total), Op::Sum(x), "sum")
    }

    /// Gradients of the scalar `loss` with respect to every trainable
    /// parameter reachable from it.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).data().len() != 1 {
            return Err(Error::shape("backward needs a scalar loss"));
        }
        let mut grads: Vec<Option<FeatureMap>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(FeatureMap::scalar(1.0));
        let mut out = Gradients::new();

        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => {}
                Op::Conv { x, weight, bias, geom } => {
                    let w = self.params.get(weight)?;
                    let g = ops::conv2d_backward(self.value(*x), w.data(), geom, &gy, true);
                    accumulate(&mut grads, *x, g.input);
                    self.param_grad(&mut out, weight, &g.weight)?;
                    if let Some(b) = bias {
                        self.param_grad(&mut out, b, &g.bias)?;
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    shift,
                    xhat,
                    inv_std,
                } => {
                    let g = ops::layer_norm_backward(xhat, inv_std, self.params.values(gain)?, &gy);
                    accumulate(&mut grads, *x, g.input);
                    self.param_grad(&mut out, gain, &g.gain)?;
                    self.param_grad(&mut out, shift, &g.shift)?;
                }
                Op::Act { x, kind } => {
                    let mut g = gy;
                    for (gv, xv) in g.data_mut().iter_mut().zip(self.value(*x).data()) {
                        *gv *= kind.derivative(*xv);
                    }
                    accumulate(&mut grads, *x, g);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, gy.clone());
                    accumulate(&mut grads, *b, gy);
                }
                Op::Mul(a, b) => {
                    let mut ga = gy.clone();
                    ga.data_mut().iter_mut().zip(self.value(*b).data()).for_each(|(g, v)| *g *= v);
                    let mut gb = gy;
                    gb.data_mut().iter_mut().zip(self.value(*a).data()).for_each(|(g, v)| *g *= v);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::ScaleParam { x, name } => {
                    let s = self.params.values(name)?[0];
                    let gs: f64 = gy.data().iter().zip(self.value(*x).data()).map(|(g, v)| g * v).sum();
                    self.param_grad(&mut out, name, &[gs])?;
                    accumulate(&mut grads, *x, gy.map(|g| g * s));
                }
                Op::Concat(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let c = self.value(*p).channels();
                        accumulate(&mut grads, *p, gy.slice_channels(start, c)?);
                        start += c;
                    }
                }
                Op::Slice { x, start } => {
                    let (h, w, c) = self.value(*x).shape();
                    let mut g = FeatureMap::zeros(h, w, c);
                    let n = h * w;
                    g.data_mut()[start * n..start * n + gy.data().len()].copy_from_slice(gy.data());
                    accumulate(&mut grads, *x, g);
                }
                Op::Unshuffle(x) => accumulate(&mut grads, *x, ops::pixel_shuffle(&gy)?),
                Op::Shuffle(x) => accumulate(&mut grads, *x, ops::pixel_unshuffle(&gy)?),
                Op::Dwt(x) => accumulate(&mut grads, *x, wavelet::iwt2d_stacked(&gy)?),
                Op::Iwt(x) => accumulate(&mut grads, *x, wavelet::dwt2d_stacked(&gy)?),
                Op::FftPolar { x, spectrum } => {
                    accumulate(&mut grads, *x, fft_polar_backward(self.value(*x), spectrum, &gy));
                }
                Op::IfftPolar(x) => {
                    accumulate(&mut grads, *x, ifft_polar_backward(self.value(*x), &gy));
                }
                Op::SelectiveScan {
                    u,
                    delta,
                    b,
                    c,
                    a_log,
                    d_skip,
                    states,
                } => {
                    let a_log_vals = self.params.values(a_log)?;
                    let a: Vec<f64> = a_log_vals.iter().map(|v| -v.exp()).collect();
                    let (h, w, dims) = self.value(*u).shape();
                    let state = self.value(*b).channels();
                    let kernel = SelectiveKernel {
                        len: h * w,
                        dims,
                        state,
                        u: self.value(*u).data(),
                        delta: self.value(*delta).data(),
                        b: self.value(*b).data(),
                        c: self.value(*c).data(),
                        a: &a,
                        d_skip: self.params.values(d_skip)?,
                    };
                    let g = kernel.backward(states, gy.data());
                    accumulate(&mut grads, *u, FeatureMap::from_vec(h, w, dims, g.u)?);
                    accumulate(&mut grads, *delta, FeatureMap::from_vec(h, w, dims, g.delta)?);
                    accumulate(&mut grads, *b, FeatureMap::from_vec(h, w, state, g.b)?);
                    accumulate(&mut grads, *c, FeatureMap::from_vec(h, w, state, g.c)?);
                    // dA/da_log = A
                    let g_alog: Vec<f64> = g.a.iter().zip(&a).map(|(g, a)| g * a).collect();
                    self.param_grad(&mut out, a_log, &g_alog)?;
                    self.param_grad(&mut out, d_skip, &g.d_skip)?;
                }
                Op::Charbonnier { x, target } | Op::RmsDiff { x, target } => {
                    let loss_value = node.value.item();
                    let xv = self.value(*x);
                    let n = xv.data().len() as f64;
                    let scale = if loss_value > 0.0 { gy.item() / (n * loss_value) } else { 0.0 };
                    let mut g = xv.clone();
                    g.data_mut()
                        .iter_mut()
                        .zip(target.data())
                        .for_each(|(v, t)| *v = (*v - t) * scale);
                    accumulate(&mut grads, *x, g);
                }
                Op::Sum(x) => {
                    let (h, w, c) = self.value(*x).shape();
                    accumulate(&mut grads, *x, FeatureMap::filled(h, w, c, gy.item()));
                }
                Op::WeightedSum(terms) => {
                    for &(v, w) in terms {
                        accumulate(&mut grads, v, FeatureMap::scalar(gy.item() * w));
                    }
                }
            }
        }
        for (name, g) in &out {
            if let Some(bad) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::numeric(format!("gradient of `{name}`[{bad}]"), "non-finite gradient"));
            }
        }
        Ok(out)
    }

    fn param_grad(&self, out: &mut Gradients, name: &str, g: &[f64]) -> Result<()> {
        let p = self.params.get(name)?;
        if !p.is_trainable() {
            return Ok(());
        }
        let slot = out.entry(name.to_owned()).or_insert_with(|| vec![0.0; p.len()]);
        slot.iter_mut().zip(g).for_each(|(s, v)| *s += v);
        Ok(())
    }
}

fn mean_sq_diff(a: &FeatureMap, b: &FeatureMap) -> f64 {
    let n = a.data().len() as f64;
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n
}

fn accumulate(grads: &mut [Option<FeatureMap>], v: Var, g: FeatureMap) {
    match &mut grads[v.0] {
        Some(existing) => existing.data_mut().iter_mut().zip(g.data()).for_each(|(e, v)| *e += v),
        slot @ None => *slot = Some(g),
    }
}

fn fft_polar_backward(x: &FeatureMap, spectrum: &[Complex64], gy: &FeatureMap) -> FeatureMap {
    let (h, w, c) = x.shape();
    let n = h * w;
    let g = gy.data();
    let mut buf = vec![Complex64::default(); n];
    let mut out = FeatureMap::zeros(h, w, c);
    for ch in 0..c {
        for u in 0..h {
            for v in 0..w {
                let i = u * w + v;
                let z = spectrum[ch * n + i];
                let r = z.norm();
                let (ga, gp) = (g[ch * n + i], g[(c + ch) * n + i]);
                buf[i] = if r > 0.0 {
                    let real_bin = (2 * u) % h == 0 && (2 * v) % w == 0;
                    let g_re = ga * z.re / r - gp * z.im / (r * r);
                    let g_im = if real_bin { 0.0 } else { ga * z.im / r + gp * z.re / (r * r) };
                    Complex64::new(g_re, g_im)
                } else {
                    Complex64::default()
                };
            }
        }
        fft2_unitary(&mut buf, h, w, FftDirection::Inverse);
        for (o, z) in out.plane_mut(ch).iter_mut().zip(&buf) {
            *o = z.re;
        }
    }
    out
}

fn ifft_polar_backward(stacked: &FeatureMap, gy: &FeatureMap) -> FeatureMap {
    let (h, w, c2) = stacked.shape();
    let c = c2 / 2;
    let n = h * w;
    let mut out = FeatureMap::zeros(h, w, c2);
    let mut buf = vec![Complex64::default(); n];
    for ch in 0..c {
        for (b, &g) in buf.iter_mut().zip(gy.plane(ch)) {
            *b = Complex64::new(g, 0.0);
        }
        fft2_unitary(&mut buf, h, w, FftDirection::Forward);
        let amp = stacked.plane(ch);
        let phase = stacked.plane(c + ch);
        let mut g_amp = vec![0.0; n];
        let mut g_phase = vec![0.0; n];
        for i in 0..n {
            let (s, co) = phase[i].sin_cos();
            let z = buf[i];
            g_amp[i] = z.re * co + z.im * s;
            g_phase[i] = amp[i] * (z.im * co - z.re * s);
        }
        out.plane_mut(ch).copy_from_slice(&g_amp);
        out.plane_mut(c + ch).copy_from_slice(&g_phase);
    }
    out
}
