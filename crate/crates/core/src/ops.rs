//! Forward and backward kernels for the dense primitives: convolution,
//! layer normalization, pointwise activations and pixel (un)shuffling.
//!
//! Convolution weights use the `[out, in / groups, k, k]` layout with zero
//! padding of `k / 2` on every side.

use crate::error::{Error, Result};
use crate::tensor::{FeatureMap, Param};

/// Pointwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    /// tanh-approximated GELU
    Gelu,
    Silu,
    Softplus,
    Identity,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => {
                let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
                0.5 * x * (1.0 + t)
            }
            Activation::Silu => x * sigmoid(x),
            Activation::Softplus => {
                if x > 30.0 {
                    x
                } else {
                    x.exp().ln_1p()
                }
            }
            Activation::Identity => x,
        }
    }

    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => {
                let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
            }
            Activation::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Softplus => sigmoid(x),
            Activation::Identity => 1.0,
        }
    }
}

pub fn activate(input: &FeatureMap, act: Activation) -> FeatureMap {
    input.map(|v| act.apply(v))
}

/// Geometry of a 2D convolution, derived from the weight shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub out_channels: usize,
    pub in_per_group: usize,
    pub kernel: usize,
    pub stride: usize,
    pub groups: usize,
}

impl ConvGeometry {
    pub fn from_weight(weight: &Param, stride: usize, groups: usize) -> Result<Self> {
        let shape = weight.shape();
        if shape.len() != 4 || shape[2] != shape[3] {
            return Err(Error::shape(format!(
                "conv weight must be [out, in/groups, k, k], got {shape:?}"
            )));
        }
        let geom = ConvGeometry {
            out_channels: shape[0],
            in_per_group: shape[1],
            kernel: shape[2],
            stride,
            groups,
        };
        if geom.kernel % 2 == 0 {
            return Err(Error::shape(format!("conv kernel size {} must be odd", geom.kernel)));
        }
        if stride == 0 || groups == 0 || geom.out_channels % groups != 0 {
            return Err(Error::shape(format!(
                "invalid conv stride {stride} / groups {groups} for {} outputs",
                geom.out_channels
            )));
        }
        Ok(geom)
    }

    fn pad(&self) -> usize {
        self.kernel / 2
    }

    /// Output spatial size for an input of `h x w x c`.
    pub fn output_size(&self, h: usize, w: usize, c: usize) -> Result<(usize, usize)> {
        if c != self.in_per_group * self.groups {
            return Err(Error::shape(format!(
                "conv expects {} input channels, got {c}",
                self.in_per_group * self.groups
            )));
        }
        let span = |n: usize| -> Result<usize> {
            let padded = n + 2 * self.pad();
            if padded < self.kernel || (padded - self.kernel) % self.stride != 0 {
                return Err(Error::shape(format!(
                    "stride {} does not divide padded extent {padded} for kernel {}",
                    self.stride, self.kernel
                )));
            }
            Ok((padded - self.kernel) / self.stride + 1)
        };
        Ok((span(h)?, span(w)?))
    }
}

/// Range of output columns `ox` whose input column `ox * stride + kx - pad`
/// lies inside `0..in_w`.
#[inline]
fn valid_out_range(kx: usize, pad: usize, stride: usize, in_w: usize, out_w: usize) -> (usize, usize) {
    // ox * stride + kx >= pad
    let lo = if kx >= pad { 0 } else { (pad - kx).div_ceil(stride) };
    // ox * stride + kx - pad <= in_w - 1
    let hi = if in_w + pad > kx {
        ((in_w - 1 + pad - kx) / stride + 1).min(out_w)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// 2D convolution with zero padding `k / 2`.
pub fn conv2d(
    input: &FeatureMap,
    weight: &Param,
    bias: Option<&Param>,
    stride: usize,
    groups: usize,
) -> Result<FeatureMap> {
    let geom = ConvGeometry::from_weight(weight, stride, groups)?;
    if let Some(b) = bias {
        if b.len() != geom.out_channels {
            return Err(Error::shape(format!(
                "conv bias has {} entries for {} outputs",
                b.len(),
                geom.out_channels
            )));
        }
    }
    conv2d_raw(input, weight.data(), bias.map(Param::data), &geom)
}

pub(crate) fn conv2d_raw(
    input: &FeatureMap,
    weight: &[f64],
    bias: Option<&[f64]>,
    geom: &ConvGeometry,
) -> Result<FeatureMap> {
    let (h, w, c) = input.shape();
    let (oh, ow) = geom.output_size(h, w, c)?;
    let k = geom.kernel;
    let pad = geom.pad();
    let s = geom.stride;
    let out_per_group = geom.out_channels / geom.groups;
    let mut out = FeatureMap::zeros(oh, ow, geom.out_channels);
    let plane_in = h * w;
    let src = input.data();

    for o in 0..geom.out_channels {
        let group = o / out_per_group;
        let dst = out.plane_mut(o);
        if let Some(b) = bias {
            dst.iter_mut().for_each(|v| *v = b[o]);
        }
        for ci in 0..geom.in_per_group {
            let ic = group * geom.in_per_group + ci;
            let in_plane = &src[ic * plane_in..(ic + 1) * plane_in];
            let wbase = (o * geom.in_per_group + ci) * k * k;
            for ky in 0..k {
                for kx in 0..k {
                    let wv = weight[wbase + ky * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (x_lo, x_hi) = valid_out_range(kx, pad, s, w, ow);
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let in_row = &in_plane[iy as usize * w..(iy as usize + 1) * w];
                        let out_row = &mut dst[oy * ow..(oy + 1) * ow];
                        if s == 1 {
                            let shift = x_lo + kx - pad;
                            for (o_v, i_v) in out_row[x_lo..x_hi]
                                .iter_mut()
                                .zip(&in_row[shift..shift + (x_hi - x_lo)])
                            {
                                *o_v += wv * i_v;
                            }
                        } else {
                            for ox in x_lo..x_hi {
                                out_row[ox] += wv * in_row[ox * s + kx - pad];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of a convolution with respect to input, weight and bias.
pub(crate) struct ConvGrads {
    pub input: FeatureMap,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

pub(crate) fn conv2d_backward(
    input: &FeatureMap,
    weight: &[f64],
    geom: &ConvGeometry,
    grad_out: &FeatureMap,
    need_input: bool,
) -> ConvGrads {
    let (h, w, c) = input.shape();
    let (oh, ow, _) = grad_out.shape();
    let k = geom.kernel;
    let pad = geom.pad();
    let s = geom.stride;
    let out_per_group = geom.out_channels / geom.groups;
    let plane_in = h * w;
    let src = input.data();

    let mut g_in = FeatureMap::zeros(h, w, c);
    let mut g_w = vec![0.0; weight.len()];
    let mut g_b = vec![0.0; geom.out_channels];

    for o in 0..geom.out_channels {
        let group = o / out_per_group;
        let go = grad_out.plane(o);
        g_b[o] = go.iter().sum();
        for ci in 0..geom.in_per_group {
            let ic = group * geom.in_per_group + ci;
            let in_plane = &src[ic * plane_in..(ic + 1) * plane_in];
            let wbase = (o * geom.in_per_group + ci) * k * k;
            for ky in 0..k {
                for kx in 0..k {
                    let wv = weight[wbase + ky * k + kx];
                    let (x_lo, x_hi) = valid_out_range(kx, pad, s, w, ow);
                    let mut acc = 0.0;
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let iy = iy as usize;
                        let go_row = &go[oy * ow..(oy + 1) * ow];
                        let in_row = &in_plane[iy * w..(iy + 1) * w];
                        if s == 1 {
                            let shift = x_lo + kx - pad;
                            let n = x_hi - x_lo;
                            acc += go_row[x_lo..x_hi]
                                .iter()
                                .zip(&in_row[shift..shift + n])
                                .map(|(a, b)| a * b)
                                .sum::<f64>();
                            if need_input && wv != 0.0 {
                                let gi_row = &mut g_in.plane_mut(ic)[iy * w..(iy + 1) * w];
                                for (gi, g) in gi_row[shift..shift + n].iter_mut().zip(&go_row[x_lo..x_hi]) {
                                    *gi += wv * g;
                                }
                            }
                        } else {
                            for ox in x_lo..x_hi {
                                let ix = ox * s + kx - pad;
                                acc += go_row[ox] * in_row[ix];
                                if need_input {
                                    g_in.plane_mut(ic)[iy * w + ix] += wv * go_row[ox];
                                }
                            }
                        }
                    }
                    g_w[wbase + ky * k + kx] += acc;
                }
            }
        }
    }
    ConvGrads {
        input: g_in,
        weight: g_w,
        bias: g_b,
    }
}

/// Per-pixel normalization across channels followed by a per-channel affine.
pub fn layer_norm(input: &FeatureMap, gain: &[f64], shift: &[f64], epsilon: f64) -> Result<FeatureMap> {
    Ok(layer_norm_with_stats(input, gain, shift, epsilon)?.0)
}

/// Returns the output together with the normalized input and per-pixel
/// inverse standard deviation.
pub(crate) fn layer_norm_with_stats(
    input: &FeatureMap,
    gain: &[f64],
    shift: &[f64],
    epsilon: f64,
) -> Result<(FeatureMap, FeatureMap, Vec<f64>)> {
    let (h, w, c) = input.shape();
    if gain.len() != c || shift.len() != c {
        return Err(Error::shape(format!(
            "layer norm affine has {}/{} entries for {c} channels",
            gain.len(),
            shift.len()
        )));
    }
    if !(epsilon > 0.0) {
        return Err(Error::param("layer norm epsilon must be positive"));
    }
    let n = h * w;
    let src = input.data();
    let mut mean = vec![0.0; n];
    for ch in 0..c {
        for (m, v) in mean.iter_mut().zip(&src[ch * n..(ch + 1) * n]) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= c as f64);
    let mut var = vec![0.0; n];
    for ch in 0..c {
        for ((s, v), m) in var.iter_mut().zip(&src[ch * n..(ch + 1) * n]).zip(&mean) {
            let d = v - m;
            *s += d * d;
        }
    }
    let inv_std: Vec<f64> = var
        .iter()
        .map(|s| 1.0 / (s / c as f64 + epsilon).sqrt())
        .collect();

    let mut xhat = FeatureMap::zeros(h, w, c);
    let mut out = FeatureMap::zeros(h, w, c);
    for ch in 0..c {
        let xs = &src[ch * n..(ch + 1) * n];
        let xh = xhat.plane_mut(ch);
        for p in 0..n {
            xh[p] = (xs[p] - mean[p]) * inv_std[p];
        }
        let (g, b) = (gain[ch], shift[ch]);
        for (o, v) in out.plane_mut(ch).iter_mut().zip(xhat.plane(ch)) {
            *o = g * v + b;
        }
    }
    Ok((out, xhat, inv_std))
}

pub(crate) struct LayerNormGrads {
    pub input: FeatureMap,
    pub gain: Vec<f64>,
    pub shift: Vec<f64>,
}

pub(crate) fn layer_norm_backward(
    xhat: &FeatureMap,
    inv_std: &[f64],
    gain: &[f64],
    grad_out: &FeatureMap,
) -> LayerNormGrads {
    let (h, w, c) = xhat.shape();
    let n = h * w;
    let mut g_gain = vec![0.0; c];
    let mut g_shift = vec![0.0; c];
    let mut sum_g = vec![0.0; n];
    let mut sum_gx = vec![0.0; n];
    for ch in 0..c {
        let go = grad_out.plane(ch);
        let xh = xhat.plane(ch);
        for p in 0..n {
            g_gain[ch] += go[p] * xh[p];
            g_shift[ch] += go[p];
            let gx = go[p] * gain[ch];
            sum_g[p] += gx;
            sum_gx[p] += gx * xh[p];
        }
    }
    let cf = c as f64;
    let mut g_in = FeatureMap::zeros(h, w, c);
    for ch in 0..c {
        let go = grad_out.plane(ch);
        let xh = xhat.plane(ch);
        let gi = g_in.plane_mut(ch);
        for p in 0..n {
            let gx = go[p] * gain[ch];
            gi[p] = inv_std[p] / cf * (cf * gx - sum_g[p] - xh[p] * sum_gx[p]);
        }
    }
    LayerNormGrads {
        input: g_in,
        gain: g_gain,
        shift: g_shift,
    }
}

/// Space-to-depth by a factor of two: `(H, W, C) -> (H/2, W/2, 4C)`.
/// Output channel `4c + 2dy + dx` holds input pixel `(2y + dy, 2x + dx, c)`.
pub fn pixel_unshuffle(input: &FeatureMap) -> Result<FeatureMap> {
    let (h, w, c) = input.shape();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!("pixel unshuffle needs even dims, got {h}x{w}")));
    }
    Ok(FeatureMap::from_fn(h / 2, w / 2, 4 * c, |y, x, oc| {
        let (ch, dy, dx) = (oc / 4, (oc / 2) % 2, oc % 2);
        input.get(2 * y + dy, 2 * x + dx, ch)
    }))
}

/// Depth-to-space by a factor of two: `(H, W, 4C) -> (2H, 2W, C)`.
pub fn pixel_shuffle(input: &FeatureMap) -> Result<FeatureMap> {
    let (h, w, c) = input.shape();
    if c % 4 != 0 {
        return Err(Error::shape(format!("pixel shuffle needs channels divisible by 4, got {c}")));
    }
    Ok(FeatureMap::from_fn(2 * h, 2 * w, c / 4, |y, x, ch| {
        input.get(y / 2, x / 2, 4 * ch + 2 * (y % 2) + (x % 2))
    }))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResampleDirection {
    Down,
    Up,
}

/// Learnable 2x resampling.
///
/// `Down`: pixel-unshuffle then a 1x1 conv `4C -> 2C`, giving `(H/2, W/2, 2C)`.
/// `Up`: a 1x1 conv `C -> 2C` then pixel-shuffle, giving `(2H, 2W, C/2)`.
pub fn resample(input: &FeatureMap, direction: ResampleDirection, weight: &Param) -> Result<FeatureMap> {
    let (h, w, c) = input.shape();
    match direction {
        ResampleDirection::Down => {
            if h % 2 != 0 || w % 2 != 0 {
                return Err(Error::shape(format!("downsampling needs even dims, got {h}x{w}")));
            }
            expect_pointwise(weight, 4 * c, 2 * c)?;
            conv2d(&pixel_unshuffle(input)?, weight, None, 1, 1)
        }
        ResampleDirection::Up => {
            if c % 2 != 0 {
                return Err(Error::shape(format!("upsampling needs an even channel count, got {c}")));
            }
            expect_pointwise(weight, c, 2 * c)?;
            pixel_shuffle(&conv2d(input, weight, None, 1, 1)?)
        }
    }
}

fn expect_pointwise(weight: &Param, cin: usize, cout: usize) -> Result<()> {
    if weight.shape() != [cout, cin, 1, 1] {
        return Err(Error::shape(format!(
            "resample weight must be [{cout}, {cin}, 1, 1], got {:?}",
            weight.shape()
        )));
    }
    Ok(())
}

/// Box-filter downsampling by an integer factor.
pub fn area_downsample(input: &FeatureMap, factor: usize) -> Result<FeatureMap> {
    let (h, w, c) = input.shape();
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::shape(format!(
            "area downsampling by {factor} needs dims divisible by it, got {h}x{w}"
        )));
    }
    let norm = 1.0 / (factor * factor) as f64;
    Ok(FeatureMap::from_fn(h / factor, w / factor, c, |y, x, ch| {
        let mut acc = 0.0;
        for dy in 0..factor {
            for dx in 0..factor {
                acc += input.get(y * factor + dy, x * factor + dx, ch);
            }
        }
        acc * norm
    }))
}
