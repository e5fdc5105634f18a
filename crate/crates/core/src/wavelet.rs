//! Single-level orthonormal 2D Haar transform.
//!
//! For each disjoint 2x2 block `[[a, b], [c, d]]` and every channel:
//!
//! ```text
//! LL = (a + b + c + d) / 2     LH = (a + b - c - d) / 2
//! HL = (a - b + c - d) / 2     HH = (a - b - c + d) / 2
//! ```
//!
//! LH carries vertical detail (rows differ), HL horizontal detail.
//! The transform matrix is orthogonal and symmetric up to band ordering,
//! so the inverse is also the adjoint.

use crate::error::{Error, Result};
use crate::tensor::FeatureMap;

/// Analysis filters, `1/sqrt(2) * [1, 1]` and `1/sqrt(2) * [1, -1]`.
pub const LOW_PASS: [f64; 2] = [std::f64::consts::FRAC_1_SQRT_2, std::f64::consts::FRAC_1_SQRT_2];
pub const HIGH_PASS: [f64; 2] = [std::f64::consts::FRAC_1_SQRT_2, -std::f64::consts::FRAC_1_SQRT_2];

#[derive(Clone, Debug, PartialEq)]
pub struct WaveletBands {
    pub ll: FeatureMap,
    pub lh: FeatureMap,
    pub hl: FeatureMap,
    pub hh: FeatureMap,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BandSelection {
    /// The low-frequency LL band.
    Ll,
    /// The three detail bands LH, HL, HH.
    High,
}

impl WaveletBands {
    pub fn shape(&self) -> (usize, usize, usize) {
        self.ll.shape()
    }

    fn check(&self) -> Result<()> {
        let s = self.ll.shape();
        if self.lh.shape() != s || self.hl.shape() != s || self.hh.shape() != s {
            return Err(Error::shape(format!(
                "wavelet bands disagree in shape: {:?} {:?} {:?} {:?}",
                s,
                self.lh.shape(),
                self.hl.shape(),
                self.hh.shape()
            )));
        }
        Ok(())
    }

    pub fn energy(&self) -> f64 {
        self.ll.sum_squares() + self.lh.sum_squares() + self.hl.sum_squares() + self.hh.sum_squares()
    }

    /// Bands stacked along channels as `[LL, LH, HL, HH]`.
    pub fn to_stacked(&self) -> Result<FeatureMap> {
        self.check()?;
        FeatureMap::concat_channels(&[&self.ll, &self.lh, &self.hl, &self.hh])
    }

    pub fn from_stacked(stacked: &FeatureMap) -> Result<Self> {
        let c4 = stacked.channels();
        if c4 % 4 != 0 {
            return Err(Error::shape(format!("stacked bands need 4C channels, got {c4}")));
        }
        let c = c4 / 4;
        Ok(WaveletBands {
            ll: stacked.slice_channels(0, c)?,
            lh: stacked.slice_channels(c, c)?,
            hl: stacked.slice_channels(2 * c, c)?,
            hh: stacked.slice_channels(3 * c, c)?,
        })
    }
}

/// Forward transform.
pub fn dwt2d(input: &FeatureMap) -> Result<WaveletBands> {
    WaveletBands::from_stacked(&dwt2d_stacked(input)?)
}

/// Inverse transform.
pub fn iwt2d(bands: &WaveletBands) -> Result<FeatureMap> {
    iwt2d_stacked(&bands.to_stacked()?)
}

/// Forward transform with the bands stacked `[LL, LH, HL, HH]` along
/// channels: `(H, W, C) -> (H/2, W/2, 4C)`.
pub fn dwt2d_stacked(input: &FeatureMap) -> Result<FeatureMap> {
    let (h, w, c) = input.shape();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!(
            "haar transform needs even height and width, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = FeatureMap::zeros(oh, ow, 4 * c);
    let n = oh * ow;
    let dst = out.data_mut();
    for ch in 0..c {
        let src = input.plane(ch);
        for y in 0..oh {
            let r0 = &src[2 * y * w..(2 * y + 1) * w];
            let r1 = &src[(2 * y + 1) * w..(2 * y + 2) * w];
            for x in 0..ow {
                let (a, b) = (r0[2 * x], r0[2 * x + 1]);
                let (cc, d) = (r1[2 * x], r1[2 * x + 1]);
                let i = y * ow + x;
                dst[ch * n + i] = 0.5 * (a + b + cc + d);
                dst[(c + ch) * n + i] = 0.5 * (a + b - cc - d);
                dst[(2 * c + ch) * n + i] = 0.5 * (a - b + cc - d);
                dst[(3 * c + ch) * n + i] = 0.5 * (a - b - cc + d);
            }
        }
    }
    Ok(out)
}

/// Inverse of [`dwt2d_stacked`]: `(H/2, W/2, 4C) -> (H, W, C)`.
pub fn iwt2d_stacked(stacked: &FeatureMap) -> Result<FeatureMap> {
    let (oh, ow, c4) = stacked.shape();
    if c4 % 4 != 0 {
        return Err(Error::shape(format!("stacked bands need 4C channels, got {c4}")));
    }
    let c = c4 / 4;
    let (h, w) = (2 * oh, 2 * ow);
    let mut out = FeatureMap::zeros(h, w, c);
    let n = oh * ow;
    let src = stacked.data();
    for ch in 0..c {
        let dst = out.plane_mut(ch);
        for y in 0..oh {
            for x in 0..ow {
                let i = y * ow + x;
                let ll = src[ch * n + i];
                let lh = src[(c + ch) * n + i];
                let hl = src[(2 * c + ch) * n + i];
                let hh = src[(3 * c + ch) * n + i];
                dst[2 * y * w + 2 * x] = 0.5 * (ll + lh + hl + hh);
                dst[2 * y * w + 2 * x + 1] = 0.5 * (ll + lh - hl - hh);
                dst[(2 * y + 1) * w + 2 * x] = 0.5 * (ll - lh + hl - hh);
                dst[(2 * y + 1) * w + 2 * x + 1] = 0.5 * (ll - lh - hl + hh);
            }
        }
    }
    Ok(out)
}

/// Replaces the selected bands of `source` with those of `donor`.
pub fn swap_bands(source: &WaveletBands, donor: &WaveletBands, which: BandSelection) -> Result<WaveletBands> {
    source.check()?;
    donor.check()?;
    if source.shape() != donor.shape() {
        return Err(Error::shape(format!(
            "cannot swap bands of shape {:?} with {:?}",
            source.shape(),
            donor.shape()
        )));
    }
    Ok(match which {
        BandSelection::Ll => WaveletBands {
            ll: donor.ll.clone(),
            ..source.clone()
        },
        BandSelection::High => WaveletBands {
            ll: source.ll.clone(),
            ..donor.clone()
        },
    })
}
