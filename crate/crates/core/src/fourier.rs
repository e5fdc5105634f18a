//! Per-channel unitary 2D DFT in polar form.
//!
//! `X(u, v) = 1/sqrt(HW) * sum_{h,w} x(h, w) exp(-j 2 pi (hu/H + wv/W))`,
//! split into amplitude `|X|` and phase `atan2(Im, Re)` in `(-pi, pi]`.

use std::cell::RefCell;
use std::f64::consts::PI;

use rustfft::num_complex::Complex64;
use rustfft::{FftDirection, FftPlanner};

use crate::error::{Error, Result};
use crate::tensor::FeatureMap;

/// Imaginary residue above which a polar spectrum is considered
/// non-Hermitian on reconstruction.
pub const IMAG_RESIDUAL_WARN: f64 = 1e-6;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

/// In-place unitary 2D transform of a row-major `h x w` complex plane.
pub(crate) fn fft2_unitary(buf: &mut [Complex64], h: usize, w: usize, direction: FftDirection) {
    debug_assert_eq!(buf.len(), h * w);
    PLANNER.with(|planner| {
        let mut planner = planner.borrow_mut();
        let row_fft = planner.plan_fft(w, direction);
        let col_fft = planner.plan_fft(h, direction);
        let mut scratch =
            vec![Complex64::default(); row_fft.get_inplace_scratch_len().max(col_fft.get_inplace_scratch_len())];
        for row in buf.chunks_exact_mut(w) {
            row_fft.process_with_scratch(row, &mut scratch);
        }
        let mut col = vec![Complex64::default(); h];
        for x in 0..w {
            for y in 0..h {
                col[y] = buf[y * w + x];
            }
            col_fft.process_with_scratch(&mut col, &mut scratch);
            for y in 0..h {
                buf[y * w + x] = col[y];
            }
        }
    });
    let norm = 1.0 / ((h * w) as f64).sqrt();
    buf.iter_mut().for_each(|z| *z *= norm);
}

/// Whether `(u, v)` maps to itself under `(u, v) -> (-u mod h, -v mod w)`.
/// The spectrum of a real signal is exactly real at these bins.
#[inline]
fn self_conjugate(u: usize, v: usize, h: usize, w: usize) -> bool {
    (2 * u) % h == 0 && (2 * v) % w == 0
}

/// Phase in `(-pi, pi]` with `atan2(0, 0) = 0`.
#[inline]
pub(crate) fn phase_of(z: Complex64) -> f64 {
    if z.im == 0.0 {
        if z.re < 0.0 {
            PI
        } else {
            0.0
        }
    } else {
        z.im.atan2(z.re)
    }
}

/// Complex spectrum of every channel of a real map, concatenated plane by
/// plane. Self-conjugate bins are forced exactly real.
pub(crate) fn spectrum(input: &FeatureMap) -> Vec<Complex64> {
    let (h, w, c) = input.shape();
    let n = h * w;
    let mut out: Vec<Complex64> = input.data().iter().map(|&v| Complex64::new(v, 0.0)).collect();
    for ch in 0..c {
        let plane = &mut out[ch * n..(ch + 1) * n];
        fft2_unitary(plane, h, w, FftDirection::Forward);
        for u in 0..h {
            for v in 0..w {
                if self_conjugate(u, v, h, w) {
                    plane[u * w + v].im = 0.0;
                }
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolarSpectrum {
    pub amplitude: FeatureMap,
    pub phase: FeatureMap,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PolarComponent {
    Amplitude,
    Phase,
}

impl PolarSpectrum {
    pub fn shape(&self) -> (usize, usize, usize) {
        self.amplitude.shape()
    }

    /// Amplitude and phase stacked along channels `[A, P]`.
    pub fn to_stacked(&self) -> Result<FeatureMap> {
        self.amplitude.expect_same_shape(&self.phase, "polar spectrum")?;
        FeatureMap::concat_channels(&[&self.amplitude, &self.phase])
    }

    pub fn from_stacked(stacked: &FeatureMap) -> Result<Self> {
        let c2 = stacked.channels();
        if c2 % 2 != 0 {
            return Err(Error::shape(format!("stacked spectrum needs 2C channels, got {c2}")));
        }
        Ok(PolarSpectrum {
            amplitude: stacked.slice_channels(0, c2 / 2)?,
            phase: stacked.slice_channels(c2 / 2, c2 / 2)?,
        })
    }
}

/// Result of an inverse transform: the real part, and the largest
/// discarded imaginary magnitude.
#[derive(Clone, Debug, PartialEq)]
pub struct Reconstruction {
    pub image: FeatureMap,
    pub max_imag_residual: f64,
}

impl Reconstruction {
    /// False when the spectrum was not Hermitian (e.g. after swapping
    /// components between unrelated images).
    pub fn is_hermitian(&self) -> bool {
        self.max_imag_residual <= IMAG_RESIDUAL_WARN
    }
}

pub fn fft2d_polar(input: &FeatureMap) -> PolarSpectrum {
    let (h, w, c) = input.shape();
    let spec = spectrum(input);
    let amplitude = FeatureMap::from_vec(h, w, c, spec.iter().map(|z| z.norm()).collect())
        .expect("spectrum has input shape");
    let phase = FeatureMap::from_vec(h, w, c, spec.iter().map(|&z| phase_of(z)).collect())
        .expect("spectrum has input shape");
    PolarSpectrum { amplitude, phase }
}

pub fn ifft2d_polar(spec: &PolarSpectrum) -> Result<Reconstruction> {
    spec.amplitude.expect_same_shape(&spec.phase, "polar spectrum")?;
    let (h, w, c) = spec.shape();
    let n = h * w;
    let mut buf: Vec<Complex64> = spec
        .amplitude
        .data()
        .iter()
        .zip(spec.phase.data())
        .map(|(&a, &p)| Complex64::from_polar(a, p))
        .collect();
    for ch in 0..c {
        fft2_unitary(&mut buf[ch * n..(ch + 1) * n], h, w, FftDirection::Inverse);
    }
    let max_imag_residual = buf.iter().map(|z| z.im.abs()).fold(0.0, f64::max);
    let image = FeatureMap::from_vec(h, w, c, buf.iter().map(|z| z.re).collect())?;
    Ok(Reconstruction {
        image,
        max_imag_residual,
    })
}

/// Replaces one polar component of `source` with the donor's.
pub fn swap_polar(source: &PolarSpectrum, donor: &PolarSpectrum, which: PolarComponent) -> Result<PolarSpectrum> {
    source.amplitude.expect_same_shape(&source.phase, "polar spectrum")?;
    donor.amplitude.expect_same_shape(&donor.phase, "polar spectrum")?;
    source.amplitude.expect_same_shape(&donor.amplitude, "swap_polar")?;
    Ok(match which {
        PolarComponent::Amplitude => PolarSpectrum {
            amplitude: donor.amplitude.clone(),
            phase: source.phase.clone(),
        },
        PolarComponent::Phase => PolarSpectrum {
            amplitude: source.amplitude.clone(),
            phase: donor.phase.clone(),
        },
    })
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_phase(p: f64) -> f64 {
    let r = (p + PI).rem_euclid(2.0 * PI) - PI;
    if r <= -PI {
        r + 2.0 * PI
    } else {
        r
    }
}
