//! Python bindings. Images cross the boundary as nested `[row][col][channel]`
//! lists or as flat channel-planar lists; no numpy dependency.

use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use walmafa::checkpoint::{load_params, save_params, DType};
use walmafa::config::KeyValues;
use walmafa::model::{ModelConfig, WalMaFa};
use walmafa::train::{train_step, AdamState, TrainConfig};
use walmafa::wavelet::{BandSelection, WaveletBands};
use walmafa::{fourier, metrics, wavelet, Error, ParamStore};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Shape(_) | Error::Param(_) | Error::Version(_) => PyValueError::new_err(e.to_string()),
        Error::Numeric { .. } => PyArithmeticError::new_err(e.to_string()),
        Error::Format(_) | Error::Io(_) => PyIOError::new_err(e.to_string()),
    }
}

/// Channel-planar `H x W x C` float map.
#[pyclass(name = "FeatureMap", module = "walmafa", from_py_object)]
#[derive(Clone)]
pub struct PyFeatureMap {
    inner: walmafa::FeatureMap,
}

impl From<walmafa::FeatureMap> for PyFeatureMap {
    fn from(inner: walmafa::FeatureMap) -> Self {
        PyFeatureMap { inner }
    }
}

#[pymethods]
impl PyFeatureMap {
    /// `data` is channel-planar: all of channel 0 row-major, then channel 1, ...
    #[new]
    fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> PyResult<Self> {
        walmafa::FeatureMap::from_vec(height, width, channels, data)
            .map(Into::into)
            .map_err(to_py)
    }

    #[staticmethod]
    fn zeros(height: usize, width: usize, channels: usize) -> Self {
        walmafa::FeatureMap::zeros(height, width, channels).into()
    }

    /// From nested `[row][col][channel]` lists.
    #[staticmethod]
    fn from_rows(rows: Vec<Vec<Vec<f64>>>) -> PyResult<Self> {
        let h = rows.len();
        let w = rows.first().map_or(0, Vec::len);
        let c = rows.first().and_then(|r| r.first()).map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != w || r.iter().any(|px| px.len() != c)) {
            return Err(PyValueError::new_err("ragged nested list"));
        }
        Ok(walmafa::FeatureMap::from_fn(h, w, c, |y, x, ch| rows[y][x][ch]).into())
    }

    fn to_rows(&self) -> Vec<Vec<Vec<f64>>> {
        let (h, w, c) = self.inner.shape();
        (0..h)
            .map(|y| (0..w).map(|x| (0..c).map(|ch| self.inner.get(y, x, ch)).collect()).collect())
            .collect()
    }

    fn to_list(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        self.inner.shape()
    }

    fn get(&self, y: usize, x: usize, c: usize) -> PyResult<f64> {
        let (h, w, ch) = self.inner.shape();
        if y >= h || x >= w || c >= ch {
            return Err(PyValueError::new_err(format!("index ({y}, {x}, {c}) out of range for {:?}", (h, w, ch))));
        }
        Ok(self.inner.get(y, x, c))
    }

    fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> PyResult<Self> {
        self.inner.crop(top, left, height, width).map(Into::into).map_err(to_py)
    }

    fn pad_reflect(&self, height: usize, width: usize) -> PyResult<Self> {
        self.inner.pad_reflect(height, width).map(Into::into).map_err(to_py)
    }

    fn max_abs_diff(&self, other: &PyFeatureMap) -> PyResult<f64> {
        if !self.inner.same_shape(&other.inner) {
            return Err(PyValueError::new_err("shape mismatch"));
        }
        Ok(self.inner.max_abs_diff(&other.inner))
    }

    fn sum_squares(&self) -> f64 {
        self.inner.sum_squares()
    }

    fn __repr__(&self) -> String {
        format!("FeatureMap{:?}", self.inner.shape())
    }

    fn __eq__(&self, other: &PyFeatureMap) -> bool {
        self.inner == other.inner
    }
}

type Bands = (PyFeatureMap, PyFeatureMap, PyFeatureMap, PyFeatureMap);

fn bands_from(ll: &PyFeatureMap, lh: &PyFeatureMap, hl: &PyFeatureMap, hh: &PyFeatureMap) -> WaveletBands {
    WaveletBands {
        ll: ll.inner.clone(),
        lh: lh.inner.clone(),
        hl: hl.inner.clone(),
        hh: hh.inner.clone(),
    }
}

fn bands_to(b: WaveletBands) -> Bands {
    (b.ll.into(), b.lh.into(), b.hl.into(), b.hh.into())
}

/// Single-level Haar transform, returns `(ll, lh, hl, hh)`.
#[pyfunction]
fn dwt2d(x: &PyFeatureMap) -> PyResult<Bands> {
    wavelet::dwt2d(&x.inner).map(bands_to).map_err(to_py)
}

#[pyfunction]
fn iwt2d(ll: &PyFeatureMap, lh: &PyFeatureMap, hl: &PyFeatureMap, hh: &PyFeatureMap) -> PyResult<PyFeatureMap> {
    wavelet::iwt2d(&bands_from(ll, lh, hl, hh)).map(Into::into).map_err(to_py)
}

/// Replaces `which` ("ll" or "high") of `source` with the donor's bands.
#[pyfunction]
fn swap_wavelet(source: &PyFeatureMap, donor: &PyFeatureMap, which: &str) -> PyResult<PyFeatureMap> {
    let which = match which {
        "ll" => BandSelection::Ll,
        "high" => BandSelection::High,
        other => return Err(PyValueError::new_err(format!("unknown band selection `{other}`"))),
    };
    let s = wavelet::dwt2d(&source.inner).map_err(to_py)?;
    let d = wavelet::dwt2d(&donor.inner).map_err(to_py)?;
    let swapped = wavelet::swap_bands(&s, &d, which).map_err(to_py)?;
    wavelet::iwt2d(&swapped).map(Into::into).map_err(to_py)
}

/// Unitary 2-D FFT per channel, returns `(amplitude, phase)`.
#[pyfunction]
fn fft2d_polar(x: &PyFeatureMap) -> (PyFeatureMap, PyFeatureMap) {
    let s = fourier::fft2d_polar(&x.inner);
    (s.amplitude.into(), s.phase.into())
}

/// Returns `(image, max_imag_residual)`.
#[pyfunction]
fn ifft2d_polar(amplitude: &PyFeatureMap, phase: &PyFeatureMap) -> PyResult<(PyFeatureMap, f64)> {
    let spec = fourier::PolarSpectrum {
        amplitude: amplitude.inner.clone(),
        phase: phase.inner.clone(),
    };
    let r = fourier::ifft2d_polar(&spec).map_err(to_py)?;
    Ok((r.image.into(), r.max_imag_residual))
}

/// Replaces `which` ("amplitude" or "phase") of `source` with the donor's.
#[pyfunction]
fn swap_fourier(source: &PyFeatureMap, donor: &PyFeatureMap, which: &str) -> PyResult<(PyFeatureMap, f64)> {
    let which = match which {
        "amplitude" => fourier::PolarComponent::Amplitude,
        "phase" => fourier::PolarComponent::Phase,
        other => return Err(PyValueError::new_err(format!("unknown component `{other}`"))),
    };
    let s = fourier::fft2d_polar(&source.inner);
    let d = fourier::fft2d_polar(&donor.inner);
    let swapped = fourier::swap_polar(&s, &d, which).map_err(to_py)?;
    let r = fourier::ifft2d_polar(&swapped).map_err(to_py)?;
    Ok((r.image.into(), r.max_imag_residual))
}

#[pyfunction]
#[pyo3(signature = (a, b, peak = 1.0))]
fn psnr(a: &PyFeatureMap, b: &PyFeatureMap, peak: f64) -> PyResult<f64> {
    metrics::psnr(&a.inner, &b.inner, peak).map_err(to_py)
}

/// Returns `(mean_ssim, ssim_map)`.
#[pyfunction]
fn ssim(a: &PyFeatureMap, b: &PyFeatureMap) -> PyResult<(f64, PyFeatureMap)> {
    let (s, map) = metrics::ssim(&a.inner, &b.inner).map_err(to_py)?;
    Ok((s, map.into()))
}

fn key_values(config: Option<&Bound<'_, PyDict>>) -> PyResult<KeyValues> {
    let mut kv = KeyValues::new();
    if let Some(d) = config {
        for (k, v) in d.iter() {
            let key: String = k.extract()?;
            let value = match v.extract::<Vec<f64>>() {
                Ok(items) => items.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(","),
                Err(_) => v.str()?.to_string(),
            };
            kv.set(&key, value);
        }
    }
    Ok(kv)
}

fn parse_dtype(precision: &str) -> PyResult<DType> {
    match precision {
        "f64" => Ok(DType::F64),
        "f32" => Ok(DType::F32),
        other => Err(PyValueError::new_err(format!("precision must be f32 or f64, got `{other}`"))),
    }
}

/// The enhancement network together with its parameters and optimizer state.
#[pyclass(name = "Model", module = "walmafa")]
pub struct PyModel {
    model: WalMaFa,
    params: ParamStore,
    adam: AdamState,
    train: TrainConfig,
}

#[pymethods]
impl PyModel {
    /// `config` takes the same keys as the CLI config file.
    #[new]
    #[pyo3(signature = (config = None, seed = 0))]
    fn new(config: Option<&Bound<'_, PyDict>>, seed: u64) -> PyResult<Self> {
        let kv = key_values(config)?;
        let cfg = ModelConfig::from_key_values(&kv).map_err(to_py)?;
        let model = WalMaFa::new(cfg).map_err(to_py)?;
        let params = model.init_params(seed).map_err(to_py)?;
        Ok(PyModel {
            model,
            params,
            adam: AdamState::new(),
            train: TrainConfig::default(),
        })
    }

    /// Loads a checkpoint; the architecture comes from `config_path`, or the
    /// `<checkpoint>.cfg` sidecar written by training.
    #[staticmethod]
    #[pyo3(signature = (path, config_path = None))]
    fn load(path: PathBuf, config_path: Option<PathBuf>) -> PyResult<Self> {
        let cfg_path = config_path.unwrap_or_else(|| {
            let mut s = path.clone().into_os_string();
            s.push(".cfg");
            s.into()
        });
        let kv = KeyValues::load(&cfg_path).map_err(to_py)?;
        let known: Vec<&str> = ModelConfig::KEYS.iter().copied().collect();
        let mut model_kv = KeyValues::new();
        for k in kv.keys().filter(|k| known.contains(k)) {
            model_kv.set(k, kv.get(k).unwrap_or_default());
        }
        let model = WalMaFa::new(ModelConfig::from_key_values(&model_kv).map_err(to_py)?).map_err(to_py)?;
        let params = load_params(&path).map_err(to_py)?;
        model.check_params(&params).map_err(to_py)?;
        Ok(PyModel {
            model,
            params,
            adam: AdamState::new(),
            train: TrainConfig::default(),
        })
    }

    /// Writes the checkpoint and its `.cfg` sidecar.
    #[pyo3(signature = (path, precision = "f64"))]
    fn save(&self, path: PathBuf, precision: &str) -> PyResult<()> {
        save_params(&self.params, &path, parse_dtype(precision)?).map_err(to_py)?;
        let mut sidecar = path.into_os_string();
        sidecar.push(".cfg");
        self.model.config().to_key_values().save(PathBuf::from(sidecar)).map_err(to_py)
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.params.num_scalars()
    }

    fn config(&self) -> Vec<(String, String)> {
        let kv = self.model.config().to_key_values();
        kv.keys().map(|k| (k.to_owned(), kv.get(k).unwrap_or_default().to_owned())).collect()
    }

    /// Enhanced image; sides must be multiples of 8.
    fn forward(&self, py: Python<'_>, image: &PyFeatureMap) -> PyResult<PyFeatureMap> {
        let out = py.detach(|| self.model.forward(&self.params, &image.inner)).map_err(to_py)?;
        Ok(out.enhanced.into())
    }

    /// `(enhanced, ll_pred, latent_out)`.
    fn forward_all(&self, py: Python<'_>, image: &PyFeatureMap) -> PyResult<(PyFeatureMap, PyFeatureMap, PyFeatureMap)> {
        let out = py.detach(|| self.model.forward(&self.params, &image.inner)).map_err(to_py)?;
        Ok((out.enhanced.into(), out.ll_pred.into(), out.latent_out.into()))
    }

    /// Dict with `total`, `charbonnier`, `wavelet` and `fourier`.
    fn losses<'py>(&self, py: Python<'py>, low: &PyFeatureMap, high: &PyFeatureMap) -> PyResult<Bound<'py, PyDict>> {
        let r = py.detach(|| self.model.losses(&self.params, &low.inner, &high.inner)).map_err(to_py)?;
        record_dict(py, r)
    }

    /// One Adam step on the given `(low, high)` pairs. Returns the
    /// pre-update losses.
    #[pyo3(signature = (pairs, learning_rate = None))]
    fn train_step<'py>(
        &mut self,
        py: Python<'py>,
        pairs: Vec<(PyFeatureMap, PyFeatureMap)>,
        learning_rate: Option<f64>,
    ) -> PyResult<Bound<'py, PyDict>> {
        if let Some(lr) = learning_rate {
            self.train.learning_rate = lr;
            self.train.min_learning_rate = lr;
        }
        let batch: Vec<_> = pairs.into_iter().map(|(a, b)| (a.inner, b.inner)).collect();
        let PyModel { model, params, adam, train } = self;
        let r = py.detach(|| train_step(model, params, &batch, adam, train)).map_err(to_py)?;
        record_dict(py, r)
    }
}

fn record_dict(py: Python<'_>, r: walmafa::model::LossRecord) -> PyResult<Bound<'_, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("total", r.total)?;
    d.set_item("charbonnier", r.charbonnier)?;
    d.set_item("wavelet", r.wavelet)?;
    d.set_item("fourier", r.fourier)?;
    Ok(d)
}

#[pymodule]
#[pyo3(name = "walmafa")]
fn walmafa_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyFeatureMap>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(dwt2d, m)?)?;
    m.add_function(wrap_pyfunction!(iwt2d, m)?)?;
    m.add_function(wrap_pyfunction!(swap_wavelet, m)?)?;
    m.add_function(wrap_pyfunction!(fft2d_polar, m)?)?;
    m.add_function(wrap_pyfunction!(ifft2d_polar, m)?)?;
    m.add_function(wrap_pyfunction!(swap_fourier, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add("SIZE_MULTIPLE", walmafa::model::SIZE_MULTIPLE)?;
    Ok(())
}
