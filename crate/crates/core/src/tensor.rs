//! Dense tensors used throughout the network.
//!
//! [`FeatureMap`] is the activation carrier: a `height x width x channels`
//! block of reals stored channel-planar, each plane row-major, so that
//! `data[c * height * width + y * width + x]` is the value at `(y, x, c)`.
//! [`ParamStore`] holds the named, shaped learnable weights.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        FeatureMap {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    /// Wraps channel-planar data.
    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::shape(format!(
                "feature map dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::shape(format!(
                "expected {} values for {height}x{width}x{channels}, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(FeatureMap {
            height,
            width,
            channels,
            data,
        })
    }

    /// Builds a map from a function of `(y, x, c)`.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(y, x, c));
                }
            }
        }
        FeatureMap {
            height,
            width,
            channels,
            data,
        }
    }

    /// A 1x1x1 map holding a single scalar.
    pub fn scalar(value: f64) -> Self {
        FeatureMap {
            height: 1,
            width: 1,
            channels: 1,
            data: vec![value],
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `(height, width, channels)`
    #[inline]
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    #[inline]
    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[c * self.plane_len() + y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, value: f64) {
        let plane = self.plane_len();
        self.data[c * plane + y * self.width + x] = value;
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    /// The scalar stored in a 1x1x1 map.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> FeatureMap {
        FeatureMap {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs_diff(&self, other: &FeatureMap) -> f64 {
        debug_assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn same_shape(&self, other: &FeatureMap) -> bool {
        self.shape() == other.shape()
    }

    pub(crate) fn expect_same_shape(&self, other: &FeatureMap, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::shape(format!(
                "{what}: shape {:?} does not match {:?}",
                self.shape(),
                other.shape()
            )))
        }
    }

    /// Channels `start..start + len` as a new map.
    pub fn slice_channels(&self, start: usize, len: usize) -> Result<FeatureMap> {
        if len == 0 || start + len > self.channels {
            return Err(Error::shape(format!(
                "channel slice {start}..{} out of range for {} channels",
                start + len,
                self.channels
            )));
        }
        let n = self.plane_len();
        FeatureMap::from_vec(
            self.height,
            self.width,
            len,
            self.data[start * n..(start + len) * n].to_vec(),
        )
    }

    /// Stacks maps of equal spatial size along the channel axis.
    pub fn concat_channels(parts: &[&FeatureMap]) -> Result<FeatureMap> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("cannot concatenate zero feature maps"))?;
        let (h, w) = (first.height, first.width);
        let mut data = Vec::new();
        let mut channels = 0;
        for p in parts {
            if p.height != h || p.width != w {
                return Err(Error::shape(format!(
                    "concat: spatial size {}x{} does not match {h}x{w}",
                    p.height, p.width
                )));
            }
            data.extend_from_slice(&p.data);
            channels += p.channels;
        }
        FeatureMap::from_vec(h, w, channels, data)
    }

    /// Copies out the region `top..top + height`, `left..left + width`.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<FeatureMap> {
        if top + height > self.height || left + width > self.width || height == 0 || width == 0 {
            return Err(Error::shape(format!(
                "crop {height}x{width} at ({top},{left}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        Ok(FeatureMap::from_fn(height, width, self.channels, |y, x, c| {
            self.get(top + y, left + x, c)
        }))
    }

    /// Pads bottom and right edges by mirror reflection (edge sample not
    /// repeated) up to the requested size.
    pub fn pad_reflect(&self, height: usize, width: usize) -> Result<FeatureMap> {
        if height < self.height || width < self.width {
            return Err(Error::shape("reflect padding cannot shrink a feature map"));
        }
        if (height - self.height >= self.height && height > self.height)
            || (width - self.width >= self.width && width > self.width)
        {
            return Err(Error::shape(format!(
                "reflect padding to {height}x{width} too large for {}x{}",
                self.height, self.width
            )));
        }
        let reflect = |i: usize, n: usize| if i < n { i } else { 2 * (n - 1) - i };
        Ok(FeatureMap::from_fn(height, width, self.channels, |y, x, c| {
            self.get(reflect(y, self.height), reflect(x, self.width), c)
        }))
    }
}

/// A named learnable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    shape: Vec<usize>,
    data: Vec<f64>,
    trainable: bool,
}

impl Param {
    pub fn new(shape: Vec<usize>, data: Vec<f64>, trainable: bool) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(format!(
                "parameter of shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Param {
            shape,
            data,
            trainable,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }
}

/// Hierarchically named parameters (`"encoder.0.1.norm1.gain"`).
///
/// Names are unique and shapes are fixed once inserted; only values change.
/// Mutation goes through `&mut self`, so a training step holds the store
/// exclusively while concurrent forward passes share `&ParamStore`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, param: Param) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::param(format!("duplicate parameter name `{name}`")));
        }
        self.entries.insert(name, param);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::param(format!("unknown parameter `{name}`")))
    }

    pub fn values(&self, name: &str) -> Result<&[f64]> {
        self.get(name).map(Param::data)
    }

    /// Mutable view of a parameter's values; the length cannot change.
    pub fn values_mut(&mut self, name: &str) -> Result<&mut [f64]> {
        self.entries
            .get_mut(name)
            .map(Param::data_mut)
            .ok_or_else(|| Error::param(format!("unknown parameter `{name}`")))
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        self.entries
            .get_mut(name)
            .map(|p| p.trainable = trainable)
            .ok_or_else(|| Error::param(format!("unknown parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(Param::len).sum()
    }

    pub fn num_trainable_scalars(&self) -> usize {
        self.entries
            .values()
            .filter(|p| p.trainable)
            .map(Param::len)
            .sum()
    }

    /// Sets every value of every parameter to zero.
    pub fn zero_all(&mut self) {
        for p in self.entries.values_mut() {
            p.data.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// Gradients keyed by parameter name; only trainable parameters appear.
pub type Gradients = BTreeMap<String, Vec<f64>>;
