//! Dense `H × W × C` containers and the per-pixel probabilistic primitives
//! shared by every other module.
//!
//! Storage is `f32`; every per-pixel computation is carried out in `f64` and
//! rounded once on store.

use crate::error::{Error, Result};
use crate::par;

/// Label value marking an unlabeled pixel in a [`HardLabelMap`].
pub const IGNORE_LABEL: u16 = u16::MAX;

/// Tolerance on per-pixel channel sums of a [`ProbabilityMap`].
pub const SUM_TOLERANCE: f64 = 1e-5;

/// Row-major `(h, w, c)` tensor of finite `f32` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Tensor3 {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::InvalidArgument("tensor needs at least one channel".into()));
        }
        let expected = height * width * channels;
        if data.len() != expected {
            return Err(Error::shape("Tensor3::new", expected, data.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("tensor data"));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    /// Builds a tensor pixel by pixel from `f64` values.
    pub fn from_pixels<F>(height: usize, width: usize, channels: usize, f: F) -> Result<Self>
    where
        F: Fn(usize, &mut [f64]),
    {
        let mut data = Vec::with_capacity(height * width * channels);
        let mut buf = vec![0.0f64; channels];
        for idx in 0..height * width {
            buf.iter_mut().for_each(|v| *v = 0.0);
            f(idx, &mut buf);
            data.extend(buf.iter().map(|&v| v as f32));
        }
        Self::new(height, width, channels, data)
    }

    pub(crate) fn from_raw(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), height * width * channels);
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, h: usize, w: usize, c: usize) -> f32 {
        self.data[(h * self.width + w) * self.channels + c]
    }

    /// Channel vector at flat pixel index `idx = h * width + w`.
    pub fn pixel(&self, idx: usize) -> &[f32] {
        &self.data[idx * self.channels..(idx + 1) * self.channels]
    }

    pub fn pixels(&self) -> std::slice::ChunksExact<'_, f32> {
        self.data.chunks_exact(self.channels)
    }

    /// Channel vector at `idx`, widened to `f64`.
    pub fn pixel_f64(&self, idx: usize) -> Vec<f64> {
        self.pixel(idx).iter().map(|&v| v as f64).collect()
    }

    pub(crate) fn same_grid(&self, other: &Tensor3, context: &'static str) -> Result<()> {
        if self.height != other.height || self.width != other.width {
            return Err(Error::shape(
                context,
                (self.height, self.width),
                (other.height, other.width),
            ));
        }
        Ok(())
    }

    pub(crate) fn same_shape(&self, other: &Tensor3, context: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(context, self.shape(), other.shape()));
        }
        Ok(())
    }

    /// Applies a per-pixel map producing `out_channels` values per pixel.
    pub(crate) fn map_pixels<F>(&self, out_channels: usize, f: F) -> Tensor3
    where
        F: Fn(&[f32], &mut [f32]) + Sync + Send,
    {
        let mut out = vec![0.0f32; self.pixel_count() * out_channels];
        par::zip_pixels(&mut out, out_channels, &self.data, self.channels, |o, i| {
            f(i, o)
        });
        Tensor3::from_raw(self.height, self.width, out_channels, out)
    }
}

/// Per-pixel class distributions: values in `[0, 1]`, channel sums within
/// [`SUM_TOLERANCE`] of one.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap(Tensor3);

impl ProbabilityMap {
    pub fn new(tensor: Tensor3) -> Result<Self> {
        for (idx, px) in tensor.pixels().enumerate() {
            if px.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::InvalidProbability(format!(
                    "pixel {idx} has a value outside [0, 1]"
                )));
            }
            let sum: f64 = px.iter().map(|&v| v as f64).sum();
            if (sum - 1.0).abs() > SUM_TOLERANCE {
                return Err(Error::InvalidProbability(format!(
                    "pixel {idx} sums to {sum}"
                )));
            }
        }
        Ok(Self(tensor))
    }

    pub(crate) fn from_tensor_unchecked(tensor: Tensor3) -> Self {
        Self(tensor)
    }

    /// Builds a map from per-pixel `f64` distributions.
    pub fn from_pixels<F>(height: usize, width: usize, channels: usize, f: F) -> Result<Self>
    where
        F: Fn(usize, &mut [f64]),
    {
        Self::new(Tensor3::from_pixels(height, width, channels, f)?)
    }

    /// Every pixel set to `dist`.
    pub fn constant(height: usize, width: usize, dist: &[f64]) -> Result<Self> {
        Self::from_pixels(height, width, dist.len(), |_, out| out.copy_from_slice(dist))
    }

    pub fn tensor(&self) -> &Tensor3 {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor3 {
        self.0
    }

    pub fn classes(&self) -> usize {
        self.0.channels
    }

    pub fn height(&self) -> usize {
        self.0.height
    }

    pub fn width(&self) -> usize {
        self.0.width
    }

    pub fn pixel_count(&self) -> usize {
        self.0.pixel_count()
    }

    pub fn pixel(&self, idx: usize) -> &[f32] {
        self.0.pixel(idx)
    }

    pub fn pixel_f64(&self, idx: usize) -> Vec<f64> {
        self.0.pixel_f64(idx)
    }
}

/// Per-pixel class indices with [`IGNORE_LABEL`] for unlabeled pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HardLabelMap {
    height: usize,
    width: usize,
    labels: Vec<u16>,
}

impl HardLabelMap {
    /// `classes` bounds every non-ignore label.
    pub fn new(height: usize, width: usize, labels: Vec<u16>, classes: usize) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::shape("HardLabelMap::new", height * width, labels.len()));
        }
        if let Some(bad) = labels
            .iter()
            .find(|&&l| l != IGNORE_LABEL && l as usize >= classes)
        {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub(crate) fn from_raw(height: usize, width: usize, labels: Vec<u16>) -> Self {
        Self {
            height,
            width,
            labels,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn get(&self, h: usize, w: usize) -> u16 {
        self.labels[h * self.width + w]
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Numerically stable softmax of `logits` into `out`.
pub fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = (z - max).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
}

pub fn softmax_vec(logits: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    softmax_into(logits, &mut out);
    out
}

/// Shannon entropy in nats with `0 · log 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * v.ln())
        .sum::<f64>()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate().skip(1) {
        if v > p[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn argmax_f32(p: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate().skip(1) {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Per-pixel softmax over channels.
pub fn softmax(logits: &Tensor3) -> Result<ProbabilityMap> {
    if logits.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("softmax logits"));
    }
    let c = logits.channels;
    let out = logits.map_pixels(c, |px, out| {
        let z: Vec<f64> = px.iter().map(|&v| v as f64).collect();
        let mut p = vec![0.0; c];
        softmax_into(&z, &mut p);
        for (o, v) in out.iter_mut().zip(p) {
            *o = v as f32;
        }
    });
    Ok(ProbabilityMap(out))
}

/// Per-pixel entropy in nats, as a one-channel tensor.
pub fn pixel_entropy(p: &ProbabilityMap) -> Tensor3 {
    p.0.map_pixels(1, |px, out| {
        let v: Vec<f64> = px.iter().map(|&v| v as f64).collect();
        out[0] = entropy(&v) as f32;
    })
}

/// `softmax(main + w · aux)` per pixel: the two-branch output combination.
pub fn combine_branches(main: &Tensor3, aux: &Tensor3, w: f64) -> Result<ProbabilityMap> {
    main.same_shape(aux, "combine_branches")?;
    if !w.is_finite() {
        return Err(Error::NonFinite("branch weight"));
    }
    let c = main.channels;
    let mut zipped = Vec::with_capacity(main.data.len() * 2);
    for (m, a) in main.pixels().zip(aux.pixels()) {
        zipped.extend_from_slice(m);
        zipped.extend_from_slice(a);
    }
    let pairs = Tensor3::from_raw(main.height, main.width, 2 * c, zipped);
    if pairs.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("branch logits"));
    }
    let out = pairs.map_pixels(c, |px, out| {
        let z: Vec<f64> = (0..c)
            .map(|k| px[k] as f64 + w * px[c + k] as f64)
            .collect();
        let p = softmax_vec(&z);
        for (o, v) in out.iter_mut().zip(p) {
            *o = v as f32;
        }
    });
    Ok(ProbabilityMap(out))
}
