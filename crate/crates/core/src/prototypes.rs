//! Online pseudo-label denoising with class prototypes.
//!
//! Each class keeps a prototype feature. Pixel features from the momentum
//! encoder are turned into a distribution over classes by a softmax of
//! negative Euclidean distances, and the soft pseudo-label is reweighted by
//! that distribution and renormalized.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{Container, TensorData};
use crate::model::ToyModel;
use crate::tensor::{softmax_into, HardLabelMap, ProbabilityMap, Tensor3, IGNORE_LABEL};

/// Denominator below which rectification leaves the label untouched.
pub const RECTIFY_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrototypeConfig {
    pub enabled: bool,
    pub tau: f64,
    /// EMA coefficient of the prototype update.
    pub momentum: f64,
    /// EMA coefficient of the momentum encoder.
    pub encoder_momentum: f64,
}

impl Default for PrototypeConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            tau: 1.0,
            momentum: 0.999,
            encoder_momentum: 0.999,
        }
    }
}

impl PrototypeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        for (name, m) in [
            ("momentum", self.momentum),
            ("encoder_momentum", self.encoder_momentum),
        ] {
            if !(0.0..1.0).contains(&m) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {m}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    classes: usize,
    dim: usize,
    /// Row-major `classes x dim`.
    eta: Vec<f64>,
    counts: Vec<u64>,
    tau: f64,
    momentum: f64,
    /// Classes that had no pixels at initialization.
    fallback: Vec<bool>,
}

impl PrototypeBank {
    /// Prototypes as the mean feature of the pixels labeled with each class.
    /// `features` holds `labels.len()` rows of `dim` values. Classes with no
    /// pixels fall back to the global mean and are flagged.
    pub fn from_samples(
        features: &[f64],
        dim: usize,
        labels: &[u16],
        classes: usize,
        tau: f64,
        momentum: f64,
    ) -> Result<Self> {
        if dim == 0 || features.len() != labels.len() * dim {
            return Err(Error::shape(
                "PrototypeBank::from_samples",
                labels.len() * dim,
                features.len(),
            ));
        }
        let mut sums = vec![0.0; classes * dim];
        let mut counts = vec![0u64; classes];
        let mut global = vec![0.0; dim];
        let mut n = 0u64;
        for (f, &l) in features.chunks_exact(dim).zip(labels) {
            if l == IGNORE_LABEL {
                continue;
            }
            let l = l as usize;
            if l >= classes {
                return Err(Error::InvalidArgument(format!(
                    "label {l} out of range for {classes} classes"
                )));
            }
            for (k, &v) in f.iter().enumerate() {
                sums[l * dim + k] += v;
                global[k] += v;
            }
            counts[l] += 1;
            n += 1;
        }
        if n == 0 {
            return Err(Error::Empty("prototype sample set"));
        }
        global.iter_mut().for_each(|g| *g /= n as f64);
        let mut fallback = vec![false; classes];
        for c in 0..classes {
            let row = &mut sums[c * dim..(c + 1) * dim];
            if counts[c] == 0 {
                row.copy_from_slice(&global);
                fallback[c] = true;
            } else {
                row.iter_mut().for_each(|v| *v /= counts[c] as f64);
            }
        }
        let bank = Self {
            classes,
            dim,
            eta: sums,
            counts,
            tau,
            momentum,
            fallback,
        };
        bank.check()?;
        Ok(bank)
    }

    /// Builds a bank from explicit prototype rows.
    pub fn from_prototypes(
        eta: Vec<f64>,
        classes: usize,
        dim: usize,
        tau: f64,
        momentum: f64,
    ) -> Result<Self> {
        if eta.len() != classes * dim {
            return Err(Error::shape("PrototypeBank::from_prototypes", classes * dim, eta.len()));
        }
        let bank = Self {
            classes,
            dim,
            eta,
            counts: vec![0; classes],
            tau,
            momentum,
            fallback: vec![false; classes],
        };
        bank.check()?;
        Ok(bank)
    }

    fn check(&self) -> Result<()> {
        if self.eta.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("prototypes"));
        }
        if !(self.tau > 0.0) {
            return Err(Error::InvalidArgument(format!("tau must be positive, got {}", self.tau)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn prototype(&self, class: usize) -> &[f64] {
        &self.eta[class * self.dim..(class + 1) * self.dim]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    /// Classes initialized from the global mean for lack of pixels.
    pub fn fallback_classes(&self) -> Vec<usize> {
        (0..self.classes).filter(|&c| self.fallback[c]).collect()
    }

    /// One EMA step per class present in the batch, towards the batch mean.
    pub fn update(&mut self, features: &[f64], labels: &[u16]) -> Result<()> {
        let dim = self.dim;
        if features.len() != labels.len() * dim {
            return Err(Error::shape("PrototypeBank::update", labels.len() * dim, features.len()));
        }
        let mut sums = vec![0.0; self.classes * dim];
        let mut counts = vec![0u64; self.classes];
        for (f, &l) in features.chunks_exact(dim).zip(labels) {
            if l == IGNORE_LABEL || l as usize >= self.classes {
                continue;
            }
            let l = l as usize;
            for (k, &v) in f.iter().enumerate() {
                sums[l * dim + k] += v;
            }
            counts[l] += 1;
        }
        let m = self.momentum;
        for c in 0..self.classes {
            if counts[c] == 0 {
                continue;
            }
            let n = counts[c] as f64;
            for k in 0..dim {
                let mean = sums[c * dim + k] / n;
                let e = &mut self.eta[c * dim + k];
                *e = m * *e + (1.0 - m) * mean;
            }
            self.counts[c] += counts[c];
        }
        Ok(())
    }

    /// Class distribution `softmax_c(-||f - eta_c|| / tau)` for one feature.
    pub fn weights_for(&self, feature: &[f64], out: &mut [f64]) {
        let neg_dist: Vec<f64> = (0..self.classes)
            .map(|c| {
                let d2: f64 = feature
                    .iter()
                    .zip(self.prototype(c))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                -d2.sqrt() / self.tau
            })
            .collect();
        softmax_into(&neg_dist, out);
    }

    pub fn to_containers(&self) -> (Container, Container) {
        let eta = Container {
            dims: vec![self.classes, self.dim],
            data: TensorData::F64(self.eta.clone()),
        };
        let mut state = vec![self.tau, self.momentum];
        state.extend(self.counts.iter().map(|&c| c as f64));
        state.extend(self.fallback.iter().map(|&f| if f { 1.0 } else { 0.0 }));
        let state = Container {
            dims: vec![state.len()],
            data: TensorData::F64(state),
        };
        (eta, state)
    }

    pub fn from_containers(eta: &Container, state: &Container) -> Result<Self> {
        let (TensorData::F64(values), [classes, dim]) = (&eta.data, eta.dims.as_slice()) else {
            return Err(Error::InvalidArgument("prototype tensor must be rank-2 f64".into()));
        };
        let TensorData::F64(s) = &state.data else {
            return Err(Error::InvalidArgument("prototype state must be f64".into()));
        };
        if s.len() != 2 + 2 * classes {
            return Err(Error::shape("prototype state", 2 + 2 * classes, s.len()));
        }
        let mut bank = Self::from_prototypes(values.clone(), *classes, *dim, s[0], s[1])?;
        bank.counts = s[2..2 + classes].iter().map(|&c| c as u64).collect();
        bank.fallback = s[2 + classes..].iter().map(|&f| f != 0.0).collect();
        Ok(bank)
    }
}

fn features_of(t: &Tensor3) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

/// Initializes prototypes from feature images and matching hard labels.
pub fn init_prototypes(
    features: &[Tensor3],
    labels: &[HardLabelMap],
    classes: usize,
    tau: f64,
    momentum: f64,
) -> Result<PrototypeBank> {
    if features.is_empty() {
        return Err(Error::Empty("prototype sample set"));
    }
    if features.len() != labels.len() {
        return Err(Error::shape("init_prototypes", features.len(), labels.len()));
    }
    let dim = features[0].channels();
    let mut flat = Vec::new();
    let mut flat_labels = Vec::new();
    for (f, l) in features.iter().zip(labels) {
        if f.channels() != dim {
            return Err(Error::shape("init_prototypes feature dim", dim, f.channels()));
        }
        if f.height() != l.height() || f.width() != l.width() {
            return Err(Error::shape(
                "init_prototypes grid",
                (f.height(), f.width()),
                (l.height(), l.width()),
            ));
        }
        flat.extend(features_of(f));
        flat_labels.extend_from_slice(l.labels());
    }
    PrototypeBank::from_samples(&flat, dim, &flat_labels, classes, tau, momentum)
}

/// Prototype update from a feature image and its hard labels.
pub fn update_prototypes(
    bank: &mut PrototypeBank,
    features: &Tensor3,
    labels: &HardLabelMap,
) -> Result<()> {
    if features.channels() != bank.dim {
        return Err(Error::shape("update_prototypes", bank.dim, features.channels()));
    }
    bank.update(&features_of(features), labels.labels())
}

/// Per-pixel class weights from momentum-encoder features.
pub fn feature_weights(f_tilde: &Tensor3, bank: &PrototypeBank) -> Result<ProbabilityMap> {
    if f_tilde.channels() != bank.dim {
        return Err(Error::shape("feature_weights", bank.dim, f_tilde.channels()));
    }
    let c = bank.classes;
    let out = f_tilde.map_pixels(c, |px, out| {
        let f: Vec<f64> = px.iter().map(|&v| v as f64).collect();
        let mut w = vec![0.0; c];
        bank.weights_for(&f, &mut w);
        for (o, v) in out.iter_mut().zip(w) {
            *o = v as f32;
        }
    });
    Ok(ProbabilityMap::from_tensor_unchecked(out))
}

/// Reweights `y` by `omega` and renormalizes into `out`. Returns `false`
/// (and copies `y` unchanged) when the normalizer is below
/// [`RECTIFY_FLOOR`]. Constant weights cancel, so `y` is copied as is.
pub fn rectify_soft_label(y: &[f64], omega: &[f64], out: &mut [f64]) -> bool {
    if omega.windows(2).all(|w| w[0] == w[1]) {
        out.copy_from_slice(y);
        return true;
    }
    let denom: f64 = y.iter().zip(omega).map(|(a, b)| a * b).sum();
    if denom < RECTIFY_FLOOR {
        out.copy_from_slice(y);
        return false;
    }
    for ((o, &a), &b) in out.iter_mut().zip(y).zip(omega) {
        *o = a * b / denom;
    }
    true
}

/// Map-level rectification. Returns the rectified labels and the number of
/// pixels left unchanged because of a vanishing normalizer.
pub fn rectify_map(y_hat: &ProbabilityMap, omega: &ProbabilityMap) -> Result<(ProbabilityMap, usize)> {
    y_hat.tensor().same_shape(omega.tensor(), "rectify_map")?;
    let c = y_hat.classes();
    let mut skipped = 0;
    let mut data = Vec::with_capacity(y_hat.tensor().data().len());
    let mut out = vec![0.0; c];
    for i in 0..y_hat.pixel_count() {
        if !rectify_soft_label(&y_hat.pixel_f64(i), &omega.pixel_f64(i), &mut out) {
            skipped += 1;
        }
        data.extend(out.iter().map(|&v| v as f32));
    }
    let t = Tensor3::from_raw(y_hat.height(), y_hat.width(), c, data);
    Ok((ProbabilityMap::from_tensor_unchecked(t), skipped))
}

/// `shadow <- m * shadow + (1 - m) * model`, elementwise.
pub fn ema_update(model: &[f64], shadow: &mut [f64], m: f64) {
    debug_assert_eq!(model.len(), shadow.len());
    for (s, &p) in shadow.iter_mut().zip(model) {
        *s = m * *s + (1.0 - m) * p;
    }
}

/// Shadow copy of the live model tracked by EMA; supplies the features used
/// for prototype weights.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumEncoder {
    shadow: ToyModel,
    momentum: f64,
}

impl MomentumEncoder {
    pub fn new(model: &ToyModel, momentum: f64) -> Self {
        Self {
            shadow: model.clone(),
            momentum,
        }
    }

    pub fn update(&mut self, model: &ToyModel) -> Result<()> {
        if model.dims() != self.shadow.dims() {
            return Err(Error::shape("MomentumEncoder::update", self.shadow.dims(), model.dims()));
        }
        ema_update(model.params(), self.shadow.params_mut(), self.momentum);
        Ok(())
    }

    pub fn model(&self) -> &ToyModel {
        &self.shadow
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }
}
