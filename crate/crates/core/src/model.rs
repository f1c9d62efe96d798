//! Two-branch per-pixel classifier standing in for a segmentation network,
//! and the self-training loop over soft pseudo-labels.
//!
//! Per pixel: `h = tanh(W1 x + b1)`, `main = Wm h + bm`, `aux = Wa h + ba`,
//! and the prediction is `softmax(main + w * aux)`. The hidden activation
//! `h` is the feature used for prototypes.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::SoftLabelMap;
use crate::io::{Container, TensorData};
use crate::loss::{pixel_loss_grad, LossConfig, LossTerms, PixelTarget};
use crate::par;
use crate::prototypes::{MomentumEncoder, PrototypeBank, PrototypeConfig};
use crate::tensor::{argmax, softmax_vec, HardLabelMap, ProbabilityMap, Tensor3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub input: usize,
    pub hidden: usize,
    pub classes: usize,
}

impl ModelDims {
    pub fn param_count(&self) -> usize {
        let ModelDims {
            input,
            hidden,
            classes,
        } = *self;
        hidden * input + hidden + 2 * (classes * hidden + classes)
    }

    fn offsets(&self) -> [usize; 6] {
        let ModelDims {
            input,
            hidden,
            classes,
        } = *self;
        let w1 = 0;
        let b1 = w1 + hidden * input;
        let wm = b1 + hidden;
        let bm = wm + classes * hidden;
        let wa = bm + classes;
        let ba = wa + classes * hidden;
        [w1, b1, wm, bm, wa, ba]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    dims: ModelDims,
    params: Vec<f64>,
}

/// Output of [`ToyModel::forward`].
#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    pub main: Tensor3,
    pub aux: Tensor3,
    pub prob: ProbabilityMap,
}

impl ToyModel {
    /// Parameters drawn from uniform(-0.1, 0.1) with a seeded generator.
    pub fn new(dims: ModelDims, seed: u64) -> Result<Self> {
        if dims.input == 0 || dims.hidden == 0 || dims.classes < 2 {
            return Err(Error::InvalidArgument(format!("invalid model dims {dims:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = (0..dims.param_count())
            .map(|_| rng.random_range(-0.1..0.1))
            .collect();
        Ok(Self { dims, params })
    }

    pub fn zeros(dims: ModelDims) -> Self {
        Self {
            dims,
            params: vec![0.0; dims.param_count()],
        }
    }

    pub fn from_params(dims: ModelDims, params: Vec<f64>) -> Result<Self> {
        if params.len() != dims.param_count() {
            return Err(Error::shape("ToyModel::from_params", dims.param_count(), params.len()));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("model parameters"));
        }
        Ok(Self { dims, params })
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Zeroes both weights and bias of the auxiliary head.
    pub fn zero_aux_head(&mut self) {
        let [_, _, _, _, wa, _] = self.dims.offsets();
        self.params[wa..].iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn hidden_pixel(&self, x: &[f64], hidden: &mut [f64]) {
        let ModelDims { input, .. } = self.dims;
        let [w1, b1, ..] = self.dims.offsets();
        for (j, h) in hidden.iter_mut().enumerate() {
            let row = &self.params[w1 + j * input..w1 + (j + 1) * input];
            let pre: f64 = self.params[b1 + j] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
            *h = pre.tanh();
        }
    }

    fn head(&self, weights: usize, bias: usize, hidden: &[f64], out: &mut [f64]) {
        let d = self.dims.hidden;
        for (c, o) in out.iter_mut().enumerate() {
            let row = &self.params[weights + c * d..weights + (c + 1) * d];
            *o = self.params[bias + c] + row.iter().zip(hidden).map(|(w, h)| w * h).sum::<f64>();
        }
    }

    /// Hidden features and both logit vectors for one input.
    pub fn forward_pixel(&self, x: &[f64], hidden: &mut [f64], main: &mut [f64], aux: &mut [f64]) {
        let [_, _, wm, bm, wa, ba] = self.dims.offsets();
        self.hidden_pixel(x, hidden);
        self.head(wm, bm, hidden, main);
        self.head(wa, ba, hidden, aux);
    }

    /// Accumulates the parameter gradient of one pixel into `grad`, given
    /// the gradient of the loss with respect to its two logit vectors.
    pub fn backward_pixel(
        &self,
        x: &[f64],
        hidden: &[f64],
        g_main: &[f64],
        g_aux: &[f64],
        grad: &mut [f64],
    ) {
        let ModelDims {
            input,
            hidden: d,
            classes,
        } = self.dims;
        let [w1, b1, wm, bm, wa, ba] = self.dims.offsets();
        let mut g_hidden = vec![0.0; d];
        for c in 0..classes {
            for j in 0..d {
                grad[wm + c * d + j] += g_main[c] * hidden[j];
                grad[wa + c * d + j] += g_aux[c] * hidden[j];
                g_hidden[j] += g_main[c] * self.params[wm + c * d + j]
                    + g_aux[c] * self.params[wa + c * d + j];
            }
            grad[bm + c] += g_main[c];
            grad[ba + c] += g_aux[c];
        }
        for j in 0..d {
            let g_pre = g_hidden[j] * (1.0 - hidden[j] * hidden[j]);
            for k in 0..input {
                grad[w1 + j * input + k] += g_pre * x[k];
            }
            grad[b1 + j] += g_pre;
        }
    }

    fn check_input(&self, features: &Tensor3) -> Result<()> {
        if features.channels() != self.dims.input {
            return Err(Error::shape("ToyModel input", self.dims.input, features.channels()));
        }
        Ok(())
    }

    /// Both branches' logits and the combined prediction for every pixel.
    pub fn forward(&self, features: &Tensor3, branch_w: f64) -> Result<Forward> {
        self.check_input(features)?;
        let c = self.dims.classes;
        let per_pixel = par::map_range(features.pixel_count(), |i| {
            let x = features.pixel_f64(i);
            let mut h = vec![0.0; self.dims.hidden];
            let mut m = vec![0.0; c];
            let mut a = vec![0.0; c];
            self.forward_pixel(&x, &mut h, &mut m, &mut a);
            (m, a)
        });
        let (h, w) = (features.height(), features.width());
        let main = Tensor3::from_pixels(h, w, c, |i, out| out.copy_from_slice(&per_pixel[i].0))?;
        let aux = Tensor3::from_pixels(h, w, c, |i, out| out.copy_from_slice(&per_pixel[i].1))?;
        let prob = ProbabilityMap::from_pixels(h, w, c, |i, out| {
            let (m, a) = &per_pixel[i];
            let z: Vec<f64> = m.iter().zip(a).map(|(m, a)| m + branch_w * a).collect();
            out.copy_from_slice(&softmax_vec(&z));
        })?;
        Ok(Forward { main, aux, prob })
    }

    /// Hidden-layer features for every pixel.
    pub fn hidden_features(&self, features: &Tensor3) -> Result<Tensor3> {
        self.check_input(features)?;
        let d = self.dims.hidden;
        let hidden = par::map_range(features.pixel_count(), |i| {
            let mut h = vec![0.0; d];
            self.hidden_pixel(&features.pixel_f64(i), &mut h);
            h
        });
        Tensor3::from_pixels(features.height(), features.width(), d, |i, out| {
            out.copy_from_slice(&hidden[i])
        })
    }

    /// Argmax of the combined prediction.
    pub fn predict(&self, features: &Tensor3, branch_w: f64) -> Result<HardLabelMap> {
        let f = self.forward(features, branch_w)?;
        Ok(crate::fusion::hard_label(&f.prob))
    }

    /// Summed loss over a flat batch and its gradient with respect to every
    /// parameter. Pixels are processed in fixed chunks and reduced in order.
    pub fn batch_loss_grad(
        &self,
        inputs: &[f64],
        targets: &[PixelTarget],
        cfg: &LossConfig,
    ) -> Result<(LossTerms, Vec<f64>)> {
        let ModelDims {
            input,
            hidden,
            classes,
        } = self.dims;
        if inputs.len() != targets.len() * input {
            return Err(Error::shape("batch_loss_grad", targets.len() * input, inputs.len()));
        }
        let p = self.params.len();
        let chunks = par::map_chunks(targets.len(), |range| {
            let mut grad = vec![0.0; p];
            let mut total = Vec::with_capacity(range.len());
            let mut h = vec![0.0; hidden];
            let (mut m, mut a) = (vec![0.0; classes], vec![0.0; classes]);
            let (mut gm, mut ga) = (vec![0.0; classes], vec![0.0; classes]);
            for i in range {
                let x = &inputs[i * input..(i + 1) * input];
                self.forward_pixel(x, &mut h, &mut m, &mut a);
                total.push(pixel_loss_grad(&m, &a, targets[i], cfg, &mut gm, &mut ga));
                self.backward_pixel(x, &h, &gm, &ga, &mut grad);
            }
            (LossTerms::sum(&total), grad)
        });
        let mut grad = vec![0.0; p];
        let mut totals = Vec::with_capacity(chunks.len());
        for (t, g) in chunks {
            totals.push(t);
            grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
        Ok((LossTerms::sum(&totals), grad))
    }

    /// Summed loss over a flat batch without gradients.
    pub fn batch_loss(&self, inputs: &[f64], targets: &[PixelTarget], cfg: &LossConfig) -> Result<LossTerms> {
        Ok(self.batch_loss_grad(inputs, targets, cfg)?.0)
    }

    pub fn to_container(&self) -> Container {
        Container {
            dims: vec![self.params.len()],
            data: TensorData::F64(self.params.clone()),
        }
    }

    pub fn from_container(dims: ModelDims, c: &Container) -> Result<Self> {
        match &c.data {
            TensorData::F64(v) => Self::from_params(dims, v.clone()),
            _ => Err(Error::InvalidArgument("model parameters must be f64".into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Peak (and initial) learning rate of the triangular schedule.
    pub lr: f64,
    pub lr_min: f64,
    /// Schedule period in optimizer steps.
    pub period: usize,
    /// Pixels per optimizer step.
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub hidden: usize,
    pub prototypes: PrototypeConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-2,
            lr_min: 2e-3,
            period: 100,
            batch_size: 64,
            epochs: 20,
            seed: 0,
            hidden: 16,
            prototypes: PrototypeConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr) {
            return Err(Error::Config(format!(
                "lr_min must lie in [0, lr], got {}",
                self.lr_min
            )));
        }
        if self.period < 2 {
            return Err(Error::Config(format!("period must be >= 2, got {}", self.period)));
        }
        if self.batch_size == 0 || self.hidden == 0 {
            return Err(Error::Config("batch_size and hidden must be positive".into()));
        }
        self.prototypes.validate()
    }
}

/// Triangular cyclic schedule: `lr` at step 0, `lr_min` at half period.
pub fn cyclic_lr(step: usize, cfg: &TrainConfig) -> f64 {
    let period = cfg.period as f64;
    let phase = (step % cfg.period) as f64 / period;
    let depth = 2.0 * phase.min(1.0 - phase);
    (cfg.lr - (cfg.lr - cfg.lr_min) * depth).max(cfg.lr_min)
}

/// One target image for training: input features and fused labels.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub features: Tensor3,
    pub labels: SoftLabelMap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub pixels: usize,
    /// Per-pixel means of every loss term.
    pub mean: LossTerms,
    /// Pixels whose label argmax was changed by prototype rectification.
    pub rectified_flips: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ToyModel,
    pub encoder: MomentumEncoder,
    pub bank: Option<PrototypeBank>,
    pub log: Vec<StepLog>,
}

struct PixelSet {
    inputs: Vec<f64>,
    y_hat: Vec<f64>,
    weights: Vec<f64>,
    input_dim: usize,
    classes: usize,
}

impl PixelSet {
    fn gather(samples: &[TrainSample], input_dim: usize, classes: usize) -> Result<Self> {
        let mut set = PixelSet {
            inputs: Vec::new(),
            y_hat: Vec::new(),
            weights: Vec::new(),
            input_dim,
            classes,
        };
        for s in samples {
            if s.features.channels() != input_dim {
                return Err(Error::shape("train features", input_dim, s.features.channels()));
            }
            if s.labels.y_hat.classes() != classes {
                return Err(Error::shape("train labels", classes, s.labels.y_hat.classes()));
            }
            s.features.same_grid(s.labels.y_hat.tensor(), "train sample")?;
            set.inputs.extend(s.features.data().iter().map(|&v| v as f64));
            set.y_hat.extend(s.labels.y_hat.tensor().data().iter().map(|&v| v as f64));
            set.weights.extend(s.labels.entropy_weight.data().iter().map(|&v| v as f64));
        }
        Ok(set)
    }

    fn len(&self) -> usize {
        self.weights.len()
    }

    fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.input_dim..(i + 1) * self.input_dim]
    }

    fn label(&self, i: usize) -> &[f64] {
        &self.y_hat[i * self.classes..(i + 1) * self.classes]
    }
}

fn hidden_rows(model: &ToyModel, set: &PixelSet, idx: &[usize]) -> Vec<f64> {
    let d = model.dims().hidden;
    let rows = par::map_slice(idx, |&i| {
        let mut h = vec![0.0; d];
        model.hidden_pixel(set.input(i), &mut h);
        h
    });
    rows.concat()
}

/// Self-training on fused soft pseudo-labels.
///
/// Each step: forward, rectify the batch's labels with the prototypes
/// (features from the momentum encoder), total loss and analytic gradient,
/// plain SGD on the batch-mean gradient, EMA update of the encoder, then
/// prototype update.
pub fn train(
    model: ToyModel,
    samples: &[TrainSample],
    cfg: &TrainConfig,
    loss: &LossConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    loss.validate()?;
    let dims = model.dims();
    let set = PixelSet::gather(samples, dims.input, dims.classes)?;
    let mut model = model;
    let mut encoder = MomentumEncoder::new(&model, cfg.prototypes.encoder_momentum);
    let mut log = Vec::new();
    if cfg.epochs == 0 || set.len() == 0 {
        return Ok(TrainOutcome {
            model,
            encoder,
            bank: None,
            log,
        });
    }

    let mut bank = if cfg.prototypes.enabled {
        let all: Vec<usize> = (0..set.len()).collect();
        let feats = hidden_rows(encoder.model(), &set, &all);
        let labels: Vec<u16> = all.iter().map(|&i| argmax(set.label(i)) as u16).collect();
        Some(PrototypeBank::from_samples(
            &feats,
            dims.hidden,
            &labels,
            dims.classes,
            cfg.prototypes.tau,
            cfg.prototypes.momentum,
        )?)
    } else {
        None
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..set.len()).collect();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let n = batch.len();
            let mut inputs = Vec::with_capacity(n * dims.input);
            for &i in batch {
                inputs.extend_from_slice(set.input(i));
            }

            let mut flips = 0;
            let (labels, feats): (Vec<usize>, Option<Vec<f64>>) = match &bank {
                Some(bank) => {
                    let feats = hidden_rows(encoder.model(), &set, batch);
                    let labels = par::map_range(n, |k| {
                        let mut omega = vec![0.0; dims.classes];
                        bank.weights_for(&feats[k * dims.hidden..(k + 1) * dims.hidden], &mut omega);
                        let y = set.label(batch[k]);
                        let mut rectified = vec![0.0; dims.classes];
                        crate::prototypes::rectify_soft_label(y, &omega, &mut rectified);
                        argmax(&rectified)
                    });
                    flips = labels
                        .iter()
                        .zip(batch)
                        .filter(|(&l, &i)| l != argmax(set.label(i)))
                        .count();
                    (labels, Some(feats))
                }
                None => (batch.iter().map(|&i| argmax(set.label(i))).collect(), None),
            };

            let targets: Vec<PixelTarget> = batch
                .iter()
                .zip(&labels)
                .map(|(&i, &label)| PixelTarget {
                    label,
                    weight: set.weights[i],
                })
                .collect();

            let (terms, grad) = model.batch_loss_grad(&inputs, &targets, loss)?;
            if !terms.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NanLoss {
                    step,
                    breakdown: serde_json::to_string(&terms).unwrap_or_default(),
                });
            }
            let lr = cyclic_lr(step, cfg);
            let scale = lr / n as f64;
            model
                .params_mut()
                .iter_mut()
                .zip(&grad)
                .for_each(|(p, g)| *p -= scale * g);
            if model.params().iter().any(|p| !p.is_finite()) {
                return Err(Error::NanLoss {
                    step,
                    breakdown: format!("parameters overflowed at lr {lr:e}"),
                });
            }
            encoder.update(&model)?;
            if let (Some(bank), Some(feats)) = (bank.as_mut(), feats) {
                let l: Vec<u16> = labels.iter().map(|&l| l as u16).collect();
                bank.update(&feats, &l)?;
            }

            let inv = 1.0 / n as f64;
            log.push(StepLog {
                step,
                epoch,
                lr,
                pixels: n,
                mean: LossTerms {
                    ce: terms.ce * inv,
                    sce: terms.sce * inv,
                    w_sce: terms.w_sce * inv,
                    kld: terms.kld * inv,
                    rect: terms.rect * inv,
                    ent: terms.ent * inv,
                    all: terms.all * inv,
                },
                rectified_flips: flips,
            });
            step += 1;
        }
    }
    Ok(TrainOutcome {
        model,
        encoder,
        bank,
        log,
    })
}
