//! Training loss stack: symmetric cross-entropy against the argmax of the
//! soft pseudo-label, label-entropy weighting, rectification by the KL
//! divergence between the two branches, and an entropy regularizer.
//!
//! Per-pixel kernels work on `f64` slices and are shared by the map-level
//! functions, the trainer, and the analytic gradient. Pseudo-labels and
//! their entropy weights are constants with respect to the gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{
    argmax, argmax_f32, entropy, softmax_into, ProbabilityMap, Tensor3,
};

/// Floor applied to predicted probabilities inside a logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Forward cross-entropy weight.
    pub alpha: f64,
    /// Reverse cross-entropy weight.
    pub beta: f64,
    /// Scale inside the label-entropy weight `exp(-lambda_scale * E)`.
    pub lambda_scale: f64,
    pub lambda_ent: f64,
    /// Branch-disagreement penalty. When it is small next to the weighted
    /// SCE, the cheapest descent direction is to pull the two heads apart
    /// and let `exp(-KL)` switch the classification term off.
    pub lambda_kld: f64,
    /// Interval the one-hot label is clamped to before it enters a log.
    pub label_clamp: [f64; 2],
    /// Weight of the auxiliary branch in the combined prediction.
    pub branch_w: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 1.0,
            lambda_scale: 1.0,
            lambda_ent: 0.1,
            lambda_kld: 1.0,
            label_clamp: [1e-4, 1.0],
            branch_w: 0.5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.alpha,
            self.beta,
            self.lambda_scale,
            self.lambda_ent,
            self.lambda_kld,
            self.branch_w,
            self.label_clamp[0],
            self.label_clamp[1],
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Config("loss parameters must be finite".into()));
        }
        if self.alpha < 0.0 || self.beta < 0.0 {
            return Err(Error::Config("alpha and beta must be non-negative".into()));
        }
        if self.lambda_ent < 0.0 || self.lambda_kld < 0.0 {
            return Err(Error::Config("lambda_ent and lambda_kld must be non-negative".into()));
        }
        if self.lambda_scale <= 0.0 {
            return Err(Error::Config("lambda_scale must be positive".into()));
        }
        let [lo, hi] = self.label_clamp;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!(
                "label_clamp must satisfy 0 < lo <= hi <= 1, got [{lo}, {hi}]"
            )));
        }
        Ok(())
    }

    /// `-log(clamp(onehot_c))` for the label class and the others.
    fn reverse_log_terms(&self) -> (f64, f64) {
        let [lo, hi] = self.label_clamp;
        (-(1.0f64.clamp(lo, hi)).ln(), -(0.0f64.clamp(lo, hi)).ln())
    }
}

/// `-sum_c y_c log p_c` with `p` floored at [`LOG_FLOOR`].
pub fn cross_entropy(p: &[f64], y: &[f64]) -> f64 {
    -p.iter()
        .zip(y)
        .filter(|(_, &yc)| yc != 0.0)
        .map(|(&pc, &yc)| yc * pc.max(LOG_FLOOR).ln())
        .sum::<f64>()
}

/// Symmetric cross-entropy against the one-hot label `label`.
pub fn symmetric_ce(p: &[f64], label: usize, cfg: &LossConfig) -> f64 {
    let forward = -p[label].max(LOG_FLOOR).ln();
    let (r_hit, r_miss) = cfg.reverse_log_terms();
    let reverse: f64 = p
        .iter()
        .enumerate()
        .map(|(c, &pc)| pc * if c == label { r_hit } else { r_miss })
        .sum();
    cfg.alpha * forward + cfg.beta * reverse
}

/// `sum_c main_c log(main_c / aux_c)`, `aux` floored at [`LOG_FLOOR`].
pub fn kl_divergence(main: &[f64], aux: &[f64]) -> f64 {
    main.iter()
        .zip(aux)
        .filter(|(&m, _)| m > 0.0)
        .map(|(&m, &a)| m * (m.ln() - a.max(LOG_FLOOR).ln()))
        .sum()
}

/// Training target for one pixel: the argmax class of the (possibly
/// rectified) soft label and its label-entropy weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelTarget {
    pub label: usize,
    pub weight: f64,
}

/// Every loss term at one pixel.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub ce: f64,
    pub sce: f64,
    pub w_sce: f64,
    pub kld: f64,
    pub rect: f64,
    pub ent: f64,
    pub all: f64,
}

impl LossTerms {
    fn add(&mut self, o: &LossTerms) {
        self.ce += o.ce;
        self.sce += o.sce;
        self.w_sce += o.w_sce;
        self.kld += o.kld;
        self.rect += o.rect;
        self.ent += o.ent;
        self.all += o.all;
    }

    pub fn is_finite(&self) -> bool {
        [self.ce, self.sce, self.w_sce, self.kld, self.rect, self.ent, self.all]
            .iter()
            .all(|v| v.is_finite())
    }

    /// Deterministic row-major sum.
    pub fn sum<'a>(terms: impl IntoIterator<Item = &'a LossTerms>) -> LossTerms {
        let mut total = LossTerms::default();
        for t in terms {
            total.add(t);
        }
        total
    }
}

/// Per-pixel branch probabilities derived from the two logit vectors.
struct BranchProbs {
    p: Vec<f64>,
    main: Vec<f64>,
    aux: Vec<f64>,
}

impl BranchProbs {
    fn new(main_logits: &[f64], aux_logits: &[f64], w: f64) -> Self {
        let c = main_logits.len();
        let z: Vec<f64> = main_logits
            .iter()
            .zip(aux_logits)
            .map(|(m, a)| m + w * a)
            .collect();
        let mut p = vec![0.0; c];
        let mut main = vec![0.0; c];
        let mut aux = vec![0.0; c];
        softmax_into(&z, &mut p);
        softmax_into(main_logits, &mut main);
        softmax_into(aux_logits, &mut aux);
        Self { p, main, aux }
    }
}

fn terms_from_probs(
    p: &[f64],
    main: &[f64],
    aux: &[f64],
    target: PixelTarget,
    cfg: &LossConfig,
) -> LossTerms {
    let ce = -p[target.label].max(LOG_FLOOR).ln();
    let sce = symmetric_ce(p, target.label, cfg);
    let w_sce = target.weight * sce;
    let kld = kl_divergence(main, aux);
    let rect = (-kld).exp() * w_sce;
    let ent = entropy(p);
    let all = rect + cfg.lambda_ent * ent + cfg.lambda_kld * kld;
    LossTerms {
        ce,
        sce,
        w_sce,
        kld,
        rect,
        ent,
        all,
    }
}

/// Loss terms at one pixel from the two branches' logits.
pub fn pixel_loss(
    main_logits: &[f64],
    aux_logits: &[f64],
    target: PixelTarget,
    cfg: &LossConfig,
) -> LossTerms {
    let b = BranchProbs::new(main_logits, aux_logits, cfg.branch_w);
    terms_from_probs(&b.p, &b.main, &b.aux, target, cfg)
}

/// Loss terms at one pixel and the gradient of `all` with respect to both
/// branches' logits, written into `grad_main` and `grad_aux`.
pub fn pixel_loss_grad(
    main_logits: &[f64],
    aux_logits: &[f64],
    target: PixelTarget,
    cfg: &LossConfig,
    grad_main: &mut [f64],
    grad_aux: &mut [f64],
) -> LossTerms {
    let c = main_logits.len();
    let b = BranchProbs::new(main_logits, aux_logits, cfg.branch_w);
    let terms = terms_from_probs(&b.p, &b.main, &b.aux, target, cfg);
    let p = &b.p;
    let k = target.label;

    // d sce / d z, z = main + w * aux.
    let (r_hit, r_miss) = cfg.reverse_log_terms();
    let r = |j: usize| if j == k { r_hit } else { r_miss };
    let r_mean: f64 = (0..c).map(|j| p[j] * r(j)).sum();
    let forward_active = p[k] > LOG_FLOOR;
    let mut d_sce = vec![0.0; c];
    for j in 0..c {
        let fwd = if forward_active {
            p[j] - if j == k { 1.0 } else { 0.0 }
        } else {
            0.0
        };
        d_sce[j] = cfg.alpha * fwd + cfg.beta * p[j] * (r(j) - r_mean);
    }

    // d entropy / d z.
    let ent = terms.ent;
    let d_ent = |j: usize| {
        if p[j] > 0.0 {
            -p[j] * (p[j].ln() + ent)
        } else {
            0.0
        }
    };

    let rect_scale = (-terms.kld).exp() * target.weight;
    let g_kld = cfg.lambda_kld - rect_scale * terms.sce;

    // d kld / d main and d kld / d aux; clamped aux entries are constant.
    let (pm, pa) = (&b.main, &b.aux);
    let log_pa: Vec<f64> = pa.iter().map(|&a| a.max(LOG_FLOOR).ln()).collect();
    let live: Vec<bool> = pa.iter().map(|&a| a > LOG_FLOOR).collect();
    let mass_live: f64 = (0..c).filter(|&j| live[j]).map(|j| pm[j]).sum();
    for j in 0..c {
        let g_z = rect_scale * d_sce[j] + cfg.lambda_ent * d_ent(j);
        let dk_dm = if pm[j] > 0.0 {
            pm[j] * (pm[j].ln() - log_pa[j] - terms.kld)
        } else {
            0.0
        };
        let dk_da = pa[j] * mass_live - if live[j] { pm[j] } else { 0.0 };
        grad_main[j] = g_z + g_kld * dk_dm;
        grad_aux[j] = cfg.branch_w * g_z + g_kld * dk_da;
    }
    terms
}

/// Summed loss and gradients for a flat batch of pixels with `classes`
/// logits each. Chunks of pixels are processed in parallel and reduced in a
/// fixed order.
pub fn loss_gradients(
    main_logits: &[f64],
    aux_logits: &[f64],
    classes: usize,
    targets: &[PixelTarget],
    cfg: &LossConfig,
) -> Result<(LossTerms, Vec<f64>, Vec<f64>)> {
    let n = targets.len();
    if main_logits.len() != n * classes || aux_logits.len() != n * classes {
        return Err(Error::shape(
            "loss_gradients",
            n * classes,
            (main_logits.len(), aux_logits.len()),
        ));
    }
    let mut grad_main = vec![0.0; n * classes];
    let mut grad_aux = vec![0.0; n * classes];
    let chunks = par::map_chunks(n, |range| {
        let mut gm = vec![0.0; range.len() * classes];
        let mut ga = vec![0.0; range.len() * classes];
        let mut total = LossTerms::default();
        for (local, i) in range.clone().enumerate() {
            let s = i * classes..(i + 1) * classes;
            let l = local * classes..(local + 1) * classes;
            let t = pixel_loss_grad(
                &main_logits[s.clone()],
                &aux_logits[s],
                targets[i],
                cfg,
                &mut gm[l.clone()],
                &mut ga[l],
            );
            total.add(&t);
        }
        (range, total, gm, ga)
    });
    let mut total = LossTerms::default();
    for (range, t, gm, ga) in chunks {
        total.add(&t);
        let span = range.start * classes..range.end * classes;
        grad_main[span.clone()].copy_from_slice(&gm);
        grad_aux[span].copy_from_slice(&ga);
    }
    Ok((total, grad_main, grad_aux))
}

/// Per-pixel maps of every term plus their totals.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub height: usize,
    pub width: usize,
    pub per_pixel: Vec<LossTerms>,
    pub totals: LossTerms,
}

impl LossBreakdown {
    pub fn term_map(&self, f: impl Fn(&LossTerms) -> f64) -> Vec<f64> {
        self.per_pixel.iter().map(f).collect()
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "pixels": self.per_pixel.len(),
            "L_ce": self.totals.ce,
            "L_sce": self.totals.sce,
            "L_w_sce": self.totals.w_sce,
            "L_kld": self.totals.kld,
            "L_rect": self.totals.rect,
            "L_ent": self.totals.ent,
            "L_all": self.totals.all,
        })
    }
}

fn pixel_f64(t: &Tensor3, idx: usize) -> Vec<f64> {
    t.pixel(idx).iter().map(|&v| v as f64).collect()
}

fn scalar_map(grid: &Tensor3, values: Vec<f64>) -> Tensor3 {
    Tensor3::from_raw(
        grid.height(),
        grid.width(),
        1,
        values.into_iter().map(|v| v as f32).collect(),
    )
}

fn per_pixel<F>(n: usize, f: F) -> Vec<f64>
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    par::map_range(n, f)
}

/// Cross-entropy `-sum_c y log p` per pixel against a soft or one-hot `y`.
pub fn cross_entropy_map(p: &ProbabilityMap, y: &ProbabilityMap) -> Result<Tensor3> {
    p.tensor().same_shape(y.tensor(), "cross_entropy")?;
    let v = per_pixel(p.pixel_count(), |i| {
        cross_entropy(&pixel_f64(p.tensor(), i), &pixel_f64(y.tensor(), i))
    });
    Ok(scalar_map(p.tensor(), v))
}

/// Symmetric cross-entropy per pixel against `argmax(y_hat)`.
pub fn symmetric_ce_map(
    p: &ProbabilityMap,
    y_hat: &ProbabilityMap,
    cfg: &LossConfig,
) -> Result<Tensor3> {
    p.tensor().same_shape(y_hat.tensor(), "symmetric_ce")?;
    let v = per_pixel(p.pixel_count(), |i| {
        symmetric_ce(&pixel_f64(p.tensor(), i), argmax_f32(y_hat.pixel(i)), cfg)
    });
    Ok(scalar_map(p.tensor(), v))
}

fn single_channel(t: &Tensor3, name: &'static str) -> Result<()> {
    if t.channels() != 1 {
        return Err(Error::shape(name, 1, t.channels()));
    }
    Ok(())
}

/// `weight * sce` elementwise.
pub fn weighted_sce(sce: &Tensor3, weight: &Tensor3) -> Result<Tensor3> {
    single_channel(sce, "weighted_sce")?;
    sce.same_shape(weight, "weighted_sce")?;
    let v = sce
        .data()
        .iter()
        .zip(weight.data())
        .map(|(&l, &w)| l as f64 * w as f64)
        .collect();
    Ok(scalar_map(sce, v))
}

/// KL divergence from the auxiliary to the main branch per pixel.
pub fn kld_uncertainty(main: &ProbabilityMap, aux: &ProbabilityMap) -> Result<Tensor3> {
    main.tensor().same_shape(aux.tensor(), "kld_uncertainty")?;
    let v = per_pixel(main.pixel_count(), |i| {
        kl_divergence(&pixel_f64(main.tensor(), i), &pixel_f64(aux.tensor(), i))
    });
    Ok(scalar_map(main.tensor(), v))
}

/// `exp(-kld) * w_sce` elementwise.
pub fn rectified_loss(w_sce: &Tensor3, kld: &Tensor3) -> Result<Tensor3> {
    single_channel(w_sce, "rectified_loss")?;
    w_sce.same_shape(kld, "rectified_loss")?;
    let v = w_sce
        .data()
        .iter()
        .zip(kld.data())
        .map(|(&l, &k)| (-(k as f64)).exp() * l as f64)
        .collect();
    Ok(scalar_map(w_sce, v))
}

/// Prediction entropy per pixel.
pub fn entropy_loss(p: &ProbabilityMap) -> Tensor3 {
    crate::tensor::pixel_entropy(p)
}

/// Full loss for one image from the branch logits, the soft pseudo-labels
/// and their entropy weights.
pub fn total_loss(
    main_logits: &Tensor3,
    aux_logits: &Tensor3,
    y_hat: &ProbabilityMap,
    entropy_weight: &Tensor3,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    cfg.validate()?;
    main_logits.same_shape(aux_logits, "total_loss logits")?;
    main_logits.same_shape(y_hat.tensor(), "total_loss labels")?;
    single_channel(entropy_weight, "total_loss weights")?;
    main_logits.same_grid(entropy_weight, "total_loss weights")?;
    let per_pixel: Vec<LossTerms> = par::map_range(main_logits.pixel_count(), |i| {
        let y: Vec<f64> = pixel_f64(y_hat.tensor(), i);
        let target = PixelTarget {
            label: argmax(&y),
            weight: entropy_weight.data()[i] as f64,
        };
        pixel_loss(
            &pixel_f64(main_logits, i),
            &pixel_f64(aux_logits, i),
            target,
            cfg,
        )
    });
    let totals = LossTerms::sum(&per_pixel);
    Ok(LossBreakdown {
        height: main_logits.height(),
        width: main_logits.width(),
        per_pixel,
        totals,
    })
}

#[cfg(test)]
#[allow(clippy::approx_constant)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pmap(values: &[f64]) -> ProbabilityMap {
        ProbabilityMap::constant(1, 1, values).unwrap()
    }

    fn scalar(v: f32) -> Tensor3 {
        Tensor3::new(1, 1, 1, vec![v]).unwrap()
    }

    #[test]
    fn cross_entropy_examples() {
        let l = cross_entropy_map(&pmap(&[0.7, 0.3]), &pmap(&[1.0, 0.0])).unwrap();
        assert_abs_diff_eq!(l.data()[0], 0.3567, epsilon = 1e-4);
        let l = cross_entropy_map(&pmap(&[0.0, 1.0]), &pmap(&[0.0, 1.0])).unwrap();
        assert_eq!(l.data()[0], 0.0);
        let l = cross_entropy_map(&pmap(&[0.5, 0.5]), &pmap(&[0.5, 0.5])).unwrap();
        assert_abs_diff_eq!(l.data()[0], std::f32::consts::LN_2, epsilon = 1e-6);
    }

    #[test]
    fn symmetric_ce_examples() {
        let cfg = LossConfig::default();
        let l = symmetric_ce(&[0.7, 0.3], 0, &cfg);
        assert_abs_diff_eq!(l, 2.7988, epsilon = 1e-3);
        assert_abs_diff_eq!(l, 0.1 * -(0.7f64).ln() - 0.3 * (1e-4f64).ln(), epsilon = 1e-12);
        assert_eq!(symmetric_ce(&[0.0, 1.0, 0.0], 1, &cfg), 0.0);
        let pure_reverse = LossConfig {
            alpha: 0.0,
            ..cfg.clone()
        };
        assert_abs_diff_eq!(
            symmetric_ce(&[0.7, 0.3], 0, &pure_reverse),
            -0.3 * (1e-4f64).ln(),
            epsilon = 1e-12
        );
        let map = symmetric_ce_map(&pmap(&[0.7, 0.3]), &pmap(&[0.8, 0.2]), &cfg).unwrap();
        assert_abs_diff_eq!(map.data()[0], 2.7988, epsilon = 1e-3);
    }

    #[test]
    fn sce_forward_only_is_ce() {
        let cfg = LossConfig {
            alpha: 1.0,
            beta: 0.0,
            ..Default::default()
        };
        let p = [0.2, 0.5, 0.3];
        assert_abs_diff_eq!(
            symmetric_ce(&p, 2, &cfg),
            cross_entropy(&p, &[0.0, 0.0, 1.0]),
            epsilon = 1e-15
        );
    }

    #[test]
    fn weighted_sce_examples() {
        assert_eq!(weighted_sce(&scalar(2.5), &scalar(1.0)).unwrap().data()[0], 2.5);
        assert_eq!(weighted_sce(&scalar(2.5), &scalar(0.5)).unwrap().data()[0], 1.25);
        let w = crate::fusion::entropy_weight_map(&pmap(&[0.5, 0.5]), 1.0).unwrap();
        assert_abs_diff_eq!(
            weighted_sce(&scalar(3.0), &w).unwrap().data()[0],
            1.5,
            epsilon = 1e-6
        );
    }

    #[test]
    fn kld_examples() {
        let a = pmap(&[0.6, 0.4]);
        let b = pmap(&[0.5, 0.5]);
        assert_eq!(kld_uncertainty(&a, &a).unwrap().data()[0], 0.0);
        let ab = kld_uncertainty(&a, &b).unwrap().data()[0];
        let ba = kld_uncertainty(&b, &a).unwrap().data()[0];
        assert_abs_diff_eq!(ab, 0.02013, epsilon = 1e-4);
        assert_abs_diff_eq!(ba, 0.02041, epsilon = 1e-4);
        assert!(ab != ba);
    }

    #[test]
    fn rectified_examples() {
        assert_eq!(rectified_loss(&scalar(1.7), &scalar(0.0)).unwrap().data()[0], 1.7);
        let half = rectified_loss(&scalar(1.0), &scalar(std::f32::consts::LN_2)).unwrap();
        assert_abs_diff_eq!(half.data()[0], 0.5, epsilon = 1e-7);
        let r = rectified_loss(&scalar(1.0), &scalar(0.02013)).unwrap();
        assert_abs_diff_eq!(r.data()[0], 0.9801, epsilon = 1e-4);
    }

    #[test]
    fn entropy_loss_examples() {
        assert_eq!(entropy_loss(&pmap(&[1.0, 0.0])).data()[0], 0.0);
        assert_abs_diff_eq!(entropy_loss(&pmap(&[0.5, 0.5])).data()[0], 0.6931, epsilon = 1e-4);
        assert_abs_diff_eq!(entropy_loss(&pmap(&[0.7, 0.3])).data()[0], 0.6109, epsilon = 1e-4);
    }

    fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> Tensor3 {
        let data = (0..h * w * c).map(|_| rng.random_range(-2.0f32..2.0)).collect();
        Tensor3::new(h, w, c, data).unwrap()
    }

    #[test]
    fn total_loss_composes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (h, w, c) = (3, 4, 3);
        let main = random_image(&mut rng, h, w, c);
        let aux = random_image(&mut rng, h, w, c);
        let y = crate::tensor::softmax(&random_image(&mut rng, h, w, c)).unwrap();
        let wmap = crate::fusion::entropy_weight_map(&y, 1.0).unwrap();
        let cfg = LossConfig::default();
        let b = total_loss(&main, &aux, &y, &wmap, &cfg).unwrap();
        let recomposed: f64 = b
            .per_pixel
            .iter()
            .map(|t| t.rect + cfg.lambda_ent * t.ent + cfg.lambda_kld * t.kld)
            .sum();
        assert_relative_eq!(b.totals.all, recomposed, max_relative = 1e-6);

        // Chain the map-level operations and compare.
        let p = crate::tensor::combine_branches(&main, &aux, cfg.branch_w).unwrap();
        let pm = crate::tensor::softmax(&main).unwrap();
        let pa = crate::tensor::softmax(&aux).unwrap();
        let sce = symmetric_ce_map(&p, &y, &cfg).unwrap();
        let wsce = weighted_sce(&sce, &wmap).unwrap();
        let kld = kld_uncertainty(&pm, &pa).unwrap();
        let rect = rectified_loss(&wsce, &kld).unwrap();
        let ent = entropy_loss(&p);
        for i in 0..h * w {
            let chained = rect.data()[i] as f64
                + cfg.lambda_ent * ent.data()[i] as f64
                + cfg.lambda_kld * kld.data()[i] as f64;
            assert_abs_diff_eq!(b.per_pixel[i].all, chained, epsilon = 1e-5);
        }

        let no_reg = LossConfig {
            lambda_ent: 0.0,
            lambda_kld: 0.0,
            ..cfg.clone()
        };
        let b0 = total_loss(&main, &aux, &y, &wmap, &no_reg).unwrap();
        assert_relative_eq!(b0.totals.all, b0.totals.rect, max_relative = 1e-12);

        let json = b.to_json();
        assert_eq!(json["pixels"], 12);
    }

    #[test]
    fn total_loss_rejects_mismatch() {
        let main = Tensor3::zeros(2, 2, 3);
        let aux = Tensor3::zeros(2, 3, 3);
        let y = ProbabilityMap::constant(2, 2, &[1.0, 0.0, 0.0]).unwrap();
        let w = Tensor3::zeros(2, 2, 1);
        assert!(total_loss(&main, &aux, &y, &w, &LossConfig::default()).is_err());
    }

    #[test]
    fn entropy_gradient_vanishes_at_uniform() {
        let cfg = LossConfig {
            alpha: 0.0,
            beta: 0.0,
            lambda_kld: 0.0,
            lambda_ent: 1.0,
            ..Default::default()
        };
        let (mut gm, mut ga) = ([0.0; 4], [0.0; 4]);
        let target = PixelTarget { label: 2, weight: 1.0 };
        pixel_loss_grad(&[0.3; 4], &[-1.0; 4], target, &cfg, &mut gm, &mut ga);
        for g in gm.iter().chain(&ga) {
            assert!(g.abs() < 1e-15, "{g}");
        }
    }

    #[test]
    fn zero_weight_leaves_only_regularizer_gradient() {
        let mut cfg = LossConfig::default();
        let main = [0.4, -0.3, 1.2];
        let aux = [-0.2, 0.9, 0.1];
        let zero = PixelTarget { label: 1, weight: 0.0 };
        let (mut gm, mut ga) = ([0.0; 3], [0.0; 3]);
        pixel_loss_grad(&main, &aux, zero, &cfg, &mut gm, &mut ga);
        cfg.alpha = 0.0;
        cfg.beta = 0.0;
        let (mut rm, mut ra) = ([0.0; 3], [0.0; 3]);
        pixel_loss_grad(&main, &aux, PixelTarget { label: 1, weight: 1.0 }, &cfg, &mut rm, &mut ra);
        assert_eq!(gm, rm);
        assert_eq!(ga, ra);
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        let bad = LossConfig {
            label_clamp: [0.0, 1.0],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let neg = LossConfig {
            alpha: -1.0,
            ..Default::default()
        };
        assert!(neg.validate().is_err());
    }

    proptest! {
        #[test]
        fn terms_nonnegative_and_rectification_never_amplifies(
            main in proptest::collection::vec(-6.0f64..6.0, 3),
            aux in proptest::collection::vec(-6.0f64..6.0, 3),
            label in 0usize..3,
            weight in 0.0f64..1.0,
        ) {
            let t = pixel_loss(&main, &aux, PixelTarget { label, weight }, &LossConfig::default());
            for v in [t.ce, t.sce, t.w_sce, t.rect, t.ent, t.all] {
                prop_assert!(v >= 0.0);
            }
            prop_assert!(t.kld >= -1e-12);
            prop_assert!(t.rect <= t.w_sce + 1e-15);
            let factor = (-t.kld).exp();
            prop_assert!(factor > 0.0 && factor <= 1.0 + 1e-12);
        }
    }
}
