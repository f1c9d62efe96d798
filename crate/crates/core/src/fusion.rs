//! Soft pseudo-label fusion, label-entropy weights and hard labels.

use crate::error::{Error, Result};
use crate::gap::SimilarityWeights;
use crate::tensor::{argmax_f32, entropy, softmax_into, HardLabelMap, ProbabilityMap, Tensor3};
use crate::tensor::IGNORE_LABEL;

/// Fused soft pseudo-labels for one target image.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftLabelMap {
    pub y_hat: ProbabilityMap,
    /// `exp(-lambda_scale * entropy(y_hat))`, one channel.
    pub entropy_weight: Tensor3,
    /// Source ids and the weights they were fused with.
    pub provenance: Vec<(String, f64)>,
}

impl SoftLabelMap {
    pub fn build(
        converted: &[ProbabilityMap],
        sources: &[String],
        weights: &SimilarityWeights,
        lambda_scale: f64,
        temperature: f64,
    ) -> Result<Self> {
        if sources.len() != converted.len() {
            return Err(Error::shape("SoftLabelMap::build", converted.len(), sources.len()));
        }
        let y_hat = fuse_tempered(converted, weights, temperature)?;
        let entropy_weight = entropy_weight_map(&y_hat, lambda_scale)?;
        let provenance = sources
            .iter()
            .cloned()
            .zip(weights.weights.iter().copied())
            .collect();
        Ok(Self {
            y_hat,
            entropy_weight,
            provenance,
        })
    }

    pub fn hard_labels(&self) -> HardLabelMap {
        hard_label(&self.y_hat)
    }
}

/// `softmax(sum_i weight_i * p_i)` per pixel.
pub fn fuse(converted: &[ProbabilityMap], weights: &SimilarityWeights) -> Result<ProbabilityMap> {
    fuse_tempered(converted, weights, 1.0)
}

/// [`fuse`] with the weighted sum divided by `temperature` before the
/// softmax.
pub fn fuse_tempered(
    converted: &[ProbabilityMap],
    weights: &SimilarityWeights,
    temperature: f64,
) -> Result<ProbabilityMap> {
    let first = converted.first().ok_or(Error::Empty("source prediction list"))?;
    if weights.len() != converted.len() {
        return Err(Error::shape("fuse weights", converted.len(), weights.len()));
    }
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "fusion temperature must be positive, got {temperature}"
        )));
    }
    for p in &converted[1..] {
        p.tensor().same_shape(first.tensor(), "fuse")?;
    }
    let c = first.classes();
    let m = converted.len();
    // Interleave sources per pixel so the parallel map sees one slice.
    let mut stacked = Vec::with_capacity(first.pixel_count() * c * m);
    for idx in 0..first.pixel_count() {
        for p in converted {
            stacked.extend_from_slice(p.pixel(idx));
        }
    }
    let stacked = Tensor3::from_raw(first.height(), first.width(), c * m, stacked);
    let w = &weights.weights;
    let out = stacked.map_pixels(c, |px, out| {
        let mut z = vec![0.0f64; c];
        for (i, wi) in w.iter().enumerate() {
            for (k, zk) in z.iter_mut().enumerate() {
                *zk += wi * px[i * c + k] as f64;
            }
        }
        z.iter_mut().for_each(|v| *v /= temperature);
        let mut p = vec![0.0; c];
        softmax_into(&z, &mut p);
        for (o, v) in out.iter_mut().zip(p) {
            *o = v as f32;
        }
    });
    Ok(ProbabilityMap::from_tensor_unchecked(out))
}

/// `exp(-lambda_scale * entropy)` per pixel, in `(0, 1]`.
pub fn entropy_weight_map(y_hat: &ProbabilityMap, lambda_scale: f64) -> Result<Tensor3> {
    if !(lambda_scale > 0.0) || !lambda_scale.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "lambda_scale must be positive, got {lambda_scale}"
        )));
    }
    Ok(y_hat.tensor().map_pixels(1, |px, out| {
        let p: Vec<f64> = px.iter().map(|&v| v as f64).collect();
        out[0] = (-lambda_scale * entropy(&p)).exp() as f32;
    }))
}

/// Per-pixel argmax, lowest index on ties.
pub fn hard_label(y_hat: &ProbabilityMap) -> HardLabelMap {
    let labels = y_hat
        .tensor()
        .pixels()
        .map(|px| argmax_f32(px) as u16)
        .collect();
    HardLabelMap::from_raw(y_hat.height(), y_hat.width(), labels)
}

/// Diagnostic baseline: a pixel keeps a label only where every converted
/// source agrees on the argmax; all other pixels are ignored.
pub fn unanimity_labels(converted: &[ProbabilityMap]) -> Result<HardLabelMap> {
    let first = converted.first().ok_or(Error::Empty("source prediction list"))?;
    for p in &converted[1..] {
        p.tensor().same_shape(first.tensor(), "unanimity_labels")?;
    }
    let labels = (0..first.pixel_count())
        .map(|idx| {
            let label = argmax_f32(first.pixel(idx));
            if converted[1..]
                .iter()
                .all(|p| argmax_f32(p.pixel(idx)) == label)
            {
                label as u16
            } else {
                IGNORE_LABEL
            }
        })
        .collect();
    Ok(HardLabelMap::from_raw(first.height(), first.width(), labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gap::WeightMode;
    use crate::tensor::pixel_entropy;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn px(values: &[f64]) -> ProbabilityMap {
        ProbabilityMap::constant(1, 1, values).unwrap()
    }

    fn weights(w: &[f64]) -> SimilarityWeights {
        SimilarityWeights {
            weights: w.to_vec(),
            mode: WeightMode::SumToOne,
        }
    }

    #[test]
    fn single_source_is_softmax_of_probabilities() {
        let p = px(&[0.1, 0.6, 0.3]);
        let out = fuse(std::slice::from_ref(&p), &weights(&[1.0])).unwrap();
        let want = crate::tensor::softmax(p.tensor()).unwrap();
        assert_eq!(out, want);
        assert_eq!(hard_label(&out).labels(), &[1]);
    }

    #[test]
    fn two_source_example() {
        let out = fuse(&[px(&[0.9, 0.1]), px(&[0.2, 0.8])], &weights(&[0.75, 0.25])).unwrap();
        assert_abs_diff_eq!(out.pixel(0)[0], 0.6106, epsilon = 1e-4);
        assert_abs_diff_eq!(out.pixel(0)[1], 0.3894, epsilon = 1e-4);
    }

    #[test]
    fn permuting_sources_is_identity() {
        let a = px(&[0.9, 0.05, 0.05]);
        let b = px(&[0.2, 0.5, 0.3]);
        let c = px(&[0.3, 0.3, 0.4]);
        let x = fuse(&[a.clone(), b.clone(), c.clone()], &weights(&[0.5, 0.3, 0.2])).unwrap();
        let y = fuse(&[c, a, b], &weights(&[0.2, 0.5, 0.3])).unwrap();
        for (u, v) in x.pixel(0).iter().zip(y.pixel(0)) {
            assert_abs_diff_eq!(u, v, epsilon = 1e-7);
        }
    }

    #[test]
    fn fuse_rejects_mismatches() {
        let a = px(&[0.5, 0.5]);
        assert!(fuse(std::slice::from_ref(&a), &weights(&[0.5, 0.5])).is_err());
        let b = px(&[0.2, 0.3, 0.5]);
        assert!(fuse(&[a.clone(), b], &weights(&[0.5, 0.5])).is_err());
        assert!(fuse(&[], &weights(&[])).is_err());
    }

    #[test]
    fn entropy_weight_examples() {
        let w = entropy_weight_map(&px(&[0.0, 1.0]), 1.0).unwrap();
        assert_eq!(w.data()[0], 1.0);
        let w = entropy_weight_map(&px(&[0.5, 0.5]), 1.0).unwrap();
        assert_abs_diff_eq!(w.data()[0], 0.5, epsilon = 1e-7);
        let w = entropy_weight_map(&px(&[0.7, 0.3]), 2.0).unwrap();
        assert_abs_diff_eq!(w.data()[0], 0.2947, epsilon = 1e-4);
        assert!(entropy_weight_map(&px(&[0.7, 0.3]), 0.0).is_err());
    }

    #[test]
    fn hard_label_examples() {
        assert_eq!(hard_label(&px(&[0.6, 0.4])).labels(), &[0]);
        assert_eq!(hard_label(&px(&[0.5, 0.5])).labels(), &[0]);
        let m = ProbabilityMap::new(Tensor3::new(2, 1, 2, vec![0.1, 0.9, 0.8, 0.2]).unwrap())
            .unwrap();
        assert_eq!(hard_label(&m).labels(), &[1, 0]);
    }

    #[test]
    fn unanimity_keeps_only_agreement() {
        let a = ProbabilityMap::new(Tensor3::new(1, 2, 2, vec![0.9, 0.1, 0.6, 0.4]).unwrap())
            .unwrap();
        let b = ProbabilityMap::new(Tensor3::new(1, 2, 2, vec![0.7, 0.3, 0.2, 0.8]).unwrap())
            .unwrap();
        assert_eq!(unanimity_labels(&[a, b]).unwrap().labels(), &[0, IGNORE_LABEL]);
    }

    #[test]
    fn agreement_sharpens_under_literal_weights() {
        // Identical confident sources weighted by raw inverse gap.
        let p = px(&[0.98, 0.01, 0.01]);
        let g = crate::gap::domain_gap("a", &p);
        let w = crate::gap::similarity_weights(
            &[g.clone(), g],
            WeightMode::Unnormalized,
            crate::gap::DEFAULT_EPSILON,
        )
        .unwrap();
        let fused = fuse(&[p.clone(), p.clone()], &w).unwrap();
        let e_src = pixel_entropy(&p).data()[0];
        let e_fused = pixel_entropy(&fused).data()[0];
        assert!(e_fused <= e_src, "{e_fused} > {e_src}");
    }

    proptest! {
        #[test]
        fn literal_argmax_invariant_to_weight_scale(
            a in proptest::collection::vec(0.01f64..1.0, 3),
            b in proptest::collection::vec(0.01f64..1.0, 3),
            w0 in 0.1f64..5.0, w1 in 0.1f64..5.0, k in 0.1f64..10.0,
        ) {
            let norm = |v: &Vec<f64>| { let s: f64 = v.iter().sum(); v.iter().map(|x| x / s).collect::<Vec<_>>() };
            let maps = [px(&norm(&a)), px(&norm(&b))];
            let lit = |s: f64| SimilarityWeights { weights: vec![w0 * s, w1 * s], mode: WeightMode::Unnormalized };
            let x = fuse(&maps, &lit(1.0)).unwrap();
            let y = fuse(&maps, &lit(k)).unwrap();
            // Near-ties can flip under f32 rounding; compare only clear winners.
            let xs: Vec<f64> = x.pixel_f64(0);
            let mut sorted = xs.clone();
            sorted.sort_by(|p, q| q.partial_cmp(p).unwrap());
            prop_assume!(sorted[0] - sorted[1] > 1e-5);
            prop_assert_eq!(hard_label(&x), hard_label(&y));
        }

        #[test]
        fn weight_antitone_in_entropy(z1 in proptest::collection::vec(-3.0f64..3.0, 3), z2 in proptest::collection::vec(-3.0f64..3.0, 3)) {
            let p1 = crate::tensor::softmax_vec(&z1);
            let p2 = crate::tensor::softmax_vec(&z2);
            let (e1, e2) = (entropy(&p1), entropy(&p2));
            let w1 = entropy_weight_map(&px(&p1), 1.0).unwrap().data()[0];
            let w2 = entropy_weight_map(&px(&p2), 1.0).unwrap().data()[0];
            if e1 + 1e-5 < e2 {
                prop_assert!(w1 >= w2);
            }
            prop_assert!(w1 > 0.0 && w1 <= 1.0);
        }
    }
}
