//! Domain gap between a source model and a target image, measured as the
//! prediction entropy summed over the image and normalized by `log C`, and
//! the inverse-gap similarity weights used for fusion.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{entropy, ProbabilityMap};

pub const DEFAULT_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapScore {
    pub source: String,
    #[serde(rename = "G")]
    pub gap: f64,
    pub pixel_count: usize,
}

/// How raw inverse gaps are scaled before fusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightMode {
    /// Raw `1 / G`.
    Unnormalized,
    /// `1 / G` divided by the sum over sources.
    #[default]
    SumToOne,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityWeights {
    pub weights: Vec<f64>,
    pub mode: WeightMode,
}

impl SimilarityWeights {
    /// Equal weights: `1 / n` each in sum-to-one mode, `1` each otherwise.
    pub fn uniform(n: usize, mode: WeightMode) -> Result<Self> {
        if n == 0 {
            return Err(Error::Empty("source list"));
        }
        let w = match mode {
            WeightMode::SumToOne => 1.0 / n as f64,
            WeightMode::Unnormalized => 1.0,
        };
        Ok(Self {
            weights: vec![w; n],
            mode,
        })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// Entropy of every pixel summed in row-major order, divided by `log C`.
pub fn domain_gap(source: &str, p: &ProbabilityMap) -> GapScore {
    let c = p.classes();
    let per_chunk = par::map_chunks(p.pixel_count(), |range| {
        range
            .map(|idx| {
                let px: Vec<f64> = p.pixel(idx).iter().map(|&v| v as f64).collect();
                entropy(&px)
            })
            .sum::<f64>()
    });
    let total: f64 = per_chunk.iter().sum();
    GapScore {
        source: source.to_owned(),
        gap: total / (c as f64).ln(),
        pixel_count: p.pixel_count(),
    }
}

/// Inverse-gap weights with `G` clamped below at `epsilon`.
pub fn similarity_weights(
    gaps: &[GapScore],
    mode: WeightMode,
    epsilon: f64,
) -> Result<SimilarityWeights> {
    if gaps.is_empty() {
        return Err(Error::Empty("gap score list"));
    }
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    let mut weights: Vec<f64> = gaps.iter().map(|g| 1.0 / g.gap.max(epsilon)).collect();
    if mode == WeightMode::SumToOne {
        let sum: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= sum);
    }
    Ok(SimilarityWeights { weights, mode })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use proptest::prelude::*;

    fn score(g: f64) -> GapScore {
        GapScore {
            source: "s".into(),
            gap: g,
            pixel_count: 1,
        }
    }

    #[test]
    fn uniform_map_gap_is_pixel_count() {
        let p = ProbabilityMap::constant(3, 5, &[0.25; 4]).unwrap();
        assert_abs_diff_eq!(domain_gap("u", &p).gap, 15.0, epsilon = 1e-9);
    }

    #[test]
    fn one_hot_gap_is_zero() {
        let p = ProbabilityMap::constant(4, 4, &[0.0, 1.0, 0.0]).unwrap();
        assert_eq!(domain_gap("h", &p).gap, 0.0);
    }

    #[test]
    fn single_pixel_gap() {
        let p = ProbabilityMap::constant(1, 1, &[0.7, 0.3]).unwrap();
        assert_abs_diff_eq!(domain_gap("x", &p).gap, 0.8813, epsilon = 1e-4);
    }

    #[test]
    fn weight_examples() {
        let w = similarity_weights(&[score(1.0), score(3.0)], WeightMode::SumToOne, 1e-6).unwrap();
        assert_abs_diff_eq!(w.weights[0], 0.75, epsilon = 1e-12);
        assert_abs_diff_eq!(w.weights[1], 0.25, epsilon = 1e-12);

        let w = similarity_weights(&[score(42.0)], WeightMode::SumToOne, 1e-6).unwrap();
        assert_eq!(w.weights, vec![1.0]);

        let raw = similarity_weights(&[score(0.0), score(5.0)], WeightMode::Unnormalized, 1e-6)
            .unwrap();
        assert_relative_eq!(raw.weights[0], 1e6, max_relative = 1e-12);
        assert_relative_eq!(raw.weights[1], 0.2, max_relative = 1e-12);
        let norm =
            similarity_weights(&[score(0.0), score(5.0)], WeightMode::SumToOne, 1e-6).unwrap();
        assert_relative_eq!(norm.weights[0], 1.0, max_relative = 1e-6);
        assert_relative_eq!(norm.weights[1], 0.2 / (1e6 + 0.2), max_relative = 1e-9);
        assert_relative_eq!(norm.weights[1], 2e-7, max_relative = 1e-6);
    }

    #[test]
    fn empty_and_bad_epsilon_rejected() {
        assert!(similarity_weights(&[], WeightMode::SumToOne, 1e-6).is_err());
        assert!(similarity_weights(&[score(1.0)], WeightMode::SumToOne, 0.0).is_err());
    }

    #[test]
    fn higher_entropy_pixel_raises_gap() {
        let base = ProbabilityMap::from_pixels(2, 2, 3, |i, out| {
            out.copy_from_slice(if i == 0 { &[0.8, 0.1, 0.1] } else { &[0.6, 0.3, 0.1] })
        })
        .unwrap();
        let fuzzier = ProbabilityMap::from_pixels(2, 2, 3, |i, out| {
            out.copy_from_slice(if i == 0 { &[0.5, 0.3, 0.2] } else { &[0.6, 0.3, 0.1] })
        })
        .unwrap();
        assert!(domain_gap("a", &fuzzier).gap > domain_gap("a", &base).gap);
    }

    proptest! {
        #[test]
        fn weights_decrease_with_gap(gs in proptest::collection::vec(1e-3f64..100.0, 2..6)) {
            let scores: Vec<_> = gs.iter().map(|&g| score(g)).collect();
            let w = similarity_weights(&scores, WeightMode::SumToOne, 1e-6).unwrap();
            let sum: f64 = w.weights.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-6);
            for i in 0..gs.len() {
                prop_assert!(w.weights[i] > 0.0);
                for j in 0..gs.len() {
                    if gs[i] < gs[j] {
                        prop_assert!(w.weights[i] > w.weights[j]);
                    }
                }
            }
        }

        #[test]
        fn sum_to_one_is_scale_invariant(gs in proptest::collection::vec(1e-2f64..50.0, 1..5), k in 0.01f64..100.0) {
            let a: Vec<_> = gs.iter().map(|&g| score(g)).collect();
            let b: Vec<_> = gs.iter().map(|&g| score(g * k)).collect();
            let wa = similarity_weights(&a, WeightMode::SumToOne, 1e-9).unwrap();
            let wb = similarity_weights(&b, WeightMode::SumToOne, 1e-9).unwrap();
            for (x, y) in wa.weights.iter().zip(&wb.weights) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
