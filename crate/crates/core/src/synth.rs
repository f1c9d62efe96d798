//! Synthetic target scenes and source predictors with controllable
//! reliability.
//!
//! Scenes are jittered-grid Voronoi partitions whose cells draw a class from
//! configured proportions; pixel features are class means plus a per-scene
//! shift and Gaussian noise. A source predicts from a logit field aligned
//! with the ground truth (through its surrogate class for each target
//! class), perturbed by region-level and pixel-level noise, and softened by
//! its temperature.

use std::collections::BTreeMap;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{LabelMapping, LabelSpace};
use crate::par;
use crate::tensor::{softmax_into, HardLabelMap, ProbabilityMap, Tensor3};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SourceSpec {
    pub name: String,
    /// The source's own label space.
    pub classes: Vec<String>,
    /// Source class -> target class (or null when it has no counterpart).
    pub to_target: BTreeMap<String, Option<String>>,
    /// Target class -> source class predicted for it. Target classes not
    /// listed use the first source class mapped onto them.
    pub surrogates: BTreeMap<String, String>,
    /// Softmax temperature; higher means fuzzier predictions.
    pub temperature: f64,
    /// Logit margin of the surrogate class.
    pub confidence: f64,
    /// Standard deviation of the logit noise.
    pub logit_noise: f64,
    /// Share of the noise variance that is constant over a region cell.
    pub region_share: f64,
    /// Constant logit offsets per source class.
    pub bias: BTreeMap<String, f64>,
    pub seed: u64,
}

impl Default for SourceSpec {
    fn default() -> Self {
        Self {
            name: String::new(),
            classes: Vec::new(),
            to_target: BTreeMap::new(),
            surrogates: BTreeMap::new(),
            temperature: 1.0,
            confidence: 3.0,
            logit_noise: 1.0,
            region_share: 0.5,
            bias: BTreeMap::new(),
            seed: 0,
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn spec(
    name: &str,
    classes: &[&str],
    to_target: &[(&str, Option<&str>)],
    surrogates: &[(&str, &str)],
    temperature: f64,
    confidence: f64,
    logit_noise: f64,
    bias: &[(&str, f64)],
    seed: u64,
) -> SourceSpec {
    SourceSpec {
        name: name.into(),
        classes: classes.iter().map(|s| s.to_string()).collect(),
        to_target: to_target
            .iter()
            .map(|(s, t)| (s.to_string(), t.map(str::to_string)))
            .collect(),
        surrogates: surrogates
            .iter()
            .map(|(t, s)| (t.to_string(), s.to_string()))
            .collect(),
        temperature,
        confidence,
        logit_noise,
        region_share: 0.5,
        bias: bias.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        seed,
    }
}

/// Three sources of decreasing reliability. `urban` has no `grass` class.
pub fn standard_sources() -> Vec<SourceSpec> {
    vec![
        spec(
            "forest",
            &["tree", "trail", "grass", "rock", "sky"],
            &[
                ("tree", Some("vegetation")),
                ("trail", Some("ground")),
                ("grass", Some("grass")),
                ("rock", Some("structure")),
                ("sky", None),
            ],
            &[],
            0.6,
            3.0,
            1.2,
            &[],
            11,
        ),
        spec(
            "urban",
            &["vegetation", "road", "sidewalk", "building", "sky"],
            &[
                ("vegetation", Some("vegetation")),
                ("road", Some("ground")),
                ("sidewalk", Some("ground")),
                ("building", Some("structure")),
                ("sky", None),
            ],
            &[("grass", "vegetation")],
            1.0,
            3.0,
            1.5,
            &[],
            22,
        ),
        spec(
            "highway",
            &["nature", "road", "building", "car"],
            &[
                ("nature", Some("vegetation")),
                ("road", Some("ground")),
                ("building", Some("structure")),
                ("car", None),
            ],
            &[("grass", "nature")],
            2.0,
            2.5,
            2.5,
            &[("building", 1.0)],
            33,
        ),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub feature_dim: usize,
    pub target_classes: Vec<String>,
    /// Expected share of pixels per target class.
    pub proportions: Vec<f64>,
    /// Side of a Voronoi grid cell in pixels.
    pub region_size: usize,
    /// Norm of every class mean.
    pub class_separation: f64,
    pub feature_noise: f64,
    /// Standard deviation of the per-scene feature offset.
    pub scene_shift: f64,
    pub train_scenes: usize,
    pub test_scenes: usize,
    pub sources: Vec<SourceSpec>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            feature_dim: 8,
            target_classes: ["vegetation", "ground", "structure", "grass"]
                .map(String::from)
                .to_vec(),
            proportions: vec![0.3, 0.3, 0.2, 0.2],
            region_size: 8,
            class_separation: 3.0,
            feature_noise: 1.0,
            scene_shift: 0.3,
            train_scenes: 8,
            test_scenes: 4,
            sources: standard_sources(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.feature_dim == 0 || self.region_size == 0 {
            return Err(Error::Config("scene dimensions must be positive".into()));
        }
        LabelSpace::new(self.target_classes.clone())?;
        if self.proportions.len() != self.target_classes.len()
            || self.proportions.iter().any(|&p| !(p >= 0.0 && p.is_finite()))
            || self.proportions.iter().sum::<f64>() <= 0.0
        {
            return Err(Error::Config(
                "proportions must be one non-negative weight per target class".into(),
            ));
        }
        if self.feature_noise < 0.0 || self.scene_shift < 0.0 || self.class_separation < 0.0 {
            return Err(Error::Config("noise and separation must be non-negative".into()));
        }
        Ok(())
    }

    pub fn target_space(&self) -> Result<LabelSpace> {
        LabelSpace::new(self.target_classes.clone())
    }
}

/// splitmix64 of the combined inputs; decorrelates sub-streams.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_MEANS: u64 = 1;
const STREAM_SCENE: u64 = 2;
const STREAM_SOURCE: u64 = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub seed: u64,
    pub features: Tensor3,
    pub truth: HardLabelMap,
}

/// Scene factory sharing one set of class means.
#[derive(Debug, Clone)]
pub struct SceneGenerator {
    cfg: SynthConfig,
    seed: u64,
    means: Vec<f64>,
}

impl SceneGenerator {
    pub fn new(cfg: &SynthConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.feature_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_MEANS, 0));
        let mut means = Vec::with_capacity(cfg.target_classes.len() * d);
        for _ in 0..cfg.target_classes.len() {
            let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            means.extend(v.iter().map(|x| x / norm * cfg.class_separation));
        }
        Ok(Self {
            cfg: cfg.clone(),
            seed,
            means,
        })
    }

    pub fn class_mean(&self, class: usize) -> &[f64] {
        let d = self.cfg.feature_dim;
        &self.means[class * d..(class + 1) * d]
    }

    /// Scene number `index`; depends only on the generator seed and index.
    pub fn scene(&self, index: u64) -> SyntheticScene {
        let cfg = &self.cfg;
        let scene_seed = derive_seed(self.seed, STREAM_SCENE, index);
        let mut rng = ChaCha8Rng::seed_from_u64(scene_seed);
        let (h, w, rs, d) = (cfg.height, cfg.width, cfg.region_size, cfg.feature_dim);
        let (gh, gw) = (h.div_ceil(rs), w.div_ceil(rs));
        let classes = WeightedIndex::new(&cfg.proportions).expect("validated proportions");
        let cells: Vec<(f64, f64, u16)> = (0..gh * gw)
            .map(|k| {
                let (cy, cx) = ((k / gw) * rs, (k % gw) * rs);
                let y = cy as f64 + rng.random::<f64>() * rs as f64;
                let x = cx as f64 + rng.random::<f64>() * rs as f64;
                (y, x, classes.sample(&mut rng) as u16)
            })
            .collect();
        let mut labels = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
                let (gy, gx) = ((y / rs) as isize, (x / rs) as isize);
                let mut best = (f64::INFINITY, 0u16);
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let (ny, nx) = (gy + dy, gx + dx);
                        if ny < 0 || nx < 0 || ny >= gh as isize || nx >= gw as isize {
                            continue;
                        }
                        let (cy, cx, c) = cells[ny as usize * gw + nx as usize];
                        let dist = (cy - py).powi(2) + (cx - px).powi(2);
                        if dist < best.0 {
                            best = (dist, c);
                        }
                    }
                }
                labels.push(best.1);
            }
        }
        let shift: Vec<f64> = (0..d)
            .map(|_| cfg.scene_shift * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let mut data = Vec::with_capacity(h * w * d);
        for &l in &labels {
            let mean = self.class_mean(l as usize);
            for k in 0..d {
                let noise: f64 = rng.sample(StandardNormal);
                data.push((mean[k] + shift[k] + cfg.feature_noise * noise) as f32);
            }
        }
        SyntheticScene {
            seed: scene_seed,
            features: Tensor3::from_raw(h, w, d, data),
            truth: HardLabelMap::from_raw(h, w, labels),
        }
    }

    /// Scenes `first..first + count`, generated in parallel.
    pub fn scenes(&self, first: u64, count: usize) -> Vec<SyntheticScene> {
        par::map_range(count, |i| self.scene(first + i as u64))
    }
}

/// `count` scenes from a fresh generator.
pub fn generate_dataset(cfg: &SynthConfig, seed: u64, count: usize) -> Result<Vec<SyntheticScene>> {
    Ok(SceneGenerator::new(cfg, seed)?.scenes(0, count))
}

/// Per-class pixel counts over a set of scenes.
pub fn class_histogram(scenes: &[SyntheticScene], classes: usize) -> Vec<u64> {
    let mut hist = vec![0u64; classes];
    for s in scenes {
        for &l in s.truth.labels() {
            if (l as usize) < classes {
                hist[l as usize] += 1;
            }
        }
    }
    hist
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSource {
    pub spec: SourceSpec,
    pub space: LabelSpace,
    pub mapping: LabelMapping,
    /// Source class predicted for each target class.
    pub surrogate: Vec<usize>,
    bias: Vec<f64>,
}

impl SyntheticSource {
    pub fn new(spec: SourceSpec, target: &LabelSpace) -> Result<Self> {
        let space = LabelSpace::new(spec.classes.clone())?;
        let pairs: Vec<(&str, Option<&str>)> = spec
            .to_target
            .iter()
            .map(|(s, t)| (s.as_str(), t.as_deref()))
            .collect();
        let mapping = LabelMapping::from_names(space.clone(), target.clone(), &pairs)?;
        let mut surrogate = Vec::with_capacity(target.len());
        for (t, name) in target.names().iter().enumerate() {
            let s = match spec.surrogates.get(name) {
                Some(s) => space.index_of(s).ok_or_else(|| {
                    Error::Config(format!("source {}: unknown surrogate {s:?}", spec.name))
                })?,
                None => mapping.targets().iter().position(|&m| m == Some(t)).ok_or_else(|| {
                    Error::Config(format!(
                        "source {}: no class maps to target {name:?}; add a surrogate",
                        spec.name
                    ))
                })?,
            };
            surrogate.push(s);
        }
        let mut bias = vec![0.0; space.len()];
        for (k, v) in &spec.bias {
            let i = space
                .index_of(k)
                .ok_or_else(|| Error::Config(format!("source {}: unknown bias class {k:?}", spec.name)))?;
            bias[i] = *v;
        }
        if !(spec.temperature > 0.0) || spec.logit_noise < 0.0 || !(0.0..=1.0).contains(&spec.region_share) {
            return Err(Error::Config(format!(
                "source {}: temperature must be positive, noise non-negative, region_share in [0, 1]",
                spec.name
            )));
        }
        Ok(Self {
            spec,
            space,
            mapping,
            surrogate,
            bias,
        })
    }

    pub fn name(&self) -> &str {
        &self.spec.name
    }

    /// Logit field for a scene, before the temperature is applied.
    pub fn logits(&self, scene: &SyntheticScene, region_size: usize) -> Vec<f64> {
        let (h, w) = (scene.truth.height(), scene.truth.width());
        let c = self.space.len();
        let rs = region_size.max(1);
        let (gh, gw) = (h.div_ceil(rs), w.div_ceil(rs));
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(scene.seed, STREAM_SOURCE, self.spec.seed));
        let region: Vec<f64> = (0..gh * gw * c).map(|_| rng.sample(StandardNormal)).collect();
        let (a, b) = (self.spec.region_share.sqrt(), (1.0 - self.spec.region_share).sqrt());
        let mut out = Vec::with_capacity(h * w * c);
        for (i, &t) in scene.truth.labels().iter().enumerate() {
            let cell = (i / w / rs) * gw + (i % w) / rs;
            let hit = self.surrogate.get(t as usize).copied();
            for s in 0..c {
                let pixel: f64 = rng.sample(StandardNormal);
                let noise = a * region[cell * c + s] + b * pixel;
                let margin = if Some(s) == hit { self.spec.confidence } else { 0.0 };
                out.push(margin + self.bias[s] + self.spec.logit_noise * noise);
            }
        }
        out
    }

    /// Probability map in the source's own label space.
    pub fn predict(&self, scene: &SyntheticScene, region_size: usize) -> ProbabilityMap {
        self.predict_with_temperature(scene, region_size, self.spec.temperature)
    }

    pub fn predict_with_temperature(
        &self,
        scene: &SyntheticScene,
        region_size: usize,
        temperature: f64,
    ) -> ProbabilityMap {
        let c = self.space.len();
        let logits = self.logits(scene, region_size);
        let (h, w) = (scene.truth.height(), scene.truth.width());
        let logits = Tensor3::from_raw(h, w, c, logits.iter().map(|&v| v as f32).collect());
        let out = logits.map_pixels(c, |px, out| {
            let z: Vec<f64> = px.iter().map(|&v| v as f64 / temperature).collect();
            let mut p = vec![0.0; c];
            softmax_into(&z, &mut p);
            for (o, v) in out.iter_mut().zip(p) {
                *o = v as f32;
            }
        });
        ProbabilityMap::from_tensor_unchecked(out)
    }
}

/// Prediction of `source` on `scene`.
pub fn source_predict(source: &SyntheticSource, scene: &SyntheticScene, region_size: usize) -> ProbabilityMap {
    source.predict(scene, region_size)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::hard_label;
    use crate::labels::convert_distribution;

    fn small() -> SynthConfig {
        SynthConfig {
            height: 16,
            width: 16,
            feature_dim: 4,
            region_size: 4,
            ..Default::default()
        }
    }

    #[test]
    fn dataset_is_reproducible_and_sized() {
        let a = generate_dataset(&small(), 7, 3).unwrap();
        let b = generate_dataset(&small(), 7, 3).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(&small(), 8, 3).unwrap();
        assert_ne!(a, c);
        assert_eq!(a[0].features.shape(), (16, 16, 4));
        assert_eq!(a[0].truth.len(), 256);
    }

    #[test]
    fn standard_sources_build() {
        let cfg = SynthConfig::default();
        let target = cfg.target_space().unwrap();
        for s in &cfg.sources {
            SyntheticSource::new(s.clone(), &target).unwrap();
        }
    }

    #[test]
    fn missing_surrogate_is_config_error() {
        let cfg = SynthConfig::default();
        let target = cfg.target_space().unwrap();
        let mut urban = cfg.sources[1].clone();
        urban.surrogates.clear();
        assert!(matches!(SyntheticSource::new(urban, &target), Err(Error::Config(_))));
    }

    #[test]
    fn cold_noiseless_source_is_correct() {
        let cfg = small();
        let target = cfg.target_space().unwrap();
        let mut s = cfg.sources[0].clone();
        s.logit_noise = 0.0;
        let src = SyntheticSource::new(s, &target).unwrap();
        let scene = SceneGenerator::new(&cfg, 1).unwrap().scene(0);
        let p = src.predict_with_temperature(&scene, cfg.region_size, 0.01);
        let conv = convert_distribution(&p, &src.mapping).unwrap();
        assert_eq!(hard_label(&conv.map), scene.truth);
        assert!(p.tensor().data().iter().all(|&v| !(0.001..=0.999).contains(&v)));
    }

    #[test]
    fn source_without_grass_never_emits_grass() {
        let cfg = small();
        let target = cfg.target_space().unwrap();
        let src = SyntheticSource::new(cfg.sources[1].clone(), &target).unwrap();
        let grass = target.index_of("grass").unwrap() as u16;
        for scene in generate_dataset(&cfg, 3, 4).unwrap() {
            let conv = convert_distribution(&src.predict(&scene, cfg.region_size), &src.mapping).unwrap();
            assert!(hard_label(&conv.map).labels().iter().all(|&l| l != grass));
            assert!(conv.map.tensor().pixels().all(|px| px[grass as usize] == 0.0));
        }
    }

    #[test]
    fn derive_seed_separates_streams() {
        assert_ne!(derive_seed(1, 2, 3), derive_seed(1, 3, 2));
        assert_ne!(derive_seed(0, 0, 0), derive_seed(0, 0, 1));
    }
}
