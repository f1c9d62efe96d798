//! In-memory orchestration: scenario generation, gap scoring, fusion,
//! training, evaluation and the two-axis ablation.

use serde::Serialize;

use crate::config::{FusionConfig, PipelineConfig};
use crate::error::{Error, Result};
use crate::fusion::{unanimity_labels, SoftLabelMap};
use crate::gap::{domain_gap, similarity_weights, GapScore, SimilarityWeights};
use crate::labels::{convert_distribution, LabelMapping, LabelSpace};
use crate::metrics::{ConfusionMatrix, IouReport};
use crate::model::{train, ModelDims, StepLog, ToyModel, TrainSample};
use crate::par;
use crate::synth::{
    class_histogram, derive_seed, SceneGenerator, SynthConfig, SyntheticScene, SyntheticSource,
};
use crate::tensor::{ProbabilityMap, Tensor3};

const STREAM_MODEL: u64 = 101;
const STREAM_SHUFFLE: u64 = 102;

/// A generated target domain with its source predictors.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub seed: u64,
    pub config: SynthConfig,
    pub target: LabelSpace,
    pub sources: Vec<SyntheticSource>,
    pub train: Vec<SyntheticScene>,
    pub test: Vec<SyntheticScene>,
}

impl Scenario {
    pub fn generate(cfg: &SynthConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let target = cfg.target_space()?;
        if cfg.sources.is_empty() {
            return Err(Error::Config("scenario needs at least one source".into()));
        }
        let sources = cfg
            .sources
            .iter()
            .map(|s| SyntheticSource::new(s.clone(), &target))
            .collect::<Result<Vec<_>>>()?;
        for (i, s) in sources.iter().enumerate() {
            if sources[..i].iter().any(|o| o.name() == s.name()) {
                return Err(Error::Config(format!("duplicate source name {:?}", s.name())));
            }
        }
        let gen = SceneGenerator::new(cfg, seed)?;
        let train = gen.scenes(0, cfg.train_scenes);
        let test = gen.scenes(cfg.train_scenes as u64, cfg.test_scenes);
        let all: Vec<SyntheticScene> = train.iter().chain(&test).cloned().collect();
        let hist = class_histogram(&all, target.len());
        for (c, &n) in hist.iter().enumerate() {
            if n == 0 && cfg.proportions[c] > 0.0 {
                return Err(Error::Config(format!(
                    "class {:?} never appears in the generated scenes; add scenes or enlarge them",
                    target.names()[c]
                )));
            }
        }
        Ok(Self {
            seed,
            config: cfg.clone(),
            target,
            sources,
            train,
            test,
        })
    }

    pub fn source_names(&self) -> Vec<String> {
        self.sources.iter().map(|s| s.name().to_owned()).collect()
    }

    pub fn mappings(&self) -> Vec<LabelMapping> {
        self.sources.iter().map(|s| s.mapping.clone()).collect()
    }

    /// Every source's prediction on `scene`, in source label spaces.
    pub fn predict_all(&self, scene: &SyntheticScene) -> Vec<ProbabilityMap> {
        par::map_slice(&self.sources, |s| s.predict(scene, self.config.region_size))
    }
}

/// Gap score of each source prediction, normalized by its own class count.
pub fn gap_scores(preds: &[ProbabilityMap], names: &[String]) -> Vec<GapScore> {
    preds
        .iter()
        .zip(names)
        .map(|(p, n)| domain_gap(n, p))
        .collect()
}

/// Fusion weights: inverse gaps, or equal weights when similarity
/// weighting is off.
pub fn fusion_weights(gaps: &[GapScore], fusion: &FusionConfig) -> Result<SimilarityWeights> {
    if fusion.similarity_weighting {
        similarity_weights(gaps, fusion.weight_mode, fusion.epsilon)
    } else {
        SimilarityWeights::uniform(gaps.len(), fusion.weight_mode)
    }
}

#[derive(Debug, Clone)]
pub struct FusedImage {
    pub gaps: Vec<GapScore>,
    pub converted: Vec<ProbabilityMap>,
    /// Degenerate pixels replaced by uniform during conversion, per source.
    pub degenerate: Vec<usize>,
    pub soft: SoftLabelMap,
}

/// Fuses precomputed source weights; label-entropy weights are all ones
/// when entropy weighting is off.
pub fn fuse_with_weights(
    preds: &[ProbabilityMap],
    names: &[String],
    mappings: &[LabelMapping],
    weights: &SimilarityWeights,
    fusion: &FusionConfig,
    lambda_scale: f64,
) -> Result<(Vec<ProbabilityMap>, Vec<usize>, SoftLabelMap)> {
    if preds.len() != names.len() || preds.len() != mappings.len() {
        return Err(Error::shape(
            "fuse_image",
            preds.len(),
            (names.len(), mappings.len()),
        ));
    }
    let mut converted = Vec::with_capacity(preds.len());
    let mut degenerate = Vec::with_capacity(preds.len());
    for (p, m) in preds.iter().zip(mappings) {
        let c = convert_distribution(p, m)?;
        converted.push(c.map);
        degenerate.push(c.degenerate_pixels);
    }
    let mut soft = SoftLabelMap::build(&converted, names, weights, lambda_scale, fusion.temperature)?;
    if !fusion.entropy_weighting {
        let w = &soft.entropy_weight;
        soft.entropy_weight = Tensor3::new(w.height(), w.width(), 1, vec![1.0; w.pixel_count()])?;
    }
    Ok((converted, degenerate, soft))
}

/// Gap scores, weights, label conversion and fusion for one target image.
pub fn fuse_image(
    preds: &[ProbabilityMap],
    names: &[String],
    mappings: &[LabelMapping],
    fusion: &FusionConfig,
    lambda_scale: f64,
) -> Result<FusedImage> {
    let gaps = gap_scores(preds, names);
    let weights = fusion_weights(&gaps, fusion)?;
    let (converted, degenerate, soft) =
        fuse_with_weights(preds, names, mappings, &weights, fusion, lambda_scale)?;
    Ok(FusedImage {
        gaps,
        converted,
        degenerate,
        soft,
    })
}

/// Outcome of one full in-memory run.
#[derive(Debug, Clone)]
pub struct RunResult {
    /// Fused pseudo-label argmax against training-split truth.
    pub pseudo: ConfusionMatrix,
    /// Unanimity labels against training-split truth.
    pub unanimity: ConfusionMatrix,
    /// Trained model on the test split.
    pub model_eval: ConfusionMatrix,
    pub model: ToyModel,
    pub log: Vec<StepLog>,
}

impl RunResult {
    pub fn model_miou(&self) -> f64 {
        self.model_eval.iou().miou
    }
}

/// Model dimensions for a scenario and config.
pub fn model_dims(cfg: &PipelineConfig) -> ModelDims {
    ModelDims {
        input: cfg.scenario.feature_dim,
        hidden: cfg.train.hidden,
        classes: cfg.scenario.target_classes.len(),
    }
}

/// Seeded model initialization and the training config with its shuffle
/// seed derived from the run seed.
pub fn training_setup(cfg: &PipelineConfig) -> Result<(ToyModel, crate::model::TrainConfig)> {
    let model = ToyModel::new(
        model_dims(cfg),
        derive_seed(cfg.seed, STREAM_MODEL, cfg.train.seed),
    )?;
    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = derive_seed(cfg.seed, STREAM_SHUFFLE, cfg.train.seed);
    Ok((model, train_cfg))
}

/// Fuses every training scene of `scenario`.
pub fn fuse_scenario(scenario: &Scenario, cfg: &PipelineConfig) -> Result<Vec<FusedImage>> {
    let names = scenario.source_names();
    let mappings = scenario.mappings();
    scenario
        .train
        .iter()
        .map(|scene| {
            let preds = scenario.predict_all(scene);
            fuse_image(&preds, &names, &mappings, &cfg.fusion, cfg.loss.lambda_scale)
        })
        .collect()
}

/// Fuse, train and evaluate on an already generated scenario.
pub fn run_on(scenario: &Scenario, cfg: &PipelineConfig) -> Result<RunResult> {
    cfg.validate()?;
    let classes = scenario.target.len();
    let fused = fuse_scenario(scenario, cfg)?;
    let mut pseudo = ConfusionMatrix::new(classes);
    let mut unanimity = ConfusionMatrix::new(classes);
    let mut samples = Vec::with_capacity(fused.len());
    for (scene, f) in scenario.train.iter().zip(fused) {
        pseudo.accumulate(&f.soft.hard_labels(), &scene.truth)?;
        unanimity.accumulate(&unanimity_labels(&f.converted)?, &scene.truth)?;
        samples.push(TrainSample {
            features: scene.features.clone(),
            labels: f.soft,
        });
    }
    let (model, train_cfg) = training_setup(cfg)?;
    let outcome = train(model, &samples, &train_cfg, &cfg.loss)?;
    let mut model_eval = ConfusionMatrix::new(classes);
    for scene in &scenario.test {
        let pred = outcome.model.predict(&scene.features, cfg.loss.branch_w)?;
        model_eval.accumulate(&pred, &scene.truth)?;
    }
    Ok(RunResult {
        pseudo,
        unanimity,
        model_eval,
        model: outcome.model,
        log: outcome.log,
    })
}

/// Generates the scenario for `cfg.seed` and runs the pipeline on it.
pub fn run(cfg: &PipelineConfig) -> Result<RunResult> {
    let scenario = Scenario::generate(&cfg.scenario, cfg.seed)?;
    run_on(&scenario, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub similarity: bool,
    pub entropy_weight: bool,
    /// Trained-model mIoU on the test split, per seed.
    pub miou: Vec<f64>,
    pub mean_miou: f64,
    /// Pseudo-label mIoU on the training split, per seed.
    pub pseudo_miou: Vec<f64>,
    pub mean_pseudo_miou: f64,
}

/// The four on/off combinations of similarity weighting and label-entropy
/// weighting, in the order (off, off), (off, on), (on, off), (on, on).
pub const ABLATION_GRID: [(bool, bool); 4] =
    [(false, false), (false, true), (true, false), (true, true)];

pub fn ablate(cfg: &PipelineConfig, seeds: &[u64]) -> Result<Vec<AblationRow>> {
    if seeds.is_empty() {
        return Err(Error::Empty("seed list"));
    }
    let mut rows: Vec<AblationRow> = ABLATION_GRID
        .iter()
        .map(|&(similarity, entropy_weight)| AblationRow {
            similarity,
            entropy_weight,
            miou: Vec::new(),
            mean_miou: 0.0,
            pseudo_miou: Vec::new(),
            mean_pseudo_miou: 0.0,
        })
        .collect();
    for &seed in seeds {
        let scenario = Scenario::generate(&cfg.scenario, seed)?;
        for row in rows.iter_mut() {
            let mut variant = cfg.clone();
            variant.seed = seed;
            variant.fusion.similarity_weighting = row.similarity;
            variant.fusion.entropy_weighting = row.entropy_weight;
            let r = run_on(&scenario, &variant)?;
            row.miou.push(r.model_eval.iou().miou);
            row.pseudo_miou.push(r.pseudo.iou().miou);
        }
    }
    for row in rows.iter_mut() {
        row.mean_miou = row.miou.iter().sum::<f64>() / row.miou.len() as f64;
        row.mean_pseudo_miou = row.pseudo_miou.iter().sum::<f64>() / row.pseudo_miou.len() as f64;
    }
    Ok(rows)
}

/// Plain-text rendering of the ablation rows.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mark = |b: bool| if b { "yes" } else { "-" };
    let mut out = String::from("label entropy weight | domain similarity | mIoU (model) | mIoU (pseudo)\n");
    for r in rows {
        out.push_str(&format!(
            "{:>20} | {:>17} | {:>12.2} | {:>13.2}\n",
            mark(r.entropy_weight),
            mark(r.similarity),
            100.0 * r.mean_miou,
            100.0 * r.mean_pseudo_miou
        ));
    }
    out
}

/// Test-split IoU report for a trained model.
pub fn evaluate_model(model: &ToyModel, scenes: &[SyntheticScene], branch_w: f64, classes: usize) -> Result<IouReport> {
    let mut cm = ConfusionMatrix::new(classes);
    for s in scenes {
        cm.accumulate(&model.predict(&s.features, branch_w)?, &s.truth)?;
    }
    Ok(cm.iou())
}
