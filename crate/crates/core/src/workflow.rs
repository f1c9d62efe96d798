//! File-level stages behind the command-line tool.
//!
//! Each stage reads its inputs, writes every output into a staging
//! directory next to the destination and moves the files into place only
//! after all of them were written, so a failing stage leaves nothing
//! behind.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::fusion::{entropy_weight_map, unanimity_labels, SoftLabelMap};
use crate::gap::SimilarityWeights;
use crate::io::{
    encode_gray_pgm, encode_label_ppm, read_json, read_labels, read_predictions,
    read_probability, read_tensor, write_atomic, write_json, write_labels, write_tensor,
};
use crate::labels::{LabelMapping, LabelSpace};
use crate::metrics::{ConfusionMatrix, IouReport};
use crate::model::{train as train_model, ModelDims, StepLog, TrainSample};
use crate::pipeline::{
    ablate as run_ablation, fuse_with_weights, fusion_weights, gap_scores, training_setup,
    AblationRow, Scenario,
};
use crate::tensor::{HardLabelMap, ProbabilityMap};

pub const DATASET_MANIFEST: &str = "dataset.json";
pub const FUSION_SUMMARY: &str = "fusion.json";
pub const CHECKPOINT_MANIFEST: &str = "checkpoint.json";
pub const TRAIN_LOG: &str = "train_log.json";
pub const PREDICTION_SUFFIX: &str = ".pred.plf";
pub const FUSED_SUFFIX: &str = ".yhat.plf";

/// Output directory under construction.
pub struct Staging {
    dir: PathBuf,
    dest: PathBuf,
    files: Vec<String>,
    committed: bool,
}

impl Staging {
    pub fn new(dest: &Path) -> Result<Self> {
        let mut name = dest
            .file_name()
            .map(|n| n.to_os_string())
            .ok_or_else(|| Error::InvalidArgument(format!("{}: not a directory path", dest.display())))?;
        name.push(format!(".staging-{}", std::process::id()));
        let dir = dest.with_file_name(name);
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self {
            dir,
            dest: dest.to_owned(),
            files: Vec::new(),
            committed: false,
        })
    }

    /// Path for a new file in the staging directory.
    pub fn file(&mut self, name: &str) -> PathBuf {
        self.files.push(name.to_owned());
        self.dir.join(name)
    }

    pub fn commit(mut self) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(&self.dest).map_err(|e| Error::io(&self.dest, e))?;
        let mut out = Vec::with_capacity(self.files.len());
        for name in &self.files {
            let target = self.dest.join(name);
            let from = self.dir.join(name);
            fs::rename(&from, &target).map_err(|e| Error::io(&target, e))?;
            out.push(target);
        }
        self.committed = true;
        let _ = fs::remove_dir_all(&self.dir);
        Ok(out)
    }
}

impl Drop for Staging {
    fn drop(&mut self) {
        if !self.committed {
            let _ = fs::remove_dir_all(&self.dir);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceEntry {
    pub name: String,
    pub classes: Vec<String>,
    pub mapping: String,
}

/// Index of a materialized synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub config_hash: String,
    pub target_space: Vec<String>,
    pub feature_dim: usize,
    pub sources: Vec<SourceEntry>,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

impl DatasetManifest {
    pub fn load(data: &Path) -> Result<Self> {
        read_json(&data.join(DATASET_MANIFEST))
    }

    pub fn target(&self) -> Result<LabelSpace> {
        LabelSpace::new(self.target_space.clone())
    }

    pub fn split(&self, name: &str) -> Result<&[String]> {
        match name {
            "train" => Ok(&self.train),
            "test" => Ok(&self.test),
            other => Err(Error::InvalidArgument(format!(
                "unknown split {other:?}; expected train or test"
            ))),
        }
    }

    pub fn source_names(&self) -> Vec<String> {
        self.sources.iter().map(|s| s.name.clone()).collect()
    }
}

pub fn features_file(id: &str) -> String {
    format!("{id}.features.plf")
}

pub fn truth_file(id: &str) -> String {
    format!("{id}.truth.plf")
}

pub fn source_file(id: &str, source: &str) -> String {
    format!("{id}.{source}.plf")
}

/// Writes features, truth, source predictions and mappings for both
/// splits of the configured scenario.
pub fn synth(cfg: &PipelineConfig, out: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    let scenario = Scenario::generate(&cfg.scenario, cfg.seed)?;
    let mut stage = Staging::new(out)?;
    let mut sources = Vec::new();
    for s in &scenario.sources {
        let name = format!("mapping_{}.json", s.name());
        let mut text = s.mapping.to_json_string();
        text.push('\n');
        write_atomic(&stage.file(&name), text.as_bytes())?;
        sources.push(SourceEntry {
            name: s.name().to_owned(),
            classes: s.space.names().to_vec(),
            mapping: name,
        });
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (split, scenes, ids) in [
        ("train", &scenario.train, &mut train),
        ("test", &scenario.test, &mut test),
    ] {
        for (k, scene) in scenes.iter().enumerate() {
            let id = format!("{split}_{k:03}");
            write_tensor(&stage.file(&features_file(&id)), &scene.features)?;
            write_labels(&stage.file(&truth_file(&id)), &scene.truth)?;
            for (src, pred) in scenario.sources.iter().zip(scenario.predict_all(scene)) {
                write_tensor(&stage.file(&source_file(&id, src.name())), pred.tensor())?;
            }
            ids.push(id);
        }
    }
    let manifest = DatasetManifest {
        seed: cfg.seed,
        config_hash: cfg.hash(),
        target_space: scenario.target.names().to_vec(),
        feature_dim: cfg.scenario.feature_dim,
        sources,
        train,
        test,
    };
    write_json(&stage.file(DATASET_MANIFEST), &manifest)?;
    stage.commit()?;
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceScore {
    pub source: String,
    #[serde(rename = "G")]
    pub gap: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageGaps {
    pub image: String,
    pub scores: Vec<SourceScore>,
}

fn read_source_predictions(data: &Path, manifest: &DatasetManifest, id: &str) -> Result<Vec<ProbabilityMap>> {
    manifest
        .sources
        .iter()
        .map(|s| {
            let path = data.join(source_file(id, &s.name));
            let p = read_probability(&path)?;
            if p.classes() != s.classes.len() {
                return Err(Error::Format {
                    path,
                    message: format!(
                        "expected {} classes for source {}, found {}",
                        s.classes.len(),
                        s.name,
                        p.classes()
                    ),
                });
            }
            Ok(p)
        })
        .collect()
}

/// Gap scores and fusion weights of every image in `split`.
pub fn gap(cfg: &PipelineConfig, data: &Path, split: &str, out: &Path) -> Result<Vec<ImageGaps>> {
    cfg.validate()?;
    let manifest = DatasetManifest::load(data)?;
    let names = manifest.source_names();
    let mut report = Vec::new();
    for id in manifest.split(split)? {
        let preds = read_source_predictions(data, &manifest, id)?;
        let gaps = gap_scores(&preds, &names);
        let weights = fusion_weights(&gaps, &cfg.fusion)?;
        report.push(ImageGaps {
            image: id.clone(),
            scores: gaps
                .iter()
                .zip(&weights.weights)
                .map(|(g, &w)| SourceScore {
                    source: g.source.clone(),
                    gap: g.gap,
                    weight: w,
                })
                .collect(),
        });
    }
    write_json(out, &report)?;
    Ok(report)
}

/// Mappings for every source: config overrides first, dataset files otherwise.
pub fn load_mappings(cfg: &PipelineConfig, data: &Path, manifest: &DatasetManifest) -> Result<Vec<LabelMapping>> {
    let target = manifest.target()?;
    manifest
        .sources
        .iter()
        .map(|s| {
            let path = cfg
                .mappings
                .get(&s.name)
                .cloned()
                .unwrap_or_else(|| data.join(&s.mapping));
            let m = LabelMapping::load(&path)?;
            if m.target() != &target || m.source().names() != s.classes.as_slice() {
                return Err(Error::Format {
                    path,
                    message: format!("mapping does not match the label spaces of source {}", s.name),
                });
            }
            Ok(m)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedEntry {
    pub image: String,
    pub provenance: Vec<SourceWeight>,
    pub degenerate_pixels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceWeight {
    pub source: String,
    pub weight: f64,
}

/// Fuses every image listed in the gap report, using its weights.
pub fn fuse(
    cfg: &PipelineConfig,
    data: &Path,
    gap_report: &Path,
    out: &Path,
    unanimity: bool,
) -> Result<Vec<FusedEntry>> {
    cfg.validate()?;
    let manifest = DatasetManifest::load(data)?;
    let names = manifest.source_names();
    let mappings = load_mappings(cfg, data, &manifest)?;
    let report: Vec<ImageGaps> = read_json(gap_report)?;
    let mut stage = Staging::new(out)?;
    let mut summary = Vec::with_capacity(report.len());
    for entry in &report {
        let listed: Vec<&str> = entry.scores.iter().map(|s| s.source.as_str()).collect();
        if listed != names.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(Error::Format {
                path: gap_report.to_owned(),
                message: format!("sources for {} do not match the dataset", entry.image),
            });
        }
        let weights = SimilarityWeights {
            weights: entry.scores.iter().map(|s| s.weight).collect(),
            mode: cfg.fusion.weight_mode,
        };
        let preds = read_source_predictions(data, &manifest, &entry.image)?;
        let (converted, degenerate, soft) = fuse_with_weights(
            &preds,
            &names,
            &mappings,
            &weights,
            &cfg.fusion,
            cfg.loss.lambda_scale,
        )?;
        let id = &entry.image;
        write_tensor(&stage.file(&format!("{id}{FUSED_SUFFIX}")), soft.y_hat.tensor())?;
        write_tensor(&stage.file(&format!("{id}.weight.plf")), &soft.entropy_weight)?;
        write_atomic(
            &stage.file(&format!("{id}.argmax.ppm")),
            &encode_label_ppm(&soft.hard_labels()),
        )?;
        let inverse_entropy = entropy_weight_map(&soft.y_hat, cfg.loss.lambda_scale)?;
        write_atomic(
            &stage.file(&format!("{id}.inv_entropy.pgm")),
            &encode_gray_pgm(&inverse_entropy),
        )?;
        if unanimity {
            write_labels(&stage.file(&format!("{id}.unanimity.plf")), &unanimity_labels(&converted)?)?;
        }
        summary.push(FusedEntry {
            image: id.clone(),
            provenance: soft
                .provenance
                .iter()
                .map(|(s, w)| SourceWeight {
                    source: s.clone(),
                    weight: *w,
                })
                .collect(),
            degenerate_pixels: degenerate,
        });
    }
    write_json(&stage.file(FUSION_SUMMARY), &summary)?;
    stage.commit()?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub step: usize,
    pub config_hash: String,
    pub dims: ModelDims,
    pub branch_w: f64,
    pub files: Vec<String>,
}

/// Trains on the training split with fused labels from `labels` and writes
/// the checkpoint, the loss log and test-split predictions.
pub fn train(cfg: &PipelineConfig, data: &Path, labels: &Path, out: &Path) -> Result<CheckpointManifest> {
    cfg.validate()?;
    let manifest = DatasetManifest::load(data)?;
    let classes = manifest.target_space.len();
    if manifest.feature_dim != cfg.scenario.feature_dim || classes != cfg.scenario.target_classes.len() {
        return Err(Error::Config(format!(
            "dataset has {} features and {classes} classes; config expects {} and {}",
            manifest.feature_dim,
            cfg.scenario.feature_dim,
            cfg.scenario.target_classes.len()
        )));
    }
    let mut samples = Vec::with_capacity(manifest.train.len());
    for id in &manifest.train {
        let features = read_tensor(&data.join(features_file(id)))?;
        let y_path = labels.join(format!("{id}{FUSED_SUFFIX}"));
        let y_hat = read_probability(&y_path)?;
        let weight = read_tensor(&labels.join(format!("{id}.weight.plf")))?;
        if y_hat.classes() != classes {
            return Err(Error::Format {
                path: y_path,
                message: format!("expected {classes} classes, found {}", y_hat.classes()),
            });
        }
        samples.push(TrainSample {
            features,
            labels: SoftLabelMap {
                y_hat,
                entropy_weight: weight,
                provenance: Vec::new(),
            },
        });
    }
    let (model, train_cfg) = training_setup(cfg)?;
    let outcome = train_model(model, &samples, &train_cfg, &cfg.loss)?;
    let mut stage = Staging::new(out)?;
    let mut files = vec!["model.plf".to_owned(), "encoder.plf".to_owned()];
    outcome.model.to_container().write(&stage.file("model.plf"))?;
    outcome
        .encoder
        .model()
        .to_container()
        .write(&stage.file("encoder.plf"))?;
    if let Some(bank) = &outcome.bank {
        let (eta, state) = bank.to_containers();
        eta.write(&stage.file("prototypes.plf"))?;
        state.write(&stage.file("prototype_state.plf"))?;
        files.push("prototypes.plf".into());
        files.push("prototype_state.plf".into());
    }
    write_json(&stage.file(TRAIN_LOG), &outcome.log)?;
    for id in &manifest.test {
        let features = read_tensor(&data.join(features_file(id)))?;
        let pred = outcome.model.predict(&features, cfg.loss.branch_w)?;
        write_labels(&stage.file(&format!("{id}{PREDICTION_SUFFIX}")), &pred)?;
    }
    let checkpoint = CheckpointManifest {
        step: outcome.log.len(),
        config_hash: cfg.hash(),
        dims: outcome.model.dims(),
        branch_w: cfg.loss.branch_w,
        files,
    };
    write_json(&stage.file(CHECKPOINT_MANIFEST), &checkpoint)?;
    stage.commit()?;
    Ok(checkpoint)
}

/// Reads a training log written by `train`.
pub fn read_train_log(dir: &Path) -> Result<Vec<StepLog>> {
    read_json(&dir.join(TRAIN_LOG))
}

/// IoU of prediction files `<id><suffix>` in `pred` against the truth of
/// `split`. Probability maps are reduced by argmax.
pub fn eval(data: &Path, pred: &Path, split: &str, suffix: &str, out: Option<&Path>) -> Result<serde_json::Value> {
    let manifest = DatasetManifest::load(data)?;
    let classes = manifest.target_space.len();
    let mut cm = ConfusionMatrix::new(classes);
    for id in manifest.split(split)? {
        let truth: HardLabelMap = read_labels(&data.join(truth_file(id)), classes)?;
        let p = read_predictions(&pred.join(format!("{id}{suffix}")), classes)?;
        cm.accumulate(&p, &truth)?;
    }
    let report: IouReport = cm.iou();
    let json = report.to_json(&manifest.target_space);
    if let Some(path) = out {
        write_json(path, &json)?;
    }
    Ok(json)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

pub fn ablate(cfg: &PipelineConfig, seeds: &[u64], out: Option<&Path>) -> Result<AblationReport> {
    cfg.validate()?;
    let report = AblationReport {
        seeds: seeds.to_vec(),
        rows: run_ablation(cfg, seeds)?,
    };
    if let Some(path) = out {
        write_json(path, &report)?;
    }
    Ok(report)
}
