use plfuse::config::PipelineConfig;
use plfuse::fusion::SoftLabelMap;
use plfuse::gap::{SimilarityWeights, WeightMode};
use plfuse::loss::{LossConfig, PixelTarget};
use plfuse::model::{train, ModelDims, ToyModel, TrainConfig, TrainSample};
use plfuse::pipeline::{fuse_image, training_setup, Scenario};
use plfuse::synth::{SceneGenerator, SynthConfig, SyntheticScene};
use plfuse::{Error, ProbabilityMap, Tensor3};

fn one_hot_sample(scene: &SyntheticScene, classes: usize) -> TrainSample {
    let (h, w) = (scene.truth.height(), scene.truth.width());
    let y = ProbabilityMap::from_pixels(h, w, classes, |i, out| {
        out.iter_mut().for_each(|v| *v = 0.0);
        out[scene.truth.labels()[i] as usize] = 1.0;
    })
    .unwrap();
    let soft = SoftLabelMap::build(
        &[y],
        &["truth".to_owned()],
        &SimilarityWeights::uniform(1, WeightMode::SumToOne).unwrap(),
        1.0,
        1.0,
    )
    .unwrap();
    TrainSample {
        features: scene.features.clone(),
        labels: soft,
    }
}

fn separable() -> SynthConfig {
    SynthConfig {
        class_separation: 6.0,
        feature_noise: 0.3,
        scene_shift: 0.0,
        ..SynthConfig::default()
    }
}

fn accuracy(model: &ToyModel, scenes: &[SyntheticScene], branch_w: f64) -> f64 {
    let (mut hit, mut n) = (0usize, 0usize);
    for s in scenes {
        let p = model.predict(&s.features, branch_w).unwrap();
        hit += p.labels().iter().zip(s.truth.labels()).filter(|(a, b)| a == b).count();
        n += p.len();
    }
    hit as f64 / n as f64
}

#[test]
fn clean_labels_on_separable_data() {
    let cfg = separable();
    let gen = SceneGenerator::new(&cfg, 4).unwrap();
    let train_scenes = gen.scenes(0, 6);
    let test_scenes = gen.scenes(6, 3);
    let classes = cfg.target_classes.len();
    let samples: Vec<_> = train_scenes.iter().map(|s| one_hot_sample(s, classes)).collect();
    let dims = ModelDims {
        input: cfg.feature_dim,
        hidden: 16,
        classes,
    };
    let loss = LossConfig::default();
    let tc = TrainConfig {
        epochs: 10,
        ..TrainConfig::default()
    };
    let out = train(ToyModel::new(dims, 1).unwrap(), &samples, &tc, &loss).unwrap();
    let acc = accuracy(&out.model, &test_scenes, loss.branch_w);
    assert!(acc >= 0.99, "held-out accuracy {acc}");
}

#[test]
fn zero_epochs_is_identity() {
    let cfg = separable();
    let scenes = SceneGenerator::new(&cfg, 0).unwrap().scenes(0, 2);
    let samples: Vec<_> = scenes.iter().map(|s| one_hot_sample(s, 4)).collect();
    let dims = ModelDims {
        input: cfg.feature_dim,
        hidden: 8,
        classes: 4,
    };
    let model = ToyModel::new(dims, 3).unwrap();
    let tc = TrainConfig {
        epochs: 0,
        ..TrainConfig::default()
    };
    let out = train(model.clone(), &samples, &tc, &LossConfig::default()).unwrap();
    assert_eq!(out.model, model);
    assert!(out.log.is_empty());
}

#[test]
fn same_seed_same_model() {
    let mut cfg = PipelineConfig::default();
    cfg.train.epochs = 2;
    let a = plfuse::pipeline::run(&cfg).unwrap();
    let b = plfuse::pipeline::run(&cfg).unwrap();
    assert_eq!(a.model, b.model);
    assert_eq!(a.log, b.log);
    cfg.seed = 1;
    let c = plfuse::pipeline::run(&cfg).unwrap();
    assert_ne!(a.model, c.model);
}

/// Held-out batch: the test scenes with their own fused labels.
fn held_out(scenario: &Scenario, cfg: &PipelineConfig) -> (Vec<f64>, Vec<PixelTarget>) {
    let names = scenario.source_names();
    let mappings = scenario.mappings();
    let (mut inputs, mut targets) = (Vec::new(), Vec::new());
    for scene in &scenario.test {
        let preds = scenario.predict_all(scene);
        let fused = fuse_image(&preds, &names, &mappings, &cfg.fusion, cfg.loss.lambda_scale).unwrap();
        let labels = fused.soft.hard_labels();
        for i in 0..scene.features.pixel_count() {
            inputs.extend(scene.features.pixel_f64(i));
            targets.push(PixelTarget {
                label: labels.labels()[i] as usize,
                weight: fused.soft.entropy_weight.data()[i] as f64,
            });
        }
    }
    (inputs, targets)
}

#[test]
fn held_out_loss_decreases_over_first_epoch() {
    for lr in [2e-2, 5e-3] {
        let mut cfg = PipelineConfig::default();
        cfg.train.lr = lr;
        cfg.train.lr_min = lr / 10.0;
        cfg.train.epochs = 1;
        let scenario = Scenario::generate(&cfg.scenario, cfg.seed).unwrap();
        let (inputs, targets) = held_out(&scenario, &cfg);
        let (model, _) = training_setup(&cfg).unwrap();
        let before = model.batch_loss(&inputs, &targets, &cfg.loss).unwrap().all;
        let trained = plfuse::pipeline::run_on(&scenario, &cfg).unwrap().model;
        let after = trained.batch_loss(&inputs, &targets, &cfg.loss).unwrap().all;
        assert!(after < before, "lr {lr}: held-out loss {before} -> {after}");
    }
}

#[test]
fn non_finite_features_rejected() {
    assert!(matches!(
        Tensor3::new(1, 1, 2, vec![f32::NAN, 0.0]),
        Err(Error::NonFinite(_))
    ));
}
