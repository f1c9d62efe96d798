//! Analytic gradients of the total loss against central finite differences.

use plfuse::loss::{loss_gradients, LossConfig, PixelTarget};
use plfuse::model::{ModelDims, ToyModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-4;
const TOLERANCE: f64 = 1e-5;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    norm(&diff) / norm(numeric).max(norm(analytic)).max(1e-8)
}

fn total(main: &[f64], aux: &[f64], classes: usize, targets: &[PixelTarget], cfg: &LossConfig) -> f64 {
    loss_gradients(main, aux, classes, targets, cfg).unwrap().0.all
}

fn numeric_grad(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + STEP;
            let up = f(&probe);
            probe[i] = x[i] - STEP;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * STEP)
        })
        .collect()
}

/// Loss settings cycled through by instance index.
fn sweep(i: usize) -> LossConfig {
    const ALPHA: [f64; 3] = [0.1, 0.0, 1.0];
    const BETA: [f64; 3] = [1.0, 0.0, 2.0];
    const LAMBDA_ENT: [f64; 3] = [0.1, 0.0, 1.0];
    const LAMBDA_KLD: [f64; 4] = [0.1, 1.0, 0.0, 3.0];
    const BRANCH_W: [f64; 2] = [0.5, 0.25];
    LossConfig {
        alpha: ALPHA[i % 3],
        beta: BETA[(i / 3) % 3],
        lambda_ent: LAMBDA_ENT[(i / 9) % 3],
        lambda_kld: LAMBDA_KLD[(i / 2) % 4],
        branch_w: BRANCH_W[(i / 5) % 2],
        ..LossConfig::default()
    }
}

fn random_instance(rng: &mut ChaCha8Rng, pixels: usize, classes: usize) -> (Vec<f64>, Vec<f64>, Vec<PixelTarget>) {
    let scale: f64 = rng.random_range(0.5..3.0);
    let main = (0..pixels * classes).map(|_| scale * rng.random_range(-1.0..1.0)).collect();
    let aux = (0..pixels * classes).map(|_| scale * rng.random_range(-1.0..1.0)).collect();
    let targets = (0..pixels)
        .map(|_| PixelTarget {
            label: rng.random_range(0..classes),
            weight: if rng.random_bool(0.1) { 0.0 } else { rng.random_range(0.05..1.0) },
        })
        .collect();
    (main, aux, targets)
}

#[test]
fn logit_gradients_match_finite_differences() {
    let mut worst: f64 = 0.0;
    let mut instances = 0;
    for i in 0..120 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + i as u64);
        let cfg = sweep(i);
        let classes = 2 + i % 5;
        let pixels = if i % 2 == 0 { 1 } else { 16 };
        let (main, aux, targets) = random_instance(&mut rng, pixels, classes);
        let (_, gm, ga) = loss_gradients(&main, &aux, classes, &targets, &cfg).unwrap();
        let nm = numeric_grad(&main, |m| total(m, &aux, classes, &targets, &cfg));
        let na = numeric_grad(&aux, |a| total(&main, a, classes, &targets, &cfg));
        let err_m = relative_error(&gm, &nm);
        let err_a = relative_error(&ga, &na);
        assert!(err_m < TOLERANCE, "instance {i}: main-branch error {err_m:e} with {cfg:?}");
        assert!(err_a < TOLERANCE, "instance {i}: aux-branch error {err_a:e} with {cfg:?}");
        worst = worst.max(err_m).max(err_a);
        instances += 1;
    }
    assert!(instances >= 100);
    eprintln!("worst relative error over {instances} instances: {worst:e}");
}

#[test]
fn confident_and_degenerate_pixels() {
    let cfg = LossConfig::default();
    // Saturated logits, a one-hot-like main branch and identical branches.
    let cases: [(&[f64], &[f64]); 3] = [
        (&[12.0, -3.0, 0.5], &[-4.0, 9.0, 1.0]),
        (&[0.0, 0.0, 0.0], &[0.0, 0.0, 0.0]),
        (&[1.5, -0.5, 2.0], &[1.5, -0.5, 2.0]),
    ];
    for (main, aux) in cases {
        for label in 0..3 {
            let t = [PixelTarget { label, weight: 0.7 }];
            let (_, gm, ga) = loss_gradients(main, aux, 3, &t, &cfg).unwrap();
            let nm = numeric_grad(main, |m| total(m, aux, 3, &t, &cfg));
            let na = numeric_grad(aux, |a| total(main, a, 3, &t, &cfg));
            assert!(relative_error(&gm, &nm) < TOLERANCE, "{main:?} {aux:?} {label}");
            assert!(relative_error(&ga, &na) < TOLERANCE, "{main:?} {aux:?} {label}");
        }
    }
}

#[test]
fn zero_weight_leaves_only_regularizer_gradient() {
    let main = [0.3, -1.2, 0.8];
    let aux = [-0.4, 0.1, 0.9];
    let t = [PixelTarget { label: 1, weight: 0.0 }];
    let cfg = LossConfig {
        lambda_ent: 0.0,
        lambda_kld: 0.0,
        ..LossConfig::default()
    };
    let (terms, gm, ga) = loss_gradients(&main, &aux, 3, &t, &cfg).unwrap();
    assert_eq!(terms.all, 0.0);
    assert!(gm.iter().chain(&ga).all(|&g| g == 0.0));
}

#[test]
fn parameter_gradients_match_finite_differences() {
    let dims = ModelDims {
        input: 5,
        hidden: 6,
        classes: 4,
    };
    for seed in 0..6u64 {
        let cfg = sweep(seed as usize * 7);
        let model = ToyModel::new(dims, seed).unwrap();
        // Larger weights than the initializer so the check is not dominated
        // by the near-linear regime.
        let params: Vec<f64> = model.params().iter().map(|p| p * 8.0).collect();
        let model = ToyModel::from_params(dims, params.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 50);
        let n = 12;
        let inputs: Vec<f64> = (0..n * dims.input).map(|_| rng.random_range(-2.0..2.0)).collect();
        let targets: Vec<PixelTarget> = (0..n)
            .map(|_| PixelTarget {
                label: rng.random_range(0..dims.classes),
                weight: rng.random_range(0.1..1.0),
            })
            .collect();
        let (_, grad) = model.batch_loss_grad(&inputs, &targets, &cfg).unwrap();
        let numeric = numeric_grad(&params, |p| {
            ToyModel::from_params(dims, p.to_vec())
                .unwrap()
                .batch_loss(&inputs, &targets, &cfg)
                .unwrap()
                .all
        });
        let err = relative_error(&grad, &numeric);
        assert!(err < TOLERANCE, "seed {seed}: parameter gradient error {err:e}");
    }
}
