use kinevae_core::model::{init_params, ModelConfig, ModelParams};
use kinevae_core::objective::{batch_loss, gradients, Batch, BatchNoise, ObjectiveConfig};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn micro() -> ModelConfig {
    ModelConfig {
        input_dim: 6,
        seq_len: 3,
        latent_dim: 2,
        hidden_dim: 3,
        num_recurrent_layers: 2,
        classifier_hidden: 4,
        classifier_layers: 2,
        num_classes: 3,
        sigma_sq: 0.5,
    }
}

fn perturbed(params: &ModelParams, rng: &mut ChaCha8Rng) -> ModelParams {
    // Move away from the initialisation so biases and ReLUs are generic.
    let mut p = params.clone();
    let mut flat = p.to_flat();
    for v in &mut flat {
        *v += rng.random_range(-0.3..0.3);
    }
    p.set_flat(&flat);
    p
}

fn windows(n: usize, c: &ModelConfig, rng: &mut ChaCha8Rng) -> Vec<Array2<f64>> {
    (0..n)
        .map(|_| Array2::from_shape_fn((c.seq_len, c.input_dim), |_| rng.random_range(0.0..1.0)))
        .collect()
}

fn check(labeled: usize, unlabeled: usize, alpha: f64, seed: u64) -> f64 {
    let c = micro();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = perturbed(&init_params(&c, seed).unwrap(), &mut rng);
    let xs = windows(labeled + unlabeled, &c, &mut rng);
    let batch = Batch {
        labeled: xs[..labeled]
            .iter()
            .enumerate()
            .map(|(i, x)| (x.view(), i % 3))
            .collect(),
        unlabeled: xs[labeled..].iter().map(|x| x.view()).collect(),
    };
    let objective = ObjectiveConfig {
        alpha,
        prior_pi: vec![0.5, 0.3, 0.2],
        mc_samples: 2,
    };
    let noise = BatchNoise::draw(&mut rng, labeled, unlabeled, 3, 2, c.latent_dim);
    let analytic = gradients(&params, &batch, &noise, &objective).unwrap().grads.to_flat();

    let base = params.to_flat();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let i = rng.random_range(0..base.len());
        let eval = |delta: f64| {
            let mut p = params.clone();
            let mut flat = base.clone();
            flat[i] += delta;
            p.set_flat(&flat);
            batch_loss(&p, &batch, &noise, &objective).unwrap().0
        };
        let numeric = (eval(h) - eval(-h)) / (2.0 * h);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    worst
}

#[test]
fn all_three_loss_paths() {
    let worst = check(2, 2, 0.7, 11);
    assert!(worst < 1e-4, "max relative error {worst:e}");
}

#[test]
fn labeled_only_and_classifier_only() {
    assert!(check(3, 0, 0.0, 12) < 1e-4);
    assert!(check(3, 0, 2.0, 13) < 1e-4);
}

#[test]
fn unlabeled_only() {
    assert!(check(0, 3, 0.5, 14) < 1e-4);
}
