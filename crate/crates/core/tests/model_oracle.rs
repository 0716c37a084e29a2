//! Batched forward passes against a scalar, loop-by-loop reference.

use kinevae_core::model::{init_params, ConditionalModel, Linear, LstmLayer, ModelConfig, ModelParams};
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn affine(l: &Linear, x: &[f64]) -> Vec<f64> {
    (0..l.weight.nrows())
        .map(|o| l.bias[o] + (0..x.len()).map(|i| l.weight[[o, i]] * x[i]).sum::<f64>())
        .collect()
}

/// Runs one layer over `inputs` (one vector per step) and returns every hidden state.
fn lstm(layer: &LstmLayer, inputs: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = layer.hidden_size();
    let mut h = vec![0.0; n];
    let mut c = vec![0.0; n];
    let mut out = Vec::new();
    for x in inputs {
        let mut a = vec![0.0; 4 * n];
        for (r, slot) in a.iter_mut().enumerate() {
            *slot = layer.bias[r]
                + (0..x.len()).map(|i| layer.w_input[[r, i]] * x[i]).sum::<f64>()
                + (0..n).map(|j| layer.w_hidden[[r, j]] * h[j]).sum::<f64>();
        }
        for k in 0..n {
            let (i, f, g, o) = (
                sigmoid(a[k]),
                sigmoid(a[n + k]),
                a[2 * n + k].tanh(),
                sigmoid(a[3 * n + k]),
            );
            c[k] = f * c[k] + i * g;
            h[k] = o * c[k].tanh();
        }
        out.push(h.clone());
    }
    out
}

fn stack(layers: &[LstmLayer], inputs: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    layers.iter().fold(inputs, |seq, l| lstm(l, &seq))
}

fn one_hot(y: usize, k: usize) -> Vec<f64> {
    (0..k).map(|i| if i == y { 1.0 } else { 0.0 }).collect()
}

fn reference_trunk(p: &ModelParams, x: &Array2<f64>) -> Vec<f64> {
    let seq = x.rows().into_iter().map(|r| r.to_vec()).collect();
    stack(&p.encoder, seq).pop().unwrap()
}

fn reference_encode(p: &ModelParams, x: &Array2<f64>, y: usize) -> (Vec<f64>, Vec<f64>) {
    let mut input = reference_trunk(p, x);
    input.extend(one_hot(y, p.config.num_classes));
    let lv = affine(&p.enc_log_var, &input)
        .into_iter()
        .map(|v| v.clamp(-10.0, 10.0))
        .collect();
    (affine(&p.enc_mean, &input), lv)
}

fn reference_classify(p: &ModelParams, x: &Array2<f64>) -> Vec<f64> {
    let mut act = reference_trunk(p, x);
    for (l, layer) in p.classifier.iter().enumerate() {
        act = affine(layer, &act);
        if l + 1 < p.classifier.len() {
            act.iter_mut().for_each(|v| *v = v.max(0.0));
        }
    }
    let m = act.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = act.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn reference_decode(p: &ModelParams, z: &[f64], y: usize) -> Vec<Vec<f64>> {
    let mut input = z.to_vec();
    input.extend(one_hot(y, p.config.num_classes));
    let seq = vec![input; p.config.seq_len];
    stack(&p.decoder, seq).iter().map(|h| affine(&p.dec_out, h)).collect()
}

fn micro() -> ModelConfig {
    ModelConfig {
        input_dim: 6,
        seq_len: 3,
        latent_dim: 2,
        hidden_dim: 4,
        num_recurrent_layers: 2,
        classifier_hidden: 5,
        classifier_layers: 1,
        num_classes: 3,
        sigma_sq: 1.0,
    }
}

fn perturbed(config: &ModelConfig, seed: u64) -> ModelParams {
    let mut p = init_params(config, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let mut flat = p.to_flat();
    flat.iter_mut().for_each(|v| *v += rng.random_range(-0.4..0.4));
    p.set_flat(&flat);
    p
}

fn close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol, "{x} vs {y}");
    }
}

#[test]
fn forward_passes_match_reference() {
    let config = micro();
    for seed in 0..5 {
        let p = perturbed(&config, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs: Vec<Array2<f64>> = (0..4)
            .map(|_| Array2::from_shape_fn((3, 6), |_| rng.random_range(-2.0..2.0)))
            .collect();
        let views: Vec<_> = xs.iter().map(|x| x.view()).collect();
        let classes = [0, 2, 1, 2];

        let batched = p.encode_batch(&views, &classes).unwrap();
        let probs = p.classify_batch(&views).unwrap();
        for (i, x) in xs.iter().enumerate() {
            let (m, lv) = reference_encode(&p, x, classes[i]);
            close(batched[i].mean.as_slice().unwrap(), &m, 1e-10);
            close(batched[i].log_var.as_slice().unwrap(), &lv, 1e-10);
            close(probs[i].0.as_slice().unwrap(), &reference_classify(&p, x), 1e-10);
            let single = p.encode(x.view(), classes[i]).unwrap();
            assert_eq!(single, batched[i]);
        }

        let zs: Vec<Vec<f64>> = (0..4)
            .map(|_| vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)])
            .collect();
        let refs: Vec<&[f64]> = zs.iter().map(|z| z.as_slice()).collect();
        let decoded = p.decode_batch(&refs, &classes).unwrap();
        for (i, z) in zs.iter().enumerate() {
            let expected = reference_decode(&p, z, classes[i]);
            for t in 0..3 {
                close(decoded[i].row(t).as_slice().unwrap(), &expected[t], 1e-10);
            }
        }
    }
}

#[test]
fn wrong_shapes_and_classes_are_rejected() {
    let p = perturbed(&micro(), 1);
    let bad = Array2::<f64>::zeros((4, 6));
    assert!(p.encode(bad.view(), 0).is_err());
    assert!(p.classify(bad.view()).is_err());
    let ok = Array2::<f64>::zeros((3, 6));
    assert!(p.encode(ok.view(), 3).is_err());
    assert!(p.decode(&[0.0], 0).is_err());
    assert!(p.decode(&[0.0, f64::NAN], 0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn shapes_follow_config(
        input_dim in 1usize..5,
        seq_len in 1usize..5,
        latent_dim in 1usize..4,
        hidden_dim in 1usize..5,
        layers in 1usize..3,
        classifier_layers in 0usize..3,
        num_classes in 2usize..5,
        seed in any::<u64>(),
    ) {
        let config = ModelConfig {
            input_dim,
            seq_len,
            latent_dim,
            hidden_dim,
            num_recurrent_layers: layers,
            classifier_hidden: 3,
            classifier_layers,
            num_classes,
            sigma_sq: 1.0,
        };
        let p = init_params(&config, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_fn((seq_len, input_dim), |_| rng.random_range(-3.0..3.0));
        let y = (seed % num_classes as u64) as usize;
        let q = p.encode(x.view(), y).unwrap();
        prop_assert_eq!(q.mean.len(), latent_dim);
        prop_assert_eq!(q.log_var.len(), latent_dim);
        let probs = p.classify(x.view()).unwrap();
        prop_assert_eq!(probs.0.len(), num_classes);
        prop_assert!((probs.0.sum() - 1.0).abs() < 1e-12);
        prop_assert!(probs.0.iter().all(|&v| v >= 0.0));
        let out = p.decode(q.mean.as_slice().unwrap(), y).unwrap();
        prop_assert_eq!(out.dim(), (seq_len, input_dim));
        prop_assert!(out.iter().all(|v| v.is_finite()));
    }
}
