use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ModelConfig, ModelError};

/// Affine map `y = x Wᵀ + b` with `W` shaped `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Array2::zeros((outputs, inputs)),
            bias: Array1::zeros(outputs),
        }
    }
}

/// One LSTM layer. Gate blocks are stacked `[input, forget, cell, output]`
/// along the rows of both weight matrices.
///
/// ```text
/// a_t = W_input x_t + W_hidden h_{t-1} + b
/// i = σ(a_i)  f = σ(a_f)  g = tanh(a_g)  o = σ(a_o)
/// c_t = f ⊙ c_{t-1} + i ⊙ g
/// h_t = o ⊙ tanh(c_t)
/// ```
/// with `h_{-1} = c_{-1} = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmLayer {
    pub w_input: Array2<f64>,
    pub w_hidden: Array2<f64>,
    pub bias: Array1<f64>,
}

impl LstmLayer {
    pub fn zeros(inputs: usize, hidden: usize) -> Self {
        Self {
            w_input: Array2::zeros((4 * hidden, inputs)),
            w_hidden: Array2::zeros((4 * hidden, hidden)),
            bias: Array1::zeros(4 * hidden),
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.w_hidden.ncols()
    }
}

/// Every trainable weight of encoder, classifier and decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    /// Recurrent trunk shared by the Gaussian heads and the classifier.
    pub encoder: Vec<LstmLayer>,
    pub enc_mean: Linear,
    pub enc_log_var: Linear,
    /// Hidden ReLU layers followed by the logit layer.
    pub classifier: Vec<Linear>,
    pub decoder: Vec<LstmLayer>,
    pub dec_out: Linear,
}

macro_rules! emit {
    ($f:ident, $name:expr, $a:expr, $slice:ident) => {{
        let shape = $a.shape().to_vec();
        $f(&$name, &shape, $a.$slice().expect("parameters use standard layout"));
    }};
}

macro_rules! for_each_tensor {
    ($p:expr, $f:ident, $iter:ident, $slice:ident) => {{
        for (l, layer) in $p.encoder.$iter().enumerate() {
            emit!($f, format!("encoder.lstm{l}.w_input"), layer.w_input, $slice);
            emit!($f, format!("encoder.lstm{l}.w_hidden"), layer.w_hidden, $slice);
            emit!($f, format!("encoder.lstm{l}.bias"), layer.bias, $slice);
        }
        emit!($f, "encoder.mean.weight".to_string(), $p.enc_mean.weight, $slice);
        emit!($f, "encoder.mean.bias".to_string(), $p.enc_mean.bias, $slice);
        emit!($f, "encoder.log_var.weight".to_string(), $p.enc_log_var.weight, $slice);
        emit!($f, "encoder.log_var.bias".to_string(), $p.enc_log_var.bias, $slice);
        for (l, layer) in $p.classifier.$iter().enumerate() {
            emit!($f, format!("classifier.{l}.weight"), layer.weight, $slice);
            emit!($f, format!("classifier.{l}.bias"), layer.bias, $slice);
        }
        for (l, layer) in $p.decoder.$iter().enumerate() {
            emit!($f, format!("decoder.lstm{l}.w_input"), layer.w_input, $slice);
            emit!($f, format!("decoder.lstm{l}.w_hidden"), layer.w_hidden, $slice);
            emit!($f, format!("decoder.lstm{l}.bias"), layer.bias, $slice);
        }
        emit!($f, "decoder.out.weight".to_string(), $p.dec_out.weight, $slice);
        emit!($f, "decoder.out.bias".to_string(), $p.dec_out.bias, $slice);
    }};
}

impl ModelParams {
    /// All-zero parameters with the shapes implied by `config`.
    pub fn zeros(config: &ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let c = config;
        let stack = |first_in: usize| {
            (0..c.num_recurrent_layers)
                .map(|l| LstmLayer::zeros(if l == 0 { first_in } else { c.hidden_dim }, c.hidden_dim))
                .collect::<Vec<_>>()
        };
        let mut classifier = Vec::with_capacity(c.classifier_layers + 1);
        let mut width = c.hidden_dim;
        for _ in 0..c.classifier_layers {
            classifier.push(Linear::zeros(width, c.classifier_hidden));
            width = c.classifier_hidden;
        }
        classifier.push(Linear::zeros(width, c.num_classes));
        Ok(Self {
            config: config.clone(),
            encoder: stack(c.input_dim),
            enc_mean: Linear::zeros(c.hidden_dim + c.num_classes, c.latent_dim),
            enc_log_var: Linear::zeros(c.hidden_dim + c.num_classes, c.latent_dim),
            classifier,
            decoder: stack(c.latent_dim + c.num_classes),
            dec_out: Linear::zeros(c.hidden_dim, c.input_dim),
        })
    }

    /// Same shapes, all zeros; used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.config).expect("config was validated")
    }

    /// Visit every tensor in canonical order with its name and shape.
    pub fn visit<F: FnMut(&str, &[usize], &[f64])>(&self, mut f: F) {
        for_each_tensor!(self, f, iter, as_slice);
    }

    pub fn visit_mut<F: FnMut(&str, &[usize], &mut [f64])>(&mut self, mut f: F) {
        for_each_tensor!(self, f, iter_mut, as_slice_mut);
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(|_, _, d| n += d.len());
        n
    }

    /// `(name, shape)` of every tensor in canonical order.
    pub fn tensor_specs(&self) -> Vec<(String, Vec<usize>)> {
        let mut specs = Vec::new();
        self.visit(|name, shape, _| specs.push((name.to_string(), shape.to_vec())));
        specs
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit(|_, _, d| out.extend_from_slice(d));
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_params(), "flat parameter length");
        let mut offset = 0;
        self.visit_mut(|_, _, d| {
            d.copy_from_slice(&flat[offset..offset + d.len()]);
            offset += d.len();
        });
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        let flat = other.to_flat();
        let mut offset = 0;
        self.visit_mut(|_, _, d| {
            for (v, o) in d.iter_mut().zip(&flat[offset..]) {
                *v += scale * o;
            }
            offset += d.len();
        });
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.visit(|_, _, d| ok &= d.iter().all(|v| v.is_finite()));
        ok
    }
}

/// Xavier-uniform weights, zero biases, LSTM forget-gate biases at 1.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ModelParams, ModelError> {
    let mut params = ModelParams::zeros(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    params.visit_mut(|name, shape, data| {
        if shape.len() == 2 {
            let (fan_out, fan_in) = (shape[0], shape[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for v in data.iter_mut() {
                *v = rng.random_range(-bound..=bound);
            }
        } else if name.contains(".lstm") {
            let h = shape[0] / 4;
            data[h..2 * h].fill(1.0);
        }
    });
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config() -> ModelConfig {
        ModelConfig {
            input_dim: 6,
            seq_len: 4,
            latent_dim: 3,
            hidden_dim: 5,
            num_recurrent_layers: 2,
            classifier_hidden: 7,
            classifier_layers: 2,
            num_classes: 3,
            sigma_sq: 1.0,
        }
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = init_params(&config(), 11).unwrap();
        let b = init_params(&config(), 11).unwrap();
        let c = init_params(&config(), 12).unwrap();
        assert_eq!(
            a.to_flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.to_flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_ne!(a.to_flat(), c.to_flat());
    }

    #[test]
    fn weights_within_xavier_bound_and_biases_set() {
        let p = init_params(&config(), 3).unwrap();
        p.visit(|name, shape, data| {
            if shape.len() == 2 {
                let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                assert!(data.iter().all(|v| v.abs() <= bound), "{name}");
            } else if name.contains(".lstm") {
                let h = shape[0] / 4;
                for (i, v) in data.iter().enumerate() {
                    let expected = if (h..2 * h).contains(&i) { 1.0 } else { 0.0 };
                    assert_eq!(*v, expected, "{name}[{i}]");
                }
            } else {
                assert!(data.iter().all(|v| *v == 0.0), "{name}");
            }
        });
    }

    #[test]
    fn flat_round_trip_and_names_unique() {
        let p = init_params(&config(), 5).unwrap();
        let mut q = p.zeros_like();
        q.set_flat(&p.to_flat());
        assert_eq!(p, q);
        let specs = p.tensor_specs();
        let names: std::collections::HashSet<_> = specs.iter().map(|(n, _)| n.clone()).collect();
        assert_eq!(names.len(), specs.len());
        assert_eq!(
            specs.iter().map(|(_, s)| s.iter().product::<usize>()).sum::<usize>(),
            p.num_params()
        );
    }
}
