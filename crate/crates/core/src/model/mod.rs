//! Recurrent encoder `q(z|x,y)`, classifier `q(y|x)` and decoder `p(x|y,z)`.
//!
//! The encoder trunk is a stack of unidirectional LSTM layers run over the
//! window; its final hidden state feeds both the Gaussian heads (after
//! appending `one_hot(y)`) and the ReLU classifier. The decoder receives
//! `[z ; one_hot(y)]` at every step and maps each top-layer hidden state to
//! a frame with an affine head.

pub(crate) mod layers;
mod params;

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use params::{init_params, Linear, LstmLayer, ModelParams};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: expected {expected}, got {found}")]
    Shape { expected: String, found: String },
    #[error("class index {class} out of range for {num_classes} classes")]
    ClassOutOfRange { class: usize, num_classes: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Values per frame, `3J`.
    pub input_dim: usize,
    /// Window length `T`.
    pub seq_len: usize,
    pub latent_dim: usize,
    pub hidden_dim: usize,
    pub num_recurrent_layers: usize,
    pub classifier_hidden: usize,
    pub classifier_layers: usize,
    pub num_classes: usize,
    /// Decoder output variance σ².
    pub sigma_sq: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 53 * 3,
            seq_len: 40,
            latent_dim: 256,
            hidden_dim: 100,
            num_recurrent_layers: 5,
            classifier_hidden: 100,
            classifier_layers: 2,
            num_classes: 3,
            sigma_sq: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let dims = [
            ("input_dim", self.input_dim),
            ("seq_len", self.seq_len),
            ("latent_dim", self.latent_dim),
            ("hidden_dim", self.hidden_dim),
            ("num_recurrent_layers", self.num_recurrent_layers),
            ("classifier_hidden", self.classifier_hidden),
            ("num_classes", self.num_classes),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::InvalidConfig(format!("{name} must be positive")));
        }
        if !(self.sigma_sq.is_finite() && self.sigma_sq > 0.0) {
            return Err(ModelError::InvalidConfig("sigma_sq must be positive".into()));
        }
        Ok(())
    }

    /// Size of one flattened window, `T · 3J`.
    pub fn window_dim(&self) -> usize {
        self.seq_len * self.input_dim
    }
}

/// Diagonal Gaussian `q(z|x,y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianParams {
    pub mean: Array1<f64>,
    pub log_var: Array1<f64>,
}

/// `z = mean + exp(log_var / 2) ⊙ noise`.
pub fn reparameterize(g: &GaussianParams, noise: &[f64]) -> Array1<f64> {
    assert_eq!(noise.len(), g.mean.len(), "noise length");
    Array1::from_iter(
        g.mean
            .iter()
            .zip(&g.log_var)
            .zip(noise)
            .map(|((m, lv), n)| m + (0.5 * lv).exp() * n),
    )
}

/// `q(y|x)` over the configured classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassProbs(pub Array1<f64>);

impl ClassProbs {
    /// Most probable class; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        self.argmax_with_tie().0
    }

    /// Most probable class and whether another class tied with it.
    pub fn argmax_with_tie(&self) -> (usize, bool) {
        let mut best = 0;
        let mut tie = false;
        for (k, &p) in self.0.iter().enumerate().skip(1) {
            if p > self.0[best] {
                best = k;
                tie = false;
            } else if p == self.0[best] {
                tie = true;
            }
        }
        (best, tie)
    }
}

/// Forward interface the objective needs from a generative model.
pub trait ConditionalModel {
    fn num_classes(&self) -> usize;
    fn latent_dim(&self) -> usize;
    fn seq_len(&self) -> usize;
    fn frame_dim(&self) -> usize;
    /// Variance σ² of `p(x|y,z)`.
    fn sigma_sq(&self) -> f64;
    fn encode(&self, x: ArrayView2<'_, f64>, y: usize) -> Result<GaussianParams, ModelError>;
    fn classify(&self, x: ArrayView2<'_, f64>) -> Result<ClassProbs, ModelError>;
    fn decode(&self, z: &[f64], y: usize) -> Result<Array2<f64>, ModelError>;
}

impl ModelParams {
    pub(crate) fn check_window(&self, x: &ArrayView2<'_, f64>) -> Result<(), ModelError> {
        let c = &self.config;
        if x.dim() != (c.seq_len, c.input_dim) {
            return Err(ModelError::Shape {
                expected: format!("({}, {})", c.seq_len, c.input_dim),
                found: format!("{:?}", x.dim()),
            });
        }
        Ok(())
    }

    pub(crate) fn check_class(&self, y: usize) -> Result<(), ModelError> {
        if y >= self.config.num_classes {
            return Err(ModelError::ClassOutOfRange {
                class: y,
                num_classes: self.config.num_classes,
            });
        }
        Ok(())
    }

    /// Encoder posterior means for a batch of windows under the given classes.
    pub fn encode_batch(
        &self,
        windows: &[ArrayView2<'_, f64>],
        classes: &[usize],
    ) -> Result<Vec<GaussianParams>, ModelError> {
        assert_eq!(windows.len(), classes.len());
        for (w, &y) in windows.iter().zip(classes) {
            self.check_window(w)?;
            self.check_class(y)?;
        }
        if windows.is_empty() {
            return Ok(Vec::new());
        }
        let c = &self.config;
        let x = layers::time_major(windows.iter().cloned(), c.seq_len, c.input_dim);
        let trunk = layers::trunk_forward(self, x.view(), windows.len());
        let rows: Vec<usize> = (0..windows.len()).collect();
        let input = layers::conditioned(&trunk.final_hidden, &rows, classes, c.num_classes);
        let heads = layers::heads_forward(self, &input);
        Ok(heads
            .mean
            .rows()
            .into_iter()
            .zip(heads.log_var.rows())
            .map(|(m, lv)| GaussianParams {
                mean: m.to_owned(),
                log_var: lv.to_owned(),
            })
            .collect())
    }

    pub fn classify_batch(&self, windows: &[ArrayView2<'_, f64>]) -> Result<Vec<ClassProbs>, ModelError> {
        for w in windows {
            self.check_window(w)?;
        }
        if windows.is_empty() {
            return Ok(Vec::new());
        }
        let c = &self.config;
        let x = layers::time_major(windows.iter().cloned(), c.seq_len, c.input_dim);
        let trunk = layers::trunk_forward(self, x.view(), windows.len());
        let cls = layers::classifier_forward(self, &trunk.final_hidden);
        Ok(cls.probs.rows().into_iter().map(|r| ClassProbs(r.to_owned())).collect())
    }

    /// Decode each `(z, y)` pair to a `T × D` window.
    pub fn decode_batch(&self, latents: &[&[f64]], classes: &[usize]) -> Result<Vec<Array2<f64>>, ModelError> {
        assert_eq!(latents.len(), classes.len());
        let c = &self.config;
        let mut zs = Array2::zeros((latents.len(), c.latent_dim));
        for (r, (z, &y)) in latents.iter().zip(classes).enumerate() {
            self.check_class(y)?;
            if z.len() != c.latent_dim {
                return Err(ModelError::Shape {
                    expected: format!("latent of length {}", c.latent_dim),
                    found: format!("length {}", z.len()),
                });
            }
            if z.iter().any(|v| !v.is_finite()) {
                return Err(ModelError::NonFinite("latent"));
            }
            zs.row_mut(r).assign(&ndarray::ArrayView1::from(*z));
        }
        if latents.is_empty() {
            return Ok(Vec::new());
        }
        let rows: Vec<usize> = (0..latents.len()).collect();
        let input = layers::conditioned(&zs, &rows, classes, c.num_classes);
        let pass = layers::decoder_forward(self, &input);
        let batch = latents.len();
        Ok((0..batch)
            .map(|b| {
                let mut out = Array2::zeros((c.seq_len, c.input_dim));
                for t in 0..c.seq_len {
                    out.row_mut(t).assign(&pass.frames.row(t * batch + b));
                }
                out
            })
            .collect())
    }
}

impl ConditionalModel for ModelParams {
    fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    fn seq_len(&self) -> usize {
        self.config.seq_len
    }

    fn frame_dim(&self) -> usize {
        self.config.input_dim
    }

    fn sigma_sq(&self) -> f64 {
        self.config.sigma_sq
    }

    fn encode(&self, x: ArrayView2<'_, f64>, y: usize) -> Result<GaussianParams, ModelError> {
        Ok(self.encode_batch(&[x], &[y])?.remove(0))
    }

    fn classify(&self, x: ArrayView2<'_, f64>) -> Result<ClassProbs, ModelError> {
        Ok(self.classify_batch(&[x])?.remove(0))
    }

    fn decode(&self, z: &[f64], y: usize) -> Result<Array2<f64>, ModelError> {
        Ok(self.decode_batch(&[z], &[y])?.remove(0))
    }
}
