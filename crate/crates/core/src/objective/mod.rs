//! Evidence lower bounds for labeled and unlabeled windows.
//!
//! For a labeled window the bound is
//!
//! ```text
//! E_q(z|x,y)[ log p(x|y,z) ] + log π_y − KL(q(z|x,y) ‖ N(0, I))
//! ```
//!
//! and for an unlabeled window the label is marginalised under the classifier:
//!
//! ```text
//! Σ_y q(y|x) · elbo(x, y) + H(q(y|x))
//! ```
//!
//! The Gaussian log-density keeps its normalising constant, so both values
//! are literal lower bounds on `log p(x, y)` and `log p(x)`.

mod batch;

use ndarray::{Array1, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{reparameterize, ConditionalModel, GaussianParams, ModelError};

pub use batch::{batch_loss, gradients, Batch, BatchNoise, LossAndGradient};

/// Probabilities are floored at this value inside logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObjectiveError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("both labeled and unlabeled batches are empty")]
    EmptyBatch,
    #[error("invalid objective config: {0}")]
    InvalidConfig(String),
    #[error("noise shape mismatch: {0}")]
    Noise(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveConfig {
    /// Weight of the supervised classifier cross-entropy.
    pub alpha: f64,
    /// Label prior `p(y) = Cat(π)`.
    pub prior_pi: Vec<f64>,
    /// Reparameterised samples of `z` per (window, class) term.
    pub mc_samples: usize,
}

impl ObjectiveConfig {
    pub fn uniform(num_classes: usize, alpha: f64) -> Self {
        Self {
            alpha,
            prior_pi: vec![1.0 / num_classes as f64; num_classes],
            mc_samples: 1,
        }
    }

    /// `0.1 · total / labeled`, the default classifier weight.
    pub fn default_alpha(total_windows: usize, labeled_windows: usize) -> f64 {
        if labeled_windows == 0 {
            0.0
        } else {
            0.1 * total_windows as f64 / labeled_windows as f64
        }
    }

    pub fn validate(&self, num_classes: usize) -> Result<(), ObjectiveError> {
        if self.prior_pi.len() != num_classes {
            return Err(ObjectiveError::InvalidConfig(format!(
                "prior_pi has {} entries for {num_classes} classes",
                self.prior_pi.len()
            )));
        }
        if self.prior_pi.iter().any(|p| !(p.is_finite() && *p > 0.0))
            || (self.prior_pi.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(ObjectiveError::InvalidConfig(
                "prior_pi must be positive and sum to 1".into(),
            ));
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(ObjectiveError::InvalidConfig("alpha must be >= 0".into()));
        }
        if self.mc_samples == 0 {
            return Err(ObjectiveError::InvalidConfig("mc_samples must be >= 1".into()));
        }
        Ok(())
    }
}

/// Terms of a bound. `recon` is `−E log p(x|y,z)` including constants.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub kl: f64,
    pub log_prior_y: f64,
    pub entropy: f64,
    pub classifier_ce: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Name of the first non-finite field, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        [
            ("recon", self.recon),
            ("kl", self.kl),
            ("log_prior_y", self.log_prior_y),
            ("entropy", self.entropy),
            ("classifier_ce", self.classifier_ce),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

/// `KL(N(μ, diag(exp(logσ²))) ‖ N(0, I))` in closed form.
pub fn gaussian_kl(q: &GaussianParams) -> f64 {
    q.mean
        .iter()
        .zip(&q.log_var)
        .map(|(m, lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv))
        .sum()
}

/// Gradient of [`gaussian_kl`] with respect to `(mean, log_var)`.
pub fn gaussian_kl_grad(q: &GaussianParams) -> (Array1<f64>, Array1<f64>) {
    (q.mean.clone(), q.log_var.mapv(|lv| 0.5 * (lv.exp() - 1.0)))
}

/// `log N(x; x̂, σ² I)` over all `D = T·3J` values.
pub fn recon_log_prob(x: ArrayView2<'_, f64>, x_hat: ArrayView2<'_, f64>, sigma_sq: f64) -> Result<f64, ModelError> {
    if x.dim() != x_hat.dim() {
        return Err(ModelError::Shape {
            expected: format!("{:?}", x.dim()),
            found: format!("{:?}", x_hat.dim()),
        });
    }
    let d = x.len() as f64;
    let sq: f64 = x.iter().zip(x_hat.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(-0.5 * d * (2.0 * std::f64::consts::PI * sigma_sq).ln() - sq / (2.0 * sigma_sq))
}

/// `H(q) = −Σ q ln q` with `0 ln 0 = 0`.
pub fn entropy(probs: &[f64]) -> f64 {
    -probs.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
}

fn check_noise(noise: &[Vec<f64>], latent: usize, config: &ObjectiveConfig) -> Result<(), ObjectiveError> {
    if noise.len() != config.mc_samples || noise.iter().any(|n| n.len() != latent) {
        return Err(ObjectiveError::Noise(format!(
            "expected {} vectors of length {latent}",
            config.mc_samples
        )));
    }
    Ok(())
}

/// Labeled bound, averaged over the supplied noise vectors.
pub fn labeled_elbo<M: ConditionalModel + ?Sized>(
    model: &M,
    x: ArrayView2<'_, f64>,
    y: usize,
    noise: &[Vec<f64>],
    config: &ObjectiveConfig,
) -> Result<(f64, LossBreakdown), ObjectiveError> {
    config.validate(model.num_classes())?;
    check_noise(noise, model.latent_dim(), config)?;
    let q = model.encode(x, y)?;
    let kl = gaussian_kl(&q);
    let mut recon = 0.0;
    for n in noise {
        let z = reparameterize(&q, n);
        let x_hat = model.decode(z.as_slice().expect("contiguous"), y)?;
        recon += recon_log_prob(x, x_hat.view(), model.sigma_sq())?;
    }
    recon /= noise.len() as f64;
    let log_prior_y = config.prior_pi[y].ln();
    let elbo = recon + log_prior_y - kl;
    Ok((
        elbo,
        LossBreakdown {
            recon: -recon,
            kl,
            log_prior_y,
            entropy: 0.0,
            classifier_ce: 0.0,
            total: -elbo,
        },
    ))
}

/// Unlabeled bound with exact enumeration over classes.
pub fn unlabeled_elbo<M: ConditionalModel + ?Sized>(
    model: &M,
    x: ArrayView2<'_, f64>,
    noise_per_class: &[Vec<Vec<f64>>],
    config: &ObjectiveConfig,
) -> Result<(f64, LossBreakdown), ObjectiveError> {
    let k = model.num_classes();
    if noise_per_class.len() != k {
        return Err(ObjectiveError::Noise(format!("expected noise for {k} classes")));
    }
    let q = model.classify(x)?;
    let mut out = LossBreakdown::default();
    let mut elbo = 0.0;
    for (y, noise) in noise_per_class.iter().enumerate() {
        let (e, b) = labeled_elbo(model, x, y, noise, config)?;
        let w = q.0[y];
        elbo += w * e;
        out.recon += w * b.recon;
        out.kl += w * b.kl;
        out.log_prior_y += w * b.log_prior_y;
    }
    out.entropy = entropy(q.0.as_slice().expect("contiguous"));
    elbo += out.entropy;
    out.total = -elbo;
    Ok((elbo, out))
}

/// Cross-entropy `−ln q(y|x)_y`.
pub fn classifier_loss<M: ConditionalModel + ?Sized>(
    model: &M,
    x: ArrayView2<'_, f64>,
    y: usize,
) -> Result<f64, ObjectiveError> {
    if y >= model.num_classes() {
        return Err(ModelError::ClassOutOfRange {
            class: y,
            num_classes: model.num_classes(),
        }
        .into());
    }
    let q = model.classify(x)?;
    Ok(-q.0[y].max(PROB_FLOOR).ln())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    fn g(mean: &[f64], log_var: &[f64]) -> GaussianParams {
        GaussianParams {
            mean: Array1::from(mean.to_vec()),
            log_var: Array1::from(log_var.to_vec()),
        }
    }

    #[test]
    fn kl_closed_form_cases() {
        assert_eq!(gaussian_kl(&g(&[0.0], &[0.0])), 0.0);
        assert_eq!(gaussian_kl(&g(&[1.0], &[0.0])), 0.5);
        let expected = 0.5 * (std::f64::consts::E - 2.0);
        assert!((gaussian_kl(&g(&[0.0], &[1.0])) - expected).abs() < 1e-15);
        assert!((expected - 0.35914).abs() < 1e-5);
    }

    #[test]
    fn kl_grad_wrt_mean_is_mean() {
        let q = g(&[0.3, -1.2], &[0.4, -0.7]);
        let (dm, dlv) = gaussian_kl_grad(&q);
        assert_eq!(dm, q.mean);
        let h = 1e-6;
        for d in 0..2 {
            let mut plus = q.clone();
            let mut minus = q.clone();
            plus.log_var[d] += h;
            minus.log_var[d] -= h;
            let fd = (gaussian_kl(&plus) - gaussian_kl(&minus)) / (2.0 * h);
            assert!((fd - dlv[d]).abs() < 1e-8);
        }
    }

    #[test]
    fn recon_log_prob_cases() {
        let x = array![[0.5, -0.5]];
        let ln2pi = (2.0 * std::f64::consts::PI).ln();
        assert!((recon_log_prob(x.view(), x.view(), 1.0).unwrap() + ln2pi).abs() < 1e-12);

        // Residual (1, -1): ‖r‖² = 2. Cross-check against the product of two 1-D densities.
        let xh = array![[-0.5, 0.5]];
        let got = recon_log_prob(x.view(), xh.view(), 1.0).unwrap();
        assert!((got - (-ln2pi - 1.0)).abs() < 1e-12);
        let phi = |r: f64| (-0.5 * r * r).exp() / (2.0 * std::f64::consts::PI).sqrt();
        assert!((got - (phi(1.0) * phi(-1.0)).ln()).abs() < 1e-12);

        let wider = recon_log_prob(x.view(), x.view(), 2.0).unwrap();
        let narrow = recon_log_prob(x.view(), x.view(), 1.0).unwrap();
        assert!((narrow - wider - std::f64::consts::LN_2).abs() < 1e-12);

        let bad = Array2::zeros((2, 2));
        assert!(recon_log_prob(x.view(), bad.view(), 1.0).is_err());
    }

    #[test]
    fn entropy_cases() {
        assert!((entropy(&[1.0 / 3.0; 3]) - 3f64.ln()).abs() < 1e-15);
        assert!((entropy(&[0.5, 0.25, 0.25]) - 1.0397207708399179).abs() < 1e-12);
        assert_eq!(entropy(&[1.0, 0.0, 0.0]), 0.0);
    }

    #[test]
    fn config_validation() {
        let mut c = ObjectiveConfig::uniform(3, 1.0);
        assert!(c.validate(3).is_ok());
        assert!(c.validate(2).is_err());
        c.prior_pi = vec![0.5, 0.5, 0.5];
        assert!(c.validate(3).is_err());
        let mut c = ObjectiveConfig::uniform(3, -1.0);
        assert!(c.validate(3).is_err());
        c.alpha = 0.0;
        c.mc_samples = 0;
        assert!(c.validate(3).is_err());
        assert_eq!(ObjectiveConfig::default_alpha(3000, 30), 10.0);
    }
}
