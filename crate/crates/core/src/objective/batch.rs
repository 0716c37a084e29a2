//! Batched loss and exact reverse-mode gradients for [`ModelParams`].
//!
//! The batch is cut into fixed-size chunks that may run on different
//! threads; chunk results are summed in chunk order, so the output does not
//! depend on the thread count.

use ndarray::{s, Array2, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::{LossBreakdown, ObjectiveConfig, ObjectiveError, PROB_FLOOR};
use crate::model::layers::{self, time_major};
use crate::model::ModelParams;

/// Windows per parallel work unit. Part of the numeric contract: changing it
/// changes floating-point summation order.
const CHUNK: usize = 32;

/// Labeled windows with their classes, and unlabeled windows.
#[derive(Debug, Clone, Default)]
pub struct Batch<'a> {
    pub labeled: Vec<(ArrayView2<'a, f64>, usize)>,
    pub unlabeled: Vec<ArrayView2<'a, f64>>,
}

impl Batch<'_> {
    pub fn is_empty(&self) -> bool {
        self.labeled.is_empty() && self.unlabeled.is_empty()
    }
}

/// Standard-normal noise for every reparameterised sample in a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNoise {
    /// `[window][sample] -> latent`.
    pub labeled: Vec<Vec<Vec<f64>>>,
    /// `[window][class][sample] -> latent`.
    pub unlabeled: Vec<Vec<Vec<Vec<f64>>>>,
}

impl BatchNoise {
    pub fn draw<R: Rng + ?Sized>(
        rng: &mut R,
        labeled: usize,
        unlabeled: usize,
        num_classes: usize,
        mc_samples: usize,
        latent_dim: usize,
    ) -> Self {
        let vector = |rng: &mut R| -> Vec<f64> { (0..latent_dim).map(|_| rng.sample(StandardNormal)).collect() };
        let labeled = (0..labeled)
            .map(|_| (0..mc_samples).map(|_| vector(rng)).collect())
            .collect();
        let unlabeled = (0..unlabeled)
            .map(|_| {
                (0..num_classes)
                    .map(|_| (0..mc_samples).map(|_| vector(rng)).collect())
                    .collect()
            })
            .collect();
        Self { labeled, unlabeled }
    }

    fn check(
        &self,
        batch: &Batch<'_>,
        k: usize,
        config: &ObjectiveConfig,
        latent: usize,
    ) -> Result<(), ObjectiveError> {
        let vec_ok = |v: &Vec<Vec<f64>>| v.len() == config.mc_samples && v.iter().all(|n| n.len() == latent);
        let ok = self.labeled.len() == batch.labeled.len()
            && self.unlabeled.len() == batch.unlabeled.len()
            && self.labeled.iter().all(vec_ok)
            && self.unlabeled.iter().all(|c| c.len() == k && c.iter().all(vec_ok));
        if ok {
            Ok(())
        } else {
            Err(ObjectiveError::Noise("batch noise does not match the batch".into()))
        }
    }
}

pub struct LossAndGradient {
    pub loss: f64,
    pub breakdown: LossBreakdown,
    pub grads: ModelParams,
}

/// `−mean(labeled elbo) + α·mean(classifier CE) − mean(unlabeled elbo)`.
pub fn batch_loss(
    params: &ModelParams,
    batch: &Batch<'_>,
    noise: &BatchNoise,
    config: &ObjectiveConfig,
) -> Result<(f64, LossBreakdown), ObjectiveError> {
    let out = run(params, batch, noise, config, false)?;
    Ok((out.loss, out.breakdown))
}

/// [`batch_loss`] and its exact gradient with respect to every parameter.
pub fn gradients(
    params: &ModelParams,
    batch: &Batch<'_>,
    noise: &BatchNoise,
    config: &ObjectiveConfig,
) -> Result<LossAndGradient, ObjectiveError> {
    let out = run(params, batch, noise, config, true)?;
    Ok(LossAndGradient {
        loss: out.loss,
        breakdown: out.breakdown,
        grads: out.grads.expect("requested"),
    })
}

struct ChunkOut {
    loss: f64,
    breakdown: LossBreakdown,
    grads: Option<ModelParams>,
}

enum Chunk<'b, 'a> {
    Labeled {
        items: &'b [(ArrayView2<'a, f64>, usize)],
        noise: &'b [Vec<Vec<f64>>],
    },
    Unlabeled {
        items: &'b [ArrayView2<'a, f64>],
        noise: &'b [Vec<Vec<Vec<f64>>>],
    },
}

fn run(
    params: &ModelParams,
    batch: &Batch<'_>,
    noise: &BatchNoise,
    config: &ObjectiveConfig,
    want_grad: bool,
) -> Result<ChunkOut, ObjectiveError> {
    let c = &params.config;
    if batch.is_empty() {
        return Err(ObjectiveError::EmptyBatch);
    }
    config.validate(c.num_classes)?;
    for (x, y) in &batch.labeled {
        params.check_window(x)?;
        params.check_class(*y)?;
    }
    for x in &batch.unlabeled {
        params.check_window(x)?;
    }
    noise.check(batch, c.num_classes, config, c.latent_dim)?;

    let mut chunks = Vec::new();
    for (items, noise) in batch.labeled.chunks(CHUNK).zip(noise.labeled.chunks(CHUNK)) {
        chunks.push(Chunk::Labeled { items, noise });
    }
    for (items, noise) in batch.unlabeled.chunks(CHUNK).zip(noise.unlabeled.chunks(CHUNK)) {
        chunks.push(Chunk::Unlabeled { items, noise });
    }
    let scale_l = if batch.labeled.is_empty() {
        0.0
    } else {
        1.0 / batch.labeled.len() as f64
    };
    let scale_u = if batch.unlabeled.is_empty() {
        0.0
    } else {
        1.0 / batch.unlabeled.len() as f64
    };

    let parts: Vec<ChunkOut> = chunks
        .par_iter()
        .map(|chunk| run_chunk(params, chunk, config, scale_l, scale_u, want_grad))
        .collect();

    let mut total = ChunkOut {
        loss: 0.0,
        breakdown: LossBreakdown::default(),
        grads: want_grad.then(|| params.zeros_like()),
    };
    for part in parts {
        total.loss += part.loss;
        let (a, b) = (&mut total.breakdown, part.breakdown);
        a.recon += b.recon;
        a.kl += b.kl;
        a.log_prior_y += b.log_prior_y;
        a.entropy += b.entropy;
        a.classifier_ce += b.classifier_ce;
        if let (Some(g), Some(pg)) = (total.grads.as_mut(), part.grads.as_ref()) {
            g.add_scaled(pg, 1.0);
        }
    }
    total.breakdown.total = total.loss;
    Ok(total)
}

/// One reparameterised decode: window row, class, noise, and `dL/d elbo_term`.
struct Job<'n> {
    source: usize,
    class: usize,
    noise: &'n [f64],
    weight: f64,
}

fn run_chunk(
    params: &ModelParams,
    chunk: &Chunk<'_, '_>,
    config: &ObjectiveConfig,
    scale_l: f64,
    scale_u: f64,
    want_grad: bool,
) -> ChunkOut {
    let c = &params.config;
    let (k, steps, dim, latent) = (c.num_classes, c.seq_len, c.input_dim, c.latent_dim);
    let m = config.mc_samples as f64;
    let sigma_sq = c.sigma_sq;
    let log_norm = -0.5 * (steps * dim) as f64 * (2.0 * std::f64::consts::PI * sigma_sq).ln();

    let windows: Vec<ArrayView2<'_, f64>> = match chunk {
        Chunk::Labeled { items, .. } => items.iter().map(|(x, _)| x.view()).collect(),
        Chunk::Unlabeled { items, .. } => items.iter().map(|x| x.view()).collect(),
    };
    let batch = windows.len();
    let x = time_major(windows.iter().cloned(), steps, dim);
    let trunk = layers::trunk_forward(params, x.view(), batch);
    let cls = layers::classifier_forward(params, &trunk.final_hidden);
    let probs = &cls.probs;

    // Expand to one job per (window, class, sample). Unlabeled weights need
    // q(y|x), which the classifier pass has just produced.
    let mut jobs = Vec::new();
    match chunk {
        Chunk::Labeled { items, noise } => {
            for (i, ((_, y), samples)) in items.iter().zip(noise.iter()).enumerate() {
                for n in samples {
                    jobs.push(Job {
                        source: i,
                        class: *y,
                        noise: n,
                        weight: -scale_l / m,
                    });
                }
            }
        }
        Chunk::Unlabeled { noise, .. } => {
            for (j, per_class) in noise.iter().enumerate() {
                for (y, samples) in per_class.iter().enumerate() {
                    for n in samples {
                        jobs.push(Job {
                            source: j,
                            class: y,
                            noise: n,
                            weight: -scale_u * probs[[j, y]] / m,
                        });
                    }
                }
            }
        }
    }
    let sources: Vec<usize> = jobs.iter().map(|j| j.source).collect();
    let classes: Vec<usize> = jobs.iter().map(|j| j.class).collect();
    let n_jobs = jobs.len();

    let heads_in = layers::conditioned(&trunk.final_hidden, &sources, &classes, k);
    let heads = layers::heads_forward(params, &heads_in);
    let mut z = heads.mean.clone();
    for (r, job) in jobs.iter().enumerate() {
        for d in 0..latent {
            z[[r, d]] += (0.5 * heads.log_var[[r, d]]).exp() * job.noise[d];
        }
    }
    let identity: Vec<usize> = (0..n_jobs).collect();
    let dec_in = layers::conditioned(&z, &identity, &classes, k);
    let dec = layers::decoder_forward(params, &dec_in);

    // Per-job terms.
    let mut residual = Array2::<f64>::zeros((steps * n_jobs, dim));
    let mut recon = vec![0.0; n_jobs];
    let mut kl = vec![0.0; n_jobs];
    for (r, job) in jobs.iter().enumerate() {
        let mut sq = 0.0;
        for t in 0..steps {
            let target = x.row(t * batch + job.source);
            let out = dec.frames.row(t * n_jobs + r);
            let mut res = residual.row_mut(t * n_jobs + r);
            for d in 0..dim {
                let e = target[d] - out[d];
                res[d] = e;
                sq += e * e;
            }
        }
        recon[r] = log_norm - sq / (2.0 * sigma_sq);
        kl[r] = (0..latent)
            .map(|d| {
                let (mu, lv) = (heads.mean[[r, d]], heads.log_var[[r, d]]);
                0.5 * (mu * mu + lv.exp() - 1.0 - lv)
            })
            .sum();
    }

    let mut loss = 0.0;
    let mut bd = LossBreakdown::default();
    let mut d_logits = Array2::<f64>::zeros((batch, k));
    match chunk {
        Chunk::Labeled { items, .. } => {
            for (r, job) in jobs.iter().enumerate() {
                let log_prior = config.prior_pi[job.class].ln();
                let elbo_term = recon[r] + log_prior - kl[r];
                loss += job.weight * elbo_term;
                bd.recon -= scale_l / m * recon[r];
                bd.kl += scale_l / m * kl[r];
                bd.log_prior_y += scale_l / m * log_prior;
            }
            for (i, (_, y)) in items.iter().enumerate() {
                let q = probs[[i, *y]];
                let ce = -q.max(PROB_FLOOR).ln();
                loss += config.alpha * scale_l * ce;
                bd.classifier_ce += scale_l * ce;
                if q >= PROB_FLOOR {
                    let mut dq = vec![0.0; k];
                    dq[*y] = -config.alpha * scale_l / q;
                    softmax_backward(probs.row(i).as_slice().expect("contiguous"), &dq, d_logits.row_mut(i));
                }
            }
        }
        Chunk::Unlabeled { .. } => {
            // elbo[j][y] averaged over samples.
            let mut class_elbo = vec![vec![0.0; k]; batch];
            for (r, job) in jobs.iter().enumerate() {
                let log_prior = config.prior_pi[job.class].ln();
                class_elbo[job.source][job.class] += (recon[r] + log_prior - kl[r]) / m;
                let q = probs[[job.source, job.class]];
                bd.recon -= scale_u * q / m * recon[r];
                bd.kl += scale_u * q / m * kl[r];
                bd.log_prior_y += scale_u * q / m * log_prior;
            }
            for (j, elbos) in class_elbo.iter().enumerate() {
                let q = probs.row(j);
                let q = q.as_slice().expect("contiguous");
                let h = super::entropy(q);
                let elbo: f64 = q.iter().zip(elbos).map(|(p, e)| p * e).sum::<f64>() + h;
                loss -= scale_u * elbo;
                bd.entropy += scale_u * h;
                let dq: Vec<f64> = q
                    .iter()
                    .zip(elbos)
                    .map(|(&p, &e)| -scale_u * (e - p.max(PROB_FLOOR).ln() - 1.0))
                    .collect();
                softmax_backward(q, &dq, d_logits.row_mut(j));
            }
        }
    }
    bd.total = loss;

    if !want_grad {
        return ChunkOut {
            loss,
            breakdown: bd,
            grads: None,
        };
    }

    let mut grads = params.zeros_like();
    let mut d_frames = residual;
    for (r, job) in jobs.iter().enumerate() {
        let w = job.weight / sigma_sq;
        for t in 0..steps {
            d_frames.row_mut(t * n_jobs + r).mapv_inplace(|e| e * w);
        }
    }
    let d_dec_in = layers::decoder_backward(params, &dec, &dec_in, &d_frames, &mut grads);
    let mut d_mean = d_dec_in.slice(s![.., ..latent]).to_owned();
    let mut d_log_var = Array2::<f64>::zeros((n_jobs, latent));
    for (r, job) in jobs.iter().enumerate() {
        for d in 0..latent {
            let (mu, lv) = (heads.mean[[r, d]], heads.log_var[[r, d]]);
            let dz = d_mean[[r, d]];
            let std = (0.5 * lv).exp();
            d_log_var[[r, d]] = dz * job.noise[d] * 0.5 * std - job.weight * 0.5 * (lv.exp() - 1.0);
            d_mean[[r, d]] = dz - job.weight * mu;
        }
    }
    let d_heads_in = layers::heads_backward(params, &heads_in, &heads, &d_mean, &d_log_var, &mut grads);
    let hidden = c.hidden_dim;
    let mut d_trunk = layers::classifier_backward(params, &cls, d_logits, &mut grads);
    for (r, &src) in sources.iter().enumerate() {
        let mut row = d_trunk.row_mut(src);
        row += &d_heads_in.slice(s![r, ..hidden]);
    }
    layers::trunk_backward(params, &trunk, x.view(), &d_trunk, &mut grads);

    ChunkOut {
        loss,
        breakdown: bd,
        grads: Some(grads),
    }
}

/// `dL/d logits` from `dL/d probs` through softmax.
fn softmax_backward(q: &[f64], dq: &[f64], mut out: ndarray::ArrayViewMut1<'_, f64>) {
    let dot: f64 = q.iter().zip(dq).map(|(a, b)| a * b).sum();
    for (o, (&p, &g)) in out.iter_mut().zip(q.iter().zip(dq)) {
        *o += p * (g - dot);
    }
}
