//! Class-conditional generation: fit a Gaussian over encoder means per class,
//! sample it, and decode under the requested class.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{save_dataset, ClassNames, DanceStream, DataError, DatasetFormat};
use crate::model::{ModelError, ModelParams};
use crate::seeding::{derived_rng, GENERATION};

pub const VARIANCE_FLOOR: f64 = 1e-6;
pub const DEFAULT_TEMPERATURE: f64 = 1.0;

/// Header of the sidecar written next to exported sequences.
pub const SIDECAR_HEADER: &str = "index,label,temperature,seed,z_norm";

#[derive(Debug, Error)]
pub enum GenerationError {
    #[error("class {class} has {count} labeled windows; at least 2 are needed")]
    TooFewExamples { class: usize, count: usize },
    #[error("class {0} is not in the prior")]
    UnknownClass(usize),
    #[error("temperature must be finite and >= 0, got {0}")]
    InvalidTemperature(f64),
    #[error("latent width {found} does not match the prior ({expected})")]
    LatentMismatch { expected: usize, found: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Diagonal Gaussian over the latent codes of one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassGaussian {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub count: usize,
}

/// One [`ClassGaussian`] per class, indexed by class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassConditionalPrior {
    pub classes: Vec<ClassGaussian>,
}

impl ClassConditionalPrior {
    /// Fit from latent vectors tagged with their classes.
    ///
    /// Sample mean and unbiased sample variance per coordinate, floored at
    /// [`VARIANCE_FLOOR`].
    pub fn from_latents(latents: &[(Vec<f64>, usize)], num_classes: usize) -> Result<Self, GenerationError> {
        let dim = latents.first().map_or(0, |(z, _)| z.len());
        let mut sums = vec![vec![0.0; dim]; num_classes];
        let mut counts = vec![0usize; num_classes];
        for (z, y) in latents {
            if *y >= num_classes {
                return Err(GenerationError::UnknownClass(*y));
            }
            if z.len() != dim {
                return Err(GenerationError::LatentMismatch {
                    expected: dim,
                    found: z.len(),
                });
            }
            counts[*y] += 1;
            sums[*y].iter_mut().zip(z).for_each(|(s, v)| *s += v);
        }
        if let Some(class) = counts.iter().position(|&c| c < 2) {
            return Err(GenerationError::TooFewExamples {
                class,
                count: counts[class],
            });
        }
        let means: Vec<Vec<f64>> = sums
            .iter()
            .zip(&counts)
            .map(|(s, &c)| s.iter().map(|v| v / c as f64).collect())
            .collect();
        let mut sq = vec![vec![0.0; dim]; num_classes];
        for (z, y) in latents {
            for ((acc, v), m) in sq[*y].iter_mut().zip(z).zip(&means[*y]) {
                *acc += (v - m) * (v - m);
            }
        }
        let classes = means
            .into_iter()
            .zip(sq)
            .zip(counts)
            .map(|((mean, sq), count)| ClassGaussian {
                mean,
                variance: sq
                    .iter()
                    .map(|s| (s / (count - 1) as f64).max(VARIANCE_FLOOR))
                    .collect(),
                count,
            })
            .collect();
        Ok(Self { classes })
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn latent_dim(&self) -> usize {
        self.classes.first().map_or(0, |c| c.mean.len())
    }
}

/// Encode every labeled window under its own class and fit the prior to the
/// posterior means.
pub fn fit_conditional_prior(
    params: &ModelParams,
    labeled: &[(ArrayView2<'_, f64>, usize)],
) -> Result<ClassConditionalPrior, GenerationError> {
    let k = params.config.num_classes;
    let mut counts = vec![0usize; k];
    for (_, y) in labeled {
        params.check_class(*y)?;
        counts[*y] += 1;
    }
    if let Some(class) = counts.iter().position(|&c| c < 2) {
        return Err(GenerationError::TooFewExamples {
            class,
            count: counts[class],
        });
    }
    let latents = encode_means(params, labeled)?;
    ClassConditionalPrior::from_latents(&latents, k)
}

const ENCODE_CHUNK: usize = 64;

/// Posterior means of `(window, class)` pairs, in input order.
pub fn encode_means(
    params: &ModelParams,
    items: &[(ArrayView2<'_, f64>, usize)],
) -> Result<Vec<(Vec<f64>, usize)>, ModelError> {
    let parts: Vec<Result<Vec<(Vec<f64>, usize)>, ModelError>> = items
        .par_chunks(ENCODE_CHUNK)
        .map(|chunk| {
            let windows: Vec<_> = chunk.iter().map(|(x, _)| x.view()).collect();
            let classes: Vec<_> = chunk.iter().map(|(_, y)| *y).collect();
            let enc = params.encode_batch(&windows, &classes)?;
            Ok(enc
                .into_iter()
                .zip(classes)
                .map(|(g, y)| (g.mean.to_vec(), y))
                .collect())
        })
        .collect();
    let mut out = Vec::with_capacity(items.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// `z = mean_y + temperature · √var_y ⊙ n` with `n ~ N(0, I)` drawn from `rng`.
pub fn sample_with<R: Rng + ?Sized>(
    prior: &ClassConditionalPrior,
    y: usize,
    temperature: f64,
    rng: &mut R,
) -> Result<Array1<f64>, GenerationError> {
    if !(temperature.is_finite() && temperature >= 0.0) {
        return Err(GenerationError::InvalidTemperature(temperature));
    }
    let class = prior.classes.get(y).ok_or(GenerationError::UnknownClass(y))?;
    Ok(class
        .mean
        .iter()
        .zip(&class.variance)
        .map(|(m, v)| {
            let n: f64 = rng.sample(StandardNormal);
            m + temperature * v.sqrt() * n
        })
        .collect())
}

/// One latent draw for class `y`, fully determined by `seed`.
pub fn sample_conditional(
    prior: &ClassConditionalPrior,
    y: usize,
    temperature: f64,
    seed: u64,
) -> Result<Array1<f64>, GenerationError> {
    sample_with(prior, y, temperature, &mut derived_rng(seed, GENERATION, 0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedSequence {
    /// `T × 3J`.
    pub frames: Array2<f64>,
    pub label: usize,
    pub z: Array1<f64>,
    pub temperature: f64,
    /// Base seed of the batch this sequence came from.
    pub seed: u64,
    /// Position within that batch; the latent came from stream `(seed, index)`.
    pub index: usize,
}

/// `count` sequences of class `y`. Sample `i` draws its latent from the
/// stream derived from `(seed, i)`.
pub fn generate(
    params: &ModelParams,
    prior: &ClassConditionalPrior,
    y: usize,
    count: usize,
    temperature: f64,
    seed: u64,
) -> Result<Vec<GeneratedSequence>, GenerationError> {
    params.check_class(y)?;
    if prior.latent_dim() != params.config.latent_dim {
        return Err(GenerationError::LatentMismatch {
            expected: params.config.latent_dim,
            found: prior.latent_dim(),
        });
    }
    let latents = (0..count)
        .map(|i| sample_with(prior, y, temperature, &mut derived_rng(seed, GENERATION, i as u64)))
        .collect::<Result<Vec<_>, _>>()?;
    let parts: Vec<Result<Vec<Array2<f64>>, ModelError>> = latents
        .par_chunks(ENCODE_CHUNK)
        .map(|chunk| {
            let zs: Vec<&[f64]> = chunk.iter().map(|z| z.as_slice().expect("contiguous")).collect();
            params.decode_batch(&zs, &vec![y; zs.len()])
        })
        .collect();
    let mut frames = Vec::with_capacity(count);
    for p in parts {
        frames.extend(p?);
    }
    Ok(frames
        .into_iter()
        .zip(latents)
        .enumerate()
        .map(|(index, (frames, z))| GeneratedSequence {
            frames,
            label: y,
            z,
            temperature,
            seed,
            index,
        })
        .collect())
}

/// Write sequences as a KPD v1 file (stream `gen<i>` for the i-th sequence)
/// and a sidecar CSV with one row per sequence.
pub fn export_sequences(
    seqs: &[GeneratedSequence],
    dataset_path: &Path,
    sidecar_path: &Path,
    class_names: &ClassNames,
    frame_rate_hz: f64,
) -> Result<(), GenerationError> {
    let mut streams = Vec::with_capacity(seqs.len());
    for (i, s) in seqs.iter().enumerate() {
        let joints = s.frames.ncols() / 3;
        streams.push(DanceStream::new(
            format!("gen{i}"),
            joints,
            frame_rate_hz,
            s.frames.clone(),
        )?);
    }
    save_dataset(dataset_path, &streams, DatasetFormat::Kpd1)?;

    let mut out = String::from(SIDECAR_HEADER);
    out.push('\n');
    for (i, s) in seqs.iter().enumerate() {
        let label = class_names
            .name(s.label)
            .ok_or(GenerationError::UnknownClass(s.label))?;
        let z_norm = s.z.dot(&s.z).sqrt();
        out.push_str(&format!("{i},{label},{},{},{z_norm}\n", s.temperature, s.seed));
    }
    let mut f = fs::File::create(sidecar_path)?;
    f.write_all(out.as_bytes())?;
    f.sync_all()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_point_fit() {
        let latents = vec![
            (vec![0.0, 0.0], 0),
            (vec![2.0, 0.0], 0),
            (vec![1.0, 1.0], 1),
            (vec![1.0, 1.0], 1),
        ];
        let prior = ClassConditionalPrior::from_latents(&latents, 2).unwrap();
        assert_eq!(prior.classes[0].mean, vec![1.0, 0.0]);
        assert_eq!(prior.classes[0].variance, vec![2.0, VARIANCE_FLOOR]);
        assert_eq!(prior.classes[1].mean, vec![1.0, 1.0]);
        assert_eq!(prior.classes[1].variance, vec![VARIANCE_FLOOR; 2]);
        assert_eq!(prior.classes[1].count, 2);
    }

    #[test]
    fn needs_two_examples_per_class() {
        let latents = vec![(vec![0.0], 0), (vec![1.0], 0), (vec![1.0], 1)];
        assert!(matches!(
            ClassConditionalPrior::from_latents(&latents, 2),
            Err(GenerationError::TooFewExamples { class: 1, count: 1 })
        ));
    }

    #[test]
    fn zero_temperature_returns_mean() {
        let prior = ClassConditionalPrior {
            classes: vec![ClassGaussian {
                mean: vec![0.5, -1.5],
                variance: vec![4.0, 9.0],
                count: 10,
            }],
        };
        assert_eq!(sample_conditional(&prior, 0, 0.0, 3).unwrap().to_vec(), vec![0.5, -1.5]);
        let a = sample_conditional(&prior, 0, 1.0, 3).unwrap();
        assert_eq!(a, sample_conditional(&prior, 0, 1.0, 3).unwrap());
        assert!(matches!(
            sample_conditional(&prior, 1, 1.0, 3),
            Err(GenerationError::UnknownClass(1))
        ));
        assert!(matches!(
            sample_conditional(&prior, 0, -1.0, 3),
            Err(GenerationError::InvalidTemperature(_))
        ));
    }
}
