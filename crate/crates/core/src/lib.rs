//! Semi-supervised conditional sequence VAE for motion-capture keypoint data.
//!
//! The crate is organised along the pipeline:
//!
//! - [`data`]: keypoint dataset files, normalization, sliding windows, label
//!   storage and the two label-augmentation rules.
//! - [`model`]: recurrent encoder `q(z|x,y)`, classifier `q(y|x)` and decoder
//!   `p(x|y,z)`, with batched forward and backward passes.
//! - [`objective`]: labeled and unlabeled evidence lower bounds, the classifier
//!   term, and exact reverse-mode gradients of the batch loss.
//! - [`training`]: Adam optimisation loop, batching, checkpoint policies.
//! - [`checkpoint`]: the binary checkpoint container.
//! - [`generation`]: class-conditional latent priors and sequence generation.
//! - [`evaluation`]: diversity metric, label agreement and the synthetic toy corpus.

pub mod checkpoint;
pub mod data;
pub mod evaluation;
pub mod generation;
pub mod model;
pub mod objective;
pub mod optim;
pub mod seeding;
pub mod training;

pub use data::{ClassNames, DanceStream, LabelRecord, LabeledCorpus, Provenance, SequenceWindow};
pub use model::{ClassProbs, GaussianParams, ModelConfig, ModelParams};
