//! Semi-supervised optimisation loop: alternating labeled and unlabeled
//! batches, Adam updates, validation, checkpoint policies and a metrics log.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError, CheckpointMeta, EpochScore};
use crate::data::{CorpusView, WindowRef};
use crate::evaluation::label_agreement;
use crate::generation::{fit_conditional_prior, generate, DEFAULT_TEMPERATURE};
use crate::model::{init_params, ModelConfig, ModelError, ModelParams};
use crate::objective::{batch_loss, gradients, Batch, BatchNoise, LossBreakdown, ObjectiveConfig, ObjectiveError};
use crate::optim::{clip_global_norm, AdamConfig, AdamState};
use crate::seeding::{derived_rng, SHUFFLE_LABELED, SHUFFLE_UNLABELED, TRAIN_NOISE, VALIDATION};

pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_VAL_CHECKPOINT: &str = "best_val.ckpt";
pub const BEST_AGREEMENT_CHECKPOINT: &str = "best_agreement.ckpt";
pub const METRICS_LOG: &str = "metrics.ndjson";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Epochs between checkpoints and agreement probes; 0 writes only at the end.
    pub checkpoint_every: usize,
    pub grad_clip_norm: Option<f64>,
    /// Sequences per class generated by the agreement probe; 0 disables it.
    pub agreement_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            epochs: 500,
            batch_size: 80,
            learning_rate: adam.learning_rate,
            adam_beta1: adam.beta1,
            adam_beta2: adam.beta2,
            adam_eps: adam.eps,
            seed: 0,
            checkpoint_every: 10,
            grad_clip_norm: None,
            agreement_samples: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: &str| Err(TrainError::InvalidConfig(msg.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if !(self.adam_eps.is_finite() && self.adam_eps > 0.0) {
            return bad("adam_eps must be positive");
        }
        if let Some(c) = self.grad_clip_norm {
            if !(c.is_finite() && c > 0.0) {
                return bad("grad_clip_norm must be positive");
            }
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("non-finite {term} at step {step}")]
    NonFinite { step: u64, term: String },
    #[error("nothing to train on: the training split is empty")]
    EmptyTrainingSet,
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("metrics log: {0}")]
    Json(#[from] serde_json::Error),
}

/// Window references making up one batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BatchSpec {
    Labeled(Vec<(WindowRef, usize)>),
    Unlabeled(Vec<WindowRef>),
}

impl BatchSpec {
    pub fn kind(&self) -> BatchKind {
        match self {
            Self::Labeled(_) => BatchKind::Labeled,
            Self::Unlabeled(_) => BatchKind::Unlabeled,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Self::Labeled(v) => v.len(),
            Self::Unlabeled(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Resolve references against the corpus the view belongs to.
    pub fn resolve<'a>(&self, view: &CorpusView<'a>) -> Batch<'a> {
        let corpus = view.corpus;
        match self {
            Self::Labeled(items) => Batch {
                labeled: items.iter().map(|&(w, y)| (corpus.window(w), y)).collect(),
                unlabeled: Vec::new(),
            },
            Self::Unlabeled(items) => Batch {
                labeled: Vec::new(),
                unlabeled: items.iter().map(|&w| corpus.window(w)).collect(),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchKind {
    Labeled,
    Unlabeled,
}

/// One epoch's batches: each pool shuffled by `(seed, epoch)`, then one
/// labeled batch and one unlabeled batch in turn. The pool with fewer
/// batches is cycled until the other is exhausted; partial final batches are
/// kept.
pub fn make_batches(
    train: &CorpusView<'_>,
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Result<Vec<BatchSpec>, TrainError> {
    if batch_size == 0 {
        return Err(TrainError::InvalidConfig("batch_size must be >= 1".into()));
    }
    let mut labeled = train.labeled.clone();
    labeled.shuffle(&mut derived_rng(seed, SHUFFLE_LABELED, epoch as u64));
    let mut unlabeled = train.unlabeled.clone();
    unlabeled.shuffle(&mut derived_rng(seed, SHUFFLE_UNLABELED, epoch as u64));

    let lb: Vec<BatchSpec> = labeled
        .chunks(batch_size)
        .map(|c| BatchSpec::Labeled(c.to_vec()))
        .collect();
    let ub: Vec<BatchSpec> = unlabeled
        .chunks(batch_size)
        .map(|c| BatchSpec::Unlabeled(c.to_vec()))
        .collect();
    if lb.is_empty() {
        return Ok(ub);
    }
    if ub.is_empty() {
        return Ok(lb);
    }
    let n = lb.len().max(ub.len());
    let mut out = Vec::with_capacity(2 * n);
    for i in 0..n {
        out.push(lb[i % lb.len()].clone());
        out.push(ub[i % ub.len()].clone());
    }
    Ok(out)
}

/// Parameters, optimizer moments and position in the schedule. The random
/// state is implied by `(seed, step)` and `(seed, epoch)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub optimizer: AdamState,
    /// Completed epochs.
    pub epoch: usize,
    pub seed: u64,
}

impl TrainState {
    pub fn new(params: ModelParams, seed: u64) -> Self {
        let optimizer = AdamState::new(params.num_params());
        Self {
            params,
            optimizer,
            epoch: 0,
            seed,
        }
    }

    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, TrainError> {
        Ok(Self::new(init_params(config, seed)?, seed))
    }

    /// Completed optimizer steps.
    pub fn step(&self) -> u64 {
        self.optimizer.step
    }
}

/// Outcome of one [`train_step`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    pub breakdown: LossBreakdown,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
}

/// Gradient of the batch loss under noise drawn from `(seed, step)`,
/// optional clipping, then one Adam update.
pub fn train_step(
    state: &mut TrainState,
    batch: &Batch<'_>,
    objective: &ObjectiveConfig,
    config: &TrainConfig,
) -> Result<StepOutcome, TrainError> {
    let step = state.step();
    let c = &state.params.config;
    let noise = BatchNoise::draw(
        &mut derived_rng(state.seed, TRAIN_NOISE, step),
        batch.labeled.len(),
        batch.unlabeled.len(),
        c.num_classes,
        objective.mc_samples,
        c.latent_dim,
    );
    let out = gradients(&state.params, batch, &noise, objective)?;
    if let Some(term) = out.breakdown.non_finite_term() {
        return Err(TrainError::NonFinite {
            step,
            term: term.to_string(),
        });
    }
    let mut grads = out.grads.to_flat();
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(TrainError::NonFinite {
            step,
            term: "gradient".into(),
        });
    }
    let grad_norm = match config.grad_clip_norm {
        Some(max) => clip_global_norm(&mut grads, max),
        None => grads.iter().map(|g| g * g).sum::<f64>().sqrt(),
    };
    let mut flat = state.params.to_flat();
    state.optimizer.update(&config.adam(), &mut flat, &grads);
    state.params.set_flat(&flat);
    Ok(StepOutcome {
        loss: out.loss,
        breakdown: out.breakdown,
        grad_norm,
    })
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetricRecord {
    Step {
        step: u64,
        epoch: usize,
        batch: BatchKind,
        size: usize,
        #[serde(flatten)]
        breakdown: LossBreakdown,
        grad_norm: f64,
    },
    Validation {
        step: u64,
        epoch: usize,
        train_loss: f64,
        #[serde(flatten)]
        breakdown: LossBreakdown,
    },
    Agreement {
        step: u64,
        epoch: usize,
        overall: f64,
        per_class: Vec<Option<f64>>,
    },
}

/// Where and whether to write artifacts, and an optional checkpoint to resume from.
#[derive(Default)]
pub struct FitOptions {
    /// Directory for checkpoints; nothing is written when `None`.
    pub out_dir: Option<PathBuf>,
    /// Receives one JSON object per line.
    pub metrics: Option<Box<dyn Write>>,
    pub resume: Option<Checkpoint>,
    pub class_names: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub state: TrainState,
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub best_val: Option<(EpochScore, ModelParams)>,
    pub best_agreement: Option<(EpochScore, ModelParams)>,
    pub metrics: Vec<MetricRecord>,
}

struct Run<'o> {
    meta: CheckpointMeta,
    metrics: Vec<MetricRecord>,
    sink: Option<&'o mut Box<dyn Write>>,
    out_dir: Option<&'o Path>,
}

impl Run<'_> {
    fn record(&mut self, m: MetricRecord) -> Result<(), TrainError> {
        if let Some(sink) = self.sink.as_mut() {
            serde_json::to_writer(&mut **sink, &m)?;
            sink.write_all(b"\n")?;
        }
        self.metrics.push(m);
        Ok(())
    }

    fn save(&self, name: &str, state: &TrainState, params: &ModelParams) -> Result<(), TrainError> {
        if let Some(dir) = self.out_dir {
            let mut meta = self.meta.clone();
            meta.epoch = state.epoch;
            meta.step = state.step();
            Checkpoint {
                params: params.clone(),
                optimizer: Some(state.optimizer.clone()),
                meta,
            }
            .save(&dir.join(name))?;
        }
        Ok(())
    }
}

/// Validation loss on the whole view with noise fixed by the seed, so
/// epochs are compared on equal terms.
pub fn validation_loss(
    params: &ModelParams,
    view: &CorpusView<'_>,
    objective: &ObjectiveConfig,
    seed: u64,
) -> Result<Option<LossBreakdown>, TrainError> {
    if view.is_empty() {
        return Ok(None);
    }
    let corpus = view.corpus;
    let batch = Batch {
        labeled: view.labeled.iter().map(|&(w, y)| (corpus.window(w), y)).collect(),
        unlabeled: view.unlabeled.iter().map(|&w| corpus.window(w)).collect(),
    };
    let c = &params.config;
    let noise = BatchNoise::draw(
        &mut derived_rng(seed, VALIDATION, 0),
        batch.labeled.len(),
        batch.unlabeled.len(),
        c.num_classes,
        objective.mc_samples,
        c.latent_dim,
    );
    Ok(Some(batch_loss(params, &batch, &noise, objective)?.1))
}

/// Conditional generation probe: overall label agreement of
/// `per_class` sequences per class, or `None` if the prior cannot be fitted.
pub fn agreement_probe(
    params: &ModelParams,
    train: &CorpusView<'_>,
    per_class: usize,
    seed: u64,
) -> Result<Option<crate::evaluation::Agreement>, TrainError> {
    let labeled: Vec<_> = train
        .labeled
        .iter()
        .map(|&(w, y)| (train.corpus.window(w), y))
        .collect();
    let prior = match fit_conditional_prior(params, &labeled) {
        Ok(p) => p,
        Err(e) => {
            log::debug!("agreement probe skipped: {e}");
            return Ok(None);
        }
    };
    let mut generated = Vec::new();
    for y in 0..params.config.num_classes {
        let seqs = generate(
            params,
            &prior,
            y,
            per_class,
            DEFAULT_TEMPERATURE,
            seed.wrapping_add(y as u64),
        )
        .map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
        generated.extend(seqs);
    }
    label_agreement(params, &generated)
        .map(Some)
        .map_err(|e| TrainError::InvalidConfig(e.to_string()))
}

/// Train for `config.epochs` epochs (counting any already completed by a
/// resumed checkpoint).
///
/// After every epoch the validation loss is recorded and the best-validation
/// parameters kept. Every `checkpoint_every` epochs, and after the last one,
/// the agreement probe runs and `last.ckpt` is written; `best_val.ckpt` and
/// `best_agreement.ckpt` are rewritten whenever their score improves.
pub fn fit(
    train: &CorpusView<'_>,
    val: Option<&CorpusView<'_>>,
    model: &ModelConfig,
    config: &TrainConfig,
    objective: &ObjectiveConfig,
    mut options: FitOptions,
) -> Result<FitResult, TrainError> {
    config.validate()?;
    objective.validate(model.num_classes)?;
    if train.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }
    let resumed = options.resume.take();
    let (mut state, meta) = match resumed {
        Some(ckpt) => {
            if ckpt.params.config != *model {
                return Err(TrainError::InvalidConfig(
                    "checkpoint model config differs from the requested one".into(),
                ));
            }
            let optimizer = ckpt
                .optimizer
                .unwrap_or_else(|| AdamState::new(ckpt.params.num_params()));
            let state = TrainState {
                params: ckpt.params,
                optimizer,
                epoch: ckpt.meta.epoch,
                seed: ckpt.meta.seed,
            };
            (state, ckpt.meta)
        }
        None => {
            let state = TrainState::init(model, config.seed)?;
            let meta = CheckpointMeta {
                seed: config.seed,
                ..Default::default()
            };
            (state, meta)
        }
    };
    let mut run = Run {
        meta: CheckpointMeta {
            class_names: options.class_names.clone(),
            objective: Some(objective.clone()),
            train: Some(config.clone()),
            ..meta
        },
        metrics: Vec::new(),
        sink: options.metrics.as_mut(),
        out_dir: options.out_dir.as_deref(),
    };
    let load_best = |name: &str| -> Option<ModelParams> {
        let dir = options.out_dir.as_deref()?;
        Checkpoint::load(&dir.join(name)).ok().map(|c| c.params)
    };
    let mut best_val = run
        .meta
        .best_val
        .and_then(|s| load_best(BEST_VAL_CHECKPOINT).map(|p| (s, p)));
    let mut best_agreement = run
        .meta
        .best_agreement
        .and_then(|s| load_best(BEST_AGREEMENT_CHECKPOINT).map(|p| (s, p)));

    let start_epoch = state.epoch;
    for epoch in start_epoch..config.epochs {
        let batches = make_batches(train, config.batch_size, state.seed, epoch)?;
        let mut total = 0.0;
        for spec in &batches {
            let batch = spec.resolve(train);
            let out = train_step(&mut state, &batch, objective, config)?;
            total += out.loss;
            run.record(MetricRecord::Step {
                step: state.step(),
                epoch,
                batch: spec.kind(),
                size: spec.len(),
                breakdown: out.breakdown,
                grad_norm: out.grad_norm,
            })?;
        }
        state.epoch = epoch + 1;
        let train_loss = total / batches.len().max(1) as f64;
        run.meta.train_loss.push(train_loss);

        if let Some(bd) = val
            .map(|v| validation_loss(&state.params, v, objective, state.seed))
            .transpose()?
            .flatten()
        {
            run.meta.val_loss.push(bd.total);
            run.record(MetricRecord::Validation {
                step: state.step(),
                epoch,
                train_loss,
                breakdown: bd,
            })?;
            log::info!("epoch {:>4}  train {:.6}  val {:.6}", epoch + 1, train_loss, bd.total);
            if best_val.as_ref().is_none_or(|(s, _)| bd.total < s.value) {
                let score = EpochScore {
                    epoch: epoch + 1,
                    value: bd.total,
                };
                run.meta.best_val = Some(score);
                run.save(BEST_VAL_CHECKPOINT, &state, &state.params)?;
                best_val = Some((score, state.params.clone()));
            }
        } else {
            log::info!("epoch {:>4}  train {:.6}", epoch + 1, train_loss);
        }

        let scheduled = config.checkpoint_every > 0 && (epoch + 1) % config.checkpoint_every == 0;
        if scheduled || epoch + 1 == config.epochs {
            if config.agreement_samples > 0 {
                if let Some(a) = agreement_probe(&state.params, train, config.agreement_samples, state.seed)? {
                    run.record(MetricRecord::Agreement {
                        step: state.step(),
                        epoch,
                        overall: a.overall,
                        per_class: a.per_class.clone(),
                    })?;
                    if best_agreement.as_ref().is_none_or(|(s, _)| a.overall > s.value) {
                        let score = EpochScore {
                            epoch: epoch + 1,
                            value: a.overall,
                        };
                        run.meta.best_agreement = Some(score);
                        run.save(BEST_AGREEMENT_CHECKPOINT, &state, &state.params)?;
                        best_agreement = Some((score, state.params.clone()));
                    }
                }
            }
            run.save(LAST_CHECKPOINT, &state, &state.params)?;
        }
        if let Some(sink) = run.sink.as_mut() {
            sink.flush()?;
        }
    }
    if start_epoch >= config.epochs {
        run.save(LAST_CHECKPOINT, &state, &state.params)?;
    }

    Ok(FitResult {
        train_loss: run.meta.train_loss.clone(),
        val_loss: run.meta.val_loss.clone(),
        state,
        best_val,
        best_agreement,
        metrics: run.metrics,
    })
}
