//! Diversity metric, conditional label agreement, the benchmark report and
//! a synthetic toy corpus with known classes.

use std::f64::consts::PI;
use std::fmt::Write as _;

use ndarray::{Array2, ArrayView2};
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{ClassNames, CorpusView, DanceStream, LabelRecord, LabeledCorpus, WindowRef};
use crate::generation::{encode_means, generate, ClassConditionalPrior, GeneratedSequence, GenerationError};
use crate::model::{ConditionalModel, ModelError, ModelParams};
use crate::seeding::{derived_rng, EVALUATION};

pub const DEFAULT_NUM_PAIRS: usize = 10_000;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("diversity needs at least 2 features, got {0}")]
    TooFewFeatures(usize),
    #[error("num_pairs must be >= 1")]
    NoPairs,
    #[error("test split is empty")]
    EmptyTest,
    #[error("expected {expected} per-class counts, got {found}")]
    CountMismatch { expected: usize, found: usize },
    #[error(transparent)]
    Generation(#[from] GenerationError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Mean Euclidean distance over `num_pairs` random index pairs `i ≠ j`.
pub fn diversity(features: &[Vec<f64>], num_pairs: usize, seed: u64) -> Result<f64, EvalError> {
    let n = features.len();
    if n < 2 {
        return Err(EvalError::TooFewFeatures(n));
    }
    if num_pairs == 0 {
        return Err(EvalError::NoPairs);
    }
    let mut rng = derived_rng(seed, EVALUATION, 0);
    let mut total = 0.0;
    for _ in 0..num_pairs {
        let i = rng.random_range(0..n);
        let mut j = rng.random_range(0..n - 1);
        if j >= i {
            j += 1;
        }
        total += distance(&features[i], &features[j]);
    }
    Ok(total / num_pairs as f64)
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Agreement between requested labels and classifier predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Agreement {
    pub overall: f64,
    /// `None` for classes that were never requested.
    pub per_class: Vec<Option<f64>>,
    /// Sequences requested per class.
    pub counts: Vec<usize>,
    /// Predictions where the top probability was shared by several classes.
    pub ties: usize,
}

/// Fraction of sequences whose arg-max class equals the requested one.
/// Ties go to the lowest class index and are tallied.
pub fn label_agreement<M>(model: &M, generated: &[GeneratedSequence]) -> Result<Agreement, EvalError>
where
    M: ConditionalModel + Sync + ?Sized,
{
    let predictions = generated
        .par_iter()
        .map(|g| model.classify(g.frames.view()).map(|p| p.argmax_with_tie()))
        .collect::<Result<Vec<_>, _>>()?;
    let requested: Vec<usize> = generated.iter().map(|g| g.label).collect();
    Ok(tally(&requested, &predictions, model.num_classes()))
}

fn tally(requested: &[usize], predictions: &[(usize, bool)], num_classes: usize) -> Agreement {
    let mut counts = vec![0usize; num_classes];
    let mut hits = vec![0usize; num_classes];
    let mut ties = 0;
    for (&y, &(pred, tie)) in requested.iter().zip(predictions) {
        counts[y] += 1;
        if pred == y {
            hits[y] += 1;
        }
        if tie {
            ties += 1;
        }
    }
    let total: usize = counts.iter().sum();
    Agreement {
        overall: if total == 0 {
            0.0
        } else {
            hits.iter().sum::<usize>() as f64 / total as f64
        },
        per_class: hits
            .iter()
            .zip(&counts)
            .map(|(&h, &c)| (c > 0).then(|| h as f64 / c as f64))
            .collect(),
        counts,
        ties,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Sequences generated per class.
    pub counts: Vec<usize>,
    pub temperature: f64,
    pub seed: u64,
    pub num_pairs: usize,
}

impl EvalConfig {
    pub fn uniform(num_classes: usize, per_class: usize, seed: u64) -> Self {
        Self {
            counts: vec![per_class; num_classes],
            temperature: crate::generation::DEFAULT_TEMPERATURE,
            seed,
            num_pairs: DEFAULT_NUM_PAIRS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub class_names: Vec<String>,
    pub diversity_generated: f64,
    pub diversity_test: f64,
    pub diversity_ratio: f64,
    pub agreement_overall: f64,
    pub agreement_per_class: Vec<Option<f64>>,
    pub agreement_ties: usize,
    pub generated_per_class: Vec<usize>,
    pub num_generated: usize,
    pub num_test_windows: usize,
    /// Features per set entering each diversity estimate.
    pub diversity_sample_size: usize,
    pub num_pairs: usize,
    pub temperature: f64,
    pub seed: u64,
}

impl EvalReport {
    /// Aligned plain-text rendering.
    pub fn to_table(&self) -> String {
        let mut rows: Vec<(String, String)> = vec![
            (
                "diversity (generated)".into(),
                format!("{:.4}", self.diversity_generated),
            ),
            ("diversity (test)".into(), format!("{:.4}", self.diversity_test)),
            ("diversity ratio".into(), format!("{:.4}", self.diversity_ratio)),
            ("agreement (overall)".into(), format!("{:.3}", self.agreement_overall)),
        ];
        for (i, rate) in self.agreement_per_class.iter().enumerate() {
            let name = self.class_names.get(i).cloned().unwrap_or_else(|| i.to_string());
            let value = match rate {
                Some(r) => format!("{r:.3} (n={})", self.generated_per_class[i]),
                None => "-".into(),
            };
            rows.push((format!("agreement ({name})"), value));
        }
        rows.push(("agreement ties".into(), self.agreement_ties.to_string()));
        rows.push(("generated sequences".into(), self.num_generated.to_string()));
        rows.push(("test windows".into(), self.num_test_windows.to_string()));
        rows.push(("diversity sample size".into(), self.diversity_sample_size.to_string()));
        rows.push(("pairs".into(), self.num_pairs.to_string()));
        rows.push(("temperature".into(), self.temperature.to_string()));
        rows.push(("seed".into(), self.seed.to_string()));
        let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        let mut out = String::new();
        for (k, v) in rows {
            let _ = writeln!(out, "{k:<width$}  {v}");
        }
        out
    }
}

/// Encoder means for windows, each encoded under its predicted class.
fn predicted_class_means(params: &ModelParams, windows: &[ArrayView2<'_, f64>]) -> Result<Vec<Vec<f64>>, ModelError> {
    let preds = windows
        .par_chunks(64)
        .map(|c| params.classify_batch(c))
        .collect::<Result<Vec<_>, _>>()?;
    let items: Vec<(ArrayView2<'_, f64>, usize)> = windows
        .iter()
        .cloned()
        .zip(preds.into_iter().flatten().map(|p| p.argmax()))
        .collect();
    Ok(encode_means(params, &items)?.into_iter().map(|(z, _)| z).collect())
}

fn subsample(mut features: Vec<Vec<f64>>, n: usize, seed: u64, index: u64) -> Vec<Vec<f64>> {
    if features.len() <= n {
        return features;
    }
    let mut picked = sample(&mut derived_rng(seed, EVALUATION, index), features.len(), n).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| std::mem::take(&mut features[i])).collect()
}

/// Generate `config.counts[y]` sequences per class, compare their feature
/// diversity with the test windows', and score label agreement.
///
/// Features are encoder posterior means, each window encoded under the class
/// the classifier assigns it, so generated and test windows are treated
/// alike. The larger feature set is subsampled to the size of the smaller.
pub fn evaluate(
    params: &ModelParams,
    prior: &ClassConditionalPrior,
    test: &CorpusView<'_>,
    config: &EvalConfig,
) -> Result<EvalReport, EvalError> {
    let k = params.config.num_classes;
    if config.counts.len() != k {
        return Err(EvalError::CountMismatch {
            expected: k,
            found: config.counts.len(),
        });
    }
    if test.is_empty() {
        return Err(EvalError::EmptyTest);
    }
    let mut generated = Vec::new();
    for (y, &count) in config.counts.iter().enumerate() {
        let class_seed: u64 = derived_rng(config.seed, EVALUATION, 1 + y as u64).random();
        generated.extend(generate(params, prior, y, count, config.temperature, class_seed)?);
    }
    let agreement = label_agreement(params, &generated)?;

    let gen_windows: Vec<ArrayView2<'_, f64>> = generated.iter().map(|g| g.frames.view()).collect();
    let test_windows: Vec<ArrayView2<'_, f64>> = test
        .labeled
        .iter()
        .map(|(w, _)| *w)
        .chain(test.unlabeled.iter().copied())
        .map(|w| test.corpus.window(w))
        .collect();
    let n = gen_windows.len().min(test_windows.len());
    let gen_features = subsample(predicted_class_means(params, &gen_windows)?, n, config.seed, 1000);
    let test_features = subsample(predicted_class_means(params, &test_windows)?, n, config.seed, 1001);
    let diversity_generated = diversity(&gen_features, config.num_pairs, config.seed)?;
    let diversity_test = diversity(&test_features, config.num_pairs, config.seed)?;

    Ok(EvalReport {
        class_names: test.corpus.class_names.names().to_vec(),
        diversity_generated,
        diversity_test,
        diversity_ratio: diversity_generated / diversity_test,
        agreement_overall: agreement.overall,
        agreement_per_class: agreement.per_class,
        agreement_ties: agreement.ties,
        generated_per_class: agreement.counts,
        num_generated: generated.len(),
        num_test_windows: test_windows.len(),
        diversity_sample_size: n,
        num_pairs: config.num_pairs,
        temperature: config.temperature,
        seed: config.seed,
    })
}

/// Temporal frequency of each toy class, in cycles per window.
pub const TOY_CYCLES_PER_WINDOW: [f64; 3] = [1.0, 2.0, 4.0];
pub const TOY_JOINTS: usize = 5;
pub const TOY_FRAME_RATE_HZ: f64 = 35.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyConfig {
    pub num_streams: usize,
    pub frames_per_stream: usize,
    pub window_length: usize,
    pub noise_level: f64,
    pub labeled_fraction: f64,
}

impl Default for ToyConfig {
    /// 12 streams of 289 frames: 3,000 windows of 40 frames, 30 of them labeled.
    fn default() -> Self {
        Self {
            num_streams: 12,
            frames_per_stream: 289,
            window_length: 40,
            noise_level: 0.02,
            labeled_fraction: 0.01,
        }
    }
}

/// A synthetic corpus whose every window has a known class.
#[derive(Debug, Clone)]
pub struct ToyCorpus {
    pub corpus: LabeledCorpus,
    /// Ground-truth class of each stream (all its windows share it).
    pub stream_classes: Vec<usize>,
}

impl ToyCorpus {
    pub fn true_class(&self, w: WindowRef) -> usize {
        self.stream_classes[w.stream]
    }
}

// Rest pose and swing direction per joint: pelvis, head, two hands, feet.
const TOY_REST: [[f64; 3]; TOY_JOINTS] = [
    [0.5, 0.5, 0.5],
    [0.5, 0.5, 0.85],
    [0.3, 0.5, 0.6],
    [0.7, 0.5, 0.6],
    [0.5, 0.5, 0.15],
];
const TOY_SWING: [[f64; 3]; TOY_JOINTS] = [
    [0.0, 0.3, 0.4],
    [0.6, 0.4, 0.0],
    [0.8, 0.0, 0.6],
    [-0.8, 0.0, 0.6],
    [0.6, -0.8, 0.0],
];

// Fixed phase lag of each joint behind the pelvis.
const TOY_PHASE_LAG: [f64; TOY_JOINTS] = [0.0, 0.5 * PI, PI, 0.0, 1.5 * PI];

/// [`make_toy_corpus_with`] on the default layout.
pub fn make_toy_corpus(seed: u64, num_streams: usize, noise_level: f64) -> ToyCorpus {
    make_toy_corpus_with(
        &ToyConfig {
            num_streams,
            noise_level,
            ..ToyConfig::default()
        },
        seed,
    )
}

/// Five-joint skeletons swinging sinusoidally. Stream `s` has class `s mod 3`
/// and oscillates at that class's frequency with a per-stream amplitude and
/// phase, each joint lagging by a fixed offset. I.i.d. Gaussian noise of
/// standard deviation `noise_level` is added to every coordinate.
///
/// `round(labeled_fraction · windows)` windows are labeled. They are spread
/// round-robin over the streams and never overlap one another.
pub fn make_toy_corpus_with(config: &ToyConfig, seed: u64) -> ToyCorpus {
    assert!(config.noise_level >= 0.0, "noise_level must be >= 0");
    assert!(config.frames_per_stream >= config.window_length && config.window_length > 0);
    let mut rng = derived_rng(seed, EVALUATION, 1 << 20);
    let noise = Normal::new(0.0, config.noise_level).expect("finite noise level");
    let t_len = config.window_length as f64;
    let k = TOY_CYCLES_PER_WINDOW.len();

    let mut streams = Vec::with_capacity(config.num_streams);
    let mut stream_classes = Vec::with_capacity(config.num_streams);
    for s in 0..config.num_streams {
        let class = s % k;
        let omega = 2.0 * PI * TOY_CYCLES_PER_WINDOW[class] / t_len;
        let amplitude = rng.random_range(0.2..0.3);
        let stream_phase = rng.random_range(0.0..2.0 * PI);
        let phases: Vec<f64> = TOY_PHASE_LAG.iter().map(|lag| stream_phase + lag).collect();
        let mut frames = Array2::zeros((config.frames_per_stream, 3 * TOY_JOINTS));
        for t in 0..config.frames_per_stream {
            for j in 0..TOY_JOINTS {
                let wave = (omega * t as f64 + phases[j]).sin();
                for c in 0..3 {
                    let mut v = TOY_REST[j][c] + amplitude * TOY_SWING[j][c] * wave;
                    if config.noise_level > 0.0 {
                        v += noise.sample(&mut rng);
                    }
                    frames[[t, 3 * j + c]] = v;
                }
            }
        }
        streams.push(
            DanceStream::new(format!("toy{s:02}"), TOY_JOINTS, TOY_FRAME_RATE_HZ, frames)
                .expect("toy frames are finite"),
        );
        stream_classes.push(class);
    }

    let per_stream = config.frames_per_stream - config.window_length + 1;
    let total = per_stream * config.num_streams;
    let wanted = (config.labeled_fraction * total as f64).round() as usize;
    let mut records = Vec::with_capacity(wanted);
    let mut next_free = vec![0usize; config.num_streams];
    let mut i = 0;
    while records.len() < wanted && i < wanted * config.num_streams.max(1) {
        let s = i % config.num_streams;
        i += 1;
        let last_start = config.frames_per_stream - config.window_length;
        if next_free[s] > last_start {
            continue;
        }
        let jitter = rng
            .random_range(0..=config.window_length / 2)
            .min(last_start - next_free[s]);
        let start = next_free[s] + jitter;
        next_free[s] = start + 2 * config.window_length;
        records.push(LabelRecord::manual(
            streams[s].id.clone(),
            start,
            config.window_length,
            stream_classes[s],
        ));
    }

    let corpus = LabeledCorpus::new(streams, records, config.window_length, 1, ClassNames::default())
        .expect("toy records reference valid windows");
    ToyCorpus { corpus, stream_classes }
}

/// Class whose toy frequency is nearest the dominant DFT bin of `window`.
///
/// Each coordinate track is mean-centred; the power spectra of all tracks
/// are summed and the peak over bins `1..=T/2` is taken.
pub fn fourier_class(window: ArrayView2<'_, f64>) -> usize {
    let steps = window.nrows();
    let mut power = vec![0.0; steps / 2 + 1];
    for track in window.columns() {
        let mean = track.mean().unwrap_or(0.0);
        for (bin, p) in power.iter_mut().enumerate().skip(1) {
            let (mut re, mut im) = (0.0, 0.0);
            for (t, v) in track.iter().enumerate() {
                let angle = 2.0 * PI * (bin * t) as f64 / steps as f64;
                re += (v - mean) * angle.cos();
                im -= (v - mean) * angle.sin();
            }
            *p += re * re + im * im;
        }
    }
    let peak = (1..power.len())
        .max_by(|&a, &b| power[a].total_cmp(&power[b]))
        .unwrap_or(1) as f64;
    let mut best = 0;
    for (c, f) in TOY_CYCLES_PER_WINDOW.iter().enumerate() {
        if (f - peak).abs() < (TOY_CYCLES_PER_WINDOW[best] - peak).abs() {
            best = c;
        }
    }
    best
}
