use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DataError, LabeledCorpus, WindowRef};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitFractions {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self, DataError> {
        let all_positive = [train, val, test].iter().all(|f| f.is_finite() && *f > 0.0);
        if !all_positive || (train + val + test - 1.0).abs() > 1e-9 {
            return Err(DataError::InvalidFractions);
        }
        Ok(Self { train, val, test })
    }

    /// `(train, val, test)` sizes for `n` items; val and test are rounded.
    fn sizes(&self, n: usize) -> (usize, usize, usize) {
        let val = (n as f64 * self.val).round() as usize;
        let test = (n as f64 * self.test).round() as usize;
        let train = n.saturating_sub(val + test);
        (train, val, test)
    }
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.92,
            val: 0.05,
            test: 0.03,
        }
    }
}

/// A subset of a corpus: labeled windows with their classes plus unlabeled windows.
#[derive(Debug, Clone)]
pub struct CorpusView<'a> {
    pub corpus: &'a LabeledCorpus,
    /// Indices into `corpus.records`.
    pub record_indices: Vec<usize>,
    pub labeled: Vec<(WindowRef, usize)>,
    pub unlabeled: Vec<WindowRef>,
}

impl<'a> CorpusView<'a> {
    /// The whole corpus: every record labeled, every other window unlabeled.
    pub fn full(corpus: &'a LabeledCorpus) -> Self {
        let labeled_refs: HashSet<WindowRef> = corpus.records.iter().map(|r| corpus.record_ref(r)).collect();
        Self {
            corpus,
            record_indices: (0..corpus.records.len()).collect(),
            labeled: corpus.records.iter().map(|r| (corpus.record_ref(r), r.label)).collect(),
            unlabeled: corpus
                .all_windows()
                .into_iter()
                .filter(|w| !labeled_refs.contains(w))
                .collect(),
        }
    }

    fn from_parts(corpus: &'a LabeledCorpus, records: Vec<usize>, unlabeled: Vec<WindowRef>) -> Self {
        let labeled = records
            .iter()
            .map(|&i| {
                let r = &corpus.records[i];
                (corpus.record_ref(r), r.label)
            })
            .collect();
        Self {
            corpus,
            record_indices: records,
            labeled,
            unlabeled,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.labeled.is_empty() && self.unlabeled.is_empty()
    }

    pub fn num_windows(&self) -> usize {
        self.labeled.len() + self.unlabeled.len()
    }
}

#[derive(Debug, Clone)]
pub struct CorpusSplits<'a> {
    pub train: CorpusView<'a>,
    pub val: CorpusView<'a>,
    pub test: CorpusView<'a>,
}

fn split_pool<T: Clone>(
    mut items: Vec<T>,
    fractions: &SplitFractions,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<T>, Vec<T>, Vec<T>), DataError> {
    items.shuffle(rng);
    let (train, val, test) = fractions.sizes(items.len());
    if !items.is_empty() {
        for (n, name) in [(train, "train"), (val, "val"), (test, "test")] {
            if n == 0 {
                return Err(DataError::EmptySplit(name));
            }
        }
    }
    let test_part = items.split_off(train + val);
    let val_part = items.split_off(train);
    Ok((items, val_part, test_part))
}

/// Deterministic train/val/test split.
///
/// Label records are split by the fractions; the windows that carry no
/// record are split separately by the same fractions. Labeled windows never
/// enter an unlabeled pool, so no window appears in two splits.
pub fn split_corpus(
    corpus: &LabeledCorpus,
    fractions: SplitFractions,
    seed: u64,
) -> Result<CorpusSplits<'_>, DataError> {
    let fractions = SplitFractions::new(fractions.train, fractions.val, fractions.test)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (rec_train, rec_val, rec_test) = split_pool((0..corpus.records.len()).collect(), &fractions, &mut rng)?;

    let labeled: HashSet<WindowRef> = corpus.records.iter().map(|r| corpus.record_ref(r)).collect();
    let unlabeled: Vec<WindowRef> = corpus
        .all_windows()
        .into_iter()
        .filter(|w| !labeled.contains(w))
        .collect();
    let (un_train, un_val, un_test) = split_pool(unlabeled, &fractions, &mut rng)?;

    Ok(CorpusSplits {
        train: CorpusView::from_parts(corpus, rec_train, un_train),
        val: CorpusView::from_parts(corpus, rec_val, un_val),
        test: CorpusView::from_parts(corpus, rec_test, un_test),
    })
}
