//! Keypoint datasets, sliding windows and choreographer labels.

mod augment;
mod kpd;
mod labels;
mod normalize;
mod split;
mod windows;

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use augment::{augment_between, augment_extend, max_starts, DEFAULT_EXTEND_RADIUS};
pub use kpd::{load_dataset, read_kpd, save_dataset, write_kpd, DatasetFormat};
pub use labels::{load_labels, read_labels, save_labels, write_labels, LABEL_CSV_HEADER};
pub use normalize::normalize;
pub use split::{split_corpus, CorpusSplits, CorpusView, SplitFractions};
pub use windows::{extract_windows, window_count};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("stream {stream}, frame {frame}: inconsistent joint count (expected {expected} values, found {found})")]
    InconsistentJoints {
        stream: String,
        frame: usize,
        expected: usize,
        found: usize,
    },
    #[error("stream {0} has no frames")]
    EmptyStream(String),
    #[error("stream {stream}, frame {frame}: non-finite coordinate")]
    NonFinite { stream: String, frame: usize },
    #[error("duplicate stream id {0}")]
    DuplicateStream(String),
    #[error("dataset has zero spatial extent")]
    Degenerate,
    #[error("dataset contains no streams")]
    NoStreams,
    #[error("window length {window} exceeds stream length {len}")]
    WindowTooLong { window: usize, len: usize },
    #[error("window length and stride must be positive")]
    ZeroWindow,
    #[error("manual records overlap on stream {stream} at starts {first} and {second}")]
    OverlappingManual {
        stream: String,
        first: usize,
        second: usize,
    },
    #[error("record at {stream}:{start} has length {found}, expected {expected}")]
    LengthMismatch {
        stream: String,
        start: usize,
        expected: usize,
        found: usize,
    },
    #[error("duplicate label record for {stream}:{start}")]
    DuplicateRecord { stream: String, start: usize },
    #[error("unknown stream {0}")]
    UnknownStream(String),
    #[error("record {stream}:{start} does not reference an extractable window")]
    WindowOutOfRange { stream: String, start: usize },
    #[error("unknown label {label:?}; valid labels are {valid}")]
    UnknownLabel { label: String, valid: String },
    #[error("label index {0} outside the configured classes")]
    LabelOutOfRange(usize),
    #[error("fractions must be positive and sum to 1")]
    InvalidFractions,
    #[error("split {0} would be empty; corpus too small for the requested fractions")]
    EmptySplit(&'static str),
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

/// One body frame: `J` joints by 3 coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose(pub Array2<f64>);

impl Pose {
    pub fn num_joints(&self) -> usize {
        self.0.nrows()
    }
}

/// One uninterrupted capture.
///
/// Frames are stored flattened, one row per frame laid out `x1 y1 z1 x2 ...`.
#[derive(Debug, Clone, PartialEq)]
pub struct DanceStream {
    pub id: String,
    pub num_joints: usize,
    pub frame_rate_hz: f64,
    frames: Array2<f64>,
}

impl DanceStream {
    pub fn new(
        id: impl Into<String>,
        num_joints: usize,
        frame_rate_hz: f64,
        frames: Array2<f64>,
    ) -> Result<Self, DataError> {
        let id = id.into();
        if frames.nrows() == 0 || num_joints == 0 {
            return Err(DataError::EmptyStream(id));
        }
        if frames.ncols() != 3 * num_joints {
            return Err(DataError::InconsistentJoints {
                stream: id,
                frame: 0,
                expected: 3 * num_joints,
                found: frames.ncols(),
            });
        }
        if !(frame_rate_hz.is_finite() && frame_rate_hz > 0.0) {
            return Err(DataError::Parse {
                line: 0,
                msg: format!("stream {id}: frame rate must be positive"),
            });
        }
        if let Some((frame, _)) = frames
            .rows()
            .into_iter()
            .enumerate()
            .find(|(_, r)| r.iter().any(|v| !v.is_finite()))
        {
            return Err(DataError::NonFinite { stream: id, frame });
        }
        Ok(Self {
            id,
            num_joints,
            frame_rate_hz,
            frames,
        })
    }

    pub fn from_poses(id: impl Into<String>, frame_rate_hz: f64, poses: &[Pose]) -> Result<Self, DataError> {
        let id = id.into();
        let j = poses
            .first()
            .ok_or_else(|| DataError::EmptyStream(id.clone()))?
            .num_joints();
        let mut frames = Array2::zeros((poses.len(), 3 * j));
        for (t, pose) in poses.iter().enumerate() {
            if pose.num_joints() != j || pose.0.ncols() != 3 {
                return Err(DataError::InconsistentJoints {
                    stream: id,
                    frame: t,
                    expected: 3 * j,
                    found: pose.0.len(),
                });
            }
            frames
                .row_mut(t)
                .assign(&pose.0.to_shape(3 * j).expect("pose rows are contiguous"));
        }
        Self::new(id, j, frame_rate_hz, frames)
    }

    pub fn len(&self) -> usize {
        self.frames.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.nrows() == 0
    }

    /// Flattened frames, `len × 3J`.
    pub fn frames(&self) -> &Array2<f64> {
        &self.frames
    }

    pub(crate) fn frames_mut(&mut self) -> &mut Array2<f64> {
        &mut self.frames
    }

    pub fn pose(&self, index: usize) -> Pose {
        let row = self.frames.row(index).to_owned();
        Pose(row.into_shape_with_order((self.num_joints, 3)).expect("3J row"))
    }

    /// Rows `start..start+length`, or `None` if the window does not fit.
    pub fn window_view(&self, start: usize, length: usize) -> Option<ArrayView2<'_, f64>> {
        let end = start.checked_add(length)?;
        (length > 0 && end <= self.len()).then(|| self.frames.slice(ndarray::s![start..end, ..]))
    }
}

/// `T` consecutive poses of one stream; the model's unit input.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceWindow {
    pub stream_id: String,
    pub start: usize,
    /// `T × 3J`; row `t` is flattened pose `start + t`.
    pub data: Array2<f64>,
}

impl SequenceWindow {
    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.nrows() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Manual,
    BetweenFill,
    FrameExtension,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Manual => "manual",
            Provenance::BetweenFill => "between_fill",
            Provenance::FrameExtension => "frame_extension",
        }
    }

    /// Lower is stronger when augmented labels disagree.
    pub(crate) fn priority(self) -> u8 {
        match self {
            Provenance::Manual => 0,
            Provenance::BetweenFill => 1,
            Provenance::FrameExtension => 2,
        }
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Provenance {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "manual" => Ok(Provenance::Manual),
            "between_fill" => Ok(Provenance::BetweenFill),
            "frame_extension" => Ok(Provenance::FrameExtension),
            other => Err(format!("unknown provenance {other:?}")),
        }
    }
}

/// Ordered class names; index `k` is class `k`. Lookup is case-insensitive.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassNames(Vec<String>);

impl Default for ClassNames {
    fn default() -> Self {
        Self::new(["low", "medium", "high"]).expect("non-empty")
    }
}

impl ClassNames {
    pub fn new<I, S>(names: I) -> Option<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let names: Vec<String> = names.into_iter().map(|s| s.as_ref().trim().to_lowercase()).collect();
        let mut seen = std::collections::HashSet::new();
        let valid = !names.is_empty() && names.iter().all(|n| !n.is_empty() && seen.insert(n.clone()));
        valid.then_some(Self(names))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.0
    }

    pub fn name(&self, index: usize) -> Option<&str> {
        self.0.get(index).map(String::as_str)
    }

    pub fn index_of(&self, label: &str) -> Result<usize, DataError> {
        let needle = label.trim().to_lowercase();
        self.0
            .iter()
            .position(|n| *n == needle)
            .ok_or_else(|| DataError::UnknownLabel {
                label: label.to_string(),
                valid: self.0.join(", "),
            })
    }
}

/// A choreographer's (or augmentation rule's) label on one window.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabelRecord {
    pub stream_id: String,
    pub start: usize,
    pub length: usize,
    pub label: usize,
    pub provenance: Provenance,
}

impl LabelRecord {
    pub fn manual(stream_id: impl Into<String>, start: usize, length: usize, label: usize) -> Self {
        Self {
            stream_id: stream_id.into(),
            start,
            length,
            label,
            provenance: Provenance::Manual,
        }
    }
}

/// A window addressed by stream position (not id) and start frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct WindowRef {
    pub stream: usize,
    pub start: usize,
}

/// Streams plus the label records on their windows.
#[derive(Debug, Clone)]
pub struct LabeledCorpus {
    pub streams: Vec<DanceStream>,
    pub records: Vec<LabelRecord>,
    pub window_length: usize,
    pub stride: usize,
    pub class_names: ClassNames,
    stream_index: HashMap<String, usize>,
}

impl LabeledCorpus {
    pub fn new(
        streams: Vec<DanceStream>,
        records: Vec<LabelRecord>,
        window_length: usize,
        stride: usize,
        class_names: ClassNames,
    ) -> Result<Self, DataError> {
        if window_length == 0 || stride == 0 {
            return Err(DataError::ZeroWindow);
        }
        let mut stream_index = HashMap::new();
        for (i, s) in streams.iter().enumerate() {
            if stream_index.insert(s.id.clone(), i).is_some() {
                return Err(DataError::DuplicateStream(s.id.clone()));
            }
        }
        let mut seen = std::collections::HashSet::new();
        for r in &records {
            let stream = stream_index
                .get(&r.stream_id)
                .map(|&i| &streams[i])
                .ok_or_else(|| DataError::UnknownStream(r.stream_id.clone()))?;
            if r.length != window_length {
                return Err(DataError::LengthMismatch {
                    stream: r.stream_id.clone(),
                    start: r.start,
                    expected: window_length,
                    found: r.length,
                });
            }
            if stream.window_view(r.start, r.length).is_none() {
                return Err(DataError::WindowOutOfRange {
                    stream: r.stream_id.clone(),
                    start: r.start,
                });
            }
            if r.label >= class_names.len() {
                return Err(DataError::LabelOutOfRange(r.label));
            }
            if !seen.insert((r.stream_id.as_str(), r.start)) {
                return Err(DataError::DuplicateRecord {
                    stream: r.stream_id.clone(),
                    start: r.start,
                });
            }
        }
        Ok(Self {
            streams,
            records,
            window_length,
            stride,
            class_names,
            stream_index,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn stream_position(&self, id: &str) -> Option<usize> {
        self.stream_index.get(id).copied()
    }

    pub fn input_dim(&self) -> usize {
        self.streams.first().map_or(0, |s| 3 * s.num_joints)
    }

    pub fn window(&self, w: WindowRef) -> ArrayView2<'_, f64> {
        self.streams[w.stream]
            .window_view(w.start, self.window_length)
            .expect("window refs are validated on construction")
    }

    pub fn record_ref(&self, record: &LabelRecord) -> WindowRef {
        WindowRef {
            stream: self.stream_index[&record.stream_id],
            start: record.start,
        }
    }

    /// Every window at the corpus stride, stream by stream.
    pub fn all_windows(&self) -> Vec<WindowRef> {
        self.streams
            .iter()
            .enumerate()
            .flat_map(|(si, s)| {
                let n = window_count(s.len(), self.window_length, self.stride);
                (0..n).map(move |i| WindowRef {
                    stream: si,
                    start: i * self.stride,
                })
            })
            .collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for r in &self.records {
            counts[r.label] += 1;
        }
        counts
    }
}
