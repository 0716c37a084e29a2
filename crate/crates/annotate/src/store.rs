//! Durable label CSV with append-only new rows and journaled relabels.

use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use kinevae_core::checkpoint::write_atomic;
use kinevae_core::data::{load_labels, write_labels, DataError};
use kinevae_core::{ClassNames, LabelRecord};
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("label store I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("label store contents: {0}")]
    Data(#[from] DataError),
    #[error("label store journal: {0}")]
    Json(#[from] serde_json::Error),
}

/// What [`LabelStore::upsert`] did.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Upsert {
    Appended,
    /// The window already had a record; it was replaced in place.
    Replaced {
        previous: LabelRecord,
    },
}

#[derive(Serialize)]
struct JournalEntry<'a> {
    stream_id: &'a str,
    start: usize,
    length: usize,
    previous_label: &'a str,
    previous_provenance: &'a str,
    label: &'a str,
}

/// In-memory mirror of the label CSV.
///
/// A new window is appended as one row and synced before `upsert` returns.
/// Relabeling a window first appends an entry to `<path>.journal`, then
/// rewrites the CSV through a temporary file and rename.
#[derive(Debug)]
pub struct LabelStore {
    path: PathBuf,
    journal: PathBuf,
    classes: ClassNames,
    records: Vec<LabelRecord>,
    index: HashMap<(String, usize), usize>,
}

impl LabelStore {
    /// Load `path`, creating it with just the header when missing.
    pub fn open(path: &Path, classes: ClassNames) -> Result<Self, StoreError> {
        let records = if path.exists() && fs::metadata(path)?.len() > 0 {
            load_labels(path, &classes)?
        } else {
            ensure_parent(path)?;
            let mut buf = Vec::new();
            write_labels(&mut buf, &[], &classes)?;
            write_atomic(path, &buf)?;
            Vec::new()
        };
        let index = records
            .iter()
            .enumerate()
            .map(|(i, r)| ((r.stream_id.clone(), r.start), i))
            .collect();
        let mut journal = path.as_os_str().to_owned();
        journal.push(".journal");
        Ok(Self {
            path: path.to_path_buf(),
            journal: PathBuf::from(journal),
            classes,
            records,
            index,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn journal_path(&self) -> &Path {
        &self.journal
    }

    pub fn classes(&self) -> &ClassNames {
        &self.classes
    }

    /// Records in insertion order.
    pub fn records(&self) -> &[LabelRecord] {
        &self.records
    }

    /// Persist `record`; returns only after the data reached the disk.
    pub fn upsert(&mut self, record: LabelRecord) -> Result<Upsert, StoreError> {
        let key = (record.stream_id.clone(), record.start);
        match self.index.get(&key).copied() {
            None => {
                let mut buf = Vec::new();
                write_labels(&mut buf, std::slice::from_ref(&record), &self.classes)?;
                let row = &buf[buf.iter().position(|&b| b == b'\n').map_or(0, |i| i + 1)..];
                let mut f = OpenOptions::new().append(true).open(&self.path)?;
                f.write_all(row)?;
                f.sync_data()?;
                self.index.insert(key, self.records.len());
                self.records.push(record);
                Ok(Upsert::Appended)
            }
            Some(i) => {
                let previous = self.records[i].clone();
                self.append_journal(&previous, &record)?;
                let mut next = self.records.clone();
                next[i] = record;
                let mut buf = Vec::new();
                write_labels(&mut buf, &next, &self.classes)?;
                write_atomic(&self.path, &buf)?;
                self.records = next;
                Ok(Upsert::Replaced { previous })
            }
        }
    }

    fn append_journal(&self, previous: &LabelRecord, record: &LabelRecord) -> Result<(), StoreError> {
        let name = |y: usize| self.classes.name(y).unwrap_or("?");
        let entry = JournalEntry {
            stream_id: &record.stream_id,
            start: record.start,
            length: record.length,
            previous_label: name(previous.label),
            previous_provenance: previous.provenance.as_str(),
            label: name(record.label),
        };
        let mut line = serde_json::to_vec(&entry)?;
        line.push(b'\n');
        let mut f = OpenOptions::new().create(true).append(true).open(&self.journal)?;
        f.write_all(&line)?;
        f.sync_data()?;
        Ok(())
    }
}

/// Create `path`'s parent directory if needed.
fn ensure_parent(path: &Path) -> std::io::Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => fs::create_dir_all(p),
        _ => Ok(()),
    }
}
