//! Label augmentation: filling between same-label neighbours and extending
//! each label to nearby window starts.

use std::collections::{BTreeMap, HashMap, HashSet};

use super::{DanceStream, DataError, LabelRecord, Provenance};

pub const DEFAULT_EXTEND_RADIUS: usize = 6;

/// Largest valid window start per stream for windows of length `window`.
pub fn max_starts(streams: &[DanceStream], window: usize) -> HashMap<String, usize> {
    streams
        .iter()
        .filter(|s| s.len() >= window)
        .map(|s| (s.id.clone(), s.len() - window))
        .collect()
}

/// Ranking of a proposed record; the smallest key wins a contested start.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct CandidateKey {
    priority: u8,
    distance: usize,
    source_start: usize,
}

#[derive(Default)]
struct Candidates {
    // (stream order, start) -> (key, label, length)
    best: BTreeMap<(usize, usize), (CandidateKey, usize, usize)>,
}

impl Candidates {
    fn offer(&mut self, stream: usize, start: usize, key: CandidateKey, label: usize, length: usize) {
        self.best
            .entry((stream, start))
            .and_modify(|cur| {
                if key < cur.0 {
                    *cur = (key, label, length);
                }
            })
            .or_insert((key, label, length));
    }

    fn into_records(self, stream_ids: &[&str], provenance: Provenance) -> Vec<LabelRecord> {
        self.best
            .into_iter()
            .map(|((s, start), (_, label, length))| LabelRecord {
                stream_id: stream_ids[s].to_string(),
                start,
                length,
                label,
                provenance,
            })
            .collect()
    }
}

/// Records grouped by stream in order of first appearance, each group sorted by start.
fn group_by_stream(records: &[LabelRecord]) -> (Vec<&str>, Vec<Vec<&LabelRecord>>) {
    let mut ids: Vec<&str> = Vec::new();
    let mut index: HashMap<&str, usize> = HashMap::new();
    let mut groups: Vec<Vec<&LabelRecord>> = Vec::new();
    for r in records {
        let g = *index.entry(r.stream_id.as_str()).or_insert_with(|| {
            ids.push(r.stream_id.as_str());
            groups.push(Vec::new());
            ids.len() - 1
        });
        groups[g].push(r);
    }
    for g in &mut groups {
        g.sort_by_key(|r| r.start);
    }
    (ids, groups)
}

/// Label every window whose poses all lie in two same-label windows.
///
/// For same-label records at starts `s1 < s2 <= s1 + window` on one stream,
/// every start strictly between them is labeled with provenance
/// `between_fill`. Existing records are returned unchanged and first.
pub fn augment_between(records: &[LabelRecord], window: usize) -> Result<Vec<LabelRecord>, DataError> {
    let mut existing = HashSet::new();
    for r in records {
        if r.length != window {
            return Err(DataError::LengthMismatch {
                stream: r.stream_id.clone(),
                start: r.start,
                expected: window,
                found: r.length,
            });
        }
        if !existing.insert((r.stream_id.as_str(), r.start)) {
            return Err(DataError::DuplicateRecord {
                stream: r.stream_id.clone(),
                start: r.start,
            });
        }
    }

    let (ids, groups) = group_by_stream(records);
    for group in &groups {
        let manual: Vec<_> = group.iter().filter(|r| r.provenance == Provenance::Manual).collect();
        for pair in manual.windows(2) {
            if pair[1].start < pair[0].start + window {
                return Err(DataError::OverlappingManual {
                    stream: pair[0].stream_id.clone(),
                    first: pair[0].start,
                    second: pair[1].start,
                });
            }
        }
    }

    let mut candidates = Candidates::default();
    for (si, group) in groups.iter().enumerate() {
        for (i, a) in group.iter().enumerate() {
            for b in group[i + 1..].iter().take_while(|b| b.start <= a.start + window) {
                if a.label != b.label {
                    continue;
                }
                let priority = a.provenance.priority().max(b.provenance.priority());
                for p in a.start + 1..b.start {
                    if existing.contains(&(ids[si], p)) {
                        continue;
                    }
                    let key = CandidateKey {
                        priority,
                        distance: (p - a.start).min(b.start - p),
                        source_start: a.start,
                    };
                    candidates.offer(si, p, key, a.label, window);
                }
            }
        }
    }

    let mut out = records.to_vec();
    out.extend(candidates.into_records(&ids, Provenance::BetweenFill));
    Ok(out)
}

/// Extend every label to the starts within `radius` frames of it.
///
/// Starts are clipped at 0 and, when `max_start` knows the stream, at its
/// last valid window start. Contested starts go to the source with the
/// strongest provenance, then the nearest source, then the earlier source.
/// Existing records are never replaced.
pub fn augment_extend(
    records: &[LabelRecord],
    radius: usize,
    max_start: Option<&HashMap<String, usize>>,
) -> Vec<LabelRecord> {
    let existing: HashSet<(&str, usize)> = records.iter().map(|r| (r.stream_id.as_str(), r.start)).collect();
    let (ids, groups) = group_by_stream(records);

    let mut candidates = Candidates::default();
    for (si, group) in groups.iter().enumerate() {
        let upper = max_start.and_then(|m| m.get(ids[si]).copied());
        for r in group {
            let lo = r.start.saturating_sub(radius);
            let mut hi = r.start.saturating_add(radius);
            if let Some(u) = upper {
                hi = hi.min(u);
            }
            for p in lo..=hi {
                if existing.contains(&(ids[si], p)) {
                    continue;
                }
                let key = CandidateKey {
                    priority: r.provenance.priority(),
                    distance: p.abs_diff(r.start),
                    source_start: r.start,
                };
                candidates.offer(si, p, key, r.label, r.length);
            }
        }
    }

    let mut out = records.to_vec();
    out.extend(candidates.into_records(&ids, Provenance::FrameExtension));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn starts(recs: &[LabelRecord]) -> Vec<usize> {
        let mut s: Vec<_> = recs.iter().map(|r| r.start).collect();
        s.sort_unstable();
        s
    }

    #[test]
    fn back_to_back_low_windows_fill_41_starts() {
        let recs = vec![LabelRecord::manual("a", 0, 40, 0), LabelRecord::manual("a", 40, 40, 0)];
        let out = augment_between(&recs, 40).unwrap();
        assert_eq!(out.len(), 41);
        assert_eq!(starts(&out), (0..=40).collect::<Vec<_>>());
        let filled: Vec<_> = out[2..].iter().collect();
        assert_eq!(filled.len(), 39);
        assert!(filled
            .iter()
            .all(|r| r.provenance == Provenance::BetweenFill && r.label == 0));
        assert_eq!(&out[..2], &recs[..]);
    }

    #[test]
    fn differing_labels_or_gaps_add_nothing() {
        let differ = vec![LabelRecord::manual("a", 0, 40, 0), LabelRecord::manual("a", 40, 40, 2)];
        assert_eq!(augment_between(&differ, 40).unwrap(), differ);
        let gap = vec![LabelRecord::manual("a", 0, 40, 0), LabelRecord::manual("a", 100, 40, 0)];
        assert_eq!(augment_between(&gap, 40).unwrap(), gap);
        let other_stream = vec![LabelRecord::manual("a", 0, 40, 0), LabelRecord::manual("b", 40, 40, 0)];
        assert_eq!(augment_between(&other_stream, 40).unwrap(), other_stream);
    }

    #[test]
    fn overlapping_manual_records_rejected() {
        let recs = vec![LabelRecord::manual("a", 0, 40, 0), LabelRecord::manual("a", 39, 40, 0)];
        assert!(matches!(
            augment_between(&recs, 40),
            Err(DataError::OverlappingManual { .. })
        ));
    }

    #[test]
    fn extension_counts() {
        let one = vec![LabelRecord::manual("a", 50, 40, 1)];
        let out = augment_extend(&one, 6, None);
        assert_eq!(starts(&out), (44..=56).collect::<Vec<_>>());

        let near_zero = vec![LabelRecord::manual("a", 2, 40, 1)];
        let out = augment_extend(&near_zero, 6, None);
        assert_eq!(starts(&out), (0..=8).collect::<Vec<_>>());

        let bounds: HashMap<String, usize> = [("a".to_string(), 53)].into();
        let out = augment_extend(&one, 6, Some(&bounds));
        assert_eq!(starts(&out), (44..=53).collect::<Vec<_>>());
    }

    #[test]
    fn radius_zero_is_identity() {
        let recs = vec![LabelRecord::manual("a", 5, 40, 1), LabelRecord::manual("b", 0, 40, 2)];
        assert_eq!(augment_extend(&recs, 0, None), recs);
    }

    #[test]
    fn contested_start_goes_to_nearest_then_earlier() {
        // Starts 0 (low) and 10 (high): 5 is equidistant, so the earlier source wins.
        let recs = vec![LabelRecord::manual("a", 0, 40, 0), LabelRecord::manual("a", 10, 40, 2)];
        let out = augment_extend(&recs, 6, None);
        let at = |p: usize| out.iter().find(|r| r.start == p).unwrap().label;
        assert_eq!(at(4), 0);
        assert_eq!(at(5), 0);
        assert_eq!(at(6), 2);
        assert_eq!(at(16), 2);
    }

    #[test]
    fn contested_start_prefers_stronger_provenance() {
        let mut weak = LabelRecord::manual("a", 3, 40, 0);
        weak.provenance = Provenance::FrameExtension;
        let strong = LabelRecord::manual("a", 9, 40, 2);
        let out = augment_extend(&[weak, strong], 6, None);
        // Start 5 is nearer the weak source but the manual one wins.
        assert_eq!(out.iter().find(|r| r.start == 5).unwrap().label, 2);
    }
}
