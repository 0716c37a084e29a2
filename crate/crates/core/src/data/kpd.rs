//! The `KPD1` plain-text keypoint format.
//!
//! ```text
//! KPD1 <num_streams>
//! STREAM <id> <num_frames> <J> <fps>
//! x1 y1 z1 x2 y2 z2 ...      (num_frames lines of 3J floats)
//! ```
//!
//! Floats are written with Rust's shortest round-trip formatting, so a
//! write/read/write cycle reproduces the file byte for byte.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;

use super::{DanceStream, DataError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DatasetFormat {
    #[default]
    Kpd1,
}

pub fn load_dataset(path: &Path, format: DatasetFormat) -> Result<Vec<DanceStream>, DataError> {
    match format {
        DatasetFormat::Kpd1 => read_kpd(BufReader::new(File::open(path)?)),
    }
}

pub fn save_dataset(path: &Path, streams: &[DanceStream], format: DatasetFormat) -> Result<(), DataError> {
    match format {
        DatasetFormat::Kpd1 => {
            let mut w = BufWriter::new(File::create(path)?);
            write_kpd(&mut w, streams)?;
            w.flush()?;
            Ok(())
        }
    }
}

struct Lines<R> {
    inner: std::io::Lines<R>,
    line_no: usize,
}

impl<R: BufRead> Lines<R> {
    /// Next non-blank line with its 1-based number.
    fn next_line(&mut self) -> Result<Option<(usize, String)>, DataError> {
        for line in self.inner.by_ref() {
            self.line_no += 1;
            let line = line?;
            if !line.trim().is_empty() {
                return Ok(Some((self.line_no, line)));
            }
        }
        Ok(None)
    }

    fn expect_line(&mut self, what: &str) -> Result<(usize, String), DataError> {
        self.next_line()?.ok_or_else(|| DataError::Parse {
            line: self.line_no + 1,
            msg: format!("unexpected end of file, expected {what}"),
        })
    }
}

fn parse_err(line: usize, msg: impl Into<String>) -> DataError {
    DataError::Parse { line, msg: msg.into() }
}

pub fn read_kpd<R: BufRead>(reader: R) -> Result<Vec<DanceStream>, DataError> {
    let mut lines = Lines {
        inner: reader.lines(),
        line_no: 0,
    };
    let (ln, header) = lines.expect_line("KPD1 header")?;
    let mut parts = header.split_whitespace();
    if parts.next() != Some("KPD1") {
        return Err(parse_err(ln, "malformed header: expected `KPD1 <num_streams>`"));
    }
    let num_streams: usize = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| parse_err(ln, "malformed header: missing stream count"))?;
    if parts.next().is_some() {
        return Err(parse_err(ln, "malformed header: trailing tokens"));
    }

    let mut seen = HashSet::new();
    let mut streams = Vec::with_capacity(num_streams);
    for _ in 0..num_streams {
        let (ln, line) = lines.expect_line("STREAM header")?;
        let tok: Vec<&str> = line.split_whitespace().collect();
        if tok.len() != 5 || tok[0] != "STREAM" {
            return Err(parse_err(
                ln,
                "malformed stream header: expected `STREAM <id> <num_frames> <J> <fps>`",
            ));
        }
        let id = tok[1].to_string();
        let num_frames: usize = tok[2]
            .parse()
            .map_err(|_| parse_err(ln, "malformed stream header: frame count"))?;
        let joints: usize = tok[3]
            .parse()
            .map_err(|_| parse_err(ln, "malformed stream header: joint count"))?;
        let fps: f64 = tok[4]
            .parse()
            .map_err(|_| parse_err(ln, "malformed stream header: frame rate"))?;
        if !seen.insert(id.clone()) {
            return Err(DataError::DuplicateStream(id));
        }
        if num_frames == 0 || joints == 0 {
            return Err(DataError::EmptyStream(id));
        }
        let width = 3 * joints;
        let mut frames = Array2::zeros((num_frames, width));
        for t in 0..num_frames {
            let (ln, line) = lines.expect_line("frame")?;
            let values: Vec<&str> = line.split_whitespace().collect();
            if values.len() != width {
                return Err(DataError::InconsistentJoints {
                    stream: id,
                    frame: t,
                    expected: width,
                    found: values.len(),
                });
            }
            for (c, v) in values.iter().enumerate() {
                let x: f64 = v.parse().map_err(|_| parse_err(ln, format!("invalid number {v:?}")))?;
                if !x.is_finite() {
                    return Err(DataError::NonFinite { stream: id, frame: t });
                }
                frames[[t, c]] = x;
            }
        }
        streams.push(DanceStream::new(id, joints, fps, frames)?);
    }
    if let Some((ln, _)) = lines.next_line()? {
        return Err(parse_err(ln, "trailing content after the declared streams"));
    }
    Ok(streams)
}

pub fn write_kpd<W: Write>(w: &mut W, streams: &[DanceStream]) -> Result<(), DataError> {
    writeln!(w, "KPD1 {}", streams.len())?;
    for s in streams {
        writeln!(w, "STREAM {} {} {} {}", s.id, s.len(), s.num_joints, s.frame_rate_hz)?;
        for row in s.frames().rows() {
            let mut first = true;
            for v in row {
                if !first {
                    w.write_all(b" ")?;
                }
                first = false;
                write!(w, "{v}")?;
            }
            w.write_all(b"\n")?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture(frames: usize, joints: usize) -> DanceStream {
        let data = Array2::from_shape_fn((frames, 3 * joints), |(t, c)| {
            (t as f64) * 0.01 + (c as f64) * 1e-3 + 1.0 / 3.0
        });
        DanceStream::new("s0", joints, 35.0, data).unwrap()
    }

    fn roundtrip_bytes(streams: &[DanceStream]) -> Vec<u8> {
        let mut buf = Vec::new();
        write_kpd(&mut buf, streams).unwrap();
        buf
    }

    #[test]
    fn single_stream_reads_back() {
        let s = fixture(100, 53);
        let bytes = roundtrip_bytes(std::slice::from_ref(&s));
        let back = read_kpd(&bytes[..]).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].len(), 100);
        assert_eq!(back[0].num_joints, 53);
        assert_eq!(back[0], s);
    }

    #[test]
    fn varying_joint_count_is_rejected() {
        let text = "KPD1 1\nSTREAM a 2 2 35\n0 0 0 1 1 1\n0 0 0\n";
        let err = read_kpd(text.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("inconsistent joint count"), "{err}");
    }

    #[test]
    fn malformed_header_is_rejected() {
        for text in ["KPD2 1\n", "KPD1\n", "KPD1 x\n", ""] {
            assert!(matches!(read_kpd(text.as_bytes()), Err(DataError::Parse { .. })));
        }
        let bad_stream = "KPD1 1\nSTREAM a 2 35\n";
        assert!(matches!(read_kpd(bad_stream.as_bytes()), Err(DataError::Parse { .. })));
    }

    #[test]
    fn empty_stream_and_nan_rejected() {
        let empty = "KPD1 1\nSTREAM a 0 1 35\n";
        assert!(matches!(read_kpd(empty.as_bytes()), Err(DataError::EmptyStream(_))));
        let nan = "KPD1 1\nSTREAM a 1 1 35\n0 NaN 0\n";
        assert!(matches!(read_kpd(nan.as_bytes()), Err(DataError::NonFinite { .. })));
        let inf = "KPD1 1\nSTREAM a 1 1 35\n0 inf 0\n";
        assert!(matches!(read_kpd(inf.as_bytes()), Err(DataError::NonFinite { .. })));
    }

    #[test]
    fn full_scale_fixture_counts() {
        // Six streams totalling 36,396 poses.
        let lens = [6066usize, 6066, 6066, 6066, 6066, 6066];
        assert_eq!(lens.iter().sum::<usize>(), 36_396);
        let streams: Vec<_> = lens
            .iter()
            .enumerate()
            .map(|(i, &n)| DanceStream::new(format!("dance{i}"), 1, 35.0, Array2::zeros((n, 3))).unwrap())
            .collect();
        let back = read_kpd(&roundtrip_bytes(&streams)[..]).unwrap();
        assert_eq!(back.len(), 6);
        assert_eq!(back.iter().map(DanceStream::len).sum::<usize>(), 36_396);
    }

    #[test]
    fn write_read_write_is_byte_identical() {
        let mut s = fixture(7, 3);
        s.frames_mut()[[0, 0]] = 1e-300;
        s.frames_mut()[[1, 1]] = -0.1 + 0.2;
        s.frames_mut()[[2, 2]] = f64::MAX;
        let first = roundtrip_bytes(&[s]);
        let second = roundtrip_bytes(&read_kpd(&first[..]).unwrap());
        assert_eq!(first, second);
    }
}
