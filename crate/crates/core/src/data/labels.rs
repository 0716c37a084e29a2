//! Label CSV: `stream_id,start,length,label,provenance`, LF line endings.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use super::{ClassNames, DataError, LabelRecord, Provenance};

pub const LABEL_CSV_HEADER: [&str; 5] = ["stream_id", "start", "length", "label", "provenance"];

pub fn read_labels<R: Read>(reader: R, classes: &ClassNames) -> Result<Vec<LabelRecord>, DataError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != LABEL_CSV_HEADER {
        return Err(DataError::Parse {
            line: 1,
            msg: format!("label CSV header must be `{}`", LABEL_CSV_HEADER.join(",")),
        });
    }
    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row?;
        let line = i + 2;
        let field = |k: usize| row.get(k).unwrap_or_default();
        let num = |k: usize| -> Result<usize, DataError> {
            field(k).parse().map_err(|_| DataError::Parse {
                line,
                msg: format!("{} must be a non-negative integer", LABEL_CSV_HEADER[k]),
            })
        };
        let provenance: Provenance = field(4).parse().map_err(|msg| DataError::Parse { line, msg })?;
        out.push(LabelRecord {
            stream_id: field(0).to_string(),
            start: num(1)?,
            length: num(2)?,
            label: classes.index_of(field(3))?,
            provenance,
        });
    }
    Ok(out)
}

pub fn write_labels<W: Write>(writer: W, records: &[LabelRecord], classes: &ClassNames) -> Result<(), DataError> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(writer);
    w.write_record(LABEL_CSV_HEADER)?;
    for r in records {
        let label = classes.name(r.label).ok_or(DataError::LabelOutOfRange(r.label))?;
        w.write_record([
            r.stream_id.as_str(),
            &r.start.to_string(),
            &r.length.to_string(),
            label,
            r.provenance.as_str(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_labels(path: &Path, classes: &ClassNames) -> Result<Vec<LabelRecord>, DataError> {
    read_labels(File::open(path)?, classes)
}

pub fn save_labels(path: &Path, records: &[LabelRecord], classes: &ClassNames) -> Result<(), DataError> {
    let mut file = File::create(path)?;
    write_labels(&mut file, records, classes)?;
    file.sync_all()?;
    Ok(())
}
