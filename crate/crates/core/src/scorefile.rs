//! Score and curve CSV files.

use std::io::{BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::{RocPoint, ScoreRecord};
use crate::openset::OpenSetCurve;
use crate::protocol::Group;

pub const SCORE_HEADER: [&str; 7] = [
    "sub_protocol",
    "group",
    "model_id",
    "reference_subject_id",
    "probe_sample_id",
    "probe_subject_id",
    "score",
];

fn writer<W: Write>(out: W) -> csv::Writer<W> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out)
}

/// Writes records in the given order. Scores use the shortest decimal form
/// that parses back to the same `f64`.
pub fn write_scores<W: Write>(out: W, records: &[ScoreRecord]) -> Result<()> {
    let err = |e| Error::parse("score csv", e);
    let mut w = writer(out);
    w.write_record(SCORE_HEADER).map_err(err)?;
    for r in records {
        w.write_record([
            r.sub_protocol.as_str(),
            r.group.as_str(),
            &r.model_id,
            &r.reference_subject_id,
            &r.probe_sample_id,
            &r.probe_subject_id,
            &r.score.to_string(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| Error::parse("score csv", e))
}

pub fn read_scores<R: Read>(input: R) -> Result<Vec<ScoreRecord>> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header = r.headers().map_err(|e| Error::parse("score csv", e))?;
    if header.iter().ne(SCORE_HEADER) {
        return Err(Error::parse(
            "score csv",
            format!("header must be {}", SCORE_HEADER.join(",")),
        ));
    }
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let ctx = || format!("score csv row {}", i + 2);
        let rec = rec.map_err(|e| Error::parse(ctx(), e))?;
        let group: Group = rec[1].parse().map_err(|e: Error| Error::parse(ctx(), e))?;
        let score: f64 = rec[6].parse().map_err(|e| Error::parse(ctx(), e))?;
        if !score.is_finite() {
            return Err(Error::parse(ctx(), "non-finite score"));
        }
        out.push(ScoreRecord::new(
            &rec[0], group, &rec[2], &rec[3], &rec[4], &rec[5], score,
        ));
    }
    Ok(out)
}

pub fn load_scores(path: impl AsRef<Path>) -> Result<Vec<ScoreRecord>> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_scores(BufReader::new(f))
}

pub fn save_scores(path: impl AsRef<Path>, records: &[ScoreRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_scores(&mut buf, records)?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// `threshold,fmr,fnmr`
pub fn write_roc<W: Write>(out: W, points: &[RocPoint]) -> Result<()> {
    let mut w = writer(out);
    let err = |e| Error::parse("roc csv", e);
    w.write_record(["threshold", "fmr", "fnmr"]).map_err(err)?;
    for p in points {
        w.write_record([p.threshold.to_string(), p.fmr.to_string(), p.fnmr.to_string()])
            .map_err(err)?;
    }
    w.flush().map_err(|e| Error::parse("roc csv", e))
}

/// `threshold,fpir,tpir`; the closed-set point has threshold `-inf`.
pub fn write_openset<W: Write>(out: W, curve: &OpenSetCurve) -> Result<()> {
    let mut w = writer(out);
    let err = |e| Error::parse("open-set csv", e);
    w.write_record(["threshold", "fpir", "tpir"]).map_err(err)?;
    for p in &curve.points {
        w.write_record([p.threshold.to_string(), p.fpir.to_string(), p.tpir.to_string()])
            .map_err(err)?;
    }
    w.flush().map_err(|e| Error::parse("open-set csv", e))
}
