//! Embeddings, the extractor boundary, enrollment and scoring.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics::ScoreRecord;
use crate::par;
use crate::protocol::{GroupFilter, ModelSpec, Protocol};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub sample_id: String,
    pub subject_id: String,
    pub vector: Vec<f64>,
}

impl Embedding {
    pub fn new(sample_id: impl Into<String>, subject_id: impl Into<String>, vector: Vec<f64>) -> Result<Self> {
        let sample_id = sample_id.into();
        if vector.len() < 2 {
            return Err(Error::DimensionMismatch {
                expected: 2,
                actual: vector.len(),
            });
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::parse("embedding", format!("non-finite value in {sample_id}")));
        }
        Ok(Self {
            sample_id,
            subject_id: subject_id.into(),
            vector,
        })
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

/// Enrolled representation of a model: the mean of its enrollment embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Template {
    pub model_id: String,
    pub subject_id: String,
    pub vector: Vec<f64>,
    pub n_enrolled: usize,
}

/// Averages the embeddings of `model`'s enroll samples, component-wise.
///
/// `embeddings` must cover exactly the model's enroll sample ids.
pub fn enroll(model: &ModelSpec, embeddings: &[&Embedding]) -> Result<Template> {
    let n = model.enroll_sample_ids.len();
    let mut by_id: HashMap<&str, &Embedding> = HashMap::with_capacity(embeddings.len());
    for e in embeddings {
        if !model.enroll_sample_ids.contains(&e.sample_id) || by_id.insert(&e.sample_id, e).is_some() {
            return Err(Error::UnexpectedId(e.sample_id.clone()));
        }
    }
    let mut sum: Option<Vec<f64>> = None;
    // summation runs in protocol order so the result is independent of the
    // order of `embeddings`
    for id in &model.enroll_sample_ids {
        let e = by_id.get(id.as_str()).ok_or_else(|| Error::MissingId {
            kind: "embedding",
            id: id.clone(),
        })?;
        match &mut sum {
            None => sum = Some(e.vector.clone()),
            Some(acc) => {
                if acc.len() != e.dim() {
                    return Err(Error::DimensionMismatch {
                        expected: acc.len(),
                        actual: e.dim(),
                    });
                }
                for (a, v) in acc.iter_mut().zip(&e.vector) {
                    *a += v;
                }
            }
        }
    }
    let mut vector = sum.ok_or_else(|| Error::Validation(format!("model {} is empty", model.model_id)))?;
    if n > 1 {
        let n = n as f64;
        vector.iter_mut().for_each(|v| *v /= n);
    }
    if vector.iter().all(|&v| v == 0.0) {
        return Err(Error::ZeroVector(model.model_id.clone()));
    }
    Ok(Template {
        model_id: model.model_id.clone(),
        subject_id: model.subject_id.clone(),
        vector,
        n_enrolled: n,
    })
}

/// Enrolls every model of the protocol.
pub fn enroll_all(p: &Protocol, embeddings: &EmbeddingTable) -> Result<Vec<Template>> {
    par::try_map(&p.models, |m| {
        let es = m
            .enroll_sample_ids
            .iter()
            .map(|id| {
                embeddings.get(id).ok_or_else(|| Error::MissingId {
                    kind: "embedding",
                    id: id.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        enroll(m, &es)
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    #[default]
    Cosine,
    /// Negated Euclidean distance; experimental.
    NegEuclidean,
}

impl std::str::FromStr for Similarity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Similarity::Cosine),
            "neg-euclidean" | "neg_euclidean" => Ok(Similarity::NegEuclidean),
            other => Err(Error::Config(format!("unknown similarity '{other}'"))),
        }
    }
}

impl Similarity {
    pub fn score(self, reference: &[f64], probe: &[f64]) -> Result<f64> {
        if reference.len() != probe.len() {
            return Err(Error::DimensionMismatch {
                expected: reference.len(),
                actual: probe.len(),
            });
        }
        match self {
            Similarity::Cosine => cosine(reference, probe),
            Similarity::NegEuclidean => Ok(-reference
                .iter()
                .zip(probe)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()),
        }
    }
}

fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 {
        return Err(Error::ZeroVector("reference".into()));
    }
    if nb == 0.0 {
        return Err(Error::ZeroVector("probe".into()));
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

pub fn cosine_score(t: &Template, p: &Embedding) -> Result<f64> {
    Similarity::Cosine.score(&t.vector, &p.vector)
}

/// Scores every comparison pair of `group`, in `comparison_pairs` order.
pub fn score_protocol(
    p: &Protocol,
    templates: &[Template],
    probes: &EmbeddingTable,
    group: GroupFilter,
    similarity: Similarity,
) -> Result<Vec<ScoreRecord>> {
    let pairs = p.comparison_pairs(group)?;
    let by_model: HashMap<&str, &Template> = templates.iter().map(|t| (t.model_id.as_str(), t)).collect();
    par::try_map(&pairs, |pair| {
        let t = by_model.get(pair.model_id.as_str()).ok_or_else(|| Error::MissingId {
            kind: "template",
            id: pair.model_id.clone(),
        })?;
        let e = probes.get(&pair.probe_sample_id).ok_or_else(|| Error::MissingId {
            kind: "embedding",
            id: pair.probe_sample_id.clone(),
        })?;
        let score = similarity.score(&t.vector, &e.vector)?;
        Ok(ScoreRecord {
            sub_protocol: pair.sub_protocol.clone(),
            group: pair.group,
            model_id: pair.model_id.clone(),
            reference_subject_id: pair.reference_subject_id.clone(),
            probe_sample_id: pair.probe_sample_id.clone(),
            probe_subject_id: pair.probe_subject_id.clone(),
            score,
            is_genuine: pair.is_genuine,
        })
    })
}

/// Embeddings keyed by sample id, all of one dimension.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    rows: BTreeMap<String, Embedding>,
}

impl EmbeddingTable {
    pub fn new(embeddings: impl IntoIterator<Item = Embedding>) -> Result<Self> {
        let mut t = EmbeddingTable::default();
        for e in embeddings {
            t.insert(e)?;
        }
        Ok(t)
    }

    pub fn insert(&mut self, e: Embedding) -> Result<()> {
        if self.rows.is_empty() {
            self.dim = e.dim();
        } else if e.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: e.dim(),
            });
        }
        if self.rows.contains_key(&e.sample_id) {
            return Err(Error::parse("embeddings", format!("duplicate sample_id {}", e.sample_id)));
        }
        self.rows.insert(e.sample_id.clone(), e);
        Ok(())
    }

    pub fn get(&self, sample_id: &str) -> Option<&Embedding> {
        self.rows.get(sample_id)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Rows in sample id order.
    pub fn iter(&self) -> impl Iterator<Item = &Embedding> {
        self.rows.values()
    }

    /// `sample_id,subject_id,v0,...,v{D-1}` CSV, rows sorted by sample id.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
        let csv_err = |e: csv::Error| Error::parse("embedding csv", e);
        let mut header = vec!["sample_id".to_string(), "subject_id".to_string()];
        header.extend((0..self.dim).map(|k| format!("v{k}")));
        w.write_record(&header).map_err(csv_err)?;
        for e in self.iter() {
            let mut row = vec![e.sample_id.clone(), e.subject_id.clone()];
            row.extend(e.vector.iter().map(|v| v.to_string()));
            w.write_record(&row).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::parse("embedding csv", e))
    }

    pub fn read_csv<R: std::io::Read>(input: R) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
        let header = r.headers().map_err(|e| Error::parse("embedding csv", e))?.clone();
        if header.len() < 4 || &header[0] != "sample_id" || &header[1] != "subject_id" {
            return Err(Error::parse(
                "embedding csv",
                "header must be sample_id,subject_id,v0,...",
            ));
        }
        for (k, name) in header.iter().skip(2).enumerate() {
            if name != format!("v{k}") {
                return Err(Error::parse("embedding csv", format!("unexpected column '{name}'")));
            }
        }
        let mut table = EmbeddingTable::default();
        for (i, rec) in r.records().enumerate() {
            let ctx = || format!("embedding csv row {}", i + 2);
            let rec = rec.map_err(|e| Error::parse(ctx(), e))?;
            let vector = rec
                .iter()
                .skip(2)
                .map(|v| v.parse::<f64>().map_err(|e| Error::parse(ctx(), e)))
                .collect::<Result<Vec<_>>>()?;
            table.insert(Embedding::new(&rec[0], &rec[1], vector)?)?;
        }
        Ok(table)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(BufReader::new(f))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }
}

/// Feature extraction boundary. Networks live outside this crate.
pub trait Extractor {
    /// `(height, width, channels)` the extractor expects, when fixed.
    fn input_shape(&self) -> Option<(usize, usize, usize)>;

    /// Embeds one aligned image. `source` is the image's file path, used by
    /// extractors that read images themselves.
    fn extract_vector(&mut self, image: &Image, source: &Path) -> Result<Vec<f64>>;
}

pub fn extract(
    extractor: &mut dyn Extractor,
    image: &Image,
    source: &Path,
    sample_id: &str,
    subject_id: &str,
) -> Result<Embedding> {
    if let Some((h, w, c)) = extractor.input_shape() {
        if (image.height(), image.width(), image.channels()) != (h, w, c) {
            return Err(Error::DimensionMismatch {
                expected: h * w * c,
                actual: image.height() * image.width() * image.channels(),
            });
        }
    }
    let v = extractor.extract_vector(image, source)?;
    Embedding::new(sample_id, subject_id, v)
}

/// Deterministic stand-in extractor: mean of each `block x block` tile per
/// channel, flattened in row, column, channel order.
#[derive(Debug, Clone)]
pub struct DownsampleFlatten {
    pub block: usize,
    pub shape: Option<(usize, usize, usize)>,
}

impl DownsampleFlatten {
    pub fn new(block: usize) -> Self {
        Self { block, shape: None }
    }
}

impl Extractor for DownsampleFlatten {
    fn input_shape(&self) -> Option<(usize, usize, usize)> {
        self.shape
    }

    fn extract_vector(&mut self, image: &Image, _source: &Path) -> Result<Vec<f64>> {
        let b = self.block;
        if b == 0 || !image.height().is_multiple_of(b) || !image.width().is_multiple_of(b) {
            return Err(Error::Extractor(format!(
                "block size {b} does not tile {}x{}",
                image.height(),
                image.width()
            )));
        }
        let (bh, bw, ch) = (image.height() / b, image.width() / b, image.channels());
        let area = (b * b) as f64;
        let mut out = Vec::with_capacity(bh * bw * ch);
        for by in 0..bh {
            for bx in 0..bw {
                for c in 0..ch {
                    let mut s = 0.0;
                    for y in by * b..(by + 1) * b {
                        for x in bx * b..(bx + 1) * b {
                            s += image.get(y, x, c);
                        }
                    }
                    out.push(s / area);
                }
            }
        }
        Ok(out)
    }
}

/// Looks up precomputed vectors by image file stem (the sample id).
#[derive(Debug, Clone)]
pub struct Precomputed {
    pub table: EmbeddingTable,
}

impl Extractor for Precomputed {
    fn input_shape(&self) -> Option<(usize, usize, usize)> {
        None
    }

    fn extract_vector(&mut self, _image: &Image, source: &Path) -> Result<Vec<f64>> {
        let stem = source
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Extractor(format!("bad path {}", source.display())))?;
        self.table
            .get(stem)
            .map(|e| e.vector.clone())
            .ok_or_else(|| Error::MissingId {
                kind: "embedding",
                id: stem.to_string(),
            })
    }
}

/// Child process speaking the line protocol: the engine writes
/// `EXTRACT <png-path>` and reads one line of space-separated reals.
pub struct ExternalProcess {
    child: Child,
    stdin: Option<ChildStdin>,
    stdout: BufReader<ChildStdout>,
    shape: Option<(usize, usize, usize)>,
}

impl ExternalProcess {
    pub fn spawn(program: impl AsRef<std::ffi::OsStr>, args: &[String]) -> Result<Self> {
        let mut child = Command::new(program.as_ref())
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| Error::Extractor(format!("cannot start {:?}: {e}", program.as_ref())))?;
        let stdin = child.stdin.take();
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(Self {
            child,
            stdin,
            stdout,
            shape: None,
        })
    }

    pub fn with_shape(mut self, shape: (usize, usize, usize)) -> Self {
        self.shape = Some(shape);
        self
    }

    fn failure(&mut self, what: &str) -> Error {
        let status = self.child.try_wait().ok().flatten();
        match status {
            Some(s) if !s.success() => Error::Extractor(format!("{what}: child exited with {s}")),
            _ => Error::Extractor(what.to_string()),
        }
    }

    /// Closes the child's input and waits for it; nonzero exit is an error.
    pub fn finish(mut self) -> Result<()> {
        drop(self.stdin.take());
        let status = self
            .child
            .wait()
            .map_err(|e| Error::Extractor(format!("wait failed: {e}")))?;
        if status.success() {
            Ok(())
        } else {
            Err(Error::Extractor(format!("child exited with {status}")))
        }
    }
}

impl Extractor for ExternalProcess {
    fn input_shape(&self) -> Option<(usize, usize, usize)> {
        self.shape
    }

    fn extract_vector(&mut self, _image: &Image, source: &Path) -> Result<Vec<f64>> {
        let path: PathBuf = source.to_path_buf();
        let stdin = self.stdin.as_mut().ok_or_else(|| Error::Extractor("input closed".into()))?;
        if writeln!(stdin, "EXTRACT {}", path.display()).and_then(|_| stdin.flush()).is_err() {
            return Err(self.failure("write to extractor failed"));
        }
        let mut line = String::new();
        match self.stdout.read_line(&mut line) {
            Ok(0) | Err(_) => return Err(self.failure("extractor closed its output")),
            Ok(_) => {}
        }
        line.split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|e| Error::Extractor(format!("bad value '{t}': {e}")))
            })
            .collect()
    }
}

impl Drop for ExternalProcess {
    fn drop(&mut self) {
        drop(self.stdin.take());
        let _ = self.child.wait();
    }
}
