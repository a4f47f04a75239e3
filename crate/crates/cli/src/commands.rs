//! Subcommand implementations.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use biomeval_core::align::{align_with_fallback, AlignmentSpec, LandmarkSet};
use biomeval_core::embedding::{
    enroll_all, extract, score_protocol, DownsampleFlatten, Embedding, EmbeddingTable, ExternalProcess, Similarity,
    Template,
};
use biomeval_core::evaluator::{
    evaluate as evaluate_scores, evaluate_protocol, openset_evaluate, openset_from_scores, roc_by_label, roc_evaluate,
    EvaluationResult, ThresholdPolicy,
};
use biomeval_core::image::Image;
use biomeval_core::metrics::{eer_threshold, EerPoint, RocPoint, ScoreRecord, ScoreSet};
use biomeval_core::openset::ProbeSummary;
use biomeval_core::protocol::{load_protocol, save_protocol, Group, GroupFilter, Protocol};
use biomeval_core::scorefile::{load_scores, save_scores, write_openset, write_roc};
use biomeval_core::synth::{generate, generate_scores, ScoreSynthConfig, SynthConfig};
use biomeval_core::{par, Error};
use serde::{Deserialize, Serialize};

use crate::manifest::{beside, inside, ManifestBuilder, RunManifest};
use crate::{AlignArgs, CliError, CliResult, Command, EnrollArgs, EvaluateArgs, ExtractArgs, OpensetArgs};
use crate::{ReportArgs, ScoreArgs, SynthArgs};

pub fn dispatch(command: Command, jobs: Option<usize>) -> CliResult<RunManifest> {
    match command {
        Command::Align(a) => align(&a, jobs),
        Command::Extract(a) => extract_embeddings(&a, jobs),
        Command::Enroll(a) => enroll(&a, jobs),
        Command::Score(a) => score(&a, jobs),
        Command::Evaluate(a) => evaluate(&a, jobs),
        Command::Openset(a) => openset(&a, jobs),
        Command::Synth(a) => synth(&a, jobs),
        Command::Report(a) => report(&a, jobs),
    }
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> CliResult<()> {
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn to_json_text<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| CliError::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn from_value<T: for<'de> Deserialize<'de>>(path: &Path, value: serde_json::Value) -> CliResult<T> {
    serde_json::from_value(value).map_err(|source| CliError::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// File-name-safe form of a sub-protocol label.
fn file_label(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect()
}

/// PNG files of `dir`, sorted by name.
fn list_pngs(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| CliError::io(dir, e))? {
        let path = entry.map_err(|e| CliError::io(dir, e))?.path();
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png && path.is_file() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

pub fn align(a: &AlignArgs, jobs: Option<usize>) -> CliResult<RunManifest> {
    let spec = AlignmentSpec::resolve(&a.spec)?;
    let mut m = ManifestBuilder::new("align", jobs);
    m.param("spec", &a.spec)
        .param("images", a.images.display())
        .param("annotations", a.annotations.display())
        .param("out", a.out.display());
    if AlignmentSpec::preset(&a.spec).is_none() {
        m.input(&a.spec);
    }

    let mut work = Vec::new();
    for image in list_pngs(&a.images)? {
        let name = stem(&image);
        let ann = a.annotations.join(format!("{name}.txt"));
        if !ann.is_file() {
            return Err(CliError::MissingAnnotation(name));
        }
        work.push((image, ann, a.out.join(format!("{name}.png")), name));
    }
    create_dir(&a.out)?;

    let used = par::try_map(&work, |(image, ann, dst, _)| {
        let img = Image::read_png(image)?;
        let landmarks = LandmarkSet::load(ann)?;
        let (aligned, used) = align_with_fallback(&img, &landmarks, &spec)?;
        aligned.write_png(dst)?;
        Ok::<_, Error>(used.name.clone())
    })?;

    for ((image, ann, dst, name), used) in work.iter().zip(used) {
        m.input(image).input(ann).output(dst);
        if used != spec.name {
            m.warn(format!("{name}: aligned with fallback spec {used}"));
        }
    }
    m.finish(&inside(&a.out))
}

pub fn extract_embeddings(a: &ExtractArgs, jobs: Option<usize>) -> CliResult<RunManifest> {
    let p = load_protocol(&a.protocol)?;
    let mut m = ManifestBuilder::new("extract", jobs);
    m.param("images", a.images.display()).input(&a.protocol);
    let located: Vec<(PathBuf, &str, &str)> = p
        .samples
        .iter()
        .map(|s| {
            let path = Path::new(&s.path);
            let full = if path.is_absolute() { path.to_path_buf() } else { a.images.join(path) };
            (full, s.sample_id.as_str(), s.subject_id.as_str())
        })
        .collect();

    let embeddings: Vec<Embedding> = match &a.exec {
        Some(program) => {
            m.param("exec", program.display()).param("exec_args", a.exec_args.join(" "));
            let mut child = ExternalProcess::spawn(program, &a.exec_args)?;
            let mut out = Vec::with_capacity(located.len());
            for (path, id, subject) in &located {
                let img = Image::read_png(path)?;
                out.push(extract(&mut child, &img, path, id, subject)?);
            }
            child.finish()?;
            out
        }
        None => {
            m.param("block", a.block);
            par::try_map(&located, |(path, id, subject)| {
                let img = Image::read_png(path)?;
                extract(&mut DownsampleFlatten::new(a.block), &img, path, id, subject)
            })?
        }
    };
    for (path, _, _) in &located {
        m.input(path);
    }
    EmbeddingTable::new(embeddings)?.save(&a.out)?;
    m.output(&a.out);
    m.finish(&beside(&a.out))
}

const TEMPLATE_HEADER: [&str; 3] = ["model_id", "subject_id", "n_enrolled"];

pub fn write_templates(path: &Path, templates: &[Template]) -> CliResult<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    let dim = templates.first().map_or(0, |t| t.vector.len());
    let header = TEMPLATE_HEADER
        .iter()
        .map(|s| s.to_string())
        .chain((0..dim).map(|k| format!("v{k}")));
    let csv_err = |e: csv::Error| CliError::Core(Error::Parse {
        context: "template csv".into(),
        message: e.to_string(),
    });
    w.write_record(header).map_err(csv_err)?;
    for t in templates {
        let row = [t.model_id.clone(), t.subject_id.clone(), t.n_enrolled.to_string()]
            .into_iter()
            .chain(t.vector.iter().map(|v| v.to_string()));
        w.write_record(row).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Usage(e.to_string()))?;
    write_file(path, bytes)
}

pub fn read_templates(path: &Path) -> CliResult<Vec<Template>> {
    let bad = |message: String| {
        CliError::Core(Error::Parse {
            context: format!("templates {}", path.display()),
            message,
        })
    };
    let mut r = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
    let header = r.headers().map_err(|e| bad(e.to_string()))?.clone();
    if header.len() < 5 || header.iter().take(3).ne(TEMPLATE_HEADER) {
        return Err(bad("expected header model_id,subject_id,n_enrolled,v0,v1,...".into()));
    }
    let mut out = Vec::new();
    for row in r.records() {
        let row = row.map_err(|e| bad(e.to_string()))?;
        let n_enrolled = row[2].parse().map_err(|e| bad(format!("n_enrolled: {e}")))?;
        let vector = row
            .iter()
            .skip(3)
            .map(|v| v.parse::<f64>().map_err(|e| bad(format!("'{v}': {e}"))))
            .collect::<CliResult<Vec<_>>>()?;
        out.push(Template {
            model_id: row[0].to_string(),
            subject_id: row[1].to_string(),
            vector,
            n_enrolled,
        });
    }
    Ok(out)
}

pub fn enroll(a: &EnrollArgs, jobs: Option<usize>) -> CliResult<RunManifest> {
    let p = load_protocol(&a.protocol)?;
    let table = EmbeddingTable::load(&a.embeddings)?;
    let templates = enroll_all(&p, &table)?;
    write_templates(&a.out, &templates)?;
    let mut m = ManifestBuilder::new("enroll", jobs);
    m.input(&a.protocol).input(&a.embeddings).output(&a.out);
    m.finish(&beside(&a.out))
}

pub fn score(a: &ScoreArgs, jobs: Option<usize>) -> CliResult<RunManifest> {
    let group: GroupFilter = a.group.parse()?;
    let similarity: Similarity = a.similarity.parse()?;
    let p = load_protocol(&a.protocol)?;
    let table = EmbeddingTable::load(&a.embeddings)?;
    let mut m = ManifestBuilder::new("score", jobs);
    m.param("group", group).param("similarity", &a.similarity);
    m.input(&a.protocol).input(&a.embeddings);
    let templates = match &a.templates {
        Some(path) => {
            m.input(path);
            read_templates(path)?
        }
        None => enroll_all(&p, &table)?,
    };
    let records = score_protocol(&p, &templates, &table, group, similarity)?;
    save_scores(&a.out, &records)?;
    m.output(&a.out);
    m.finish(&beside(&a.out))
}

/// Output of `evaluate --policy roc`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocReport {
    pub policy: String,
    pub per_sub_protocol: BTreeMap<String, RocSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocSummary {
    pub genuine_count: usize,
    pub impostor_count: usize,
    pub eer: EerPoint,
    pub roc_points: usize,
}

fn write_curves(
    dir: &Path,
    prefix: &str,
    curves: &BTreeMap<String, Vec<RocPoint>>,
    m: &mut ManifestBuilder,
) -> CliResult<()> {
    create_dir(dir)?;
    for (label, points) in curves {
        let path = dir.join(format!("{prefix}roc_{}.csv", file_label(label)));
        let mut buf = Vec::new();
        write_roc(&mut buf, points)?;
        write_file(&path, buf)?;
        m.output(path);
    }
    Ok(())
}

fn roc_report(records: &[ScoreRecord], curves: &BTreeMap<String, Vec<RocPoint>>) -> CliResult<RocReport> {
    let mut per = BTreeMap::new();
    for (label, points) in curves {
        let set = ScoreSet::from_records(records.iter().filter(|r| &r.sub_protocol == label))?;
        per.insert(
            label.clone(),
            RocSummary {
                genuine_count: set.genuine_count(),
                impostor_count: set.impostor_count(),
                eer: eer_threshold(&set)?,
                roc_points: points.len(),
            },
        );
    }
    Ok(RocReport {
        policy: "roc".into(),
        per_sub_protocol: per,
    })
}

pub fn evaluate(a: &EvaluateArgs, jobs: Option<usize>) -> CliResult<RunManifest> {
    let records = load_scores(&a.scores)?;
    let protocol: Option<Protocol> = a.protocol.as_deref().map(load_protocol).transpose()?;
    let mut m = ManifestBuilder::new("evaluate", jobs);
    m.param("policy", &a.policy).param("fmr_target", a.fmr_target).input(&a.scores);
    if let Some(p) = &a.protocol {
        m.input(p);
    }

    let report_text = if a.policy == "roc" {
        let curves = match &protocol {
            Some(p) => roc_evaluate(p, &records)?,
            None => {
                if records.iter().any(|r| r.group != Group::None) {
                    return Err(Error::PolicyMismatch(
                        "score file has a dev/eval split; use a threshold policy".into(),
                    )
                    .into());
                }
                roc_by_label(&records)?
            }
        };
        if let Some(dir) = &a.curves {
            write_curves(dir, "", &curves, &mut m)?;
        }
        to_json_text(&roc_report(&records, &curves)?)
    } else {
        let policy = ThresholdPolicy::parse(&a.policy, a.fmr_target)?;
        let result = match &protocol {
            Some(p) => evaluate_protocol(p, &records, policy)?,
            None => evaluate_scores(&records, policy)?,
        };
        for w in &result.warnings {
            eprintln!("warning: {w}");
            m.warn(w.clone());
        }
        if let Some(dir) = &a.curves {
            for group in [Group::Dev, Group::Eval] {
                let subset: Vec<ScoreRecord> = records.iter().filter(|r| r.group == group).cloned().collect();
                write_curves(dir, &format!("{group}_"), &roc_by_label(&subset)?, &mut m)?;
            }
        }
        to_json_text(&result)
    };
    write_file(&a.out, report_text)?;
    m.output(&a.out);
    m.finish(&beside(&a.out))
}

/// Side output of `openset --summary`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpenSetSummary {
    pub closed_set_rank1: f64,
    pub known_probes: usize,
    pub unknown_probes: usize,
    pub curve_points: usize,
    pub probes: Vec<ProbeSummary>,
}

pub fn openset(a: &OpensetArgs, jobs: Option<usize>) -> CliResult<RunManifest> {
    let p = load_protocol(&a.protocol)?;
    let mut m = ManifestBuilder::new("openset", jobs);
    m.input(&a.protocol);
    let result = match (&a.scores, &a.embeddings) {
        (Some(scores), _) => {
            m.input(scores);
            openset_from_scores(&p, &load_scores(scores)?)?
        }
        (None, Some(emb)) => {
            let similarity: Similarity = a.similarity.parse()?;
            m.input(emb).param("similarity", &a.similarity);
            let table = EmbeddingTable::load(emb)?;
            let templates = enroll_all(&p, &table)?;
            openset_evaluate(&p, &templates, &table, similarity)?
        }
        (None, None) => return Err(CliError::Usage("one of --scores or --embeddings is required".into())),
    };
    let mut buf = Vec::new();
    write_openset(&mut buf, &result.curve)?;
    write_file(&a.out, buf)?;
    m.output(&a.out);
    if let Some(path) = &a.summary {
        let summary = OpenSetSummary {
            closed_set_rank1: result.closed_set_rank1,
            known_probes: result.known_probes,
            unknown_probes: result.unknown_probes,
            curve_points: result.curve.points.len(),
            probes: result.probes,
        };
        write_file(path, to_json_text(&summary))?;
        m.output(path);
    }
    m.finish(&beside(&a.out))
}

/// Contents of a `synth --config` file: a protocol generator config, or a
/// list of parametric score generators under `scores`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreJob {
    pub scores: Vec<ScoreSynthConfig>,
}

pub fn synth(a: &SynthArgs, jobs: Option<usize>) -> CliResult<RunManifest> {
    let value: serde_json::Value = read_json(&a.config)?;
    let mut m = ManifestBuilder::new("synth", jobs);
    m.input(&a.config);
    create_dir(&a.out)?;
    if value.get("scores").is_some() {
        let job: ScoreJob = from_value(&a.config, value)?;
        let mut all = Vec::new();
        for cfg in &job.scores {
            m.seed(cfg.seed);
            all.extend(generate_scores(cfg)?);
        }
        let path = a.out.join("scores.csv");
        save_scores(&path, &all)?;
        m.output(path);
    } else {
        let cfg: SynthConfig = from_value(&a.config, value)?;
        m.seed(cfg.seed);
        let data = generate(&cfg)?;
        let protocol = a.out.join("protocol.json");
        let embeddings = a.out.join("embeddings.csv");
        save_protocol(&data.protocol, &protocol)?;
        data.embeddings.save(&embeddings)?;
        m.output(protocol).output(embeddings);
    }
    m.finish(&inside(&a.out))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One row per report: policy, thresholds and rates, plus per-label eval
/// rates for every label seen in any report.
pub fn report_table(reports: &[(String, EvaluationResult)]) -> (Vec<String>, Vec<Vec<String>>) {
    let labels: BTreeSet<&String> = reports
        .iter()
        .flat_map(|(_, r)| r.eval_report.per_sub_protocol.keys())
        .collect();
    let mut header: Vec<String> = [
        "report",
        "policy",
        "fmr_target",
        "thresholds",
        "dev_fmr",
        "dev_fnmr",
        "eval_fmr",
        "eval_fnmr",
        "eval_hter",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    for l in &labels {
        header.push(format!("eval_fmr[{l}]"));
        header.push(format!("eval_fnmr[{l}]"));
    }
    let rows = reports
        .iter()
        .map(|(name, r)| {
            let thresholds = r
                .thresholds
                .iter()
                .map(|(k, v)| format!("{k}={v}"))
                .collect::<Vec<_>>()
                .join(";");
            let mut row = vec![
                name.clone(),
                r.policy.name().to_string(),
                opt(r.policy.alpha()),
                thresholds,
                r.dev_report.fmr.to_string(),
                r.dev_report.fnmr.to_string(),
                r.eval_report.fmr.to_string(),
                r.eval_report.fnmr.to_string(),
                r.eval_report.hter.to_string(),
            ];
            for l in &labels {
                let rates = r.eval_report.per_sub_protocol.get(*l);
                row.push(opt(rates.and_then(|x| x.fmr)));
                row.push(opt(rates.and_then(|x| x.fnmr)));
            }
            row
        })
        .collect();
    (header, rows)
}

fn markdown(header: &[String], rows: &[Vec<String>]) -> String {
    let line = |cells: &[String]| format!("| {} |\n", cells.join(" | "));
    let mut s = line(header);
    s.push_str(&line(&vec!["---".to_string(); header.len()]));
    for r in rows {
        s.push_str(&line(r));
    }
    s
}

fn csv_table(header: &[String], rows: &[Vec<String>]) -> CliResult<Vec<u8>> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    for r in std::iter::once(header).chain(rows.iter().map(|r| r.as_slice())) {
        w.write_record(r).map_err(|e| CliError::Usage(e.to_string()))?;
    }
    w.into_inner().map_err(|e| CliError::Usage(e.to_string()))
}

pub fn report(a: &ReportArgs, jobs: Option<usize>) -> CliResult<RunManifest> {
    let mut m = ManifestBuilder::new("report", jobs);
    let mut reports = Vec::new();
    for path in &a.inputs {
        let r: EvaluationResult = read_json(path)?;
        m.input(path);
        reports.push((stem(path), r));
    }
    let (header, rows) = report_table(&reports);
    let is_csv = a
        .out
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    let bytes = if is_csv {
        csv_table(&header, &rows)?
    } else {
        markdown(&header, &rows).into_bytes()
    };
    write_file(&a.out, bytes)?;
    m.output(&a.out);
    m.finish(&beside(&a.out))
}
