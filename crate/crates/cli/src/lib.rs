//! Command-line front end: every subcommand is a thin wrapper over
//! `biomeval-core` that also writes a run manifest next to its outputs.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub mod commands;
pub mod manifest;

pub use manifest::RunManifest;

#[derive(thiserror::Error, Debug)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] biomeval_core::Error),
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid JSON in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("no annotation file for image '{0}'")]
    MissingAnnotation(String),
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.kind(),
            CliError::Io { .. } => "io",
            CliError::Json { .. } => "json",
            CliError::MissingAnnotation(_) => "missing-annotation",
            CliError::Usage(_) => "usage",
        }
    }

    /// `error[<kind>]: <message>` on a single line.
    pub fn report_line(&self) -> String {
        let msg = self.to_string().replace(['\n', '\r'], " ");
        format!("error[{}]: {}", self.kind(), msg)
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "biomeval", version, about = "Biometric recognition evaluation")]
pub struct Cli {
    /// Worker threads for data-parallel stages.
    #[arg(long, global = true, env = "BIOMEVAL_JOBS")]
    pub jobs: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Crop and align images from eye/mouth annotations.
    Align(AlignArgs),
    /// Compute embeddings for protocol samples from aligned images.
    Extract(ExtractArgs),
    /// Build one template per protocol model.
    Enroll(EnrollArgs),
    /// Score probes against templates and write a score CSV.
    Score(ScoreArgs),
    /// Select thresholds and report error rates for a score CSV.
    Evaluate(EvaluateArgs),
    /// Rank-1 open-set identification curve.
    Openset(OpensetArgs),
    /// Generate a synthetic protocol with embeddings, or score files.
    Synth(SynthArgs),
    /// Tabulate several evaluation reports.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
pub struct AlignArgs {
    /// Directory of PNG images.
    #[arg(long)]
    pub images: PathBuf,
    /// Directory holding `<stem>.txt` landmark files.
    #[arg(long)]
    pub annotations: PathBuf,
    /// Preset name or path to an alignment spec JSON.
    #[arg(long, default_value = "arcface112")]
    pub spec: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ExtractArgs {
    #[arg(long)]
    pub protocol: PathBuf,
    /// Base directory for relative sample paths.
    #[arg(long)]
    pub images: PathBuf,
    /// Tile size of the built-in downsampling extractor.
    #[arg(long, default_value_t = 8, conflicts_with = "exec")]
    pub block: usize,
    /// External extractor program speaking the EXTRACT line protocol.
    #[arg(long)]
    pub exec: Option<PathBuf>,
    /// Extra argument for the external extractor (repeatable).
    #[arg(long = "exec-arg", requires = "exec")]
    pub exec_args: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EnrollArgs {
    #[arg(long)]
    pub protocol: PathBuf,
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ScoreArgs {
    #[arg(long)]
    pub protocol: PathBuf,
    #[arg(long)]
    pub embeddings: PathBuf,
    /// Templates from `enroll`; enrolled on the fly when omitted.
    #[arg(long)]
    pub templates: Option<PathBuf>,
    /// dev, eval or all.
    #[arg(long, default_value = "all")]
    pub group: String,
    /// cosine or neg-euclidean.
    #[arg(long, default_value = "cosine")]
    pub similarity: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub scores: PathBuf,
    /// combined, per-subprotocol, on-eval, eer-hter, or roc for files
    /// without a dev/eval split.
    #[arg(long, default_value = "combined")]
    pub policy: String,
    #[arg(long, default_value_t = biomeval_core::protocol::DEFAULT_FMR_TARGET)]
    pub fmr_target: f64,
    /// Protocol the scores came from, checked against the policy.
    #[arg(long)]
    pub protocol: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Directory for per-sub-protocol ROC CSVs.
    #[arg(long)]
    pub curves: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct OpensetArgs {
    #[arg(long)]
    pub protocol: PathBuf,
    /// Probe-versus-gallery score CSV.
    #[arg(long, conflicts_with = "embeddings", required_unless_present = "embeddings")]
    pub scores: Option<PathBuf>,
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long, default_value = "cosine")]
    pub similarity: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Optional JSON summary with closed-set accuracy and per-probe results.
    #[arg(long)]
    pub summary: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    #[arg(long, num_args = 1.., required = true)]
    pub inputs: Vec<PathBuf>,
    /// Output table; `.csv` gives CSV, anything else Markdown.
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> CliResult<RunManifest>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| CliError::Usage(first_line(&e.to_string())))?;
    execute(cli)
}

pub fn first_line(s: &str) -> String {
    s.lines().find(|l| !l.trim().is_empty()).unwrap_or("").trim().to_string()
}

pub fn execute(cli: Cli) -> CliResult<RunManifest> {
    match cli.jobs {
        Some(0) => Err(CliError::Usage("--jobs must be at least 1".into())),
        Some(n) => with_jobs(n, move || commands::dispatch(cli.command, Some(n))),
        None => commands::dispatch(cli.command, None),
    }
}

#[cfg(feature = "parallel")]
fn with_jobs<R: Send>(n: usize, f: impl FnOnce() -> CliResult<R> + Send) -> CliResult<R> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map_err(|e| CliError::Usage(format!("cannot build thread pool: {e}")))?;
    pool.install(f)
}

#[cfg(not(feature = "parallel"))]
fn with_jobs<R: Send>(_n: usize, f: impl FnOnce() -> CliResult<R> + Send) -> CliResult<R> {
    f()
}
