//! Seeded synthetic identities, protocols and score sets.
//!
//! Random stream: ChaCha20 seeded with `seed_from_u64(seed)`. Uniform
//! deviates are `((next_u64() >> 11) + 1) * 2^-53`, in `(0, 1]`. Each
//! standard normal deviate consumes two uniforms `u1, u2` and is
//! `sqrt(-2 ln u1) * cos(2 pi u2)` (Box-Muller, cosine branch only). Draw
//! order is documented on each generator so other implementations can
//! reproduce the streams.

use std::collections::BTreeSet;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{Embedding, EmbeddingTable};
use crate::error::{Error, Result};
use crate::metrics::ScoreRecord;
use crate::protocol::{
    Group, ModelSpec, Protocol, ProtocolKind, Role, SampleRecord, DEFAULT_FMR_TARGET,
};

/// Portable seeded normal generator.
pub struct NormalStream {
    rng: ChaCha20Rng,
}

impl NormalStream {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha20Rng::seed_from_u64(seed),
        }
    }

    pub fn uniform(&mut self) -> f64 {
        ((self.rng.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn standard_normal(&mut self) -> f64 {
        let u1 = self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        mean + std * self.standard_normal()
    }
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelNoise {
    pub label: String,
    #[serde(default)]
    pub extra_noise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub kind: ProtocolKind,
    pub seed: u64,
    pub n_subjects: usize,
    #[serde(default)]
    pub n_unknown_subjects: usize,
    pub samples_per_subject: usize,
    pub enroll_per_subject: usize,
    #[serde(default = "one")]
    pub models_per_subject: usize,
    pub dim: usize,
    pub noise_sigma: f64,
    pub sub_protocols: Vec<LabelNoise>,
    #[serde(default = "default_fmr")]
    pub fmr_target: f64,
}

fn default_name() -> String {
    "synthetic".into()
}

fn one() -> usize {
    1
}

fn default_fmr() -> f64 {
    DEFAULT_FMR_TARGET
}

impl SynthConfig {
    /// Small verification config with one sub-protocol.
    pub fn verification(seed: u64, n_subjects: usize, dim: usize, noise_sigma: f64) -> Self {
        SynthConfig {
            name: default_name(),
            kind: ProtocolKind::VerificationSplit,
            seed,
            n_subjects,
            n_unknown_subjects: 0,
            samples_per_subject: 4,
            enroll_per_subject: 1,
            models_per_subject: 1,
            dim,
            noise_sigma,
            sub_protocols: vec![LabelNoise {
                label: "default".into(),
                extra_noise: 0.0,
            }],
            fmr_target: DEFAULT_FMR_TARGET,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.dim < 2 {
            return bad("dim must be at least 2");
        }
        if self.enroll_per_subject == 0 || self.enroll_per_subject >= self.samples_per_subject {
            return bad("need 0 < enroll_per_subject < samples_per_subject");
        }
        if self.models_per_subject == 0 || self.models_per_subject > self.enroll_per_subject {
            return bad("need 0 < models_per_subject <= enroll_per_subject");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be finite and nonnegative");
        }
        if self.sub_protocols.is_empty() {
            return bad("at least one sub-protocol label required");
        }
        if self.sub_protocols.iter().any(|l| !(l.extra_noise >= 0.0 && l.extra_noise.is_finite())) {
            return bad("extra_noise must be finite and nonnegative");
        }
        let min_subjects = if self.kind == ProtocolKind::VerificationSplit { 4 } else { 2 };
        if self.n_subjects < min_subjects {
            return bad("too few subjects for this protocol kind");
        }
        match (self.kind, self.n_unknown_subjects) {
            (ProtocolKind::OpenSet, 0) => bad("open_set needs unknown subjects"),
            (ProtocolKind::OpenSet, _) => Ok(()),
            (_, 0) => Ok(()),
            _ => bad("unknown subjects only apply to open_set"),
        }
    }
}

/// Generated protocol together with the embeddings of all its samples.
#[derive(Debug, Clone)]
pub struct SynthData {
    pub protocol: Protocol,
    pub embeddings: EmbeddingTable,
}

fn width(n: usize) -> usize {
    n.max(1).to_string().len().max(4)
}

/// Draw order: for every subject (known subjects first, then unknowns) one
/// mean direction of `dim` normals; then for every subject in the same order
/// and every sample in index order, `dim` noise normals.
///
/// Known subject `k` has id `S{k:0w}`; unknowns `U{k:0w}`. The first
/// `enroll_per_subject` samples of a known subject are enroll samples, split
/// round-robin over `models_per_subject` models. Probe sample `j` carries
/// label `j mod L`. Unknown subjects contribute only probes. In split
/// protocols the first half of the known subjects is dev, the rest eval.
pub fn generate(config: &SynthConfig) -> Result<SynthData> {
    config.validate()?;
    let mut rng = NormalStream::new(config.seed);
    let n_total = config.n_subjects + config.n_unknown_subjects;
    let w = width(n_total);
    let wide = width(config.samples_per_subject);

    let mut means = Vec::with_capacity(n_total);
    for _ in 0..n_total {
        let mut m: Vec<f64> = (0..config.dim).map(|_| rng.standard_normal()).collect();
        normalize(&mut m);
        means.push(m);
    }

    let n_dev = config.n_subjects / 2;
    let mut samples = Vec::new();
    let mut models = Vec::new();
    let mut embeddings = EmbeddingTable::default();
    let labels = &config.sub_protocols;

    for (s, mean) in means.iter().enumerate() {
        let unknown = s >= config.n_subjects;
        let subject = if unknown {
            format!("U{:0w$}", s - config.n_subjects)
        } else {
            format!("S{s:0w$}")
        };
        let group = match config.kind {
            ProtocolKind::VerificationSplit if s < n_dev => Group::Dev,
            ProtocolKind::VerificationSplit => Group::Eval,
            _ => Group::None,
        };
        let mut model_samples: Vec<Vec<String>> = vec![Vec::new(); config.models_per_subject];
        for j in 0..config.samples_per_subject {
            let enroll = j < config.enroll_per_subject;
            let (role, label, extra) = if enroll {
                (Role::Enroll, String::new(), 0.0)
            } else {
                let l = &labels[(j - config.enroll_per_subject) % labels.len()];
                (Role::Probe, l.label.clone(), l.extra_noise)
            };
            let sigma = config.noise_sigma + extra;
            let mut v: Vec<f64> = mean
                .iter()
                .map(|&m| m + sigma * rng.standard_normal())
                .collect();
            normalize(&mut v);
            if unknown && enroll {
                continue;
            }
            let sample_id = format!("{subject}_{j:0wide$}");
            if enroll {
                model_samples[j % config.models_per_subject].push(sample_id.clone());
            }
            samples.push(SampleRecord {
                sample_id: sample_id.clone(),
                subject_id: subject.clone(),
                path: format!("{subject}/{sample_id}.png"),
                role,
                group,
                sub_protocol: label,
                landmark_file: None,
            });
            embeddings.insert(Embedding::new(sample_id, subject.clone(), v)?)?;
        }
        if !unknown {
            for (k, ids) in model_samples.into_iter().enumerate() {
                let model_id = if config.models_per_subject == 1 {
                    format!("M{subject}")
                } else {
                    format!("M{subject}_{k}")
                };
                models.push(ModelSpec {
                    model_id,
                    subject_id: subject.clone(),
                    enroll_sample_ids: ids,
                });
            }
        }
    }

    let unknown_subjects: BTreeSet<String> = (0..config.n_unknown_subjects)
        .map(|k| format!("U{k:0w$}"))
        .collect();
    let protocol = Protocol::validated(Protocol {
        name: config.name.clone(),
        kind: config.kind,
        fmr_target: config.fmr_target,
        sub_protocols: labels.iter().map(|l| l.label.clone()).collect(),
        samples,
        models,
        unknown_subjects,
    })?;
    Ok(SynthData {
        protocol,
        embeddings,
    })
}

/// Parametric genuine/impostor score distributions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSynthConfig {
    pub seed: u64,
    pub n_genuine: usize,
    pub n_impostor: usize,
    pub genuine_mean: f64,
    pub genuine_std: f64,
    pub impostor_mean: f64,
    pub impostor_std: f64,
    #[serde(default = "default_label")]
    pub sub_protocol: String,
    #[serde(default = "default_group")]
    pub group: Group,
}

fn default_label() -> String {
    "default".into()
}

fn default_group() -> Group {
    Group::None
}

impl ScoreSynthConfig {
    pub fn normal(seed: u64, n: usize, genuine: (f64, f64), impostor: (f64, f64)) -> Self {
        ScoreSynthConfig {
            seed,
            n_genuine: n,
            n_impostor: n,
            genuine_mean: genuine.0,
            genuine_std: genuine.1,
            impostor_mean: impostor.0,
            impostor_std: impostor.1,
            sub_protocol: default_label(),
            group: default_group(),
        }
    }
}

/// Draw order: all genuine scores, then all impostor scores. Genuine record
/// `i` compares model `MG{i}` with probe `g{i}` of the same subject;
/// impostor record `i` pairs subject `RI{i}` with probe subject `PI{i}`.
pub fn generate_scores(config: &ScoreSynthConfig) -> Result<Vec<ScoreRecord>> {
    let stds = [config.genuine_std, config.impostor_std];
    if stds.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
        return Err(Error::Config("standard deviations must be finite and nonnegative".into()));
    }
    if config.n_genuine == 0 || config.n_impostor == 0 {
        return Err(Error::Config("both classes need at least one score".into()));
    }
    let mut rng = NormalStream::new(config.seed);
    let mut out = Vec::with_capacity(config.n_genuine + config.n_impostor);
    let label = &config.sub_protocol;
    for i in 0..config.n_genuine {
        let s = rng.normal(config.genuine_mean, config.genuine_std);
        out.push(ScoreRecord::new(
            label.as_str(),
            config.group,
            format!("MG{i}"),
            format!("G{i}"),
            format!("g{i}"),
            format!("G{i}"),
            s,
        ));
    }
    for i in 0..config.n_impostor {
        let s = rng.normal(config.impostor_mean, config.impostor_std);
        out.push(ScoreRecord::new(
            label.as_str(),
            config.group,
            format!("MI{i}"),
            format!("RI{i}"),
            format!("i{i}"),
            format!("PI{i}"),
            s,
        ));
    }
    Ok(out)
}
