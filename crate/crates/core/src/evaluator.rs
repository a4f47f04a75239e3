//! End-to-end evaluation under a threshold-selection policy.
//!
//! The operational procedure solves one threshold on the pooled dev scores
//! of all sub-protocols and applies it unchanged to every eval sub-protocol.
//! Per-sub-protocol thresholds on dev, and thresholds solved directly on eval,
//! are available as policies so their optimistic bias can be measured.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::embedding::{EmbeddingTable, Similarity, Template};
use crate::error::{Error, Result};
use crate::metrics::{
    eer_threshold, resolves_fmr, roc_points, threshold_at_fmr, EerPoint, MetricReport, Rates,
    RocPoint, ScoreRecord, ScoreSet,
};
use crate::openset::{closed_set_rank1, openset_curve, OpenSetCurve, ProbeSummary};
use crate::par;
use crate::protocol::{Group, Protocol, ProtocolKind};

pub const COMBINED: &str = "combined";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum ThresholdPolicy {
    /// One threshold at FMR `alpha` on pooled dev scores.
    CombinedDevFmr { alpha: f64 },
    /// One threshold per sub-protocol at FMR `alpha` on that label's dev
    /// scores.
    PerSubprotocolDevFmr { alpha: f64 },
    /// One threshold per sub-protocol solved on eval scores. Not an
    /// operational procedure.
    OnEvalFmr { alpha: f64 },
    /// EER threshold on pooled dev scores, HTER reported on eval.
    EerDevHterEval,
}

impl ThresholdPolicy {
    pub fn name(&self) -> &'static str {
        match self {
            ThresholdPolicy::CombinedDevFmr { .. } => "combined",
            ThresholdPolicy::PerSubprotocolDevFmr { .. } => "per-subprotocol",
            ThresholdPolicy::OnEvalFmr { .. } => "on-eval",
            ThresholdPolicy::EerDevHterEval => "eer-hter",
        }
    }

    pub fn parse(name: &str, alpha: f64) -> Result<Self> {
        let p = match name {
            "combined" => ThresholdPolicy::CombinedDevFmr { alpha },
            "per-subprotocol" => ThresholdPolicy::PerSubprotocolDevFmr { alpha },
            "on-eval" => ThresholdPolicy::OnEvalFmr { alpha },
            "eer-hter" => ThresholdPolicy::EerDevHterEval,
            other => return Err(Error::Config(format!("unknown policy '{other}'"))),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn alpha(&self) -> Option<f64> {
        match *self {
            ThresholdPolicy::CombinedDevFmr { alpha }
            | ThresholdPolicy::PerSubprotocolDevFmr { alpha }
            | ThresholdPolicy::OnEvalFmr { alpha } => Some(alpha),
            ThresholdPolicy::EerDevHterEval => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.alpha() {
            Some(a) if !(a > 0.0 && a < 1.0) => {
                Err(Error::Config(format!("FMR target {a} not in (0,1)")))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationResult {
    pub policy: ThresholdPolicy,
    /// Threshold per sub-protocol, or a single `combined` entry.
    pub thresholds: BTreeMap<String, f64>,
    pub dev_eer: Option<EerPoint>,
    pub dev_report: MetricReport,
    pub eval_report: MetricReport,
    pub warnings: Vec<String>,
}

impl EvaluationResult {
    pub fn threshold_for(&self, label: &str) -> Option<f64> {
        self.thresholds
            .get(COMBINED)
            .or_else(|| self.thresholds.get(label))
            .copied()
    }
}

/// Scores of one group, split by sub-protocol label.
#[derive(Debug, Default)]
struct GroupScores {
    by_label: BTreeMap<String, ScoreSet>,
    pooled: ScoreSet,
}

fn split_group(records: &[&ScoreRecord]) -> Result<GroupScores> {
    let mut per: BTreeMap<String, Vec<&ScoreRecord>> = BTreeMap::new();
    for r in records {
        per.entry(r.sub_protocol.clone()).or_default().push(r);
    }
    let mut by_label = BTreeMap::new();
    for (label, rs) in per {
        by_label.insert(label, ScoreSet::from_records(rs)?);
    }
    Ok(GroupScores {
        by_label,
        pooled: ScoreSet::from_records(records.iter().copied())?,
    })
}

fn report(
    group: &GroupScores,
    labels: &BTreeSet<String>,
    thresholds: &BTreeMap<String, f64>,
    shared: Option<f64>,
    policy: &str,
) -> Result<MetricReport> {
    let empty = ScoreSet::default();
    let label_list: Vec<&String> = labels.iter().collect();
    let rates = par::map(&label_list, |label| {
        let t = shared.or_else(|| thresholds.get(*label).copied()).expect("threshold solved");
        let set = group.by_label.get(*label).unwrap_or(&empty);
        ((*label).clone(), Rates::at(set, t))
    });
    MetricReport::from_labels(shared, rates.into_iter().collect(), policy)
}

fn per_label_thresholds(
    source: &GroupScores,
    labels: &BTreeSet<String>,
    alpha: f64,
    source_name: &str,
    warnings: &mut Vec<String>,
) -> Result<BTreeMap<String, f64>> {
    let label_list: Vec<&String> = labels.iter().collect();
    let solved = par::try_map(&label_list, |label| {
        let set = source.by_label.get(*label).ok_or_else(|| {
            Error::PolicyMismatch(format!("sub-protocol '{label}' has no {source_name} scores"))
        })?;
        threshold_at_fmr(set, alpha)
            .map(|t| ((*label).clone(), t, resolves_fmr(set, alpha)))
            .map_err(|_| {
                Error::PolicyMismatch(format!(
                    "sub-protocol '{label}' has no {source_name} impostor scores"
                ))
            })
    })?;
    let mut out = BTreeMap::new();
    for (label, t, resolved) in solved {
        if !resolved {
            warnings.push(format!(
                "{source_name} sub-protocol '{label}' has fewer than 1/alpha impostor scores"
            ));
        }
        out.insert(label, t);
    }
    Ok(out)
}

/// Evaluates dev/eval scores under `policy`.
///
/// Thresholds are solved first; per-label rates are computed afterwards from
/// the frozen thresholds. Sub-protocol membership comes from the probe side
/// of each record.
pub fn evaluate(scores: &[ScoreRecord], policy: ThresholdPolicy) -> Result<EvaluationResult> {
    policy.validate()?;
    let dev_records: Vec<&ScoreRecord> = scores.iter().filter(|r| r.group == Group::Dev).collect();
    let eval_records: Vec<&ScoreRecord> = scores.iter().filter(|r| r.group == Group::Eval).collect();
    if scores.iter().any(|r| r.group == Group::None) {
        return Err(Error::PolicyMismatch(
            "scores without dev/eval group support only ROC evaluation".into(),
        ));
    }
    if dev_records.is_empty() || eval_records.is_empty() {
        return Err(Error::PolicyMismatch("both dev and eval scores are required".into()));
    }
    let dev = split_group(&dev_records)?;
    let eval = split_group(&eval_records)?;
    let labels: BTreeSet<String> = dev.by_label.keys().chain(eval.by_label.keys()).cloned().collect();
    let eval_labels: BTreeSet<String> = eval.by_label.keys().cloned().collect();

    let mut warnings = Vec::new();
    let mut dev_eer = None;
    let (thresholds, shared) = match policy {
        ThresholdPolicy::CombinedDevFmr { alpha } => {
            let t = threshold_at_fmr(&dev.pooled, alpha)?;
            if !resolves_fmr(&dev.pooled, alpha) {
                warnings.push("dev set has fewer than 1/alpha impostor scores".into());
            }
            (BTreeMap::from([(COMBINED.to_string(), t)]), Some(t))
        }
        ThresholdPolicy::PerSubprotocolDevFmr { alpha } => (
            per_label_thresholds(&dev, &labels, alpha, "dev", &mut warnings)?,
            None,
        ),
        ThresholdPolicy::OnEvalFmr { alpha } => {
            warnings.push(
                "thresholds solved on eval scores: rates are optimistic and not operational".into(),
            );
            let mut t = per_label_thresholds(&eval, &eval_labels, alpha, "eval", &mut warnings)?;
            // dev-only labels have no eval threshold; fall back to their dev one
            for label in labels.difference(&eval_labels) {
                t.insert(label.clone(), threshold_at_fmr(&dev.by_label[label], alpha)?);
            }
            (t, None)
        }
        ThresholdPolicy::EerDevHterEval => {
            let e = eer_threshold(&dev.pooled)?;
            dev_eer = Some(e);
            (BTreeMap::from([(COMBINED.to_string(), e.threshold)]), Some(e.threshold))
        }
    };

    let name = policy.name();
    let dev_labels: BTreeSet<String> = dev.by_label.keys().cloned().collect();
    let dev_report = report(&dev, &dev_labels, &thresholds, shared, name)?;
    let eval_report = report(&eval, &eval_labels, &thresholds, shared, name)?;
    Ok(EvaluationResult {
        policy,
        thresholds,
        dev_eer,
        dev_report,
        eval_report,
        warnings,
    })
}

/// [`evaluate`] with a check that the protocol has a dev/eval split.
pub fn evaluate_protocol(
    p: &Protocol,
    scores: &[ScoreRecord],
    policy: ThresholdPolicy,
) -> Result<EvaluationResult> {
    if p.kind != ProtocolKind::VerificationSplit {
        return Err(Error::PolicyMismatch(format!(
            "protocol '{}' has no dev/eval split; use ROC evaluation",
            p.name
        )));
    }
    evaluate(scores, policy)
}

/// One ROC per sub-protocol label from the pooled scores of that label.
pub fn roc_by_label(scores: &[ScoreRecord]) -> Result<BTreeMap<String, Vec<RocPoint>>> {
    let mut per: BTreeMap<&str, Vec<&ScoreRecord>> = BTreeMap::new();
    for r in scores {
        per.entry(&r.sub_protocol).or_default().push(r);
    }
    let entries: Vec<(&str, Vec<&ScoreRecord>)> = per.into_iter().collect();
    let curves = par::try_map(&entries, |(label, rs)| {
        let set = ScoreSet::from_records(rs.iter().copied())?;
        Ok::<_, Error>((label.to_string(), roc_points(&set)?))
    })?;
    Ok(curves.into_iter().collect())
}

pub fn roc_evaluate(p: &Protocol, scores: &[ScoreRecord]) -> Result<BTreeMap<String, Vec<RocPoint>>> {
    if p.kind != ProtocolKind::VerificationRocOnly {
        return Err(Error::PolicyMismatch(format!(
            "protocol '{}' is not ROC-only; use evaluate",
            p.name
        )));
    }
    roc_by_label(scores)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpenSetResult {
    pub curve: OpenSetCurve,
    pub closed_set_rank1: f64,
    pub known_probes: usize,
    pub unknown_probes: usize,
    pub probes: Vec<ProbeSummary>,
}

fn open_set_result(probes: Vec<ProbeSummary>) -> Result<OpenSetResult> {
    let curve = openset_curve(&probes)?;
    let rank1 = closed_set_rank1(&probes)?;
    debug_assert_eq!(curve.closed_set_point().map(|p| p.tpir), Some(rank1));
    Ok(OpenSetResult {
        known_probes: probes.iter().filter(|p| p.known).count(),
        unknown_probes: probes.iter().filter(|p| !p.known).count(),
        curve,
        closed_set_rank1: rank1,
        probes,
    })
}

fn require_open_set(p: &Protocol) -> Result<()> {
    if p.kind != ProtocolKind::OpenSet {
        return Err(Error::PolicyMismatch(format!(
            "protocol '{}' is not an open-set protocol",
            p.name
        )));
    }
    Ok(())
}

/// Scores every probe against the whole gallery and builds the rank-1
/// open-set curve.
pub fn openset_evaluate(
    p: &Protocol,
    templates: &[Template],
    probes: &EmbeddingTable,
    similarity: Similarity,
) -> Result<OpenSetResult> {
    require_open_set(p)?;
    let probe_samples: Vec<_> = p.probes().collect();
    let summaries = par::try_map(&probe_samples, |s| {
        let e = probes.get(&s.sample_id).ok_or_else(|| Error::MissingId {
            kind: "embedding",
            id: s.sample_id.clone(),
        })?;
        let scores = templates
            .iter()
            .map(|t| Ok((t.subject_id.as_str(), similarity.score(&t.vector, &e.vector)?)))
            .collect::<Result<Vec<_>>>()?;
        let known = !p.unknown_subjects.contains(&s.subject_id);
        ProbeSummary::from_scores(&s.sample_id, &s.subject_id, known, scores)
    })?;
    open_set_result(summaries)
}

/// Open-set evaluation from a score file covering probe × gallery.
pub fn openset_from_scores(p: &Protocol, scores: &[ScoreRecord]) -> Result<OpenSetResult> {
    require_open_set(p)?;
    let mut per_probe: HashMap<&str, Vec<(&str, f64)>> = HashMap::new();
    for r in scores {
        per_probe
            .entry(&r.probe_sample_id)
            .or_default()
            .push((&r.reference_subject_id, r.score));
    }
    let probe_samples: Vec<_> = p.probes().collect();
    let summaries = par::try_map(&probe_samples, |s| {
        let rows = per_probe.get(s.sample_id.as_str()).ok_or_else(|| Error::MissingId {
            kind: "scores",
            id: s.sample_id.clone(),
        })?;
        let known = !p.unknown_subjects.contains(&s.subject_id);
        ProbeSummary::from_scores(&s.sample_id, &s.subject_id, known, rows.iter().copied())
    })?;
    open_set_result(summaries)
}
