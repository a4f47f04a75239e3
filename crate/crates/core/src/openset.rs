//! Open-set identification at rank 1.
//!
//! Each probe is reduced to its best gallery subject (subject score = max over
//! that subject's templates) and that subject's score. For a threshold `t`:
//! FPIR is the fraction of unknown probes whose best score is `>= t`; TPIR is
//! the fraction of known probes whose best subject is correct and whose best
//! score is `>= t`. At `t = -inf` FPIR is 1 and TPIR is the closed-set rank-1
//! rate.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::just_above;

/// Rank-1 outcome of one probe against the gallery.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSummary {
    pub probe_sample_id: String,
    pub probe_subject_id: String,
    /// `false` for probes of subjects absent from the gallery.
    pub known: bool,
    pub top_subject_id: String,
    pub max_score: f64,
}

impl ProbeSummary {
    pub fn top_correct(&self) -> bool {
        self.known && self.top_subject_id == self.probe_subject_id
    }

    /// Builds the summary from `(reference_subject_id, score)` pairs of one
    /// probe. Subject score is the max over its templates; ties between
    /// subjects go to the lexicographically smallest subject id.
    pub fn from_scores<'a>(
        probe_sample_id: impl Into<String>,
        probe_subject_id: impl Into<String>,
        known: bool,
        scores: impl IntoIterator<Item = (&'a str, f64)>,
    ) -> Result<Self> {
        let probe_sample_id = probe_sample_id.into();
        let mut per_subject: BTreeMap<&str, f64> = BTreeMap::new();
        for (subject, score) in scores {
            if !score.is_finite() {
                return Err(Error::parse("scores", format!("non-finite score for {probe_sample_id}")));
            }
            per_subject
                .entry(subject)
                .and_modify(|s| *s = s.max(score))
                .or_insert(score);
        }
        let mut best: Option<(&str, f64)> = None;
        for (subject, score) in per_subject {
            if best.is_none_or(|(_, b)| score > b) {
                best = Some((subject, score));
            }
        }
        let (top, max_score) = best.ok_or_else(|| Error::MissingId {
            kind: "gallery scores",
            id: probe_sample_id.clone(),
        })?;
        Ok(ProbeSummary {
            probe_sample_id,
            probe_subject_id: probe_subject_id.into(),
            known,
            top_subject_id: top.to_string(),
            max_score,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpenSetPoint {
    pub fpir: f64,
    pub tpir: f64,
    pub threshold: f64,
}

/// Operating points ordered by descending threshold, i.e. ascending FPIR with
/// non-decreasing TPIR. The last point has threshold `-inf` and FPIR 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpenSetCurve {
    pub points: Vec<OpenSetPoint>,
}

impl OpenSetCurve {
    pub fn closed_set_point(&self) -> Option<&OpenSetPoint> {
        self.points.iter().rev().find(|p| p.fpir == 1.0)
    }
}

fn count_at_least(sorted: &[f64], t: f64) -> usize {
    sorted.len() - sorted.partition_point(|&s| s < t)
}

pub fn closed_set_rank1(probes: &[ProbeSummary]) -> Result<f64> {
    let known = probes.iter().filter(|p| p.known).count();
    if known == 0 {
        return Err(Error::EmptyClass("known probe"));
    }
    let correct = probes.iter().filter(|p| p.top_correct()).count();
    Ok(correct as f64 / known as f64)
}

pub fn openset_curve(probes: &[ProbeSummary]) -> Result<OpenSetCurve> {
    let mut unknown: Vec<f64> = probes.iter().filter(|p| !p.known).map(|p| p.max_score).collect();
    let mut correct: Vec<f64> = probes
        .iter()
        .filter(|p| p.top_correct())
        .map(|p| p.max_score)
        .collect();
    let n_known = probes.iter().filter(|p| p.known).count();
    let n_unknown = unknown.len();
    if n_known == 0 {
        return Err(Error::EmptyClass("known probe"));
    }
    if n_unknown == 0 {
        return Err(Error::EmptyClass("unknown probe"));
    }
    unknown.sort_by(f64::total_cmp);
    correct.sort_by(f64::total_cmp);

    let mut thresholds: Vec<f64> = probes.iter().map(|p| p.max_score).collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    thresholds.insert(0, just_above(thresholds[0]));
    thresholds.push(f64::NEG_INFINITY);

    let points = thresholds
        .into_iter()
        .map(|t| OpenSetPoint {
            fpir: count_at_least(&unknown, t) as f64 / n_unknown as f64,
            tpir: count_at_least(&correct, t) as f64 / n_known as f64,
            threshold: t,
        })
        .collect();
    Ok(OpenSetCurve { points })
}

/// TPIR at the largest achieved FPIR not exceeding `target_fpir` (step
/// interpolation). Among points sharing that FPIR the best TPIR is taken.
/// When no point qualifies the zero-FPIR fallback is a TPIR of 0.
pub fn interpolate_tpir_at_fpir(curve: &OpenSetCurve, target_fpir: f64) -> f64 {
    let mut best: Option<(f64, f64)> = None;
    for p in curve.points.iter().filter(|p| p.fpir <= target_fpir) {
        best = match best {
            Some((f, t)) if f > p.fpir || (f == p.fpir && t >= p.tpir) => Some((f, t)),
            _ => Some((p.fpir, p.tpir)),
        };
    }
    best.map_or(0.0, |(_, t)| t)
}
