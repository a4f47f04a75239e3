//! Verification metrics over labeled comparison scores.
//!
//! Decision rule: a comparison is a match when `score >= threshold`. FMR is
//! the fraction of impostor scores at or above the threshold, FNMR the
//! fraction of genuine scores strictly below it. Empirical rates only change
//! at observed scores, so every threshold search runs over the observed
//! values plus one value just above the maximum.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::protocol::Group;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub sub_protocol: String,
    pub group: Group,
    pub model_id: String,
    pub reference_subject_id: String,
    pub probe_sample_id: String,
    pub probe_subject_id: String,
    pub score: f64,
    pub is_genuine: bool,
}

impl ScoreRecord {
    pub fn new(
        sub_protocol: impl Into<String>,
        group: Group,
        model_id: impl Into<String>,
        reference_subject_id: impl Into<String>,
        probe_sample_id: impl Into<String>,
        probe_subject_id: impl Into<String>,
        score: f64,
    ) -> Self {
        let reference_subject_id = reference_subject_id.into();
        let probe_subject_id = probe_subject_id.into();
        ScoreRecord {
            sub_protocol: sub_protocol.into(),
            group,
            model_id: model_id.into(),
            is_genuine: reference_subject_id == probe_subject_id,
            reference_subject_id,
            probe_subject_id,
            probe_sample_id: probe_sample_id.into(),
            score,
        }
    }
}

/// Scores split by class, each sorted ascending.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreSet {
    genuine: Vec<f64>,
    impostor: Vec<f64>,
}

/// Ascending; `-0.0` becomes `+0.0` so equal scores share one bit pattern.
fn sorted(mut v: Vec<f64>) -> Vec<f64> {
    for x in &mut v {
        *x += 0.0;
    }
    v.sort_by(f64::total_cmp);
    v
}

impl ScoreSet {
    pub fn from_scores(genuine: Vec<f64>, impostor: Vec<f64>) -> Result<Self> {
        if genuine.iter().chain(&impostor).any(|s| !s.is_finite()) {
            return Err(Error::parse("scores", "non-finite score"));
        }
        Ok(Self {
            genuine: sorted(genuine),
            impostor: sorted(impostor),
        })
    }

    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a ScoreRecord>) -> Result<Self> {
        let mut genuine = Vec::new();
        let mut impostor = Vec::new();
        for r in records {
            if r.is_genuine != (r.reference_subject_id == r.probe_subject_id) {
                return Err(Error::parse(
                    "scores",
                    format!(
                        "genuine flag inconsistent for {} vs {}",
                        r.model_id, r.probe_sample_id
                    ),
                ));
            }
            if r.is_genuine {
                genuine.push(r.score);
            } else {
                impostor.push(r.score);
            }
        }
        Self::from_scores(genuine, impostor)
    }

    pub fn genuine(&self) -> &[f64] {
        &self.genuine
    }

    pub fn impostor(&self) -> &[f64] {
        &self.impostor
    }

    pub fn genuine_count(&self) -> usize {
        self.genuine.len()
    }

    pub fn impostor_count(&self) -> usize {
        self.impostor.len()
    }

    pub fn len(&self) -> usize {
        self.genuine.len() + self.impostor.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Impostor scores at or above `threshold`.
    pub fn false_matches(&self, threshold: f64) -> usize {
        self.impostor.len() - self.impostor.partition_point(|&s| s < threshold)
    }

    /// Genuine scores strictly below `threshold`.
    pub fn false_non_matches(&self, threshold: f64) -> usize {
        self.genuine.partition_point(|&s| s < threshold)
    }
}

#[inline]
fn rate(count: usize, total: usize) -> f64 {
    count as f64 / total as f64
}

/// Smallest representable value strictly above `v`.
pub fn just_above(v: f64) -> f64 {
    v.next_up()
}

pub fn fmr_at(s: &ScoreSet, threshold: f64) -> Result<f64> {
    if s.impostor.is_empty() {
        return Err(Error::EmptyClass("impostor"));
    }
    Ok(rate(s.false_matches(threshold), s.impostor.len()))
}

pub fn fnmr_at(s: &ScoreSet, threshold: f64) -> Result<f64> {
    if s.genuine.is_empty() {
        return Err(Error::EmptyClass("genuine"));
    }
    Ok(rate(s.false_non_matches(threshold), s.genuine.len()))
}

/// Smallest threshold among the impostor scores (and one value above the
/// largest) whose FMR does not exceed `target`.
pub fn threshold_at_fmr(s: &ScoreSet, target: f64) -> Result<f64> {
    let imp = &s.impostor;
    let n = imp.len();
    if n == 0 {
        return Err(Error::EmptyClass("impostor"));
    }
    let mut i = 0;
    while i < n {
        if rate(n - i, n) <= target {
            return Ok(imp[i]);
        }
        let v = imp[i];
        while i < n && imp[i] == v {
            i += 1;
        }
    }
    Ok(just_above(imp[n - 1]))
}

/// Whether the impostor set is large enough to resolve `target`.
pub fn resolves_fmr(s: &ScoreSet, target: f64) -> bool {
    s.impostor.len() as f64 * target >= 1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EerPoint {
    pub threshold: f64,
    pub eer: f64,
    pub fmr: f64,
    pub fnmr: f64,
}

/// Distinct observed scores of both classes, ascending, followed by one value
/// above the maximum.
fn candidate_thresholds(s: &ScoreSet) -> Vec<f64> {
    let mut all = Vec::with_capacity(s.len() + 1);
    let (g, im) = (&s.genuine, &s.impostor);
    let (mut i, mut j) = (0, 0);
    while i < g.len() || j < im.len() {
        let v = if j >= im.len() || (i < g.len() && g[i] <= im[j]) {
            i += 1;
            g[i - 1]
        } else {
            j += 1;
            im[j - 1]
        };
        if all.last() != Some(&v) {
            all.push(v);
        }
    }
    if let Some(&max) = all.last() {
        all.push(just_above(max));
    }
    all
}

/// Threshold where FMR and FNMR are closest; ties go to the smaller
/// threshold.
pub fn eer_threshold(s: &ScoreSet) -> Result<EerPoint> {
    if s.impostor.is_empty() {
        return Err(Error::EmptyClass("impostor"));
    }
    if s.genuine.is_empty() {
        return Err(Error::EmptyClass("genuine"));
    }
    let (ng, ni) = (s.genuine.len(), s.impostor.len());
    let mut best: Option<(f64, EerPoint)> = None;
    let (mut gi, mut ii) = (0, 0);
    for t in candidate_thresholds(s) {
        while gi < ng && s.genuine[gi] < t {
            gi += 1;
        }
        while ii < ni && s.impostor[ii] < t {
            ii += 1;
        }
        let fmr = rate(ni - ii, ni);
        let fnmr = rate(gi, ng);
        let gap = (fmr - fnmr).abs();
        if best.as_ref().is_none_or(|(g, _)| gap < *g) {
            best = Some((
                gap,
                EerPoint {
                    threshold: t,
                    eer: (fmr + fnmr) / 2.0,
                    fmr,
                    fnmr,
                },
            ));
        }
    }
    Ok(best.expect("at least one candidate").1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fmr: f64,
    pub fnmr: f64,
}

/// One operating point per distinct score plus the point above the maximum,
/// in ascending threshold order (FMR non-increasing, FNMR non-decreasing).
pub fn roc_points(s: &ScoreSet) -> Result<Vec<RocPoint>> {
    if s.impostor.is_empty() {
        return Err(Error::EmptyClass("impostor"));
    }
    if s.genuine.is_empty() {
        return Err(Error::EmptyClass("genuine"));
    }
    let (ng, ni) = (s.genuine.len(), s.impostor.len());
    let (mut gi, mut ii) = (0, 0);
    Ok(candidate_thresholds(s)
        .into_iter()
        .map(|t| {
            while gi < ng && s.genuine[gi] < t {
                gi += 1;
            }
            while ii < ni && s.impostor[ii] < t {
                ii += 1;
            }
            RocPoint {
                threshold: t,
                fmr: rate(ni - ii, ni),
                fnmr: rate(gi, ng),
            }
        })
        .collect())
}

/// Error counts and rates of one score pool at one threshold. Rates are
/// `None` when the corresponding class is empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rates {
    pub threshold: f64,
    pub genuine_count: usize,
    pub impostor_count: usize,
    pub false_matches: usize,
    pub false_non_matches: usize,
    pub fmr: Option<f64>,
    pub fnmr: Option<f64>,
}

impl Rates {
    pub fn at(s: &ScoreSet, threshold: f64) -> Self {
        let fm = s.false_matches(threshold);
        let fnm = s.false_non_matches(threshold);
        Rates {
            threshold,
            genuine_count: s.genuine_count(),
            impostor_count: s.impostor_count(),
            false_matches: fm,
            false_non_matches: fnm,
            fmr: (s.impostor_count() > 0).then(|| rate(fm, s.impostor_count())),
            fnmr: (s.genuine_count() > 0).then(|| rate(fnm, s.genuine_count())),
        }
    }

    pub fn hter(&self) -> Option<f64> {
        Some((self.fmr? + self.fnmr?) / 2.0)
    }
}

/// Rates of one group, globally and per sub-protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Shared threshold, or `None` when every label has its own.
    pub threshold: Option<f64>,
    pub fmr: f64,
    pub fnmr: f64,
    pub hter: f64,
    pub genuine_count: usize,
    pub impostor_count: usize,
    pub false_matches: usize,
    pub false_non_matches: usize,
    pub per_sub_protocol: BTreeMap<String, Rates>,
    pub policy: String,
}

impl MetricReport {
    /// Aggregates per-label rates; global rates are pooled counts.
    pub fn from_labels(
        threshold: Option<f64>,
        per_sub_protocol: BTreeMap<String, Rates>,
        policy: impl Into<String>,
    ) -> Result<Self> {
        let sum = |f: fn(&Rates) -> usize| per_sub_protocol.values().map(f).sum::<usize>();
        let genuine_count = sum(|r| r.genuine_count);
        let impostor_count = sum(|r| r.impostor_count);
        let false_matches = sum(|r| r.false_matches);
        let false_non_matches = sum(|r| r.false_non_matches);
        if genuine_count == 0 {
            return Err(Error::EmptyClass("genuine"));
        }
        if impostor_count == 0 {
            return Err(Error::EmptyClass("impostor"));
        }
        let fmr = rate(false_matches, impostor_count);
        let fnmr = rate(false_non_matches, genuine_count);
        let hter = (fmr + fnmr) / 2.0;
        debug_assert!(hter == (fmr + fnmr) / 2.0);
        Ok(MetricReport {
            threshold,
            fmr,
            fnmr,
            hter,
            genuine_count,
            impostor_count,
            false_matches,
            false_non_matches,
            per_sub_protocol,
            policy: policy.into(),
        })
    }
}
