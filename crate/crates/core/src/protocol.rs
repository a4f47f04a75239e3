//! Declarative evaluation protocols.
//!
//! A protocol lists every sample with its role (enroll or probe), its
//! dev/eval group and its sub-protocol label, plus the models (templates)
//! built from enroll samples. Protocols are stored as JSON; the on-disk form
//! is canonical (samples sorted by `sample_id`, models by `model_id`) so that
//! repeated saves are byte-identical.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_FMR_TARGET: f64 = 0.001;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Enroll,
    Probe,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Dev,
    Eval,
    None,
}

impl Group {
    pub fn as_str(self) -> &'static str {
        match self {
            Group::Dev => "dev",
            Group::Eval => "eval",
            Group::None => "none",
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Group {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dev" => Ok(Group::Dev),
            "eval" => Ok(Group::Eval),
            "none" => Ok(Group::None),
            other => Err(Error::parse("group", format!("unknown group '{other}'"))),
        }
    }
}

/// Group selector for [`Protocol::comparison_pairs`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupFilter {
    Dev,
    Eval,
    All,
}

impl GroupFilter {
    fn admits(self, g: Group) -> bool {
        match self {
            GroupFilter::All => true,
            GroupFilter::Dev => g == Group::Dev,
            GroupFilter::Eval => g == Group::Eval,
        }
    }
}

impl fmt::Display for GroupFilter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GroupFilter::Dev => "dev",
            GroupFilter::Eval => "eval",
            GroupFilter::All => "all",
        })
    }
}

impl std::str::FromStr for GroupFilter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dev" => Ok(GroupFilter::Dev),
            "eval" => Ok(GroupFilter::Eval),
            "all" => Ok(GroupFilter::All),
            other => Err(Error::parse("group", format!("unknown group '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolKind {
    VerificationSplit,
    VerificationRocOnly,
    OpenSet,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample_id: String,
    pub subject_id: String,
    pub path: String,
    pub role: Role,
    pub group: Group,
    #[serde(default)]
    pub sub_protocol: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub landmark_file: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub model_id: String,
    pub subject_id: String,
    pub enroll_sample_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Protocol {
    pub name: String,
    pub kind: ProtocolKind,
    #[serde(default = "default_fmr_target")]
    pub fmr_target: f64,
    pub sub_protocols: Vec<String>,
    pub samples: Vec<SampleRecord>,
    pub models: Vec<ModelSpec>,
    #[serde(default)]
    pub unknown_subjects: BTreeSet<String>,
}

fn default_fmr_target() -> f64 {
    DEFAULT_FMR_TARGET
}

/// One model-versus-probe comparison prescribed by a protocol.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComparisonPair {
    pub model_id: String,
    pub probe_sample_id: String,
    pub reference_subject_id: String,
    pub probe_subject_id: String,
    pub is_genuine: bool,
    pub sub_protocol: String,
    pub group: Group,
}

impl Protocol {
    /// Sorts samples and models into canonical order and validates.
    pub fn validated(mut p: Protocol) -> Result<Protocol> {
        p.canonicalize();
        p.validate()?;
        Ok(p)
    }

    pub fn canonicalize(&mut self) {
        self.samples.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
        self.models.sort_by(|a, b| a.model_id.cmp(&b.model_id));
    }

    pub fn sample(&self, id: &str) -> Option<&SampleRecord> {
        self.samples
            .binary_search_by(|s| s.sample_id.as_str().cmp(id))
            .ok()
            .map(|i| &self.samples[i])
            .or_else(|| self.samples.iter().find(|s| s.sample_id == id))
    }

    pub fn probes(&self) -> impl Iterator<Item = &SampleRecord> {
        self.samples.iter().filter(|s| s.role == Role::Probe)
    }

    /// Group of a model: the group shared by its enroll samples.
    pub fn model_group(&self, model: &ModelSpec) -> Group {
        model
            .enroll_sample_ids
            .first()
            .and_then(|id| self.sample(id))
            .map(|s| s.group)
            .unwrap_or(Group::None)
    }

    /// Checks every structural rule and reports the first violation.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Validation(msg));

        if !(self.fmr_target > 0.0 && self.fmr_target < 1.0) {
            return fail(format!("fmr_target {} not in (0,1)", self.fmr_target));
        }

        let mut by_id: HashMap<&str, &SampleRecord> = HashMap::with_capacity(self.samples.len());
        for s in &self.samples {
            if s.sample_id.is_empty() {
                return fail("empty sample_id".into());
            }
            if by_id.insert(&s.sample_id, s).is_some() {
                return fail(format!("duplicate sample_id {}", s.sample_id));
            }
            if s.group == Group::None && self.kind == ProtocolKind::VerificationSplit {
                return fail(format!(
                    "sample {} has group none in a split protocol",
                    s.sample_id
                ));
            }
        }

        let labels: BTreeSet<&str> = self.sub_protocols.iter().map(String::as_str).collect();
        if labels.len() != self.sub_protocols.len() {
            return fail("duplicate sub_protocol label".into());
        }
        for s in self.probes() {
            if !labels.contains(s.sub_protocol.as_str()) {
                return fail(format!(
                    "probe {} uses undeclared sub_protocol '{}'",
                    s.sample_id, s.sub_protocol
                ));
            }
        }

        let mut model_ids = BTreeSet::new();
        for m in &self.models {
            if !model_ids.insert(m.model_id.as_str()) {
                return fail(format!("duplicate model_id {}", m.model_id));
            }
            if m.enroll_sample_ids.is_empty() {
                return fail(format!("model {} has no enroll samples", m.model_id));
            }
            let mut group = None;
            for id in &m.enroll_sample_ids {
                let Some(s) = by_id.get(id.as_str()) else {
                    return fail(format!("model {} references unknown sample {id}", m.model_id));
                };
                if s.role != Role::Enroll {
                    return fail(format!("model {} uses probe sample {id}", m.model_id));
                }
                if s.subject_id != m.subject_id {
                    return fail(format!(
                        "model {} (subject {}) uses sample {id} of subject {}",
                        m.model_id, m.subject_id, s.subject_id
                    ));
                }
                match group {
                    None => group = Some(s.group),
                    Some(g) if g != s.group => {
                        return fail(format!("model {} mixes groups", m.model_id));
                    }
                    _ => {}
                }
            }
        }

        if self.kind != ProtocolKind::OpenSet && !self.unknown_subjects.is_empty() {
            return fail("unknown_subjects only allowed in open_set protocols".into());
        }

        match self.kind {
            ProtocolKind::VerificationSplit => self.validate_split()?,
            ProtocolKind::OpenSet => self.validate_open_set()?,
            ProtocolKind::VerificationRocOnly => {
                if self.models.is_empty() {
                    return fail("no models".into());
                }
                if self.probes().next().is_none() {
                    return fail("no probes".into());
                }
            }
        }
        Ok(())
    }

    fn validate_split(&self) -> Result<()> {
        let mut subjects: BTreeMap<Group, BTreeSet<&str>> = BTreeMap::new();
        for s in &self.samples {
            subjects.entry(s.group).or_default().insert(&s.subject_id);
        }
        for m in &self.models {
            subjects
                .entry(self.model_group(m))
                .or_default()
                .insert(&m.subject_id);
        }
        let empty = BTreeSet::new();
        let dev = subjects.get(&Group::Dev).unwrap_or(&empty);
        let eval = subjects.get(&Group::Eval).unwrap_or(&empty);
        if let Some(s) = dev.intersection(eval).next() {
            return Err(Error::Validation(format!(
                "subject {s} appears in both dev and eval"
            )));
        }
        for (group, name) in [(Group::Dev, "dev"), (Group::Eval, "eval")] {
            let has_probe = self.probes().any(|s| s.group == group);
            let has_model = self.models.iter().any(|m| self.model_group(m) == group);
            if !has_probe || !has_model {
                return Err(Error::Validation(format!("{name} group empty")));
            }
        }
        Ok(())
    }

    fn validate_open_set(&self) -> Result<()> {
        if self.unknown_subjects.is_empty() {
            return Err(Error::Validation("open_set protocol without unknown subjects".into()));
        }
        for s in self.samples.iter().filter(|s| s.role == Role::Enroll) {
            if self.unknown_subjects.contains(&s.subject_id) {
                return Err(Error::Validation(format!(
                    "unknown subject {} has enroll sample {}",
                    s.subject_id, s.sample_id
                )));
            }
        }
        if self.models.is_empty() {
            return Err(Error::Validation("empty gallery".into()));
        }
        let gallery: BTreeSet<&str> = self.models.iter().map(|m| m.subject_id.as_str()).collect();
        for p in self.probes() {
            let known = gallery.contains(p.subject_id.as_str());
            let unknown = self.unknown_subjects.contains(&p.subject_id);
            if !known && !unknown {
                return Err(Error::Validation(format!(
                    "probe {} of subject {} has no gallery mate and is not declared unknown",
                    p.sample_id, p.subject_id
                )));
            }
        }
        Ok(())
    }

    /// All model × probe comparisons of `group`, ordered by model id then
    /// probe sample id.
    ///
    /// A model pairs with a probe when they share a group or either side has
    /// group `none`. Enroll samples never appear on the probe side.
    pub fn comparison_pairs(&self, group: GroupFilter) -> Result<Vec<ComparisonPair>> {
        let mut probes: Vec<&SampleRecord> = self
            .probes()
            .filter(|s| group.admits(s.group))
            .collect();
        if probes.is_empty() {
            return Err(Error::NoProbes(group.to_string()));
        }
        probes.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
        let mut models: Vec<&ModelSpec> = self.models.iter().collect();
        models.sort_by(|a, b| a.model_id.cmp(&b.model_id));

        let mut pairs = Vec::new();
        for m in models {
            let mg = self.model_group(m);
            for p in &probes {
                if mg != p.group && mg != Group::None && p.group != Group::None {
                    continue;
                }
                pairs.push(ComparisonPair {
                    model_id: m.model_id.clone(),
                    probe_sample_id: p.sample_id.clone(),
                    reference_subject_id: m.subject_id.clone(),
                    probe_subject_id: p.subject_id.clone(),
                    is_genuine: m.subject_id == p.subject_id,
                    sub_protocol: p.sub_protocol.clone(),
                    group: p.group,
                });
            }
        }
        Ok(pairs)
    }

    pub fn from_json(text: &str) -> Result<Protocol> {
        let p: Protocol = serde_json::from_str(text).map_err(|e| Error::parse("protocol", e))?;
        Protocol::validated(p)
    }

    /// Canonical JSON form: pretty-printed, LF newlines, trailing newline.
    pub fn to_json(&self) -> Result<String> {
        let mut canonical = self.clone();
        canonical.canonicalize();
        let mut s =
            serde_json::to_string_pretty(&canonical).map_err(|e| Error::parse("protocol", e))?;
        s.push('\n');
        Ok(s)
    }
}

pub fn load_protocol(path: impl AsRef<Path>) -> Result<Protocol> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Protocol::from_json(&text)
}

pub fn save_protocol(p: &Protocol, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, p.to_json()?).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(id: &str, subject: &str, role: Role, group: Group, label: &str) -> SampleRecord {
        SampleRecord {
            sample_id: id.into(),
            subject_id: subject.into(),
            path: format!("{subject}/{id}.png"),
            role,
            group,
            sub_protocol: label.into(),
            landmark_file: None,
        }
    }

    fn model(id: &str, subject: &str, samples: &[&str]) -> ModelSpec {
        ModelSpec {
            model_id: id.into(),
            subject_id: subject.into(),
            enroll_sample_ids: samples.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn roc_protocol() -> Protocol {
        Protocol {
            name: "t".into(),
            kind: ProtocolKind::VerificationRocOnly,
            fmr_target: DEFAULT_FMR_TARGET,
            sub_protocols: vec!["x".into()],
            samples: vec![
                sample("a_e", "A", Role::Enroll, Group::None, ""),
                sample("b_e", "B", Role::Enroll, Group::None, ""),
                sample("p1", "A", Role::Probe, Group::None, "x"),
                sample("p2", "A", Role::Probe, Group::None, "x"),
                sample("p3", "B", Role::Probe, Group::None, "x"),
            ],
            models: vec![model("mA", "A", &["a_e"]), model("mB", "B", &["b_e"])],
            unknown_subjects: BTreeSet::new(),
        }
    }

    #[test]
    fn two_models_three_probes() {
        let p = Protocol::validated(roc_protocol()).unwrap();
        let pairs = p.comparison_pairs(GroupFilter::All).unwrap();
        assert_eq!(pairs.len(), 6);
        assert_eq!(pairs.iter().filter(|x| x.is_genuine).count(), 3);
        assert_eq!(pairs[0].model_id, "mA");
        assert_eq!(pairs[0].probe_sample_id, "p1");
        assert_eq!(pairs[5].model_id, "mB");
        assert_eq!(pairs[5].probe_sample_id, "p3");
        assert_eq!(pairs, p.comparison_pairs(GroupFilter::All).unwrap());
        assert!(pairs.iter().all(|x| !x.probe_sample_id.ends_with("_e")));
    }

    #[test]
    fn dev_only_protocol_reports_eval_group_empty() {
        let p = Protocol {
            name: "t".into(),
            kind: ProtocolKind::VerificationSplit,
            fmr_target: DEFAULT_FMR_TARGET,
            sub_protocols: vec!["x".into()],
            samples: vec![
                sample("e", "S", Role::Enroll, Group::Dev, ""),
                sample("p", "S", Role::Probe, Group::Dev, "x"),
            ],
            models: vec![model("m", "S", &["e"])],
            unknown_subjects: BTreeSet::new(),
        };
        let err = Protocol::validated(p).unwrap_err().to_string();
        assert!(err.contains("eval group empty"), "{err}");
    }

    #[test]
    fn overlapping_split_subjects_are_rejected() {
        let p = Protocol {
            name: "t".into(),
            kind: ProtocolKind::VerificationSplit,
            fmr_target: DEFAULT_FMR_TARGET,
            sub_protocols: vec!["x".into()],
            samples: vec![
                sample("e1", "S12", Role::Enroll, Group::Dev, ""),
                sample("p1", "S12", Role::Probe, Group::Dev, "x"),
                sample("e2", "S13", Role::Enroll, Group::Eval, ""),
                sample("p2", "S12", Role::Probe, Group::Eval, "x"),
            ],
            models: vec![model("m1", "S12", &["e1"]), model("m2", "S13", &["e2"])],
            unknown_subjects: BTreeSet::new(),
        };
        let err = Protocol::validated(p).unwrap_err().to_string();
        assert!(err.contains("subject S12 appears in both dev and eval"), "{err}");
    }

    #[test]
    fn open_set_unknown_must_not_be_enrolled() {
        let mut p = roc_protocol();
        p.kind = ProtocolKind::OpenSet;
        p.unknown_subjects.insert("A".into());
        assert!(matches!(Protocol::validated(p), Err(Error::Validation(_))));
    }

    #[test]
    fn undeclared_label_and_bad_model_rejected() {
        let mut p = roc_protocol();
        p.samples[2].sub_protocol = "nope".into();
        assert!(Protocol::validated(p).is_err());

        let mut p = roc_protocol();
        p.models[0].enroll_sample_ids = vec!["p1".into()];
        assert!(Protocol::validated(p).is_err());

        let mut p = roc_protocol();
        p.models[0].subject_id = "B".into();
        assert!(Protocol::validated(p).is_err());

        let mut p = roc_protocol();
        p.samples.push(sample("p1", "A", Role::Probe, Group::None, "x"));
        assert!(Protocol::validated(p).is_err());
    }

    #[test]
    fn multiple_models_per_subject_allowed() {
        let mut p = roc_protocol();
        p.samples.push(sample("a_e2", "A", Role::Enroll, Group::None, ""));
        p.models.push(model("mA2", "A", &["a_e2"]));
        let p = Protocol::validated(p).unwrap();
        let pairs = p.comparison_pairs(GroupFilter::All).unwrap();
        assert_eq!(pairs.len(), 9);
        // genuine = sum over subjects of models × probes = 2·2 + 1·1
        assert_eq!(pairs.iter().filter(|x| x.is_genuine).count(), 5);
    }

    #[test]
    fn json_round_trip_is_canonical() {
        let mut p = roc_protocol();
        p.samples.reverse();
        let a = Protocol::validated(p).unwrap();
        let text = a.to_json().unwrap();
        let b = Protocol::from_json(&text).unwrap();
        assert_eq!(a, b);
        assert_eq!(text, b.to_json().unwrap());
        assert!(!text.contains('\r'));
        assert!(text.find("\"a_e\"").unwrap() < text.find("\"p1\"").unwrap());
    }

    #[test]
    fn no_probes_in_group() {
        let p = Protocol::validated(roc_protocol()).unwrap();
        assert!(matches!(
            p.comparison_pairs(GroupFilter::Dev),
            Err(Error::NoProbes(_))
        ));
    }
}
