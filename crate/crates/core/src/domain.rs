//! Shared value types: labels, instances, guidelines, and prompt rendering.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Sentence placed between the prompt prefix and the numbered guideline list.
pub const GUIDELINE_CONNECTIVE: &str =
    "Think through the following guidelines before giving the final answer. guidelines:";

#[derive(Debug, Error)]
pub enum DomainError {
    #[error("label set is empty")]
    EmptyLabelSet,
    #[error("duplicate label `{0}` after canonicalization")]
    DuplicateLabel(String),
    #[error("label `{label}` is not in the label set (instance `{id}`)")]
    UnknownLabel { id: String, label: String },
    #[error("{what} must not be empty")]
    Empty { what: &'static str },
    #[error("duplicate id `{0}`")]
    DuplicateId(String),
    #[error("instance `{0}`: explanation_kind must be present exactly when explanation is")]
    ExplanationKindMismatch(String),
    #[error("{path}:{line}: {source}")]
    Json {
        path: String,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Canonical matching form of a label: trimmed and case-folded.
pub fn canonical(raw: &str) -> String {
    raw.trim().to_lowercase()
}

/// Ordered task label vocabulary. Order defines class order in reports.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct LabelSet {
    labels: Vec<String>,
    canonical: Vec<String>,
}

impl LabelSet {
    pub fn new<I, S>(labels: I) -> Result<Self, DomainError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let labels: Vec<String> = labels.into_iter().map(|l| l.into().trim().to_string()).collect();
        if labels.is_empty() {
            return Err(DomainError::EmptyLabelSet);
        }
        let mut seen = HashSet::new();
        let mut canon = Vec::with_capacity(labels.len());
        for label in &labels {
            let c = canonical(label);
            if c.is_empty() {
                return Err(DomainError::Empty { what: "label" });
            }
            if !seen.insert(c.clone()) {
                return Err(DomainError::DuplicateLabel(label.clone()));
            }
            canon.push(c);
        }
        Ok(Self {
            labels,
            canonical: canon,
        })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        let c = canonical(label);
        self.canonical.iter().position(|l| *l == c)
    }

    /// Maps a raw string onto the member label it canonicalizes to, if any.
    pub fn canonicalize(&self, raw: &str) -> Option<&str> {
        self.index_of(raw).map(|i| self.labels[i].as_str())
    }

    pub fn contains(&self, raw: &str) -> bool {
        self.index_of(raw).is_some()
    }

    /// Comma separated display list, e.g. `hatespeech, offensive, normal`.
    pub fn joined(&self) -> String {
        self.labels.join(", ")
    }
}

impl TryFrom<Vec<String>> for LabelSet {
    type Error = DomainError;

    fn try_from(value: Vec<String>) -> Result<Self, Self::Error> {
        LabelSet::new(value)
    }
}

impl From<LabelSet> for Vec<String> {
    fn from(value: LabelSet) -> Self {
        value.labels
    }
}

/// Free-standing form of [`LabelSet::canonicalize`].
pub fn canonicalize_label<'a>(raw: &str, labels: &'a LabelSet) -> Option<&'a str> {
    labels.canonicalize(raw)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExplanationKind {
    NaturalLanguage,
    FeatureAttribution,
}

impl fmt::Display for ExplanationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExplanationKind::NaturalLanguage => "natural_language",
            ExplanationKind::FeatureAttribution => "feature_attribution",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExplanationSource {
    Human,
    Llm,
}

/// One labeled text with an optional explanation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub id: String,
    pub text: String,
    #[serde(rename = "label")]
    pub gold_label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub explanation: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub explanation_kind: Option<ExplanationKind>,
}

impl Instance {
    pub fn new(id: impl Into<String>, text: impl Into<String>, label: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            gold_label: label.into(),
            explanation: None,
            explanation_kind: None,
        }
    }

    pub fn with_explanation(mut self, explanation: impl Into<String>, kind: ExplanationKind) -> Self {
        self.explanation = Some(explanation.into());
        self.explanation_kind = Some(kind);
        self
    }

    /// Checks invariants and rewrites the gold label into its display form.
    pub fn normalize(&mut self, labels: &LabelSet) -> Result<(), DomainError> {
        let label = labels
            .canonicalize(&self.gold_label)
            .ok_or_else(|| DomainError::UnknownLabel {
                id: self.id.clone(),
                label: self.gold_label.clone(),
            })?;
        self.gold_label = label.to_string();
        if self.explanation.is_some() != self.explanation_kind.is_some() {
            return Err(DomainError::ExplanationKindMismatch(self.id.clone()));
        }
        Ok(())
    }
}

/// Where a guideline came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "origin", rename_all = "snake_case")]
pub enum Provenance {
    Explanation {
        explanation_source: ExplanationSource,
        explanation_kind: ExplanationKind,
        instance_id: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        backend: Option<String>,
    },
    Merge {
        parents: Vec<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        backend: Option<String>,
    },
    Manual,
}

/// Content id of a guideline: a digest of its text and source label.
pub fn guideline_id(text: &str, source_label: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(source_label.as_bytes());
    hasher.update([0x1f]);
    hasher.update(text.as_bytes());
    let digest = hasher.finalize();
    format!("g-{}", hex::encode(&digest[..8]))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Guideline {
    pub id: String,
    pub text: String,
    pub source_label: String,
    pub provenance: Provenance,
}

impl Guideline {
    pub fn new(
        text: impl Into<String>,
        source_label: impl Into<String>,
        provenance: Provenance,
    ) -> Result<Self, DomainError> {
        let text = text.into();
        let source_label = source_label.into();
        if text.trim().is_empty() {
            return Err(DomainError::Empty {
                what: "guideline text",
            });
        }
        Ok(Self {
            id: guideline_id(&text, &source_label),
            text,
            source_label,
            provenance,
        })
    }
}

/// The full collection of generated guidelines, indexed by source label.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidelinePool {
    guidelines: Vec<Guideline>,
    by_label: BTreeMap<String, Vec<usize>>,
}

impl GuidelinePool {
    pub fn new(guidelines: Vec<Guideline>) -> Result<Self, DomainError> {
        let mut seen = HashSet::new();
        let mut by_label: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, g) in guidelines.iter().enumerate() {
            if g.text.trim().is_empty() {
                return Err(DomainError::Empty {
                    what: "guideline text",
                });
            }
            if !seen.insert(g.id.as_str()) {
                return Err(DomainError::DuplicateId(g.id.clone()));
            }
            by_label.entry(g.source_label.clone()).or_default().push(i);
        }
        Ok(Self {
            guidelines,
            by_label,
        })
    }

    /// Checks every source label against the task label set.
    pub fn validate_labels(&self, labels: &LabelSet) -> Result<(), DomainError> {
        for g in &self.guidelines {
            if !labels.contains(&g.source_label) {
                return Err(DomainError::UnknownLabel {
                    id: g.id.clone(),
                    label: g.source_label.clone(),
                });
            }
        }
        Ok(())
    }

    pub fn guidelines(&self) -> &[Guideline] {
        &self.guidelines
    }

    pub fn len(&self) -> usize {
        self.guidelines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.guidelines.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Guideline> {
        self.guidelines.iter().find(|g| g.id == id)
    }

    /// Labels that have at least one guideline, in sorted order.
    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.by_label.keys().map(String::as_str)
    }

    pub fn with_label(&self, label: &str) -> impl Iterator<Item = &Guideline> {
        self.by_label
            .get(label)
            .into_iter()
            .flatten()
            .map(move |&i| &self.guidelines[i])
    }

    /// Label to guideline ids.
    pub fn by_label(&self) -> BTreeMap<&str, Vec<&str>> {
        self.by_label
            .iter()
            .map(|(label, idx)| {
                (
                    label.as_str(),
                    idx.iter().map(|&i| self.guidelines[i].id.as_str()).collect(),
                )
            })
            .collect()
    }

    pub fn load_jsonl(path: &Path) -> Result<Self, DomainError> {
        Self::new(read_jsonl(path)?)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<(), DomainError> {
        write_jsonl(path, &self.guidelines)
    }
}

/// Ordered guideline set. Ids are unique; order matters for rendering.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Guideline>", into = "Vec<Guideline>")]
pub struct GuidelineSet(Vec<Guideline>);

impl GuidelineSet {
    pub fn empty() -> Self {
        Self(Vec::new())
    }

    pub fn new(guidelines: Vec<Guideline>) -> Result<Self, DomainError> {
        let mut seen = HashSet::new();
        for g in &guidelines {
            if !seen.insert(g.id.as_str()) {
                return Err(DomainError::DuplicateId(g.id.clone()));
            }
        }
        Ok(Self(guidelines))
    }

    /// Builds a set keeping the first occurrence of every id.
    pub fn from_dedup(guidelines: impl IntoIterator<Item = Guideline>) -> Self {
        let mut seen = HashSet::new();
        Self(
            guidelines
                .into_iter()
                .filter(|g| seen.insert(g.id.clone()))
                .collect(),
        )
    }

    pub fn guidelines(&self) -> &[Guideline] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<Guideline> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains_id(&self, id: &str) -> bool {
        self.0.iter().any(|g| g.id == id)
    }

    pub fn ids(&self) -> Vec<String> {
        self.0.iter().map(|g| g.id.clone()).collect()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Guideline> {
        self.0.iter()
    }

    /// Stable digest over the ordered ids.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        for g in &self.0 {
            hasher.update(g.id.as_bytes());
            hasher.update([b'\n']);
        }
        hex::encode(&hasher.finalize()[..8])
    }

    pub fn count_by_label(&self) -> BTreeMap<String, usize> {
        let mut counts = BTreeMap::new();
        for g in &self.0 {
            *counts.entry(g.source_label.clone()).or_insert(0) += 1;
        }
        counts
    }
}

impl TryFrom<Vec<Guideline>> for GuidelineSet {
    type Error = DomainError;

    fn try_from(value: Vec<Guideline>) -> Result<Self, Self::Error> {
        GuidelineSet::new(value)
    }
}

impl From<GuidelineSet> for Vec<Guideline> {
    fn from(value: GuidelineSet) -> Self {
        value.0
    }
}

impl<'a> IntoIterator for &'a GuidelineSet {
    type Item = &'a Guideline;
    type IntoIter = std::slice::Iter<'a, Guideline>;

    fn into_iter(self) -> Self::IntoIter {
        self.0.iter()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct PromptPrefix(String);

impl PromptPrefix {
    pub fn new(text: impl Into<String>) -> Result<Self, DomainError> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(DomainError::Empty {
                what: "prompt prefix",
            });
        }
        Ok(Self(text))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for PromptPrefix {
    type Error = DomainError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        PromptPrefix::new(value)
    }
}

impl From<PromptPrefix> for String {
    fn from(value: PromptPrefix) -> Self {
        value.0
    }
}

/// Final prompt text plus what it was built from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    text: String,
    prefix: PromptPrefix,
    guideline_ids: Vec<String>,
}

impl RenderedPrompt {
    /// Prompt whose text is not the numbered layout, e.g. baselines that
    /// append an instruction or a verbatim guideline block.
    pub fn custom(text: impl Into<String>, prefix: PromptPrefix, guideline_ids: Vec<String>) -> Self {
        Self {
            text: text.into(),
            prefix,
            guideline_ids,
        }
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn prefix(&self) -> &PromptPrefix {
        &self.prefix
    }

    pub fn guideline_ids(&self) -> &[String] {
        &self.guideline_ids
    }
}

impl fmt::Display for RenderedPrompt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

/// `prefix` alone for an empty set, otherwise
/// `prefix <connective> 1. <g1> 2. <g2> ...`.
pub fn render_prompt(prefix: &PromptPrefix, set: &GuidelineSet) -> RenderedPrompt {
    let mut text = prefix.as_str().to_string();
    if !set.is_empty() {
        text.push(' ');
        text.push_str(GUIDELINE_CONNECTIVE);
        for (i, g) in set.iter().enumerate() {
            text.push_str(&format!(" {}. {}", i + 1, g.text));
        }
    }
    RenderedPrompt {
        text,
        prefix: prefix.clone(),
        guideline_ids: set.ids(),
    }
}

/// Reads a JSON Lines file, skipping blank lines.
pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, DomainError> {
    let display = path.display().to_string();
    let file = File::open(path).map_err(|source| DomainError::Io {
        path: display.clone(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| DomainError::Io {
            path: display.clone(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|source| DomainError::Json {
            path: display.clone(),
            line: i + 1,
            source,
        })?;
        out.push(value);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), DomainError> {
    let display = path.display().to_string();
    let io_err = |source| DomainError::Io {
        path: display.clone(),
        source,
    };
    let file = File::create(path).map_err(io_err)?;
    let mut writer = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut writer, item).map_err(|source| DomainError::Json {
            path: display.clone(),
            line: 0,
            source,
        })?;
        writer.write_all(b"\n").map_err(io_err)?;
    }
    writer.flush().map_err(io_err)
}

/// Loads a dataset and normalizes every gold label against `labels`.
pub fn load_dataset(path: &Path, labels: &LabelSet) -> Result<Vec<Instance>, DomainError> {
    let mut instances: Vec<Instance> = read_jsonl(path)?;
    let mut seen = HashSet::new();
    for inst in &mut instances {
        inst.normalize(labels)?;
        if !seen.insert(inst.id.clone()) {
            return Err(DomainError::DuplicateId(inst.id.clone()));
        }
    }
    Ok(instances)
}
