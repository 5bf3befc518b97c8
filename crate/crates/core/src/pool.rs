//! Guideline pool construction: meta-prompt templates, explanation and
//! guideline generation, and the deduplicated pool build.

use std::collections::HashMap;
use std::sync::Arc;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    DomainError, ExplanationKind, ExplanationSource, Guideline, GuidelinePool, Instance, LabelSet, Provenance,
};
use crate::envelope::envelope_field;
use crate::gateway::{BackendError, ChatMessage, DecodeConfig, Gateway};

#[derive(Debug, Error)]
pub enum GenerationError {
    #[error("could not parse `{field}` from model output after {attempts} attempt(s); last output: {last_output:?}")]
    Parse {
        field: String,
        attempts: u32,
        last_output: String,
    },
    #[error("template `{kind:?}` has unbound placeholder {{{name}}}")]
    UnboundPlaceholder { kind: MetaPromptKind, name: String },
    #[error("instance `{0}` has no explanation")]
    MissingExplanation(String),
    #[error("no guidelines were produced ({skipped} instance(s) skipped)")]
    PoolEmpty { skipped: usize },
    #[error("{skipped} of {total} instances skipped, above the allowed fraction {limit}")]
    TooManySkipped { skipped: usize, total: usize, limit: f64 },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Domain(#[from] DomainError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetaPromptKind {
    ExplainNatural,
    ExplainFeature,
    GuidelineFromNatural,
    GuidelineFromFeature,
    Merge,
    StructuredSystem,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetaPromptTemplate {
    pub kind: MetaPromptKind,
    pub template: String,
}

impl MetaPromptTemplate {
    pub fn new(kind: MetaPromptKind, template: impl Into<String>) -> Self {
        Self {
            kind,
            template: template.into(),
        }
    }

    /// Placeholder names (`{name}` with `name` in `[a-z0-9_]`) in order of
    /// appearance. Other braces, e.g. a JSON skeleton, are literal text.
    pub fn placeholders(&self) -> Vec<&str> {
        scan(&self.template)
            .filter_map(|piece| match piece {
                Piece::Placeholder(name) => Some(name),
                Piece::Literal(_) => None,
            })
            .collect()
    }

    /// Substitutes every placeholder in a single pass; values are never
    /// rescanned.
    pub fn render(&self, bindings: &[(&str, &str)]) -> Result<String, GenerationError> {
        let mut out = String::with_capacity(self.template.len());
        for piece in scan(&self.template) {
            match piece {
                Piece::Literal(s) => out.push_str(s),
                Piece::Placeholder(name) => {
                    let value = bindings
                        .iter()
                        .find(|(k, _)| *k == name)
                        .map(|(_, v)| *v)
                        .ok_or_else(|| GenerationError::UnboundPlaceholder {
                            kind: self.kind,
                            name: name.to_string(),
                        })?;
                    out.push_str(value);
                }
            }
        }
        Ok(out)
    }
}

enum Piece<'a> {
    Literal(&'a str),
    Placeholder(&'a str),
}

fn scan(template: &str) -> impl Iterator<Item = Piece<'_>> {
    let mut rest = template;
    std::iter::from_fn(move || {
        if rest.is_empty() {
            return None;
        }
        let mut search = 0;
        while let Some(off) = rest[search..].find('{') {
            let open = search + off;
            let after = &rest[open + 1..];
            let name_len = after
                .bytes()
                .take_while(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || *b == b'_')
                .count();
            if name_len > 0 && after.as_bytes().get(name_len) == Some(&b'}') {
                if open > 0 {
                    let lit = &rest[..open];
                    rest = &rest[open..];
                    return Some(Piece::Literal(lit));
                }
                let name = &after[..name_len];
                rest = &after[name_len + 1..];
                return Some(Piece::Placeholder(name));
            }
            search = open + 1;
        }
        let lit = rest;
        rest = "";
        Some(Piece::Literal(lit))
    })
}

const EXPLAIN_NATURAL: &str = "Provide a brief explanation for why the given label was chosen in the above task. \
When writing the explanation, you may describe the key cause or feature that led to your decision, \
link it to the general rule, principle, or pattern defined in the task, and keep only relevant details.\n\
Text: {text}\nLabel: {label}";

const EXPLAIN_FEATURE: &str = "Highlight the words or phrases in the text that contribute most significantly \
to the assignment of the given label.\nText: {text}\nLabel: {label}";

const GUIDELINE_FROM_NATURAL: &str = "Using the provided sample text and its corresponding human annotation, \
along with a natural language explanation of why the label was chosen, provide a rule-based guideline for \
performing this {task_name} task. The guideline should be written in one paragraph.\n\
Text: {text}\nLabel: {label}\nExplanation: {explanation}";

const GUIDELINE_FROM_FEATURE: &str = "Using the provided sample text and its corresponding human annotation, \
along with a list of feature attribution explanations that are most responsible for why the label was chosen, \
provide a rule-based guideline for performing this {task_name} task. The guideline should be written in one \
paragraph.\nText: {text}\nLabel: {label}\nExplanation: {explanation}";

const MERGE: &str = "Please rewrite the following guidelines into one guideline.\n{guidelines}";

const STRUCTURED_SYSTEM: &str = "Provide the {feature_name} in exactly one valid JSON object — nothing else. \
The JSON object must have exactly one field:\n{\n  \"{feature_name}\": \"<{feature}>\"\n}";

/// The full set of meta-prompts. Any of them can be overridden from config.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetaPrompts {
    pub explain_natural: String,
    pub explain_feature: String,
    pub guideline_from_natural: String,
    pub guideline_from_feature: String,
    pub merge: String,
    pub structured_system: String,
}

impl Default for MetaPrompts {
    fn default() -> Self {
        Self {
            explain_natural: EXPLAIN_NATURAL.into(),
            explain_feature: EXPLAIN_FEATURE.into(),
            guideline_from_natural: GUIDELINE_FROM_NATURAL.into(),
            guideline_from_feature: GUIDELINE_FROM_FEATURE.into(),
            merge: MERGE.into(),
            structured_system: STRUCTURED_SYSTEM.into(),
        }
    }
}

impl MetaPrompts {
    pub fn template(&self, kind: MetaPromptKind) -> MetaPromptTemplate {
        let text = match kind {
            MetaPromptKind::ExplainNatural => &self.explain_natural,
            MetaPromptKind::ExplainFeature => &self.explain_feature,
            MetaPromptKind::GuidelineFromNatural => &self.guideline_from_natural,
            MetaPromptKind::GuidelineFromFeature => &self.guideline_from_feature,
            MetaPromptKind::Merge => &self.merge,
            MetaPromptKind::StructuredSystem => &self.structured_system,
        };
        MetaPromptTemplate::new(kind, text.clone())
    }

    /// System message requesting a one-field JSON object.
    pub fn system_for(&self, feature_name: &str, feature: &str) -> Result<String, GenerationError> {
        self.template(MetaPromptKind::StructuredSystem)
            .render(&[("feature_name", feature_name), ("feature", feature)])
    }

    /// User message for merging `guidelines`, numbered `1: ...`, `2: ...`.
    pub fn merge_request(&self, guidelines: &[&str]) -> Result<String, GenerationError> {
        let listing = guidelines
            .iter()
            .enumerate()
            .map(|(i, g)| format!("{}: {}", i + 1, g))
            .collect::<Vec<_>>()
            .join("\n");
        self.template(MetaPromptKind::Merge)
            .render(&[("guidelines", &listing)])
    }
}

/// Which explanations feed guideline generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolSource {
    Human,
    Llm,
    /// Human explanation where present, generated otherwise.
    Mixed,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BuildOptions {
    pub source: PoolSource,
    /// Kind of explanation to generate when one is missing.
    pub kind: ExplanationKind,
    /// Abort when more than this fraction of instances is skipped.
    #[serde(default)]
    pub max_skip_fraction: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BuildReport {
    pub instances: usize,
    pub processed: usize,
    pub skipped_missing_explanation: usize,
    pub skipped_parse: usize,
    pub duplicates_removed: usize,
    pub pool_size: usize,
    pub backend: String,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl BuildReport {
    pub fn skipped(&self) -> usize {
        self.skipped_missing_explanation + self.skipped_parse
    }
}

#[derive(Debug)]
pub struct PoolBuild {
    pub pool: GuidelinePool,
    pub report: BuildReport,
}

enum Outcome {
    Built(Guideline),
    MissingExplanation,
    ParseFailed,
}

/// Talks to the model for every generation step: explanations, guidelines
/// and merges. Outputs are wrapped in a one-field JSON envelope and re-asked
/// up to `max_reasks` times when the envelope does not parse.
pub struct GuidelineGenerator {
    gateway: Arc<Gateway>,
    prompts: MetaPrompts,
    task_name: String,
    labels: LabelSet,
    decode: DecodeConfig,
    max_reasks: u32,
    parallelism: usize,
    seed: Option<u64>,
}

impl GuidelineGenerator {
    pub fn new(gateway: Arc<Gateway>, task_name: impl Into<String>, labels: LabelSet) -> Self {
        Self {
            gateway,
            prompts: MetaPrompts::default(),
            task_name: task_name.into(),
            labels,
            decode: DecodeConfig::sampled(),
            max_reasks: 2,
            parallelism: 4,
            seed: None,
        }
    }

    pub fn with_prompts(mut self, prompts: MetaPrompts) -> Self {
        self.prompts = prompts;
        self
    }

    pub fn with_decode(mut self, decode: DecodeConfig) -> Self {
        self.decode = decode;
        self
    }

    pub fn with_parallelism(mut self, n: usize) -> Self {
        self.parallelism = n.max(1);
        self
    }

    /// Recorded in build reports only; sampling seeds live in the gateway.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        self.seed = seed;
        self
    }

    pub fn prompts(&self) -> &MetaPrompts {
        &self.prompts
    }

    pub fn gateway(&self) -> &Arc<Gateway> {
        &self.gateway
    }

    fn ask(&self, user: String, field: &str) -> Result<String, GenerationError> {
        let messages = vec![
            ChatMessage::system(self.prompts.system_for(field, field)?),
            ChatMessage::user(user),
        ];
        let mut last_output = String::new();
        let attempts = self.max_reasks + 1;
        for attempt in 0..attempts {
            let raw = self.gateway.cached_complete_nth(&messages, &self.decode, attempt)?;
            match envelope_field(&raw, field) {
                Some(v) if !v.trim().is_empty() => return Ok(v),
                _ => last_output = raw,
            }
        }
        Err(GenerationError::Parse {
            field: field.to_string(),
            attempts,
            last_output,
        })
    }

    pub fn generate_explanation(&self, instance: &Instance, kind: ExplanationKind) -> Result<String, GenerationError> {
        let template = self.prompts.template(match kind {
            ExplanationKind::NaturalLanguage => MetaPromptKind::ExplainNatural,
            ExplanationKind::FeatureAttribution => MetaPromptKind::ExplainFeature,
        });
        let user = template.render(&[
            ("text", &instance.text),
            ("label", &instance.gold_label),
            ("task_name", &self.task_name),
        ])?;
        self.ask(user, "explanation")
    }

    pub fn generate_guideline(
        &self,
        instance: &Instance,
        explanation: &str,
        kind: ExplanationKind,
        source: ExplanationSource,
    ) -> Result<Guideline, GenerationError> {
        if explanation.trim().is_empty() {
            return Err(GenerationError::MissingExplanation(instance.id.clone()));
        }
        let label = self
            .labels
            .canonicalize(&instance.gold_label)
            .ok_or_else(|| DomainError::UnknownLabel {
                id: instance.id.clone(),
                label: instance.gold_label.clone(),
            })?
            .to_string();
        let template = self.prompts.template(match kind {
            ExplanationKind::NaturalLanguage => MetaPromptKind::GuidelineFromNatural,
            ExplanationKind::FeatureAttribution => MetaPromptKind::GuidelineFromFeature,
        });
        let user = template.render(&[
            ("text", &instance.text),
            ("label", &label),
            ("explanation", explanation),
            ("task_name", &self.task_name),
        ])?;
        let text = self.ask(user, "guideline")?;
        Ok(Guideline::new(
            text,
            label,
            Provenance::Explanation {
                explanation_source: source,
                explanation_kind: kind,
                instance_id: instance.id.clone(),
                backend: Some(self.gateway.descriptor()),
            },
        )?)
    }

    /// Rewrites several same-label guidelines into one text.
    pub fn merge_texts(&self, guidelines: &[&str]) -> Result<String, GenerationError> {
        self.ask(self.prompts.merge_request(guidelines)?, "guideline")
    }

    fn thread_pool(&self) -> rayon::ThreadPool {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.parallelism)
            .build()
            .expect("thread pool")
    }

    /// Fills in missing (or, with `only_missing = false`, all) explanations.
    /// Returns the annotated copy and the number of instances whose
    /// explanation could not be parsed; those are left unannotated.
    pub fn annotate(
        &self,
        dataset: &[Instance],
        kind: ExplanationKind,
        only_missing: bool,
    ) -> Result<(Vec<Instance>, usize), GenerationError> {
        // Collecting into a Result stops scheduling new work after the first fatal error.
        let results: Vec<(Instance, bool)> = self.thread_pool().install(|| {
            dataset
                .par_iter()
                .map(|inst| {
                    if only_missing && inst.explanation.is_some() {
                        return Ok((inst.clone(), false));
                    }
                    match self.generate_explanation(inst, kind) {
                        Ok(e) => Ok((inst.clone().with_explanation(e, kind), false)),
                        Err(GenerationError::Parse { .. }) => {
                            warn!("instance {}: explanation did not parse, skipped", inst.id);
                            Ok((inst.clone(), true))
                        }
                        Err(e) => Err(e),
                    }
                })
                .collect::<Result<_, _>>()
        })?;
        let mut out = Vec::with_capacity(dataset.len());
        let mut skipped = 0;
        for (inst, skip) in results {
            skipped += usize::from(skip);
            out.push(inst);
        }
        Ok((out, skipped))
    }

    fn process(&self, inst: &Instance, opts: &BuildOptions) -> Result<Outcome, GenerationError> {
        let human = match (&inst.explanation, inst.explanation_kind) {
            (Some(e), Some(k)) if !e.trim().is_empty() => Some((e.clone(), k)),
            _ => None,
        };
        let (explanation, kind, source) = match (opts.source, human) {
            (PoolSource::Human | PoolSource::Mixed, Some((e, k))) => (e, k, ExplanationSource::Human),
            (PoolSource::Human, None) => return Ok(Outcome::MissingExplanation),
            (PoolSource::Llm | PoolSource::Mixed, _) => match self.generate_explanation(inst, opts.kind) {
                Ok(e) => (e, opts.kind, ExplanationSource::Llm),
                Err(GenerationError::Parse { .. }) => {
                    warn!("instance {}: explanation did not parse, skipped", inst.id);
                    return Ok(Outcome::ParseFailed);
                }
                Err(e) => return Err(e),
            },
        };
        match self.generate_guideline(inst, &explanation, kind, source) {
            Ok(g) => Ok(Outcome::Built(g)),
            Err(GenerationError::Parse { .. }) => {
                warn!("instance {}: guideline did not parse, skipped", inst.id);
                Ok(Outcome::ParseFailed)
            }
            Err(e) => Err(e),
        }
    }

    /// One guideline per instance, deduplicated by `(text, source_label)`.
    /// The pool is ordered by guideline id, so dataset order does not
    /// affect its contents.
    pub fn build_pool(&self, dataset: &[Instance], opts: &BuildOptions) -> Result<PoolBuild, GenerationError> {
        let outcomes: Vec<Outcome> = self
            .thread_pool()
            .install(|| dataset.par_iter().map(|inst| self.process(inst, opts)).collect::<Result<_, _>>())?;

        let mut report = BuildReport {
            instances: dataset.len(),
            backend: self.gateway.descriptor(),
            seed: self.seed,
            ..BuildReport::default()
        };
        let mut built = Vec::new();
        for outcome in outcomes {
            match outcome {
                Outcome::Built(g) => {
                    report.processed += 1;
                    built.push(g);
                }
                Outcome::MissingExplanation => report.skipped_missing_explanation += 1,
                Outcome::ParseFailed => report.skipped_parse += 1,
            }
        }
        if let Some(limit) = opts.max_skip_fraction {
            let skipped = report.skipped();
            if report.instances > 0 && skipped as f64 / report.instances as f64 > limit {
                return Err(GenerationError::TooManySkipped {
                    skipped,
                    total: report.instances,
                    limit,
                });
            }
        }
        let guidelines = dedup_guidelines(built);
        report.duplicates_removed = report.processed - guidelines.len();
        report.pool_size = guidelines.len();
        if guidelines.is_empty() {
            return Err(GenerationError::PoolEmpty {
                skipped: report.skipped(),
            });
        }
        Ok(PoolBuild {
            pool: GuidelinePool::new(guidelines)?,
            report,
        })
    }
}

fn provenance_key(g: &Guideline) -> &str {
    match &g.provenance {
        Provenance::Explanation { instance_id, .. } => instance_id,
        _ => "",
    }
}

/// Sorts by id and keeps, per id, the guideline from the smallest instance id.
fn dedup_guidelines(mut guidelines: Vec<Guideline>) -> Vec<Guideline> {
    guidelines.sort_by(|a, b| a.id.cmp(&b.id).then_with(|| provenance_key(a).cmp(provenance_key(b))));
    let mut seen: HashMap<String, ()> = HashMap::new();
    guidelines.retain(|g| seen.insert(g.id.clone(), ()).is_none());
    guidelines
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{Backend, Completion, ExchangeCache, ScriptedBackend};
    use std::sync::atomic::{AtomicU32, Ordering};

    fn labels() -> LabelSet {
        LabelSet::new(["boredom", "joy"]).unwrap()
    }

    fn generator(backend: Arc<dyn Backend>) -> GuidelineGenerator {
        GuidelineGenerator::new(Arc::new(Gateway::new(backend)), "emotion classification", labels())
            .with_parallelism(2)
    }

    #[test]
    fn templates_bind_all_placeholders() {
        let p = MetaPrompts::default();
        let t = p.template(MetaPromptKind::GuidelineFromFeature);
        assert_eq!(t.placeholders(), vec!["task_name", "text", "label", "explanation"]);
        let err = t.render(&[("text", "x")]).unwrap_err();
        assert!(matches!(err, GenerationError::UnboundPlaceholder { .. }));
    }

    #[test]
    fn structured_system_keeps_json_braces() {
        let p = MetaPrompts::default();
        assert_eq!(
            p.template(MetaPromptKind::StructuredSystem).placeholders(),
            vec!["feature_name", "feature_name", "feature"]
        );
        let s = p.system_for("label", "label").unwrap();
        assert!(s.starts_with("Provide the label in exactly one valid JSON object"));
        assert!(s.ends_with("{\n  \"label\": \"<label>\"\n}"));
    }

    #[test]
    fn render_does_not_rescan_values() {
        let t = MetaPromptTemplate::new(MetaPromptKind::ExplainNatural, "A {text} B");
        assert_eq!(t.render(&[("text", "{label}")]).unwrap(), "A {label} B");
    }

    #[test]
    fn merge_request_numbers_guidelines() {
        let p = MetaPrompts::default();
        assert_eq!(
            p.merge_request(&["one", "two"]).unwrap(),
            "Please rewrite the following guidelines into one guideline.\n1: one\n2: two"
        );
    }

    #[test]
    fn explanation_envelope_unwrap() {
        let g = generator(Arc::new(ScriptedBackend::new("s", r#"{"explanation": "E"}"#)));
        let inst = Instance::new("1", "text", "joy");
        assert_eq!(
            g.generate_explanation(&inst, ExplanationKind::NaturalLanguage).unwrap(),
            "E"
        );
    }

    #[test]
    fn prose_without_json_is_parse_error() {
        let backend = Arc::new(ScriptedBackend::new("s", "I think it is joy."));
        let g = generator(backend.clone());
        let inst = Instance::new("1", "text", "joy");
        let err = g.generate_explanation(&inst, ExplanationKind::NaturalLanguage).unwrap_err();
        assert!(matches!(err, GenerationError::Parse { attempts: 3, .. }));
        assert_eq!(backend.calls(), 3);
    }

    #[test]
    fn guideline_keeps_text_and_label() {
        let g = generator(Arc::new(ScriptedBackend::new("s", r#"{"guideline": "Pick joy when happy."}"#)));
        let inst = Instance::new("i1", "I won!", "Joy");
        let gl = g
            .generate_guideline(&inst, "winning", ExplanationKind::NaturalLanguage, ExplanationSource::Human)
            .unwrap();
        assert_eq!(gl.text, "Pick joy when happy.");
        assert_eq!(gl.source_label, "joy");
        match gl.provenance {
            Provenance::Explanation { instance_id, explanation_source, .. } => {
                assert_eq!(instance_id, "i1");
                assert_eq!(explanation_source, ExplanationSource::Human);
            }
            other => panic!("unexpected provenance {other:?}"),
        }
    }

    #[test]
    fn empty_guideline_output_is_parse_error() {
        let g = generator(Arc::new(ScriptedBackend::new("s", r#"{"guideline": ""}"#)));
        let inst = Instance::new("1", "t", "joy");
        let err = g
            .generate_guideline(&inst, "e", ExplanationKind::NaturalLanguage, ExplanationSource::Human)
            .unwrap_err();
        assert!(matches!(err, GenerationError::Parse { .. }));
    }

    /// Fails to produce a parseable envelope for texts containing "bad" on
    /// the first `failures` asks.
    struct Flaky {
        failures: u32,
        seen: AtomicU32,
    }

    impl Backend for Flaky {
        fn descriptor(&self) -> String {
            "flaky".into()
        }

        fn complete(&self, messages: &[ChatMessage], _d: &DecodeConfig) -> Result<Completion, BackendError> {
            let user = &messages[1].content;
            if user.contains("Text: bad") && self.seen.fetch_add(1, Ordering::SeqCst) < self.failures {
                return Ok(Completion { text: "no json".into(), attempts: 1 });
            }
            let text = user.lines().find(|l| l.starts_with("Text: ")).unwrap_or("?");
            Ok(Completion {
                text: serde_json::json!({ "guideline": format!("rule for {text}") }).to_string(),
                attempts: 1,
            })
        }
    }

    fn human(id: &str, text: &str, label: &str) -> Instance {
        Instance::new(id, text, label).with_explanation(format!("because {text}"), ExplanationKind::NaturalLanguage)
    }

    fn opts(source: PoolSource) -> BuildOptions {
        BuildOptions {
            source,
            kind: ExplanationKind::NaturalLanguage,
            max_skip_fraction: None,
        }
    }

    #[test]
    fn reask_recovers_within_budget() {
        let g = generator(Arc::new(Flaky { failures: 2, seen: AtomicU32::new(0) }));
        let build = g.build_pool(&[human("1", "bad", "joy")], &opts(PoolSource::Human)).unwrap();
        assert_eq!(build.pool.len(), 1);
    }

    #[test]
    fn unparseable_instance_is_skipped() {
        let g = generator(Arc::new(Flaky { failures: 3, seen: AtomicU32::new(0) }));
        let data = vec![
            human("1", "a", "joy"),
            human("2", "bad", "joy"),
            human("3", "c", "boredom"),
            human("4", "d", "boredom"),
        ];
        let build = g.build_pool(&data, &opts(PoolSource::Human)).unwrap();
        assert_eq!(build.pool.len(), 3);
        assert_eq!(build.report.skipped_parse, 1);
        assert_eq!(build.report.processed, 3);
    }

    #[test]
    fn skip_threshold_aborts() {
        let g = generator(Arc::new(Flaky { failures: 3, seen: AtomicU32::new(0) }));
        let data = vec![human("1", "a", "joy"), human("2", "bad", "joy")];
        let mut o = opts(PoolSource::Human);
        o.max_skip_fraction = Some(0.25);
        assert!(matches!(
            g.build_pool(&data, &o),
            Err(GenerationError::TooManySkipped { .. })
        ));
    }

    #[test]
    fn human_source_skips_unexplained_without_calls() {
        let backend = Arc::new(ScriptedBackend::new("s", r#"{"guideline": "g"}"#));
        let g = generator(backend.clone());
        let data = vec![human("1", "a", "joy"), Instance::new("2", "b", "joy")];
        let build = g.build_pool(&data, &opts(PoolSource::Human)).unwrap();
        assert_eq!(build.report.skipped_missing_explanation, 1);
        assert_eq!(backend.calls(), 1);
    }

    #[test]
    fn duplicates_collapse() {
        let g = generator(Arc::new(ScriptedBackend::new("s", r#"{"guideline": "same"}"#)));
        let data = vec![human("1", "a", "joy"), human("2", "b", "joy")];
        let build = g.build_pool(&data, &opts(PoolSource::Human)).unwrap();
        assert_eq!(build.pool.len(), 1);
        assert_eq!(build.report.duplicates_removed, 1);
        match &build.pool.guidelines()[0].provenance {
            Provenance::Explanation { instance_id, .. } => assert_eq!(instance_id, "1"),
            _ => unreachable!(),
        }
    }

    #[test]
    fn empty_pool_is_error() {
        let g = generator(Arc::new(ScriptedBackend::new("s", "nope")));
        let err = g.build_pool(&[human("1", "a", "joy")], &opts(PoolSource::Human)).unwrap_err();
        assert!(matches!(err, GenerationError::PoolEmpty { skipped: 1 }));
    }

    #[test]
    fn llm_source_generates_explanations_first() {
        let backend = Arc::new(
            ScriptedBackend::new("s", "x")
                .rule("Provide a brief explanation", r#"{"explanation": "EXPL"}"#)
                .unwrap()
                .rule(r"Explanation: EXPL", r#"{"guideline": "from generated"}"#)
                .unwrap(),
        );
        let g = generator(backend.clone());
        let build = g
            .build_pool(&[Instance::new("1", "t", "joy")], &opts(PoolSource::Llm))
            .unwrap();
        assert_eq!(build.pool.guidelines()[0].text, "from generated");
        assert_eq!(backend.calls(), 2);
    }

    #[test]
    fn annotate_only_missing_makes_no_calls_when_complete() {
        let backend = Arc::new(ScriptedBackend::new("s", r#"{"explanation": "E"}"#));
        let gw = Arc::new(Gateway::new(backend.clone()).with_cache(ExchangeCache::memory()));
        let g = GuidelineGenerator::new(gw, "t", labels());
        let data = vec![human("1", "a", "joy")];
        let (out, skipped) = g.annotate(&data, ExplanationKind::NaturalLanguage, true).unwrap();
        assert_eq!((out, skipped), (data.clone(), 0));
        assert_eq!(backend.calls(), 0);
        let (out, _) = g.annotate(&data, ExplanationKind::NaturalLanguage, false).unwrap();
        assert_eq!(out[0].explanation.as_deref(), Some("E"));
    }
}
