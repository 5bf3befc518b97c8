//! Synthetic three-label task shared by the integration and acceptance
//! tests.
//!
//! Texts look like `alpha-03: a synthetic sample.` The scripted backend
//! predicts a text's label only when the prompt carries that label's marker
//! guideline, and answers unparseably otherwise, so the vanilla prompt
//! scores 0 and each marker adds exactly one third.

#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use guideopt::domain::{ExplanationKind, Guideline, GuidelinePool, Instance, Provenance};
use guideopt::gateway::{ScriptRuleSpec, ScriptSpec, ScriptedBackend};

pub const LABELS: [&str; 3] = ["alpha", "beta", "gamma"];
pub const PREFIX: &str = "Classify the text into one of the following labels: alpha, beta, gamma.";
pub const TASK: &str = "synthetic tagging";

pub fn marker_text(label: &str) -> String {
    format!("MARKER-{}: texts tagged {label}- belong to {label}.", label.to_uppercase())
}

pub fn noise_text(label: &str, i: usize) -> String {
    format!("Consider the overall tone when deciding on {label} (note {i}).")
}

/// Four guidelines per label: the marker first, then three noise ones.
pub fn pool() -> GuidelinePool {
    let mut v = Vec::new();
    for label in LABELS {
        v.push(Guideline::new(marker_text(label), label, Provenance::Manual).unwrap());
        for i in 1..=3 {
            v.push(Guideline::new(noise_text(label, i), label, Provenance::Manual).unwrap());
        }
    }
    GuidelinePool::new(v).unwrap()
}

/// `per_label` instances per label. With `explained`, instance 0 of each
/// label carries the marker as its explanation, 1..=3 the noise texts, and
/// the rest repeat the noise texts.
pub fn dataset(split: &str, per_label: usize, explained: bool) -> Vec<Instance> {
    let mut out = Vec::new();
    for label in LABELS {
        for i in 0..per_label {
            let mut inst = Instance::new(
                format!("{split}-{label}-{i:02}"),
                format!("{label}-{i:02}: a synthetic sample."),
                label,
            );
            if explained {
                let e = match i {
                    0 => marker_text(label),
                    n => noise_text(label, (n - 1) % 3 + 1),
                };
                inst = inst.with_explanation(e, ExplanationKind::NaturalLanguage);
            }
            out.push(inst);
        }
    }
    out
}

pub fn script() -> ScriptSpec {
    let rule = |pattern: &str, response: &str| ScriptRuleSpec {
        pattern: pattern.into(),
        response: response.into(),
    };
    let mut rules = vec![
        rule(
            r"(?s)rule-based guideline.*\nExplanation: ([^\n]*)",
            r#"{"guideline": "$1"}"#,
        ),
        rule(
            r"(?s)Provide a brief explanation.*\nText: ([a-z]+)-(\d+)",
            r#"{"explanation": "Sample $2 is tagged $1."}"#,
        ),
        rule(
            r"(?s)into one guideline\..*?(MARKER-[A-Z]+: [^\n]*)",
            r#"{"guideline": "$1"}"#,
        ),
        rule(r"(?s)into one guideline\.\n1: ([^\n]*)", r#"{"guideline": "$1"}"#),
    ];
    for label in LABELS {
        rules.push(rule(
            &format!(r"(?s)MARKER-{}.*\nText: {label}-", label.to_uppercase()),
            &format!(r#"{{"label": "{label}"}}"#),
        ));
    }
    ScriptSpec {
        name: "synthetic".into(),
        rules,
        default_response: "I cannot decide.".into(),
    }
}

pub fn backend() -> Arc<ScriptedBackend> {
    Arc::new(ScriptedBackend::from_spec(&script()).unwrap())
}

fn write_jsonl(path: &Path, items: &[Instance]) {
    guideopt::domain::write_jsonl(path, items).unwrap();
}

/// Config, datasets and backend script on disk.
pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub config: PathBuf,
}

impl Fixture {
    pub fn new(iterations: usize) -> Self {
        Self::with(iterations, serde_json::json!({}))
    }

    /// `extra` fields are merged into the config object.
    pub fn with(iterations: usize, extra: serde_json::Value) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        write_jsonl(&root.join("train.jsonl"), &dataset("train", 10, true));
        write_jsonl(&root.join("validation.jsonl"), &dataset("val", 5, false));
        write_jsonl(&root.join("test.jsonl"), &dataset("test", 5, false));
        fs::write(root.join("script.json"), serde_json::to_vec_pretty(&script()).unwrap()).unwrap();
        let mut cfg = serde_json::json!({
            "task_name": TASK,
            "labels": LABELS,
            "prefix": PREFIX,
            "train": "train.jsonl",
            "validation": "validation.jsonl",
            "test": "test.jsonl",
            "iterations": iterations,
            "seed": 7,
            "parallelism": 2,
            "backend": {"kind": "scripted", "path": "script.json"},
            "output_root": "out"
        });
        if let (Some(base), Some(more)) = (cfg.as_object_mut(), extra.as_object()) {
            for (k, v) in more {
                base.insert(k.clone(), v.clone());
            }
        }
        let config = root.join("config.json");
        fs::write(&config, serde_json::to_vec_pretty(&cfg).unwrap()).unwrap();
        Self { dir, config }
    }

    pub fn root(&self) -> &Path {
        self.dir.path()
    }

    pub fn out(&self) -> PathBuf {
        self.root().join("out")
    }
}
