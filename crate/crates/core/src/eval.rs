//! Zero-shot label prediction, JSON label extraction, F1-macro scoring and
//! seeded subsampling.

use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{Instance, LabelSet, RenderedPrompt};
use crate::envelope::first_json_object;
use crate::gateway::{BackendError, ChatMessage, DecodeConfig, Gateway};
use crate::pool::{GenerationError, MetaPrompts};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{predictions} predictions for {golds} gold labels")]
    LengthMismatch { predictions: usize, golds: usize },
    #[error("nothing to evaluate")]
    Empty,
    #[error("gold label `{0}` is not in the label set")]
    UnknownGold(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Template(#[from] GenerationError),
    #[error("report export: {0}")]
    Export(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub instance_id: String,
    pub raw_output: String,
    /// `None` when no label could be extracted.
    pub parsed_label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelMetrics {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub f1_macro: f64,
    pub per_label: Vec<LabelMetrics>,
    pub unparsed_count: usize,
    pub n: usize,
}

impl EvalReport {
    /// One row per label plus a final `macro` row.
    pub fn write_csv(&self, path: &Path) -> Result<(), EvalError> {
        let export = |e: csv::Error| EvalError::Export(e.to_string());
        let mut w = csv::Writer::from_path(path).map_err(export)?;
        w.write_record(["label", "precision", "recall", "f1", "support"])
            .map_err(export)?;
        for m in &self.per_label {
            w.write_record([
                m.label.clone(),
                m.precision.to_string(),
                m.recall.to_string(),
                m.f1.to_string(),
                m.support.to_string(),
            ])
            .map_err(export)?;
        }
        w.write_record([
            "macro".to_string(),
            String::new(),
            String::new(),
            self.f1_macro.to_string(),
            self.n.to_string(),
        ])
        .map_err(export)?;
        w.flush().map_err(|e| EvalError::Export(e.to_string()))
    }
}

/// Reads `field` from the first JSON object in `raw` and maps it onto the
/// label set. Field names match case-insensitively.
pub fn parse_label_json(raw: &str, field: &str, labels: &LabelSet) -> Option<String> {
    let obj = first_json_object(raw)?;
    let wanted = field.trim().to_lowercase();
    let value = obj
        .iter()
        .find(|(k, _)| k.trim().to_lowercase() == wanted)
        .and_then(|(_, v)| v.as_str())?;
    labels.canonicalize(value).map(str::to_string)
}

/// Per-label precision/recall/F1 and their unweighted mean over the whole
/// label set. A zero denominator yields 0. An unparsed prediction is a false
/// negative for its gold label and a false positive for no label.
pub fn f1_macro(predicted: &[Option<String>], golds: &[String], labels: &LabelSet) -> Result<EvalReport, EvalError> {
    if predicted.len() != golds.len() {
        return Err(EvalError::LengthMismatch {
            predictions: predicted.len(),
            golds: golds.len(),
        });
    }
    if golds.is_empty() {
        return Err(EvalError::Empty);
    }
    let k = labels.len();
    let (mut tp, mut fp, mut fn_) = (vec![0usize; k], vec![0usize; k], vec![0usize; k]);
    let mut support = vec![0usize; k];
    let mut unparsed = 0;
    for (pred, gold) in predicted.iter().zip(golds) {
        let g = labels
            .index_of(gold)
            .ok_or_else(|| EvalError::UnknownGold(gold.clone()))?;
        support[g] += 1;
        let p = pred.as_deref().and_then(|p| labels.index_of(p));
        if p.is_none() {
            unparsed += 1;
        }
        match p {
            Some(p) if p == g => tp[g] += 1,
            Some(p) => {
                fp[p] += 1;
                fn_[g] += 1;
            }
            None => fn_[g] += 1,
        }
    }
    let per_label: Vec<LabelMetrics> = labels
        .labels()
        .iter()
        .enumerate()
        .map(|(i, label)| {
            let (precision, recall, f1) = prf(tp[i], fp[i], fn_[i]);
            LabelMetrics {
                label: label.clone(),
                precision,
                recall,
                f1,
                support: support[i],
            }
        })
        .collect();
    let f1_macro = per_label.iter().map(|m| m.f1).sum::<f64>() / k as f64;
    Ok(EvalReport {
        f1_macro,
        per_label,
        unparsed_count: unparsed,
        n: golds.len(),
    })
}

/// Precision, recall and F1 from raw counts.
pub fn prf(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    (precision, recall, f1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubsampleSpec {
    pub proportion: f64,
    pub seed: u64,
}

impl SubsampleSpec {
    pub fn full() -> Self {
        Self {
            proportion: 1.0,
            seed: 0,
        }
    }

    /// `max(1, floor(proportion * n))`, capped at `n`.
    pub fn size_for(&self, n: usize) -> usize {
        // the epsilon absorbs products like 0.57 * 100 = 56.99999999999999
        let raw = (self.proportion * n as f64 + 1e-9).floor() as usize;
        raw.clamp(1, n.max(1))
    }
}

/// Seeded draw without replacement; kept in dataset order.
pub fn subsample(dataset: &[Instance], spec: &SubsampleSpec) -> Vec<Instance> {
    let n = dataset.len();
    let size = spec.size_for(n);
    if n == 0 || size >= n {
        return dataset.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut picked = rand::seq::index::sample(&mut rng, n, size).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| dataset[i].clone()).collect()
}

/// Scores prompts on datasets through a [`Gateway`] with greedy decoding.
pub struct Evaluator {
    gateway: Arc<Gateway>,
    labels: LabelSet,
    label_field: String,
    system_prompt: String,
    decode: DecodeConfig,
    threads: rayon::ThreadPool,
}

impl Evaluator {
    pub fn new(gateway: Arc<Gateway>, labels: LabelSet) -> Self {
        let prompts = MetaPrompts::default();
        Self {
            gateway,
            labels,
            label_field: "label".into(),
            system_prompt: prompts
                .system_for("label", "label")
                .expect("default system template binds"),
            decode: DecodeConfig::greedy(),
            threads: build_threads(4),
        }
    }

    pub fn with_parallelism(mut self, n: usize) -> Self {
        self.threads = build_threads(n);
        self
    }

    pub fn with_prompts(mut self, prompts: &MetaPrompts, label_field: &str) -> Result<Self, EvalError> {
        self.system_prompt = prompts.system_for(label_field, label_field)?;
        self.label_field = label_field.to_string();
        Ok(self)
    }

    pub fn labels(&self) -> &LabelSet {
        &self.labels
    }

    pub fn gateway(&self) -> &Arc<Gateway> {
        &self.gateway
    }

    /// System message plus `<prompt>\nText: <instance text>`.
    pub fn messages(&self, prompt: &RenderedPrompt, instance: &Instance) -> Vec<ChatMessage> {
        vec![
            ChatMessage::system(self.system_prompt.clone()),
            ChatMessage::user(format!("{}\nText: {}", prompt.text(), instance.text)),
        ]
    }

    pub fn predict_label(&self, prompt: &RenderedPrompt, instance: &Instance) -> Result<Prediction, EvalError> {
        let raw = self
            .gateway
            .cached_complete(&self.messages(prompt, instance), &self.decode)?;
        let parsed_label = parse_label_json(&raw, &self.label_field, &self.labels);
        Ok(Prediction {
            instance_id: instance.id.clone(),
            raw_output: raw,
            parsed_label,
        })
    }

    pub fn predict_all(&self, prompt: &RenderedPrompt, dataset: &[Instance]) -> Result<Vec<Prediction>, EvalError> {
        self.threads
            .install(|| dataset.par_iter().map(|inst| self.predict_label(prompt, inst)).collect())
    }

    pub fn evaluate(&self, prompt: &RenderedPrompt, dataset: &[Instance]) -> Result<EvalReport, EvalError> {
        if dataset.is_empty() {
            return Err(EvalError::Empty);
        }
        let preds = self.predict_all(prompt, dataset)?;
        let predicted: Vec<Option<String>> = preds.into_iter().map(|p| p.parsed_label).collect();
        let golds: Vec<String> = dataset.iter().map(|i| i.gold_label.clone()).collect();
        f1_macro(&predicted, &golds, &self.labels)
    }
}

fn build_threads(n: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new()
        .num_threads(n.max(1))
        .build()
        .expect("thread pool")
}
