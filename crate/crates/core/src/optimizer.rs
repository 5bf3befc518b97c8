//! Hill-climbing search over guideline sets.
//!
//! Each iteration draws one sample `g` from the pool, builds one candidate
//! per edit operator, scores `prefix ⊕ candidate`, and moves to a candidate
//! only if it strictly beats the current score. Two selection modes:
//!
//! - `Argmax`: score every candidate, take the best (ties go to the earlier
//!   operator in `add < remove < replace < merge < shuffle`), accept iff it
//!   is strictly better than the current set.
//! - `Sequential`: apply operators one after another in configured order,
//!   accepting each strict improvement immediately.
//!
//! Randomness comes from named ChaCha substreams of a single root seed, so
//! adding or skipping an operator never shifts another operator's draws,
//! and a run can be resumed from the recorded stream positions.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::domain::{
    render_prompt, Guideline, GuidelinePool, GuidelineSet, Instance, PromptPrefix, Provenance, RenderedPrompt,
};
use crate::eval::{subsample, EvalError, Evaluator, SubsampleSpec};
use crate::pool::{GenerationError, GuidelineGenerator};

#[derive(Debug, Error)]
pub enum OptimizeError {
    #[error("invalid optimizer config: {0}")]
    Config(String),
    #[error("guideline pool is empty")]
    EmptyPool,
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Generation(#[from] GenerationError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Operator {
    Add,
    Remove,
    Replace,
    Merge,
    Shuffle,
}

impl Operator {
    /// Also the tie-break precedence, earliest first.
    pub const ALL: [Operator; 5] = [
        Operator::Add,
        Operator::Remove,
        Operator::Replace,
        Operator::Merge,
        Operator::Shuffle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Operator::Add => "add",
            Operator::Remove => "remove",
            Operator::Replace => "replace",
            Operator::Merge => "merge",
            Operator::Shuffle => "shuffle",
        }
    }
}

impl fmt::Display for Operator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Operator {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Operator::ALL
            .into_iter()
            .find(|o| o.name() == s.trim().to_lowercase())
            .ok_or_else(|| format!("unknown operator `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingStrategy {
    NoControl,
    LabelControl,
}

impl FromStr for SamplingStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_lowercase().replace('_', "-").as_str() {
            "no-control" => Ok(Self::NoControl),
            "label-control" => Ok(Self::LabelControl),
            other => Err(format!("unknown sampling strategy `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    Argmax,
    Sequential,
}

impl FromStr for SelectionMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_lowercase().as_str() {
            "argmax" => Ok(Self::Argmax),
            "sequential" => Ok(Self::Sequential),
            other => Err(format!("unknown selection mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubsampleMode {
    /// One training subsample drawn per run.
    Fixed,
    /// A fresh subsample every iteration; the current set is rescored on it.
    PerIteration,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub strategy: SamplingStrategy,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub max_iterations: usize,
    pub operators: Vec<Operator>,
    pub selection: SelectionMode,
    pub sampler: SamplerConfig,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            max_iterations: 300,
            operators: Operator::ALL.to_vec(),
            selection: SelectionMode::Argmax,
            sampler: SamplerConfig {
                strategy: SamplingStrategy::NoControl,
                k: 3,
            },
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), OptimizeError> {
        if self.operators.is_empty() {
            return Err(OptimizeError::Config("no operators".into()));
        }
        let unique: HashSet<_> = self.operators.iter().collect();
        if unique.len() != self.operators.len() {
            return Err(OptimizeError::Config("duplicate operator".into()));
        }
        if self.sampler.k == 0 {
            return Err(OptimizeError::Config("k must be at least 1".into()));
        }
        Ok(())
    }
}

/// Deterministic child seed for `(root, name, index)`.
pub fn derive_seed(root: u64, name: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(name.as_bytes());
    h.update(index.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Word positions of every substream; enough to restore them exactly.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamPositions {
    pub sampling: u128,
    pub remove: u128,
    pub replace: u128,
    pub shuffle: u128,
}

#[derive(Debug, Clone)]
pub struct RngStreams {
    seed: u64,
    pub sampling: ChaCha8Rng,
    pub remove: ChaCha8Rng,
    pub replace: ChaCha8Rng,
    pub shuffle: ChaCha8Rng,
}

impl RngStreams {
    pub fn new(seed: u64) -> Self {
        Self::restore(seed, &StreamPositions::default())
    }

    pub fn restore(seed: u64, positions: &StreamPositions) -> Self {
        let stream = |id: u64, pos: u128| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(id);
            rng.set_word_pos(pos);
            rng
        };
        Self {
            seed,
            sampling: stream(1, positions.sampling),
            remove: stream(2, positions.remove),
            replace: stream(3, positions.replace),
            shuffle: stream(4, positions.shuffle),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn positions(&self) -> StreamPositions {
        StreamPositions {
            sampling: self.sampling.get_word_pos(),
            remove: self.remove.get_word_pos(),
            replace: self.replace.get_word_pos(),
            shuffle: self.shuffle.get_word_pos(),
        }
    }
}

// ---------------------------------------------------------------------------
// Sampling and operators

/// Draws up to `k` distinct guidelines.
///
/// No-control: uniform without replacement. Label-control: walks a random
/// permutation of the pool's labels round-robin, taking one unused guideline
/// per visited label, so every label appears once `k` reaches the label
/// count.
pub fn sample_guidelines<R: Rng + ?Sized>(pool: &GuidelinePool, cfg: &SamplerConfig, rng: &mut R) -> Vec<Guideline> {
    let k = cfg.k.min(pool.len());
    match cfg.strategy {
        SamplingStrategy::NoControl => rand::seq::index::sample(rng, pool.len(), k)
            .into_iter()
            .map(|i| pool.guidelines()[i].clone())
            .collect(),
        SamplingStrategy::LabelControl => {
            let mut labels: Vec<&str> = pool.labels().collect();
            labels.shuffle(rng);
            let mut remaining: Vec<Vec<&Guideline>> = labels.iter().map(|l| pool.with_label(l).collect()).collect();
            let mut out = Vec::with_capacity(k);
            while out.len() < k {
                for bucket in remaining.iter_mut() {
                    if out.len() == k {
                        break;
                    }
                    if bucket.is_empty() {
                        continue;
                    }
                    let i = rng.random_range(0..bucket.len());
                    out.push(bucket.swap_remove(i).clone());
                }
            }
            out
        }
    }
}

/// `set` followed by the members of `g` not already present.
pub fn op_add(set: &GuidelineSet, g: &[Guideline]) -> GuidelineSet {
    GuidelineSet::from_dedup(set.iter().cloned().chain(g.iter().cloned()))
}

/// `None` when `set` is empty.
///
/// No-control removes `|g|` random members (one when `|set| < |g|`).
/// Label-control removes one random member per distinct label of `g` that
/// `set` also carries.
pub fn op_remove<R: Rng + ?Sized>(
    set: &GuidelineSet,
    g: &[Guideline],
    strategy: SamplingStrategy,
    rng: &mut R,
) -> Option<GuidelineSet> {
    if set.is_empty() {
        return None;
    }
    let members = set.guidelines();
    let mut drop = vec![false; members.len()];
    match strategy {
        SamplingStrategy::NoControl => {
            let n = if members.len() < g.len() { 1 } else { g.len() };
            for i in rand::seq::index::sample(rng, members.len(), n) {
                drop[i] = true;
            }
        }
        SamplingStrategy::LabelControl => {
            let mut seen = HashSet::new();
            for label in g.iter().map(|x| x.source_label.as_str()) {
                if !seen.insert(label) {
                    continue;
                }
                let idx: Vec<usize> = members
                    .iter()
                    .enumerate()
                    .filter(|(_, m)| m.source_label == label)
                    .map(|(i, _)| i)
                    .collect();
                if !idx.is_empty() {
                    drop[idx[rng.random_range(0..idx.len())]] = true;
                }
            }
        }
    }
    Some(GuidelineSet::from_dedup(
        members.iter().zip(&drop).filter(|(_, d)| !**d).map(|(m, _)| m.clone()),
    ))
}

/// Removal (with its own draw) followed by adding `g`.
pub fn op_replace<R: Rng + ?Sized>(
    set: &GuidelineSet,
    g: &[Guideline],
    strategy: SamplingStrategy,
    rng: &mut R,
) -> Option<GuidelineSet> {
    op_remove(set, g, strategy, rng).map(|rest| op_add(&rest, g))
}

pub fn op_shuffle<R: Rng + ?Sized>(set: &GuidelineSet, rng: &mut R) -> GuidelineSet {
    let mut v = set.guidelines().to_vec();
    v.shuffle(rng);
    GuidelineSet::from_dedup(v)
}

/// Produces one guideline from several with the same label.
pub trait GuidelineMerger: Send + Sync {
    fn merge(&self, label: &str, guidelines: &[&Guideline]) -> Result<Guideline, GenerationError>;
}

impl GuidelineMerger for GuidelineGenerator {
    fn merge(&self, label: &str, guidelines: &[&Guideline]) -> Result<Guideline, GenerationError> {
        let texts: Vec<&str> = guidelines.iter().map(|g| g.text.as_str()).collect();
        let text = self.merge_texts(&texts)?;
        Ok(Guideline::new(
            text,
            label,
            Provenance::Merge {
                parents: guidelines.iter().map(|g| g.id.clone()).collect(),
                backend: Some(self.gateway().descriptor()),
            },
        )?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergeOutcome {
    pub set: GuidelineSet,
    /// Labels whose merge output did not parse; their originals are kept.
    pub failed_labels: Vec<String>,
}

/// For every label shared by `g` and `set`, the set's guidelines of that
/// label plus the new ones from `g` are merged into one, placed where the
/// first of them was. Members of `g` with labels absent from `set` are
/// appended unchanged, in sample order. `None` when `g` is empty.
pub fn op_merge(
    set: &GuidelineSet,
    g: &[Guideline],
    merger: &dyn GuidelineMerger,
) -> Result<Option<MergeOutcome>, GenerationError> {
    if g.is_empty() {
        return Ok(None);
    }
    let fresh: Vec<&Guideline> = {
        let mut seen = HashSet::new();
        g.iter()
            .filter(|x| !set.contains_id(&x.id) && seen.insert(x.id.as_str()))
            .collect()
    };
    let mut labels: Vec<&str> = Vec::new();
    for x in g {
        if !labels.contains(&x.source_label.as_str()) {
            labels.push(&x.source_label);
        }
    }
    let mut current: Vec<Guideline> = set.guidelines().to_vec();
    let mut failed_labels = Vec::new();
    for label in labels {
        let in_set: Vec<&Guideline> = set.iter().filter(|m| m.source_label == label).collect();
        let incoming: Vec<&Guideline> = fresh.iter().copied().filter(|m| m.source_label == label).collect();
        if in_set.is_empty() {
            continue;
        }
        let group: Vec<&Guideline> = in_set.iter().chain(incoming.iter()).copied().collect();
        if group.len() < 2 {
            continue;
        }
        match merger.merge(label, &group) {
            Ok(merged) => {
                let first = current
                    .iter()
                    .position(|m| m.source_label == label)
                    .expect("label present in set");
                current[first] = merged;
                let mut i = 0;
                current.retain(|m| {
                    let keep = i == first || m.source_label != label;
                    i += 1;
                    keep
                });
            }
            Err(GenerationError::Parse { .. }) => failed_labels.push(label.to_string()),
            Err(e) => return Err(e),
        }
    }
    current.extend(
        fresh
            .iter()
            .filter(|m| !set.iter().any(|x| x.source_label == m.source_label))
            .map(|m| (*m).clone()),
    );
    Ok(Some(MergeOutcome {
        set: GuidelineSet::from_dedup(current),
        failed_labels,
    }))
}

// ---------------------------------------------------------------------------
// Objective

/// `F(prompt)`: the score the search maximizes.
pub trait Objective: Send + Sync {
    fn score(&self, prompt: &RenderedPrompt, iteration: usize) -> Result<f64, EvalError>;

    /// Whether scores depend on the iteration (a fresh subsample each time).
    fn per_iteration(&self) -> bool {
        false
    }
}

/// F1-macro on a training subsample.
pub struct SubsetObjective {
    evaluator: Arc<Evaluator>,
    dataset: Vec<Instance>,
    spec: SubsampleSpec,
    mode: SubsampleMode,
    fixed: Vec<Instance>,
}

impl SubsetObjective {
    pub fn new(evaluator: Arc<Evaluator>, dataset: Vec<Instance>, spec: SubsampleSpec, mode: SubsampleMode) -> Self {
        let fixed = subsample(&dataset, &spec);
        Self {
            evaluator,
            dataset,
            spec,
            mode,
            fixed,
        }
    }

    /// The subset scored at `iteration`.
    pub fn subset(&self, iteration: usize) -> Vec<Instance> {
        match self.mode {
            SubsampleMode::Fixed => self.fixed.clone(),
            SubsampleMode::PerIteration => subsample(
                &self.dataset,
                &SubsampleSpec {
                    proportion: self.spec.proportion,
                    seed: derive_seed(self.spec.seed, "iteration", iteration as u64),
                },
            ),
        }
    }
}

impl Objective for SubsetObjective {
    fn score(&self, prompt: &RenderedPrompt, iteration: usize) -> Result<f64, EvalError> {
        let report = match self.mode {
            SubsampleMode::Fixed => self.evaluator.evaluate(prompt, &self.fixed)?,
            SubsampleMode::PerIteration => self.evaluator.evaluate(prompt, &self.subset(iteration))?,
        };
        Ok(report.f1_macro)
    }

    fn per_iteration(&self) -> bool {
        self.mode == SubsampleMode::PerIteration
    }
}

// ---------------------------------------------------------------------------
// Search

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub operator: Operator,
    pub applicable: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub set_digest: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub guideline_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub merge_failures: Vec<String>,
    pub accepted: bool,
}

/// One iteration of the search, as written to the trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub iteration: usize,
    pub sampled_ids: Vec<String>,
    pub candidates: Vec<CandidateRecord>,
    pub winner: Option<Operator>,
    pub accepted: bool,
    pub score_before: f64,
    pub score_after: f64,
    pub rng: StreamPositions,
    /// The new current set, present on accepted steps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accepted_set: Option<Vec<Guideline>>,
}

#[derive(Debug, Clone)]
pub struct SearchState {
    /// Number of completed iterations.
    pub iteration: usize,
    pub set: GuidelineSet,
    pub score: f64,
    pub rng: RngStreams,
}

struct Candidate {
    record: CandidateRecord,
    set: Option<GuidelineSet>,
}

pub struct Optimizer<'a> {
    prefix: PromptPrefix,
    pool: &'a GuidelinePool,
    cfg: OptimizerConfig,
    objective: &'a dyn Objective,
    merger: &'a dyn GuidelineMerger,
}

impl<'a> Optimizer<'a> {
    pub fn new(
        prefix: PromptPrefix,
        pool: &'a GuidelinePool,
        cfg: OptimizerConfig,
        objective: &'a dyn Objective,
        merger: &'a dyn GuidelineMerger,
    ) -> Result<Self, OptimizeError> {
        cfg.validate()?;
        if pool.is_empty() {
            return Err(OptimizeError::EmptyPool);
        }
        Ok(Self {
            prefix,
            pool,
            cfg,
            objective,
            merger,
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    pub fn render(&self, set: &GuidelineSet) -> RenderedPrompt {
        render_prompt(&self.prefix, set)
    }

    /// Empty set scored at iteration 0.
    pub fn initial_state(&self) -> Result<SearchState, OptimizeError> {
        let set = GuidelineSet::empty();
        let score = self.objective.score(&self.render(&set), 0)?;
        Ok(SearchState {
            iteration: 0,
            set,
            score,
            rng: RngStreams::new(self.cfg.seed),
        })
    }

    fn build(&self, op: Operator, set: &GuidelineSet, g: &[Guideline], rng: &mut RngStreams) -> Result<Candidate, OptimizeError> {
        let strategy = self.cfg.sampler.strategy;
        let (out, merge_failures) = match op {
            Operator::Add => (Some(op_add(set, g)), Vec::new()),
            Operator::Remove => (op_remove(set, g, strategy, &mut rng.remove), Vec::new()),
            Operator::Replace => (op_replace(set, g, strategy, &mut rng.replace), Vec::new()),
            Operator::Merge => match op_merge(set, g, self.merger)? {
                Some(m) => (Some(m.set), m.failed_labels),
                None => (None, Vec::new()),
            },
            Operator::Shuffle => (Some(op_shuffle(set, &mut rng.shuffle)), Vec::new()),
        };
        Ok(Candidate {
            record: CandidateRecord {
                operator: op,
                applicable: out.is_some(),
                set_digest: out.as_ref().map(GuidelineSet::digest),
                guideline_ids: out.as_ref().map(GuidelineSet::ids).unwrap_or_default(),
                score: None,
                merge_failures,
                accepted: false,
            },
            set: out,
        })
    }

    fn score_candidate(&self, c: &mut Candidate, iteration: usize) -> Result<(), OptimizeError> {
        if let Some(set) = &c.set {
            c.record.score = Some(self.objective.score(&self.render(set), iteration)?);
        }
        Ok(())
    }

    /// Runs one iteration and updates `state` in place. On error the state
    /// is left untouched.
    pub fn step(&self, state: &mut SearchState) -> Result<StepOutcome, OptimizeError> {
        let iteration = state.iteration + 1;
        let mut rng = state.rng.clone();
        let mut current = state.set.clone();
        let mut score = if self.objective.per_iteration() {
            self.objective.score(&self.render(&current), iteration)?
        } else {
            state.score
        };
        let score_before = score;
        let g = sample_guidelines(self.pool, &self.cfg.sampler, &mut rng.sampling);

        let mut records = Vec::with_capacity(self.cfg.operators.len());
        let mut winner = None;
        let mut accepted = false;
        match self.cfg.selection {
            SelectionMode::Argmax => {
                let mut candidates = Vec::with_capacity(self.cfg.operators.len());
                for &op in &self.cfg.operators {
                    let mut c = self.build(op, &current, &g, &mut rng)?;
                    self.score_candidate(&mut c, iteration)?;
                    candidates.push(c);
                }
                let best = candidates
                    .iter()
                    .enumerate()
                    .filter_map(|(i, c)| c.record.score.map(|s| (i, s, c.record.operator)))
                    .max_by(|a, b| a.1.total_cmp(&b.1).then_with(|| b.2.cmp(&a.2)));
                if let Some((i, s, op)) = best {
                    winner = Some(op);
                    if s > score {
                        accepted = true;
                        score = s;
                        current = candidates[i].set.clone().expect("scored candidate has a set");
                        candidates[i].record.accepted = true;
                    }
                }
                records.extend(candidates.into_iter().map(|c| c.record));
            }
            SelectionMode::Sequential => {
                for &op in &self.cfg.operators {
                    let mut c = self.build(op, &current, &g, &mut rng)?;
                    self.score_candidate(&mut c, iteration)?;
                    if let Some(s) = c.record.score {
                        if s > score {
                            accepted = true;
                            winner = Some(op);
                            score = s;
                            current = c.set.clone().expect("scored candidate has a set");
                            c.record.accepted = true;
                        }
                    }
                    records.push(c.record);
                }
            }
        }

        let outcome = StepOutcome {
            iteration,
            sampled_ids: g.iter().map(|x| x.id.clone()).collect(),
            candidates: records,
            winner,
            accepted,
            score_before,
            score_after: score,
            rng: rng.positions(),
            accepted_set: accepted.then(|| current.guidelines().to_vec()),
        };
        *state = SearchState {
            iteration,
            set: current,
            score,
            rng,
        };
        Ok(outcome)
    }

    /// Steps until `state.iteration == until`.
    pub fn run_until(&self, state: &mut SearchState, until: usize) -> Result<Vec<StepOutcome>, OptimizeError> {
        let mut trace = Vec::new();
        while state.iteration < until {
            trace.push(self.step(state)?);
        }
        Ok(trace)
    }

    /// Full run from the empty set: final prompt and trace.
    pub fn optimize(&self) -> Result<(RenderedPrompt, Vec<StepOutcome>), OptimizeError> {
        let mut state = self.initial_state()?;
        let trace = self.run_until(&mut state, self.cfg.max_iterations)?;
        Ok((self.render(&state.set), trace))
    }

    /// Iterations whose accepted set does not rescore to the recorded value.
    pub fn replay_mismatches(&self, trace: &[StepOutcome]) -> Result<Vec<usize>, OptimizeError> {
        let mut bad = Vec::new();
        for step in trace.iter().filter(|s| s.accepted) {
            let set = GuidelineSet::from_dedup(step.accepted_set.clone().unwrap_or_default());
            let rescored = self.objective.score(&self.render(&set), step.iteration)?;
            if rescored != step.score_after {
                bad.push(step.iteration);
            }
        }
        Ok(bad)
    }
}
