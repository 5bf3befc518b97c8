//! Command implementations behind the `guideopt` binary.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    load_dataset, read_jsonl, render_prompt, DomainError, ExplanationKind, Guideline, GuidelinePool, GuidelineSet,
    LabelSet, PromptPrefix, Provenance, RenderedPrompt, GUIDELINE_CONNECTIVE,
};
use crate::eval::{EvalError, EvalReport, Evaluator, SubsampleSpec};
use crate::gateway::{Backend, BackendError, ExchangeCache, Gateway, HttpBackend, HttpConfig, ScriptedBackend};
use crate::optimizer::{
    derive_seed, sample_guidelines, OptimizeError, Operator, Optimizer, OptimizerConfig, SamplerConfig,
    SamplingStrategy, SelectionMode, SubsampleMode, SubsetObjective,
};
use crate::pool::{BuildOptions, GenerationError, GuidelineGenerator, MetaPrompts, PoolSource};
use crate::store::{self, atomic_write, file_digest, sha256_hex, DriveOutcome, Resume, RunDir, RunManifest, StoreError};

pub const COT_INSTRUCTION: &str = "Let's think step by step.";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("backend: {0}")]
    Backend(String),
    #[error("store: {0}")]
    Store(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Backend(_) => 4,
            CliError::Store(_) => 5,
        }
    }
}

impl From<DomainError> for CliError {
    fn from(e: DomainError) -> Self {
        match e {
            DomainError::Io { .. } => CliError::Store(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<BackendError> for CliError {
    fn from(e: BackendError) -> Self {
        match e {
            BackendError::Config(_) => CliError::Config(e.to_string()),
            _ => CliError::Backend(e.to_string()),
        }
    }
}

impl From<GenerationError> for CliError {
    fn from(e: GenerationError) -> Self {
        match e {
            GenerationError::Backend(b) => b.into(),
            GenerationError::Domain(d) => d.into(),
            GenerationError::UnboundPlaceholder { .. } => CliError::Config(e.to_string()),
            GenerationError::Parse { .. } => CliError::Backend(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Backend(b) => b.into(),
            EvalError::Template(t) => t.into(),
            EvalError::Export(_) => CliError::Store(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<OptimizeError> for CliError {
    fn from(e: OptimizeError) -> Self {
        match e {
            OptimizeError::Config(_) => CliError::Config(e.to_string()),
            OptimizeError::EmptyPool => CliError::Data(e.to_string()),
            OptimizeError::Eval(x) => x.into(),
            OptimizeError::Generation(x) => x.into(),
        }
    }
}

impl From<StoreError> for CliError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::Optimize(o) => o.into(),
            StoreError::Domain(d) => d.into(),
            _ => CliError::Store(e.to_string()),
        }
    }
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendSettings {
    Scripted { path: PathBuf },
    Http(HttpConfig),
}

impl FromStr for BackendSettings {
    type Err = CliError;

    /// `scripted:<path>` or `http:<model>@<base_url>`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Some(path) = s.strip_prefix("scripted:") {
            return Ok(BackendSettings::Scripted { path: path.into() });
        }
        if let Some((model, base_url)) = s.strip_prefix("http:").and_then(|r| r.split_once('@')) {
            return Ok(BackendSettings::Http(HttpConfig {
                base_url: base_url.into(),
                model: model.into(),
                api_key_env: "OPENAI_API_KEY".into(),
                timeout_secs: 120,
                rate_limit: None,
            }));
        }
        Err(CliError::Config(format!(
            "backend `{s}`: expected scripted:<path> or http:<model>@<base_url>"
        )))
    }
}

fn default_source() -> PoolSource {
    PoolSource::Human
}
fn default_kind() -> ExplanationKind {
    ExplanationKind::NaturalLanguage
}
fn default_strategy() -> SamplingStrategy {
    SamplingStrategy::NoControl
}
fn default_k() -> usize {
    3
}
fn default_iterations() -> usize {
    300
}
fn default_proportion() -> f64 {
    1.0
}
fn default_subsample_mode() -> SubsampleMode {
    SubsampleMode::Fixed
}
fn default_rounds() -> usize {
    1
}
fn default_selection() -> SelectionMode {
    SelectionMode::Argmax
}
fn default_operators() -> Vec<Operator> {
    Operator::ALL.to_vec()
}
fn default_parallelism() -> usize {
    4
}
fn default_output_root() -> PathBuf {
    "out".into()
}

/// JSON run configuration. Relative paths resolve against the config
/// file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task_name: String,
    pub labels: Vec<String>,
    pub prefix: String,
    pub train: PathBuf,
    #[serde(default)]
    pub validation: Option<PathBuf>,
    #[serde(default)]
    pub test: Option<PathBuf>,
    #[serde(default)]
    pub pool: Option<PathBuf>,
    #[serde(default = "default_source")]
    pub explanation_source: PoolSource,
    #[serde(default = "default_kind")]
    pub explanation_kind: ExplanationKind,
    #[serde(default = "default_strategy")]
    pub strategy: SamplingStrategy,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_proportion")]
    pub proportion: f64,
    #[serde(default = "default_subsample_mode")]
    pub subsample_mode: SubsampleMode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    #[serde(default = "default_selection")]
    pub selection: SelectionMode,
    #[serde(default = "default_operators")]
    pub operators: Vec<Operator>,
    pub backend: BackendSettings,
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default)]
    pub max_skip_fraction: Option<f64>,
    #[serde(default)]
    pub meta_prompts: MetaPrompts,
    #[serde(default = "default_output_root")]
    pub output_root: PathBuf,
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub iterations: Option<usize>,
    pub strategy: Option<SamplingStrategy>,
    pub k: Option<usize>,
    pub proportion: Option<f64>,
    pub selection: Option<SelectionMode>,
    pub rounds: Option<usize>,
    pub backend: Option<BackendSettings>,
    pub cache_dir: Option<PathBuf>,
    pub source: Option<PoolSource>,
    pub output_root: Option<PathBuf>,
}

fn absolutize(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl RunConfig {
    pub fn from_json(bytes: &[u8]) -> Result<Self, CliError> {
        serde_json::from_slice(bytes).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Reads, resolves paths, applies `overrides` and validates.
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self, CliError> {
        let bytes = fs::read(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&bytes)?;
        cfg.apply(overrides);
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let base = if base.as_os_str().is_empty() { PathBuf::from(".") } else { base };
        let base = base.canonicalize().unwrap_or(base);
        cfg.resolve_paths(&base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = o.iterations {
            self.iterations = v;
        }
        if let Some(v) = o.strategy {
            self.strategy = v;
        }
        if let Some(v) = o.k {
            self.k = v;
        }
        if let Some(v) = o.proportion {
            self.proportion = v;
        }
        if let Some(v) = o.selection {
            self.selection = v;
        }
        if let Some(v) = o.rounds {
            self.rounds = v;
        }
        if let Some(v) = &o.backend {
            self.backend = v.clone();
        }
        if let Some(v) = &o.cache_dir {
            self.cache_dir = Some(v.clone());
        }
        if let Some(v) = o.source {
            self.explanation_source = v;
        }
        if let Some(v) = &o.output_root {
            self.output_root = v.clone();
        }
    }

    fn resolve_paths(&mut self, base: &Path) {
        absolutize(base, &mut self.train);
        for p in [&mut self.validation, &mut self.test, &mut self.pool, &mut self.cache_dir]
            .into_iter()
            .flatten()
        {
            absolutize(base, p);
        }
        if let BackendSettings::Scripted { path } = &mut self.backend {
            absolutize(base, path);
        }
        absolutize(base, &mut self.output_root);
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.label_set()?;
        self.prompt_prefix()?;
        if !(self.proportion > 0.0 && self.proportion <= 1.0) {
            return Err(CliError::Config(format!("proportion {} not in (0, 1]", self.proportion)));
        }
        if self.k == 0 {
            return Err(CliError::Config("k must be at least 1".into()));
        }
        if self.rounds == 0 {
            return Err(CliError::Config("rounds must be at least 1".into()));
        }
        if self.parallelism == 0 {
            return Err(CliError::Config("parallelism must be at least 1".into()));
        }
        let mut files = vec![("train", &self.train)];
        files.extend(self.validation.iter().map(|p| ("validation", p)));
        files.extend(self.test.iter().map(|p| ("test", p)));
        if let BackendSettings::Scripted { path } = &self.backend {
            files.push(("backend script", path));
        }
        for (what, p) in files {
            if !p.is_file() {
                return Err(CliError::Config(format!("{what} file {} does not exist", p.display())));
            }
        }
        self.optimizer_config(self.seed).validate()?;
        Ok(())
    }

    pub fn label_set(&self) -> Result<LabelSet, CliError> {
        LabelSet::new(self.labels.iter()).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn prompt_prefix(&self) -> Result<PromptPrefix, CliError> {
        PromptPrefix::new(self.prefix.clone()).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn pool_path(&self) -> PathBuf {
        self.pool.clone().unwrap_or_else(|| self.output_root.join("pool.jsonl"))
    }

    pub fn optimizer_config(&self, seed: u64) -> OptimizerConfig {
        OptimizerConfig {
            max_iterations: self.iterations,
            operators: self.operators.clone(),
            selection: self.selection,
            sampler: SamplerConfig {
                strategy: self.strategy,
                k: self.k,
            },
            seed,
        }
    }

    pub fn backend(&self) -> Result<Arc<dyn Backend>, CliError> {
        Ok(match &self.backend {
            BackendSettings::Scripted { path } => Arc::new(ScriptedBackend::from_file(path)?),
            BackendSettings::Http(cfg) => Arc::new(HttpBackend::new(cfg.clone())?),
        })
    }

    /// Gateway caching under `cache_dir` (or `default_cache`).
    pub fn gateway(&self, default_cache: &Path, seed: Option<u64>) -> Result<Arc<Gateway>, CliError> {
        let dir = self.cache_dir.clone().unwrap_or_else(|| default_cache.to_path_buf());
        let cache = ExchangeCache::on_disk(&dir).map_err(|e| CliError::Store(e.to_string()))?;
        Ok(Arc::new(Gateway::new(self.backend()?).with_cache(cache).with_run_seed(seed)))
    }

    fn evaluator(&self, gateway: Arc<Gateway>) -> Result<Evaluator, CliError> {
        Ok(Evaluator::new(gateway, self.label_set()?)
            .with_parallelism(self.parallelism)
            .with_prompts(&self.meta_prompts, "label")?)
    }

    fn generator(&self, gateway: Arc<Gateway>, seed: u64) -> Result<GuidelineGenerator, CliError> {
        Ok(GuidelineGenerator::new(gateway, self.task_name.clone(), self.label_set()?)
            .with_prompts(self.meta_prompts.clone())
            .with_parallelism(self.parallelism)
            .with_seed(Some(seed)))
    }

    fn to_bytes(&self) -> Vec<u8> {
        let mut bytes = serde_json::to_vec_pretty(self).expect("config serializes");
        bytes.push(b'\n');
        bytes
    }
}

fn default_cache(cfg: &RunConfig) -> PathBuf {
    cfg.output_root.join("cache")
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::Store(format!("{}: {e}", path.display())))
}

fn json_bytes(value: &impl Serialize) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("serializable");
    bytes.push(b'\n');
    bytes
}

fn jsonl_bytes<T: Serialize>(items: &[T]) -> Vec<u8> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item).expect("serializable");
        out.push(b'\n');
    }
    out
}

fn csv_bytes(header: &[&str], rows: Vec<Vec<String>>) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory csv");
    for row in rows {
        w.write_record(&row).expect("in-memory csv");
    }
    w.into_inner().expect("in-memory csv")
}

// ---------------------------------------------------------------------------
// gen-explanations

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExplainSummary {
    pub output: PathBuf,
    pub instances: usize,
    pub explained: usize,
    pub skipped: usize,
    pub backend_calls: u64,
}

/// Writes a copy of `dataset` (default: train) with explanations filled in.
/// Nothing is written unless every backend call succeeded.
pub fn gen_explanations(
    cfg: &RunConfig,
    dataset: Option<&Path>,
    output: Option<&Path>,
    only_missing: bool,
) -> Result<ExplainSummary, CliError> {
    let input = dataset.unwrap_or(&cfg.train);
    let instances = load_dataset(input, &cfg.label_set()?)?;
    let output = match output {
        Some(p) => p.to_path_buf(),
        None => {
            let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("dataset");
            cfg.output_root.join(format!("{stem}.explained.jsonl"))
        }
    };
    let gateway = cfg.gateway(&default_cache(cfg), Some(cfg.seed))?;
    let generator = cfg.generator(gateway.clone(), cfg.seed)?;
    let (annotated, skipped) = generator.annotate(&instances, cfg.explanation_kind, only_missing)?;
    if let Some(parent) = output.parent() {
        create_dir(parent)?;
    }
    atomic_write(&output, &jsonl_bytes(&annotated))?;
    let summary = ExplainSummary {
        output,
        instances: annotated.len(),
        explained: annotated.iter().filter(|i| i.explanation.is_some()).count(),
        skipped,
        backend_calls: gateway.stats().backend_calls,
    };
    info!(
        "explained {}/{} instances ({} skipped) -> {}",
        summary.explained,
        summary.instances,
        summary.skipped,
        summary.output.display()
    );
    Ok(summary)
}

// ---------------------------------------------------------------------------
// build-pool

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolManifest {
    pub task_name: String,
    pub source: PoolSource,
    pub explanation_kind: ExplanationKind,
    pub dataset: PathBuf,
    pub dataset_digest: String,
    pub pool_digest: String,
    pub report: crate::pool::BuildReport,
}

/// Builds the guideline pool from the training set; writes the pool and a
/// `<pool>.manifest.json` next to it.
pub fn build_pool(cfg: &RunConfig, output: Option<&Path>) -> Result<PoolManifest, CliError> {
    let instances = load_dataset(&cfg.train, &cfg.label_set()?)?;
    let out = output.map(Path::to_path_buf).unwrap_or_else(|| cfg.pool_path());
    let gateway = cfg.gateway(&default_cache(cfg), Some(cfg.seed))?;
    let generator = cfg.generator(gateway, cfg.seed)?;
    let built = generator.build_pool(
        &instances,
        &BuildOptions {
            source: cfg.explanation_source,
            kind: cfg.explanation_kind,
            max_skip_fraction: cfg.max_skip_fraction,
        },
    )?;
    if let Some(parent) = out.parent() {
        create_dir(parent)?;
    }
    let bytes = jsonl_bytes(built.pool.guidelines());
    atomic_write(&out, &bytes)?;
    let manifest = PoolManifest {
        task_name: cfg.task_name.clone(),
        source: cfg.explanation_source,
        explanation_kind: cfg.explanation_kind,
        dataset: cfg.train.clone(),
        dataset_digest: file_digest(&cfg.train)?,
        pool_digest: sha256_hex(&bytes),
        report: built.report,
    };
    atomic_write(&pool_manifest_path(&out), &json_bytes(&manifest))?;
    info!(
        "pool: {} guidelines from {} instances ({} skipped, {} duplicates) -> {}",
        manifest.report.pool_size,
        manifest.report.instances,
        manifest.report.skipped(),
        manifest.report.duplicates_removed,
        out.display()
    );
    Ok(manifest)
}

pub fn pool_manifest_path(pool: &Path) -> PathBuf {
    let name = pool.file_name().and_then(|n| n.to_str()).unwrap_or("pool.jsonl");
    pool.with_file_name(format!("{name}.manifest.json"))
}

// ---------------------------------------------------------------------------
// optimize

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundSummary {
    pub round: usize,
    pub seed: u64,
    pub dir: PathBuf,
    pub completed: bool,
    pub iterations: usize,
    pub final_train_score: f64,
    #[serde(default)]
    pub best_validation: Option<(usize, f64)>,
}

/// Seed of round `r` under `root`.
pub fn round_seed(root: u64, round: usize) -> u64 {
    derive_seed(root, "round", round as u64)
}

pub fn round_dir(cfg: &RunConfig, round: usize) -> PathBuf {
    cfg.output_root.join("runs").join(format!("round-{round}"))
}

/// Runs `cfg.rounds` independent optimizations. An existing round
/// directory with the same config is resumed (a no-op once completed).
pub fn optimize(cfg: &RunConfig, stop_after: Option<usize>) -> Result<Vec<RoundSummary>, CliError> {
    let pool_path = cfg.pool_path();
    if !pool_path.is_file() {
        return Err(CliError::Config(format!(
            "pool {} does not exist; run build-pool first",
            pool_path.display()
        )));
    }
    let pool = GuidelinePool::load_jsonl(&pool_path)?;
    pool.validate_labels(&cfg.label_set()?)?;
    let mut out = Vec::with_capacity(cfg.rounds);
    for round in 0..cfg.rounds {
        let seed = round_seed(cfg.seed, round);
        let mut round_cfg = cfg.clone();
        round_cfg.seed = seed;
        round_cfg.rounds = 1;
        round_cfg.pool = Some(pool_path.clone());
        let bytes = round_cfg.to_bytes();
        let dir = round_dir(cfg, round);
        let (run, fresh) = if dir.join("manifest.json").is_file() {
            let run = RunDir::open_write(&dir)?;
            if run.manifest()?.config_digest != sha256_hex(&bytes) {
                return Err(CliError::Store(format!(
                    "{} holds a run with a different config",
                    dir.display()
                )));
            }
            (run, false)
        } else {
            let mut manifest = RunManifest::new(format!("round-{round}-{seed:016x}"), &bytes, seed);
            manifest.dataset_digests = dataset_digests(&round_cfg)?;
            manifest.backends = vec![round_cfg.backend()?.descriptor()];
            (RunDir::create(&dir, &bytes, &manifest, &pool)?, true)
        };
        let summary = execute_round(&run, &round_cfg, round, fresh, stop_after)?;
        out.push(summary);
    }
    Ok(out)
}

/// Continues the run in `dir` from its trace.
pub fn resume(dir: &Path, stop_after: Option<usize>) -> Result<RoundSummary, CliError> {
    let run = RunDir::open_write(dir)?;
    let cfg = RunConfig::from_json(&run.config_bytes()?)?;
    let round = dir
        .file_name()
        .and_then(|n| n.to_str())
        .and_then(|n| n.strip_prefix("round-"))
        .and_then(|n| n.parse().ok())
        .unwrap_or(0);
    execute_round(&run, &cfg, round, false, stop_after)
}

fn dataset_digests(cfg: &RunConfig) -> Result<BTreeMap<String, String>, CliError> {
    let mut out = BTreeMap::new();
    out.insert("train".to_string(), file_digest(&cfg.train)?);
    if let Some(p) = &cfg.validation {
        out.insert("validation".to_string(), file_digest(p)?);
    }
    if let Some(p) = &cfg.test {
        out.insert("test".to_string(), file_digest(p)?);
    }
    Ok(out)
}

fn execute_round(
    run: &RunDir,
    cfg: &RunConfig,
    round: usize,
    fresh: bool,
    stop_after: Option<usize>,
) -> Result<RoundSummary, CliError> {
    let labels = cfg.label_set()?;
    let prefix = cfg.prompt_prefix()?;
    let train = load_dataset(&cfg.train, &labels)?;
    let pool = run.pool()?;
    let gateway = cfg.gateway(&run.cache_dir(), Some(cfg.seed))?;
    let evaluator = Arc::new(cfg.evaluator(gateway.clone())?);
    let objective = SubsetObjective::new(
        evaluator.clone(),
        train,
        SubsampleSpec {
            proportion: cfg.proportion,
            seed: derive_seed(cfg.seed, "subsample", 0),
        },
        cfg.subsample_mode,
    );
    let generator = cfg.generator(gateway, cfg.seed)?;
    let optimizer = Optimizer::new(prefix.clone(), &pool, cfg.optimizer_config(cfg.seed), &objective, &generator)?;

    let outcome = if fresh {
        store::start(run, &optimizer, stop_after)?
    } else {
        match store::resume(run)? {
            Resume::Completed => {
                info!("{}: run already completed", run.root().display());
                DriveOutcome::Completed
            }
            Resume::Resumable(state) => {
                info!("{}: resuming at iteration {}", run.root().display(), state.iteration);
                store::drive(run, &optimizer, state, stop_after)?
            }
        }
    };

    let trace = run.trace()?;
    let final_train_score = match trace.last() {
        Some(step) => step.score_after,
        None => run.load_checkpoint(0)?.train_score,
    };
    let completed = outcome == DriveOutcome::Completed;
    let best_validation = match (&cfg.validation, completed) {
        (Some(path), true) => {
            let val = load_dataset(path, &labels)?;
            let picked = store::select_best(run, |c| {
                evaluator
                    .evaluate(&render_prompt(&prefix, &c.set()), &val)
                    .map(|r| r.f1_macro)
            })??;
            Some((picked.iteration, picked.validation_score.unwrap_or_default()))
        }
        _ => None,
    };
    let summary = RoundSummary {
        round,
        seed: cfg.seed,
        dir: run.root().to_path_buf(),
        completed,
        iterations: trace.len(),
        final_train_score,
        best_validation,
    };
    Ok(summary)
}

// ---------------------------------------------------------------------------
// evaluate

/// Where the evaluated prompt comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum PromptSource {
    Vanilla,
    Cot,
    /// `n` guidelines drawn uniformly from the pool; `None` means one per label.
    Random(Option<usize>),
    /// `.jsonl` of guidelines (numbered layout) or a plain-text block
    /// inserted verbatim.
    File(PathBuf),
    /// A run directory, optionally pinned to one iteration. Without an
    /// iteration the selected checkpoint is used, else the latest.
    Checkpoint(PathBuf, Option<usize>),
}

impl FromStr for PromptSource {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || CliError::Config(format!("prompt source `{s}`"));
        Ok(match s {
            "vanilla" => PromptSource::Vanilla,
            "cot" => PromptSource::Cot,
            "random" => PromptSource::Random(None),
            _ => {
                if let Some(n) = s.strip_prefix("random:") {
                    PromptSource::Random(Some(n.parse().map_err(|_| bad())?))
                } else if let Some(p) = s.strip_prefix("file:") {
                    PromptSource::File(p.into())
                } else if let Some(rest) = s.strip_prefix("checkpoint:") {
                    match rest.rsplit_once('@') {
                        Some((dir, iter)) => {
                            PromptSource::Checkpoint(dir.into(), Some(iter.parse().map_err(|_| bad())?))
                        }
                        None => PromptSource::Checkpoint(rest.into(), None),
                    }
                } else {
                    return Err(bad());
                }
            }
        })
    }
}

impl PromptSource {
    fn slug(&self) -> String {
        let stem = |p: &Path| {
            p.file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("prompt")
                .to_string()
        };
        match self {
            PromptSource::Vanilla => "vanilla".into(),
            PromptSource::Cot => "cot".into(),
            PromptSource::Random(n) => match n {
                Some(n) => format!("random-{n}"),
                None => "random".into(),
            },
            PromptSource::File(p) => format!("file-{}", stem(p)),
            PromptSource::Checkpoint(p, i) => match i {
                Some(i) => format!("checkpoint-{}-{i}", stem(p)),
                None => format!("checkpoint-{}", stem(p)),
            },
        }
    }
}

/// Guideline file entry: a full guideline record or just its text and label.
#[derive(Debug, Deserialize)]
struct GuidelineLine {
    text: String,
    #[serde(default, alias = "label")]
    source_label: Option<String>,
}

/// Resolves `source` to a prompt under `cfg`'s prefix.
pub fn resolve_prompt(cfg: &RunConfig, source: &PromptSource) -> Result<RenderedPrompt, CliError> {
    let prefix = cfg.prompt_prefix()?;
    Ok(match source {
        PromptSource::Vanilla => render_prompt(&prefix, &GuidelineSet::empty()),
        PromptSource::Cot => RenderedPrompt::custom(format!("{} {COT_INSTRUCTION}", prefix.as_str()), prefix, vec![]),
        PromptSource::Random(n) => {
            let pool = GuidelinePool::load_jsonl(&cfg.pool_path())?;
            let k = n.unwrap_or(cfg.labels.len());
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "random-baseline", k as u64));
            let picked = sample_guidelines(
                &pool,
                &SamplerConfig {
                    strategy: SamplingStrategy::NoControl,
                    k,
                },
                &mut rng,
            );
            render_prompt(&prefix, &GuidelineSet::from_dedup(picked))
        }
        PromptSource::File(path) => {
            if path.extension().and_then(|e| e.to_str()) == Some("jsonl") {
                let lines: Vec<GuidelineLine> = read_jsonl(path)?;
                let mut set = Vec::with_capacity(lines.len());
                for l in lines {
                    let label = l.source_label.unwrap_or_else(|| "unspecified".into());
                    set.push(Guideline::new(l.text, label, Provenance::Manual)?);
                }
                render_prompt(&prefix, &GuidelineSet::from_dedup(set))
            } else {
                let block = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
                let block = block.trim();
                if block.is_empty() {
                    render_prompt(&prefix, &GuidelineSet::empty())
                } else {
                    RenderedPrompt::custom(
                        format!("{} {GUIDELINE_CONNECTIVE} {block}", prefix.as_str()),
                        prefix,
                        vec![],
                    )
                }
            }
        }
        PromptSource::Checkpoint(dir, iteration) => {
            let run = RunDir::open_read(dir)?;
            let run_cfg = RunConfig::from_json(&run.config_bytes()?)?;
            let iteration = match iteration {
                Some(i) => *i,
                None => match run.selection()? {
                    Some(sel) => sel.best_iteration,
                    None => *run
                        .checkpoint_iterations()?
                        .last()
                        .ok_or_else(|| CliError::Store(format!("{}: no checkpoints", dir.display())))?,
                },
            };
            let c = run.load_checkpoint(iteration)?;
            render_prompt(&run_cfg.prompt_prefix()?, &c.set())
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRecord {
    pub source: String,
    pub prompt: String,
    pub guideline_ids: Vec<String>,
    pub dataset: PathBuf,
    pub dataset_digest: String,
    pub backend: String,
    pub report: EvalReport,
}

/// Evaluates the prompt from `source` on `dataset` (default: test, then
/// validation). Writes `report.json`, `report.csv` and `prompt.txt` under
/// `output` (default `<output_root>/eval/<source>`).
pub fn evaluate(
    cfg: &RunConfig,
    source: &PromptSource,
    dataset: Option<&Path>,
    output: Option<&Path>,
) -> Result<EvaluationRecord, CliError> {
    let labels = cfg.label_set()?;
    let dataset = match dataset {
        Some(p) => p.to_path_buf(),
        None => cfg
            .test
            .clone()
            .or_else(|| cfg.validation.clone())
            .ok_or_else(|| CliError::Config("no dataset given and no test/validation set configured".into()))?,
    };
    let instances = load_dataset(&dataset, &labels)?;
    let prompt = resolve_prompt(cfg, source)?;
    let gateway = cfg.gateway(&default_cache(cfg), Some(cfg.seed))?;
    let evaluator = cfg.evaluator(gateway.clone())?;
    let report = evaluator.evaluate(&prompt, &instances)?;
    let out = output
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.output_root.join("eval").join(source.slug()));
    create_dir(&out)?;
    let record = EvaluationRecord {
        source: source.slug(),
        prompt: prompt.text().to_string(),
        guideline_ids: prompt.guideline_ids().to_vec(),
        dataset_digest: file_digest(&dataset)?,
        dataset,
        backend: gateway.descriptor(),
        report,
    };
    atomic_write(&out.join("report.json"), &json_bytes(&record))?;
    atomic_write(&out.join("prompt.txt"), format!("{}\n", record.prompt).as_bytes())?;
    record.report.write_csv(&out.join("report.csv"))?;
    info!("{}: F1-macro {:.4} on {} instances", record.source, record.report.f1_macro, record.report.n);
    Ok(record)
}

// ---------------------------------------------------------------------------
// report

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorCount {
    pub operator: Operator,
    /// Candidates built (applicable or not).
    pub attempted: usize,
    pub applicable: usize,
    pub accepted: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub name: String,
    pub dir: PathBuf,
    pub iterations: usize,
    pub accepted_steps: usize,
    pub final_train_score: f64,
    pub best_validation: Option<(usize, f64)>,
    pub final_prompt: String,
    pub guidelines_per_label: BTreeMap<String, usize>,
    pub operators: Vec<OperatorCount>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportBundle {
    pub runs: Vec<RunReport>,
    /// Best run by validation score when every run has one, else by train score.
    pub best_run: String,
    pub best_score: f64,
    pub best_by: String,
}

/// Per-run learning curve, operator table, final prompt and label counts,
/// plus a `summary.csv`/`summary.json` across runs.
pub fn report(run_dirs: &[PathBuf], output: &Path) -> Result<ReportBundle, CliError> {
    if run_dirs.is_empty() {
        return Err(CliError::Config("no run directories given".into()));
    }
    create_dir(output)?;
    let mut runs = Vec::with_capacity(run_dirs.len());
    let mut used = std::collections::HashSet::new();
    for (i, dir) in run_dirs.iter().enumerate() {
        let mut name = dir
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or("run")
            .to_string();
        if !used.insert(name.clone()) {
            name = format!("{name}-{i}");
            used.insert(name.clone());
        }
        runs.push(report_run(dir, &name, &output.join(&name))?);
    }
    let all_validated = runs.iter().all(|r| r.best_validation.is_some());
    let score = |r: &RunReport| {
        if all_validated {
            r.best_validation.map(|v| v.1).unwrap_or_default()
        } else {
            r.final_train_score
        }
    };
    let best = runs
        .iter()
        .fold(&runs[0], |best, r| if score(r) > score(best) { r } else { best });
    let bundle = ReportBundle {
        best_run: best.name.clone(),
        best_score: score(best),
        best_by: if all_validated { "validation" } else { "train" }.into(),
        runs: runs.clone(),
    };
    let rows = runs
        .iter()
        .map(|r| {
            vec![
                r.name.clone(),
                r.iterations.to_string(),
                r.accepted_steps.to_string(),
                r.final_train_score.to_string(),
                r.best_validation.map(|v| v.0.to_string()).unwrap_or_default(),
                r.best_validation.map(|v| v.1.to_string()).unwrap_or_default(),
            ]
        })
        .collect();
    atomic_write(
        &output.join("summary.csv"),
        &csv_bytes(
            &[
                "run",
                "iterations",
                "accepted_steps",
                "final_train_score",
                "best_validation_iteration",
                "best_validation_score",
            ],
            rows,
        ),
    )?;
    atomic_write(&output.join("summary.json"), &json_bytes(&bundle))?;
    Ok(bundle)
}

fn report_run(dir: &Path, name: &str, out: &Path) -> Result<RunReport, CliError> {
    let run = RunDir::open_read(dir)?;
    let cfg = RunConfig::from_json(&run.config_bytes()?)?;
    let prefix = cfg.prompt_prefix()?;
    let trace = run.trace()?;
    let selection = run.selection()?;
    let validation: BTreeMap<usize, f64> = selection
        .as_ref()
        .map(|s| s.scores.iter().copied().collect())
        .unwrap_or_default();
    create_dir(out)?;

    let curve = trace
        .iter()
        .map(|s| {
            vec![
                s.iteration.to_string(),
                s.score_after.to_string(),
                s.accepted.to_string(),
                validation.get(&s.iteration).map(|v| v.to_string()).unwrap_or_default(),
            ]
        })
        .collect();
    atomic_write(
        &out.join("learning_curve.csv"),
        &csv_bytes(&["iteration", "train_score", "accepted", "validation_score"], curve),
    )?;

    let mut ops: Vec<OperatorCount> = Operator::ALL
        .iter()
        .map(|&operator| OperatorCount {
            operator,
            attempted: 0,
            applicable: 0,
            accepted: 0,
        })
        .collect();
    for c in trace.iter().flat_map(|s| &s.candidates) {
        let row = &mut ops[c.operator as usize];
        row.attempted += 1;
        row.applicable += usize::from(c.applicable);
        row.accepted += usize::from(c.accepted);
    }
    let total_accepted: usize = ops.iter().map(|o| o.accepted).sum();
    let op_rows = ops
        .iter()
        .map(|o| {
            let share = if total_accepted == 0 {
                0.0
            } else {
                o.accepted as f64 / total_accepted as f64
            };
            vec![
                o.operator.to_string(),
                o.attempted.to_string(),
                o.applicable.to_string(),
                o.accepted.to_string(),
                share.to_string(),
            ]
        })
        .collect();
    atomic_write(
        &out.join("operators.csv"),
        &csv_bytes(&["operator", "attempted", "applicable", "accepted", "accepted_share"], op_rows),
    )?;

    let final_set = trace
        .iter()
        .rev()
        .find_map(|s| s.accepted_set.clone())
        .map(GuidelineSet::from_dedup)
        .unwrap_or_else(GuidelineSet::empty);
    let prompt = render_prompt(&prefix, &final_set);
    atomic_write(&out.join("final_prompt.txt"), format!("{}\n", prompt.text()).as_bytes())?;
    atomic_write(&out.join("final_prompt.md"), final_prompt_markdown(&prefix, &final_set).as_bytes())?;

    let mut per_label: BTreeMap<String, usize> = cfg.labels.iter().map(|l| (crate::domain::canonical(l), 0)).collect();
    for (label, n) in final_set.count_by_label() {
        per_label.insert(label, n);
    }
    atomic_write(
        &out.join("labels.csv"),
        &csv_bytes(
            &["label", "guidelines"],
            per_label.iter().map(|(l, n)| vec![l.clone(), n.to_string()]).collect(),
        ),
    )?;

    let final_train_score = match trace.last() {
        Some(s) => s.score_after,
        None => run.load_checkpoint(0)?.train_score,
    };
    if trace.is_empty() && cfg.iterations > 0 {
        warn!("{}: trace is empty", dir.display());
    }
    Ok(RunReport {
        name: name.to_string(),
        dir: dir.to_path_buf(),
        iterations: trace.len(),
        accepted_steps: trace.iter().filter(|s| s.accepted).count(),
        final_train_score,
        best_validation: selection.map(|s| (s.best_iteration, s.best_validation_score)),
        final_prompt: prompt.text().to_string(),
        guidelines_per_label: per_label,
        operators: ops,
    })
}

fn final_prompt_markdown(prefix: &PromptPrefix, set: &GuidelineSet) -> String {
    let mut md = format!("# Final prompt\n\n{}\n", prefix.as_str());
    if !set.is_empty() {
        md.push_str(&format!("\n{GUIDELINE_CONNECTIVE}\n\n"));
        for (i, g) in set.iter().enumerate() {
            md.push_str(&format!("{}. **{}**: {}\n", i + 1, g.source_label, g.text));
        }
    }
    md
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prompt_sources_parse() {
        assert_eq!("vanilla".parse::<PromptSource>().unwrap(), PromptSource::Vanilla);
        assert_eq!("random:4".parse::<PromptSource>().unwrap(), PromptSource::Random(Some(4)));
        assert_eq!(
            "checkpoint:runs/round-0@12".parse::<PromptSource>().unwrap(),
            PromptSource::Checkpoint("runs/round-0".into(), Some(12))
        );
        assert!("random:x".parse::<PromptSource>().is_err());
        assert!("bogus".parse::<PromptSource>().is_err());
    }

    #[test]
    fn backend_flag_parses() {
        assert_eq!(
            "scripted:a/b.json".parse::<BackendSettings>().unwrap(),
            BackendSettings::Scripted { path: "a/b.json".into() }
        );
        match "http:qwen@http://localhost:8000/v1".parse::<BackendSettings>().unwrap() {
            BackendSettings::Http(h) => {
                assert_eq!(h.model, "qwen");
                assert_eq!(h.base_url, "http://localhost:8000/v1");
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!("ftp:x".parse::<BackendSettings>().is_err());
    }

    #[test]
    fn config_defaults() {
        let cfg = RunConfig::from_json(
            br#"{"task_name":"t","labels":["a","b"],"prefix":"P","train":"t.jsonl",
                 "backend":{"kind":"scripted","path":"s.json"}}"#,
        )
        .unwrap();
        assert_eq!(cfg.k, 3);
        assert_eq!(cfg.iterations, 300);
        assert_eq!(cfg.proportion, 1.0);
        assert_eq!(cfg.operators, Operator::ALL.to_vec());
        assert_eq!(cfg.selection, SelectionMode::Argmax);
    }

    #[test]
    fn exit_codes_are_distinct() {
        let codes = [
            CliError::Config(String::new()).exit_code(),
            CliError::Data(String::new()).exit_code(),
            CliError::Backend(String::new()).exit_code(),
            CliError::Store(String::new()).exit_code(),
        ];
        let unique: std::collections::HashSet<_> = codes.iter().collect();
        assert_eq!(unique.len(), 4);
        assert!(codes.iter().all(|&c| c != 0));
    }

    #[test]
    fn round_seeds_differ() {
        let seeds: std::collections::HashSet<_> = (0..5).map(|r| round_seed(11, r)).collect();
        assert_eq!(seeds.len(), 5);
    }
}
