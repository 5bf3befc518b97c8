//! Run directories: manifest, config, pool, trace, checkpoints and cache.
//!
//! ```text
//! <run>/manifest.json
//! <run>/config.json
//! <run>/pool.jsonl
//! <run>/trace.jsonl          one StepOutcome per line, append-only
//! <run>/checkpoints/iter-<n>.json
//! <run>/selection.json       written by select_best
//! <run>/cache/
//! <run>/.lock
//! ```
//!
//! Resume rebuilds the search state from the trace alone: the last accepted
//! set, the last score and the recorded RNG stream positions.

use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::domain::{DomainError, Guideline, GuidelinePool, GuidelineSet};
use crate::optimizer::{OptimizeError, Optimizer, RngStreams, SearchState, StepOutcome, StreamPositions};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("corrupt trace at line {line}: {message}")]
    CorruptTrace { line: usize, message: String },
    #[error("checkpoint for iteration {0} already exists")]
    Conflict(usize),
    #[error("run directory {0} is locked by another writer")]
    Locked(PathBuf),
    #[error("not a run directory: {0}")]
    NotARun(PathBuf),
    #[error("stored config does not match manifest digest")]
    ConfigDigestMismatch,
    #[error("run has no checkpoints")]
    NoCheckpoints,
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Optimize(#[from] OptimizeError),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_digest(path: &Path) -> Result<String, StoreError> {
    Ok(sha256_hex(&fs::read(path).map_err(io_err(path))?))
}

/// Writes `bytes` to `dest` through a sibling temp file and a rename.
pub fn atomic_write(dest: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let tmp = temp_sibling(dest);
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, dest).map_err(io_err(dest))
}

fn temp_sibling(dest: &Path) -> PathBuf {
    let name = dest.file_name().and_then(|n| n.to_str()).unwrap_or("file");
    dest.with_file_name(format!(".{name}.tmp"))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, StoreError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    serde_json::from_slice(&bytes).map_err(|source| StoreError::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn to_pretty(value: &impl Serialize) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("serializable");
    bytes.push(b'\n');
    bytes
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Completed,
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    /// Seconds since the Unix epoch.
    pub created_at: u64,
    pub config_digest: String,
    /// Logical name (`train`, `validation`, ...) to sha256 of the file.
    pub dataset_digests: std::collections::BTreeMap<String, String>,
    pub backends: Vec<String>,
    pub root_seed: u64,
    pub status: RunStatus,
}

impl RunManifest {
    pub fn new(run_id: impl Into<String>, config_bytes: &[u8], root_seed: u64) -> Self {
        Self {
            run_id: run_id.into(),
            created_at: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            config_digest: sha256_hex(config_bytes),
            dataset_digests: Default::default(),
            backends: Vec::new(),
            root_seed,
            status: RunStatus::Running,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub iteration: usize,
    pub guidelines: Vec<Guideline>,
    pub prompt: String,
    pub train_score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation_score: Option<f64>,
}

impl Checkpoint {
    pub fn set(&self) -> GuidelineSet {
        GuidelineSet::from_dedup(self.guidelines.clone())
    }
}

/// A checkpoint written to its temp file but not yet renamed into place.
#[derive(Debug)]
pub struct StagedCheckpoint {
    tmp: PathBuf,
    dest: PathBuf,
}

impl StagedCheckpoint {
    pub fn commit(self) -> Result<(), StoreError> {
        fs::rename(&self.tmp, &self.dest).map_err(io_err(&self.dest))
    }
}

/// Validation scores per checkpoint and the chosen one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub best_iteration: usize,
    pub best_validation_score: f64,
    pub scores: Vec<(usize, f64)>,
}

#[derive(Debug)]
struct LockGuard(PathBuf);

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

/// Handle on one run directory. Writers hold the lock file for their
/// lifetime; readers take no lock.
#[derive(Debug)]
pub struct RunDir {
    root: PathBuf,
    lock: Option<LockGuard>,
}

impl RunDir {
    /// Creates a new run directory and opens it for writing.
    pub fn create(root: &Path, config_bytes: &[u8], manifest: &RunManifest, pool: &GuidelinePool) -> Result<Self, StoreError> {
        fs::create_dir_all(root.join("checkpoints")).map_err(io_err(root))?;
        fs::create_dir_all(root.join("cache")).map_err(io_err(root))?;
        let run = Self {
            root: root.to_path_buf(),
            lock: Some(Self::acquire(root)?),
        };
        atomic_write(&run.config_path(), config_bytes)?;
        pool.write_jsonl(&run.pool_path())?;
        let trace = run.trace_path();
        File::create(&trace).map_err(io_err(&trace))?;
        run.write_manifest(manifest)?;
        Ok(run)
    }

    pub fn open_write(root: &Path) -> Result<Self, StoreError> {
        let mut run = Self::open_read(root)?;
        run.lock = Some(Self::acquire(root)?);
        Ok(run)
    }

    pub fn open_read(root: &Path) -> Result<Self, StoreError> {
        if !root.join("manifest.json").is_file() {
            return Err(StoreError::NotARun(root.to_path_buf()));
        }
        Ok(Self {
            root: root.to_path_buf(),
            lock: None,
        })
    }

    fn acquire(root: &Path) -> Result<LockGuard, StoreError> {
        let path = root.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(LockGuard(path))
            }
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => Err(StoreError::Locked(root.to_path_buf())),
            Err(e) => Err(StoreError::Io { path, source: e }),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn pool_path(&self) -> PathBuf {
        self.root.join("pool.jsonl")
    }

    pub fn trace_path(&self) -> PathBuf {
        self.root.join("trace.jsonl")
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.root.join("cache")
    }

    pub fn selection_path(&self) -> PathBuf {
        self.root.join("selection.json")
    }

    fn checkpoint_path(&self, iteration: usize) -> PathBuf {
        self.root.join("checkpoints").join(format!("iter-{iteration}.json"))
    }

    pub fn manifest(&self) -> Result<RunManifest, StoreError> {
        read_json(&self.manifest_path())
    }

    pub fn write_manifest(&self, manifest: &RunManifest) -> Result<(), StoreError> {
        atomic_write(&self.manifest_path(), &to_pretty(manifest))
    }

    pub fn set_status(&self, status: RunStatus) -> Result<(), StoreError> {
        let mut m = self.manifest()?;
        m.status = status;
        self.write_manifest(&m)
    }

    /// Stored config bytes, checked against the manifest digest.
    pub fn config_bytes(&self) -> Result<Vec<u8>, StoreError> {
        let path = self.config_path();
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        if sha256_hex(&bytes) != self.manifest()?.config_digest {
            return Err(StoreError::ConfigDigestMismatch);
        }
        Ok(bytes)
    }

    pub fn pool(&self) -> Result<GuidelinePool, StoreError> {
        Ok(GuidelinePool::load_jsonl(&self.pool_path())?)
    }

    /// Writes the checkpoint's temp file; [`StagedCheckpoint::commit`]
    /// makes it visible.
    pub fn stage_checkpoint(&self, checkpoint: &Checkpoint) -> Result<StagedCheckpoint, StoreError> {
        let dest = self.checkpoint_path(checkpoint.iteration);
        if dest.exists() {
            return Err(StoreError::Conflict(checkpoint.iteration));
        }
        let tmp = temp_sibling(&dest);
        fs::write(&tmp, to_pretty(checkpoint)).map_err(io_err(&tmp))?;
        Ok(StagedCheckpoint { tmp, dest })
    }

    pub fn save_checkpoint(&self, checkpoint: &Checkpoint) -> Result<(), StoreError> {
        self.stage_checkpoint(checkpoint)?.commit()
    }

    pub fn load_checkpoint(&self, iteration: usize) -> Result<Checkpoint, StoreError> {
        read_json(&self.checkpoint_path(iteration))
    }

    /// Iterations with a committed checkpoint, ascending.
    pub fn checkpoint_iterations(&self) -> Result<Vec<usize>, StoreError> {
        let dir = self.root.join("checkpoints");
        let mut out = Vec::new();
        for entry in fs::read_dir(&dir).map_err(io_err(&dir))? {
            let name = entry.map_err(io_err(&dir))?.file_name();
            let name = name.to_string_lossy();
            if let Some(n) = name.strip_prefix("iter-").and_then(|s| s.strip_suffix(".json")) {
                if let Ok(n) = n.parse() {
                    out.push(n);
                }
            }
        }
        out.sort_unstable();
        Ok(out)
    }

    pub fn checkpoints(&self) -> Result<Vec<Checkpoint>, StoreError> {
        self.checkpoint_iterations()?
            .into_iter()
            .map(|i| self.load_checkpoint(i))
            .collect()
    }

    pub fn trace_writer(&self) -> Result<TraceWriter, StoreError> {
        let path = self.trace_path();
        let file = OpenOptions::new().append(true).create(true).open(&path).map_err(io_err(&path))?;
        Ok(TraceWriter { file, path })
    }

    pub fn trace(&self) -> Result<Vec<StepOutcome>, StoreError> {
        read_trace(&self.trace_path())
    }

    pub fn selection(&self) -> Result<Option<Selection>, StoreError> {
        let path = self.selection_path();
        if path.exists() {
            read_json(&path).map(Some)
        } else {
            Ok(None)
        }
    }

    pub fn is_writer(&self) -> bool {
        self.lock.is_some()
    }
}

pub struct TraceWriter {
    file: File,
    path: PathBuf,
}

impl TraceWriter {
    pub fn append(&mut self, step: &StepOutcome) -> Result<(), StoreError> {
        let mut line = serde_json::to_vec(step).expect("serializable");
        line.push(b'\n');
        self.file.write_all(&line).map_err(io_err(&self.path))?;
        self.file.flush().map_err(io_err(&self.path))
    }
}

/// Parses a trace file. Lines must be complete, newline-terminated and
/// numbered 1, 2, 3, ...
pub fn read_trace(path: &Path) -> Result<Vec<StepOutcome>, StoreError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut reader = BufReader::new(file);
    let mut out = Vec::new();
    let mut buf = String::new();
    let mut line = 0;
    loop {
        buf.clear();
        if reader.read_line(&mut buf).map_err(io_err(path))? == 0 {
            break;
        }
        line += 1;
        if !buf.ends_with('\n') {
            return Err(StoreError::CorruptTrace {
                line,
                message: "truncated line".into(),
            });
        }
        let step: StepOutcome = serde_json::from_str(buf.trim_end()).map_err(|e| StoreError::CorruptTrace {
            line,
            message: e.to_string(),
        })?;
        if step.iteration != line {
            return Err(StoreError::CorruptTrace {
                line,
                message: format!("expected iteration {line}, found {}", step.iteration),
            });
        }
        out.push(step);
    }
    Ok(out)
}

/// Search state after replaying `trace` on top of the initial score.
pub fn state_from_trace(seed: u64, initial_score: f64, trace: &[StepOutcome]) -> SearchState {
    let mut set = GuidelineSet::empty();
    let mut score = initial_score;
    let mut positions = StreamPositions::default();
    for step in trace {
        if let Some(accepted) = &step.accepted_set {
            set = GuidelineSet::from_dedup(accepted.clone());
        }
        score = step.score_after;
        positions = step.rng;
    }
    SearchState {
        iteration: trace.len(),
        set,
        score,
        rng: RngStreams::restore(seed, &positions),
    }
}

#[derive(Debug)]
pub enum Resume {
    /// The run already finished; nothing to do.
    Completed,
    Resumable(SearchState),
}

/// Rebuilds the optimizer state of an unfinished run.
pub fn resume(run: &RunDir) -> Result<Resume, StoreError> {
    let manifest = run.manifest()?;
    if manifest.status == RunStatus::Completed {
        return Ok(Resume::Completed);
    }
    let initial = run.load_checkpoint(0)?;
    let trace = run.trace()?;
    Ok(Resume::Resumable(state_from_trace(
        manifest.root_seed,
        initial.train_score,
        &trace,
    )))
}

fn checkpoint_for(optimizer: &Optimizer<'_>, state: &SearchState) -> Checkpoint {
    Checkpoint {
        iteration: state.iteration,
        guidelines: state.set.guidelines().to_vec(),
        prompt: optimizer.render(&state.set).text().to_string(),
        train_score: state.score,
        validation_score: None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DriveOutcome {
    Completed,
    /// Stopped early at the given iteration; resumable.
    Stopped(usize),
}

/// Starts a fresh run: scores the empty set, writes `iter-0`, then drives.
pub fn start(run: &RunDir, optimizer: &Optimizer<'_>, stop_after: Option<usize>) -> Result<DriveOutcome, StoreError> {
    let state = match optimizer.initial_state() {
        Ok(s) => s,
        Err(e) => {
            run.set_status(RunStatus::Aborted)?;
            return Err(e.into());
        }
    };
    run.save_checkpoint(&checkpoint_for(optimizer, &state))?;
    drive(run, optimizer, state, stop_after)
}

/// Steps until the iteration budget (or `stop_after`) is reached, appending
/// each step to the trace and checkpointing every accepted set. Errors mark
/// the run aborted.
pub fn drive(
    run: &RunDir,
    optimizer: &Optimizer<'_>,
    mut state: SearchState,
    stop_after: Option<usize>,
) -> Result<DriveOutcome, StoreError> {
    let max = optimizer.config().max_iterations;
    let until = stop_after.map_or(max, |s| s.min(max));
    let mut writer = run.trace_writer()?;
    let result = (|| {
        ensure_checkpoints(run, optimizer)?;
        while state.iteration < until {
            let step = optimizer.step(&mut state)?;
            writer.append(&step)?;
            if step.accepted {
                run.save_checkpoint(&checkpoint_for(optimizer, &state))?;
            }
        }
        Ok::<_, StoreError>(())
    })();
    match result {
        Ok(()) if state.iteration >= max => {
            run.set_status(RunStatus::Completed)?;
            Ok(DriveOutcome::Completed)
        }
        Ok(()) => {
            run.set_status(RunStatus::Running)?;
            Ok(DriveOutcome::Stopped(state.iteration))
        }
        Err(e) => {
            run.set_status(RunStatus::Aborted)?;
            Err(e)
        }
    }
}

/// After a crash between a trace append and its checkpoint, the latest
/// accepted set may lack a checkpoint; write it.
fn ensure_checkpoints(run: &RunDir, optimizer: &Optimizer<'_>) -> Result<(), StoreError> {
    let trace = run.trace()?;
    if let Some(last) = trace.iter().rev().find(|s| s.accepted) {
        if !run.checkpoint_path(last.iteration).exists() {
            let set = GuidelineSet::from_dedup(last.accepted_set.clone().unwrap_or_default());
            run.save_checkpoint(&Checkpoint {
                iteration: last.iteration,
                guidelines: set.guidelines().to_vec(),
                prompt: optimizer.render(&set).text().to_string(),
                train_score: last.score_after,
                validation_score: None,
            })?;
        }
    }
    Ok(())
}

/// Scores every checkpoint with `validate` and returns the best (earliest on
/// ties). Writes `selection.json` when the run is open for writing.
pub fn select_best<E>(
    run: &RunDir,
    mut validate: impl FnMut(&Checkpoint) -> Result<f64, E>,
) -> Result<Result<Checkpoint, E>, StoreError> {
    let checkpoints = run.checkpoints()?;
    if checkpoints.is_empty() {
        return Err(StoreError::NoCheckpoints);
    }
    let mut scores = Vec::with_capacity(checkpoints.len());
    for c in &checkpoints {
        match validate(c) {
            Ok(s) => scores.push(s),
            Err(e) => return Ok(Err(e)),
        }
    }
    let (best_idx, _) = scores
        .iter()
        .enumerate()
        .fold((0, scores[0]), |acc, (i, &s)| if s > acc.1 { (i, s) } else { acc });
    let mut best = checkpoints[best_idx].clone();
    best.validation_score = Some(scores[best_idx]);
    let selection = Selection {
        best_iteration: best.iteration,
        best_validation_score: scores[best_idx],
        scores: checkpoints.iter().map(|c| c.iteration).zip(scores).collect(),
    };
    atomic_write(&run.selection_path(), &to_pretty(&selection))?;
    Ok(Ok(best))
}

/// Iterations whose recorded score does not reproduce.
pub fn verify_replay(run: &RunDir, optimizer: &Optimizer<'_>) -> Result<Vec<usize>, StoreError> {
    Ok(optimizer.replay_mismatches(&run.trace()?)?)
}
