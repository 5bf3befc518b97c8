mod common;

use std::fs;
use std::path::Path;
use std::process::Command;

use common::Fixture;
use guideopt::commands::{self, Overrides, PromptSource, RunConfig};
use guideopt::domain::{read_jsonl, GuidelinePool, Instance};
use guideopt::store::RunDir;

fn load(f: &Fixture) -> RunConfig {
    RunConfig::load(&f.config, &Overrides::default()).unwrap()
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_guideopt"))
}

#[test]
fn build_pool_dedups_to_twelve() {
    let f = Fixture::new(0);
    let manifest = commands::build_pool(&load(&f), None).unwrap();
    assert_eq!(manifest.report.processed, 30);
    assert_eq!(manifest.report.pool_size, 12);
    assert_eq!(manifest.report.duplicates_removed, 18);
    let pool = GuidelinePool::load_jsonl(&f.out().join("pool.jsonl")).unwrap();
    assert_eq!(pool.len(), 12);
    assert!(f.out().join("pool.jsonl.manifest.json").is_file());
}

#[test]
fn llm_source_generates_explanations_first() {
    let f = Fixture::with(0, serde_json::json!({"explanation_source": "llm"}));
    let manifest = commands::build_pool(&load(&f), None).unwrap();
    // One generated explanation per instance, each turned into its own guideline.
    assert_eq!(manifest.report.pool_size, 30);
    let pool = GuidelinePool::load_jsonl(&f.out().join("pool.jsonl")).unwrap();
    assert!(pool.guidelines().iter().all(|g| g.text.starts_with("Sample ")));
}

#[test]
fn gen_explanations_and_only_missing() {
    let f = Fixture::new(0);
    let cfg = load(&f);
    let bare = f.root().join("bare.jsonl");
    guideopt::domain::write_jsonl(&bare, &common::dataset("x", 2, false)).unwrap();
    let s = commands::gen_explanations(&cfg, Some(&bare), None, false).unwrap();
    assert_eq!((s.instances, s.explained, s.skipped), (6, 6, 0));
    assert_eq!(s.backend_calls, 6);
    let annotated: Vec<Instance> = read_jsonl(&s.output).unwrap();
    assert_eq!(annotated[0].explanation.as_deref(), Some("Sample 00 is tagged alpha."));

    let again = commands::gen_explanations(&cfg, Some(&s.output), Some(&f.root().join("o.jsonl")), true).unwrap();
    assert_eq!(again.backend_calls, 0);
}

#[test]
fn gen_explanations_unreachable_backend_leaves_no_file() {
    let f = Fixture::with(
        0,
        serde_json::json!({"backend": {"kind": "http", "base_url": "http://127.0.0.1:9", "model": "m", "timeout_secs": 2}}),
    );
    let out = f.root().join("explained.jsonl");
    let status = bin()
        .args(["gen-explanations", "--config"])
        .arg(&f.config)
        .arg("--output")
        .arg(&out)
        .env("OPENAI_API_KEY", "")
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(4));
    assert!(!out.exists());
    let leftovers: Vec<_> = fs::read_dir(f.root())
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().contains("explained"))
        .collect();
    assert!(leftovers.is_empty());
}

#[test]
fn optimize_rounds_get_distinct_seeds() {
    let f = Fixture::with(5, serde_json::json!({"rounds": 3}));
    let cfg = load(&f);
    commands::build_pool(&cfg, None).unwrap();
    let rounds = commands::optimize(&cfg, None).unwrap();
    assert_eq!(rounds.len(), 3);
    let seeds: std::collections::HashSet<_> = rounds.iter().map(|r| r.seed).collect();
    assert_eq!(seeds.len(), 3);
    for r in &rounds {
        assert!(r.completed);
        assert_eq!(r.iterations, 5);
        assert!(r.best_validation.is_some());
        let run = RunDir::open_read(&r.dir).unwrap();
        assert_eq!(run.manifest().unwrap().root_seed, r.seed);
    }
}

#[test]
fn zero_iterations_is_vanilla_only() {
    let f = Fixture::new(0);
    let cfg = load(&f);
    commands::build_pool(&cfg, None).unwrap();
    let r = &commands::optimize(&cfg, None).unwrap()[0];
    assert_eq!(r.iterations, 0);
    assert_eq!(r.final_train_score, 0.0);
    let run = RunDir::open_read(&r.dir).unwrap();
    assert_eq!(run.checkpoint_iterations().unwrap(), vec![0]);
    let vanilla = commands::evaluate(&cfg, &PromptSource::Vanilla, Some(&cfg.train), None).unwrap();
    assert_eq!(vanilla.report.f1_macro, r.final_train_score);
}

#[test]
fn optimize_is_idempotent_and_resumable() {
    let f = Fixture::new(12);
    let cfg = load(&f);
    commands::build_pool(&cfg, None).unwrap();
    let partial = commands::optimize(&cfg, Some(4)).unwrap();
    assert!(!partial[0].completed);
    assert_eq!(partial[0].iterations, 4);
    let done = commands::resume(&partial[0].dir, None).unwrap();
    assert!(done.completed);
    assert_eq!(done.iterations, 12);
    let trace = fs::read(partial[0].dir.join("trace.jsonl")).unwrap();
    // Running again with the same config is a no-op.
    let again = commands::optimize(&cfg, None).unwrap();
    assert_eq!(again[0].iterations, 12);
    assert_eq!(fs::read(partial[0].dir.join("trace.jsonl")).unwrap(), trace);
    // A changed config must not silently reuse the directory.
    let mut other = cfg.clone();
    other.k = 2;
    assert!(matches!(commands::optimize(&other, None), Err(commands::CliError::Store(_))));
}

#[test]
fn checkpoint_prompt_evaluates_out_of_distribution() {
    let f = Fixture::new(30);
    let cfg = load(&f);
    commands::build_pool(&cfg, None).unwrap();
    let r = &commands::optimize(&cfg, None).unwrap()[0];
    assert_eq!(r.final_train_score, 1.0);
    let other = f.root().join("other.jsonl");
    guideopt::domain::write_jsonl(&other, &common::dataset("ood", 3, false)).unwrap();
    let src = PromptSource::Checkpoint(r.dir.clone(), None);
    let rec = commands::evaluate(&cfg, &src, Some(&other), None).unwrap();
    assert_eq!(rec.report.n, 9);
    assert_eq!(rec.report.f1_macro, 1.0);
    assert!(f.out().join("eval").join("checkpoint-round-0").join("report.csv").is_file());
}

#[test]
fn random_baseline_is_reproducible() {
    let f = Fixture::new(0);
    let cfg = load(&f);
    commands::build_pool(&cfg, None).unwrap();
    let a = commands::resolve_prompt(&cfg, &PromptSource::Random(None)).unwrap();
    let b = commands::resolve_prompt(&cfg, &PromptSource::Random(None)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.guideline_ids().len(), 3);
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records().map(|x| x.unwrap().iter().map(str::to_string).collect()).collect()
}

#[test]
fn report_bundle() {
    let f = Fixture::with(20, serde_json::json!({"rounds": 2, "operators": ["add"]}));
    let cfg = load(&f);
    commands::build_pool(&cfg, None).unwrap();
    let rounds = commands::optimize(&cfg, None).unwrap();
    let dirs: Vec<_> = rounds.iter().map(|r| r.dir.clone()).collect();
    let out = f.root().join("report");
    let bundle = commands::report(&dirs, &out).unwrap();
    assert_eq!(bundle.runs.len(), 2);
    assert_eq!(bundle.best_by, "validation");

    let curve = csv_rows(&out.join("round-0").join("learning_curve.csv"));
    assert_eq!(curve.len(), 20);
    let ops = csv_rows(&out.join("round-0").join("operators.csv"));
    let accepted_total: usize = ops.iter().map(|r| r[3].parse::<usize>().unwrap()).sum();
    let add = ops.iter().find(|r| r[0] == "add").unwrap();
    assert_eq!(add[3].parse::<usize>().unwrap(), accepted_total);
    assert!(accepted_total > 0);

    let txt = fs::read_to_string(out.join("round-0").join("final_prompt.txt")).unwrap();
    assert!(txt.starts_with(common::PREFIX));
    assert!(out.join("round-0").join("final_prompt.md").is_file());
    assert_eq!(csv_rows(&out.join("round-0").join("labels.csv")).len(), 3);
    assert_eq!(csv_rows(&out.join("summary.csv")).len(), 2);
}

#[test]
fn cli_end_to_end() {
    let f = Fixture::new(6);
    let run = |args: &[&str]| {
        let o = bin().args(args).arg("--config").arg(&f.config).output().unwrap();
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        String::from_utf8(o.stdout).unwrap()
    };
    run(&["build-pool"]);
    let stdout = run(&["optimize", "--strategy", "label-control", "--k", "3", "--selection", "sequential"]);
    let summary: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(summary["iterations"], 6);
    run(&["evaluate", "--prompt", "cot"]);
    assert!(f.out().join("eval").join("cot").join("report.json").is_file());
}

#[test]
fn cli_exit_codes() {
    let f = Fixture::new(0);
    let code = |args: &[&str]| bin().args(args).output().unwrap().status.code();
    let config = f.config.to_str().unwrap();
    assert_eq!(code(&["optimize", "--config", config, "--proportion", "0"]), Some(2));
    assert_eq!(code(&["optimize", "--config", config]), Some(2));
    let bad = f.root().join("bad.jsonl");
    fs::write(&bad, "{\"id\":\"x\",\"text\":\"t\",\"label\":\"delta\"}\n").unwrap();
    assert_eq!(
        code(&["evaluate", "--config", config, "--prompt", "vanilla", "--dataset", bad.to_str().unwrap()]),
        Some(3)
    );
    assert_eq!(code(&["optimize", "--resume", f.root().to_str().unwrap()]), Some(5));
}
