use std::fs;
use std::path::Path;

use conet::experiment::{
    compare_runs, read_metrics, replay, run_plan, AnnealTrigger, Plan, RunData, RunLock, RunManifest, METRICS_FILE,
};
use conet::intervene::{AnnealParams, ForgetParams};
use conet::{Error, Execution, TrainConfig, UpdateMode};

fn tiny(seed: u64) -> TrainConfig {
    TrainConfig {
        n_nodes: 60,
        out_degree: 5,
        n_tasks: 8,
        n_rollout: 24,
        l_max: 10,
        total_steps: 24,
        eval_every: 4,
        eval_samples: 16,
        snapshot_every: 6,
        learning_rate: 0.4,
        master_seed: seed,
        ..TrainConfig::default()
    }
}

fn bytes(dir: &Path, rel: &str) -> Vec<u8> {
    fs::read(dir.join(rel)).unwrap()
}

/// Marks a finished run as interrupted right after `ckpt`.
fn rewind(dir: &Path, ckpt: &str) {
    let mut m = RunManifest::load(dir).unwrap();
    m.complete = false;
    m.last_checkpoint = Some(ckpt.to_string());
    m.save(dir).unwrap();
}

#[test]
fn same_seed_gives_identical_artifacts() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = tiny(1);
    let ma = run_plan(a.path(), &cfg, &Plan::baseline(24)).unwrap();
    let mb = run_plan(b.path(), &cfg, &Plan::baseline(24)).unwrap();
    assert_eq!(ma.files, mb.files);
    assert!(ma.verify(a.path()).unwrap().is_empty());
}

#[test]
fn different_seeds_differ() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_plan(a.path(), &tiny(1), &Plan::baseline(12)).unwrap();
    run_plan(b.path(), &tiny(2), &Plan::baseline(12)).unwrap();
    assert_ne!(bytes(a.path(), METRICS_FILE), bytes(b.path(), METRICS_FILE));
}

#[test]
fn parallel_and_sequential_execution_agree() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let par = tiny(3);
    let seq = TrainConfig { execution: Execution::Sequential, ..par.clone() };
    run_plan(a.path(), &par, &Plan::baseline(12)).unwrap();
    run_plan(b.path(), &seq, &Plan::baseline(12)).unwrap();
    assert_eq!(bytes(a.path(), METRICS_FILE), bytes(b.path(), METRICS_FILE));
}

#[test]
fn resume_from_checkpoint_matches_straight_run() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = tiny(4);
    let plan = Plan::baseline(24);
    let straight = run_plan(a.path(), &cfg, &plan).unwrap();
    run_plan(b.path(), &cfg, &plan).unwrap();
    rewind(b.path(), "snapshots/policy-000012.ckpt");
    let resumed = run_plan(b.path(), &cfg, &plan).unwrap();
    assert_eq!(straight.files, resumed.files);
    assert_eq!(straight.timeline, resumed.timeline);
}

#[test]
fn resume_across_an_intervention_matches_straight_run() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = tiny(5);
    let plan = Plan::forget(12, ForgetParams { target_count: 3, ..ForgetParams::default() }, 24);
    let straight = run_plan(a.path(), &cfg, &plan).unwrap();
    run_plan(b.path(), &cfg, &plan).unwrap();
    // back to before the intervention: it must be redone identically
    rewind(b.path(), "snapshots/policy-000006.ckpt");
    let resumed = run_plan(b.path(), &cfg, &plan).unwrap();
    assert_eq!(straight.files, resumed.files);
    assert_eq!(straight.timeline, resumed.timeline);
}

#[test]
fn replay_reproduces_every_artifact() {
    let a = tempfile::tempdir().unwrap();
    let into = tempfile::tempdir().unwrap();
    let plan = Plan::anneal(AnnealTrigger::Fixed { step: 6 }, AnnealParams { acc_threshold: 1.1, target_count: 3, ..AnnealParams::default() }, 12);
    run_plan(a.path(), &tiny(6), &plan).unwrap();
    let report = replay(a.path(), &into.path().join("r")).unwrap();
    assert!(report.is_identical(), "{report:?}");
    assert!(report.identical.iter().any(|f| f == "reports/intervention-0.json"));
}

#[test]
fn locked_directory_is_refused() {
    let a = tempfile::tempdir().unwrap();
    let _held = RunLock::acquire(a.path()).unwrap();
    assert!(matches!(run_plan(a.path(), &tiny(1), &Plan::baseline(2)), Err(Error::Locked { .. })));
}

#[test]
fn tampering_is_detected_and_bad_headers_rejected() {
    let a = tempfile::tempdir().unwrap();
    let m = run_plan(a.path(), &tiny(7), &Plan::baseline(6)).unwrap();
    fs::write(a.path().join("tasks.txt"), "garbage").unwrap();
    assert_eq!(m.verify(a.path()).unwrap(), vec!["tasks.txt".to_string()]);

    let p = a.path().join(METRICS_FILE);
    let text = fs::read_to_string(&p).unwrap().replacen("v1", "v9", 1);
    fs::write(&p, text).unwrap();
    assert!(matches!(read_metrics(&p), Err(Error::Format { .. })));
}

#[test]
fn comparison_requires_shared_tasks() {
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_plan(a.path(), &tiny(8), &Plan::baseline(8)).unwrap();
    run_plan(b.path(), &tiny(9), &Plan::baseline(8)).unwrap();
    run_plan(c.path(), &tiny(8), &Plan::anneal(AnnealTrigger::Fixed { step: 4 }, AnnealParams::default(), 8)).unwrap();
    let ra = RunData::open(a.path()).unwrap();
    let self_cmp = compare_runs(&ra, &ra, None).unwrap();
    assert_eq!(self_cmp.step, 8);
    assert_eq!(self_cmp.a.histogram, self_cmp.b.histogram);
    assert!(matches!(
        compare_runs(&ra, &RunData::open(b.path()).unwrap(), None),
        Err(Error::Comparison(_))
    ));
    let cmp = compare_runs(&ra, &RunData::open(c.path()).unwrap(), None).unwrap();
    assert_eq!(cmp.b.plan, "anneal@4-8");
}

#[test]
fn aggregated_mode_runs_and_records_evaluations() {
    let a = tempfile::tempdir().unwrap();
    let cfg = TrainConfig { update_mode: UpdateMode::Aggregated, ..tiny(10) };
    run_plan(a.path(), &cfg, &Plan::baseline(8)).unwrap();
    let metrics = read_metrics(&a.path().join(METRICS_FILE)).unwrap();
    assert_eq!(metrics.len(), 8);
    let evaluated: Vec<usize> = metrics.iter().filter(|m| m.evaluation.is_some()).map(|m| m.step).collect();
    assert_eq!(evaluated, vec![4, 8]);
    for m in &metrics {
        assert_eq!(m.per_problem_accuracy.len(), 8);
        assert!(m.per_problem_accuracy.iter().all(|a| (0.0..=1.0).contains(a)));
    }
}

#[test]
fn analysis_tables_are_inventoried() {
    let a = tempfile::tempdir().unwrap();
    run_plan(a.path(), &tiny(11), &Plan::baseline(12)).unwrap();
    let out = a.path().join("reports/analysis");
    let summary = conet::experiment::analyze_run(a.path(), &out).unwrap();
    assert_eq!(summary.final_step, 12);
    let m = RunManifest::load(a.path()).unwrap();
    assert!(m.files.contains_key("reports/analysis/clusters.tsv"));
    assert!(m.verify(a.path()).unwrap().is_empty());
    // tables outside the run leave the manifest alone
    let elsewhere = tempfile::tempdir().unwrap();
    conet::experiment::analyze_run(a.path(), elsewhere.path()).unwrap();
    assert_eq!(RunManifest::load(a.path()).unwrap(), m);
}
