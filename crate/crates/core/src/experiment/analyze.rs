use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{write_atomic, RunData, RunLock, TimelineEntry};
use crate::analytics::signals::{
    cluster_series_from_metrics, detect_transition, frustration_signal, global_variance_peak, path_overlap, problem_traces,
    PathOverlap, DEFAULT_ACC_HIGH, DEFAULT_ACC_LOW, DEFAULT_CONFIRM, DEFAULT_HOLD, DEFAULT_SMOOTHING_WINDOW,
    DEFAULT_VARIANCE_HALF_WIDTH,
};
use crate::analytics::stats::{correct_length_histogram, mean_best_at_k, LengthHistogram};
use crate::error::{Error, Result};
use crate::trainer::mean_accuracy;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisSummary {
    pub final_step: usize,
    pub frustration_peak: Option<usize>,
    pub cluster_count_peak: Option<(usize, usize)>,
    pub early_window: (usize, usize),
    pub late_window: (usize, usize),
    pub early_length_mean: Option<f64>,
    pub late_length_mean: Option<f64>,
    pub transitions: usize,
    pub transitions_after_200: usize,
    pub variance_peak_near_transition: usize,
    pub solved_by_greedy_path: usize,
    pub path_overlap_groups: usize,
    pub files: Vec<String>,
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

fn table(out_dir: &Path, name: &str, columns: &str, rows: Vec<String>, files: &mut Vec<String>) -> Result<()> {
    write_atomic(&out_dir.join(name), |out| {
        writeln!(out, "# conet-analysis v1 {name}")?;
        writeln!(out, "{columns}")?;
        for r in &rows {
            writeln!(out, "{r}")?;
        }
        Ok(())
    })?;
    files.push(name.to_string());
    Ok(())
}

/// Writes derived tables for a run into `out_dir`. When `out_dir` lies
/// inside the run the tables are added to the manifest inventory.
pub fn analyze_run(run_dir: &Path, out_dir: &Path) -> Result<AnalysisSummary> {
    let data = RunData::open(run_dir)?;
    fs::create_dir_all(out_dir)?;
    let mut files = Vec::new();
    let metrics = &data.metrics;
    let final_step = metrics.last().map_or(0, |m| m.step);

    let clusters = cluster_series_from_metrics(metrics);
    let rows = metrics
        .iter()
        .map(|m| {
            format!(
                "{}\t{}\t{}\t{}\t{}",
                m.step,
                m.web_edges,
                m.cluster_count,
                m.max_cluster_size,
                opt(m.avg_degree_largest)
            )
        })
        .collect();
    table(out_dir, "clusters.tsv", "step\tweb_edges\tcluster_count\tmax_cluster_size\tavg_degree_largest", rows, &mut files)?;

    let rows = metrics
        .iter()
        .map(|m| format!("{}\t{}\t{}", m.step, m.mean_reward, opt(m.mean_correct_length)))
        .collect();
    table(out_dir, "curves.tsv", "step\tmean_reward\tmean_correct_length", rows, &mut files)?;

    let rows = metrics
        .iter()
        .filter_map(|m| {
            let e = m.evaluation.as_ref()?;
            Some(format!(
                "{}\t{}\t{}\t{}",
                m.step,
                mean_accuracy(e),
                opt(mean_best_at_k(e, 1)),
                opt(mean_best_at_k(e, 16))
            ))
        })
        .collect();
    table(out_dir, "evaluation.tsv", "step\tmean_accuracy\tbest_at_1\tbest_at_16", rows, &mut files)?;

    let early_window = (40.min(final_step), 60.min(final_step));
    let late_window = (final_step.saturating_sub(20), final_step);
    let early = correct_length_histogram(metrics, early_window.0..=early_window.1);
    let late = correct_length_histogram(metrics, late_window.0..=late_window.1);
    let hist_rows = |tag: &str, h: &LengthHistogram| -> Vec<String> {
        h.bins.iter().map(|(l, c)| format!("{tag}\t{l}\t{c}")).collect()
    };
    let mut rows = hist_rows("early", &early);
    rows.extend(hist_rows("late", &late));
    table(out_dir, "length_histograms.tsv", "window\tlength\tcount", rows, &mut files)?;

    let traces = problem_traces(metrics);
    write_atomic(&out_dir.join("problem_traces.jsonl"), |out| {
        for t in &traces {
            writeln!(out, "{}", serde_json::to_string(t).expect("trace serializes"))?;
        }
        Ok(())
    })?;
    files.push("problem_traces.jsonl".into());

    let eval_interval = traces.first().and_then(|t| (t.steps.len() >= 2).then(|| t.steps[1] - t.steps[0])).unwrap_or(1);
    let mut rows = Vec::new();
    let (mut transitions, mut after_200, mut near) = (0, 0, 0);
    for t in &traces {
        let Some(d) = detect_transition(t, DEFAULT_ACC_LOW, DEFAULT_ACC_HIGH, DEFAULT_VARIANCE_HALF_WIDTH, DEFAULT_HOLD) else {
            continue;
        };
        transitions += 1;
        let global = global_variance_peak(t).map(|i| t.steps[i]);
        if d.step > 200 {
            after_200 += 1;
            if global.is_some_and(|g| g.abs_diff(d.step) <= DEFAULT_VARIANCE_HALF_WIDTH * eval_interval) {
                near += 1;
            }
        }
        rows.push(format!(
            "{}\t{}\t{}\t{}",
            t.task_id,
            d.step,
            d.variance_peak_step.map_or("NA".into(), |s| s.to_string()),
            global.map_or("NA".into(), |s| s.to_string())
        ));
    }
    table(out_dir, "transitions.tsv", "task\ttransition_step\tvariance_peak_window\tvariance_peak_global", rows, &mut files)?;

    let counts: Vec<f64> = clusters.cluster_count.iter().map(|&c| c as f64).collect();
    let frustration_peak = frustration_signal(&clusters.steps, &counts, DEFAULT_SMOOTHING_WINDOW, DEFAULT_CONFIRM);
    let cluster_count_peak = clusters
        .cluster_count
        .iter()
        .zip(&clusters.steps)
        .fold(None, |best: Option<(usize, usize)>, (&c, &s)| match best {
            Some((_, bc)) if bc >= c => best,
            _ => Some((s, c)),
        });

    let overlap = match &data.manifest.last_checkpoint {
        Some(ckpt) => {
            let (policy, _) = data.load_policy(ckpt)?;
            path_overlap(&policy, &data.graph, &data.tasks, data.manifest.config.l_max)
        }
        None => PathOverlap { solved: Vec::new(), groups: Vec::new() },
    };
    write_atomic(&out_dir.join("path_overlap.json"), |out| {
        serde_json::to_writer_pretty(&mut *out, &overlap).map_err(|e| Error::format("analysis", e.to_string()))?;
        writeln!(out)?;
        Ok(())
    })?;
    files.push("path_overlap.json".into());

    let interventions = data
        .manifest
        .timeline
        .iter()
        .filter(|e| matches!(e, TimelineEntry::Intervention { .. }))
        .count();
    log::info!("analyzed {} steps, {interventions} interventions", metrics.len());

    let summary = AnalysisSummary {
        final_step,
        frustration_peak,
        cluster_count_peak,
        early_window,
        late_window,
        early_length_mean: early.mean(),
        late_length_mean: late.mean(),
        transitions,
        transitions_after_200: after_200,
        variance_peak_near_transition: near,
        solved_by_greedy_path: overlap.solved.len(),
        path_overlap_groups: overlap.groups.len(),
        files: files.clone(),
    };
    write_atomic(&out_dir.join("summary.json"), |out| {
        serde_json::to_writer_pretty(&mut *out, &summary).map_err(|e| Error::format("analysis", e.to_string()))?;
        writeln!(out)?;
        Ok(())
    })?;
    files.push("summary.json".into());

    let run_abs = fs::canonicalize(run_dir)?;
    let out_abs = fs::canonicalize(out_dir)?;
    if let Ok(rel_dir) = out_abs.strip_prefix(&run_abs) {
        let _lock = RunLock::acquire(run_dir)?;
        let mut manifest = super::RunManifest::load(run_dir)?;
        for f in &files {
            let rel = rel_dir.join(f);
            manifest.record(run_dir, &rel.to_string_lossy())?;
        }
        manifest.save(run_dir)?;
    }
    Ok(summary)
}
