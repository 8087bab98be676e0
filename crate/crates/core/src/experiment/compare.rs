use serde::{Deserialize, Serialize};

use super::{RunData, GRAPH_FILE, TASKS_FILE};
use crate::analytics::stats::{accuracy_histogram, mean_best_at_k, AccuracyHistogram};
use crate::error::{Error, Result};
use crate::rollout::TaskEval;
use crate::trainer::mean_accuracy;

/// One run's side of a comparison at the matched step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSide {
    pub plan: String,
    pub mean_accuracy: f64,
    pub accuracy_zero: usize,
    pub accuracy_one: usize,
    pub histogram: AccuracyHistogram,
    /// `(k, mean best@k)` for powers of two up to the sample count.
    pub best_at_k: Vec<(u64, f64)>,
    /// `(step, best@1, best@16)` at every evaluation.
    pub curve: Vec<(usize, Option<f64>, Option<f64>)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub step: usize,
    pub a: RunSide,
    pub b: RunSide,
}

fn side(run: &RunData, evals: &[TaskEval]) -> RunSide {
    let acc: Vec<f64> = evals.iter().map(TaskEval::accuracy).collect();
    let histogram = accuracy_histogram(&acc, 10);
    let n = evals.iter().map(|e| e.n_samples).min().unwrap_or(0) as u64;
    let best_at_k = std::iter::successors(Some(1u64), |k| Some(k * 2))
        .take_while(|&k| k <= n)
        .filter_map(|k| mean_best_at_k(evals, k).map(|v| (k, v)))
        .collect();
    let curve = run
        .metrics
        .iter()
        .filter_map(|m| {
            let e = m.evaluation.as_ref()?;
            Some((m.step, mean_best_at_k(e, 1), mean_best_at_k(e, 16)))
        })
        .collect();
    RunSide {
        plan: run.manifest.plan.name.clone(),
        mean_accuracy: mean_accuracy(evals),
        accuracy_zero: histogram.zero,
        accuracy_one: histogram.one,
        histogram,
        best_at_k,
        curve,
    }
}

fn evaluation_at(run: &RunData, step: usize) -> Option<&[TaskEval]> {
    run.metrics.iter().find(|m| m.step == step)?.evaluation.as_deref()
}

/// Compares per-problem accuracy of two runs over the same graph and tasks
/// at `step`, or at the latest step both evaluated.
pub fn compare_runs(a: &RunData, b: &RunData, step: Option<usize>) -> Result<Comparison> {
    for f in [GRAPH_FILE, TASKS_FILE] {
        if a.manifest.files.get(f) != b.manifest.files.get(f) {
            return Err(Error::Comparison(format!("runs differ in {f}; they do not share a task set")));
        }
    }
    let step = match step {
        Some(s) => s,
        None => a
            .metrics
            .iter()
            .rev()
            .filter(|m| m.evaluation.is_some())
            .map(|m| m.step)
            .find(|&s| evaluation_at(b, s).is_some())
            .ok_or_else(|| Error::Comparison("no step evaluated in both runs".into()))?,
    };
    let (Some(ea), Some(eb)) = (evaluation_at(a, step), evaluation_at(b, step)) else {
        return Err(Error::Comparison(format!("step {step} is not evaluated in both runs")));
    };
    Ok(Comparison {
        step,
        a: side(a, ea),
        b: side(b, eb),
    })
}
