//! Time-series signals: the frustration trigger, per-problem transition
//! detection, cluster series and the solution-path overlap diagnostic.

use serde::{Deserialize, Serialize};

use super::union_find::UnionFind;
use super::web::WebSnapshot;
use crate::graph::{ConceptGraph, NodeId, Task, TaskSet};
use crate::policy::Policy;
use crate::trainer::StepMetrics;

pub const DEFAULT_SMOOTHING_WINDOW: usize = 5;
pub const DEFAULT_CONFIRM: usize = 3;
pub const DEFAULT_ACC_LOW: f64 = 0.2;
pub const DEFAULT_ACC_HIGH: f64 = 0.8;
pub const DEFAULT_VARIANCE_HALF_WIDTH: usize = 10;
/// Evaluation points after a crossing that must stay above `acc_high`.
pub const DEFAULT_HOLD: usize = 3;

/// Centered moving average; the window shrinks at both ends.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let back = (window - 1) / 2;
    let fwd = window / 2;
    (0..values.len())
        .map(|i| {
            let lo = i.saturating_sub(back);
            let hi = (i + fwd).min(values.len() - 1);
            values[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
        })
        .collect()
}

/// Peak of the smoothed cluster-count series, reported once the smoothed
/// series has strictly decreased for `confirm` consecutive points right after
/// its running maximum. `None` while unconfirmed. Only the prefix seen so far
/// matters, so calling this after every step gives an online trigger.
pub fn frustration_signal(steps: &[usize], counts: &[f64], window: usize, confirm: usize) -> Option<usize> {
    assert_eq!(steps.len(), counts.len(), "steps and counts must align");
    if counts.len() <= window {
        return None;
    }
    let smooth = moving_average(counts, window);
    let mut peak = 0;
    for i in 1..smooth.len() {
        if smooth[i] > smooth[peak] {
            peak = i;
        }
        let confirmed = i >= peak + confirm && (peak + 1..=peak + confirm).all(|j| smooth[j] < smooth[j - 1]);
        // the moving average near the end still depends on unseen points
        let settled = peak + confirm + window / 2 < smooth.len();
        if confirmed && settled {
            return Some(steps[peak]);
        }
    }
    None
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ProblemTrace {
    pub task_id: usize,
    pub steps: Vec<usize>,
    pub accuracy: Vec<f64>,
    pub length_mean: Vec<Option<f64>>,
    /// Defined only where at least two samples were correct.
    pub length_variance: Vec<Option<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub step: usize,
    /// Index of the evaluation point closest to `step`.
    pub index: usize,
    /// Argmax of the length variance within the search window.
    pub variance_peak_step: Option<usize>,
}

/// Collects per-task series from every metrics record that carries an
/// evaluation.
pub fn problem_traces(metrics: &[StepMetrics]) -> Vec<ProblemTrace> {
    let mut traces: Vec<ProblemTrace> = Vec::new();
    for m in metrics {
        let Some(evals) = &m.evaluation else { continue };
        if traces.is_empty() {
            traces = (0..evals.len()).map(|task_id| ProblemTrace { task_id, ..Default::default() }).collect();
        }
        for (t, e) in traces.iter_mut().zip(evals) {
            t.steps.push(m.step);
            t.accuracy.push(e.accuracy());
            t.length_mean.push(e.correct_length_mean());
            t.length_variance.push(e.correct_length_variance());
        }
    }
    traces
}

fn argmax_defined(values: &[Option<f64>], range: std::ops::RangeInclusive<usize>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for i in range {
        if let Some(v) = values.get(i).copied().flatten() {
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((i, v));
            }
        }
    }
    best.map(|(i, _)| i)
}

/// Finds the first sharp rise: an evaluation below `acc_low` followed by a
/// later one above `acc_high` whose next `hold` points (or the rest of the
/// series) also stay above. The transition is the midpoint between the last
/// low point and the first high one.
pub fn detect_transition(trace: &ProblemTrace, acc_low: f64, acc_high: f64, half_width: usize, hold: usize) -> Option<Transition> {
    let acc = &trace.accuracy;
    if acc.len() < 3 {
        return None;
    }
    let mut last_low: Option<usize> = None;
    for j in 0..acc.len() {
        if acc[j] < acc_low {
            last_low = Some(j);
            continue;
        }
        let Some(i) = last_low else { continue };
        if acc[j] > acc_high {
            let end = (j + hold).min(acc.len() - 1);
            if acc[j..=end].iter().all(|&a| a > acc_high) {
                let step = (trace.steps[i] + trace.steps[j]) / 2;
                let index = (i..=j)
                    .min_by_key(|&k| trace.steps[k].abs_diff(step))
                    .expect("non-empty range");
                let lo = index.saturating_sub(half_width);
                let hi = (index + half_width).min(acc.len() - 1);
                let variance_peak_step = argmax_defined(&trace.length_variance, lo..=hi).map(|k| trace.steps[k]);
                return Some(Transition { step, index, variance_peak_step });
            }
        }
    }
    None
}

/// Argmax of the length variance over the whole trace.
pub fn global_variance_peak(trace: &ProblemTrace) -> Option<usize> {
    if trace.length_variance.is_empty() {
        return None;
    }
    argmax_defined(&trace.length_variance, 0..=trace.length_variance.len() - 1)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClusterSeries {
    pub steps: Vec<usize>,
    pub cluster_count: Vec<usize>,
    pub max_cluster_size: Vec<usize>,
}

pub fn cluster_series(snapshots: &[WebSnapshot]) -> ClusterSeries {
    ClusterSeries {
        steps: snapshots.iter().map(|s| s.step).collect(),
        cluster_count: snapshots.iter().map(WebSnapshot::cluster_count).collect(),
        max_cluster_size: snapshots.iter().map(WebSnapshot::max_cluster_size).collect(),
    }
}

/// The same series read from per-step metrics records.
pub fn cluster_series_from_metrics(metrics: &[StepMetrics]) -> ClusterSeries {
    ClusterSeries {
        steps: metrics.iter().map(|m| m.step).collect(),
        cluster_count: metrics.iter().map(|m| m.cluster_count).collect(),
        max_cluster_size: metrics.iter().map(|m| m.max_cluster_size).collect(),
    }
}

/// Most-likely walk from the question: follow the argmax transition until the
/// answer, a revisit, or `l_max` steps.
pub fn greedy_path(policy: &Policy, graph: &ConceptGraph, task: &Task, l_max: usize) -> (Vec<NodeId>, bool) {
    let mut nodes = vec![task.question];
    let mut seen = vec![false; graph.n_nodes()];
    seen[task.question] = true;
    let mut at = task.question;
    for _ in 0..l_max {
        at = graph.target(at, policy.argmax_slot(at));
        nodes.push(at);
        if at == task.answer {
            return (nodes, true);
        }
        if std::mem::replace(&mut seen[at], true) {
            break;
        }
    }
    (nodes, false)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathOverlap {
    /// Tasks whose greedy walk reaches the answer.
    pub solved: Vec<usize>,
    /// Groups of solved tasks linked by a shared greedy-path edge.
    pub groups: Vec<Vec<usize>>,
}

/// Auxiliary per-task reading of "solution clusters": greedy solution paths
/// that share an edge belong to the same group.
pub fn path_overlap(policy: &Policy, graph: &ConceptGraph, tasks: &TaskSet, l_max: usize) -> PathOverlap {
    let mut solved = Vec::new();
    let mut owner: std::collections::HashMap<(NodeId, NodeId), usize> = Default::default();
    let mut uf = UnionFind::new(tasks.len());
    for (id, task) in tasks.tasks().iter().enumerate() {
        let (nodes, ok) = greedy_path(policy, graph, task, l_max);
        if !ok {
            continue;
        }
        solved.push(id);
        for w in nodes.windows(2) {
            let first = *owner.entry((w[0], w[1])).or_insert(id);
            uf.union(first, id);
        }
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for &id in &solved {
        groups.entry(uf.find(id)).or_default().push(id);
    }
    let mut groups: Vec<Vec<usize>> = groups.into_values().collect();
    groups.sort_by(|a, b| b.len().cmp(&a.len()).then(a[0].cmp(&b[0])));
    PathOverlap { solved, groups }
}
