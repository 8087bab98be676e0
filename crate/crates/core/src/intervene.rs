//! Supervised "boost" interventions on the policy.
//!
//! A boost walks a successful path and, for each transition whose
//! probability is below `tau`, raises it to exactly `tau` while scaling the
//! node's other transitions down proportionally. Two protocols build on it:
//! annealing (small `tau` on the weakest tasks, early in training) and
//! forgetting (large `tau` on random tasks, late in training).

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::analytics::stats::mean_best_at_k;
use crate::analytics::web::{build_snapshot, WebStats};
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::graph::{ConceptGraph, NodeId, TaskSet};
use crate::policy::Policy;
use crate::rollout::{evaluate_all, sample_path, TaskEval, Trajectory};
use crate::seeds::{stream_rng, Stream};
use crate::trainer::mean_accuracy;

pub const DEFAULT_ATTEMPT_BUDGET: usize = 1024;

/// Evaluation stream namespace for interventions (training uses 0).
pub(crate) const EVAL_NAMESPACE: u64 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Anneal,
    Forget,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FoundBy {
    Policy,
    Uniform,
}

/// Rejection-samples a successful walk: first under the policy, then under
/// the uniform policy, each for `attempt_budget` tries. Attempt `a` of phase
/// `p` uses the stream `(key..., p, a)`.
pub fn find_successful_path(
    policy: &Policy,
    graph: &ConceptGraph,
    task: &crate::graph::Task,
    l_max: usize,
    attempt_budget: usize,
    master_seed: u64,
    key: &[u64],
) -> Option<(Trajectory, FoundBy)> {
    assert!(attempt_budget >= 1, "attempt budget must be positive");
    let uniform = Policy::from_theta(vec![1.0; graph.n_edges()], graph.out_degree(), policy.theta_floor());
    let phases = [(policy, FoundBy::Policy), (&uniform, FoundBy::Uniform)];
    let mut full_key = key.to_vec();
    full_key.extend([0, 0]);
    let n = full_key.len();
    for (phase, (walker, tag)) in phases.into_iter().enumerate() {
        full_key[n - 2] = phase as u64;
        for attempt in 0..attempt_budget {
            full_key[n - 1] = attempt as u64;
            let mut rng = stream_rng(master_seed, Stream::Intervention, &full_key);
            let t = sample_path(walker, graph, task, l_max, &mut rng);
            if t.success {
                return Some((t, tag));
            }
        }
    }
    None
}

/// Raises the probability of a single transition to `tau` if it is below,
/// rescaling siblings by `(1 - tau) / (1 - p_old)` and keeping the row sum
/// of weights. Returns whether the row changed.
pub fn boost_transition(policy: &mut Policy, node: NodeId, slot: usize, tau: f64) -> bool {
    let s = policy.row_sum(node);
    let row = policy.row(node);
    let p_old = row[slot] / s;
    if p_old >= tau {
        return false;
    }
    let scale = (1.0 - tau) / (1.0 - p_old);
    let new_row: Vec<f64> = row
        .iter()
        .enumerate()
        .map(|(l, &w)| if l == slot { tau * s } else { w * scale })
        .collect();
    policy.set_row(node, &new_row);
    true
}

/// Applies [`boost_transition`] to every step of `path`, in path order.
pub fn boost_path(policy: &mut Policy, path: &Trajectory, tau: f64) -> Result<usize> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::param(format!("tau must lie in (0, 1), got {tau}")));
    }
    let mut changed = 0;
    for (node, slot) in path.steps() {
        if boost_transition(policy, node, slot, tau) {
            changed += 1;
        }
    }
    Ok(changed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnealParams {
    pub acc_threshold: f64,
    pub target_count: usize,
    pub tau: f64,
    pub attempt_budget: usize,
}

impl Default for AnnealParams {
    fn default() -> Self {
        Self {
            acc_threshold: 0.1,
            target_count: 50,
            tau: 0.1,
            attempt_budget: DEFAULT_ATTEMPT_BUDGET,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForgetParams {
    pub tau: f64,
    pub target_count: usize,
    pub attempt_budget: usize,
}

impl Default for ForgetParams {
    fn default() -> Self {
        Self {
            tau: 0.5,
            target_count: 50,
            attempt_budget: DEFAULT_ATTEMPT_BUDGET,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetedTask {
    pub task_id: usize,
    pub pre_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoostedPath {
    pub task_id: usize,
    pub nodes: Vec<NodeId>,
    pub found_by: FoundBy,
    pub transitions_raised: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedTask {
    pub task_id: usize,
    pub reason: String,
}

/// Aggregate view of the policy immediately before or after an intervention.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicySummary {
    pub mean_accuracy: f64,
    pub best_at_1: Option<f64>,
    pub best_at_16: Option<f64>,
    pub per_task_accuracy: Vec<f64>,
    pub web: WebStats,
}

impl PolicySummary {
    pub fn from_evals(evals: &[TaskEval], web: WebStats) -> Self {
        Self {
            mean_accuracy: mean_accuracy(evals),
            best_at_1: mean_best_at_k(evals, 1),
            best_at_16: mean_best_at_k(evals, 16),
            per_task_accuracy: evals.iter().map(TaskEval::accuracy).collect(),
            web,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterventionReport {
    pub protocol: Protocol,
    pub tau: f64,
    pub step: usize,
    /// How tasks were chosen, recorded for later reading of the run.
    pub selection_rule: String,
    pub targeted: Vec<TargetedTask>,
    pub boosted: Vec<BoostedPath>,
    pub skipped: Vec<SkippedTask>,
    pub pre: PolicySummary,
    pub post: PolicySummary,
    #[serde(default)]
    pub checkpoint_before: Option<String>,
    #[serde(default)]
    pub checkpoint_after: Option<String>,
}

/// Shared state handed to the intervention protocols.
pub struct InterventionContext<'a> {
    pub graph: &'a ConceptGraph,
    pub tasks: &'a TaskSet,
    pub config: &'a TrainConfig,
    /// Training step after which the intervention runs.
    pub step: usize,
    /// Distinguishes interventions within one run for seed derivation.
    pub event: u64,
}

impl InterventionContext<'_> {
    fn summarize(&self, policy: &Policy, phase: u64) -> (Vec<TaskEval>, PolicySummary) {
        let evals = evaluate_all(
            policy,
            self.graph,
            self.tasks.tasks(),
            self.config.eval_samples,
            self.config.l_max,
            self.config.master_seed,
            &[EVAL_NAMESPACE, self.event, phase],
            self.config.execution,
        );
        let web = build_snapshot(policy, self.graph, self.config.web_threshold, self.step).stats();
        let summary = PolicySummary::from_evals(&evals, web);
        (evals, summary)
    }

    fn boost_tasks(
        &self,
        policy: &mut Policy,
        selected: &[TargetedTask],
        tau: f64,
        attempt_budget: usize,
    ) -> Result<(Vec<BoostedPath>, Vec<SkippedTask>)> {
        let mut boosted = Vec::new();
        let mut skipped = Vec::new();
        for t in selected {
            let task = &self.tasks.tasks()[t.task_id];
            let found = find_successful_path(
                policy,
                self.graph,
                task,
                self.config.l_max,
                attempt_budget,
                self.config.master_seed,
                &[self.event, t.task_id as u64],
            );
            match found {
                Some((path, found_by)) => {
                    let transitions_raised = boost_path(policy, &path, tau)?;
                    boosted.push(BoostedPath {
                        task_id: t.task_id,
                        nodes: path.nodes,
                        found_by,
                        transitions_raised,
                    });
                }
                None => skipped.push(SkippedTask {
                    task_id: t.task_id,
                    reason: format!(
                        "no successful path in {attempt_budget} policy and {attempt_budget} uniform attempts"
                    ),
                }),
            }
        }
        Ok((boosted, skipped))
    }
}

/// Boosts one successful path for each of up to `target_count` tasks whose
/// evaluated accuracy is below `acc_threshold`, lowest accuracy first.
pub fn run_anneal(policy: &mut Policy, ctx: &InterventionContext<'_>, params: &AnnealParams) -> Result<InterventionReport> {
    let (evals, pre) = ctx.summarize(policy, 0);
    let mut candidates: Vec<TargetedTask> = evals
        .iter()
        .enumerate()
        .map(|(task_id, e)| TargetedTask {
            task_id,
            pre_accuracy: e.accuracy(),
        })
        .filter(|t| t.pre_accuracy < params.acc_threshold)
        .collect();
    candidates.sort_by(|a, b| a.pre_accuracy.total_cmp(&b.pre_accuracy).then(a.task_id.cmp(&b.task_id)));
    candidates.truncate(params.target_count);

    let (boosted, skipped) = ctx.boost_tasks(policy, &candidates, params.tau, params.attempt_budget)?;
    let (_, post) = ctx.summarize(policy, 1);
    Ok(InterventionReport {
        protocol: Protocol::Anneal,
        tau: params.tau,
        step: ctx.step,
        selection_rule: format!(
            "accuracy < {} ascending, task id tiebreak, at most {}",
            params.acc_threshold, params.target_count
        ),
        targeted: candidates,
        boosted,
        skipped,
        pre,
        post,
        checkpoint_before: None,
        checkpoint_after: None,
    })
}

/// Boosts one successful path for each of `target_count` tasks drawn
/// uniformly without replacement.
pub fn run_forgetting(policy: &mut Policy, ctx: &InterventionContext<'_>, params: &ForgetParams) -> Result<InterventionReport> {
    let (evals, pre) = ctx.summarize(policy, 0);
    let count = params.target_count.min(ctx.tasks.len());
    let mut rng = stream_rng(ctx.config.master_seed, Stream::Intervention, &[ctx.event, u64::MAX]);
    let mut ids: Vec<usize> = index::sample(&mut rng, ctx.tasks.len(), count).into_vec();
    ids.sort_unstable();
    let selected: Vec<TargetedTask> = ids
        .into_iter()
        .map(|task_id| TargetedTask {
            task_id,
            pre_accuracy: evals[task_id].accuracy(),
        })
        .collect();

    let (boosted, skipped) = ctx.boost_tasks(policy, &selected, params.tau, params.attempt_budget)?;
    let (_, post) = ctx.summarize(policy, 1);
    Ok(InterventionReport {
        protocol: Protocol::Forget,
        tau: params.tau,
        step: ctx.step,
        selection_rule: format!("{count} tasks uniformly at random"),
        targeted: selected,
        boosted,
        skipped,
        pre,
        post,
        checkpoint_before: None,
        checkpoint_after: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Task;
    use crate::policy::DEFAULT_THETA_FLOOR;
    use proptest::prelude::*;

    fn single_row(probs: &[f64]) -> (ConceptGraph, Policy) {
        let k = probs.len();
        let adjacency: Vec<Vec<usize>> = (0..=k)
            .map(|i| (0..=k).filter(|&j| j != i).take(k).collect())
            .collect();
        let g = ConceptGraph::from_adjacency(&adjacency, 0).unwrap();
        let mut theta: Vec<f64> = probs.iter().map(|p| p * 7.0).collect();
        theta.extend(std::iter::repeat(1.0).take(k * k));
        (g, Policy::from_theta(theta, k, DEFAULT_THETA_FLOOR))
    }

    fn closed_form(probs: &[f64], slot: usize, tau: f64) -> Vec<f64> {
        if probs[slot] >= tau {
            return probs.to_vec();
        }
        let f = (1.0 - tau) / (1.0 - probs[slot]);
        probs
            .iter()
            .enumerate()
            .map(|(l, &p)| if l == slot { tau } else { p * f })
            .collect()
    }

    #[test]
    fn boost_examples() {
        let (_, mut p) = single_row(&[0.05, 0.15, 0.80]);
        let sum_before = p.row_sum(0);
        assert!(boost_transition(&mut p, 0, 0, 0.1));
        let got = p.transition_distribution(0);
        let want = [0.1, 0.15 * 0.9 / 0.95, 0.80 * 0.9 / 0.95];
        for (a, b) in got.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((got[1] - 0.142_105_263_157_894_7).abs() < 1e-12);
        assert!((got[2] - 0.757_894_736_842_105_2).abs() < 1e-12);
        assert!((p.row_sum(0) - sum_before).abs() < 1e-12);

        let (_, mut p) = single_row(&[0.5, 0.25, 0.25]);
        let before = p.clone();
        assert!(!boost_transition(&mut p, 0, 0, 0.1));
        assert_eq!(p, before);

        let (_, mut p) = single_row(&[0.01, 0.99]);
        boost_transition(&mut p, 0, 0, 0.5);
        let got = p.transition_distribution(0);
        assert!((got[0] - 0.5).abs() < 1e-12 && (got[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn boost_rejects_bad_tau() {
        let (g, mut p) = single_row(&[0.5, 0.5]);
        let path = Trajectory {
            nodes: vec![0, g.target(0, 0)],
            slots: vec![0],
            success: true,
        };
        assert!(boost_path(&mut p, &path, 0.0).is_err());
        assert!(boost_path(&mut p, &path, 1.0).is_err());
    }

    #[test]
    fn revisits_apply_sequentially() {
        // path visits node 0 twice, choosing slot 0 then slot 1
        let adjacency = vec![vec![1, 2, 3], vec![0, 2, 3], vec![0, 1, 3], vec![0, 1, 2]];
        let _g = ConceptGraph::from_adjacency(&adjacency, 0).unwrap();
        let mut theta = vec![1.0; 12];
        theta[0..3].copy_from_slice(&[0.02, 0.03, 0.95]);
        let mut p = Policy::from_theta(theta, 3, DEFAULT_THETA_FLOOR);
        let path = Trajectory {
            nodes: vec![0, 1, 0, 2],
            slots: vec![0, 0, 1],
            success: true,
        };
        boost_path(&mut p, &path, 0.2).unwrap();
        let first = closed_form(&[0.02, 0.03, 0.95], 0, 0.2);
        let second = closed_form(&first, 1, 0.2);
        for (a, b) in p.transition_distribution(0).iter().zip(&second) {
            assert!((a - b).abs() < 1e-12);
        }
        // node 1 chose slot 0 with prob 1/3 >= 0.2: untouched
        assert_eq!(p.row(1), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn path_search_finds_forced_and_misses_unreachable() {
        let g = ConceptGraph::generate(2, 1, 0).unwrap();
        let p = Policy::from_theta(vec![1.0; 2], 1, DEFAULT_THETA_FLOOR);
        let (t, by) = find_successful_path(&p, &g, &Task { question: 0, answer: 1 }, 20, 4, 0, &[0]).unwrap();
        assert_eq!(t.nodes, vec![0, 1]);
        assert_eq!(by, FoundBy::Policy);

        let g = ConceptGraph::from_adjacency(&[vec![1], vec![2], vec![3], vec![0]], 0).unwrap();
        let p = Policy::from_theta(vec![1.0; 4], 1, DEFAULT_THETA_FLOOR);
        assert!(find_successful_path(&p, &g, &Task { question: 0, answer: 3 }, 2, 16, 0, &[0]).is_none());
    }

    #[test]
    fn uniform_fallback_finds_suppressed_route() {
        // node 0 almost never moves to the answer under the policy
        let g = ConceptGraph::from_adjacency(&[vec![1, 2], vec![0, 2], vec![0, 1]], 0).unwrap();
        let p = Policy::from_theta(vec![1e-9, 1.0, 1.0, 1.0, 1.0, 1.0], 2, 1e-12);
        let (t, by) = find_successful_path(&p, &g, &Task { question: 0, answer: 1 }, 1, 8, 3, &[0]).unwrap();
        assert_eq!(by, FoundBy::Uniform);
        assert_eq!(t.nodes, vec![0, 1]);
    }

    #[test]
    fn rare_path_found_with_geometric_probability() {
        // success probability 0.01 per attempt on a one-step fork
        let g = ConceptGraph::from_adjacency(&[vec![1, 2], vec![0, 2], vec![0, 1]], 0).unwrap();
        let p = Policy::from_theta(vec![0.01, 0.99, 1.0, 1.0, 1.0, 1.0], 2, DEFAULT_THETA_FLOOR);
        let task = Task { question: 0, answer: 1 };
        let budget = 1000;
        let trials = 400;
        let found_by_policy = (0..trials)
            .filter(|&i| matches!(find_successful_path(&p, &g, &task, 1, budget, i, &[0]), Some((_, FoundBy::Policy))))
            .count();
        // 1 - 0.99^1000 = 0.999957; 400 trials expect ~0.017 misses
        let exact = 1.0 - 0.99f64.powi(budget as i32);
        assert!(exact > 0.9999);
        assert!(found_by_policy >= trials as usize - 2, "found {found_by_policy}/{trials}");
        // with a budget of 100 the closed form gives 0.634
        let small = (0..trials)
            .filter(|&i| matches!(find_successful_path(&p, &g, &task, 1, 100, i, &[1]), Some((_, FoundBy::Policy))))
            .count() as f64
            / trials as f64;
        let want = 1.0 - 0.99f64.powi(100);
        let se = (want * (1.0 - want) / trials as f64).sqrt();
        assert!((small - want).abs() < 4.0 * se, "{small} vs {want}");
    }

    fn small_setup() -> (TrainConfig, ConceptGraph, TaskSet, Policy) {
        let cfg = TrainConfig {
            n_nodes: 80,
            out_degree: 6,
            n_tasks: 12,
            eval_samples: 32,
            l_max: 12,
            master_seed: 4,
            ..TrainConfig::default()
        };
        let g = ConceptGraph::generate(cfg.n_nodes, cfg.out_degree, cfg.master_seed).unwrap();
        let tasks = TaskSet::sample(&g, cfg.n_tasks, cfg.master_seed).unwrap();
        let p = Policy::init(&g, 4, 0.5, 1.5, DEFAULT_THETA_FLOOR).unwrap();
        (cfg, g, tasks, p)
    }

    #[test]
    fn anneal_with_no_weak_tasks_is_a_no_op() {
        let (cfg, g, tasks, mut p) = small_setup();
        let ctx = InterventionContext { graph: &g, tasks: &tasks, config: &cfg, step: 0, event: 0 };
        let before = p.clone();
        let params = AnnealParams { acc_threshold: 0.0, ..AnnealParams::default() };
        let report = run_anneal(&mut p, &ctx, &params).unwrap();
        assert!(report.targeted.is_empty() && report.boosted.is_empty());
        assert_eq!(p, before);
    }

    #[test]
    fn anneal_selects_lowest_accuracy_first_when_threshold_is_loose() {
        let (cfg, g, tasks, mut p) = small_setup();
        let ctx = InterventionContext { graph: &g, tasks: &tasks, config: &cfg, step: 0, event: 0 };
        let params = AnnealParams { acc_threshold: 1.1, target_count: 5, ..AnnealParams::default() };
        let report = run_anneal(&mut p, &ctx, &params).unwrap();
        assert_eq!(report.targeted.len(), 5);
        let mut all: Vec<(f64, usize)> = report.pre.per_task_accuracy.iter().copied().zip(0..).collect();
        all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let want: Vec<usize> = all.iter().take(5).map(|x| x.1).collect();
        let got: Vec<usize> = report.targeted.iter().map(|t| t.task_id).collect();
        assert_eq!(got, want);
        for b in &report.boosted {
            assert_eq!(*b.nodes.last().unwrap(), tasks.tasks()[b.task_id].answer);
        }
    }

    #[test]
    fn forgetting_with_zero_targets_or_tiny_tau_changes_nothing() {
        let (cfg, g, tasks, mut p) = small_setup();
        let ctx = InterventionContext { graph: &g, tasks: &tasks, config: &cfg, step: 0, event: 0 };
        let before = p.clone();
        let report = run_forgetting(&mut p, &ctx, &ForgetParams { target_count: 0, ..ForgetParams::default() }).unwrap();
        assert!(report.targeted.is_empty());
        assert_eq!(p, before);

        let report = run_forgetting(&mut p, &ctx, &ForgetParams { tau: 1e-12, ..ForgetParams::default() }).unwrap();
        assert_eq!(report.targeted.len(), 12);
        assert!(report.boosted.iter().all(|b| b.transitions_raised == 0));
        assert_eq!(p, before);
    }

    #[test]
    fn boosts_touch_only_visited_nodes() {
        let (cfg, g, tasks, mut p) = small_setup();
        let ctx = InterventionContext { graph: &g, tasks: &tasks, config: &cfg, step: 0, event: 9 };
        let before = p.clone();
        let report = run_forgetting(&mut p, &ctx, &ForgetParams { target_count: 3, ..ForgetParams::default() }).unwrap();
        let visited: std::collections::HashSet<usize> = report
            .boosted
            .iter()
            .flat_map(|b| b.nodes[..b.nodes.len() - 1].iter().copied())
            .collect();
        for node in 0..g.n_nodes() {
            if !visited.contains(&node) {
                assert_eq!(p.row(node), before.row(node), "node {node} changed");
            }
        }
    }

    proptest! {
        #[test]
        fn boost_matches_closed_form(
            raw in prop::collection::vec(0.01f64..1.0, 2..12),
            pick in 0usize..64,
            tau in 0.001f64..0.999,
        ) {
            let total: f64 = raw.iter().sum();
            let probs: Vec<f64> = raw.iter().map(|r| r / total).collect();
            let slot = pick % probs.len();
            let (_, mut p) = single_row(&probs);
            let old = p.transition_distribution(0);
            boost_transition(&mut p, 0, slot, tau);
            let want = closed_form(&old, slot, tau);
            let got = p.transition_distribution(0);
            let s: f64 = got.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            for (a, b) in got.iter().zip(&want) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            prop_assert!(got[slot] >= tau.min(old[slot]) - 1e-12);
        }
    }
}
