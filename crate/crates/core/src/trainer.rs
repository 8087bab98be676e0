//! Multi-task GRPO training.
//!
//! One step sweeps every task once. In sequential mode each task samples
//! its rollout group from the current policy and applies its own update
//! before the next task runs; aggregated mode samples all tasks against the
//! frozen pre-step policy and applies one summed update.

use serde::{Deserialize, Serialize};

use crate::analytics::web::{build_snapshot, WebStats};
use crate::config::{TrainConfig, UpdateMode};
use crate::error::Result;
use crate::graph::{ConceptGraph, Task, TaskSet};
use crate::policy::{GradientAccumulator, Policy};
use crate::rollout::{evaluate_all, map_indexed, sample_group, Execution, RolloutGroup, TaskEval};

/// Summary of one task's rollout group.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupStats {
    pub n_rollout: usize,
    pub n_correct: usize,
    pub mean_reward: f64,
    pub correct_lengths: Vec<usize>,
}

impl GroupStats {
    fn from_group(group: &RolloutGroup) -> Self {
        Self {
            n_rollout: group.trajectories.len(),
            n_correct: group.n_correct(),
            mean_reward: group.mean_reward,
            correct_lengths: group.correct_lengths().collect(),
        }
    }

    pub fn correct_length_mean(&self) -> Option<f64> {
        mean(&self.correct_lengths)
    }

    pub fn correct_length_variance(&self) -> Option<f64> {
        variance(&self.correct_lengths)
    }
}

fn mean(xs: &[usize]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<usize>() as f64 / xs.len() as f64)
}

fn variance(xs: &[usize]) -> Option<f64> {
    if xs.len() < 2 {
        return None;
    }
    let m = mean(xs)?;
    Some(xs.iter().map(|&x| (x as f64 - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64)
}

fn accumulate_group(acc: &mut GradientAccumulator<'_>, group: &RolloutGroup) {
    for (traj, &adv) in group.trajectories.iter().zip(&group.advantages) {
        if adv == 0.0 {
            continue;
        }
        for (node, slot) in traj.steps() {
            acc.add_step(node, slot, adv);
        }
    }
}

fn gradient_scale(cfg: &TrainConfig) -> f64 {
    if cfg.advantage_mean_divide {
        1.0 / cfg.n_rollout as f64
    } else {
        1.0
    }
}

/// Samples one rollout group for `task` and applies
/// `lr * sum_m A_m * sum_t grad log pi(step_t)` to the policy.
pub fn grpo_task_update(
    policy: &mut Policy,
    graph: &ConceptGraph,
    task_id: usize,
    task: &Task,
    cfg: &TrainConfig,
    step: usize,
) -> Result<GroupStats> {
    let group = sample_group(
        policy,
        graph,
        task,
        task_id,
        cfg.n_rollout,
        cfg.l_max,
        cfg.master_seed,
        step,
        cfg.execution,
    )?;
    let stats = GroupStats::from_group(&group);
    if group.advantages.iter().all(|&a| a == 0.0) {
        return Ok(stats);
    }
    let grad = {
        let mut acc = GradientAccumulator::new(policy);
        accumulate_group(&mut acc, &group);
        acc.finish(gradient_scale(cfg))
    };
    policy.apply_update(&grad, cfg.learning_rate)?;
    Ok(stats)
}

/// Per-step record. Training fields come from this step's rollouts (drawn
/// from the policy before the step's updates); web statistics and the
/// optional evaluation describe the policy after the step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub mean_reward: f64,
    /// Mean length over successful rollouts; `None` when nothing succeeded.
    pub mean_correct_length: Option<f64>,
    /// Successful-rollout counts by path length; index `l - 1` holds length `l`.
    pub correct_length_counts: Vec<u64>,
    pub per_problem_accuracy: Vec<f64>,
    pub per_problem_correct_length_mean: Vec<Option<f64>>,
    pub per_problem_correct_length_variance: Vec<Option<f64>>,
    pub web_edges: usize,
    pub cluster_count: usize,
    pub max_cluster_size: usize,
    pub avg_degree_largest: Option<f64>,
    /// Fresh-rollout evaluation of every task, present on evaluation steps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evaluation: Option<Vec<TaskEval>>,
}

impl StepMetrics {
    pub fn web_stats(&self) -> WebStats {
        WebStats {
            web_edges: self.web_edges,
            cluster_count: self.cluster_count,
            max_cluster_size: self.max_cluster_size,
            avg_degree_largest: self.avg_degree_largest,
        }
    }

    /// Mean evaluated accuracy over tasks, if this step was evaluated.
    pub fn eval_mean_accuracy(&self) -> Option<f64> {
        self.evaluation.as_ref().map(|e| mean_accuracy(e))
    }
}

pub fn mean_accuracy(evals: &[TaskEval]) -> f64 {
    if evals.is_empty() {
        return 0.0;
    }
    evals.iter().map(TaskEval::accuracy).sum::<f64>() / evals.len() as f64
}

/// Whether `step` (1-based, counted after its update) gets a fresh evaluation.
pub fn is_eval_step(cfg: &TrainConfig, step: usize) -> bool {
    step % cfg.eval_every == 0 || step == cfg.total_steps
}

/// Evaluates every task with the dedicated evaluation stream for `step`.
pub fn evaluate_policy(policy: &Policy, graph: &ConceptGraph, tasks: &TaskSet, cfg: &TrainConfig, step: usize) -> Vec<TaskEval> {
    evaluate_all(
        policy,
        graph,
        tasks.tasks(),
        cfg.eval_samples,
        cfg.l_max,
        cfg.master_seed,
        &[0, step as u64],
        cfg.execution,
    )
}

/// Runs training step `step` (1-based): one update sweep over all tasks.
pub fn train_step(
    policy: &mut Policy,
    graph: &ConceptGraph,
    tasks: &TaskSet,
    cfg: &TrainConfig,
    step: usize,
) -> Result<StepMetrics> {
    let stats: Vec<GroupStats> = match cfg.update_mode {
        UpdateMode::Sequential => {
            let mut out = Vec::with_capacity(tasks.len());
            for (id, task) in tasks.tasks().iter().enumerate() {
                out.push(grpo_task_update(policy, graph, id, task, cfg, step)?);
            }
            out
        }
        UpdateMode::Aggregated => {
            let frozen: &Policy = policy;
            let inner = TrainConfig {
                execution: Execution::Sequential,
                ..cfg.clone()
            };
            let groups = map_indexed(tasks.len(), cfg.execution, |id| {
                let task = &tasks.tasks()[id];
                sample_group(frozen, graph, task, id, inner.n_rollout, inner.l_max, inner.master_seed, step, inner.execution)
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
            let grad = {
                let mut acc = GradientAccumulator::new(frozen);
                for g in &groups {
                    accumulate_group(&mut acc, g);
                }
                acc.finish(gradient_scale(cfg))
            };
            let stats = groups.iter().map(GroupStats::from_group).collect();
            if !grad.is_empty() {
                policy.apply_update(&grad, cfg.learning_rate)?;
            }
            stats
        }
    };

    let total_rollouts: usize = stats.iter().map(|s| s.n_rollout).sum();
    let total_correct: usize = stats.iter().map(|s| s.n_correct).sum();
    let mut counts = vec![0u64; cfg.l_max];
    let mut length_sum = 0usize;
    for s in &stats {
        for &l in &s.correct_lengths {
            counts[l - 1] += 1;
            length_sum += l;
        }
    }
    let web = build_snapshot(policy, graph, cfg.web_threshold, step).stats();
    let evaluation = is_eval_step(cfg, step).then(|| evaluate_policy(policy, graph, tasks, cfg, step));

    Ok(StepMetrics {
        step,
        mean_reward: total_correct as f64 / total_rollouts.max(1) as f64,
        mean_correct_length: (total_correct > 0).then(|| length_sum as f64 / total_correct as f64),
        correct_length_counts: counts,
        per_problem_accuracy: stats.iter().map(|s| s.mean_reward).collect(),
        per_problem_correct_length_mean: stats.iter().map(GroupStats::correct_length_mean).collect(),
        per_problem_correct_length_variance: stats.iter().map(GroupStats::correct_length_variance).collect(),
        web_edges: web.web_edges,
        cluster_count: web.cluster_count,
        max_cluster_size: web.max_cluster_size,
        avg_degree_largest: web.avg_degree_largest,
        evaluation,
    })
}

/// In-memory simulation state: graph, tasks, policy and the number of
/// completed steps.
#[derive(Clone, Debug)]
pub struct Simulation {
    pub config: TrainConfig,
    pub graph: ConceptGraph,
    pub tasks: TaskSet,
    pub policy: Policy,
    pub step: usize,
}

impl Simulation {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let graph = ConceptGraph::generate(config.n_nodes, config.out_degree, config.master_seed)?;
        let tasks = TaskSet::sample(&graph, config.n_tasks, config.master_seed)?;
        let policy = Policy::init(&graph, config.master_seed, config.init_low, config.init_high, config.theta_floor)?;
        Ok(Self {
            config,
            graph,
            tasks,
            policy,
            step: 0,
        })
    }

    pub fn step_once(&mut self) -> Result<StepMetrics> {
        let next = self.step + 1;
        let m = train_step(&mut self.policy, &self.graph, &self.tasks, &self.config, next)?;
        self.step = next;
        Ok(m)
    }

    /// Trains until `self.step == until`, handing each record to `sink`.
    pub fn run_until<F>(&mut self, until: usize, mut sink: F) -> Result<()>
    where
        F: FnMut(&Self, StepMetrics) -> Result<()>,
    {
        while self.step < until {
            let m = self.step_once()?;
            sink(self, m)?;
        }
        Ok(())
    }

    pub fn evaluate(&self, step_key: usize) -> Vec<TaskEval> {
        evaluate_policy(&self.policy, &self.graph, &self.tasks, &self.config, step_key)
    }
}
