//! Policy-guided walks from a question node toward its answer node.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{ConceptGraph, NodeId, Task};
use crate::policy::Policy;
use crate::seeds::{stream_rng, Stream};

/// How independent rollouts are scheduled. Results are identical either
/// way: every rollout owns its own seeded stream.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Execution {
    #[default]
    Parallel,
    Sequential,
}

/// Maps `f` over `0..n`, on the rayon pool when `exec` is parallel and the
/// `parallel` feature is enabled. Output order always follows the index.
pub fn map_indexed<T, F>(n: usize, exec: Execution, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Execution::Parallel => {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(f).collect()
        }
        _ => (0..n).map(f).collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trajectory {
    /// Visited nodes, starting at the question; `nodes.len() == slots.len() + 1`.
    pub nodes: Vec<NodeId>,
    /// Slot chosen at `nodes[i]` to reach `nodes[i + 1]`.
    pub slots: Vec<usize>,
    pub success: bool,
}

impl Trajectory {
    pub fn length(&self) -> usize {
        self.slots.len()
    }

    pub fn reward(&self) -> f64 {
        if self.success {
            1.0
        } else {
            0.0
        }
    }

    pub fn steps(&self) -> impl Iterator<Item = (NodeId, usize)> + '_ {
        self.nodes.iter().copied().zip(self.slots.iter().copied())
    }

    /// Checks every structural invariant against the graph and task.
    pub fn validate(&self, graph: &ConceptGraph, task: &Task, l_max: usize) -> Result<()> {
        if self.nodes.first() != Some(&task.question) || self.nodes.len() != self.slots.len() + 1 {
            return Err(Error::param("trajectory does not start at the question"));
        }
        if self.length() > l_max {
            return Err(Error::param("trajectory exceeds l_max"));
        }
        for (i, (node, slot)) in self.steps().enumerate() {
            if slot >= graph.out_degree() || graph.target(node, slot) != self.nodes[i + 1] {
                return Err(Error::param(format!("step {i} does not follow a graph edge")));
            }
            if node == task.answer {
                return Err(Error::param("trajectory continues past the answer"));
            }
        }
        let last = *self.nodes.last().unwrap();
        if self.success != (last == task.answer) {
            return Err(Error::param("reward inconsistent with final node"));
        }
        if !self.success && self.length() != l_max {
            return Err(Error::param("failed trajectory stopped before l_max"));
        }
        Ok(())
    }
}

/// Walks from `task.question`, stopping on the answer (reward 1) or after
/// `l_max` steps (reward 0). Revisits are allowed.
pub fn sample_path<R: Rng + ?Sized>(
    policy: &Policy,
    graph: &ConceptGraph,
    task: &Task,
    l_max: usize,
    rng: &mut R,
) -> Trajectory {
    debug_assert!(task.question != task.answer && l_max >= 1);
    let mut nodes = Vec::with_capacity(l_max.min(32) + 1);
    let mut slots = Vec::with_capacity(l_max.min(32));
    let mut node = task.question;
    nodes.push(node);
    let mut success = false;
    for _ in 0..l_max {
        let slot = policy.sample_slot(node, rng);
        node = graph.target(node, slot);
        slots.push(slot);
        nodes.push(node);
        if node == task.answer {
            success = true;
            break;
        }
    }
    Trajectory { nodes, slots, success }
}

/// Mean-centred advantages `r_m - mean(r)`, without variance scaling.
pub fn group_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.is_empty() {
        return Err(Error::param("advantages need at least one reward"));
    }
    let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
    Ok(rewards.iter().map(|r| r - mean).collect())
}

#[derive(Clone, Debug)]
pub struct RolloutGroup {
    pub trajectories: Vec<Trajectory>,
    pub advantages: Vec<f64>,
    pub mean_reward: f64,
}

impl RolloutGroup {
    pub fn from_trajectories(trajectories: Vec<Trajectory>) -> Result<Self> {
        let rewards: Vec<f64> = trajectories.iter().map(Trajectory::reward).collect();
        let advantages = group_advantages(&rewards)?;
        let mean_reward = rewards.iter().sum::<f64>() / rewards.len() as f64;
        Ok(Self {
            trajectories,
            advantages,
            mean_reward,
        })
    }

    pub fn n_correct(&self) -> usize {
        self.trajectories.iter().filter(|t| t.success).count()
    }

    pub fn correct_lengths(&self) -> impl Iterator<Item = usize> + '_ {
        self.trajectories.iter().filter(|t| t.success).map(Trajectory::length)
    }
}

/// Training rollouts for one task at one step. Rollout `m` draws from the
/// stream keyed `(step, task_id, m)`.
#[allow(clippy::too_many_arguments)]
pub fn sample_group(
    policy: &Policy,
    graph: &ConceptGraph,
    task: &Task,
    task_id: usize,
    n_rollout: usize,
    l_max: usize,
    master_seed: u64,
    step: usize,
    exec: Execution,
) -> Result<RolloutGroup> {
    let trajectories = map_indexed(n_rollout, exec, |m| {
        let mut rng = stream_rng(master_seed, Stream::Rollout, &[step as u64, task_id as u64, m as u64]);
        sample_path(policy, graph, task, l_max, &mut rng)
    });
    RolloutGroup::from_trajectories(trajectories)
}

/// Outcome of fresh evaluation rollouts for one task.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskEval {
    pub n_samples: usize,
    pub n_correct: usize,
    pub correct_length_sum: f64,
    pub correct_length_sq_sum: f64,
}

impl TaskEval {
    pub fn accuracy(&self) -> f64 {
        if self.n_samples == 0 {
            0.0
        } else {
            self.n_correct as f64 / self.n_samples as f64
        }
    }

    pub fn correct_length_mean(&self) -> Option<f64> {
        (self.n_correct > 0).then(|| self.correct_length_sum / self.n_correct as f64)
    }

    /// Unbiased sample variance; needs at least two correct samples.
    pub fn correct_length_variance(&self) -> Option<f64> {
        if self.n_correct < 2 {
            return None;
        }
        let n = self.n_correct as f64;
        let mean = self.correct_length_sum / n;
        Some(((self.correct_length_sq_sum - n * mean * mean) / (n - 1.0)).max(0.0))
    }

    fn record(&mut self, t: &Trajectory) {
        self.n_samples += 1;
        if t.success {
            let l = t.length() as f64;
            self.n_correct += 1;
            self.correct_length_sum += l;
            self.correct_length_sq_sum += l * l;
        }
    }
}

/// Runs `n_samples` independent walks and tallies successes. Sample `s`
/// draws from the stream keyed `(stream_key..., s)`; the policy is only read.
pub fn evaluate_task(
    policy: &Policy,
    graph: &ConceptGraph,
    task: &Task,
    n_samples: usize,
    l_max: usize,
    master_seed: u64,
    stream_key: &[u64],
) -> TaskEval {
    let mut key = stream_key.to_vec();
    key.push(0);
    let mut eval = TaskEval::default();
    for s in 0..n_samples {
        *key.last_mut().unwrap() = s as u64;
        let mut rng = stream_rng(master_seed, Stream::Eval, &key);
        eval.record(&sample_path(policy, graph, task, l_max, &mut rng));
    }
    eval
}

/// Fraction of `n_samples` fresh walks that reach the answer.
pub fn evaluate_accuracy<R: Rng + ?Sized>(
    policy: &Policy,
    graph: &ConceptGraph,
    task: &Task,
    n_samples: usize,
    l_max: usize,
    rng: &mut R,
) -> f64 {
    assert!(n_samples >= 1, "n_samples must be positive");
    let hits = (0..n_samples)
        .filter(|_| sample_path(policy, graph, task, l_max, rng).success)
        .count();
    hits as f64 / n_samples as f64
}

/// Evaluates every task, parallel across tasks when `exec` allows.
pub fn evaluate_all(
    policy: &Policy,
    graph: &ConceptGraph,
    tasks: &[Task],
    n_samples: usize,
    l_max: usize,
    master_seed: u64,
    stream_key: &[u64],
    exec: Execution,
) -> Vec<TaskEval> {
    map_indexed(tasks.len(), exec, |i| {
        let mut key = stream_key.to_vec();
        key.push(i as u64);
        evaluate_task(policy, graph, &tasks[i], n_samples, l_max, master_seed, &key)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::DEFAULT_THETA_FLOOR;
    use proptest::prelude::*;

    fn uniform(g: &ConceptGraph) -> Policy {
        Policy::from_theta(vec![1.0; g.n_edges()], g.out_degree(), DEFAULT_THETA_FLOOR)
    }

    #[test]
    fn two_node_walk() {
        let g = ConceptGraph::generate(2, 1, 0).unwrap();
        let p = uniform(&g);
        let task = Task { question: 0, answer: 1 };
        let mut rng = stream_rng(0, Stream::Rollout, &[]);
        let t = sample_path(&p, &g, &task, 20, &mut rng);
        assert_eq!(t.nodes, vec![0, 1]);
        assert!(t.success);
        assert_eq!(t.length(), 1);
    }

    #[test]
    fn deterministic_chain_walk() {
        // 0 -> 1 -> 2 -> 3 carries all mass; slot 1 is a near-zero detour
        let adjacency = vec![vec![1, 4], vec![2, 4], vec![3, 4], vec![0, 4], vec![0, 1]];
        let g = ConceptGraph::from_adjacency(&adjacency, 0).unwrap();
        let mut theta = vec![1.0; g.n_edges()];
        for node in 0..4 {
            theta[g.edge_id(node, 1)] = 0.0;
        }
        let p = Policy::from_theta(theta, 2, 1e-300);
        let task = Task { question: 0, answer: 3 };
        let mut rng = stream_rng(1, Stream::Rollout, &[]);
        let t = sample_path(&p, &g, &task, 20, &mut rng);
        assert_eq!(t.nodes, vec![0, 1, 2, 3]);
        assert!(t.success);
    }

    fn walks_reaching(g: &ConceptGraph, from: NodeId, to: NodeId, max_len: usize) -> usize {
        // brute-force enumeration of every walk of length 1..=max_len
        let mut frontier = vec![from];
        let mut hits = 0;
        for _ in 0..max_len {
            let mut next = Vec::new();
            for &u in &frontier {
                for &v in g.out_edges(u) {
                    if v as usize == to {
                        hits += 1;
                    } else {
                        next.push(v as usize);
                    }
                }
            }
            frontier = next;
        }
        hits
    }

    #[test]
    fn answer_beyond_cap_is_never_reached() {
        // 0 -> 1 -> 2 -> 0 cycle plus node 3, reachable only from 2
        let adjacency = vec![vec![1, 2], vec![2, 0], vec![0, 3], vec![0, 1]];
        let g = ConceptGraph::from_adjacency(&adjacency, 0).unwrap();
        let p = uniform(&g);
        let task = Task { question: 1, answer: 3 };
        assert_eq!(walks_reaching(&g, 1, 3, 1), 0);
        assert!(walks_reaching(&g, 1, 3, 2) > 0);
        let mut rng = stream_rng(2, Stream::Rollout, &[]);
        for _ in 0..200 {
            let t = sample_path(&p, &g, &task, 1, &mut rng);
            assert!(!t.success);
            assert_eq!(t.length(), 1);
        }
        // 4-cycle: the answer is three hops away
        let g = ConceptGraph::from_adjacency(&[vec![1], vec![2], vec![3], vec![0]], 0).unwrap();
        let p = uniform(&g);
        assert_eq!(walks_reaching(&g, 0, 3, 2), 0);
        let t = sample_path(&p, &g, &Task { question: 0, answer: 3 }, 2, &mut rng);
        assert!(!t.success);
        assert_eq!(t.length(), 2);
        assert_eq!(t.nodes, vec![0, 1, 2]);
    }

    #[test]
    fn advantage_examples() {
        assert_eq!(group_advantages(&[1.0, 0.0, 0.0, 1.0]).unwrap(), vec![0.5, -0.5, -0.5, 0.5]);
        assert_eq!(group_advantages(&[0.0; 5]).unwrap(), vec![0.0; 5]);
        assert_eq!(group_advantages(&[1.0; 5]).unwrap(), vec![0.0; 5]);
        assert!(group_advantages(&[]).is_err());
    }

    #[test]
    fn evaluation_extremes() {
        let g = ConceptGraph::generate(2, 1, 0).unwrap();
        let p = uniform(&g);
        let mut rng = stream_rng(4, Stream::Eval, &[]);
        assert_eq!(evaluate_accuracy(&p, &g, &Task { question: 0, answer: 1 }, 64, 20, &mut rng), 1.0);

        // node 2 sits outside the 0 <-> 1 loop
        let g = ConceptGraph::from_adjacency(&[vec![1, 2], vec![0, 2], vec![0, 1]], 0).unwrap();
        let mut theta = vec![1.0; 6];
        theta[1] = 0.0;
        theta[3] = 0.0;
        let p = Policy::from_theta(theta, 2, 1e-300);
        let acc = evaluate_accuracy(&p, &g, &Task { question: 0, answer: 2 }, 64, 20, &mut rng);
        assert_eq!(acc, 0.0);
    }

    #[test]
    fn fork_accuracy_matches_bernoulli_parameter() {
        // node 0 forks to the answer (weight 3) or a dead end (weight 1)
        let g = ConceptGraph::from_adjacency(&[vec![1, 2], vec![0, 2], vec![0, 1]], 0).unwrap();
        let theta = vec![3.0, 1.0, 1.0, 1.0, 1.0, 1.0];
        let p = Policy::from_theta(theta, 2, DEFAULT_THETA_FLOOR);
        let n = 20_000;
        let mut rng = stream_rng(5, Stream::Eval, &[]);
        let acc = evaluate_accuracy(&p, &g, &Task { question: 0, answer: 1 }, n, 1, &mut rng);
        let se = (0.75f64 * 0.25 / n as f64).sqrt();
        assert!((acc - 0.75).abs() < 3.0 * se, "acc {acc}");
    }

    #[test]
    fn evaluation_does_not_touch_policy() {
        let g = ConceptGraph::generate(30, 3, 1).unwrap();
        let p = Policy::init(&g, 1, 0.5, 1.5, DEFAULT_THETA_FLOOR).unwrap();
        let before = p.clone();
        let _ = evaluate_task(&p, &g, &Task { question: 0, answer: 5 }, 32, 10, 1, &[0]);
        assert_eq!(p, before);
    }

    #[test]
    fn parallel_and_sequential_groups_agree() {
        let g = ConceptGraph::generate(60, 6, 3).unwrap();
        let p = Policy::init(&g, 3, 0.5, 1.5, DEFAULT_THETA_FLOOR).unwrap();
        let task = Task { question: 1, answer: 2 };
        let a = sample_group(&p, &g, &task, 0, 64, 20, 3, 7, Execution::Parallel).unwrap();
        let b = sample_group(&p, &g, &task, 0, 64, 20, 3, 7, Execution::Sequential).unwrap();
        assert_eq!(a.trajectories, b.trajectories);
    }

    proptest! {
        #[test]
        fn trajectories_are_valid_and_groups_zero_sum(seed in 0u64..500, q in 0usize..40, off in 1usize..40, l_max in 1usize..25) {
            let g = ConceptGraph::generate(40, 3, seed).unwrap();
            let p = Policy::init(&g, seed, 0.5, 1.5, DEFAULT_THETA_FLOOR).unwrap();
            let task = Task { question: q, answer: (q + off) % 40 };
            let group = sample_group(&p, &g, &task, 0, 32, l_max, seed, 0, Execution::Sequential).unwrap();
            for t in &group.trajectories {
                prop_assert!(t.validate(&g, &task, l_max).is_ok());
            }
            let total: f64 = group.advantages.iter().sum();
            prop_assert!(total.abs() < 1e-12);
            prop_assert_eq!(group.advantages.len(), 32);
        }
    }
}
