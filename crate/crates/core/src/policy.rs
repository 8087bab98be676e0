//! Learnable transition weights.
//!
//! The walk moves from node `i` along out-edge `j` with probability
//! `theta_ij / sum_l theta_il`. Weights stay strictly positive: every write
//! clamps at `theta_floor`.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{ConceptGraph, EdgeId, NodeId};
use crate::seeds::{stream_rng, Stream};

pub const DEFAULT_THETA_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct Policy {
    theta: Vec<f64>,
    row_sums: Vec<f64>,
    out_degree: usize,
    theta_floor: f64,
}

impl Policy {
    /// Draws every weight independently and uniformly from
    /// `[init_low, init_high]`.
    pub fn init(
        graph: &ConceptGraph,
        seed: u64,
        init_low: f64,
        init_high: f64,
        theta_floor: f64,
    ) -> Result<Self> {
        if !(init_low > 0.0 && init_low <= init_high && init_high.is_finite()) {
            return Err(Error::param(format!(
                "init bounds must satisfy 0 < low <= high (got {init_low}, {init_high})"
            )));
        }
        if !(theta_floor > 0.0 && theta_floor <= init_low) {
            return Err(Error::param(format!(
                "theta_floor must be in (0, init_low] (got {theta_floor})"
            )));
        }
        let mut rng = stream_rng(seed, Stream::Init, &[]);
        let span = init_high - init_low;
        let theta = (0..graph.n_edges())
            .map(|_| {
                if span == 0.0 {
                    init_low
                } else {
                    init_low + span * rng.random::<f64>()
                }
            })
            .collect();
        Ok(Self::from_theta(theta, graph.out_degree(), theta_floor))
    }

    /// Wraps explicit weights, clamping each at the floor.
    pub fn from_theta(mut theta: Vec<f64>, out_degree: usize, theta_floor: f64) -> Self {
        assert!(out_degree > 0 && theta.len() % out_degree == 0);
        for t in &mut theta {
            *t = t.max(theta_floor);
        }
        let row_sums = theta.chunks(out_degree).map(|r| r.iter().sum()).collect();
        Self {
            theta,
            row_sums,
            out_degree,
            theta_floor,
        }
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn theta_floor(&self) -> f64 {
        self.theta_floor
    }

    pub fn out_degree(&self) -> usize {
        self.out_degree
    }

    pub fn n_nodes(&self) -> usize {
        self.row_sums.len()
    }

    #[inline]
    pub fn row(&self, node: NodeId) -> &[f64] {
        let start = node * self.out_degree;
        &self.theta[start..start + self.out_degree]
    }

    #[inline]
    pub fn row_sum(&self, node: NodeId) -> f64 {
        self.row_sums[node]
    }

    #[inline]
    pub fn prob(&self, node: NodeId, slot: usize) -> f64 {
        self.row(node)[slot] / self.row_sums[node]
    }

    pub fn transition_distribution(&self, node: NodeId) -> Vec<f64> {
        let s = self.row_sums[node];
        self.row(node).iter().map(|t| t / s).collect()
    }

    /// Samples an out-edge slot at `node` in proportion to its weight.
    #[inline]
    pub fn sample_slot<R: Rng + ?Sized>(&self, node: NodeId, rng: &mut R) -> usize {
        let row = self.row(node);
        let mut u = rng.random::<f64>() * self.row_sums[node];
        for (slot, &w) in row.iter().enumerate() {
            if u < w {
                return slot;
            }
            u -= w;
        }
        // u landed in the rounding gap past the last weight
        row.len() - 1
    }

    /// Gradient of `log pi(chosen | node)` with respect to the weights of
    /// `node`'s out-edges: `1/theta_chosen - 1/S` on the chosen edge and
    /// `-1/S` on every other edge.
    pub fn log_prob_gradient(&self, graph: &ConceptGraph, node: NodeId, chosen_slot: usize) -> SparseGradient {
        assert!(chosen_slot < self.out_degree, "slot {chosen_slot} out of range");
        let s = self.row_sums[node];
        let row = self.row(node);
        let entries = (0..self.out_degree)
            .map(|slot| {
                let g = if slot == chosen_slot {
                    1.0 / row[slot] - 1.0 / s
                } else {
                    -1.0 / s
                };
                (graph.edge_id(node, slot), g)
            })
            .collect();
        SparseGradient { entries }
    }

    /// `theta_e <- max(floor, theta_e + lr * g_e)` on every touched edge.
    /// Rejects the whole update if any entry is non-finite.
    pub fn apply_update(&mut self, grad: &SparseGradient, learning_rate: f64) -> Result<()> {
        if !learning_rate.is_finite() {
            return Err(Error::Numeric(format!("learning rate {learning_rate} is not finite")));
        }
        if let Some((e, g)) = grad.entries.iter().find(|(_, g)| !g.is_finite()) {
            return Err(Error::Numeric(format!("gradient entry for edge {e} is {g}")));
        }
        if let Some((e, _)) = grad.entries.iter().find(|(e, _)| *e >= self.theta.len()) {
            return Err(Error::param(format!("gradient references unknown edge {e}")));
        }
        let mut last_row = usize::MAX;
        for &(edge, g) in &grad.entries {
            let t = &mut self.theta[edge];
            *t = (*t + learning_rate * g).max(self.theta_floor);
            let row = edge / self.out_degree;
            if row != last_row {
                if last_row != usize::MAX {
                    self.refresh_row_sum(last_row);
                }
                last_row = row;
            }
        }
        if last_row != usize::MAX {
            self.refresh_row_sum(last_row);
        }
        Ok(())
    }

    /// Replaces a node's weights wholesale (used by interventions).
    pub fn set_row(&mut self, node: NodeId, weights: &[f64]) {
        assert_eq!(weights.len(), self.out_degree);
        let start = node * self.out_degree;
        for (dst, &w) in self.theta[start..start + self.out_degree].iter_mut().zip(weights) {
            *dst = w.max(self.theta_floor);
        }
        self.refresh_row_sum(node);
    }

    fn refresh_row_sum(&mut self, node: NodeId) {
        self.row_sums[node] = self.row(node).iter().sum();
    }

    /// Highest-probability slot at `node`; ties go to the lower slot.
    pub fn argmax_slot(&self, node: NodeId) -> usize {
        let row = self.row(node);
        let mut best = 0;
        for (slot, &w) in row.iter().enumerate().skip(1) {
            if w > row[best] {
                best = slot;
            }
        }
        best
    }

    /// Checkpoint format: version line, `seed step n_edges out_degree
    /// theta_floor` header, then `edge_id theta` per line. Floats use the
    /// shortest round-trip decimal form, so reload is bit-exact.
    pub fn write_checkpoint<W: Write>(&self, mut out: W, seed: u64, step: usize) -> Result<()> {
        writeln!(out, "# conet-policy v1")?;
        writeln!(
            out,
            "{seed} {step} {} {} {}",
            self.theta.len(),
            self.out_degree,
            self.theta_floor
        )?;
        for (e, t) in self.theta.iter().enumerate() {
            writeln!(out, "{e} {t}")?;
        }
        Ok(())
    }

    /// Returns `(policy, seed, step)`.
    pub fn read_checkpoint<R: BufRead>(input: R) -> Result<(Self, u64, usize)> {
        const KIND: &str = "policy checkpoint";
        let mut lines = input.lines();
        let version = lines.next().ok_or_else(|| Error::format(KIND, "empty file"))??;
        if version.trim() != "# conet-policy v1" {
            return Err(Error::format(KIND, format!("unsupported version line `{version}`")));
        }
        let header = lines.next().ok_or_else(|| Error::format(KIND, "missing header"))??;
        let h: Vec<&str> = header.split_whitespace().collect();
        if h.len() != 5 {
            return Err(Error::format(KIND, "header must have 5 fields"));
        }
        let bad = |what: &str| Error::format(KIND, format!("bad {what} in header"));
        let seed: u64 = h[0].parse().map_err(|_| bad("seed"))?;
        let step: usize = h[1].parse().map_err(|_| bad("step"))?;
        let n_edges: usize = h[2].parse().map_err(|_| bad("edge count"))?;
        let out_degree: usize = h[3].parse().map_err(|_| bad("out_degree"))?;
        let floor: f64 = h[4].parse().map_err(|_| bad("theta_floor"))?;
        if out_degree == 0 || n_edges % out_degree != 0 || !(floor > 0.0) {
            return Err(Error::format(KIND, "inconsistent header"));
        }
        let mut theta = Vec::with_capacity(n_edges);
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut it = line.split_whitespace();
            let (Some(e), Some(t), None) = (it.next(), it.next(), it.next()) else {
                return Err(Error::format(KIND, format!("bad line `{line}`")));
            };
            if e.parse::<usize>().ok() != Some(theta.len()) {
                return Err(Error::format(KIND, format!("edge ids out of order at `{line}`")));
            }
            let t: f64 = t
                .parse()
                .map_err(|_| Error::format(KIND, format!("bad weight in `{line}`")))?;
            if !(t >= floor && t.is_finite()) {
                return Err(Error::format(KIND, format!("weight below floor in `{line}`")));
            }
            theta.push(t);
        }
        if theta.len() != n_edges {
            return Err(Error::format(KIND, "edge count mismatch"));
        }
        Ok((Self::from_theta(theta, out_degree, floor), seed, step))
    }
}

/// Gradient entries keyed by edge id, sorted ascending with no duplicates.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SparseGradient {
    entries: Vec<(EdgeId, f64)>,
}

impl SparseGradient {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_map(map: BTreeMap<EdgeId, f64>) -> Self {
        Self {
            entries: map.into_iter().collect(),
        }
    }

    pub fn entries(&self) -> &[(EdgeId, f64)] {
        &self.entries
    }

    pub fn get(&self, edge: EdgeId) -> f64 {
        self.entries
            .binary_search_by_key(&edge, |&(e, _)| e)
            .map_or(0.0, |i| self.entries[i].1)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &SparseGradient, scale: f64) {
        let mut merged = Vec::with_capacity(self.entries.len() + other.entries.len());
        let (mut i, mut j) = (0, 0);
        while i < self.entries.len() || j < other.entries.len() {
            match (self.entries.get(i), other.entries.get(j)) {
                (Some(&(a, x)), Some(&(b, y))) if a == b => {
                    merged.push((a, x + scale * y));
                    i += 1;
                    j += 1;
                }
                (Some(&(a, x)), Some(&(b, _))) if a < b => {
                    merged.push((a, x));
                    i += 1;
                }
                (Some(&(a, x)), None) => {
                    merged.push((a, x));
                    i += 1;
                }
                (_, Some(&(b, y))) => {
                    merged.push((b, scale * y));
                    j += 1;
                }
                (None, None) => unreachable!(),
            }
        }
        self.entries = merged;
    }
}

/// Accumulates `sum_m A_m * sum_t grad log pi(slot_t | node_t)` over many
/// trajectories without materialising one gradient per step.
///
/// Each visited step contributes `+A/theta_chosen` to its chosen edge and
/// `-A/S_node` to every out-edge of the node; the per-node term is collected
/// once and expanded in `finish`. Weights are read from the policy at
/// construction time, so the policy must not change while accumulating.
pub struct GradientAccumulator<'a> {
    policy: &'a Policy,
    chosen: Vec<f64>,
    node_coef: Vec<f64>,
    touched: Vec<bool>,
    touched_nodes: Vec<NodeId>,
}

impl<'a> GradientAccumulator<'a> {
    pub fn new(policy: &'a Policy) -> Self {
        Self {
            policy,
            chosen: vec![0.0; policy.theta.len()],
            node_coef: vec![0.0; policy.n_nodes()],
            touched: vec![false; policy.n_nodes()],
            touched_nodes: Vec::new(),
        }
    }

    #[inline]
    pub fn add_step(&mut self, node: NodeId, slot: usize, weight: f64) {
        let edge = node * self.policy.out_degree + slot;
        self.chosen[edge] += weight / self.policy.theta[edge];
        self.node_coef[node] += weight / self.policy.row_sums[node];
        if !self.touched[node] {
            self.touched[node] = true;
            self.touched_nodes.push(node);
        }
    }

    pub fn finish(mut self, scale: f64) -> SparseGradient {
        self.touched_nodes.sort_unstable();
        let k = self.policy.out_degree;
        let mut entries = Vec::with_capacity(self.touched_nodes.len() * k);
        for &node in &self.touched_nodes {
            let c = self.node_coef[node];
            for slot in 0..k {
                let e = node * k + slot;
                entries.push((e, scale * (self.chosen[e] - c)));
            }
        }
        SparseGradient { entries }
    }
}
