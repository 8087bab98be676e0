//! The concept web: edges whose transition probability exceeds a threshold,
//! split into weakly connected clusters.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::union_find::UnionFind;
use crate::error::{Error, Result};
use crate::graph::{ConceptGraph, NodeId};
use crate::policy::Policy;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WebEdge {
    pub source: NodeId,
    pub target: NodeId,
    pub prob: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WebSnapshot {
    pub step: usize,
    pub threshold: f64,
    /// Sorted by `(source, target)`.
    pub edges: Vec<WebEdge>,
    /// Clusters of nodes touching at least one web edge, each sorted
    /// ascending. Ordered by size descending, then smallest node id, so the
    /// largest cluster is always first.
    pub components: Vec<Vec<NodeId>>,
    /// `2E/V` on the undirected projection of the largest cluster.
    pub avg_degree_largest: Option<f64>,
}

impl WebSnapshot {
    pub fn cluster_count(&self) -> usize {
        self.components.len()
    }

    pub fn max_cluster_size(&self) -> usize {
        self.components.first().map_or(0, Vec::len)
    }

    pub fn largest(&self) -> Option<&[NodeId]> {
        self.components.first().map(Vec::as_slice)
    }

    pub fn stats(&self) -> WebStats {
        WebStats {
            web_edges: self.edges.len(),
            cluster_count: self.cluster_count(),
            max_cluster_size: self.max_cluster_size(),
            avg_degree_largest: self.avg_degree_largest,
        }
    }

    /// Edge-list dump: version line, `step threshold n_edges`, then
    /// `source target prob` per web edge.
    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "# conet-web v1")?;
        writeln!(out, "{} {} {}", self.step, self.threshold, self.edges.len())?;
        for e in &self.edges {
            writeln!(out, "{} {} {}", e.source, e.target, e.prob)?;
        }
        Ok(())
    }

    /// Reads an edge-list dump and recomputes the cluster decomposition.
    pub fn read<R: BufRead>(input: R, n_nodes: usize) -> Result<Self> {
        const KIND: &str = "web snapshot";
        let mut lines = input.lines();
        let version = lines.next().ok_or_else(|| Error::format(KIND, "empty file"))??;
        if version.trim() != "# conet-web v1" {
            return Err(Error::format(KIND, format!("unsupported version line `{version}`")));
        }
        let header = lines.next().ok_or_else(|| Error::format(KIND, "missing header"))??;
        let h: Vec<&str> = header.split_whitespace().collect();
        let bad = || Error::format(KIND, format!("bad header `{header}`"));
        if h.len() != 3 {
            return Err(bad());
        }
        let step: usize = h[0].parse().map_err(|_| bad())?;
        let threshold: f64 = h[1].parse().map_err(|_| bad())?;
        let count: usize = h[2].parse().map_err(|_| bad())?;
        let mut edges = Vec::with_capacity(count);
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            let bad_line = || Error::format(KIND, format!("bad edge line `{line}`"));
            if f.len() != 3 {
                return Err(bad_line());
            }
            let source: usize = f[0].parse().map_err(|_| bad_line())?;
            let target: usize = f[1].parse().map_err(|_| bad_line())?;
            let prob: f64 = f[2].parse().map_err(|_| bad_line())?;
            if source >= n_nodes || target >= n_nodes {
                return Err(bad_line());
            }
            edges.push(WebEdge { source, target, prob });
        }
        if edges.len() != count {
            return Err(Error::format(KIND, "edge count mismatch"));
        }
        Ok(Self::from_edges(step, threshold, n_nodes, edges))
    }

    pub fn from_edges(step: usize, threshold: f64, n_nodes: usize, mut edges: Vec<WebEdge>) -> Self {
        edges.sort_by_key(|e| (e.source, e.target));
        let pairs: Vec<(NodeId, NodeId)> = edges.iter().map(|e| (e.source, e.target)).collect();
        let components = weak_components(n_nodes, &pairs);
        let avg_degree_largest = components.first().map(|nodes| {
            let members: BTreeSet<NodeId> = nodes.iter().copied().collect();
            let undirected: BTreeSet<(NodeId, NodeId)> = pairs
                .iter()
                .filter(|(s, _)| members.contains(s))
                .map(|&(s, t)| (s.min(t), s.max(t)))
                .collect();
            2.0 * undirected.len() as f64 / nodes.len() as f64
        });
        Self {
            step,
            threshold,
            edges,
            components,
            avg_degree_largest,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WebStats {
    pub web_edges: usize,
    pub cluster_count: usize,
    pub max_cluster_size: usize,
    pub avg_degree_largest: Option<f64>,
}

/// Thresholds `pi(j|i) > threshold` over every edge and decomposes the result.
pub fn build_snapshot(policy: &Policy, graph: &ConceptGraph, threshold: f64, step: usize) -> WebSnapshot {
    let mut edges = Vec::new();
    for node in 0..graph.n_nodes() {
        let s = policy.row_sum(node);
        for (slot, &w) in policy.row(node).iter().enumerate() {
            let prob = w / s;
            if prob > threshold {
                edges.push(WebEdge {
                    source: node,
                    target: graph.target(node, slot),
                    prob,
                });
            }
        }
    }
    WebSnapshot::from_edges(step, threshold, graph.n_nodes(), edges)
}

/// Weakly connected components of the nodes incident to `edges`; isolated
/// nodes are left out. Ordering as in [`WebSnapshot::components`].
pub fn weak_components(n_nodes: usize, edges: &[(NodeId, NodeId)]) -> Vec<Vec<NodeId>> {
    let mut uf = UnionFind::new(n_nodes);
    let mut incident = vec![false; n_nodes];
    for &(s, t) in edges {
        uf.union(s, t);
        incident[s] = true;
        incident[t] = true;
    }
    let mut by_root: Vec<Vec<NodeId>> = vec![Vec::new(); n_nodes];
    for node in (0..n_nodes).filter(|&n| incident[n]) {
        let r = uf.find(node);
        by_root[r].push(node);
    }
    let mut components: Vec<Vec<NodeId>> = by_root.into_iter().filter(|c| !c.is_empty()).collect();
    components.sort_by(|a, b| b.len().cmp(&a.len()).then(a[0].cmp(&b[0])));
    components
}
