//! The fixed concept space: a directed graph with uniform out-degree, and the
//! question/answer task set sampled on it.
//!
//! Edge ids are `source * out_degree + slot`, so the `(source, slot)` to edge
//! id mapping is a bijection that never changes for the lifetime of a graph.

use std::collections::{HashSet, VecDeque};
use std::io::{BufRead, Write};

use rand::seq::index;

use crate::error::{Error, Result};
use crate::seeds::{stream_rng, Stream};

pub type NodeId = usize;
pub type EdgeId = usize;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConceptGraph {
    n_nodes: usize,
    out_degree: usize,
    seed: u64,
    /// Flattened `n_nodes * out_degree` target table, indexed by edge id.
    targets: Vec<u32>,
}

impl ConceptGraph {
    /// Samples a graph where every node picks `out_degree` distinct targets
    /// uniformly among the other nodes.
    pub fn generate(n_nodes: usize, out_degree: usize, seed: u64) -> Result<Self> {
        if out_degree == 0 || out_degree >= n_nodes {
            return Err(Error::param(format!(
                "out_degree must satisfy 0 < out_degree < n_nodes (got out_degree={out_degree}, n_nodes={n_nodes})"
            )));
        }
        if n_nodes > u32::MAX as usize {
            return Err(Error::param("n_nodes exceeds u32 range"));
        }
        let mut rng = stream_rng(seed, Stream::Graph, &[]);
        let mut targets = Vec::with_capacity(n_nodes * out_degree);
        for node in 0..n_nodes {
            let mut picks: Vec<u32> = index::sample(&mut rng, n_nodes - 1, out_degree)
                .into_iter()
                .map(|v| if v >= node { v + 1 } else { v } as u32)
                .collect();
            picks.sort_unstable();
            targets.extend_from_slice(&picks);
        }
        Ok(Self {
            n_nodes,
            out_degree,
            seed,
            targets,
        })
    }

    /// Builds a graph from explicit per-node target lists. Used by tests and
    /// by the edge-list importer; validates every structural invariant.
    pub fn from_adjacency(adjacency: &[Vec<NodeId>], seed: u64) -> Result<Self> {
        let n_nodes = adjacency.len();
        let out_degree = adjacency.first().map_or(0, Vec::len);
        if out_degree == 0 || out_degree >= n_nodes {
            return Err(Error::param("adjacency must have 0 < out_degree < n_nodes"));
        }
        let mut targets = Vec::with_capacity(n_nodes * out_degree);
        for (node, row) in adjacency.iter().enumerate() {
            if row.len() != out_degree {
                return Err(Error::param(format!(
                    "node {node} has {} out-edges, expected {out_degree}",
                    row.len()
                )));
            }
            let mut seen = HashSet::with_capacity(row.len());
            for &t in row {
                if t >= n_nodes {
                    return Err(Error::param(format!("node {node} targets out-of-range node {t}")));
                }
                if t == node {
                    return Err(Error::param(format!("self-loop at node {node}")));
                }
                if !seen.insert(t) {
                    return Err(Error::param(format!("duplicate target {t} at node {node}")));
                }
                targets.push(t as u32);
            }
        }
        Ok(Self {
            n_nodes,
            out_degree,
            seed,
            targets,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn out_degree(&self) -> usize {
        self.out_degree
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn n_edges(&self) -> usize {
        self.targets.len()
    }

    #[inline]
    pub fn edge_id(&self, node: NodeId, slot: usize) -> EdgeId {
        debug_assert!(slot < self.out_degree);
        node * self.out_degree + slot
    }

    #[inline]
    pub fn edge_endpoints(&self, edge: EdgeId) -> (NodeId, NodeId) {
        (edge / self.out_degree, self.targets[edge] as NodeId)
    }

    #[inline]
    pub fn target(&self, node: NodeId, slot: usize) -> NodeId {
        self.targets[self.edge_id(node, slot)] as NodeId
    }

    #[inline]
    pub fn out_edges(&self, node: NodeId) -> &[u32] {
        let start = node * self.out_degree;
        &self.targets[start..start + self.out_degree]
    }

    /// Slot of the edge `node -> target`, if present.
    pub fn slot_of(&self, node: NodeId, target: NodeId) -> Option<usize> {
        self.out_edges(node).iter().position(|&t| t as usize == target)
    }

    /// Shortest hop count from `from` to `to`, searching at most `max_hops`.
    pub fn hop_distance(&self, from: NodeId, to: NodeId, max_hops: usize) -> Option<usize> {
        if from == to {
            return Some(0);
        }
        let mut dist = vec![usize::MAX; self.n_nodes];
        dist[from] = 0;
        let mut queue = VecDeque::from([from]);
        while let Some(u) = queue.pop_front() {
            if dist[u] >= max_hops {
                continue;
            }
            for &v in self.out_edges(u) {
                let v = v as usize;
                if dist[v] == usize::MAX {
                    dist[v] = dist[u] + 1;
                    if v == to {
                        return Some(dist[v]);
                    }
                    queue.push_back(v);
                }
            }
        }
        None
    }

    /// Writes the plain edge-list format: a version line, the
    /// `n_nodes out_degree seed` header, then one `source target edge_id`
    /// line per edge in edge-id order.
    pub fn write_edge_list<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "# conet-graph v1")?;
        writeln!(out, "{} {} {}", self.n_nodes, self.out_degree, self.seed)?;
        for (edge, &t) in self.targets.iter().enumerate() {
            writeln!(out, "{} {} {}", edge / self.out_degree, t, edge)?;
        }
        Ok(())
    }

    pub fn read_edge_list<R: BufRead>(input: R) -> Result<Self> {
        const KIND: &str = "graph";
        let mut lines = input.lines();
        let version = lines
            .next()
            .ok_or_else(|| Error::format(KIND, "empty file"))??;
        if version.trim() != "# conet-graph v1" {
            return Err(Error::format(KIND, format!("unsupported version line `{version}`")));
        }
        let header = lines
            .next()
            .ok_or_else(|| Error::format(KIND, "missing header"))??;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(Error::format(KIND, "header must be `n_nodes out_degree seed`"));
        }
        let parse = |s: &str| -> Result<u64> {
            s.parse::<u64>()
                .map_err(|e| Error::format(KIND, format!("bad integer `{s}`: {e}")))
        };
        let n_nodes = parse(fields[0])? as usize;
        let out_degree = parse(fields[1])? as usize;
        let seed = parse(fields[2])?;
        if out_degree == 0 || out_degree >= n_nodes {
            return Err(Error::format(KIND, "header violates 0 < out_degree < n_nodes"));
        }
        let mut adjacency = vec![Vec::with_capacity(out_degree); n_nodes];
        let mut expected_edge = 0usize;
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 3 {
                return Err(Error::format(KIND, format!("bad edge line `{line}`")));
            }
            let (src, dst, id) = (parse(f[0])? as usize, parse(f[1])? as usize, parse(f[2])? as usize);
            if id != expected_edge || src != id / out_degree {
                return Err(Error::format(
                    KIND,
                    format!("edge id {id} out of order or inconsistent with source {src}"),
                ));
            }
            adjacency[src].push(dst);
            expected_edge += 1;
        }
        if expected_edge != n_nodes * out_degree {
            return Err(Error::format(
                KIND,
                format!("expected {} edges, found {expected_edge}", n_nodes * out_degree),
            ));
        }
        Self::from_adjacency(&adjacency, seed)
            .map_err(|e| Error::format(KIND, e.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Task {
    pub question: NodeId,
    pub answer: NodeId,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskSet {
    tasks: Vec<Task>,
}

impl TaskSet {
    /// Draws `n_tasks` distinct ordered `(question, answer)` pairs with
    /// `question != answer`, uniformly without replacement.
    pub fn sample(graph: &ConceptGraph, n_tasks: usize, seed: u64) -> Result<Self> {
        let n = graph.n_nodes();
        let available = n * (n - 1);
        if n_tasks > available {
            return Err(Error::param(format!(
                "requested {n_tasks} tasks but only {available} distinct pairs exist"
            )));
        }
        let mut rng = stream_rng(seed, Stream::Tasks, &[]);
        let tasks = index::sample(&mut rng, available, n_tasks)
            .into_iter()
            .map(|code| {
                let question = code / (n - 1);
                let r = code % (n - 1);
                let answer = if r >= question { r + 1 } else { r };
                Task { question, answer }
            })
            .collect();
        Ok(Self { tasks })
    }

    pub fn from_tasks(graph: &ConceptGraph, tasks: Vec<Task>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(tasks.len());
        for t in &tasks {
            if t.question >= graph.n_nodes() || t.answer >= graph.n_nodes() {
                return Err(Error::param(format!("task {t:?} references an out-of-range node")));
            }
            if t.question == t.answer {
                return Err(Error::param(format!("task {t:?} has question == answer")));
            }
            if !seen.insert(*t) {
                return Err(Error::param(format!("duplicate task {t:?}")));
            }
        }
        Ok(Self { tasks })
    }

    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn get(&self, id: usize) -> Option<&Task> {
        self.tasks.get(id)
    }

    /// Diagnostic: ids of tasks whose answer is not reachable from the
    /// question within `max_hops`.
    pub fn unreachable_within(&self, graph: &ConceptGraph, max_hops: usize) -> Vec<usize> {
        self.tasks
            .iter()
            .enumerate()
            .filter(|(_, t)| graph.hop_distance(t.question, t.answer, max_hops).is_none())
            .map(|(i, _)| i)
            .collect()
    }

    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "# conet-tasks v1")?;
        writeln!(out, "{}", self.tasks.len())?;
        for (i, t) in self.tasks.iter().enumerate() {
            writeln!(out, "{i} {} {}", t.question, t.answer)?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(input: R, graph: &ConceptGraph) -> Result<Self> {
        const KIND: &str = "tasks";
        let mut lines = input.lines();
        let version = lines.next().ok_or_else(|| Error::format(KIND, "empty file"))??;
        if version.trim() != "# conet-tasks v1" {
            return Err(Error::format(KIND, format!("unsupported version line `{version}`")));
        }
        let count: usize = lines
            .next()
            .ok_or_else(|| Error::format(KIND, "missing count"))??
            .trim()
            .parse()
            .map_err(|e| Error::format(KIND, format!("bad count: {e}")))?;
        let mut tasks = Vec::with_capacity(count);
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<usize> = line
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::format(KIND, format!("bad line `{line}`: {e}")))?;
            if f.len() != 3 || f[0] != tasks.len() {
                return Err(Error::format(KIND, format!("bad line `{line}`")));
            }
            tasks.push(Task {
                question: f[1],
                answer: f[2],
            });
        }
        if tasks.len() != count {
            return Err(Error::format(KIND, "task count mismatch"));
        }
        Self::from_tasks(graph, tasks).map_err(|e| Error::format(KIND, e.to_string()))
    }
}
