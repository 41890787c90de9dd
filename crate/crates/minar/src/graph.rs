//! Attributed graphs, probe pairs, and the classical label oracles.
//!
//! Graphs are stored with explicit directed edge lists; undirected inputs
//! keep both directions, and self-loops (weight 0) are plain edges. Labels
//! carry per-node shortest-path distances and reachability flags so that any
//! consumer can check predictions against the classical algorithms.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-node labels: shortest-path distance and reachability within the task
/// horizon. Unreachable nodes carry distance `B`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Labels {
    pub dist: Vec<f64>,
    pub reach: Vec<u8>,
}

/// Generator provenance for a graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub family: String,
    pub seed: u64,
}

/// A directed attributed graph with one scalar weight per edge, a designated
/// source node, per-node feature vectors, and oracle labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributedGraph {
    pub n: usize,
    pub edges: Vec<(usize, usize)>,
    pub weights: Vec<f64>,
    pub x: Vec<Vec<f64>>,
    pub source: usize,
    pub labels: Labels,
    pub meta: Meta,
}

impl AttributedGraph {
    /// Build a graph and check the structural invariants: valid endpoints,
    /// one weight per edge, uniform feature length.
    pub fn new(
        n: usize,
        edges: Vec<(usize, usize)>,
        weights: Vec<f64>,
        x: Vec<Vec<f64>>,
        source: usize,
    ) -> Result<Self> {
        if n == 0 {
            return Err(Error::Input("graph must have at least one node".into()));
        }
        if edges.len() != weights.len() {
            return Err(Error::Input(format!(
                "{} edges but {} weights",
                edges.len(),
                weights.len()
            )));
        }
        for &(u, v) in &edges {
            if u >= n || v >= n {
                return Err(Error::Input(format!("edge ({u},{v}) out of range for n={n}")));
            }
        }
        if x.len() != n {
            return Err(Error::Input(format!("{} feature rows for {} nodes", x.len(), n)));
        }
        let d = x.first().map(|r| r.len()).unwrap_or(0);
        if x.iter().any(|r| r.len() != d) {
            return Err(Error::Input("feature rows have mixed lengths".into()));
        }
        if source >= n {
            return Err(Error::Input(format!("source {source} out of range for n={n}")));
        }
        Ok(Self {
            n,
            edges,
            weights,
            x,
            source,
            labels: Labels { dist: vec![0.0; n], reach: vec![0; n] },
            meta: Meta { family: String::new(), seed: 0 },
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.x.first().map(|r| r.len()).unwrap_or(0)
    }

    /// Incoming edge indices per node, sorted by (tail id, edge index).
    /// The sort order fixes aggregation tie-breaking: the smallest tail id
    /// wins an exact tie.
    pub fn incoming(&self) -> Vec<Vec<usize>> {
        let mut inc = vec![Vec::new(); self.n];
        for (e, &(u, v)) in self.edges.iter().enumerate() {
            inc[v].push((u, e));
        }
        inc.into_iter()
            .map(|mut l| {
                l.sort_unstable();
                l.into_iter().map(|(_, e)| e).collect()
            })
            .collect()
    }

    /// Serialize one graph per line.
    pub fn write_jsonl<W: Write>(graphs: &[Self], mut w: W) -> Result<()> {
        for g in graphs {
            serde_json::to_writer(&mut w, g)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<Self>> {
        let mut out = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let g: Self = serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("line {}: {e}", i + 1)))?;
            out.push(g);
        }
        Ok(out)
    }

    pub fn save_jsonl(graphs: &[Self], path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        Self::write_jsonl(graphs, std::io::BufWriter::new(f))
    }

    pub fn load_jsonl(path: &Path) -> Result<Vec<Self>> {
        let f = std::fs::File::open(path)?;
        Self::read_jsonl(BufReader::new(f))
    }
}

/// A clean graph and its feature-ablated corruption. The two share identical
/// node and edge sets so per-node and per-edge activations align one-to-one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbePair {
    pub clean: AttributedGraph,
    pub corrupted: AttributedGraph,
}

impl ProbePair {
    pub fn validate(&self) -> Result<()> {
        if self.clean.n != self.corrupted.n || self.clean.edges != self.corrupted.edges {
            return Err(Error::Consistency(
                "probe pair is not structurally aligned".into(),
            ));
        }
        Ok(())
    }
}

/// One relaxation sweep from `state`: every node takes the minimum of its own
/// current value and `d_u + w_{u,v}` over incoming edges. The node's own value
/// always participates, which matches self-loop semantics whether or not the
/// edge list carries explicit self-loops.
pub fn bellman_ford_step(graph: &AttributedGraph, state: &[f64]) -> Vec<f64> {
    let mut next = state.to_vec();
    for (e, &(u, v)) in graph.edges.iter().enumerate() {
        let cand = state[u] + graph.weights[e];
        if cand < next[v] {
            next[v] = cand;
        }
    }
    next
}

/// `k` relaxation sweeps starting from an arbitrary state vector.
pub fn bellman_ford_from(graph: &AttributedGraph, state: &[f64], k: usize) -> Vec<f64> {
    let mut s = state.to_vec();
    for _ in 0..k {
        s = bellman_ford_step(graph, &s);
    }
    s
}

/// The exact k-iteration Bellman-Ford state from the standard initialization
/// (0 at the source, `b` elsewhere).
pub fn k_step_bellman_ford(graph: &AttributedGraph, source: usize, k: usize, b: f64) -> Vec<f64> {
    let mut init = vec![b; graph.n];
    init[source] = 0.0;
    bellman_ford_from(graph, &init, k)
}

/// Flags of nodes within `k` hops of `source` (self-loops do not extend reach).
pub fn k_step_bfs(graph: &AttributedGraph, source: usize, k: usize) -> Vec<u8> {
    let mut reach = vec![0u8; graph.n];
    reach[source] = 1;
    for _ in 0..k {
        let mut next = reach.clone();
        for &(u, v) in &graph.edges {
            if reach[u] == 1 {
                next[v] = 1;
            }
        }
        reach = next;
    }
    reach
}
