//! Shared test oracles: an independent Dijkstra implementation, random DAG
//! fixtures with exhaustive path enumeration, and rank statistics. These stay
//! independent of the library's computation paths they are used to check.

#![allow(dead_code)]

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use minar::compgraph::{CompEdge, ComputationGraph, ParamRef, Vertex, VertexClass};
use minar::graph::AttributedGraph;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Classical Dijkstra over the directed edge list; unreachable nodes get `b`.
pub fn dijkstra(g: &AttributedGraph, source: usize, b: f64) -> Vec<f64> {
    #[derive(PartialEq)]
    struct Entry(f64, usize);
    impl Eq for Entry {}
    impl PartialOrd for Entry {
        fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
            Some(self.cmp(other))
        }
    }
    impl Ord for Entry {
        fn cmp(&self, other: &Self) -> std::cmp::Ordering {
            self.0.partial_cmp(&other.0).expect("finite distances").then(self.1.cmp(&other.1))
        }
    }

    let mut adj = vec![Vec::new(); g.n];
    for (e, &(u, v)) in g.edges.iter().enumerate() {
        adj[u].push((v, g.weights[e]));
    }
    let mut dist = vec![f64::INFINITY; g.n];
    dist[source] = 0.0;
    let mut heap = BinaryHeap::new();
    heap.push(Reverse(Entry(0.0, source)));
    while let Some(Reverse(Entry(d, u))) = heap.pop() {
        if d > dist[u] {
            continue;
        }
        for &(v, w) in &adj[u] {
            let nd = d + w;
            if nd < dist[v] {
                dist[v] = nd;
                heap.push(Reverse(Entry(nd, v)));
            }
        }
    }
    dist.into_iter().map(|d| if d.is_finite() { d } else { b }).collect()
}

/// Random layered DAG with `n` vertices for longest-path fixtures. Vertex 0
/// is the only in-degree-0 vertex and n-1 the only out-degree-0 vertex, so
/// inputs/outputs are unambiguous.
pub fn random_dag(n: usize, seed: u64) -> (ComputationGraph, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vertices: Vec<Vertex> = (0..n)
        .map(|i| Vertex {
            name: format!("v{i:02}"),
            class: VertexClass::Up,
            bias: None,
        })
        .collect();
    let mut edges = Vec::new();
    let mut tag = 0usize;
    // A spine guarantees every vertex sits on an input-to-output path.
    for i in 0..n - 1 {
        edges.push(CompEdge {
            src: i,
            dst: i + 1,
            param: ParamRef { name: format!("p{tag:03}"), row: 0, col: 0 },
        });
        tag += 1;
    }
    for i in 0..n {
        for j in (i + 2)..n {
            if rng.gen::<f64>() < 0.3 {
                edges.push(CompEdge {
                    src: i,
                    dst: j,
                    param: ParamRef { name: format!("p{tag:03}"), row: 0, col: 0 },
                });
                tag += 1;
            }
        }
    }
    let scores: Vec<f64> = (0..edges.len()).map(|_| rng.gen::<f64>() * 10.0).collect();
    let gc = ComputationGraph::from_parts(vertices, edges).expect("random DAG is acyclic");
    (gc, scores)
}

/// Every input-to-output path of a DAG as edge index sequences (exhaustive,
/// for fixtures of modest size).
pub fn all_paths(gc: &ComputationGraph) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut stack: Vec<usize> = Vec::new();
    fn rec(gc: &ComputationGraph, v: usize, stack: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if gc.outputs.contains(&v) {
            out.push(stack.clone());
        }
        for &e in gc.out_edges(v) {
            stack.push(e);
            rec(gc, gc.edges[e].dst, stack, out);
            stack.pop();
        }
    }
    for &i in &gc.inputs {
        rec(gc, i, &mut stack, &mut out);
    }
    out
}

/// Highest-scoring input-to-output path containing `edge`, by enumeration.
pub fn brute_force_longest_through(
    gc: &ComputationGraph,
    scores: &[f64],
    edge: usize,
) -> Option<f64> {
    all_paths(gc)
        .into_iter()
        .filter(|p| p.contains(&edge))
        .map(|p| p.iter().map(|&e| scores[e]).sum::<f64>())
        .max_by(|a, b| a.partial_cmp(b).expect("finite scores"))
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).expect("finite"));
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks on ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let mut num = 0.0;
    let mut da = 0.0;
    let mut db = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        num += (x - mean) * (y - mean);
        da += (x - mean) * (x - mean);
        db += (y - mean) * (y - mean);
    }
    num / (da.sqrt() * db.sqrt())
}

/// Indices of the top-k values, largest first.
pub fn top_k_indices(xs: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[b].partial_cmp(&xs[a]).expect("finite").then(a.cmp(&b)));
    idx.truncate(k);
    idx
}
