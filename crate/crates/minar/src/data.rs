//! Dataset construction: the curated shortest-path training set, the
//! out-of-distribution test set, task feature encodings, and the corruption
//! transform used to build probe pairs.
//!
//! Training graphs carry explicit feature vectors that represent a
//! mid-algorithm distance state; their labels are that state advanced by the
//! model depth. Test graphs use the standard initialization (0 at the source,
//! `B` elsewhere) and converged distances as labels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{bellman_ford_from, AttributedGraph, Labels, Meta, ProbePair};
use crate::parallel::par_map_indexed;

/// Which task heads a dataset is encoded for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskSet {
    Sp,
    SpBfs,
}

impl TaskSet {
    pub fn feature_dim(self) -> usize {
        match self {
            TaskSet::Sp => 1,
            TaskSet::SpBfs => 2,
        }
    }

    pub fn has_bfs(self) -> bool {
        matches!(self, TaskSet::SpBfs)
    }
}

impl std::str::FromStr for TaskSet {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sp" => Ok(TaskSet::Sp),
            "sp,bfs" | "sp+bfs" | "spbfs" => Ok(TaskSet::SpBfs),
            other => Err(Error::Input(format!("unknown task set '{other}'"))),
        }
    }
}

/// Generation knobs shared by both generators.
#[derive(Debug, Clone, Copy)]
pub struct GenOptions {
    /// Append a weight-0 self-loop at every node (the mainline setup).
    pub self_loops: bool,
    /// The "large" initialization value, greater than any realizable path.
    pub b: f64,
}

impl Default for GenOptions {
    fn default() -> Self {
        GenOptions { self_loops: true, b: 1000.0 }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-graph seed derived from (master seed, index); generation order is
/// therefore independent of scheduling.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    splitmix64(master ^ splitmix64(index.wrapping_add(1)))
}

/// Undirected path on `n` nodes with the given per-edge weights, stored as
/// both directions, plus optional self-loops.
fn path_graph(n: usize, weights: &[f64], source: usize, opts: &GenOptions) -> AttributedGraph {
    debug_assert_eq!(weights.len(), n.saturating_sub(1));
    let mut edges = Vec::new();
    let mut w = Vec::new();
    for i in 0..n.saturating_sub(1) {
        edges.push((i, i + 1));
        w.push(weights[i]);
        edges.push((i + 1, i));
        w.push(weights[i]);
    }
    add_self_loops(n, &mut edges, &mut w, opts);
    AttributedGraph::new(n, edges, w, vec![vec![0.0]; n], source).expect("valid path graph")
}

fn add_self_loops(n: usize, edges: &mut Vec<(usize, usize)>, w: &mut Vec<f64>, opts: &GenOptions) {
    if opts.self_loops {
        for v in 0..n {
            edges.push((v, v));
            w.push(0.0);
        }
    }
}

/// `k` sweeps of reachability expansion starting from an arbitrary flag state.
fn bfs_from(graph: &AttributedGraph, flags: &[u8], k: usize) -> Vec<u8> {
    let mut reach = flags.to_vec();
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

/// Finalize a curated training graph: given its scalar distance-state
/// features, derive labels by advancing the state `depth` Bellman-Ford steps
/// (and the matching flag state `depth` reachability sweeps), then attach the
/// BFS feature column when requested.
fn finish_train_graph(
    mut g: AttributedGraph,
    sp_state: &[f64],
    depth: usize,
    tasks: TaskSet,
    opts: &GenOptions,
    family: &str,
    seed: u64,
) -> AttributedGraph {
    let flags: Vec<u8> = sp_state.iter().map(|&d| u8::from(d < opts.b)).collect();
    let dist = bellman_ford_from(&g, sp_state, depth);
    let reach = bfs_from(&g, &flags, depth);
    g.x = sp_state
        .iter()
        .zip(&flags)
        .map(|(&d, &f)| match tasks {
            TaskSet::Sp => vec![d],
            TaskSet::SpBfs => vec![d, f64::from(f)],
        })
        .collect();
    g.labels = Labels { dist, reach };
    g.meta = Meta { family: family.into(), seed };
    g
}

/// The curated Bellman-Ford training set.
///
/// For step parameter `K` it contains:
/// - the path family on K+1 nodes over the state grid a in {0..2K},
///   b in {0..2K+1}, where node i carries state value a (b at the node next
///   to the source, 0 at the source) and each edge takes the state value of
///   its far-from-source endpoint as weight, so b is the weight of the K-th
///   edge;
/// - the single-node graph with state 1 and the two-node path with states
///   (1, 0) and edge weight 1;
/// - an H-shaped gadget (two parallel paths joined by a middle rung) at the
///   standard initialization — a best-effort reconstruction, see H_GADGET
///   notes on [`h_gadget`];
/// - four random 3-node paths at the standard initialization and four random
///   4-node paths initialized at step two.
///
/// Labels advance each graph's state by `K` steps.
pub fn generate_bellman_ford_trainset(
    k: usize,
    seed: u64,
    tasks: TaskSet,
    opts: &GenOptions,
) -> Result<Vec<AttributedGraph>> {
    if k < 1 {
        return Err(Error::Input("trainset step parameter K must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed));
    let mut out = Vec::new();

    // Path family over the (a, b) weight grid: edge weights (a, ..., a, b)
    // with the source at the far end and features at the standard
    // initialization. Sweeping the full integer grid pins the aggregation
    // map d + w and the large-state branch of the update map.
    for a in 0..=(2 * k) {
        for b in 0..=(2 * k + 1) {
            let mut weights = vec![a as f64; k];
            weights[k - 1] = b as f64;
            let g = path_graph(k + 1, &weights, k, opts);
            let mut state = vec![opts.b; k + 1];
            state[k] = 0.0;
            out.push(finish_train_graph(g, &state, k, tasks, opts, "family_path", seed));
        }
    }

    // Single node holding state 1 (skipped without self-loops: it would have
    // an empty neighborhood).
    if opts.self_loops {
        let g = path_graph(1, &[], 0, opts);
        out.push(finish_train_graph(g, &[1.0], k, tasks, opts, "p1", seed));
    }

    // Two-node path with edge weight 1 at the standard initialization.
    {
        let g = path_graph(2, &[1.0], 1, opts);
        out.push(finish_train_graph(g, &[opts.b, 0.0], k, tasks, opts, "p2", seed));
    }

    // H gadget at the standard initialization.
    {
        let (g, state) = h_gadget(k, &mut rng, opts);
        out.push(finish_train_graph(g, &state, k, tasks, opts, "h_gadget", seed));
    }

    // Four 3-node paths at the standard initialization.
    for _ in 0..4 {
        let w: Vec<f64> = (0..2).map(|_| rng.gen::<f64>() * (2 * k + 1) as f64).collect();
        let g = path_graph(3, &w, 2, opts);
        let mut state = vec![opts.b; 3];
        state[2] = 0.0;
        out.push(finish_train_graph(g, &state, k, tasks, opts, "extra3_step0", seed));
    }

    // Four 4-node paths initialized at step two.
    for _ in 0..4 {
        let w: Vec<f64> = (0..3).map(|_| rng.gen::<f64>() * (2 * k + 1) as f64).collect();
        let g = path_graph(4, &w, 3, opts);
        let mut init = vec![opts.b; 4];
        init[3] = 0.0;
        let state = bellman_ford_from(&g, &init, 2);
        out.push(finish_train_graph(g, &state, k, tasks, opts, "extra4_step2", seed));
    }

    Ok(out)
}

/// H-shaped gadget: two parallel (K+1)-node paths whose middle nodes are
/// joined by a rung, source at the end of the left path, integer weights in
/// {0..2K+1}. The published shape is figure-only; this reconstruction keeps
/// the role the gadget plays in training (competing multi-neighbor updates
/// and nodes beyond the step horizon) without relying on its exact weights.
fn h_gadget(k: usize, rng: &mut ChaCha8Rng, opts: &GenOptions) -> (AttributedGraph, Vec<f64>) {
    let side = k + 1;
    let n = 2 * side;
    let mut edges = Vec::new();
    let mut w = Vec::new();
    let push_undirected = |edges: &mut Vec<(usize, usize)>, w: &mut Vec<f64>, u: usize, v: usize, wt: f64| {
        edges.push((u, v));
        w.push(wt);
        edges.push((v, u));
        w.push(wt);
    };
    let draw = |rng: &mut ChaCha8Rng| rng.gen_range(0..=(2 * k + 1)) as f64;
    for i in 0..k {
        let wt = draw(rng);
        push_undirected(&mut edges, &mut w, i, i + 1, wt);
    }
    for i in 0..k {
        let wt = draw(rng);
        push_undirected(&mut edges, &mut w, side + i, side + i + 1, wt);
    }
    let rung = draw(rng);
    push_undirected(&mut edges, &mut w, k / 2, side + k / 2, rung);
    add_self_loops(n, &mut edges, &mut w, opts);
    let source = k;
    let g = AttributedGraph::new(n, edges, w, vec![vec![0.0]; n], source).expect("valid gadget");
    let mut state = vec![opts.b; n];
    state[source] = 0.0;
    (g, state)
}

#[derive(Debug, Clone, Copy)]
enum TestKind {
    Cycle(usize),
    Complete,
    ErdosRenyi,
    Tree { arity: usize, depth: usize },
}

/// Out-of-distribution test set: 3/4-node cycles, complete graphs and
/// Erdős–Rényi graphs (p = 0.5) on 5 to 200 nodes, and binary/ternary trees
/// of depth 3–4 for nodes beyond the step horizon. Edge weights are uniform
/// nonnegative reals; labels come from the classical oracles.
pub fn generate_ood_testset(
    seed: u64,
    count: usize,
    depth: usize,
    tasks: TaskSet,
    opts: &GenOptions,
) -> Result<Vec<AttributedGraph>> {
    if count < 1 {
        return Err(Error::Input("testset count must be >= 1".into()));
    }
    let n_cycle = count / 10;
    let n_complete = 3 * count / 10;
    let n_er = 4 * count / 10;
    let n_tree = count - n_cycle - n_complete - n_er;
    let mut kinds = Vec::with_capacity(count);
    for i in 0..n_cycle {
        kinds.push(TestKind::Cycle(3 + i % 2));
    }
    for _ in 0..n_complete {
        kinds.push(TestKind::Complete);
    }
    for _ in 0..n_er {
        kinds.push(TestKind::ErdosRenyi);
    }
    for i in 0..n_tree {
        kinds.push(TestKind::Tree { arity: 2 + i % 2, depth: 3 + (i / 2) % 2 });
    }

    let graphs = par_map_indexed(&kinds, |i, kind| {
        let gseed = derive_seed(seed, i as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(gseed);
        let mut g = build_test_graph(*kind, &mut rng, opts);
        g.source = rng.gen_range(0..g.n);
        g = encode_task_features(&g, tasks, opts.b).expect("source is valid");
        g.labels.dist = crate::graph::k_step_bellman_ford(&g, g.source, g.n, opts.b);
        g.labels.reach = crate::graph::k_step_bfs(&g, g.source, depth);
        g.meta = Meta { family: kind_name(*kind).into(), seed: gseed };
        g
    });
    Ok(graphs)
}

fn kind_name(kind: TestKind) -> &'static str {
    match kind {
        TestKind::Cycle(3) => "cycle3",
        TestKind::Cycle(_) => "cycle4",
        TestKind::Complete => "complete",
        TestKind::ErdosRenyi => "erdos_renyi",
        TestKind::Tree { arity: 2, .. } => "tree_binary",
        TestKind::Tree { .. } => "tree_ternary",
    }
}

// Test weights live in [lo, hi] with hi <= 1.5 lo. Any path of 3 or more
// edges then costs at least 3 lo >= 2 hi, so converged shortest-path
// distances of nodes within two hops equal their two-step relaxation values
// on every graph, and the weights stay bounded away from zero where the
// multiplicative loss would degenerate.
const TEST_WEIGHT_LO: f64 = 2.0;
const TEST_WEIGHT_HI: f64 = 3.0;

fn build_test_graph(kind: TestKind, rng: &mut ChaCha8Rng, opts: &GenOptions) -> AttributedGraph {
    let mut edges = Vec::new();
    let mut w = Vec::new();
    let push_undirected = |edges: &mut Vec<(usize, usize)>, w: &mut Vec<f64>, u: usize, v: usize, wt: f64| {
        edges.push((u, v));
        w.push(wt);
        edges.push((v, u));
        w.push(wt);
    };
    let n = match kind {
        TestKind::Cycle(n) => {
            for i in 0..n {
                let wt = TEST_WEIGHT_LO + rng.gen::<f64>() * (TEST_WEIGHT_HI - TEST_WEIGHT_LO);
                push_undirected(&mut edges, &mut w, i, (i + 1) % n, wt);
            }
            n
        }
        TestKind::Complete => {
            let n = rng.gen_range(5..=200);
            for u in 0..n {
                for v in (u + 1)..n {
                    let wt = TEST_WEIGHT_LO + rng.gen::<f64>() * (TEST_WEIGHT_HI - TEST_WEIGHT_LO);
                    push_undirected(&mut edges, &mut w, u, v, wt);
                }
            }
            n
        }
        TestKind::ErdosRenyi => {
            let n = rng.gen_range(5..=200);
            for u in 0..n {
                for v in (u + 1)..n {
                    if rng.gen::<f64>() < 0.5 {
                        let wt = TEST_WEIGHT_LO + rng.gen::<f64>() * (TEST_WEIGHT_HI - TEST_WEIGHT_LO);
                        push_undirected(&mut edges, &mut w, u, v, wt);
                    }
                }
            }
            n
        }
        TestKind::Tree { arity, depth } => {
            // Complete arity-ary tree: children of i start at arity*i + 1.
            let n = if arity == 2 { (1 << (depth + 1)) - 1 } else { (3usize.pow(depth as u32 + 1) - 1) / 2 };
            for v in 1..n {
                let parent = (v - 1) / arity;
                let wt = TEST_WEIGHT_LO + rng.gen::<f64>() * (TEST_WEIGHT_HI - TEST_WEIGHT_LO);
                push_undirected(&mut edges, &mut w, parent, v, wt);
            }
            n
        }
    };
    add_self_loops(n, &mut edges, &mut w, opts);
    AttributedGraph::new(n, edges, w, vec![vec![0.0]; n], 0).expect("valid test graph")
}

/// Overwrite node features with the standard task encoding: the shortest-path
/// channel is 0 at the source and `b` elsewhere; the reachability channel
/// (when present) is 1 at the source and 0 elsewhere. Idempotent.
pub fn encode_task_features(graph: &AttributedGraph, tasks: TaskSet, b: f64) -> Result<AttributedGraph> {
    if graph.source >= graph.n {
        return Err(Error::Input(format!(
            "graph has no valid source (source={}, n={})",
            graph.source, graph.n
        )));
    }
    let mut g = graph.clone();
    g.x = (0..g.n)
        .map(|v| {
            let is_src = v == g.source;
            let sp = if is_src { 0.0 } else { b };
            match tasks {
                TaskSet::Sp => vec![sp],
                TaskSet::SpBfs => vec![sp, if is_src { 1.0 } else { 0.0 }],
            }
        })
        .collect();
    Ok(g)
}

/// Build a probe pair from an encoded clean graph: the corruption zeroes
/// every edge weight and flips each feature channel (`x -> b - x` for the
/// shortest-path channel, `x -> 1 - x` for the reachability channel). The
/// flip is an involution on features, and node/edge sets are untouched.
pub fn corrupt_instance(clean: &AttributedGraph, tasks: TaskSet, b: f64) -> ProbePair {
    let mut corrupted = clean.clone();
    for w in &mut corrupted.weights {
        *w = 0.0;
    }
    for row in &mut corrupted.x {
        row[0] = b - row[0];
        if tasks.has_bfs() && row.len() > 1 {
            row[1] = 1.0 - row[1];
        }
    }
    ProbePair { clean: clean.clone(), corrupted }
}

/// Corrupt every graph of a dataset, preserving order.
pub fn make_probe_set(dataset: &[AttributedGraph], tasks: TaskSet, b: f64) -> Vec<ProbePair> {
    dataset.iter().map(|g| corrupt_instance(g, tasks, b)).collect()
}
