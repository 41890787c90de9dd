//! Property tests for oracle, corruption, equivariance, and overlap
//! invariants.

mod common;

use proptest::prelude::*;

use minar::circuits::{weighted_jaccard, Circuit, CircuitEdge, Provenance};
use minar::compgraph::build_computation_graph;
use minar::data::{corrupt_instance, encode_task_features, GenOptions, TaskSet};
use minar::gnn::{model_forward, Aggregation, ModelConfig, ModelParams};
use minar::graph::{k_step_bellman_ford, AttributedGraph};

/// Random small undirected graph with self-loops and the given edge weights.
fn arb_graph() -> impl Strategy<Value = AttributedGraph> {
    (2usize..8, any::<u64>()).prop_map(|(n, seed)| {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut edges = Vec::new();
        let mut w = Vec::new();
        // A random spanning path keeps the graph connected.
        for i in 0..n - 1 {
            let wt = rng.gen::<f64>() * 4.0;
            edges.push((i, i + 1));
            w.push(wt);
            edges.push((i + 1, i));
            w.push(wt);
        }
        for u in 0..n {
            for v in (u + 2)..n {
                if rng.gen::<f64>() < 0.3 {
                    let wt = rng.gen::<f64>() * 4.0;
                    edges.push((u, v));
                    w.push(wt);
                    edges.push((v, u));
                    w.push(wt);
                }
            }
        }
        for v in 0..n {
            edges.push((v, v));
            w.push(0.0);
        }
        let source = rng.gen_range(0..n);
        AttributedGraph::new(n, edges, w, vec![vec![0.0]; n], source).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn bellman_ford_is_monotone_in_k(g in arb_graph()) {
        let mut prev = k_step_bellman_ford(&g, g.source, 0, 1000.0);
        for k in 1..g.n + 2 {
            let cur = k_step_bellman_ford(&g, g.source, k, 1000.0);
            for (p, c) in prev.iter().zip(&cur) {
                prop_assert!(c <= p);
            }
            prev = cur;
        }
    }

    #[test]
    fn corruption_is_an_involution_on_features(g in arb_graph()) {
        let enc = encode_task_features(&g, TaskSet::SpBfs, 1000.0).unwrap();
        let once = corrupt_instance(&enc, TaskSet::SpBfs, 1000.0);
        let twice = corrupt_instance(&once.corrupted, TaskSet::SpBfs, 1000.0);
        prop_assert_eq!(&twice.corrupted.x, &enc.x);
        prop_assert!(twice.corrupted.weights.iter().all(|&w| w == 0.0));
        // Structural alignment.
        prop_assert_eq!(&once.clean.edges, &once.corrupted.edges);
    }

    #[test]
    fn forward_is_permutation_equivariant(g in arb_graph(), seed in any::<u64>(), max_agg in any::<bool>()) {
        let config = ModelConfig {
            hidden: 6,
            embed: 3,
            aggregation: if max_agg { Aggregation::Max } else { Aggregation::Min },
            ..ModelConfig::single_task()
        };
        let params = ModelParams::init(&config, seed);
        let enc = encode_task_features(&g, TaskSet::Sp, 1000.0).unwrap();
        let base = model_forward(&params, &config, &enc).unwrap();

        // Relabel nodes by the reversal permutation.
        let n = g.n;
        let perm: Vec<usize> = (0..n).rev().collect();
        let edges = enc.edges.iter().map(|&(u, v)| (perm[u], perm[v])).collect();
        let mut x = vec![vec![0.0]; n];
        for v in 0..n {
            x[perm[v]] = enc.x[v].clone();
        }
        let relabeled = AttributedGraph::new(n, edges, enc.weights.clone(), x, perm[enc.source]).unwrap();
        let out = model_forward(&params, &config, &relabeled).unwrap();
        for v in 0..n {
            prop_assert_eq!(&base[v], &out[perm[v]]);
        }
    }

    #[test]
    fn weighted_jaccard_is_symmetric_and_bounded(seed in any::<u64>(), mask_a in any::<u64>(), mask_b in any::<u64>()) {
        let config = ModelConfig { hidden: 3, embed: 2, ..ModelConfig::single_task() };
        let params = ModelParams::init(&config, seed);
        let gc = build_computation_graph(&params, &config).unwrap();
        let pick = |mask: u64| -> Circuit {
            let edges = gc
                .edges
                .iter()
                .enumerate()
                .filter(|(i, _)| (mask >> (i % 64)) & 1 == 1)
                .map(|(_, e)| CircuitEdge {
                    src: gc.vertices[e.src].name.clone(),
                    dst: gc.vertices[e.dst].name.clone(),
                    param: e.param.name.clone(),
                    row: e.param.row,
                    col: e.param.col,
                    weight: 0.0,
                })
                .collect();
            Circuit { edges, provenance: Provenance { method: "prop".into(), k: 0, probe: String::new() } }
        };
        let a = pick(mask_a);
        let b = pick(mask_b);
        let jab = weighted_jaccard(&a, &b, &params).unwrap();
        let jba = weighted_jaccard(&b, &a, &params).unwrap();
        prop_assert_eq!(jab, jba);
        prop_assert!((0.0..=1.0).contains(&jab));
        if !a.is_empty() {
            prop_assert!((weighted_jaccard(&a, &a, &params).unwrap() - 1.0).abs() < 1e-12);
        }
    }
}
