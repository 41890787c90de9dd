//! Circuit construction from scored computation edges, circuit application
//! and ablation, fidelity and characterization metrics, overlap comparison,
//! and human-readable circuit description.

use std::collections::{HashMap, HashSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::attribution::{eap_ig_scores, ScoreOptions, ScoreTable};
use crate::compgraph::{
    build_computation_graph, longest_path_through_edge, weight_value, ComputationGraph, ParamRef,
    VertexClass,
};
use crate::error::{Error, Result};
use crate::gnn::{Checkpoint, LinRef, ModelConfig, ModelParams};
use crate::graph::{AttributedGraph, ProbePair};
use crate::training::{
    eval_lmult, multiplicative_test_loss, predictions, reachability_accuracy,
};

/// One computation edge kept by a circuit, with its weight value cached at
/// extraction time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CircuitEdge {
    pub src: String,
    pub dst: String,
    pub param: String,
    pub row: usize,
    pub col: usize,
    pub weight: f64,
}

impl CircuitEdge {
    pub fn param_ref(&self) -> ParamRef {
        ParamRef { name: self.param.clone(), row: self.row, col: self.col }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub method: String,
    pub k: usize,
    pub probe: String,
}

/// A connected input-to-output subgraph of the computation graph, stored as
/// an ordered edge set (insertion order of Algorithm 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Circuit {
    pub edges: Vec<CircuitEdge>,
    pub provenance: Provenance,
}

impl Circuit {
    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn edge_set(&self) -> HashSet<ParamRef> {
        self.edges.iter().map(|e| e.param_ref()).collect()
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(f), self)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Ok(serde_json::from_reader(std::io::BufReader::new(f))?)
    }
}

/// Structural invariants: every edge resolves in `gc`, the subgraph is
/// connected, every vertex lies on an input-to-output path within the
/// circuit, and the only parentless/childless vertices are model inputs and
/// outputs respectively.
pub fn validate_circuit(gc: &ComputationGraph, circuit: &Circuit) -> Result<()> {
    let mut edge_ids = Vec::with_capacity(circuit.edges.len());
    for e in &circuit.edges {
        let id = gc
            .edge_by_param(&e.param_ref())
            .ok_or_else(|| Error::Consistency(format!("circuit edge {} not in graph", e.param_ref())))?;
        edge_ids.push(id);
    }
    let mut indeg: HashMap<usize, usize> = HashMap::new();
    let mut outdeg: HashMap<usize, usize> = HashMap::new();
    let mut vertices: HashSet<usize> = HashSet::new();
    for &id in &edge_ids {
        let e = &gc.edges[id];
        vertices.insert(e.src);
        vertices.insert(e.dst);
        *outdeg.entry(e.src).or_insert(0) += 1;
        *indeg.entry(e.dst).or_insert(0) += 1;
    }
    let inputs: HashSet<usize> = gc.inputs.iter().copied().collect();
    let outputs: HashSet<usize> = gc.outputs.iter().copied().collect();
    for &v in &vertices {
        let parentless = !indeg.contains_key(&v);
        let childless = !outdeg.contains_key(&v);
        if parentless && !inputs.contains(&v) {
            return Err(Error::Structure(format!(
                "circuit vertex {} is parentless but not an input",
                gc.vertices[v].name
            )));
        }
        if childless && !outputs.contains(&v) {
            return Err(Error::Structure(format!(
                "circuit vertex {} is childless but not an output",
                gc.vertices[v].name
            )));
        }
    }
    // Connectivity (undirected) over the circuit's vertices.
    if !vertices.is_empty() {
        let mut adj: HashMap<usize, Vec<usize>> = HashMap::new();
        for &id in &edge_ids {
            let e = &gc.edges[id];
            adj.entry(e.src).or_default().push(e.dst);
            adj.entry(e.dst).or_default().push(e.src);
        }
        let start = *vertices.iter().min().expect("nonempty");
        let mut seen = HashSet::from([start]);
        let mut stack = vec![start];
        while let Some(v) = stack.pop() {
            for &w in adj.get(&v).into_iter().flatten() {
                if seen.insert(w) {
                    stack.push(w);
                }
            }
        }
        if seen.len() != vertices.len() {
            return Err(Error::Structure("circuit is not connected".into()));
        }
    }
    Ok(())
}

/// Algorithm: sort edges by descending score, and for each not-yet-included
/// edge add the maximum-score input-to-output path through it, until `k` such
/// top edges have been incorporated or scores are exhausted. Edges on no
/// input-to-output path are skipped with a warning.
pub fn discover_circuit(gc: &ComputationGraph, scores: &ScoreTable, k: usize) -> Result<Circuit> {
    if k < 1 {
        return Err(Error::Input("circuit size K must be >= 1".into()));
    }
    let dense = scores.dense(gc);
    let mut order: Vec<usize> = (0..gc.edges.len()).collect();
    order.sort_by(|&a, &b| {
        dense[b]
            .partial_cmp(&dense[a])
            .unwrap()
            .then_with(|| gc.edges[a].param.cmp(&gc.edges[b].param))
    });

    let mut in_circuit = vec![false; gc.edges.len()];
    let mut picked: Vec<usize> = Vec::new();
    let mut added = 0usize;
    for &e in &order {
        if added >= k {
            break;
        }
        if in_circuit[e] {
            continue;
        }
        let path = match longest_path_through_edge(gc, &dense, e) {
            Ok(p) => p,
            Err(Error::PathInfeasible(msg)) => {
                log::warn!("skipping scored edge: {msg}");
                continue;
            }
            Err(other) => return Err(other),
        };
        for pe in path.edges {
            if !in_circuit[pe] {
                in_circuit[pe] = true;
                picked.push(pe);
            }
        }
        added += 1;
    }

    let edges = picked
        .into_iter()
        .map(|id| {
            let e = &gc.edges[id];
            CircuitEdge {
                src: gc.vertices[e.src].name.clone(),
                dst: gc.vertices[e.dst].name.clone(),
                param: e.param.name.clone(),
                row: e.param.row,
                col: e.param.col,
                weight: 0.0,
            }
        })
        .collect();
    let circuit = Circuit {
        edges,
        provenance: Provenance { method: scores.method.clone(), k, probe: scores.probe_id.clone() },
    };
    validate_circuit(gc, &circuit)?;
    Ok(circuit)
}

/// Fill in circuit edge weights from `params`. The computation graph does not
/// carry weight values, so [`discover_circuit`] leaves them at 0.
pub fn cache_weights(circuit: &mut Circuit, params: &ModelParams) -> Result<()> {
    for e in &mut circuit.edges {
        e.weight = weight_value(params, &e.param_ref()).ok_or_else(|| {
            Error::Consistency(format!("circuit edge {} does not resolve", e.param_ref()))
        })?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ApplyMode {
    /// Zero every weight NOT in the circuit (biases retained).
    CircuitOnly,
    /// Zero every weight IN the circuit (biases retained).
    Ablate,
}

/// Project parameters onto a circuit (or its complement). Biases are vertex
/// attributes and survive both modes.
pub fn apply_circuit(
    params: &ModelParams,
    circuit: &Circuit,
    mode: ApplyMode,
) -> Result<ModelParams> {
    // Resolve all references first so stale circuits fail loudly.
    let mut locs = Vec::with_capacity(circuit.edges.len());
    for e in &circuit.edges {
        let pref = e.param_ref();
        let base = pref
            .name
            .strip_suffix(".weight")
            .ok_or_else(|| Error::Consistency(format!("edge {pref} is not a weight")))?;
        let r = LinRef::parse(base)
            .ok_or_else(|| Error::Consistency(format!("edge {pref} does not parse")))?;
        if r.conv >= params.convs.len() {
            return Err(Error::Consistency(format!("edge {pref} out of range")));
        }
        let lin = params.lin(r);
        if pref.row >= lin.out_dim || pref.col >= lin.in_dim {
            return Err(Error::Consistency(format!("edge {pref} out of range")));
        }
        locs.push((r, pref.row, pref.col));
    }
    let mut out = params.clone();
    match mode {
        ApplyMode::CircuitOnly => {
            for r in out.lin_refs() {
                out.lin_mut(r).w.iter_mut().for_each(|w| *w = 0.0);
            }
            for &(r, row, col) in &locs {
                *out.lin_mut(r).weight_mut(row, col) = params.lin(r).weight(row, col);
            }
        }
        ApplyMode::Ablate => {
            for &(r, row, col) in &locs {
                *out.lin_mut(r).weight_mut(row, col) = 0.0;
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Fidelity
// ---------------------------------------------------------------------------

/// Node-level agreement rule between two predictions of one head.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AgreementRule {
    /// Equal thresholded class (logits at 0).
    Classification,
    /// Relative closeness: |a - b| <= tol * max(|a|, 1e-6).
    RelativeTolerance(f64),
}

impl AgreementRule {
    fn agree(self, a: f64, b: f64) -> bool {
        match self {
            AgreementRule::Classification => (a > 0.0) == (b > 0.0),
            AgreementRule::RelativeTolerance(tol) => (a - b).abs() <= tol * a.abs().max(1e-6),
        }
    }
}

/// Default rules: 5% relative closeness for the SP regression head,
/// thresholded equality for the BFS head.
pub fn default_agreement(config: &ModelConfig) -> Vec<AgreementRule> {
    let mut rules = vec![AgreementRule::RelativeTolerance(0.05)];
    if config.bfs_head {
        rules.push(AgreementRule::Classification);
    }
    rules
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskFidelity {
    pub task: String,
    pub fid_plus: f64,
    pub fid_minus: f64,
}

/// Necessity (`fid_plus`), sufficiency (`fid_minus`, lower is more
/// sufficient), and their harmonic combination.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub fid_plus: f64,
    pub fid_minus: f64,
    pub characterization: f64,
    pub agreement: String,
    pub dataset_id: String,
    pub per_task: Vec<TaskFidelity>,
}

/// Harmonic mean of Fid+ and (1 - Fid-); degenerate denominators map to 0.
pub fn characterization_score(fid_plus: f64, fid_minus: f64) -> f64 {
    let suff = 1.0 - fid_minus;
    if fid_plus <= 0.0 || suff <= 0.0 {
        return 0.0;
    }
    2.0 * fid_plus * suff / (fid_plus + suff)
}

/// Fid+ = 1 - agreement(full, ablated); Fid- = 1 - agreement(full,
/// circuit-only). Agreement is per node; with several heads a node agrees
/// only if every head's rule agrees.
pub fn fidelity_report(
    params: &ModelParams,
    config: &ModelConfig,
    circuit: &Circuit,
    dataset: &[AttributedGraph],
    rules: &[AgreementRule],
    dataset_id: &str,
) -> Result<FidelityReport> {
    if rules.len() != config.head_count() {
        return Err(Error::Input("one agreement rule required per head".into()));
    }
    let full = predictions(params, config, dataset)?;
    let only = predictions(&apply_circuit(params, circuit, ApplyMode::CircuitOnly)?, config, dataset)?;
    let ablated = predictions(&apply_circuit(params, circuit, ApplyMode::Ablate)?, config, dataset)?;

    let heads = config.head_count();
    let mut node_total = 0usize;
    let mut agree_abl = 0usize;
    let mut agree_only = 0usize;
    let mut task_agree_abl = vec![0usize; heads];
    let mut task_agree_only = vec![0usize; heads];
    for gi in 0..dataset.len() {
        for v in 0..dataset[gi].n {
            node_total += 1;
            let mut all_abl = true;
            let mut all_only = true;
            for h in 0..heads {
                let a = rules[h].agree(full[gi][v][h], ablated[gi][v][h]);
                let o = rules[h].agree(full[gi][v][h], only[gi][v][h]);
                task_agree_abl[h] += usize::from(a);
                task_agree_only[h] += usize::from(o);
                all_abl &= a;
                all_only &= o;
            }
            agree_abl += usize::from(all_abl);
            agree_only += usize::from(all_only);
        }
    }
    let n = node_total.max(1) as f64;
    let fid_plus = 1.0 - agree_abl as f64 / n;
    let fid_minus = 1.0 - agree_only as f64 / n;
    let head_names = config.head_names();
    let per_task = (0..heads)
        .map(|h| TaskFidelity {
            task: head_names[h].to_string(),
            fid_plus: 1.0 - task_agree_abl[h] as f64 / n,
            fid_minus: 1.0 - task_agree_only[h] as f64 / n,
        })
        .collect();
    Ok(FidelityReport {
        fid_plus,
        fid_minus,
        characterization: characterization_score(fid_plus, fid_minus),
        agreement: format!("{rules:?}"),
        dataset_id: dataset_id.to_string(),
        per_task,
    })
}

/// Weighted Jaccard overlap of two circuits from the same model:
/// sum of |w| over shared edges divided by sum over the union. Empty union
/// gives 0.
pub fn weighted_jaccard(a: &Circuit, b: &Circuit, params: &ModelParams) -> Result<f64> {
    let sa = a.edge_set();
    let sb = b.edge_set();
    // Sum in canonical order so the result is exactly symmetric.
    let union_sorted: std::collections::BTreeSet<&ParamRef> = sa.iter().chain(sb.iter()).collect();
    let mut inter = 0.0;
    let mut union = 0.0;
    for pref in union_sorted {
        let w = weight_value(params, pref)
            .ok_or_else(|| Error::Consistency(format!("edge {pref} does not resolve")))?
            .abs();
        union += w;
        if sa.contains(pref) && sb.contains(pref) {
            inter += w;
        }
    }
    if union == 0.0 {
        return Ok(0.0);
    }
    Ok(inter / union)
}

// ---------------------------------------------------------------------------
// Description
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct HeadReadout {
    pub head: String,
    pub terms: Vec<(String, f64)>,
    pub bias: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct NeuronLine {
    pub name: String,
    pub bias: Option<f64>,
    pub fan_in: Vec<(String, f64)>,
    pub fan_out: Vec<(String, f64)>,
}

/// Symbolic description of a circuit: affine readout of each output head in
/// terms of its direct circuit in-neighbors, plus per-neuron fan-in/fan-out.
#[derive(Debug, Clone, Serialize)]
pub struct CircuitDescription {
    pub heads: Vec<HeadReadout>,
    pub neurons: Vec<NeuronLine>,
}

impl std::fmt::Display for CircuitDescription {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for h in &self.heads {
            write!(f, "{} =", h.head)?;
            for (i, (name, w)) in h.terms.iter().enumerate() {
                if i == 0 {
                    write!(f, " {w:.4} * {name}")?;
                } else {
                    write!(f, " + {w:.4} * {name}")?;
                }
            }
            if h.terms.is_empty() {
                write!(f, " {:.4}", h.bias)?;
            } else {
                write!(f, " + {:.4}", h.bias)?;
            }
            writeln!(f)?;
        }
        for n in &self.neurons {
            writeln!(f, "{}:", n.name)?;
            if let Some(b) = n.bias {
                writeln!(f, "  bias {b:.4}")?;
            }
            for (src, w) in &n.fan_in {
                writeln!(f, "  <- {w:.4} * {src}")?;
            }
            for (dst, w) in &n.fan_out {
                writeln!(f, "  -> {dst} (weight {w:.4})")?;
            }
        }
        Ok(())
    }
}

pub fn describe_circuit(
    params: &ModelParams,
    config: &ModelConfig,
    circuit: &Circuit,
) -> Result<CircuitDescription> {
    let gc = build_computation_graph(params, config)?;
    let mut fan_in: HashMap<String, Vec<(String, f64)>> = HashMap::new();
    let mut fan_out: HashMap<String, Vec<(String, f64)>> = HashMap::new();
    for e in &circuit.edges {
        let w = weight_value(params, &e.param_ref())
            .ok_or_else(|| Error::Consistency(format!("edge {} does not resolve", e.param_ref())))?;
        fan_in.entry(e.dst.clone()).or_default().push((e.src.clone(), w));
        fan_out.entry(e.src.clone()).or_default().push((e.dst.clone(), w));
    }
    let mut heads = Vec::new();
    for &o in &gc.outputs {
        let name = gc.vertices[o].name.clone();
        let mut terms = fan_in.get(&name).cloned().unwrap_or_default();
        terms.sort_by(|a, b| a.0.cmp(&b.0));
        heads.push(HeadReadout {
            head: name.clone(),
            terms,
            bias: gc.vertices[o].bias.unwrap_or(0.0),
        });
    }
    let mut names: Vec<String> = fan_in.keys().chain(fan_out.keys()).cloned().collect();
    names.sort();
    names.dedup();
    let neurons = names
        .into_iter()
        .map(|name| {
            let bias = gc.vertex_by_name(&name).and_then(|v| gc.vertices[v].bias);
            let mut fi = fan_in.get(&name).cloned().unwrap_or_default();
            let mut fo = fan_out.get(&name).cloned().unwrap_or_default();
            fi.sort_by(|a, b| a.0.cmp(&b.0));
            fo.sort_by(|a, b| a.0.cmp(&b.0));
            NeuronLine { name, bias, fan_in: fi, fan_out: fo }
        })
        .collect();
    Ok(CircuitDescription { heads, neurons })
}

// ---------------------------------------------------------------------------
// DOT export
// ---------------------------------------------------------------------------

fn vertex_fill(class: VertexClass) -> &'static str {
    match class {
        VertexClass::Input | VertexClass::Output => "white",
        VertexClass::Agg => "lightblue",
        VertexClass::Up => "orange",
    }
}

fn edge_color(w: f64) -> String {
    if w >= 0.0 {
        "blue".into()
    } else {
        "red".into()
    }
}

fn write_dot<W: Write>(
    mut w: W,
    name: &str,
    gc: &ComputationGraph,
    edges: &[(usize, f64)],
) -> Result<()> {
    writeln!(w, "digraph {name} {{")?;
    writeln!(w, "  rankdir=LR;")?;
    writeln!(w, "  node [style=filled];")?;
    let mut used: Vec<usize> = edges
        .iter()
        .flat_map(|&(e, _)| [gc.edges[e].src, gc.edges[e].dst])
        .collect();
    used.sort_unstable();
    used.dedup();
    let max_w = edges.iter().map(|&(_, w)| w.abs()).fold(0.0, f64::max).max(1e-12);
    for v in used {
        let vx = &gc.vertices[v];
        writeln!(w, "  \"{}\" [fillcolor={}];", vx.name, vertex_fill(vx.class))?;
    }
    for &(e, wt) in edges {
        let ce = &gc.edges[e];
        let width = 0.5 + 3.0 * wt.abs() / max_w;
        writeln!(
            w,
            "  \"{}\" -> \"{}\" [color={}, penwidth={width:.2}, label=\"{wt:.3}\"];",
            gc.vertices[ce.src].name,
            gc.vertices[ce.dst].name,
            edge_color(wt)
        )?;
    }
    writeln!(w, "}}")?;
    Ok(())
}

/// DOT rendering of the whole computation graph, edges colored by weight sign
/// and scaled by magnitude.
pub fn computation_graph_dot<W: Write>(
    gc: &ComputationGraph,
    params: &ModelParams,
    w: W,
) -> Result<()> {
    let edges: Vec<(usize, f64)> = (0..gc.edges.len())
        .map(|e| (e, weight_value(params, &gc.edges[e].param).unwrap_or(0.0)))
        .collect();
    write_dot(w, "computation_graph", gc, &edges)
}

/// DOT rendering of a circuit's subgraph.
pub fn circuit_dot<W: Write>(
    gc: &ComputationGraph,
    params: &ModelParams,
    circuit: &Circuit,
    w: W,
) -> Result<()> {
    let edges: Vec<(usize, f64)> = circuit
        .edges
        .iter()
        .filter_map(|e| {
            gc.edge_by_param(&e.param_ref())
                .map(|id| (id, weight_value(params, &e.param_ref()).unwrap_or(e.weight)))
        })
        .collect();
    write_dot(w, "circuit", gc, &edges)
}

// ---------------------------------------------------------------------------
// Circuit over training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct OverTrainingConfig {
    /// EAP-IG interpolation steps for per-checkpoint scoring.
    pub m: usize,
    /// Circuit size used for the final checkpoint's reference circuit.
    pub final_k: usize,
    /// Candidate sizes swept to find a sufficient circuit per checkpoint.
    pub k_schedule: Vec<usize>,
    /// A circuit is sufficient when its loss is within this factor of the
    /// full model's.
    pub sufficiency_factor: f64,
    pub horizon: usize,
}

impl Default for OverTrainingConfig {
    fn default() -> Self {
        OverTrainingConfig {
            m: 20,
            final_k: 10,
            k_schedule: vec![1, 2, 3, 4, 5, 6, 8, 10, 13, 16, 20, 25, 30, 40, 50, 75, 100],
            sufficiency_factor: 1.25,
            horizon: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckpointCircuitRecord {
    pub epoch: usize,
    pub full_lmult: f64,
    pub reach_acc: Option<f64>,
    /// The final checkpoint's circuit edges, applied to this checkpoint.
    pub final_circuit_lmult: f64,
    /// Smallest swept size whose circuit is sufficient at this checkpoint.
    pub sufficient_size: Option<usize>,
    pub sufficient_lmult: Option<f64>,
}

pub struct OverTrainingOutcome {
    pub records: Vec<CheckpointCircuitRecord>,
    pub final_circuit: Circuit,
}

/// Study circuit formation across checkpoints: extract the final circuit,
/// evaluate its edge subset against every earlier checkpoint, and sweep the
/// size schedule per checkpoint for the smallest sufficient circuit.
pub fn circuit_over_training(
    checkpoints: &[Checkpoint],
    probes: &[ProbePair],
    testset: &[AttributedGraph],
    cfg: &OverTrainingConfig,
) -> Result<OverTrainingOutcome> {
    if checkpoints.len() < 2 {
        return Err(Error::Input("need at least two checkpoints".into()));
    }
    let config = &checkpoints[0].config;
    let last = checkpoints.last().expect("nonempty");
    let opts = ScoreOptions::new(
        crate::attribution::ScoreLoss::for_config(config),
        "over-training probes",
    );
    let gc_final = build_computation_graph(&last.params, config)?;
    let scores_final = eap_ig_scores(&last.params, config, &gc_final, probes, cfg.m, &opts)?;
    let mut final_circuit = discover_circuit(&gc_final, &scores_final, cfg.final_k)?;
    cache_weights(&mut final_circuit, &last.params)?;

    let mut records = Vec::with_capacity(checkpoints.len());
    for ckpt in checkpoints {
        let full_lmult = eval_lmult(&ckpt.params, config, testset, cfg.horizon)?;
        let preds = predictions(&ckpt.params, config, testset)?;
        let reach = config.bfs_head.then(|| reachability_accuracy(&preds, testset));
        let restricted = apply_circuit(&ckpt.params, &final_circuit, ApplyMode::CircuitOnly)?;
        let final_circuit_lmult = eval_lmult(&restricted, config, testset, cfg.horizon)?;

        let gc = build_computation_graph(&ckpt.params, config)?;
        let scores = eap_ig_scores(&ckpt.params, config, &gc, probes, cfg.m, &opts)?;
        let mut sufficient_size = None;
        let mut sufficient_lmult = None;
        for &k in &cfg.k_schedule {
            let c = discover_circuit(&gc, &scores, k)?;
            let p = apply_circuit(&ckpt.params, &c, ApplyMode::CircuitOnly)?;
            let l = eval_lmult(&p, config, testset, cfg.horizon)?;
            if l <= cfg.sufficiency_factor * full_lmult {
                sufficient_size = Some(c.len());
                sufficient_lmult = Some(l);
                break;
            }
        }
        records.push(CheckpointCircuitRecord {
            epoch: ckpt.epoch,
            full_lmult,
            reach_acc: reach,
            final_circuit_lmult,
            sufficient_size,
            sufficient_lmult,
        });
    }
    Ok(OverTrainingOutcome { records, final_circuit })
}

/// Evaluation summary of one circuit against a dataset, as emitted by the
/// `eval-circuit` command.
#[derive(Debug, Clone, Serialize)]
pub struct CircuitEvalReport {
    pub fidelity: FidelityReport,
    pub full_lmult: f64,
    pub circuit_lmult: f64,
    pub ablated_lmult: f64,
    pub full_reach_acc: Option<f64>,
    pub circuit_reach_acc: Option<f64>,
    pub ablated_reach_acc: Option<f64>,
    pub edges: usize,
}

pub fn eval_circuit(
    params: &ModelParams,
    config: &ModelConfig,
    circuit: &Circuit,
    dataset: &[AttributedGraph],
    horizon: usize,
    dataset_id: &str,
) -> Result<CircuitEvalReport> {
    let rules = default_agreement(config);
    let fidelity = fidelity_report(params, config, circuit, dataset, &rules, dataset_id)?;
    let only = apply_circuit(params, circuit, ApplyMode::CircuitOnly)?;
    let ablated = apply_circuit(params, circuit, ApplyMode::Ablate)?;
    let full_preds = predictions(params, config, dataset)?;
    let only_preds = predictions(&only, config, dataset)?;
    let abl_preds = predictions(&ablated, config, dataset)?;
    Ok(CircuitEvalReport {
        fidelity,
        full_lmult: multiplicative_test_loss(&full_preds, dataset, horizon)?,
        circuit_lmult: multiplicative_test_loss(&only_preds, dataset, horizon)?,
        ablated_lmult: multiplicative_test_loss(&abl_preds, dataset, horizon)?,
        full_reach_acc: config.bfs_head.then(|| reachability_accuracy(&full_preds, dataset)),
        circuit_reach_acc: config.bfs_head.then(|| reachability_accuracy(&only_preds, dataset)),
        ablated_reach_acc: config.bfs_head.then(|| reachability_accuracy(&abl_preds, dataset)),
        edges: circuit.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attribution::{weight_scores, Pooling, ScoreLoss};
    use crate::compgraph::{CompEdge, Vertex};
    use crate::gnn::min_via_relu_params;

    fn vtx(name: &str, class: VertexClass) -> Vertex {
        Vertex { name: name.into(), class, bias: None }
    }

    fn chain_gc() -> ComputationGraph {
        ComputationGraph::from_parts(
            vec![
                vtx("a", VertexClass::Input),
                vtx("b", VertexClass::Up),
                vtx("c", VertexClass::Output),
            ],
            vec![
                CompEdge { src: 0, dst: 1, param: ParamRef { name: "p0".into(), row: 0, col: 0 } },
                CompEdge { src: 1, dst: 2, param: ParamRef { name: "p1".into(), row: 0, col: 0 } },
            ],
        )
        .unwrap()
    }

    fn table_for(gc: &ComputationGraph, scores: &[f64]) -> ScoreTable {
        ScoreTable {
            method: "fixture".into(),
            pooling: Pooling::Mean,
            probe_id: "fixture".into(),
            loss_id: "mse".into(),
            entries: gc
                .edges
                .iter()
                .zip(scores)
                .map(|(e, &s)| (e.param.clone(), s))
                .collect(),
            signed: scores.to_vec(),
        }
    }

    #[test]
    fn k1_on_chain_returns_whole_chain() {
        let gc = chain_gc();
        let t = table_for(&gc, &[0.5, 0.2]);
        let c = discover_circuit(&gc, &t, 1).unwrap();
        assert_eq!(c.len(), 2);
        validate_circuit(&gc, &c).unwrap();
    }

    #[test]
    fn circuit_json_round_trip() {
        let gc = chain_gc();
        let t = table_for(&gc, &[0.5, 0.2]);
        let c = discover_circuit(&gc, &t, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("circuit.json");
        c.save(&path).unwrap();
        let back = Circuit::load(&path).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn circuit_only_with_full_edge_set_is_identity() {
        let config = ModelConfig { hidden: 4, embed: 2, ..ModelConfig::single_task() };
        let params = ModelParams::init(&config, 3);
        let gc = build_computation_graph(&params, &config).unwrap();
        let all = Circuit {
            edges: gc
                .edges
                .iter()
                .map(|e| CircuitEdge {
                    src: gc.vertices[e.src].name.clone(),
                    dst: gc.vertices[e.dst].name.clone(),
                    param: e.param.name.clone(),
                    row: e.param.row,
                    col: e.param.col,
                    weight: 0.0,
                })
                .collect(),
            provenance: Provenance { method: "all".into(), k: 0, probe: String::new() },
        };
        let only = apply_circuit(&params, &all, ApplyMode::CircuitOnly).unwrap();
        assert_eq!(only, params);
        // Fid- of the full edge set is 0 and ablating everything is maximal.
        let opts = crate::data::GenOptions::default();
        let ds = crate::data::generate_ood_testset(21, 10, 2, crate::data::TaskSet::Sp, &opts)
            .unwrap();
        let rules = default_agreement(&config);
        let rep = fidelity_report(&params, &config, &all, &ds, &rules, "unit").unwrap();
        assert_eq!(rep.fid_minus, 0.0);
    }

    #[test]
    fn stale_circuit_reference_is_rejected() {
        let config = ModelConfig { hidden: 4, embed: 2, ..ModelConfig::single_task() };
        let params = ModelParams::init(&config, 3);
        let stale = Circuit {
            edges: vec![CircuitEdge {
                src: "x".into(),
                dst: "y".into(),
                param: "convs.9.up_mlp.lins.0.weight".into(),
                row: 0,
                col: 0,
                weight: 1.0,
            }],
            provenance: Provenance { method: "t".into(), k: 1, probe: String::new() },
        };
        assert!(matches!(
            apply_circuit(&params, &stale, ApplyMode::Ablate),
            Err(Error::Consistency(_))
        ));
    }

    #[test]
    fn characterization_identities() {
        assert_eq!(characterization_score(1.0, 0.0), 1.0);
        assert_eq!(characterization_score(0.5, 0.5), 0.5);
        assert_eq!(characterization_score(0.0, 0.0), 0.0);
        assert_eq!(characterization_score(1.0, 1.0), 0.0);
    }

    #[test]
    fn jaccard_examples() {
        let config = ModelConfig { hidden: 4, embed: 2, ..ModelConfig::single_task() };
        let mut params = ModelParams::zeros(&config);
        // Give two specific weights magnitudes 3 and 1.
        *params.convs[0].agg_mlp.lins[0].weight_mut(0, 0) = 3.0;
        *params.convs[0].agg_mlp.lins[0].weight_mut(1, 0) = -1.0;
        let mk = |prefs: &[(usize, usize)]| Circuit {
            edges: prefs
                .iter()
                .map(|&(row, col)| CircuitEdge {
                    src: String::new(),
                    dst: String::new(),
                    param: "convs.0.agg_mlp.lins.0.weight".into(),
                    row,
                    col,
                    weight: 0.0,
                })
                .collect(),
            provenance: Provenance { method: "t".into(), k: 0, probe: String::new() },
        };
        let a = mk(&[(0, 0)]);
        let b = mk(&[(0, 0), (1, 0)]);
        assert_eq!(weighted_jaccard(&a, &a, &params).unwrap(), 1.0);
        assert_eq!(weighted_jaccard(&a, &b, &params).unwrap(), 0.75);
        let c = mk(&[(1, 0)]);
        assert_eq!(weighted_jaccard(&a, &c, &params).unwrap(), 0.0);
        // Symmetry.
        assert_eq!(
            weighted_jaccard(&a, &b, &params).unwrap(),
            weighted_jaccard(&b, &a, &params).unwrap()
        );
        // Empty union.
        let empty = mk(&[]);
        assert_eq!(weighted_jaccard(&empty, &empty, &params).unwrap(), 0.0);
    }

    #[test]
    fn describe_single_edge_circuit() {
        let config = ModelConfig { hidden: 4, embed: 2, ..ModelConfig::single_task() };
        let mut params = ModelParams::init(&config, 7);
        params.convs[1].up_mlp.lins[1].b[0] = 2.6463;
        let gc = build_computation_graph(&params, &config).unwrap();
        let target = gc
            .edges
            .iter()
            .find(|e| e.param.name == "convs.1.up_mlp.lins.1.weight")
            .unwrap();
        let c = Circuit {
            edges: vec![CircuitEdge {
                src: gc.vertices[target.src].name.clone(),
                dst: gc.vertices[target.dst].name.clone(),
                param: target.param.name.clone(),
                row: target.param.row,
                col: target.param.col,
                weight: 0.0,
            }],
            provenance: Provenance { method: "t".into(), k: 1, probe: String::new() },
        };
        let desc = describe_circuit(&params, &config, &c).unwrap();
        let head = desc.heads.iter().find(|h| h.head == "output_sp").unwrap();
        assert_eq!(head.terms.len(), 1);
        assert!((head.bias - 2.6463).abs() < 1e-12);
        let text = desc.to_string();
        assert!(text.contains("output_sp ="));
    }

    #[test]
    fn min_via_relu_fixture_is_describable() {
        // The no-self-loop update MLP computes min(m, x) = m - ReLU(m - x):
        // a negative-weight ReLU unit feeding a pass-through.
        let config = ModelConfig { hidden: 4, embed: 2, self_loops: false, ..ModelConfig::single_task() };
        let params = min_via_relu_params(&config);
        let gc = build_computation_graph(&params, &config).unwrap();
        let opts = ScoreOptions {
            pooling: Pooling::Mean,
            loss: ScoreLoss::Mse,
            ig_indexing: crate::attribution::IgIndexing::EndAnchored,
            probe_id: "fixture".into(),
        };
        let t = weight_scores(&params, &config, &gc, &opts).unwrap();
        let c = discover_circuit(&gc, &t, 10).unwrap();
        let desc = describe_circuit(&params, &config, &c).unwrap();
        let text = desc.to_string();
        // The pattern: one fan-in pair (+1, -1) into the subtraction unit.
        assert!(text.contains("-1.0000"));
        assert!(text.contains("1.0000"));
    }

    #[test]
    fn monotone_inclusion_in_k() {
        let config = ModelConfig { hidden: 5, embed: 3, ..ModelConfig::single_task() };
        let params = ModelParams::init(&config, 13);
        let gc = build_computation_graph(&params, &config).unwrap();
        let opts = ScoreOptions::new(ScoreLoss::Mse, "unit");
        let t = weight_scores(&params, &config, &gc, &opts).unwrap();
        let mut prev = discover_circuit(&gc, &t, 1).unwrap().edge_set();
        for k in 2..8 {
            let cur = discover_circuit(&gc, &t, k).unwrap().edge_set();
            assert!(prev.is_subset(&cur), "k={k}");
            prev = cur;
        }
    }
}
