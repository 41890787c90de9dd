//! The neuron-level model computation graph and its DAG primitives.
//!
//! One vertex per neuron (plus input features and output heads), one directed
//! edge per scalar weight. Biases are vertex attributes, never edges. A
//! single copy of each neuron exists regardless of input-graph size.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gnn::{LinRef, ModelConfig, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VertexClass {
    Input,
    Agg,
    Up,
    Output,
}

#[derive(Debug, Clone)]
pub struct Vertex {
    pub name: String,
    pub class: VertexClass,
    /// Bias of the neuron this vertex stands for (inputs carry none).
    pub bias: Option<f64>,
}

/// Scalar-weight reference: `name` is the full weight-matrix key
/// (e.g. `convs.0.agg_mlp.lins.0.weight`), `row`/`col` index into it.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamRef {
    pub name: String,
    pub row: usize,
    pub col: usize,
}

impl std::fmt::Display for ParamRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}[{}][{}]", self.name, self.row, self.col)
    }
}

/// Look up the current value of a referenced weight.
pub fn weight_value(params: &ModelParams, pref: &ParamRef) -> Option<f64> {
    let base = pref.name.strip_suffix(".weight")?;
    let r = LinRef::parse(base)?;
    if r.conv >= params.convs.len() {
        return None;
    }
    let lin = params.lin(r);
    if pref.row >= lin.out_dim || pref.col >= lin.in_dim {
        return None;
    }
    Some(lin.weight(pref.row, pref.col))
}

#[derive(Debug, Clone)]
pub struct CompEdge {
    pub src: usize,
    pub dst: usize,
    pub param: ParamRef,
}

/// Immutable neuron-level computation graph with cached topological order.
#[derive(Debug, Clone)]
pub struct ComputationGraph {
    pub vertices: Vec<Vertex>,
    pub edges: Vec<CompEdge>,
    pub inputs: Vec<usize>,
    pub outputs: Vec<usize>,
    in_adj: Vec<Vec<usize>>,
    out_adj: Vec<Vec<usize>>,
    topo: Vec<usize>,
    name_index: HashMap<String, usize>,
    param_index: HashMap<ParamRef, usize>,
}

impl ComputationGraph {
    /// Assemble a graph from raw vertex and edge lists (used both by
    /// [`build_computation_graph`] and by DAG fixtures in tests). Inputs are
    /// the in-degree-0 vertices, outputs the out-degree-0 ones. Fails on
    /// cycles.
    pub fn from_parts(vertices: Vec<Vertex>, edges: Vec<CompEdge>) -> Result<Self> {
        Self::from_parts_with_io(vertices, edges, None)
    }

    /// [`ComputationGraph::from_parts`] with explicit input/output vertex
    /// sets, for graphs where endpoint roles are narrower than the degrees
    /// suggest.
    pub fn from_parts_with_io(
        vertices: Vec<Vertex>,
        edges: Vec<CompEdge>,
        io: Option<(Vec<usize>, Vec<usize>)>,
    ) -> Result<Self> {
        let n = vertices.len();
        let mut in_adj = vec![Vec::new(); n];
        let mut out_adj = vec![Vec::new(); n];
        for (i, e) in edges.iter().enumerate() {
            if e.src >= n || e.dst >= n {
                return Err(Error::Structure(format!("edge {} endpoints out of range", e.param)));
            }
            in_adj[e.dst].push(i);
            out_adj[e.src].push(i);
        }
        let mut name_index = HashMap::new();
        for (i, v) in vertices.iter().enumerate() {
            if name_index.insert(v.name.clone(), i).is_some() {
                return Err(Error::Structure(format!("duplicate vertex name {}", v.name)));
            }
        }
        let mut param_index = HashMap::new();
        for (i, e) in edges.iter().enumerate() {
            if param_index.insert(e.param.clone(), i).is_some() {
                return Err(Error::Structure(format!("duplicate edge parameter {}", e.param)));
            }
        }
        let (inputs, outputs) = match io {
            Some((i, o)) => (i, o),
            None => (
                (0..n).filter(|&v| in_adj[v].is_empty()).collect(),
                (0..n).filter(|&v| out_adj[v].is_empty()).collect(),
            ),
        };
        let mut gc = ComputationGraph {
            vertices,
            edges,
            inputs,
            outputs,
            in_adj,
            out_adj,
            topo: Vec::new(),
            name_index,
            param_index,
        };
        gc.topo = gc.compute_topological_order()?;
        Ok(gc)
    }

    pub fn vertex_by_name(&self, name: &str) -> Option<usize> {
        self.name_index.get(name).copied()
    }

    pub fn edge_by_param(&self, pref: &ParamRef) -> Option<usize> {
        self.param_index.get(pref).copied()
    }

    pub fn in_edges(&self, v: usize) -> &[usize] {
        &self.in_adj[v]
    }

    pub fn out_edges(&self, v: usize) -> &[usize] {
        &self.out_adj[v]
    }

    /// The cached topological order.
    pub fn topological_order(&self) -> &[usize] {
        &self.topo
    }

    /// Kahn's algorithm over vertex indices; O(|V| + |E|). On a cycle,
    /// reports one offending edge.
    fn compute_topological_order(&self) -> Result<Vec<usize>> {
        let n = self.vertices.len();
        let mut indeg: Vec<usize> = (0..n).map(|v| self.in_adj[v].len()).collect();
        let mut queue: std::collections::VecDeque<usize> =
            (0..n).filter(|&v| indeg[v] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(v) = queue.pop_front() {
            order.push(v);
            for &e in &self.out_adj[v] {
                let w = self.edges[e].dst;
                indeg[w] -= 1;
                if indeg[w] == 0 {
                    queue.push_back(w);
                }
            }
        }
        if order.len() != n {
            let e = self
                .edges
                .iter()
                .find(|e| indeg[e.src] > 0 && indeg[e.dst] > 0)
                .expect("cycle implies a remaining edge");
            return Err(Error::Structure(format!(
                "cycle detected through edge {} -> {}",
                self.vertices[e.src].name, self.vertices[e.dst].name
            )));
        }
        Ok(order)
    }

    /// Vertices with no path to any output (flagged, not removed).
    pub fn dead_ends(&self) -> Vec<usize> {
        let mut reaches = vec![false; self.vertices.len()];
        for &o in &self.outputs {
            reaches[o] = true;
        }
        for &v in self.topo.iter().rev() {
            if !reaches[v] {
                reaches[v] = self.out_adj[v].iter().any(|&e| reaches[self.edges[e].dst]);
            }
        }
        (0..self.vertices.len()).filter(|&v| !reaches[v]).collect()
    }
}

/// An input-to-output path with its score total.
#[derive(Debug, Clone, PartialEq)]
pub struct PathResult {
    pub vertices: Vec<usize>,
    pub edges: Vec<usize>,
    pub total: f64,
}

/// Maximum-score input-to-output path constrained to pass through `edge`,
/// computed by forward and backward DP over the cached topological order in
/// O(|V| + |E|). Score ties at a DP step resolve to the smaller vertex name.
pub fn longest_path_through_edge(
    gc: &ComputationGraph,
    scores: &[f64],
    edge: usize,
) -> Result<PathResult> {
    if edge >= gc.edges.len() {
        return Err(Error::Input(format!("edge index {edge} out of range")));
    }
    if scores.len() != gc.edges.len() {
        return Err(Error::Input("need one score per computation edge".into()));
    }
    let n = gc.vertices.len();
    let neg = f64::NEG_INFINITY;

    // Best score from any input to each vertex.
    let mut best_in = vec![neg; n];
    let mut pred: Vec<Option<usize>> = vec![None; n];
    for &i in &gc.inputs {
        best_in[i] = 0.0;
    }
    for &v in gc.topological_order() {
        if best_in[v] == neg {
            continue;
        }
        for &e in gc.out_edges(v) {
            let w = gc.edges[e].dst;
            let cand = best_in[v] + scores[e];
            let replace = cand > best_in[w]
                || (cand == best_in[w]
                    && pred[w].is_some_and(|p| {
                        gc.vertices[v].name < gc.vertices[gc.edges[p].src].name
                    }));
            if replace {
                best_in[w] = cand;
                pred[w] = Some(e);
            }
        }
    }

    // Best score from each vertex to any output.
    let mut best_out = vec![neg; n];
    let mut succ: Vec<Option<usize>> = vec![None; n];
    for &o in &gc.outputs {
        best_out[o] = 0.0;
    }
    for &v in gc.topological_order().iter().rev() {
        for &e in gc.out_edges(v) {
            let w = gc.edges[e].dst;
            if best_out[w] == neg {
                continue;
            }
            let cand = scores[e] + best_out[w];
            let replace = cand > best_out[v]
                || (cand == best_out[v]
                    && succ[v].is_some_and(|s| {
                        gc.vertices[w].name < gc.vertices[gc.edges[s].dst].name
                    }));
            if replace {
                best_out[v] = cand;
                succ[v] = Some(e);
            }
        }
    }

    let (a, b) = (gc.edges[edge].src, gc.edges[edge].dst);
    if best_in[a] == neg || best_out[b] == neg {
        return Err(Error::PathInfeasible(format!(
            "edge {} lies on no input-to-output path",
            gc.edges[edge].param
        )));
    }

    let mut edges_rev = Vec::new();
    let mut v = a;
    while let Some(e) = pred[v] {
        edges_rev.push(e);
        v = gc.edges[e].src;
    }
    edges_rev.reverse();
    let mut edges = edges_rev;
    edges.push(edge);
    let mut w = b;
    while let Some(e) = succ[w] {
        edges.push(e);
        w = gc.edges[e].dst;
    }
    let mut vertices = vec![gc.edges[edges[0]].src];
    for &e in &edges {
        vertices.push(gc.edges[e].dst);
    }
    Ok(PathResult { vertices, edges, total: best_in[a] + scores[edge] + best_out[b] })
}

/// Build the computation graph of a MinAggGNN: input-feature vertices (one
/// per feature channel plus the shared edge-weight input), one vertex per
/// hidden neuron, and the output heads. Each scalar weight becomes one edge;
/// the edge-weight input feeds every layer's aggregation MLP and node
/// embeddings feed both MLPs of the next layer.
pub fn build_computation_graph(
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<ComputationGraph> {
    config.validate()?;
    if params.convs.len() != config.depth {
        return Err(Error::Consistency("params do not match config depth".into()));
    }
    let mut vertices: Vec<Vertex> = Vec::new();
    let mut edges: Vec<CompEdge> = Vec::new();

    let mut input_ids = Vec::new();
    let input_names: Vec<&str> = if config.bfs_head || config.input_dim == 2 {
        vec!["input_sp", "input_bfs"]
    } else {
        vec!["input_sp"]
    };
    if input_names.len() != config.input_dim {
        return Err(Error::Config("input feature channels must be 1 or 2".into()));
    }
    for name in input_names {
        input_ids.push(vertices.len());
        vertices.push(Vertex { name: name.into(), class: VertexClass::Input, bias: None });
    }
    let edge_input = vertices.len();
    vertices.push(Vertex { name: "input_edge".into(), class: VertexClass::Input, bias: None });

    let head_names = config.head_names();
    let mut emb_ids: Vec<usize> = input_ids.clone();
    for l in 0..config.depth {
        let conv = &params.convs[l];
        let last = l + 1 == config.depth;
        let add_layer = |mlp_name: &str,
                             lin: usize,
                             lin_params: &crate::gnn::Linear,
                             class: VertexClass,
                             names: Option<&[&str]>,
                             cols: &[usize],
                             vertices: &mut Vec<Vertex>,
                             edges: &mut Vec<CompEdge>|
         -> Vec<usize> {
            let mut ids = Vec::with_capacity(lin_params.out_dim);
            for i in 0..lin_params.out_dim {
                let name = match names {
                    Some(ns) => ns[i].to_string(),
                    None => format!("convs.{l}.{mlp_name}.lins.{lin}.{i}"),
                };
                let id = vertices.len();
                vertices.push(Vertex { name, class, bias: Some(lin_params.b[i]) });
                ids.push(id);
                for (c, &src) in cols.iter().enumerate() {
                    edges.push(CompEdge {
                        src,
                        dst: id,
                        param: ParamRef {
                            name: format!("convs.{l}.{mlp_name}.lins.{lin}.weight"),
                            row: i,
                            col: c,
                        },
                    });
                }
            }
            ids
        };

        let mut agg_cols = emb_ids.clone();
        agg_cols.push(edge_input);
        let agg_h = add_layer(
            "agg_mlp",
            0,
            &conv.agg_mlp.lins[0],
            VertexClass::Agg,
            None,
            &agg_cols,
            &mut vertices,
            &mut edges,
        );
        let agg_out = add_layer(
            "agg_mlp",
            1,
            &conv.agg_mlp.lins[1],
            VertexClass::Agg,
            None,
            &agg_h,
            &mut vertices,
            &mut edges,
        );
        let mut up_cols = emb_ids.clone();
        up_cols.extend_from_slice(&agg_out);
        let up_h = add_layer(
            "up_mlp",
            0,
            &conv.up_mlp.lins[0],
            VertexClass::Up,
            None,
            &up_cols,
            &mut vertices,
            &mut edges,
        );
        let out_ids = add_layer(
            "up_mlp",
            1,
            &conv.up_mlp.lins[1],
            if last { VertexClass::Output } else { VertexClass::Up },
            last.then_some(&head_names[..]),
            &up_h,
            &mut vertices,
            &mut edges,
        );
        emb_ids = out_ids;
    }

    let gc = ComputationGraph::from_parts(vertices, edges)?;
    debug_assert_eq!(gc.edges.len(), params.num_weights());
    Ok(gc)
}
