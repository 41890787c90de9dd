//! Model architectures: the min-aggregated message-passing network and the
//! GINE layer, plus parameter containers and checkpoint serialization.
//!
//! Parameters are named `convs.{l}.{agg_mlp|up_mlp}.lins.{k}.{weight|bias}`;
//! individual neurons are addressed as `convs.{l}.{...}.lins.{k}.{index}`,
//! and the final update linear's rows are the output heads (`output_sp`,
//! `output_bfs`).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::autodiff;
use crate::error::{Error, Result};
use crate::graph::AttributedGraph;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Min,
    Max,
}

/// Architecture description for a MinAggGNN.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Number of message-passing layers L.
    pub depth: usize,
    pub aggregation: Aggregation,
    /// Hidden width of the two-layer MLPs.
    pub hidden: usize,
    /// Width of node embeddings between layers (and of messages).
    pub embed: usize,
    /// Input feature dimension (1 for SP, 2 for SP+BFS).
    pub input_dim: usize,
    /// Emit a reachability logit head next to the scalar SP head.
    pub bfs_head: bool,
    /// Whether the model expects graphs with self-loops.
    pub self_loops: bool,
}

impl ModelConfig {
    /// The single-task shortest-path model: two layers, hidden 64, embed 8.
    pub fn single_task() -> Self {
        ModelConfig {
            depth: 2,
            aggregation: Aggregation::Min,
            hidden: 64,
            embed: 8,
            input_dim: 1,
            bfs_head: false,
            self_loops: true,
        }
    }

    /// The parallel SP+BFS model: concatenated inputs, two heads.
    pub fn parallel() -> Self {
        ModelConfig { input_dim: 2, bfs_head: true, ..Self::single_task() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 {
            return Err(Error::Config("depth must be >= 1".into()));
        }
        if self.hidden < 1 || self.embed < 1 || self.input_dim < 1 {
            return Err(Error::Config("all widths must be >= 1".into()));
        }
        Ok(())
    }

    pub fn head_count(&self) -> usize {
        1 + usize::from(self.bfs_head)
    }

    pub fn head_names(&self) -> Vec<&'static str> {
        if self.bfs_head {
            vec!["output_sp", "output_bfs"]
        } else {
            vec!["output_sp"]
        }
    }

    /// Embedding dimension entering layer `l`.
    pub fn layer_in(&self, l: usize) -> usize {
        if l == 0 {
            self.input_dim
        } else {
            self.embed
        }
    }

    /// Output dimension of layer `l` (heads at the last layer).
    pub fn layer_out(&self, l: usize) -> usize {
        if l + 1 == self.depth {
            self.head_count()
        } else {
            self.embed
        }
    }
}

/// A dense affine map, weights row-major `[out_dim x in_dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub out_dim: usize,
    pub in_dim: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Linear {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Linear { out_dim, in_dim, w: vec![0.0; out_dim * in_dim], b: vec![0.0; out_dim] }
    }

    fn init(out_dim: usize, in_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let k = 1.0 / (in_dim as f64).sqrt();
        let mut lin = Linear::zeros(out_dim, in_dim);
        for w in &mut lin.w {
            *w = rng.gen_range(-k..k);
        }
        for b in &mut lin.b {
            *b = rng.gen_range(-k..k);
        }
        lin
    }

    #[inline]
    pub fn weight(&self, row: usize, col: usize) -> f64 {
        self.w[row * self.in_dim + col]
    }

    #[inline]
    pub fn weight_mut(&mut self, row: usize, col: usize) -> &mut f64 {
        &mut self.w[row * self.in_dim + col]
    }

    /// `out[r] = b[r] + sum_c w[r][c] x[c]`.
    pub fn forward_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.in_dim);
        debug_assert_eq!(out.len(), self.out_dim);
        for (r, o) in out.iter_mut().enumerate() {
            let row = &self.w[r * self.in_dim..(r + 1) * self.in_dim];
            let mut acc = self.b[r];
            for (w, v) in row.iter().zip(x) {
                acc += w * v;
            }
            *o = acc;
        }
    }
}

/// Two-layer MLP: Linear -> ReLU -> Linear.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub lins: [Linear; 2],
}

impl Mlp {
    pub fn zeros(out_dim: usize, hidden: usize, in_dim: usize) -> Self {
        Mlp { lins: [Linear::zeros(hidden, in_dim), Linear::zeros(out_dim, hidden)] }
    }

    fn init(out_dim: usize, hidden: usize, in_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Mlp { lins: [Linear::init(hidden, in_dim, rng), Linear::init(out_dim, hidden, rng)] }
    }
}

/// Parameters of one message-passing layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub agg_mlp: Mlp,
    pub up_mlp: Mlp,
}

/// All weights and biases of a MinAggGNN.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub convs: Vec<ConvParams>,
}

/// Identifies one linear map inside [`ModelParams`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LinRef {
    pub conv: usize,
    pub up: bool,
    pub lin: usize,
}

impl LinRef {
    pub fn name(&self) -> String {
        let which = if self.up { "up_mlp" } else { "agg_mlp" };
        format!("convs.{}.{which}.lins.{}", self.conv, self.lin)
    }

    pub fn parse(name: &str) -> Option<LinRef> {
        let parts: Vec<&str> = name.split('.').collect();
        if parts.len() != 5 || parts[0] != "convs" || parts[3] != "lins" {
            return None;
        }
        let conv = parts[1].parse().ok()?;
        let up = match parts[2] {
            "up_mlp" => true,
            "agg_mlp" => false,
            _ => return None,
        };
        let lin = parts[4].parse().ok()?;
        if lin > 1 {
            return None;
        }
        Some(LinRef { conv, up, lin })
    }
}

impl ModelParams {
    pub fn zeros(config: &ModelConfig) -> Self {
        let convs = (0..config.depth)
            .map(|l| {
                let d_in = config.layer_in(l);
                let d_out = config.layer_out(l);
                ConvParams {
                    agg_mlp: Mlp::zeros(config.embed, config.hidden, d_in + 1),
                    up_mlp: Mlp::zeros(d_out, config.hidden, d_in + config.embed),
                }
            })
            .collect();
        ModelParams { convs }
    }

    /// Seeded uniform initialization, U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for
    /// weights and biases alike.
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let convs = (0..config.depth)
            .map(|l| {
                let d_in = config.layer_in(l);
                let d_out = config.layer_out(l);
                ConvParams {
                    agg_mlp: Mlp::init(config.embed, config.hidden, d_in + 1, &mut rng),
                    up_mlp: Mlp::init(d_out, config.hidden, d_in + config.embed, &mut rng),
                }
            })
            .collect();
        ModelParams { convs }
    }

    pub fn lin(&self, r: LinRef) -> &Linear {
        let mlp = if r.up { &self.convs[r.conv].up_mlp } else { &self.convs[r.conv].agg_mlp };
        &mlp.lins[r.lin]
    }

    pub fn lin_mut(&mut self, r: LinRef) -> &mut Linear {
        let mlp = if r.up {
            &mut self.convs[r.conv].up_mlp
        } else {
            &mut self.convs[r.conv].agg_mlp
        };
        &mut mlp.lins[r.lin]
    }

    /// All linear maps in canonical order (conv asc, agg before up, lin 0
    /// before lin 1). Every parameter walk in the crate uses this order, so
    /// optimizer state and serialization stay aligned.
    pub fn lin_refs(&self) -> Vec<LinRef> {
        let mut out = Vec::new();
        for conv in 0..self.convs.len() {
            for up in [false, true] {
                for lin in 0..2 {
                    out.push(LinRef { conv, up, lin });
                }
            }
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.lin_refs()
            .iter()
            .map(|&r| {
                let l = self.lin(r);
                l.w.len() + l.b.len()
            })
            .sum()
    }

    /// Number of scalar inter-neuron weights (bias entries excluded).
    pub fn num_weights(&self) -> usize {
        self.lin_refs().iter().map(|&r| self.lin(r).w.len()).sum()
    }

    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(&mut f64)) {
        for r in self.lin_refs() {
            let lin = self.lin_mut(r);
            for w in &mut lin.w {
                f(w);
            }
            for b in &mut lin.b {
                f(b);
            }
        }
    }

    pub fn for_each_param(&self, mut f: impl FnMut(f64)) {
        for r in self.lin_refs() {
            let lin = self.lin(r);
            for &w in &lin.w {
                f(w);
            }
            for &b in &lin.b {
                f(b);
            }
        }
    }

    pub fn l1_norm(&self) -> f64 {
        let mut acc = 0.0;
        self.for_each_param(|p| acc += p.abs());
        acc
    }
}

/// One message-passing layer: for each node v,
/// `out_v = f_Up(emb_v, agg_{u in N(v)} f_Agg(emb_u, w_{u,v}))`
/// with the aggregation taken coordinatewise over message vectors.
pub fn minagg_layer_forward(
    conv: &ConvParams,
    aggregation: Aggregation,
    graph: &AttributedGraph,
    emb: &[Vec<f64>],
) -> Result<Vec<Vec<f64>>> {
    let incoming = graph.incoming();
    let (out, _) = autodiff::layer_forward(conv, aggregation, graph, &incoming, emb, false)?;
    Ok(out)
}

/// Full forward pass: stacks `depth` layers and returns per-node head outputs
/// (`[node][head]`, SP first).
pub fn model_forward(
    params: &ModelParams,
    config: &ModelConfig,
    graph: &AttributedGraph,
) -> Result<Vec<Vec<f64>>> {
    let (out, _) = autodiff::forward(params, config, graph, false)?;
    Ok(out)
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

/// Optimizer hyperparameters recorded alongside a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimMeta {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub l1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub epoch: usize,
    pub seed: u64,
    pub optim: Option<OptimMeta>,
}

impl Checkpoint {
    pub fn to_json(&self) -> Value {
        let mut params = serde_json::Map::new();
        for r in self.params.lin_refs() {
            let lin = self.params.lin(r);
            let rows: Vec<Vec<f64>> = (0..lin.out_dim)
                .map(|i| lin.w[i * lin.in_dim..(i + 1) * lin.in_dim].to_vec())
                .collect();
            params.insert(format!("{}.weight", r.name()), json!(rows));
            params.insert(format!("{}.bias", r.name()), json!(lin.b));
        }
        let mut v = json!({
            "config": self.config,
            "params": Value::Object(params),
            "epoch": self.epoch,
            "seed": self.seed,
        });
        if let Some(optim) = &self.optim {
            v["optim"] = serde_json::to_value(optim).expect("optim serializes");
        }
        v
    }

    pub fn from_json(v: &Value) -> Result<Self> {
        let config: ModelConfig = serde_json::from_value(
            v.get("config").cloned().ok_or_else(|| Error::Format("checkpoint missing config".into()))?,
        )?;
        config.validate()?;
        let mut params = ModelParams::zeros(&config);
        let map = v
            .get("params")
            .and_then(Value::as_object)
            .ok_or_else(|| Error::Format("checkpoint missing params".into()))?;
        for r in params.lin_refs() {
            let name = r.name();
            let lin = params.lin_mut(r);
            let w: Vec<Vec<f64>> = serde_json::from_value(
                map.get(&format!("{name}.weight"))
                    .cloned()
                    .ok_or_else(|| Error::Format(format!("missing {name}.weight")))?,
            )?;
            if w.len() != lin.out_dim || w.iter().any(|row| row.len() != lin.in_dim) {
                return Err(Error::Consistency(format!("{name}.weight has wrong shape")));
            }
            for (i, row) in w.into_iter().enumerate() {
                lin.w[i * lin.in_dim..(i + 1) * lin.in_dim].copy_from_slice(&row);
            }
            let b: Vec<f64> = serde_json::from_value(
                map.get(&format!("{name}.bias"))
                    .cloned()
                    .ok_or_else(|| Error::Format(format!("missing {name}.bias")))?,
            )?;
            if b.len() != lin.out_dim {
                return Err(Error::Consistency(format!("{name}.bias has wrong shape")));
            }
            lin.b = b;
        }
        let epoch = v.get("epoch").and_then(Value::as_u64).unwrap_or(0) as usize;
        let seed = v.get("seed").and_then(Value::as_u64).unwrap_or(0);
        let optim = v.get("optim").map(|o| serde_json::from_value(o.clone())).transpose()?;
        Ok(Checkpoint { config, params, epoch, seed, optim })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        serde_json::to_writer(std::io::BufWriter::new(f), &self.to_json())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        let v: Value = serde_json::from_reader(std::io::BufReader::new(f))?;
        Self::from_json(&v)
    }
}

// ---------------------------------------------------------------------------
// Hand-built parameter fixtures
// ---------------------------------------------------------------------------

/// Exact Bellman-Ford parameters for graphs with self-loops: each layer's
/// aggregation computes `d_u + w` through one ReLU unit and the update passes
/// the aggregated minimum through. A depth-L model with these parameters
/// reproduces L relaxation steps exactly on nonnegative states.
pub fn ideal_bellman_ford_params(config: &ModelConfig) -> ModelParams {
    let mut p = ModelParams::zeros(config);
    for l in 0..config.depth {
        let d_in = config.layer_in(l);
        let conv = &mut p.convs[l];
        // f_Agg(x, e) = x[0] + e, carried in message coordinate 0.
        *conv.agg_mlp.lins[0].weight_mut(0, 0) = 1.0;
        *conv.agg_mlp.lins[0].weight_mut(0, d_in) = 1.0;
        *conv.agg_mlp.lins[1].weight_mut(0, 0) = 1.0;
        // f_Up(x, m) = m[0].
        *conv.up_mlp.lins[0].weight_mut(0, d_in) = 1.0;
        *conv.up_mlp.lins[1].weight_mut(0, 0) = 1.0;
    }
    p
}

/// Bellman-Ford parameters for graphs WITHOUT self-loops: the update MLP
/// computes `min(m, x_v) = m - ReLU(m - x_v)` since the aggregation no longer
/// sees the node's own state.
pub fn min_via_relu_params(config: &ModelConfig) -> ModelParams {
    let mut p = ModelParams::zeros(config);
    for l in 0..config.depth {
        let d_in = config.layer_in(l);
        let conv = &mut p.convs[l];
        *conv.agg_mlp.lins[0].weight_mut(0, 0) = 1.0;
        *conv.agg_mlp.lins[0].weight_mut(0, d_in) = 1.0;
        *conv.agg_mlp.lins[1].weight_mut(0, 0) = 1.0;
        // Hidden unit 0: ReLU(m), hidden unit 1: ReLU(m - x_v).
        *conv.up_mlp.lins[0].weight_mut(0, d_in) = 1.0;
        *conv.up_mlp.lins[0].weight_mut(1, d_in) = 1.0;
        *conv.up_mlp.lins[0].weight_mut(1, 0) = -1.0;
        *conv.up_mlp.lins[1].weight_mut(0, 0) = 1.0;
        *conv.up_mlp.lins[1].weight_mut(0, 1) = -1.0;
    }
    p
}

// ---------------------------------------------------------------------------
// GINE
// ---------------------------------------------------------------------------

/// Edge-feature projection for a GINE layer (a bare linear map).
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeProj {
    pub out_dim: usize,
    pub in_dim: usize,
    pub w: Vec<f64>,
}

impl EdgeProj {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        EdgeProj { out_dim, in_dim, w: vec![0.0; out_dim * in_dim] }
    }

    fn apply_into(&self, e: &[f64], out: &mut [f64]) {
        for (r, o) in out.iter_mut().enumerate() {
            let row = &self.w[r * self.in_dim..(r + 1) * self.in_dim];
            *o = row.iter().zip(e).map(|(w, v)| w * v).sum();
        }
    }
}

/// One GINE layer: MLP over the node embedding plus a max-aggregated,
/// ReLU-gated neighborhood term with projected edge features.
#[derive(Debug, Clone, PartialEq)]
pub struct GineLayerParams {
    pub mlp: Mlp,
    pub edge_proj: EdgeProj,
}

impl GineLayerParams {
    pub fn zeros(embed: usize, hidden: usize, edge_dim: usize) -> Self {
        GineLayerParams {
            mlp: Mlp::zeros(embed, hidden, embed),
            edge_proj: EdgeProj::zeros(embed, edge_dim),
        }
    }

    /// Identity-MLP fixture (requires hidden >= 2*embed): f(x) = x via paired
    /// ReLU(x) - ReLU(-x) units.
    pub fn identity(embed: usize, hidden: usize, edge_dim: usize) -> Self {
        assert!(hidden >= 2 * embed);
        let mut p = Self::zeros(embed, hidden, edge_dim);
        for c in 0..embed {
            *p.mlp.lins[0].weight_mut(2 * c, c) = 1.0;
            *p.mlp.lins[0].weight_mut(2 * c + 1, c) = -1.0;
            *p.mlp.lins[1].weight_mut(c, 2 * c) = 1.0;
            *p.mlp.lins[1].weight_mut(c, 2 * c + 1) = -1.0;
        }
        p
    }

    pub fn init(embed: usize, hidden: usize, edge_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = GineLayerParams {
            mlp: Mlp::init(embed, hidden, embed, &mut rng),
            edge_proj: EdgeProj::zeros(embed, edge_dim),
        };
        let k = 1.0 / (edge_dim as f64).sqrt();
        for w in &mut p.edge_proj.w {
            *w = rng.gen_range(-k..k);
        }
        p
    }
}

/// `out_v = f(emb_v + max_{u in N(v)} ReLU(emb_u + W_e e_{u,v}))`, the max
/// taken coordinatewise. Signals an error for nodes with no incoming edge.
pub fn gine_layer_forward(
    layer: &GineLayerParams,
    graph: &AttributedGraph,
    emb: &[Vec<f64>],
    edge_feats: &[Vec<f64>],
) -> Result<Vec<Vec<f64>>> {
    let embed = layer.edge_proj.out_dim;
    if emb.len() != graph.n || emb.iter().any(|r| r.len() != embed) {
        return Err(Error::Config("embedding shape does not match GINE layer".into()));
    }
    if edge_feats.len() != graph.edges.len() {
        return Err(Error::Input("one edge feature vector required per edge".into()));
    }
    let incoming = graph.incoming();
    let mut proj = vec![0.0; embed];
    let mut out = Vec::with_capacity(graph.n);
    let mut hidden_buf = vec![0.0; layer.mlp.lins[0].out_dim];
    for v in 0..graph.n {
        if incoming[v].is_empty() {
            return Err(Error::Input(format!(
                "node {v} has an empty neighborhood and no self-loop"
            )));
        }
        let mut agg = vec![f64::NEG_INFINITY; embed];
        for &e in &incoming[v] {
            let u = graph.edges[e].0;
            layer.edge_proj.apply_into(&edge_feats[e], &mut proj);
            for c in 0..embed {
                let m = (emb[u][c] + proj[c]).max(0.0);
                if m > agg[c] {
                    agg[c] = m;
                }
            }
        }
        let pre: Vec<f64> = (0..embed).map(|c| emb[v][c] + agg[c]).collect();
        layer.mlp.lins[0].forward_into(&pre, &mut hidden_buf);
        for h in &mut hidden_buf {
            *h = h.max(0.0);
        }
        let mut o = vec![0.0; layer.mlp.lins[1].out_dim];
        layer.mlp.lins[1].forward_into(&hidden_buf, &mut o);
        out.push(o);
    }
    Ok(out)
}

/// Recurrent application harness: run the layer stack `rounds` times.
pub fn gine_forward(
    layers: &[GineLayerParams],
    graph: &AttributedGraph,
    x0: &[Vec<f64>],
    edge_feats: &[Vec<f64>],
    rounds: usize,
) -> Result<Vec<Vec<f64>>> {
    let mut emb = x0.to_vec();
    for _ in 0..rounds {
        for layer in layers {
            emb = gine_layer_forward(layer, graph, &emb, edge_feats)?;
        }
    }
    Ok(emb)
}
