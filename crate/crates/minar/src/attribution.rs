//! Edge scoring over the computation graph: activation patching (the causal
//! oracle), EAP, EAP-IG, and the Weight / WeightGrad baselines, aggregated
//! over a probe dataset.
//!
//! An attribution score pairs each computation edge's activation difference
//! (clean vs. corrupted, at every site where the weight is applied) with the
//! loss gradient delivered along that edge, pools per input-graph node, and
//! averages over probes before taking the absolute value. Probe reduction
//! happens in a canonical content order, so scores are exactly invariant to
//! probe-list permutation.

use std::hash::{Hash, Hasher};
use std::io::{BufRead, Write};

use crate::autodiff::{backpropagate, evaluate_with_trace, ActivationTrace, GradientRecord};
use crate::compgraph::{ComputationGraph, ParamRef};
use crate::error::{Error, Result};
use crate::gnn::{model_forward, LinRef, ModelConfig, ModelParams};
use crate::graph::{AttributedGraph, ProbePair};
use crate::parallel::par_map;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pooling {
    Mean,
    Sum,
}

impl Pooling {
    pub fn tag(self) -> &'static str {
        match self {
            Pooling::Mean => "mean",
            Pooling::Sum => "sum",
        }
    }
}

impl std::str::FromStr for Pooling {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Pooling::Mean),
            "sum" => Ok(Pooling::Sum),
            other => Err(Error::Input(format!("unknown pooling '{other}'"))),
        }
    }
}

/// Riemann-sum index convention for EAP-IG. The literal formula sums
/// k = 1..m (ending at the clean input); the alternative starts at the
/// corrupted input with k = 0..m-1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IgIndexing {
    EndAnchored,
    StartAnchored,
}

impl std::str::FromStr for IgIndexing {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "end" | "end-anchored" => Ok(IgIndexing::EndAnchored),
            "start" | "start-anchored" => Ok(IgIndexing::StartAnchored),
            other => Err(Error::Input(format!("unknown IG indexing '{other}'"))),
        }
    }
}

/// Per-node loss between clean and corrupted predictions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScoreLoss {
    /// Squared error on the SP head.
    Mse,
    /// MSE(SP) plus scaled, class-balanced BCE(BFS) against the clean run's
    /// soft predictions, matching the training objective's form.
    Joint { bce_scale: f64 },
}

impl ScoreLoss {
    pub fn tag(&self) -> String {
        match self {
            ScoreLoss::Mse => "mse".into(),
            ScoreLoss::Joint { bce_scale } => format!("mse+bce(x{bce_scale})"),
        }
    }

    /// The loss matching a model's training objective.
    pub fn for_config(config: &ModelConfig) -> ScoreLoss {
        if config.bfs_head {
            ScoreLoss::Joint { bce_scale: 25.0 }
        } else {
            ScoreLoss::Mse
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScoreOptions {
    pub pooling: Pooling,
    pub loss: ScoreLoss,
    pub ig_indexing: IgIndexing,
    /// Free-form identifier of the probe set, recorded in the table.
    pub probe_id: String,
}

impl ScoreOptions {
    pub fn new(loss: ScoreLoss, probe_id: impl Into<String>) -> Self {
        ScoreOptions {
            pooling: Pooling::Mean,
            loss,
            ig_indexing: IgIndexing::EndAnchored,
            probe_id: probe_id.into(),
        }
    }
}

/// Aggregated attribution scores, aligned with a computation graph's edges.
/// `entries` hold the final nonnegative scores; `signed` keeps the pre-abs
/// probe means for diagnostics (not serialized).
#[derive(Debug, Clone)]
pub struct ScoreTable {
    pub method: String,
    pub pooling: Pooling,
    pub probe_id: String,
    pub loss_id: String,
    pub entries: Vec<(ParamRef, f64)>,
    pub signed: Vec<f64>,
}

impl ScoreTable {
    fn from_signed(
        gc: &ComputationGraph,
        signed: Vec<f64>,
        method: String,
        opts: &ScoreOptions,
    ) -> Result<Self> {
        if signed.iter().any(|s| !s.is_finite()) {
            return Err(Error::Numeric(format!("non-finite {method} score")));
        }
        let entries = gc
            .edges
            .iter()
            .zip(&signed)
            .map(|(e, &s)| (e.param.clone(), s.abs()))
            .collect();
        Ok(ScoreTable {
            method,
            pooling: opts.pooling,
            probe_id: opts.probe_id.clone(),
            loss_id: opts.loss.tag(),
            entries,
            signed,
        })
    }

    /// Scores resolved against a computation graph's edge order; edges
    /// without an entry read as 0.
    pub fn dense(&self, gc: &ComputationGraph) -> Vec<f64> {
        let mut out = vec![0.0; gc.edges.len()];
        for (pref, s) in &self.entries {
            if let Some(e) = gc.edge_by_param(pref) {
                out[e] = *s;
            }
        }
        out
    }

    /// Entries in descending score order, ties broken by parameter reference.
    pub fn sorted_desc(&self) -> Vec<(ParamRef, f64)> {
        let mut v = self.entries.clone();
        v.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
        v
    }

    pub fn write_csv<W: Write>(&self, gc: &ComputationGraph, mut w: W) -> Result<()> {
        writeln!(w, "# method: {}", self.method)?;
        writeln!(w, "# pooling: {}", self.pooling.tag())?;
        writeln!(w, "# probe: {}", self.probe_id)?;
        writeln!(w, "# loss: {}", self.loss_id)?;
        writeln!(w, "edge_src,edge_dst,param_name,row,col,score")?;
        for (pref, score) in self.sorted_desc() {
            let (src, dst) = match gc.edge_by_param(&pref) {
                Some(e) => {
                    let e = &gc.edges[e];
                    (gc.vertices[e.src].name.clone(), gc.vertices[e.dst].name.clone())
                }
                None => (String::new(), String::new()),
            };
            writeln!(w, "{src},{dst},{},{},{},{}", pref.name, pref.row, pref.col, score)?;
        }
        Ok(())
    }

    /// Read a score CSV back. Sign diagnostics are not serialized, so the
    /// recovered `signed` column equals the scores.
    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut method = String::new();
        let mut pooling = Pooling::Mean;
        let mut probe_id = String::new();
        let mut loss_id = String::new();
        let mut entries = Vec::new();
        let mut header_seen = false;
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            let line = line.trim_end();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                let rest = rest.trim();
                if let Some(v) = rest.strip_prefix("method:") {
                    method = v.trim().to_string();
                } else if let Some(v) = rest.strip_prefix("pooling:") {
                    pooling = v.trim().parse()?;
                } else if let Some(v) = rest.strip_prefix("probe:") {
                    probe_id = v.trim().to_string();
                } else if let Some(v) = rest.strip_prefix("loss:") {
                    loss_id = v.trim().to_string();
                }
                continue;
            }
            if !header_seen {
                header_seen = true;
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 6 {
                return Err(Error::Format(format!("score CSV line {}: want 6 columns", i + 1)));
            }
            let parse = |s: &str| -> Result<usize> {
                s.parse().map_err(|_| Error::Format(format!("bad index '{s}'")))
            };
            let score: f64 = cols[5]
                .parse()
                .map_err(|_| Error::Format(format!("bad score '{}'", cols[5])))?;
            entries.push((
                ParamRef { name: cols[2].to_string(), row: parse(cols[3])?, col: parse(cols[4])? },
                score,
            ));
        }
        let signed = entries.iter().map(|(_, s)| *s).collect();
        Ok(ScoreTable { method, pooling, probe_id, loss_id, entries, signed })
    }
}

// ---------------------------------------------------------------------------
// Loss between clean and corrupted predictions
// ---------------------------------------------------------------------------

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn bce_with_logits(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (1.0 + (-z.abs()).exp()).ln()
}

/// Per-node losses between the clean reference outputs and another run's
/// outputs, plus the gradient seed with respect to the latter. The clean
/// side is held fixed.
fn loss_and_seed(
    clean_out: &[Vec<f64>],
    other_out: &[Vec<f64>],
    loss: &ScoreLoss,
) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = clean_out.len();
    let heads = clean_out.first().map(|r| r.len()).unwrap_or(1);
    let mut losses = vec![0.0; n];
    let mut seed = vec![vec![0.0; heads]; n];
    // Soft class balance from the clean run's reachability predictions.
    let (w_pos, w_neg) = match loss {
        ScoreLoss::Joint { .. } if heads > 1 => {
            let mass_pos: f64 = clean_out.iter().map(|r| sigmoid(r[1])).sum();
            let mass_neg = n as f64 - mass_pos;
            (
                if mass_pos > 0.0 { n as f64 / (2.0 * mass_pos) } else { 1.0 },
                if mass_neg > 0.0 { n as f64 / (2.0 * mass_neg) } else { 1.0 },
            )
        }
        _ => (1.0, 1.0),
    };
    for v in 0..n {
        let d = other_out[v][0] - clean_out[v][0];
        losses[v] = d * d;
        seed[v][0] = 2.0 * d;
        if let ScoreLoss::Joint { bce_scale } = loss {
            if heads > 1 {
                let p = sigmoid(clean_out[v][1]);
                let z = other_out[v][1];
                let w = p * w_pos + (1.0 - p) * w_neg;
                losses[v] += bce_scale * w * bce_with_logits(z, p);
                seed[v][1] = bce_scale * w * (sigmoid(z) - p);
            }
        }
    }
    (losses, seed)
}

fn pool(sum: f64, n: usize, pooling: Pooling) -> f64 {
    match pooling {
        Pooling::Mean => sum / n as f64,
        Pooling::Sum => sum,
    }
}

// ---------------------------------------------------------------------------
// Edge site mapping
// ---------------------------------------------------------------------------

/// Where a computation edge's weight is applied during a forward pass, and
/// which recorded activations/gradients score it.
#[derive(Debug, Clone, Copy)]
enum EdgeKind {
    /// Aggregation first linear from an embedding channel (site: directed edge).
    AggHiddenFromEmb { c: usize },
    /// Aggregation first linear from the edge attribute (site: directed edge).
    AggHiddenFromAttr,
    /// Aggregation second linear from a hidden unit (site: directed edge).
    AggOutFromHidden { h: usize },
    /// Update first linear from an embedding channel (site: node).
    UpHiddenFromEmb { c: usize },
    /// Update first linear from an aggregated-message coordinate (site: node).
    UpHiddenFromMsg { o: usize },
    /// Update second linear into the layer output (site: node).
    OutFromUpHidden { h: usize },
}

#[derive(Debug, Clone, Copy)]
struct EdgeDesc {
    layer: usize,
    row: usize,
    weight: f64,
    kind: EdgeKind,
}

fn edge_descs(
    gc: &ComputationGraph,
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<Vec<EdgeDesc>> {
    gc.edges
        .iter()
        .map(|e| {
            let base = e
                .param
                .name
                .strip_suffix(".weight")
                .ok_or_else(|| Error::Consistency(format!("edge {} is not a weight", e.param)))?;
            let r = LinRef::parse(base)
                .ok_or_else(|| Error::Consistency(format!("unparsable edge {}", e.param)))?;
            if r.conv >= params.convs.len() {
                return Err(Error::Consistency(format!("edge {} out of range", e.param)));
            }
            let lin = params.lin(r);
            if e.param.row >= lin.out_dim || e.param.col >= lin.in_dim {
                return Err(Error::Consistency(format!("edge {} out of range", e.param)));
            }
            let d_in = config.layer_in(r.conv);
            let kind = match (r.up, r.lin) {
                (false, 0) => {
                    if e.param.col < d_in {
                        EdgeKind::AggHiddenFromEmb { c: e.param.col }
                    } else {
                        EdgeKind::AggHiddenFromAttr
                    }
                }
                (false, 1) => EdgeKind::AggOutFromHidden { h: e.param.col },
                (true, 0) => {
                    if e.param.col < d_in {
                        EdgeKind::UpHiddenFromEmb { c: e.param.col }
                    } else {
                        EdgeKind::UpHiddenFromMsg { o: e.param.col - d_in }
                    }
                }
                (true, 1) => EdgeKind::OutFromUpHidden { h: e.param.col },
                _ => unreachable!("LinRef::parse bounds lin to 0..=1"),
            };
            Ok(EdgeDesc {
                layer: r.conv,
                row: e.param.row,
                weight: lin.weight(e.param.row, e.param.col),
                kind,
            })
        })
        .collect()
}

/// Signed per-probe scores for every edge: the sum over application sites of
/// (corrupted activation - clean activation) x weight x loss gradient at the
/// destination pre-activation, pooled over input-graph nodes.
#[allow(clippy::too_many_arguments)]
fn signed_scores_for_probe(
    descs: &[EdgeDesc],
    config: &ModelConfig,
    pair: &ProbePair,
    clean_tr: &ActivationTrace,
    corr_tr: &ActivationTrace,
    grads: &GradientRecord,
    pooling: Pooling,
) -> Vec<f64> {
    let n = pair.clean.n;
    let ec = pair.clean.edges.len();
    let hidden = config.hidden;
    let embed = config.embed;
    descs
        .iter()
        .map(|d| {
            let l = d.layer;
            let g = &grads.layers[l];
            let mut sum = 0.0;
            match d.kind {
                EdgeKind::AggHiddenFromEmb { c } => {
                    for (e, &(u, _)) in pair.clean.edges.iter().enumerate() {
                        let dz = corr_tr.emb_in(l, u)[c] - clean_tr.emb_in(l, u)[c];
                        sum += dz * g.edge_h_pre[e * hidden + d.row];
                    }
                }
                EdgeKind::AggHiddenFromAttr => {
                    for e in 0..ec {
                        let dz = pair.corrupted.weights[e] - pair.clean.weights[e];
                        sum += dz * g.edge_h_pre[e * hidden + d.row];
                    }
                }
                EdgeKind::AggOutFromHidden { h } => {
                    for e in 0..ec {
                        let dz = corr_tr.layers[l].edge_h_post[e * hidden + h]
                            - clean_tr.layers[l].edge_h_post[e * hidden + h];
                        sum += dz * g.edge_msg[e * embed + d.row];
                    }
                }
                EdgeKind::UpHiddenFromEmb { c } => {
                    for v in 0..n {
                        let dz = corr_tr.emb_in(l, v)[c] - clean_tr.emb_in(l, v)[c];
                        sum += dz * g.up_h_pre[v * hidden + d.row];
                    }
                }
                EdgeKind::UpHiddenFromMsg { o } => {
                    for v in 0..n {
                        let dz = corr_tr.layers[l].node_msg[v * embed + o]
                            - clean_tr.layers[l].node_msg[v * embed + o];
                        sum += dz * g.up_h_pre[v * hidden + d.row];
                    }
                }
                EdgeKind::OutFromUpHidden { h } => {
                    let out_dim = config.layer_out(l);
                    for v in 0..n {
                        let dz = corr_tr.layers[l].up_h_post[v * hidden + h]
                            - clean_tr.layers[l].up_h_post[v * hidden + h];
                        sum += dz * g.out[v * out_dim + d.row];
                    }
                }
            }
            pool(sum * d.weight, n, pooling)
        })
        .collect()
}

/// Canonical content key for a probe pair; reduction over probes follows this
/// order so results are exactly permutation-invariant.
fn probe_key(pair: &ProbePair) -> u64 {
    let s = serde_json::to_string(pair).expect("probe pair serializes");
    let mut h = std::collections::hash_map::DefaultHasher::new();
    s.hash(&mut h);
    h.finish()
}

/// Mean of per-probe score vectors in canonical key order.
fn reduce_probes(mut per_probe: Vec<(u64, Vec<f64>)>, n_edges: usize) -> Vec<f64> {
    per_probe.sort_by_key(|(k, _)| *k);
    let mut acc = vec![0.0; n_edges];
    for (_, v) in &per_probe {
        for (a, x) in acc.iter_mut().zip(v) {
            *a += x;
        }
    }
    let np = per_probe.len() as f64;
    acc.iter_mut().for_each(|a| *a /= np);
    acc
}

fn check_probes(probes: &[ProbePair]) -> Result<()> {
    if probes.is_empty() {
        return Err(Error::Input("probe set is empty".into()));
    }
    for p in probes {
        p.validate()?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Scoring methods
// ---------------------------------------------------------------------------

/// EAP: two forward passes and one backward pass per probe. The gradient is
/// taken through the corrupted run, holding the clean outputs fixed.
pub fn eap_scores(
    params: &ModelParams,
    config: &ModelConfig,
    gc: &ComputationGraph,
    probes: &[ProbePair],
    opts: &ScoreOptions,
) -> Result<ScoreTable> {
    check_probes(probes)?;
    let descs = edge_descs(gc, params, config)?;
    let per_probe: Vec<Result<(u64, Vec<f64>)>> = par_map(probes, |pair| {
        let (clean_out, clean_tr) = evaluate_with_trace(params, config, &pair.clean)?;
        let (corr_out, corr_tr) = evaluate_with_trace(params, config, &pair.corrupted)?;
        let (_, seed) = loss_and_seed(&clean_out, &corr_out, &opts.loss);
        let grads = backpropagate(&corr_tr, params, config, &pair.corrupted, &seed)?;
        let signed = signed_scores_for_probe(
            &descs, config, pair, &clean_tr, &corr_tr, &grads, opts.pooling,
        );
        Ok((probe_key(pair), signed))
    });
    let per_probe = per_probe.into_iter().collect::<Result<Vec<_>>>()?;
    let signed = reduce_probes(per_probe, gc.edges.len());
    ScoreTable::from_signed(gc, signed, "eap".into(), opts)
}

/// EAP-IG with an m-term Riemann sum: gradients are averaged over forward and
/// backward passes at inputs interpolated between the corrupted and clean
/// graphs (node features and edge weights both interpolate), then scored like
/// EAP. Costs m backward passes per probe.
pub fn eap_ig_scores(
    params: &ModelParams,
    config: &ModelConfig,
    gc: &ComputationGraph,
    probes: &[ProbePair],
    m: usize,
    opts: &ScoreOptions,
) -> Result<ScoreTable> {
    if m < 1 {
        return Err(Error::Input("EAP-IG needs m >= 1 interpolation steps".into()));
    }
    check_probes(probes)?;
    let descs = edge_descs(gc, params, config)?;
    let per_probe: Vec<Result<(u64, Vec<f64>)>> = par_map(probes, |pair| {
        let (clean_out, clean_tr) = evaluate_with_trace(params, config, &pair.clean)?;
        let (_, corr_tr) = evaluate_with_trace(params, config, &pair.corrupted)?;
        let mut acc: Option<GradientRecord> = None;
        for k in 0..m {
            let t = match opts.ig_indexing {
                IgIndexing::EndAnchored => (k + 1) as f64 / m as f64,
                IgIndexing::StartAnchored => k as f64 / m as f64,
            };
            let mut interp = pair.corrupted.clone();
            for (row, (c_row, x_row)) in
                interp.x.iter_mut().zip(pair.corrupted.x.iter().zip(&pair.clean.x))
            {
                for (iv, (&cv, &xv)) in row.iter_mut().zip(c_row.iter().zip(x_row)) {
                    *iv = cv + t * (xv - cv);
                }
            }
            for (iw, (&cw, &xw)) in interp
                .weights
                .iter_mut()
                .zip(pair.corrupted.weights.iter().zip(&pair.clean.weights))
            {
                *iw = cw + t * (xw - cw);
            }
            let (int_out, int_tr) = evaluate_with_trace(params, config, &interp)?;
            let (_, seed) = loss_and_seed(&clean_out, &int_out, &opts.loss);
            let grads = backpropagate(&int_tr, params, config, &interp, &seed)?;
            match acc.as_mut() {
                None => acc = Some(grads),
                Some(a) => {
                    for (al, gl) in a.layers.iter_mut().zip(&grads.layers) {
                        add_assign(&mut al.edge_h_pre, &gl.edge_h_pre);
                        add_assign(&mut al.edge_msg, &gl.edge_msg);
                        add_assign(&mut al.node_msg, &gl.node_msg);
                        add_assign(&mut al.up_h_pre, &gl.up_h_pre);
                        add_assign(&mut al.out, &gl.out);
                    }
                }
            }
        }
        let mut grads = acc.expect("m >= 1");
        let inv = 1.0 / m as f64;
        for l in &mut grads.layers {
            scale(&mut l.edge_h_pre, inv);
            scale(&mut l.edge_msg, inv);
            scale(&mut l.node_msg, inv);
            scale(&mut l.up_h_pre, inv);
            scale(&mut l.out, inv);
        }
        let signed = signed_scores_for_probe(
            &descs, config, pair, &clean_tr, &corr_tr, &grads, opts.pooling,
        );
        Ok((probe_key(pair), signed))
    });
    let per_probe = per_probe.into_iter().collect::<Result<Vec<_>>>()?;
    let signed = reduce_probes(per_probe, gc.edges.len());
    ScoreTable::from_signed(gc, signed, format!("eapig(m={m})"), opts)
}

fn add_assign(a: &mut [f64], b: &[f64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

fn scale(a: &mut [f64], s: f64) {
    for x in a.iter_mut() {
        *x *= s;
    }
}

/// Activation patching, the causal oracle: remove one computation edge
/// (zero its weight), run the model, and pool the per-node loss between the
/// intact and ablated predictions. One forward pass per edge per probe.
pub fn act_patch_scores(
    params: &ModelParams,
    config: &ModelConfig,
    gc: &ComputationGraph,
    probes: &[ProbePair],
    opts: &ScoreOptions,
) -> Result<ScoreTable> {
    check_probes(probes)?;
    // Pre-resolve edge -> linear location.
    let locs: Vec<(LinRef, usize, usize)> = gc
        .edges
        .iter()
        .map(|e| {
            let base = e.param.name.strip_suffix(".weight").ok_or_else(|| {
                Error::Consistency(format!("edge {} is not a weight", e.param))
            })?;
            let r = LinRef::parse(base)
                .ok_or_else(|| Error::Consistency(format!("unparsable edge {}", e.param)))?;
            Ok((r, e.param.row, e.param.col))
        })
        .collect::<Result<Vec<_>>>()?;
    let per_probe: Vec<Result<(u64, Vec<f64>)>> = par_map(probes, |pair| {
        let base = model_forward(params, config, &pair.clean)?;
        let mut scores = Vec::with_capacity(locs.len());
        let mut work = params.clone();
        for &(r, row, col) in &locs {
            let lin = work.lin_mut(r);
            let orig = lin.weight(row, col);
            *lin.weight_mut(row, col) = 0.0;
            let patched = model_forward(&work, config, &pair.clean)?;
            *work.lin_mut(r).weight_mut(row, col) = orig;
            let (losses, _) = loss_and_seed(&base, &patched, &opts.loss);
            scores.push(pool(losses.iter().sum(), pair.clean.n, opts.pooling));
        }
        Ok((probe_key(pair), scores))
    });
    let per_probe = per_probe.into_iter().collect::<Result<Vec<_>>>()?;
    let signed = reduce_probes(per_probe, gc.edges.len());
    ScoreTable::from_signed(gc, signed, "actpatch".into(), opts)
}

/// Weight baseline: |W| per edge, independent of task and probes.
pub fn weight_scores(
    params: &ModelParams,
    config: &ModelConfig,
    gc: &ComputationGraph,
    opts: &ScoreOptions,
) -> Result<ScoreTable> {
    let descs = edge_descs(gc, params, config)?;
    let signed = descs.iter().map(|d| d.weight).collect();
    let mut table = ScoreTable::from_signed(gc, signed, "weight".into(), opts)?;
    table.probe_id = "none".into();
    table.loss_id = "none".into();
    Ok(table)
}

/// WeightGrad baseline: |mean over probes of the loss gradient with respect
/// to each weight|, gradients from the corrupted-run backward pass.
pub fn weight_grad_scores(
    params: &ModelParams,
    config: &ModelConfig,
    gc: &ComputationGraph,
    probes: &[ProbePair],
    opts: &ScoreOptions,
) -> Result<ScoreTable> {
    check_probes(probes)?;
    let locs: Vec<(LinRef, usize, usize)> = gc
        .edges
        .iter()
        .map(|e| {
            let base = e.param.name.strip_suffix(".weight").unwrap_or(&e.param.name);
            let r = LinRef::parse(base)
                .ok_or_else(|| Error::Consistency(format!("unparsable edge {}", e.param)))?;
            Ok((r, e.param.row, e.param.col))
        })
        .collect::<Result<Vec<_>>>()?;
    let per_probe: Vec<Result<(u64, Vec<f64>)>> = par_map(probes, |pair| {
        let (clean_out, _) = evaluate_with_trace(params, config, &pair.clean)?;
        let (corr_out, corr_tr) = evaluate_with_trace(params, config, &pair.corrupted)?;
        let (_, seed) = loss_and_seed(&clean_out, &corr_out, &opts.loss);
        let grads = backpropagate(&corr_tr, params, config, &pair.corrupted, &seed)?;
        let scores = locs
            .iter()
            .map(|&(r, row, col)| {
                pool(grads.params.lin(r).weight(row, col), pair.clean.n, opts.pooling)
            })
            .collect();
        Ok((probe_key(pair), scores))
    });
    let per_probe = per_probe.into_iter().collect::<Result<Vec<_>>>()?;
    let signed = reduce_probes(per_probe, gc.edges.len());
    ScoreTable::from_signed(gc, signed, "weightgrad".into(), opts)
}

// ---------------------------------------------------------------------------
// Patched forward (verification support)
// ---------------------------------------------------------------------------

/// Pooled loss of the corrupted run with one computation edge's incoming
/// signal moved a fraction `strength` of the way to its clean value at every
/// application site (strength 1 restores the clean signal). Differentiating
/// this in `strength` at 0 gives the exact patching derivative that EAP
/// approximates.
pub fn patched_corrupted_loss(
    params: &ModelParams,
    config: &ModelConfig,
    gc: &ComputationGraph,
    pair: &ProbePair,
    edge: usize,
    strength: f64,
    opts: &ScoreOptions,
) -> Result<f64> {
    let descs = edge_descs(gc, params, config)?;
    let d = descs[edge];
    let (clean_out, clean_tr) = evaluate_with_trace(params, config, &pair.clean)?;
    let (_, corr_tr) = evaluate_with_trace(params, config, &pair.corrupted)?;
    let n = pair.clean.n;
    let ec = pair.clean.edges.len();
    let hidden = config.hidden;
    let embed = config.embed;

    // Pre-activation deltas of the destination neuron at every site; the
    // patch point is the earliest divergence, so upstream values equal the
    // plain corrupted run's.
    let w = d.weight;
    let (per_edge, delta): (bool, Vec<f64>) = match d.kind {
        EdgeKind::AggHiddenFromEmb { c } => (
            true,
            pair.clean
                .edges
                .iter()
                .map(|&(u, _)| w * (clean_tr.emb_in(d.layer, u)[c] - corr_tr.emb_in(d.layer, u)[c]))
                .collect(),
        ),
        EdgeKind::AggHiddenFromAttr => (
            true,
            (0..ec)
                .map(|e| w * (pair.clean.weights[e] - pair.corrupted.weights[e]))
                .collect(),
        ),
        EdgeKind::AggOutFromHidden { h } => (
            true,
            (0..ec)
                .map(|e| {
                    w * (clean_tr.layers[d.layer].edge_h_post[e * hidden + h]
                        - corr_tr.layers[d.layer].edge_h_post[e * hidden + h])
                })
                .collect(),
        ),
        EdgeKind::UpHiddenFromEmb { c } => (
            false,
            (0..n)
                .map(|v| w * (clean_tr.emb_in(d.layer, v)[c] - corr_tr.emb_in(d.layer, v)[c]))
                .collect(),
        ),
        EdgeKind::UpHiddenFromMsg { o } => (
            false,
            (0..n)
                .map(|v| {
                    w * (clean_tr.layers[d.layer].node_msg[v * embed + o]
                        - corr_tr.layers[d.layer].node_msg[v * embed + o])
                })
                .collect(),
        ),
        EdgeKind::OutFromUpHidden { h } => (
            false,
            (0..n)
                .map(|v| {
                    w * (clean_tr.layers[d.layer].up_h_post[v * hidden + h]
                        - corr_tr.layers[d.layer].up_h_post[v * hidden + h])
                })
                .collect(),
        ),
    };
    let delta = delta.into_iter().map(|x| strength * x).collect();
    let patch = ForwardPatch { layer: d.layer, row: d.row, kind: d.kind, per_edge, delta };
    let patched_out = forward_with_patch(params, config, &pair.corrupted, &patch)?;
    let (losses, _) = loss_and_seed(&clean_out, &patched_out, &opts.loss);
    Ok(pool(losses.iter().sum(), n, opts.pooling))
}

/// Pooled loss of the plain corrupted run against the clean run.
pub fn probe_loss(
    params: &ModelParams,
    config: &ModelConfig,
    pair: &ProbePair,
    opts: &ScoreOptions,
) -> Result<f64> {
    let clean_out = model_forward(params, config, &pair.clean)?;
    let corr_out = model_forward(params, config, &pair.corrupted)?;
    let (losses, _) = loss_and_seed(&clean_out, &corr_out, &opts.loss);
    Ok(pool(losses.iter().sum(), pair.clean.n, opts.pooling))
}

struct ForwardPatch {
    layer: usize,
    row: usize,
    kind: EdgeKind,
    per_edge: bool,
    delta: Vec<f64>,
}

/// Forward pass with an additive pre-activation patch at one neuron.
fn forward_with_patch(
    params: &ModelParams,
    config: &ModelConfig,
    graph: &AttributedGraph,
    patch: &ForwardPatch,
) -> Result<Vec<Vec<f64>>> {
    let incoming = graph.incoming();
    let mut emb: Vec<Vec<f64>> = graph.x.clone();
    for (l, conv) in params.convs.iter().enumerate() {
        let hidden = config.hidden;
        let embed = config.embed;
        let out_dim = config.layer_out(l);
        let d_in = emb[0].len();
        let ec = graph.edges.len();
        let mut edge_msg = vec![0.0; ec * embed];
        let mut in_buf = vec![0.0; d_in + 1];
        let mut h_pre = vec![0.0; hidden];
        for (e, &(u, _)) in graph.edges.iter().enumerate() {
            in_buf[..d_in].copy_from_slice(&emb[u]);
            in_buf[d_in] = graph.weights[e];
            conv.agg_mlp.lins[0].forward_into(&in_buf, &mut h_pre);
            if l == patch.layer && patch.per_edge {
                if let EdgeKind::AggHiddenFromEmb { .. } | EdgeKind::AggHiddenFromAttr = patch.kind
                {
                    h_pre[patch.row] += patch.delta[e];
                }
            }
            for h in h_pre.iter_mut() {
                *h = h.max(0.0);
            }
            conv.agg_mlp.lins[1].forward_into(&h_pre, &mut edge_msg[e * embed..(e + 1) * embed]);
            if l == patch.layer && patch.per_edge {
                if let EdgeKind::AggOutFromHidden { .. } = patch.kind {
                    edge_msg[e * embed + patch.row] += patch.delta[e];
                }
            }
        }
        let mut next = Vec::with_capacity(graph.n);
        let mut up_in = vec![0.0; d_in + embed];
        for v in 0..graph.n {
            let inc = &incoming[v];
            if inc.is_empty() {
                return Err(Error::Input(format!("node {v} has an empty neighborhood")));
            }
            let mut agg = vec![0.0; embed];
            for c in 0..embed {
                let mut best = edge_msg[inc[0] * embed + c];
                for &e in &inc[1..] {
                    let m = edge_msg[e * embed + c];
                    let better = match config.aggregation {
                        crate::gnn::Aggregation::Min => m < best,
                        crate::gnn::Aggregation::Max => m > best,
                    };
                    if better {
                        best = m;
                    }
                }
                agg[c] = best;
            }
            up_in[..d_in].copy_from_slice(&emb[v]);
            up_in[d_in..].copy_from_slice(&agg);
            conv.up_mlp.lins[0].forward_into(&up_in, &mut h_pre);
            if l == patch.layer && !patch.per_edge {
                if let EdgeKind::UpHiddenFromEmb { .. } | EdgeKind::UpHiddenFromMsg { .. } =
                    patch.kind
                {
                    h_pre[patch.row] += patch.delta[v];
                }
            }
            for h in h_pre.iter_mut() {
                *h = h.max(0.0);
            }
            let mut o = vec![0.0; out_dim];
            conv.up_mlp.lins[1].forward_into(&h_pre, &mut o);
            if l == patch.layer && !patch.per_edge {
                if let EdgeKind::OutFromUpHidden { .. } = patch.kind {
                    o[patch.row] += patch.delta[v];
                }
            }
            next.push(o);
        }
        emb = next;
    }
    Ok(emb)
}
