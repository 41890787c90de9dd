//! Traced forward evaluation and exact reverse-mode differentiation for the
//! MinAggGNN.
//!
//! The forward pass records every intermediate activation: aggregation-MLP
//! activations per directed edge (their natural site), update-MLP activations
//! and aggregated messages per node, and the edge index selected by each
//! coordinatewise min/max. The backward pass routes gradient through the
//! recorded selections only, takes the ReLU subgradient at 0 as 0, and
//! treats node features as leaf variables.

use crate::error::{Error, Result};
use crate::gnn::{Aggregation, ConvParams, ModelConfig, ModelParams};
use crate::graph::AttributedGraph;

/// Activations of one layer. Aggregation-MLP values are stored per directed
/// edge (`[edge * width + j]`), update-MLP values per node.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    pub edge_h_pre: Vec<f64>,
    pub edge_h_post: Vec<f64>,
    /// Per-edge message vectors, before aggregation.
    pub edge_msg: Vec<f64>,
    /// Per-node aggregated messages.
    pub node_msg: Vec<f64>,
    /// Edge index selected by the aggregation, per node and coordinate.
    pub argsel: Vec<usize>,
    pub up_h_pre: Vec<f64>,
    pub up_h_post: Vec<f64>,
    /// Layer output per node (embedding, or head outputs at the last layer).
    pub out: Vec<f64>,
}

/// Full record of one evaluation: the input features plus every layer's
/// activations and selections.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    pub input: Vec<Vec<f64>>,
    pub layers: Vec<LayerTrace>,
    pub n: usize,
    pub e: usize,
}

impl ActivationTrace {
    /// Embedding feeding layer `l` at node `v`.
    pub fn emb_in(&self, l: usize, v: usize) -> &[f64] {
        if l == 0 {
            &self.input[v]
        } else {
            let prev = &self.layers[l - 1];
            let d = prev.out.len() / self.n;
            &prev.out[v * d..(v + 1) * d]
        }
    }
}

/// Gradients of a scalar loss with respect to one layer's activations,
/// mirroring [`LayerTrace`]'s layout. `edge_h_pre` and `up_h_pre` hold
/// pre-activation gradients; `edge_msg` holds the gradient routed to each
/// edge's message (zero off the selected edges).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub edge_h_pre: Vec<f64>,
    pub edge_msg: Vec<f64>,
    pub node_msg: Vec<f64>,
    pub up_h_pre: Vec<f64>,
    pub out: Vec<f64>,
}

/// Gradients with respect to every parameter, every recorded activation, and
/// the leaf inputs (node features and edge attributes).
#[derive(Debug, Clone, PartialEq)]
pub struct GradientRecord {
    /// Parameter gradients, in the same container shape as the parameters.
    pub params: ModelParams,
    pub input: Vec<Vec<f64>>,
    pub edge_attr: Vec<f64>,
    pub layers: Vec<LayerGrads>,
}

impl GradientRecord {
    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.params.for_each_param(|p| ok &= p.is_finite());
        ok && self.input.iter().flatten().all(|g| g.is_finite())
            && self.edge_attr.iter().all(|g| g.is_finite())
            && self.layers.iter().all(|l| {
                l.edge_h_pre.iter().all(|g| g.is_finite())
                    && l.edge_msg.iter().all(|g| g.is_finite())
                    && l.node_msg.iter().all(|g| g.is_finite())
                    && l.up_h_pre.iter().all(|g| g.is_finite())
                    && l.out.iter().all(|g| g.is_finite())
            })
    }
}

fn check_shapes(params: &ModelParams, config: &ModelConfig, graph: &AttributedGraph) -> Result<()> {
    config.validate()?;
    if graph.n == 0 {
        return Err(Error::Input("graph has no nodes".into()));
    }
    if graph.feature_dim() != config.input_dim {
        return Err(Error::Config(format!(
            "graph features have dimension {} but the model expects {}",
            graph.feature_dim(),
            config.input_dim
        )));
    }
    if params.convs.len() != config.depth {
        return Err(Error::Config(format!(
            "params have {} layers but the config says {}",
            params.convs.len(),
            config.depth
        )));
    }
    for (l, conv) in params.convs.iter().enumerate() {
        let d_in = config.layer_in(l);
        let ok = conv.agg_mlp.lins[0].in_dim == d_in + 1
            && conv.agg_mlp.lins[0].out_dim == config.hidden
            && conv.agg_mlp.lins[1].in_dim == config.hidden
            && conv.agg_mlp.lins[1].out_dim == config.embed
            && conv.up_mlp.lins[0].in_dim == d_in + config.embed
            && conv.up_mlp.lins[0].out_dim == config.hidden
            && conv.up_mlp.lins[1].in_dim == config.hidden
            && conv.up_mlp.lins[1].out_dim == config.layer_out(l);
        if !ok {
            return Err(Error::Config(format!("layer {l} parameter shapes do not match config")));
        }
    }
    Ok(())
}

/// One layer forward with optional activation recording. `incoming` must be
/// the graph's sorted incoming lists so that exact aggregation ties resolve
/// to the smallest tail id.
pub(crate) fn layer_forward(
    conv: &ConvParams,
    aggregation: Aggregation,
    graph: &AttributedGraph,
    incoming: &[Vec<usize>],
    emb: &[Vec<f64>],
    record: bool,
) -> Result<(Vec<Vec<f64>>, Option<LayerTrace>)> {
    let hidden = conv.agg_mlp.lins[0].out_dim;
    let embed = conv.agg_mlp.lins[1].out_dim;
    let out_dim = conv.up_mlp.lins[1].out_dim;
    let d_in = emb.first().map(|r| r.len()).unwrap_or(0);
    if conv.agg_mlp.lins[0].in_dim != d_in + 1 || conv.up_mlp.lins[0].in_dim != d_in + embed {
        return Err(Error::Config("embedding dimension does not match layer".into()));
    }
    let n = graph.n;
    let e_count = graph.edges.len();

    let mut edge_msg = vec![0.0; e_count * embed];
    let mut tr_h_pre = record.then(|| Vec::with_capacity(e_count * hidden));
    let mut tr_h_post = record.then(|| Vec::with_capacity(e_count * hidden));

    let mut in_buf = vec![0.0; d_in + 1];
    let mut h_pre = vec![0.0; hidden];
    let mut h_post = vec![0.0; hidden];
    for (e, &(u, _)) in graph.edges.iter().enumerate() {
        in_buf[..d_in].copy_from_slice(&emb[u]);
        in_buf[d_in] = graph.weights[e];
        conv.agg_mlp.lins[0].forward_into(&in_buf, &mut h_pre);
        for (post, &pre) in h_post.iter_mut().zip(&h_pre) {
            *post = pre.max(0.0);
        }
        conv.agg_mlp.lins[1].forward_into(&h_post, &mut edge_msg[e * embed..(e + 1) * embed]);
        if let Some(t) = tr_h_pre.as_mut() {
            t.extend_from_slice(&h_pre);
        }
        if let Some(t) = tr_h_post.as_mut() {
            t.extend_from_slice(&h_post);
        }
    }

    let mut node_msg = vec![0.0; n * embed];
    let mut argsel = vec![usize::MAX; n * embed];
    for v in 0..n {
        let inc = &incoming[v];
        if inc.is_empty() {
            return Err(Error::Input(format!(
                "node {v} has an empty neighborhood and no self-loop: cannot aggregate"
            )));
        }
        for c in 0..embed {
            let mut best = edge_msg[inc[0] * embed + c];
            let mut sel = inc[0];
            for &e in &inc[1..] {
                let m = edge_msg[e * embed + c];
                let better = match aggregation {
                    Aggregation::Min => m < best,
                    Aggregation::Max => m > best,
                };
                if better {
                    best = m;
                    sel = e;
                }
            }
            node_msg[v * embed + c] = best;
            argsel[v * embed + c] = sel;
        }
    }

    let mut out_rows = Vec::with_capacity(n);
    let mut tr_up_pre = record.then(|| Vec::with_capacity(n * hidden));
    let mut tr_up_post = record.then(|| Vec::with_capacity(n * hidden));
    let mut up_in = vec![0.0; d_in + embed];
    for v in 0..n {
        up_in[..d_in].copy_from_slice(&emb[v]);
        up_in[d_in..].copy_from_slice(&node_msg[v * embed..(v + 1) * embed]);
        conv.up_mlp.lins[0].forward_into(&up_in, &mut h_pre);
        for (post, &pre) in h_post.iter_mut().zip(&h_pre) {
            *post = pre.max(0.0);
        }
        let mut o = vec![0.0; out_dim];
        conv.up_mlp.lins[1].forward_into(&h_post, &mut o);
        if let Some(t) = tr_up_pre.as_mut() {
            t.extend_from_slice(&h_pre);
        }
        if let Some(t) = tr_up_post.as_mut() {
            t.extend_from_slice(&h_post);
        }
        out_rows.push(o);
    }

    let trace = record.then(|| LayerTrace {
        edge_h_pre: tr_h_pre.unwrap(),
        edge_h_post: tr_h_post.unwrap(),
        edge_msg: edge_msg.clone(),
        node_msg,
        argsel,
        up_h_pre: tr_up_pre.unwrap(),
        up_h_post: tr_up_post.unwrap(),
        out: out_rows.iter().flatten().copied().collect(),
    });
    Ok((out_rows, trace))
}

/// Full forward pass, optionally recording a trace. The traced and trace-free
/// paths execute the same floating-point operations in the same order.
pub(crate) fn forward(
    params: &ModelParams,
    config: &ModelConfig,
    graph: &AttributedGraph,
    record: bool,
) -> Result<(Vec<Vec<f64>>, Option<ActivationTrace>)> {
    check_shapes(params, config, graph)?;
    let incoming = graph.incoming();
    let mut emb: Vec<Vec<f64>> = graph.x.clone();
    let mut layers = record.then(Vec::new);
    for conv in &params.convs {
        let (next, tr) = layer_forward(conv, config.aggregation, graph, &incoming, &emb, record)?;
        if let (Some(layers), Some(tr)) = (layers.as_mut(), tr) {
            layers.push(tr);
        }
        emb = next;
    }
    let trace = layers.map(|layers| ActivationTrace {
        input: graph.x.clone(),
        layers,
        n: graph.n,
        e: graph.edges.len(),
    });
    Ok((emb, trace))
}

/// Forward pass that records every intermediate activation and aggregation
/// selection. Outputs are bit-identical to [`crate::gnn::model_forward`].
pub fn evaluate_with_trace(
    params: &ModelParams,
    config: &ModelConfig,
    graph: &AttributedGraph,
) -> Result<(Vec<Vec<f64>>, ActivationTrace)> {
    let (out, tr) = forward(params, config, graph, true)?;
    Ok((out, tr.expect("trace recorded")))
}

/// Exact reverse-mode gradients from a recorded trace. `loss_seed[v][h]` is
/// the gradient of the loss with respect to output head `h` at node `v`.
/// Gradient flows through each aggregation only along the recorded selection;
/// ReLU passes gradient only where its pre-activation was strictly positive.
pub fn backpropagate(
    trace: &ActivationTrace,
    params: &ModelParams,
    config: &ModelConfig,
    graph: &AttributedGraph,
    loss_seed: &[Vec<f64>],
) -> Result<GradientRecord> {
    check_shapes(params, config, graph)?;
    let n = graph.n;
    let e_count = graph.edges.len();
    if trace.n != n || trace.e != e_count || trace.layers.len() != config.depth {
        return Err(Error::Consistency("trace does not match the graph and config".into()));
    }
    for (l, tr) in trace.layers.iter().enumerate() {
        if tr.edge_h_pre.len() != e_count * config.hidden
            || tr.edge_msg.len() != e_count * config.embed
            || tr.up_h_pre.len() != n * config.hidden
            || tr.out.len() != n * config.layer_out(l)
        {
            return Err(Error::Consistency(format!("trace layer {l} has wrong shape")));
        }
    }
    if loss_seed.len() != n || loss_seed.iter().any(|r| r.len() != config.head_count()) {
        return Err(Error::Input("loss seed must give one gradient per node and head".into()));
    }

    let hidden = config.hidden;
    let embed = config.embed;
    let mut grads = GradientRecord {
        params: ModelParams::zeros(config),
        input: vec![vec![0.0; config.input_dim]; n],
        edge_attr: vec![0.0; e_count],
        layers: (0..config.depth)
            .map(|l| LayerGrads {
                edge_h_pre: vec![0.0; e_count * hidden],
                edge_msg: vec![0.0; e_count * embed],
                node_msg: vec![0.0; n * embed],
                up_h_pre: vec![0.0; n * hidden],
                out: vec![0.0; n * config.layer_out(l)],
            })
            .collect(),
    };

    // Gradient wrt the current layer's output, flat [node * out_dim].
    let mut d_out: Vec<f64> = loss_seed.iter().flatten().copied().collect();
    for l in (0..config.depth).rev() {
        let conv = &params.convs[l];
        let tr = &trace.layers[l];
        let d_in = config.layer_in(l);
        let out_dim = config.layer_out(l);
        grads.layers[l].out.copy_from_slice(&d_out);

        let mut d_emb = vec![0.0; n * d_in];
        // Update MLP backward, per node.
        {
            let g_conv = &mut grads.params.convs[l];
            for v in 0..n {
                let dout = &d_out[v * out_dim..(v + 1) * out_dim];
                let h_post = &tr.up_h_post[v * hidden..(v + 1) * hidden];
                let h_pre = &tr.up_h_pre[v * hidden..(v + 1) * hidden];
                let lin1 = &conv.up_mlp.lins[1];
                let mut d_h = vec![0.0; hidden];
                for (r, &dr) in dout.iter().enumerate() {
                    g_conv.up_mlp.lins[1].b[r] += dr;
                    let gw = &mut g_conv.up_mlp.lins[1].w[r * hidden..(r + 1) * hidden];
                    for h in 0..hidden {
                        gw[h] += dr * h_post[h];
                        d_h[h] += lin1.w[r * hidden + h] * dr;
                    }
                }
                for h in 0..hidden {
                    if h_pre[h] <= 0.0 {
                        d_h[h] = 0.0;
                    }
                }
                grads.layers[l].up_h_pre[v * hidden..(v + 1) * hidden].copy_from_slice(&d_h);
                let lin0 = &conv.up_mlp.lins[0];
                let in_w = d_in + embed;
                let emb_v = trace.emb_in(l, v);
                let msg_v = &tr.node_msg[v * embed..(v + 1) * embed];
                for (h, &dh) in d_h.iter().enumerate() {
                    if dh == 0.0 {
                        continue;
                    }
                    g_conv.up_mlp.lins[0].b[h] += dh;
                    let gw = &mut g_conv.up_mlp.lins[0].w[h * in_w..(h + 1) * in_w];
                    let row = &lin0.w[h * in_w..(h + 1) * in_w];
                    for c in 0..d_in {
                        gw[c] += dh * emb_v[c];
                        d_emb[v * d_in + c] += row[c] * dh;
                    }
                    for c in 0..embed {
                        gw[d_in + c] += dh * msg_v[c];
                        grads.layers[l].node_msg[v * embed + c] += row[d_in + c] * dh;
                    }
                }
            }
        }

        // Route aggregated-message gradient to the selected edges.
        for v in 0..n {
            for c in 0..embed {
                let g = grads.layers[l].node_msg[v * embed + c];
                if g != 0.0 {
                    let sel = tr.argsel[v * embed + c];
                    grads.layers[l].edge_msg[sel * embed + c] += g;
                }
            }
        }

        // Aggregation MLP backward, per directed edge with nonzero gradient.
        {
            let g_conv = &mut grads.params.convs[l];
            for (e, &(u, _)) in graph.edges.iter().enumerate() {
                let d_msg = &grads.layers[l].edge_msg[e * embed..(e + 1) * embed];
                if d_msg.iter().all(|&g| g == 0.0) {
                    continue;
                }
                let h_post = &tr.edge_h_post[e * hidden..(e + 1) * hidden];
                let h_pre = &tr.edge_h_pre[e * hidden..(e + 1) * hidden];
                let lin1 = &conv.agg_mlp.lins[1];
                let mut d_h = vec![0.0; hidden];
                for (r, &dr) in d_msg.iter().enumerate() {
                    if dr == 0.0 {
                        continue;
                    }
                    g_conv.agg_mlp.lins[1].b[r] += dr;
                    let gw = &mut g_conv.agg_mlp.lins[1].w[r * hidden..(r + 1) * hidden];
                    for h in 0..hidden {
                        gw[h] += dr * h_post[h];
                        d_h[h] += lin1.w[r * hidden + h] * dr;
                    }
                }
                for h in 0..hidden {
                    if h_pre[h] <= 0.0 {
                        d_h[h] = 0.0;
                    }
                }
                grads.layers[l].edge_h_pre[e * hidden..(e + 1) * hidden].copy_from_slice(&d_h);
                let lin0 = &conv.agg_mlp.lins[0];
                let in_w = d_in + 1;
                let emb_u = trace.emb_in(l, u);
                let w_e = graph.weights[e];
                for (h, &dh) in d_h.iter().enumerate() {
                    if dh == 0.0 {
                        continue;
                    }
                    g_conv.agg_mlp.lins[0].b[h] += dh;
                    let gw = &mut g_conv.agg_mlp.lins[0].w[h * in_w..(h + 1) * in_w];
                    let row = &lin0.w[h * in_w..(h + 1) * in_w];
                    for c in 0..d_in {
                        gw[c] += dh * emb_u[c];
                        d_emb[u * d_in + c] += row[c] * dh;
                    }
                    gw[d_in] += dh * w_e;
                    grads.edge_attr[e] += row[d_in] * dh;
                }
            }
        }

        d_out = d_emb;
    }

    for v in 0..n {
        grads.input[v].copy_from_slice(&d_out[v * config.input_dim..(v + 1) * config.input_dim]);
    }
    Ok(grads)
}

/// Central difference of a scalar function.
pub fn central_difference(f: impl Fn(f64) -> f64, x: f64, step: f64) -> f64 {
    (f(x + step) - f(x - step)) / (2.0 * step)
}

/// Finite-difference gradients: parameters and input features only (hidden
/// activations are not leaf variables of a forward pass).
#[derive(Debug, Clone)]
pub struct FdGradient {
    pub params: ModelParams,
    pub input: Vec<Vec<f64>>,
}

/// Central-difference approximation of every parameter gradient and, via
/// input-feature perturbation, every input-activation gradient. Independent
/// of [`backpropagate`]: it only runs forward passes.
pub fn finite_difference_gradient(
    params: &ModelParams,
    config: &ModelConfig,
    graph: &AttributedGraph,
    loss: &dyn Fn(&[Vec<f64>]) -> f64,
    step: f64,
) -> Result<FdGradient> {
    if step <= 0.0 {
        return Err(Error::Input("finite-difference step must be positive".into()));
    }
    check_shapes(params, config, graph)?;
    let eval = |p: &ModelParams, g: &AttributedGraph| -> Result<f64> {
        let (out, _) = forward(p, config, g, false)?;
        Ok(loss(&out))
    };

    fn param_slot(p: &mut ModelParams, r: crate::gnn::LinRef, i: usize) -> &mut f64 {
        let lin = p.lin_mut(r);
        let nw = lin.w.len();
        if i < nw {
            &mut lin.w[i]
        } else {
            &mut lin.b[i - nw]
        }
    }

    let mut work = params.clone();
    let mut grads = ModelParams::zeros(config);
    for r in params.lin_refs() {
        let count = {
            let lin = params.lin(r);
            lin.w.len() + lin.b.len()
        };
        for i in 0..count {
            let orig = *param_slot(&mut work, r, i);
            *param_slot(&mut work, r, i) = orig + step;
            let plus = eval(&work, graph)?;
            *param_slot(&mut work, r, i) = orig - step;
            let minus = eval(&work, graph)?;
            *param_slot(&mut work, r, i) = orig;
            *param_slot(&mut grads, r, i) = (plus - minus) / (2.0 * step);
        }
    }

    let mut gx = vec![vec![0.0; config.input_dim]; graph.n];
    let mut gwork = graph.clone();
    for v in 0..graph.n {
        for c in 0..config.input_dim {
            let orig = gwork.x[v][c];
            gwork.x[v][c] = orig + step;
            let plus = eval(params, &gwork)?;
            gwork.x[v][c] = orig - step;
            let minus = eval(params, &gwork)?;
            gwork.x[v][c] = orig;
            gx[v][c] = (plus - minus) / (2.0 * step);
        }
    }
    Ok(FdGradient { params: grads, input: gx })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gnn::{ideal_bellman_ford_params, model_forward};
    use crate::graph::k_step_bellman_ford;

    fn tiny_config() -> ModelConfig {
        ModelConfig { hidden: 4, embed: 2, ..ModelConfig::single_task() }
    }

    fn self_loop_node(x: f64) -> AttributedGraph {
        let mut g =
            AttributedGraph::new(1, vec![(0, 0)], vec![0.0], vec![vec![x]], 0).unwrap();
        g.x = vec![vec![x]];
        g
    }

    #[test]
    fn zero_input_propagates_to_zero_output() {
        // Zero biases and zero input: every activation and the output are 0.
        let config = tiny_config();
        let params = ideal_bellman_ford_params(&config);
        let g = self_loop_node(0.0);
        let (out, trace) = evaluate_with_trace(&params, &config, &g).unwrap();
        assert_eq!(out, vec![vec![0.0]]);
        for layer in &trace.layers {
            assert!(layer.up_h_pre.iter().all(|&a| a == 0.0));
            assert!(layer.edge_h_pre.iter().all(|&a| a == 0.0));
        }
    }

    #[test]
    fn min_aggregation_selects_source_message() {
        // Two-node path: source feature 0, other feature B; min-aggregation at
        // the non-source node must select the source's message.
        let config = tiny_config();
        let params = ideal_bellman_ford_params(&config);
        let mut g = AttributedGraph::new(
            2,
            vec![(0, 1), (1, 0), (0, 0), (1, 1)],
            vec![3.0, 3.0, 0.0, 0.0],
            vec![vec![0.0], vec![1000.0]],
            0,
        )
        .unwrap();
        g.x = vec![vec![0.0], vec![1000.0]];
        let (out, trace) = evaluate_with_trace(&params, &config, &g).unwrap();
        assert_eq!(out[1][0], 3.0);
        // Coordinate 0 at node 1 selects the edge from node 0.
        let sel = trace.layers[0].argsel[config.embed];
        assert_eq!(g.edges[sel].0, 0);
    }

    #[test]
    fn traced_forward_matches_trace_free_bitwise() {
        let config = tiny_config();
        let params = ModelParams::init(&config, 11);
        let set = crate::data::generate_bellman_ford_trainset(
            2,
            5,
            crate::data::TaskSet::Sp,
            &crate::data::GenOptions::default(),
        )
        .unwrap();
        for g in set.iter().take(8) {
            let plain = model_forward(&params, &config, g).unwrap();
            let (traced, _) = evaluate_with_trace(&params, &config, g).unwrap();
            assert_eq!(plain, traced);
        }
    }

    #[test]
    fn ideal_params_match_k_step_oracle() {
        let config = tiny_config();
        let params = ideal_bellman_ford_params(&config);
        let set = crate::data::generate_ood_testset(
            1,
            12,
            2,
            crate::data::TaskSet::Sp,
            &crate::data::GenOptions::default(),
        )
        .unwrap();
        for g in &set {
            let out = model_forward(&params, &config, g).unwrap();
            let oracle = k_step_bellman_ford(g, g.source, config.depth, 1000.0);
            for v in 0..g.n {
                assert!((out[v][0] - oracle[v]).abs() < 1e-9, "node {v}");
            }
        }
    }

    #[test]
    fn final_linear_gradient_is_input_and_one() {
        // For the affine output neuron y = w.h + b, dL/dw = h and dL/db = 1.
        let config = tiny_config();
        let params = ModelParams::init(&config, 3);
        let g = self_loop_node(2.5);
        let (_, trace) = evaluate_with_trace(&params, &config, &g).unwrap();
        let grads =
            backpropagate(&trace, &params, &config, &g, &[vec![1.0]]).unwrap();
        let lin1 = &grads.params.convs[1].up_mlp.lins[1];
        let h_post = &trace.layers[1].up_h_post;
        assert_eq!(&lin1.w, h_post);
        assert_eq!(lin1.b, vec![1.0]);
    }

    #[test]
    fn unselected_neighbor_gets_zero_gradient() {
        let config = tiny_config();
        let params = ideal_bellman_ford_params(&config);
        // Node 2 hears from nodes 0 (state 1, cost 1) and 1 (state 2, cost 5):
        // node 1 loses the min by a clear margin.
        let mut g = AttributedGraph::new(
            3,
            vec![(0, 2), (1, 2), (0, 0), (1, 1), (2, 2)],
            vec![1.0, 5.0, 0.0, 0.0, 0.0],
            vec![vec![1.0], vec![2.0], vec![100.0]],
            0,
        )
        .unwrap();
        g.x = vec![vec![1.0], vec![2.0], vec![100.0]];
        let (_, trace) = evaluate_with_trace(&params, &config, &g).unwrap();
        let seed = vec![vec![0.0], vec![0.0], vec![1.0]];
        let grads = backpropagate(&trace, &params, &config, &g, &seed).unwrap();
        // The loss only looks at node 2; node 1's feature cannot matter.
        assert_eq!(grads.input[1][0], 0.0);
        assert!(grads.input[0][0] != 0.0);
    }

    #[test]
    fn backprop_matches_finite_differences() {
        let config = tiny_config();
        let params = ModelParams::init(&config, 17);
        let set = crate::data::generate_ood_testset(
            9,
            40,
            2,
            crate::data::TaskSet::Sp,
            &crate::data::GenOptions::default(),
        )
        .unwrap();
        let g = set.iter().find(|g| g.n == 5).or_else(|| set.iter().find(|g| g.n <= 8)).unwrap();
        let targets: Vec<f64> = (0..g.n).map(|v| v as f64).collect();
        let loss = move |out: &[Vec<f64>]| -> f64 {
            out.iter().zip(&targets).map(|(o, t)| (o[0] - t) * (o[0] - t)).sum()
        };
        let (out, trace) = evaluate_with_trace(&params, &config, g).unwrap();
        let seed: Vec<Vec<f64>> =
            out.iter().enumerate().map(|(v, o)| vec![2.0 * (o[0] - v as f64)]).collect();
        let bp = backpropagate(&trace, &params, &config, g, &seed).unwrap();
        let fd = finite_difference_gradient(&params, &config, g, &loss, 1e-4).unwrap();
        let mut got = Vec::new();
        bp.params.for_each_param(|p| got.push(p));
        let mut want = Vec::new();
        fd.params.for_each_param(|p| want.push(p));
        for (i, (a, b)) in got.iter().zip(&want).enumerate() {
            if b.abs() > 1e-6 {
                assert!(
                    ((a - b) / b).abs() < 1e-4,
                    "param {i}: backprop {a} vs fd {b}"
                );
            } else {
                assert!((a - b).abs() < 1e-6, "param {i}: backprop {a} vs fd {b}");
            }
        }
        for v in 0..g.n {
            let (a, b) = (bp.input[v][0], fd.input[v][0]);
            if b.abs() > 1e-6 {
                assert!(((a - b) / b).abs() < 1e-4, "input {v}");
            }
        }
    }

    #[test]
    fn gradients_are_deterministic() {
        let config = tiny_config();
        let params = ModelParams::init(&config, 23);
        let g = self_loop_node(7.0);
        let run = || {
            let (_, trace) = evaluate_with_trace(&params, &config, &g).unwrap();
            backpropagate(&trace, &params, &config, &g, &[vec![1.0]]).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn quadratic_central_difference() {
        let d = central_difference(|w| (w - 3.0) * (w - 3.0), 1.0, 1e-5);
        assert!((d - (-4.0)).abs() < 1e-6);
    }

    #[test]
    fn zero_loss_gives_zero_gradients() {
        let config = tiny_config();
        let params = ModelParams::init(&config, 29);
        let g = self_loop_node(1.0);
        let fd = finite_difference_gradient(&params, &config, &g, &|_| 0.0, 1e-4).unwrap();
        fd.params.for_each_param(|p| assert_eq!(p, 0.0));
    }

    #[test]
    fn mismatched_trace_is_rejected() {
        let config = tiny_config();
        let params = ModelParams::init(&config, 1);
        let g1 = self_loop_node(1.0);
        let mut g2 = AttributedGraph::new(
            2,
            vec![(0, 1), (1, 0), (0, 0), (1, 1)],
            vec![1.0, 1.0, 0.0, 0.0],
            vec![vec![0.0], vec![1.0]],
            0,
        )
        .unwrap();
        g2.x = vec![vec![0.0], vec![1.0]];
        let (_, trace) = evaluate_with_trace(&params, &config, &g1).unwrap();
        let err = backpropagate(&trace, &params, &config, &g2, &[vec![1.0], vec![1.0]]);
        assert!(matches!(err, Err(Error::Consistency(_))));
    }
}
