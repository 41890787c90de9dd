//! Full-batch training with decoupled weight decay and L1 regularization,
//! task losses, evaluation metrics, and periodic checkpointing.

use std::io::{BufRead, Write};

use crate::autodiff::{backpropagate, evaluate_with_trace};
use crate::error::{Error, Result};
use crate::gnn::{model_forward, Checkpoint, ModelConfig, ModelParams, OptimMeta};
use crate::graph::{k_step_bfs, AttributedGraph};
use crate::parallel::par_map;

/// Optimization schedule. One gradient step per epoch over the sum of
/// per-graph losses.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    /// Decoupled weight decay applied multiplicatively each step.
    pub weight_decay: f64,
    /// Coefficient of the L1 penalty on all parameters.
    pub l1: f64,
    /// Scale factor on the reachability BCE term.
    pub bce_scale: f64,
    /// Reweight BCE so both classes carry equal total mass.
    pub bce_class_weighting: bool,
    /// Checkpoint cadence (epochs), densified below `ckpt_early_until`.
    pub ckpt_every: usize,
    pub ckpt_every_early: usize,
    pub ckpt_early_until: usize,
    /// Cadence for test-set metric rows in the train log.
    pub eval_every: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Initialization constant of the task encoding.
    pub b: f64,
    /// Step horizon for the multiplicative test loss (the model depth).
    pub horizon: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.001,
            epochs: 20000,
            weight_decay: 0.01,
            l1: 0.001,
            bce_scale: 25.0,
            bce_class_weighting: true,
            ckpt_every: 100,
            ckpt_every_early: 25,
            ckpt_early_until: 4000,
            eval_every: 100,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            b: 1000.0,
            horizon: 2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 || self.epochs < 1 || self.weight_decay < 0.0 || self.l1 < 0.0 {
            return Err(Error::Input("train config out of range".into()));
        }
        Ok(())
    }

    fn ckpt_cadence(&self, epoch: usize) -> usize {
        if epoch < self.ckpt_early_until {
            self.ckpt_every_early
        } else {
            self.ckpt_every
        }
    }
}

/// One logged row of training metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainRecord {
    pub epoch: usize,
    pub mse_train: f64,
    pub lmult_test: Option<f64>,
    pub reach_acc: Option<f64>,
    pub l1: f64,
    pub circuit_lmult: Option<f64>,
    pub circuit_reach_acc: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
}

impl TrainLog {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "epoch,mse_train,lmult_test,reach_acc,l1,circuit_lmult,circuit_reach_acc")?;
        let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.records {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                r.epoch,
                r.mse_train,
                fmt(r.lmult_test),
                fmt(r.reach_acc),
                r.l1,
                fmt(r.circuit_lmult),
                fmt(r.circuit_reach_acc)
            )?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if i == 0 || line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 7 {
                return Err(Error::Format(format!("train log line {}: want 7 columns", i + 1)));
            }
            let req = |s: &str| -> Result<f64> {
                s.parse().map_err(|_| Error::Format(format!("bad number '{s}'")))
            };
            let opt = |s: &str| -> Result<Option<f64>> {
                if s.is_empty() {
                    Ok(None)
                } else {
                    req(s).map(Some)
                }
            };
            records.push(TrainRecord {
                epoch: req(cols[0])? as usize,
                mse_train: req(cols[1])?,
                lmult_test: opt(cols[2])?,
                reach_acc: opt(cols[3])?,
                l1: req(cols[4])?,
                circuit_lmult: opt(cols[5])?,
                circuit_reach_acc: opt(cols[6])?,
            });
        }
        Ok(TrainLog { records })
    }
}

/// Result of a training run: final parameters, checkpoints at the configured
/// cadence (always including epoch 0 and the final epoch), and the log.
pub struct TrainOutcome {
    pub params: ModelParams,
    pub checkpoints: Vec<Checkpoint>,
    pub log: TrainLog,
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable BCE-with-logits for a binary target.
#[inline]
fn bce_with_logits(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (1.0 + (-z.abs()).exp()).ln()
}

/// Per-class weights making positive and negative total masses equal:
/// `w_c = N / (2 n_c)`, defaulting to 1 for an absent class.
pub fn class_weights(labels: &[u8]) -> (f64, f64) {
    let n = labels.len() as f64;
    let n_pos = labels.iter().filter(|&&y| y == 1).count() as f64;
    let n_neg = n - n_pos;
    let w_pos = if n_pos == 0.0 { 1.0 } else { n / (2.0 * n_pos) };
    let w_neg = if n_neg == 0.0 { 1.0 } else { n / (2.0 * n_neg) };
    (w_pos, w_neg)
}

/// Class-weighted binary cross-entropy over logits, times `scale`.
pub fn weighted_bce_loss(logits: &[f64], labels: &[u8], scale: f64) -> f64 {
    if logits.is_empty() {
        return 0.0;
    }
    let (w_pos, w_neg) = class_weights(labels);
    let sum: f64 = logits
        .iter()
        .zip(labels)
        .map(|(&z, &y)| {
            let w = if y == 1 { w_pos } else { w_neg };
            w * bce_with_logits(z, f64::from(y))
        })
        .sum();
    scale * sum / logits.len() as f64
}

/// Per-node head predictions for every graph of a dataset, evaluated in
/// parallel with a fixed output order.
pub fn predictions(
    params: &ModelParams,
    config: &ModelConfig,
    dataset: &[AttributedGraph],
) -> Result<Vec<Vec<Vec<f64>>>> {
    par_map(dataset, |g| model_forward(params, config, g)).into_iter().collect()
}

/// Scale-invariant shortest-path test loss: mean over graphs of the sum over
/// eligible nodes of `|1 - y_v / pred_v|`. Eligible nodes lie within
/// `horizon` hops of the source and have label y_v > 0; predictions below
/// 1e-12 in magnitude contribute a capped 1e6 penalty.
pub fn multiplicative_test_loss(
    preds: &[Vec<Vec<f64>>],
    testset: &[AttributedGraph],
    horizon: usize,
) -> Result<f64> {
    if preds.len() != testset.len() {
        return Err(Error::Input("one prediction set required per graph".into()));
    }
    let mut total = 0.0;
    let mut eligible = 0usize;
    for (pred, g) in preds.iter().zip(testset) {
        let within = k_step_bfs(g, g.source, horizon);
        let mut sum = 0.0;
        for v in 0..g.n {
            let y = g.labels.dist[v];
            if within[v] == 1 && y > 0.0 {
                eligible += 1;
                let p = pred[v][0];
                sum += if p.abs() < 1e-12 { 1e6 } else { (1.0 - y / p).abs() };
            }
        }
        total += sum;
    }
    if eligible == 0 {
        return Err(Error::Input("no eligible nodes for the multiplicative loss".into()));
    }
    Ok(total / testset.len() as f64)
}

/// Convenience wrapper: forward passes plus [`multiplicative_test_loss`].
pub fn eval_lmult(
    params: &ModelParams,
    config: &ModelConfig,
    testset: &[AttributedGraph],
    horizon: usize,
) -> Result<f64> {
    let preds = predictions(params, config, testset)?;
    multiplicative_test_loss(&preds, testset, horizon)
}

/// Fraction of nodes whose reachability logit, thresholded at 0, matches the
/// label. Pooled over all nodes of the dataset.
pub fn reachability_accuracy(preds: &[Vec<Vec<f64>>], testset: &[AttributedGraph]) -> f64 {
    let mut hits = 0usize;
    let mut total = 0usize;
    for (pred, g) in preds.iter().zip(testset) {
        for v in 0..g.n {
            let predicted = pred[v][1] > 0.0;
            let actual = g.labels.reach[v] == 1;
            hits += usize::from(predicted == actual);
            total += 1;
        }
    }
    if total == 0 {
        return 0.0;
    }
    hits as f64 / total as f64
}

/// Fraction of reachable labels; the accuracy of an all-reachable predictor.
pub fn reachable_base_rate(testset: &[AttributedGraph]) -> f64 {
    let pos: usize = testset.iter().map(|g| g.labels.reach.iter().filter(|&&r| r == 1).count()).sum();
    let total: usize = testset.iter().map(|g| g.n).sum();
    pos as f64 / total as f64
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: usize,
}

impl Adam {
    fn new(n: usize) -> Self {
        Adam { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    /// One AdamW step: decoupled decay shrinks each parameter by exactly
    /// (1 - lr * weight_decay) before the moment update is applied.
    fn step(&mut self, params: &mut ModelParams, grads: &[f64], tc: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - tc.beta1.powi(self.t as i32);
        let bc2 = 1.0 - tc.beta2.powi(self.t as i32);
        let mut i = 0;
        params.for_each_param_mut(|p| {
            let sign = if *p == 0.0 { 0.0 } else { p.signum() };
            let g = grads[i] + tc.l1 * sign;
            self.m[i] = tc.beta1 * self.m[i] + (1.0 - tc.beta1) * g;
            self.v[i] = tc.beta2 * self.v[i] + (1.0 - tc.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            *p *= 1.0 - tc.lr * tc.weight_decay;
            *p -= tc.lr * m_hat / (v_hat.sqrt() + tc.eps);
            i += 1;
        });
    }
}

/// Per-graph loss pieces produced inside an epoch. Losses and seeds are
/// normalized by the total node count of the batch, matching a full-batch
/// node-mean objective; this keeps the L1 term's relative strength at the
/// intended scale.
struct GraphLoss {
    sq_err: f64,
    bce: f64,
    grads: ModelParams,
}

fn epoch_pass(
    params: &ModelParams,
    config: &ModelConfig,
    tc: &TrainConfig,
    trainset: &[AttributedGraph],
    total_nodes: f64,
    bce_w: (f64, f64),
) -> Result<Vec<GraphLoss>> {
    par_map(trainset, |g| -> Result<GraphLoss> {
        let n = total_nodes;
        let (out, trace) = evaluate_with_trace(params, config, g)?;
        let mut sq_err = 0.0;
        let mut bce = 0.0;
        let mut seed = vec![vec![0.0; config.head_count()]; g.n];
        for v in 0..g.n {
            let err = out[v][0] - g.labels.dist[v];
            sq_err += err * err / n;
            seed[v][0] = 2.0 * err / n;
            if config.bfs_head {
                let y = f64::from(g.labels.reach[v]);
                let z = out[v][1];
                let w = if g.labels.reach[v] == 1 { bce_w.0 } else { bce_w.1 };
                bce += tc.bce_scale * w * bce_with_logits(z, y) / n;
                seed[v][1] = tc.bce_scale * w * (sigmoid(z) - y) / n;
            }
        }
        let grads = backpropagate(&trace, params, config, g, &seed)?;
        Ok(GraphLoss { sq_err, bce, grads: grads.params })
    })
    .into_iter()
    .collect()
}

/// Train a model with AdamW plus an L1 penalty. `circuit_proj`, when given,
/// maps parameters to their circuit-only restriction so the log can track the
/// reference circuit's metrics over training.
pub fn train_model(
    init: ModelParams,
    config: &ModelConfig,
    tc: &TrainConfig,
    trainset: &[AttributedGraph],
    testset: &[AttributedGraph],
    circuit_proj: Option<&(dyn Fn(&ModelParams) -> ModelParams + Sync)>,
) -> Result<TrainOutcome> {
    tc.validate()?;
    config.validate()?;
    if trainset.is_empty() {
        return Err(Error::Input("empty trainset".into()));
    }

    // Global class weights over the whole trainset, as used for full batches.
    let bce_w = if config.bfs_head && tc.bce_class_weighting {
        let all: Vec<u8> = trainset.iter().flat_map(|g| g.labels.reach.iter().copied()).collect();
        class_weights(&all)
    } else {
        (1.0, 1.0)
    };

    let mut params = init;
    let n_params = params.num_params();
    let mut adam = Adam::new(n_params);
    let mut grad_buf = vec![0.0; n_params];
    let mut log = TrainLog::default();
    let mut checkpoints = Vec::new();
    let make_ckpt = |params: &ModelParams, epoch: usize| Checkpoint {
        config: config.clone(),
        params: params.clone(),
        epoch,
        seed: tc.seed,
        optim: Some(OptimMeta {
            lr: tc.lr,
            beta1: tc.beta1,
            beta2: tc.beta2,
            eps: tc.eps,
            weight_decay: tc.weight_decay,
            l1: tc.l1,
        }),
    };
    checkpoints.push(make_ckpt(&params, 0));

    let total_nodes: f64 = trainset.iter().map(|g| g.n as f64).sum();
    for epoch in 1..=tc.epochs {
        let pieces = epoch_pass(&params, config, tc, trainset, total_nodes, bce_w)?;
        let mut mse_sum = 0.0;
        let mut loss_total = tc.l1 * params.l1_norm();
        grad_buf.iter_mut().for_each(|g| *g = 0.0);
        for piece in &pieces {
            mse_sum += piece.sq_err;
            loss_total += piece.sq_err + piece.bce;
            let mut i = 0;
            piece.grads.for_each_param(|g| {
                grad_buf[i] += g;
                i += 1;
            });
        }
        if !loss_total.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite training loss at epoch {epoch} (loss = {loss_total})"
            )));
        }
        adam.step(&mut params, &grad_buf, tc);

        let log_now = epoch % tc.eval_every == 0 || epoch == tc.epochs;
        if log_now {
            let preds = predictions(&params, config, testset)?;
            let lmult = multiplicative_test_loss(&preds, testset, tc.horizon).ok();
            let reach = config.bfs_head.then(|| reachability_accuracy(&preds, testset));
            let (c_lmult, c_reach) = match circuit_proj {
                Some(proj) => {
                    let cp = proj(&params);
                    let cpreds = predictions(&cp, config, testset)?;
                    (
                        multiplicative_test_loss(&cpreds, testset, tc.horizon).ok(),
                        config.bfs_head.then(|| reachability_accuracy(&cpreds, testset)),
                    )
                }
                None => (None, None),
            };
            log.records.push(TrainRecord {
                epoch,
                mse_train: mse_sum,
                lmult_test: lmult,
                reach_acc: reach,
                l1: params.l1_norm(),
                circuit_lmult: c_lmult,
                circuit_reach_acc: c_reach,
            });
        }
        if epoch % tc.ckpt_cadence(epoch) == 0 || epoch == tc.epochs {
            checkpoints.push(make_ckpt(&params, epoch));
        }
    }

    Ok(TrainOutcome { params, checkpoints, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_bellman_ford_trainset, generate_ood_testset, GenOptions, TaskSet};
    use crate::gnn::ideal_bellman_ford_params;

    fn small_config() -> ModelConfig {
        ModelConfig { hidden: 8, embed: 4, ..ModelConfig::single_task() }
    }

    #[test]
    fn perfect_predictions_give_zero_lmult() {
        let opts = GenOptions::default();
        let testset = generate_ood_testset(2, 12, 2, TaskSet::Sp, &opts).unwrap();
        let preds: Vec<Vec<Vec<f64>>> = testset
            .iter()
            .map(|g| g.labels.dist.iter().map(|&d| vec![d]).collect())
            .collect();
        let l = multiplicative_test_loss(&preds, &testset, 2).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn single_node_ratio_example() {
        // One eligible node with label 2 and prediction 4 contributes 0.5.
        let mut g = AttributedGraph::new(
            2,
            vec![(0, 1), (1, 0), (0, 0), (1, 1)],
            vec![1.0, 1.0, 0.0, 0.0],
            vec![vec![0.0], vec![1000.0]],
            0,
        )
        .unwrap();
        g.labels.dist = vec![0.0, 2.0];
        let preds = vec![vec![vec![9.0], vec![4.0]]];
        let l = multiplicative_test_loss(&preds, &[g], 2).unwrap();
        assert_eq!(l, 0.5);
    }

    #[test]
    fn lmult_is_scale_invariant() {
        let opts = GenOptions::default();
        let testset = generate_ood_testset(4, 10, 2, TaskSet::Sp, &opts).unwrap();
        let preds: Vec<Vec<Vec<f64>>> = testset
            .iter()
            .map(|g| g.labels.dist.iter().map(|&d| vec![d * 1.05 + 0.01]).collect())
            .collect();
        let base = multiplicative_test_loss(&preds, &testset, 2).unwrap();
        let scaled_set: Vec<AttributedGraph> = testset
            .iter()
            .map(|g| {
                let mut s = g.clone();
                s.weights.iter_mut().for_each(|w| *w *= 10.0);
                s.labels.dist.iter_mut().for_each(|d| *d *= 10.0);
                s
            })
            .collect();
        let scaled_preds: Vec<Vec<Vec<f64>>> = preds
            .iter()
            .map(|g| g.iter().map(|r| vec![r[0] * 10.0]).collect())
            .collect();
        let scaled = multiplicative_test_loss(&scaled_preds, &scaled_set, 2).unwrap();
        assert!((base - scaled).abs() < 1e-12);
    }

    #[test]
    fn empty_eligible_set_is_an_error() {
        let g = AttributedGraph::new(1, vec![(0, 0)], vec![0.0], vec![vec![0.0]], 0).unwrap();
        let preds = vec![vec![vec![1.0]]];
        assert!(multiplicative_test_loss(&preds, &[g], 2).is_err());
    }

    #[test]
    fn bce_examples() {
        // Logit 0 gives ln 2 per example; balanced labels make the weighting
        // a no-op.
        let l = weighted_bce_loss(&[0.0, 0.0], &[0, 1], 1.0);
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        // Paper-style imbalance: 91.24% positives.
        let n = 10000usize;
        let n_pos = 9124;
        let labels: Vec<u8> = (0..n).map(|i| u8::from(i < n_pos)).collect();
        let (w_pos, w_neg) = class_weights(&labels);
        assert!((w_neg / w_pos - 0.9124 / 0.0876).abs() < 1e-9);
        assert!((w_pos * n_pos as f64 - w_neg * (n - n_pos) as f64).abs() < 1e-6);
        // Absent class defaults to weight 1.
        assert_eq!(class_weights(&[1, 1, 1]).1, 1.0);
    }

    #[test]
    fn decoupled_decay_shrinks_by_exact_factor() {
        // Labels equal the model's outputs, so the loss gradient vanishes
        // and one step must be a pure multiplicative shrink.
        let config = small_config();
        let params = ideal_bellman_ford_params(&config);
        let opts = GenOptions::default();
        let mut trainset = generate_bellman_ford_trainset(2, 0, TaskSet::Sp, &opts).unwrap();
        trainset.truncate(3);
        for g in &mut trainset {
            let out = model_forward(&params, &config, g).unwrap();
            g.labels.dist = out.iter().map(|o| o[0]).collect();
        }
        let tc = TrainConfig { epochs: 1, l1: 0.0, eval_every: 10, ..TrainConfig::default() };
        let before = params.clone();
        let outcome =
            train_model(params, &config, &tc, &trainset, &trainset, None).unwrap();
        let factor = 1.0 - tc.lr * tc.weight_decay;
        let mut want = Vec::new();
        before.for_each_param(|p| want.push(p * factor));
        let mut got = Vec::new();
        outcome.params.for_each_param(|p| got.push(p));
        assert_eq!(got, want);
    }

    #[test]
    fn no_update_signal_leaves_params_unchanged() {
        let config = small_config();
        let params = ideal_bellman_ford_params(&config);
        let opts = GenOptions::default();
        let mut trainset = generate_bellman_ford_trainset(2, 0, TaskSet::Sp, &opts).unwrap();
        trainset.truncate(2);
        for g in &mut trainset {
            let out = model_forward(&params, &config, g).unwrap();
            g.labels.dist = out.iter().map(|o| o[0]).collect();
        }
        let tc = TrainConfig {
            epochs: 1,
            l1: 0.0,
            weight_decay: 0.0,
            eval_every: 10,
            ..TrainConfig::default()
        };
        let before = params.clone();
        let outcome = train_model(params, &config, &tc, &trainset, &trainset, None).unwrap();
        assert_eq!(outcome.params, before);
    }

    #[test]
    fn training_is_deterministic() {
        let config = small_config();
        let opts = GenOptions::default();
        let trainset = generate_bellman_ford_trainset(2, 0, TaskSet::Sp, &opts).unwrap();
        let testset = generate_ood_testset(5, 8, 2, TaskSet::Sp, &opts).unwrap();
        let tc = TrainConfig { epochs: 30, eval_every: 10, ..TrainConfig::default() };
        let run = || {
            train_model(
                ModelParams::init(&config, 42),
                &config,
                &tc,
                &trainset,
                &testset,
                None,
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.params, b.params);
        assert_eq!(a.log, b.log);
    }

    #[test]
    fn checkpoint_round_trip_preserves_outputs() {
        let config = small_config();
        let params = ModelParams::init(&config, 9);
        let ckpt = Checkpoint { config: config.clone(), params, epoch: 5, seed: 9, optim: None };
        let json = ckpt.to_json();
        let back = Checkpoint::from_json(&json).unwrap();
        assert_eq!(back, ckpt);
        let opts = GenOptions::default();
        let testset = generate_ood_testset(6, 6, 2, TaskSet::Sp, &opts).unwrap();
        for g in &testset {
            let a = model_forward(&ckpt.params, &config, g).unwrap();
            let b = model_forward(&back.params, &config, g).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn train_log_csv_round_trip() {
        let log = TrainLog {
            records: vec![
                TrainRecord {
                    epoch: 100,
                    mse_train: 0.125,
                    lmult_test: Some(0.5),
                    reach_acc: None,
                    l1: 12.5,
                    circuit_lmult: None,
                    circuit_reach_acc: None,
                },
                TrainRecord {
                    epoch: 200,
                    mse_train: 0.0625,
                    lmult_test: Some(0.25),
                    reach_acc: Some(0.99),
                    l1: 11.0,
                    circuit_lmult: Some(1.5),
                    circuit_reach_acc: Some(0.5),
                },
            ],
        };
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        let back = TrainLog::read_csv(&buf[..]).unwrap();
        assert_eq!(back, log);
    }
}
