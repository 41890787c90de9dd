//! Command-line surface: data generation, training, scoring, discovery,
//! evaluation, overlap, K sweeps, and DOT export.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::attribution::{
    act_patch_scores, eap_ig_scores, eap_scores, weight_grad_scores, weight_scores, IgIndexing,
    Pooling, ScoreLoss, ScoreOptions, ScoreTable,
};
use crate::circuits::{
    apply_circuit, cache_weights, circuit_dot, computation_graph_dot, discover_circuit,
    eval_circuit, weighted_jaccard, ApplyMode, Circuit,
};
use crate::compgraph::build_computation_graph;
use crate::data::{
    generate_bellman_ford_trainset, generate_ood_testset, make_probe_set, GenOptions, TaskSet,
};
use crate::error::{Error, Result};
use crate::gnn::{Checkpoint, ModelConfig, ModelParams};
use crate::graph::AttributedGraph;
use crate::training::{
    multiplicative_test_loss, predictions, reachability_accuracy, TrainConfig, train_model,
};

/// Fallback seed: `--seed` wins, then the MINAR_SEED environment variable,
/// then 0.
fn resolve_seed(flag: Option<u64>) -> u64 {
    flag.or_else(|| std::env::var("MINAR_SEED").ok().and_then(|s| s.parse().ok())).unwrap_or(0)
}

#[derive(Parser)]
#[command(
    name = "minar",
    about = "Circuit discovery for message-passing networks trained on algorithmic tasks",
    version
)]
pub struct Cli {
    /// Cap the worker thread pool.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Clone)]
pub struct DataArgs {
    /// Graphs to score against (JSONL); corrupted copies are derived.
    #[arg(long)]
    pub data: PathBuf,
    /// Use only the first N probe graphs.
    #[arg(long)]
    pub probe_limit: Option<usize>,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate the curated trainset and the OOD testset as JSONL.
    GenData {
        #[arg(long, default_value = "train.jsonl")]
        out_train: PathBuf,
        #[arg(long, default_value = "test.jsonl")]
        out_test: PathBuf,
        /// Bellman-Ford step parameter of the curated trainset.
        #[arg(long, default_value_t = 2)]
        k: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 300)]
        test_count: usize,
        /// Task set: `sp` or `sp,bfs`.
        #[arg(long, default_value = "sp")]
        tasks: String,
        /// Drop the weight-0 self-loops.
        #[arg(long)]
        no_self_loops: bool,
        /// Initialization constant of the task encoding.
        #[arg(long, default_value_t = 1000.0)]
        b: f64,
    },
    /// Train a model; writes `ckpt_{epoch}.json` files and `trainlog.csv`.
    Train {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long, default_value = "run")]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 2)]
        depth: usize,
        #[arg(long, default_value_t = 64)]
        hidden: usize,
        #[arg(long, default_value_t = 8)]
        embed: usize,
        #[arg(long, default_value_t = 20000)]
        epochs: usize,
        #[arg(long, default_value_t = 0.001)]
        lr: f64,
        #[arg(long, default_value_t = 0.01)]
        weight_decay: f64,
        #[arg(long, default_value_t = 0.001)]
        l1: f64,
        #[arg(long, default_value_t = 25.0)]
        bce_scale: f64,
        #[arg(long, default_value_t = 100)]
        ckpt_every: usize,
        #[arg(long, default_value_t = 100)]
        eval_every: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score computation edges; writes a score CSV.
    Score {
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// One of: weight, weightgrad, eap, eapig, actpatch.
        #[arg(long, default_value = "eapig")]
        method: String,
        /// Interpolation steps for eapig.
        #[arg(long, default_value_t = 20)]
        m: usize,
        #[arg(long, default_value = "mean")]
        pooling: String,
        /// Riemann-sum convention for eapig: end-anchored or start-anchored.
        #[arg(long, default_value = "end-anchored")]
        ig_indexing: String,
        #[arg(long, default_value = "scores.csv")]
        out: PathBuf,
    },
    /// Run the circuit construction algorithm on a score CSV.
    Discover {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        scores: PathBuf,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long, default_value = "circuit.json")]
        out: PathBuf,
        /// Also write a DOT rendering of the circuit.
        #[arg(long)]
        dot: Option<PathBuf>,
    },
    /// Fidelity, characterization, loss, and accuracy of a circuit.
    EvalCircuit {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        circuit: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 2)]
        horizon: usize,
        #[arg(long, default_value = "report.json")]
        out: PathBuf,
    },
    /// Pairwise weighted-Jaccard matrix over circuit files.
    Overlap {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, num_args = 2..)]
        circuits: Vec<PathBuf>,
        #[arg(long, default_value = "overlap.csv")]
        out: PathBuf,
    },
    /// Circuit loss/accuracy across K for several scoring methods.
    SweepK {
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// Comma-separated circuit sizes, e.g. `1,2,3,4,5,6,7,8,9,10`.
        #[arg(long, default_value = "1,2,3,4,5,6,7,8,9,10")]
        k: String,
        /// Comma-separated methods.
        #[arg(long, default_value = "weight,weightgrad,eap,eapig")]
        methods: String,
        #[arg(long, default_value_t = 20)]
        m: usize,
        #[arg(long, default_value_t = 2)]
        horizon: usize,
        #[arg(long, default_value = "sweep.csv")]
        out: PathBuf,
    },
    /// DOT rendering of the computation graph (or of a circuit).
    ExportDot {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        circuit: Option<PathBuf>,
        #[arg(long, default_value = "graph.dot")]
        out: PathBuf,
    },
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path)
}

fn tasks_of(config: &ModelConfig) -> TaskSet {
    if config.input_dim == 2 {
        TaskSet::SpBfs
    } else {
        TaskSet::Sp
    }
}

fn load_probes(
    config: &ModelConfig,
    args: &DataArgs,
) -> Result<(Vec<crate::graph::ProbePair>, String)> {
    let mut graphs = AttributedGraph::load_jsonl(&args.data)?;
    if let Some(limit) = args.probe_limit {
        graphs.truncate(limit);
    }
    let probes = make_probe_set(&graphs, tasks_of(config), 1000.0);
    // Identify probes by file name only so artifacts stay byte-identical
    // across runs in different directories.
    let name = args.data.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let id = format!("{name} (n={})", probes.len());
    Ok((probes, id))
}

fn compute_scores(
    ckpt: &Checkpoint,
    gc: &crate::compgraph::ComputationGraph,
    probes: &[crate::graph::ProbePair],
    probe_id: &str,
    method: &str,
    m: usize,
    pooling: Pooling,
    ig_indexing: IgIndexing,
) -> Result<ScoreTable> {
    let opts = ScoreOptions {
        pooling,
        loss: ScoreLoss::for_config(&ckpt.config),
        ig_indexing,
        probe_id: probe_id.to_string(),
    };
    match method {
        "weight" => weight_scores(&ckpt.params, &ckpt.config, gc, &opts),
        "weightgrad" => weight_grad_scores(&ckpt.params, &ckpt.config, gc, probes, &opts),
        "eap" => eap_scores(&ckpt.params, &ckpt.config, gc, probes, &opts),
        "eapig" => eap_ig_scores(&ckpt.params, &ckpt.config, gc, probes, m, &opts),
        "actpatch" => act_patch_scores(&ckpt.params, &ckpt.config, gc, probes, &opts),
        other => Err(Error::Input(format!("unknown scoring method '{other}'"))),
    }
}

/// Execute one parsed command.
pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        crate::parallel::set_threads(n);
    }
    match cli.command {
        Command::GenData { out_train, out_test, k, seed, test_count, tasks, no_self_loops, b } => {
            let seed = resolve_seed(seed);
            let tasks: TaskSet = tasks.parse()?;
            let opts = GenOptions { self_loops: !no_self_loops, b };
            let train = generate_bellman_ford_trainset(k, seed, tasks, &opts)?;
            AttributedGraph::save_jsonl(&train, &out_train)?;
            let test = generate_ood_testset(seed.wrapping_add(1), test_count, k, tasks, &opts)?;
            AttributedGraph::save_jsonl(&test, &out_test)?;
            println!(
                "wrote {} training graphs to {} and {} test graphs to {}",
                train.len(),
                out_train.display(),
                test.len(),
                out_test.display()
            );
            Ok(())
        }
        Command::Train {
            train,
            test,
            out_dir,
            depth,
            hidden,
            embed,
            epochs,
            lr,
            weight_decay,
            l1,
            bce_scale,
            ckpt_every,
            eval_every,
            seed,
        } => {
            let seed = resolve_seed(seed);
            let trainset = AttributedGraph::load_jsonl(&train)?;
            let testset = AttributedGraph::load_jsonl(&test)?;
            let input_dim = trainset
                .first()
                .map(|g| g.feature_dim())
                .ok_or_else(|| Error::Input("empty trainset".into()))?;
            let config = ModelConfig {
                depth,
                hidden,
                embed,
                input_dim,
                bfs_head: input_dim == 2,
                ..ModelConfig::single_task()
            };
            let tc = TrainConfig {
                lr,
                epochs,
                weight_decay,
                l1,
                bce_scale,
                ckpt_every,
                eval_every,
                seed,
                horizon: depth,
                ..TrainConfig::default()
            };
            std::fs::create_dir_all(&out_dir)?;
            let init = ModelParams::init(&config, seed);
            let outcome = train_model(init, &config, &tc, &trainset, &testset, None)?;
            for ckpt in &outcome.checkpoints {
                ckpt.save(&out_dir.join(format!("ckpt_{}.json", ckpt.epoch)))?;
            }
            let f = std::fs::File::create(out_dir.join("trainlog.csv"))?;
            outcome.log.write_csv(std::io::BufWriter::new(f))?;
            let last = outcome.log.records.last();
            println!(
                "trained {} epochs; final test L_Mult = {}",
                epochs,
                last.and_then(|r| r.lmult_test).map(|v| v.to_string()).unwrap_or("n/a".into())
            );
            Ok(())
        }
        Command::Score { ckpt, data, method, m, pooling, ig_indexing, out } => {
            let ckpt = load_checkpoint(&ckpt)?;
            let gc = build_computation_graph(&ckpt.params, &ckpt.config)?;
            let (probes, probe_id) = load_probes(&ckpt.config, &data)?;
            let table = compute_scores(
                &ckpt,
                &gc,
                &probes,
                &probe_id,
                &method,
                m,
                pooling.parse()?,
                ig_indexing.parse()?,
            )?;
            let f = std::fs::File::create(&out)?;
            table.write_csv(&gc, std::io::BufWriter::new(f))?;
            println!("wrote {} edge scores ({method}) to {}", table.entries.len(), out.display());
            Ok(())
        }
        Command::Discover { ckpt, scores, k, out, dot } => {
            let ckpt = load_checkpoint(&ckpt)?;
            let gc = build_computation_graph(&ckpt.params, &ckpt.config)?;
            let f = std::fs::File::open(&scores)?;
            let table = ScoreTable::read_csv(std::io::BufReader::new(f))?;
            let mut circuit = discover_circuit(&gc, &table, k)?;
            cache_weights(&mut circuit, &ckpt.params)?;
            circuit.save(&out)?;
            if let Some(dot_path) = dot {
                let f = std::fs::File::create(&dot_path)?;
                circuit_dot(&gc, &ckpt.params, &circuit, std::io::BufWriter::new(f))?;
            }
            println!("discovered a {}-edge circuit (K = {k}) -> {}", circuit.len(), out.display());
            Ok(())
        }
        Command::EvalCircuit { ckpt, circuit, data, horizon, out } => {
            let ckpt = load_checkpoint(&ckpt)?;
            let circuit = Circuit::load(&circuit)?;
            let dataset = AttributedGraph::load_jsonl(&data)?;
            let report = eval_circuit(
                &ckpt.params,
                &ckpt.config,
                &circuit,
                &dataset,
                horizon,
                &data.display().to_string(),
            )?;
            let f = std::fs::File::create(&out)?;
            serde_json::to_writer_pretty(std::io::BufWriter::new(f), &report)?;
            println!(
                "circuit: {} edges, L_Mult {} (full {}), char {:.4} -> {}",
                report.edges,
                report.circuit_lmult,
                report.full_lmult,
                report.fidelity.characterization,
                out.display()
            );
            Ok(())
        }
        Command::Overlap { ckpt, circuits, out } => {
            let ckpt = load_checkpoint(&ckpt)?;
            let loaded: Vec<(String, Circuit)> = circuits
                .iter()
                .map(|p| Ok((p.display().to_string(), Circuit::load(p)?)))
                .collect::<Result<_>>()?;
            let mut f = std::io::BufWriter::new(std::fs::File::create(&out)?);
            write!(f, "circuit")?;
            for (name, _) in &loaded {
                write!(f, ",{name}")?;
            }
            writeln!(f)?;
            for (name_a, a) in &loaded {
                write!(f, "{name_a}")?;
                for (_, b) in &loaded {
                    write!(f, ",{}", weighted_jaccard(a, b, &ckpt.params)?)?;
                }
                writeln!(f)?;
            }
            println!("wrote {}x{} overlap matrix to {}", loaded.len(), loaded.len(), out.display());
            Ok(())
        }
        Command::SweepK { ckpt, data, k, methods, m, horizon, out } => {
            let ckpt = load_checkpoint(&ckpt)?;
            let gc = build_computation_graph(&ckpt.params, &ckpt.config)?;
            let (probes, probe_id) = load_probes(&ckpt.config, &data)?;
            let dataset = AttributedGraph::load_jsonl(&data.data)?;
            let ks: Vec<usize> = k
                .split(',')
                .map(|s| s.trim().parse().map_err(|_| Error::Input(format!("bad K '{s}'"))))
                .collect::<Result<_>>()?;
            let methods: Vec<&str> = methods.split(',').map(str::trim).collect();
            let mut f = std::io::BufWriter::new(std::fs::File::create(&out)?);
            writeln!(
                f,
                "method,k,edges,circuit_lmult,ablated_lmult,circuit_reach_acc,ablated_reach_acc"
            )?;
            for method in methods {
                let table = compute_scores(
                    &ckpt,
                    &gc,
                    &probes,
                    &probe_id,
                    method,
                    m,
                    Pooling::Mean,
                    IgIndexing::EndAnchored,
                )?;
                for &kk in &ks {
                    let circuit = discover_circuit(&gc, &table, kk)?;
                    let only = apply_circuit(&ckpt.params, &circuit, ApplyMode::CircuitOnly)?;
                    let ablated = apply_circuit(&ckpt.params, &circuit, ApplyMode::Ablate)?;
                    let only_preds = predictions(&only, &ckpt.config, &dataset)?;
                    let abl_preds = predictions(&ablated, &ckpt.config, &dataset)?;
                    let c_l = multiplicative_test_loss(&only_preds, &dataset, horizon)?;
                    let a_l = multiplicative_test_loss(&abl_preds, &dataset, horizon)?;
                    let (c_r, a_r) = if ckpt.config.bfs_head {
                        (
                            reachability_accuracy(&only_preds, &dataset).to_string(),
                            reachability_accuracy(&abl_preds, &dataset).to_string(),
                        )
                    } else {
                        (String::new(), String::new())
                    };
                    writeln!(f, "{method},{kk},{},{c_l},{a_l},{c_r},{a_r}", circuit.len())?;
                }
            }
            println!("wrote sweep to {}", out.display());
            Ok(())
        }
        Command::ExportDot { ckpt, circuit, out } => {
            let ckpt = load_checkpoint(&ckpt)?;
            let gc = build_computation_graph(&ckpt.params, &ckpt.config)?;
            let f = std::io::BufWriter::new(std::fs::File::create(&out)?);
            match circuit {
                Some(cpath) => {
                    let circuit = Circuit::load(&cpath)?;
                    circuit_dot(&gc, &ckpt.params, &circuit, f)?;
                }
                None => computation_graph_dot(&gc, &ckpt.params, f)?,
            }
            println!("wrote DOT to {}", out.display());
            Ok(())
        }
    }
}
