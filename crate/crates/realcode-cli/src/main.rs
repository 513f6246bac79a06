//! Command-line driver: train a classifier, project layers onto constraint
//! subspaces, run syndrome checks and corrections on single inferences, and
//! reproduce the recovery experiments as CSV curves.
//!
//! Every command is deterministic given `--seed`; re-running a command
//! reproduces its CSV output byte for byte. Experiment trials run in a
//! worker pool sized by `--jobs` (or the `REALCODE_JOBS` environment
//! variable), which changes wall time but never results.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use realcode::codec::{ConstraintSet, ConstraintSpec, RowConstraintKind};
use realcode::dataio::{
    load_checkpoint, load_mnist_idx, save_checkpoint, write_results_csv, Dataset,
};
use realcode::decoder::{correct_layer, detect, DETECT_TOL};
use realcode::experiments::{
    mnist_csv, mode_label, output_layer_csv, output_layer_success_rates, parse_sweep, phase_csv,
    phase_success_rates, run_mnist_experiment, run_output_layer_experiment, run_phase_experiment,
    MnistExpConfig, OutputLayerConfig, PhaseConfig,
};
use realcode::lpsolve::SolveOptions;
use realcode::network::{
    accuracy, apply_ecc, train_sgd, EvalMode, MLPConfig, MLPModel, ProtectedOptions,
};
use realcode::numkernel::Vector;

#[derive(Parser)]
#[command(
    name = "realcode",
    about = "Linear-constraint redundancy for neural network layers: \
             training, encoding, fault checking, and recovery experiments",
    version
)]
struct Cli {
    /// Worker threads for experiment trials (default: all cores;
    /// REALCODE_JOBS is honored when the flag is absent).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the baseline classifier on an MNIST-layout dataset.
    Train(TrainArgs),
    /// Project a trained layer onto a constraint subspace.
    Encode(EncodeArgs),
    /// Corrupted vs. corrected accuracy as the error count grows.
    ExpMnist(ExpMnistArgs),
    /// Sparse-recovery success rate vs. constraint count.
    ExpPhase(ExpPhaseArgs),
    /// Recovery success on a wide classifier-head matrix vs. error count.
    ExpOutputLayer(ExpOutputLayerArgs),
    /// Run syndrome detection on one inference.
    Check(CheckArgs),
    /// Detect, correct, and optionally write the repaired model.
    Correct(CorrectArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Directory holding train-images-idx3-ubyte, train-labels-idx1-ubyte,
    /// t10k-images-idx3-ubyte, t10k-labels-idx1-ubyte.
    #[arg(long)]
    data_dir: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Layer widths, input first.
    #[arg(long, value_delimiter = ',', default_value = "784,256,128,10")]
    dims: Vec<usize>,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct EncodeArgs {
    /// Checkpoint to read.
    #[arg(long)]
    model: PathBuf,
    /// Layer to encode.
    #[arg(long, default_value_t = 0)]
    layer: usize,
    /// Number of column groups (must divide the layer's column count).
    #[arg(long, default_value_t = 56)]
    groups: usize,
    /// General constraints per group.
    #[arg(long, default_value_t = 500)]
    k: usize,
    /// Row constraint: all-ones | none.
    #[arg(long, default_value = "all-ones")]
    row_constraint: String,
    /// Fold the bias in as an extra protected column.
    #[arg(long, default_value_t = false)]
    bias: bool,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Optional dataset directory; when given, the accuracy change on the
    /// test split is reported.
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

#[derive(Args)]
struct ExpMnistArgs {
    /// Encoded checkpoint.
    #[arg(long)]
    model: PathBuf,
    /// Directory holding the t10k test files.
    #[arg(long)]
    data_dir: PathBuf,
    /// Total memory errors per trial, swept (START:STOP:STEP or VALUE).
    #[arg(long, default_value = "70:420:70")]
    errors: String,
    #[arg(long, default_value_t = 10)]
    trials: usize,
    #[arg(long, default_value_t = 2.0)]
    sigma_mem: f64,
    /// Datapath errors per inference.
    #[arg(long, default_value_t = 2)]
    datapath_errors: usize,
    #[arg(long, default_value_t = 0.01)]
    sigma_dp: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// CSV file to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExpPhaseArgs {
    #[arg(long, default_value_t = 200)]
    p: usize,
    #[arg(long, default_value_t = 199)]
    q: usize,
    /// Constraint-count sweep (START:STOP:STEP or VALUE).
    #[arg(long, default_value = "100:1000:100")]
    constraints: String,
    /// Planted error count per trial.
    #[arg(long, default_value_t = 100)]
    sparsity: usize,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Success threshold on the recovery error.
    #[arg(long, default_value_t = 1e-5)]
    success_tol: f64,
    /// CSV file to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExpOutputLayerArgs {
    #[arg(long, default_value_t = 10)]
    p: usize,
    #[arg(long, default_value_t = 512)]
    q: usize,
    /// General constraints.
    #[arg(long, default_value_t = 500)]
    k: usize,
    /// Memory-error sweep (START:STOP:STEP or VALUE).
    #[arg(long, default_value = "30:210:30")]
    errors: String,
    #[arg(long, default_value_t = 2.0)]
    sigma_mem: f64,
    #[arg(long, default_value_t = 2)]
    datapath_errors: usize,
    #[arg(long, default_value_t = 0.01)]
    sigma_dp: f64,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    success_tol: f64,
    /// CSV file to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CheckArgs {
    #[arg(long)]
    model: PathBuf,
    /// Text file of whitespace-separated floats: the input to the encoded
    /// layer (length = that layer's column count).
    #[arg(long)]
    input_vector_file: PathBuf,
    /// Layer to check (default: the first encoded layer).
    #[arg(long)]
    layer: Option<usize>,
}

#[derive(Args)]
struct CorrectArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    input_vector_file: PathBuf,
    /// Fault list: one fault per line, `memory ROW COL VALUE` or
    /// `datapath INDEX VALUE`; '#' starts a comment.
    #[arg(long)]
    faults_file: PathBuf,
    /// Layer to correct (default: the first encoded layer).
    #[arg(long)]
    layer: Option<usize>,
    /// Checkpoint to write with the repaired layer.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    init_jobs(cli.jobs)?;
    match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Encode(a) => cmd_encode(a),
        Command::ExpMnist(a) => cmd_exp_mnist(a),
        Command::ExpPhase(a) => cmd_exp_phase(a),
        Command::ExpOutputLayer(a) => cmd_exp_output_layer(a),
        Command::Check(a) => cmd_check(a),
        Command::Correct(a) => cmd_correct(a),
    }
}

fn init_jobs(flag: Option<usize>) -> Result<()> {
    let jobs = flag.or_else(|| {
        std::env::var("REALCODE_JOBS").ok().and_then(|v| v.parse().ok())
    });
    if let Some(n) = jobs {
        if n == 0 {
            bail!("--jobs must be positive");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("initializing the worker pool")?;
    }
    Ok(())
}

fn load_split(dir: &Path, images: &str, labels: &str) -> Result<Dataset> {
    let ip = dir.join(images);
    let lp = dir.join(labels);
    load_mnist_idx(&ip, &lp)
        .with_context(|| format!("loading {} / {}", ip.display(), lp.display()))
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let train = load_split(&a.data_dir, "train-images-idx3-ubyte", "train-labels-idx1-ubyte")?;
    let test = load_split(&a.data_dir, "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")?;
    let cfg = MLPConfig {
        layer_dims: a.dims,
        learning_rate: a.lr,
        epochs: a.epochs,
        batch_size: a.batch_size,
        seed: a.seed,
        ..MLPConfig::default()
    };
    let model = train_sgd(&cfg, &train)?;
    println!("train accuracy {:.4}", accuracy(&model, &train)?);
    println!("test accuracy {:.4}", accuracy(&model, &test)?);
    save_checkpoint(&model, &a.out)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn cmd_encode(a: EncodeArgs) -> Result<()> {
    let model = load_checkpoint(&a.model)?;
    if a.layer >= model.num_layers() {
        bail!("--layer {} out of range for {} layers", a.layer, model.num_layers());
    }
    let (p, q) = (model.weights[a.layer].rows(), model.weights[a.layer].cols());
    let cols = if a.bias { q + 1 } else { q };
    if a.groups == 0 || cols % a.groups != 0 {
        bail!("--groups {} does not divide the layer's {cols} columns", a.groups);
    }
    let row_constraints = match a.row_constraint.as_str() {
        "all-ones" => vec![RowConstraintKind::AllOnes],
        "none" => vec![],
        other => bail!("unknown row constraint '{other}' (expected all-ones | none)"),
    };
    let spec = ConstraintSpec {
        seed: a.seed,
        num_general: a.k,
        row_constraints,
        group_size: if a.groups == 1 { None } else { Some(cols / a.groups) },
        shape: (p, cols),
    };
    let test = a
        .data_dir
        .as_ref()
        .map(|d| load_split(d, "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"))
        .transpose()?;
    let before = test.as_ref().map(|t| accuracy(&model, t)).transpose()?;
    let coded = apply_ecc(&model, a.layer, &spec)?;
    let residual = coded.verify_encoding()?;
    println!("encoded layer {} with {} groups, {} general constraints each", a.layer, a.groups, a.k);
    println!("max constraint residual {residual:.3e}");
    if let (Some(t), Some(b)) = (&test, before) {
        let after = accuracy(&coded, t)?;
        println!("test accuracy {b:.4} -> {after:.4} (delta {:+.4})", after - b);
    }
    save_checkpoint(&coded, &a.out)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn cmd_exp_mnist(a: ExpMnistArgs) -> Result<()> {
    let model = load_checkpoint(&a.model)?;
    if model.encoded_layers().is_empty() {
        bail!("{} has no encoded layer; run `realcode encode` first", a.model.display());
    }
    let test = load_split(&a.data_dir, "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")?;
    let cfg = MnistExpConfig {
        error_counts: parse_sweep(&a.errors)?,
        trials: a.trials,
        sigma_mem: a.sigma_mem,
        datapath_errors: a.datapath_errors,
        sigma_dp: a.sigma_dp,
        seed: a.seed,
        opts: ProtectedOptions::default(),
    };
    let clean = realcode::network::evaluate(
        &model,
        &test,
        EvalMode::Clean,
        &realcode::network::FaultPlan::default(),
        1,
    )?;
    println!("clean accuracy {:.4}", clean.mean);
    let rows = run_mnist_experiment(&model, &test, &cfg, |total, mode, stats| {
        eprintln!(
            "errors {total}: {} mean {:.4} (std {:.4})",
            mode_label(mode),
            stats.mean,
            stats.std_dev
        );
    })?;
    for &total in &cfg.error_counts {
        let mean = |mode| {
            let v: Vec<f64> = rows
                .iter()
                .filter(|r| r.total_errors == total && r.mode == mode)
                .map(|r| r.accuracy)
                .collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        println!(
            "errors {total}: corrupted {:.4} corrected {:.4}",
            mean(EvalMode::Corrupted),
            mean(EvalMode::Corrected)
        );
    }
    let (header, body) = mnist_csv(&rows);
    write_results_csv(&a.out, &header, &body)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn cmd_exp_phase(a: ExpPhaseArgs) -> Result<()> {
    let cfg = PhaseConfig {
        rows: a.p,
        cols: a.q,
        constraint_counts: parse_sweep(&a.constraints)?,
        sparsity: a.sparsity,
        sigma: 1.0,
        trials: a.trials,
        seed: a.seed,
        success_tol: a.success_tol,
        solve: SolveOptions::default(),
    };
    let rows = run_phase_experiment(&cfg, |row| {
        eprintln!(
            "constraints {} trial {}: {} (err {:.2e}, {})",
            row.num_constraints,
            row.trial,
            if row.success { "recovered" } else { "failed" },
            row.recovery_error,
            row.status
        );
    })?;
    for (k, rate) in phase_success_rates(&rows) {
        println!("constraints {k}: success rate {rate:.2}");
    }
    let (header, body) = phase_csv(&rows);
    write_results_csv(&a.out, &header, &body)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn cmd_exp_output_layer(a: ExpOutputLayerArgs) -> Result<()> {
    let cfg = OutputLayerConfig {
        rows: a.p,
        cols: a.q,
        num_general: a.k,
        error_counts: parse_sweep(&a.errors)?,
        sigma_mem: a.sigma_mem,
        datapath_errors: a.datapath_errors,
        sigma_dp: a.sigma_dp,
        trials: a.trials,
        seed: a.seed,
        success_tol: a.success_tol,
        solve: SolveOptions::default(),
    };
    let rows = run_output_layer_experiment(&cfg, |row| {
        eprintln!(
            "errors {} trial {}: {} (err {:.2e}, {})",
            row.num_errors,
            row.trial,
            if row.success { "recovered" } else { "failed" },
            row.recovery_error,
            row.status
        );
    })?;
    for (c, rate) in output_layer_success_rates(&rows) {
        println!("errors {c}: success rate {rate:.2}");
    }
    let (header, body) = output_layer_csv(&rows);
    write_results_csv(&a.out, &header, &body)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn read_vector_file(path: &Path) -> Result<Vector> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let vals: Vec<f64> = text
        .split_whitespace()
        .enumerate()
        .map(|(i, tok)| {
            tok.parse::<f64>()
                .map_err(|_| anyhow!("{}: entry {} ('{tok}') is not a number", path.display(), i))
        })
        .collect::<Result<_>>()?;
    if vals.is_empty() {
        bail!("{}: no values", path.display());
    }
    Ok(Vector::from_vec(vals)?)
}

/// The target layer, its spec, and whether the spec covers the bias column.
fn encoded_layer_of(model: &MLPModel, flag: Option<usize>) -> Result<(usize, ConstraintSpec, bool)> {
    let idx = match flag {
        Some(i) => i,
        None => *model
            .encoded_layers()
            .first()
            .ok_or_else(|| anyhow!("model has no encoded layer; run `realcode encode` first"))?,
    };
    if idx >= model.num_layers() {
        bail!("--layer {idx} out of range for {} layers", model.num_layers());
    }
    let spec = model.specs[idx]
        .clone()
        .ok_or_else(|| anyhow!("layer {idx} is not encoded"))?;
    let augmented = spec.shape.1 == model.weights[idx].cols() + 1;
    Ok((idx, spec, augmented))
}

/// The product the syndrome applies to: the coded matrix times the
/// (possibly 1-extended) input.
fn coded_product(model: &MLPModel, layer: usize, augmented: bool, x: &Vector) -> Result<Vector> {
    let mut y = model.weights[layer].matvec(x)?;
    if augmented {
        y = y.add(&model.biases[layer])?;
    }
    Ok(y)
}

fn cmd_check(a: CheckArgs) -> Result<()> {
    let model = load_checkpoint(&a.model)?;
    let (layer, spec, augmented) = encoded_layer_of(&model, a.layer)?;
    let x = read_vector_file(&a.input_vector_file)?;
    if x.len() != model.weights[layer].cols() {
        bail!(
            "input has {} entries, layer {layer} consumes {}",
            x.len(),
            model.weights[layer].cols()
        );
    }
    let cs = ConstraintSet::from_spec(spec)?;
    let y = coded_product(&model, layer, augmented, &x)?;
    let report = detect(&y, &cs, DETECT_TOL)?;
    for (i, s) in report.syndromes.as_slice().iter().enumerate() {
        println!("syndrome {i}: {s:.6e}");
    }
    println!("max normalized syndrome {:.6e}", report.max_normalized_syndrome);
    if report.detected {
        println!("error detected");
    } else {
        println!("no error detected");
    }
    Ok(())
}

enum Fault {
    Memory { row: usize, col: usize, value: f64 },
    Datapath { index: usize, value: f64 },
}

fn parse_faults_file(path: &Path) -> Result<Vec<Fault>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: &str| anyhow!("{}:{}: {msg}: '{raw}'", path.display(), ln + 1);
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.as_slice() {
            ["memory", row, col, value] => out.push(Fault::Memory {
                row: row.parse().map_err(|_| err("bad row"))?,
                col: col.parse().map_err(|_| err("bad column"))?,
                value: value.parse().map_err(|_| err("bad value"))?,
            }),
            ["datapath", index, value] => out.push(Fault::Datapath {
                index: index.parse().map_err(|_| err("bad index"))?,
                value: value.parse().map_err(|_| err("bad value"))?,
            }),
            _ => {
                return Err(err(
                    "expected 'memory ROW COL VALUE' or 'datapath INDEX VALUE'",
                ))
            }
        }
    }
    Ok(out)
}

fn cmd_correct(a: CorrectArgs) -> Result<()> {
    let model = load_checkpoint(&a.model)?;
    let (layer, spec, augmented) = encoded_layer_of(&model, a.layer)?;
    let x = read_vector_file(&a.input_vector_file)?;
    let q = model.weights[layer].cols();
    if x.len() != q {
        bail!("input has {} entries, layer {layer} consumes {q}", x.len());
    }
    let faults = parse_faults_file(&a.faults_file)?;

    // Apply the simulated faults: memory hits land in the stored matrix
    // (the bias column is addressable when the spec covers it), datapath
    // hits land on the computed product.
    let (p, cols) = spec.shape;
    let mut struck = model.clone();
    let mut datapath = Vector::zeros(p);
    for f in &faults {
        match *f {
            Fault::Memory { row, col, value } => {
                if row >= p || col >= cols {
                    bail!("memory fault ({row},{col}) outside the coded {p}x{cols} matrix");
                }
                if col == q {
                    struck.biases[layer][row] += value;
                } else {
                    struck.weights[layer][(row, col)] += value;
                }
            }
            Fault::Datapath { index, value } => {
                if index >= p {
                    bail!("datapath fault index {index} outside the {p}-row output");
                }
                datapath[index] += value;
            }
        }
    }

    let cs = ConstraintSet::from_spec(spec)?;
    let y = coded_product(&struck, layer, augmented, &x)?.add(&datapath)?;
    let x_in = if augmented {
        Vector::from_fn(q + 1, |i| if i < q { x.at(i) } else { 1.0 })
    } else {
        x.clone()
    };
    let h_tilde = if augmented {
        realcode::codec::augment_bias(&struck.weights[layer], &struck.biases[layer])?
    } else {
        struck.weights[layer].clone()
    };
    let res = correct_layer(&y, &h_tilde, &x_in, &cs, &SolveOptions::default(), DETECT_TOL)?;

    println!(
        "detection: {} (max normalized syndrome {:.6e})",
        if res.detection.detected { "error detected" } else { "no error detected" },
        res.detection.max_normalized_syndrome
    );
    for (g, st) in res.statuses.iter().enumerate() {
        println!("group {g}: {st}");
    }
    println!("estimated memory error norm {:.6e}", res.e_hat.frobenius_norm());
    println!("estimated datapath error norm {:.6e}", res.e_vec_hat.norm2());

    if let Some(out) = &a.out {
        let mut repaired = struck.clone();
        if augmented {
            repaired.weights[layer] =
                realcode::numkernel::Matrix::from_fn(p, q, |i, j| res.h_hat.at(i, j));
            repaired.biases[layer] = Vector::from_fn(p, |i| res.h_hat.at(i, q));
        } else {
            repaired.weights[layer] = res.h_hat.clone();
        }
        save_checkpoint(&repaired, out)?;
        println!("wrote {}", out.display());
    }
    Ok(())
}
