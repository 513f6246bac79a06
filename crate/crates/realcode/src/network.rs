//! A minimal feedforward classifier and the glue that routes its layers
//! through the redundancy machinery.
//!
//! The network itself is deliberately plain — dense layers, ReLU-family
//! activations, a softmax readout, mini-batch SGD — because it exists to
//! host protected layers, not to chase benchmarks. What this module adds on
//! top of the textbook parts:
//!
//! * [`apply_ecc`] projects a trained layer onto a constraint subspace
//!   (optionally folding the bias in as an extra weight column), after which
//!   the layer carries its [`ConstraintSpec`] around inside the model;
//! * [`protected_forward`] recomputes the encoded layers' products under
//!   injected faults, runs syndrome detection and, when something fires,
//!   sparse correction before continuing the pass;
//! * [`evaluate`] measures test accuracy under repeated randomized fault
//!   injection in three modes (clean / corrupted / corrected), pairing the
//!   fault draws across modes so the comparison is seed-for-seed.
//!
//! Training is single-threaded and bit-deterministic for a fixed config;
//! evaluation parallelizes across trials with the model shared immutably.

use rayon::prelude::*;
use thiserror::Error;

use crate::codec::{self, CodecError, ConstraintSet, ConstraintSpec};
use crate::dataio::Dataset;
use crate::decoder::{self, CorrectionResult, DecodeError, DETECT_TOL};
use crate::faultsim::{
    inject_datapath, inject_memory, DatapathFaultSpec, FaultError, MemoryFaultSpec,
};
use crate::lpsolve::{SolveOptions, SolveStatus};
use crate::numkernel::{Matrix, NumError, Vector};
use crate::rng::{streams, Stream};

/// Samples per batched block during evaluation. Purely a working-set knob;
/// results do not depend on it.
const EVAL_BLOCK: usize = 512;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid data: {0}")]
    Data(String),
    #[error("model has no encoded layer")]
    NoEncodedLayer,
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Fault(#[from] FaultError),
}

/// Hidden-layer nonlinearity. The output layer is always linear (logits);
/// softmax is applied by the loss / the caller.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    ReLU,
    /// Leaky variant with the given negative-side slope.
    LeakyReLU(f64),
}

impl Activation {
    #[inline]
    fn apply(&self, v: f64) -> f64 {
        match *self {
            Activation::ReLU => {
                if v > 0.0 {
                    v
                } else {
                    0.0
                }
            }
            Activation::LeakyReLU(s) => {
                if v > 0.0 {
                    v
                } else {
                    s * v
                }
            }
        }
    }

    /// Derivative as a function of the pre-activation value.
    #[inline]
    fn slope_at(&self, pre: f64) -> f64 {
        match *self {
            Activation::ReLU => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyReLU(s) => {
                if pre > 0.0 {
                    1.0
                } else {
                    s
                }
            }
        }
    }
}

/// Architecture and training hyperparameters.
#[derive(Clone, Debug)]
pub struct MLPConfig {
    /// Layer widths, input first, class count last. Layer `i` maps
    /// `layer_dims[i] -> layer_dims[i+1]`.
    pub layer_dims: Vec<usize>,
    pub activation: Activation,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for MLPConfig {
    fn default() -> Self {
        MLPConfig {
            layer_dims: vec![784, 256, 128, 10],
            activation: Activation::ReLU,
            learning_rate: 0.01,
            epochs: 100,
            batch_size: 64,
            seed: 1,
        }
    }
}

impl MLPConfig {
    fn validate(&self) -> Result<(), NetError> {
        if self.layer_dims.len() < 2 {
            return Err(NetError::InvalidConfig(format!(
                "need at least input and output dims, got {:?}",
                self.layer_dims
            )));
        }
        if self.layer_dims.iter().any(|&d| d == 0) {
            return Err(NetError::InvalidConfig(format!(
                "zero-width layer in {:?}",
                self.layer_dims
            )));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(NetError::InvalidConfig(format!(
                "learning rate {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(NetError::InvalidConfig(format!(
                "epochs {} batch size {}; both must be positive",
                self.epochs, self.batch_size
            )));
        }
        Ok(())
    }
}

/// A dense feedforward model. Layer `i` computes
/// `z_i = weights[i] * x + biases[i]`; every layer but the last is followed
/// by the activation. `specs[i]` being present marks layer `i` as encoded:
/// its weights satisfy the spec's constraints and the protected pass routes
/// it through detection/correction. A spec whose shape has one extra column
/// protects the bias jointly with the weights (the layer map is then read as
/// `[H delta] (x; 1)`).
#[derive(Clone, Debug)]
pub struct MLPModel {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vector>,
    pub specs: Vec<Option<ConstraintSpec>>,
    pub activation: Activation,
}

impl MLPModel {
    /// Fresh model: weights i.i.d. Gaussian with standard deviation
    /// `1/sqrt(fan_in)`, biases zero. Deterministic in the config seed.
    pub fn init(cfg: &MLPConfig) -> Result<MLPModel, NetError> {
        cfg.validate()?;
        let mut stream = Stream::new(cfg.seed, streams::WEIGHT_INIT);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in cfg.layer_dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let sigma = 1.0 / (fan_in as f64).sqrt();
            let mut m = Matrix::zeros(fan_out, fan_in);
            stream.fill_normal(m.as_mut_slice());
            for v in m.as_mut_slice() {
                *v *= sigma;
            }
            weights.push(m);
            biases.push(Vector::zeros(fan_out));
        }
        let specs = vec![None; weights.len()];
        Ok(MLPModel { weights, biases, specs, activation: cfg.activation })
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].cols()
    }

    /// Width of the final layer == number of classes.
    pub fn class_count(&self) -> usize {
        self.weights[self.weights.len() - 1].rows()
    }

    /// Indices of layers carrying a constraint spec.
    pub fn encoded_layers(&self) -> Vec<usize> {
        (0..self.num_layers()).filter(|&i| self.specs[i].is_some()).collect()
    }

    /// Worst normalized constraint violation over all encoded layers
    /// (zero if none are encoded). Bias-augmented specs are checked against
    /// the augmented matrix they were encoded on.
    pub fn verify_encoding(&self) -> Result<f64, NetError> {
        let mut worst = 0.0f64;
        for i in self.encoded_layers() {
            let spec = self.specs[i].as_ref().unwrap();
            let cs = ConstraintSet::from_spec(spec.clone())?;
            let h = self.coded_matrix(i)?;
            worst = worst.max(codec::verify(&h, &cs)?);
        }
        Ok(worst)
    }

    /// The matrix the layer's spec constrains: the weights, or `[H delta]`
    /// for a bias-augmented spec.
    fn coded_matrix(&self, i: usize) -> Result<Matrix, NetError> {
        let spec = self.specs[i].as_ref().expect("coded_matrix on unencoded layer");
        if spec.shape.1 == self.weights[i].cols() + 1 {
            Ok(codec::augment_bias(&self.weights[i], &self.biases[i])?)
        } else {
            Ok(self.weights[i].clone())
        }
    }
}

fn check_features(m: &MLPModel, data: &Dataset) -> Result<(), NetError> {
    if data.is_empty() {
        return Err(NetError::Data("empty dataset".into()));
    }
    for (n, x) in data.features.iter().enumerate() {
        if x.len() != m.input_dim() {
            return Err(NetError::Data(format!(
                "feature {n} has length {}, model wants {}",
                x.len(),
                m.input_dim()
            )));
        }
    }
    Ok(())
}

/// Full forward pass. Returns the logits (pre-softmax) and every layer's
/// pre-activation vector, output layer included, so callers can run
/// syndrome checks on any intermediate product.
pub fn forward(m: &MLPModel, x: &Vector) -> Result<(Vector, Vec<Vector>), NetError> {
    if x.len() != m.input_dim() {
        return Err(NetError::Data(format!(
            "input length {} does not match first layer width {}",
            x.len(),
            m.input_dim()
        )));
    }
    let l = m.num_layers();
    let mut pre = Vec::with_capacity(l);
    let mut cur = x.clone();
    for i in 0..l {
        let mut z = m.weights[i].matvec(&cur)?.add(&m.biases[i])?;
        pre.push(z.clone());
        if i + 1 < l {
            for v in z.as_mut_slice() {
                *v = m.activation.apply(*v);
            }
        }
        cur = z;
    }
    Ok((cur, pre))
}

/// Numerically stable softmax.
pub fn softmax(logits: &Vector) -> Vector {
    let mx = logits.as_slice().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out = Vector::from_fn(logits.len(), |i| (logits.at(i) - mx).exp());
    let sum: f64 = out.as_slice().iter().sum();
    for v in out.as_mut_slice() {
        *v /= sum;
    }
    out
}

/// Per-epoch training summary, as passed to [`train_sgd_with`] observers.
#[derive(Clone, Copy, Debug)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean cross-entropy over the epoch's training examples.
    pub loss: f64,
    /// Training accuracy over the epoch (measured on the pre-update pass of
    /// each mini-batch).
    pub accuracy: f64,
}

/// features[idx[j]] laid out as column j.
fn gather_columns(data: &Dataset, idx: &[usize]) -> Matrix {
    let d = data.features[idx[0]].len();
    Matrix::from_fn(d, idx.len(), |i, j| data.features[idx[j]].at(i))
}

fn add_bias_columns(z: &mut Matrix, b: &Vector) {
    let cols = z.cols();
    let s = z.as_mut_slice();
    for r in 0..b.len() {
        let br = b.at(r);
        for v in &mut s[r * cols..(r + 1) * cols] {
            *v += br;
        }
    }
}

/// Forward over a batch (columns = samples). Returns the pre-activations of
/// every layer and the activated outputs `acts` with `acts[0]` being the
/// input itself (what each layer consumed).
fn forward_batch(m: &MLPModel, x: &Matrix) -> Result<(Vec<Matrix>, Vec<Matrix>), NetError> {
    let l = m.num_layers();
    let mut zs = Vec::with_capacity(l);
    let mut acts = Vec::with_capacity(l + 1);
    acts.push(x.clone());
    for i in 0..l {
        let mut z = m.weights[i].matmul(&acts[i])?;
        add_bias_columns(&mut z, &m.biases[i]);
        zs.push(z.clone());
        if i + 1 < l {
            for v in z.as_mut_slice() {
                *v = m.activation.apply(*v);
            }
        }
        acts.push(z);
    }
    Ok((zs, acts))
}

fn argmax_column(m: &Matrix, j: usize) -> usize {
    let mut best = 0;
    let mut bv = m.at(0, j);
    for r in 1..m.rows() {
        let v = m.at(r, j);
        if v > bv {
            bv = v;
            best = r;
        }
    }
    best
}

/// Mean softmax cross-entropy loss, batch accuracy count, and the analytic
/// gradients of the mean loss with respect to every weight and bias.
/// `x` holds one sample per column; `labels` one class index per column.
pub fn batch_grads(
    m: &MLPModel,
    x: &Matrix,
    labels: &[usize],
) -> Result<(f64, usize, Vec<Matrix>, Vec<Vector>), NetError> {
    let l = m.num_layers();
    let bsz = labels.len();
    let (zs, acts) = forward_batch(m, x)?;
    let logits = &zs[l - 1];

    // Softmax columns, loss, and dZ for the output layer in one sweep.
    let mut dz = logits.clone();
    let mut loss = 0.0;
    let mut correct = 0;
    for j in 0..bsz {
        if argmax_column(logits, j) == labels[j] {
            correct += 1;
        }
        let mut mx = f64::NEG_INFINITY;
        for r in 0..dz.rows() {
            mx = mx.max(dz.at(r, j));
        }
        let mut sum = 0.0;
        for r in 0..dz.rows() {
            let e = (dz.at(r, j) - mx).exp();
            dz[(r, j)] = e;
            sum += e;
        }
        for r in 0..dz.rows() {
            dz[(r, j)] /= sum;
        }
        loss -= dz.at(labels[j], j).max(f64::MIN_POSITIVE).ln();
        dz[(labels[j], j)] -= 1.0;
    }
    loss /= bsz as f64;
    for v in dz.as_mut_slice() {
        *v /= bsz as f64;
    }

    let mut dws = vec![Matrix::zeros(0, 0); l];
    let mut dbs = vec![Vector::zeros(0); l];
    for i in (0..l).rev() {
        dws[i] = dz.matmul_nt(&acts[i])?;
        dbs[i] = Vector::from_fn(dz.rows(), |r| {
            let s = dz.as_slice();
            s[r * dz.cols()..(r + 1) * dz.cols()].iter().sum()
        });
        if i > 0 {
            let mut dx = m.weights[i].matmul_tn(&dz)?;
            let zp = zs[i - 1].as_slice();
            for (v, &pre) in dx.as_mut_slice().iter_mut().zip(zp) {
                *v *= m.activation.slope_at(pre);
            }
            dz = dx;
        }
    }
    Ok((loss, correct, dws, dbs))
}

/// Mini-batch SGD with softmax cross-entropy, calling `on_epoch` after each
/// epoch. Shuffle order, initialization, and therefore the final weights are
/// fully determined by the config.
pub fn train_sgd_with(
    cfg: &MLPConfig,
    data: &Dataset,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<MLPModel, NetError> {
    cfg.validate()?;
    let mut model = MLPModel::init(cfg)?;
    check_features(&model, data)?;
    let k = *cfg.layer_dims.last().unwrap();
    if data.num_classes != k {
        return Err(NetError::Data(format!(
            "dataset has {} classes, model outputs {k}",
            data.num_classes
        )));
    }
    let n = data.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut shuffler = Stream::new(cfg.seed, streams::DATA_SHUFFLE);
    for epoch in 0..cfg.epochs {
        shuffler.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let x = gather_columns(data, chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
            let (loss, hits, dws, dbs) = batch_grads(&model, &x, &labels)?;
            loss_sum += loss * chunk.len() as f64;
            correct += hits;
            for i in 0..model.num_layers() {
                let lr = cfg.learning_rate;
                for (w, g) in model.weights[i].as_mut_slice().iter_mut().zip(dws[i].as_slice()) {
                    *w -= lr * g;
                }
                for (b, g) in model.biases[i].as_mut_slice().iter_mut().zip(dbs[i].as_slice()) {
                    *b -= lr * g;
                }
            }
        }
        on_epoch(&EpochStats {
            epoch,
            loss: loss_sum / n as f64,
            accuracy: correct as f64 / n as f64,
        });
    }
    Ok(model)
}

/// [`train_sgd_with`] logging each epoch as an `epoch / loss / accuracy`
/// line on stderr.
pub fn train_sgd(cfg: &MLPConfig, data: &Dataset) -> Result<MLPModel, NetError> {
    train_sgd_with(cfg, data, |st| {
        eprintln!("epoch {:>4}  loss {:.6}  accuracy {:.4}", st.epoch, st.loss, st.accuracy);
    })
}

/// Classification accuracy of the plain (unprotected) model on a dataset.
pub fn accuracy(m: &MLPModel, data: &Dataset) -> Result<f64, NetError> {
    check_features(m, data)?;
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_BLOCK) {
        let x = gather_columns(data, chunk);
        let (zs, _) = forward_batch(m, &x)?;
        let logits = &zs[zs.len() - 1];
        for (j, &i) in chunk.iter().enumerate() {
            if argmax_column(logits, j) == data.labels[i] {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Replace layer `layer_index`'s weights with their projection onto the
/// spec's constraint subspace and record the spec on the model. A spec of
/// shape `(p, q)` encodes the weights alone; `(p, q+1)` encodes `[H delta]`,
/// protecting the bias as an extra column. Dimensions and parameter count
/// are unchanged either way; all other layers are untouched.
pub fn apply_ecc(
    m: &MLPModel,
    layer_index: usize,
    spec: &ConstraintSpec,
) -> Result<MLPModel, NetError> {
    if layer_index >= m.num_layers() {
        return Err(NetError::InvalidConfig(format!(
            "layer index {layer_index} out of range for {} layers",
            m.num_layers()
        )));
    }
    let (p, q) = m.weights[layer_index].shape();
    let cs = ConstraintSet::from_spec(spec.clone())?;
    let mut out = m.clone();
    if spec.shape == (p, q) {
        let coded = codec::encode(&m.weights[layer_index], &cs)?;
        out.weights[layer_index] = coded.weights;
    } else if spec.shape == (p, q + 1) {
        let aug = codec::augment_bias(&m.weights[layer_index], &m.biases[layer_index])?;
        let coded = codec::encode(&aug, &cs)?;
        out.weights[layer_index] = Matrix::from_fn(p, q, |i, j| coded.weights.at(i, j));
        out.biases[layer_index] = Vector::from_fn(p, |i| coded.weights.at(i, q));
    } else {
        return Err(NetError::InvalidConfig(format!(
            "spec shape {:?} fits neither the layer's {:?} nor its bias-augmented form",
            spec.shape,
            (p, q)
        )));
    }
    out.specs[layer_index] = Some(spec.clone());
    Ok(out)
}

/// Datapath fault injections for one protected pass: additive error vectors
/// applied to the pre-activation product of the named (encoded) layers.
#[derive(Clone, Debug, Default)]
pub struct ForwardFaults {
    pub datapath: Vec<(usize, Vector)>,
}

/// Knobs for [`protected_forward`] and [`evaluate`].
#[derive(Clone, Debug)]
pub struct ProtectedOptions {
    /// `false` skips correction entirely (detection too) and propagates the
    /// corrupted products — the "no protection" baseline.
    pub correct: bool,
    pub detect_tol: f64,
    pub solve: SolveOptions,
}

impl Default for ProtectedOptions {
    fn default() -> Self {
        ProtectedOptions { correct: true, detect_tol: DETECT_TOL, solve: SolveOptions::default() }
    }
}

/// Forward pass with the encoded layers routed through detection and
/// correction. Faults in `faults` are added to the matching layer's product
/// before the decoder sees it; memory faults are modeled by mutating the
/// weights of an encoded layer beforehand (the decoder then reads the
/// corrupted matrix, exactly as a fault-struck memory would serve it).
///
/// Returns the logits and one [`CorrectionResult`] per encoded layer in
/// layer order (empty when `opts.correct` is off). Solver failures on some
/// group degrade that group's estimate but the pass always completes.
pub fn protected_forward(
    m: &MLPModel,
    x: &Vector,
    faults: &ForwardFaults,
    opts: &ProtectedOptions,
) -> Result<(Vector, Vec<CorrectionResult>), NetError> {
    if x.len() != m.input_dim() {
        return Err(NetError::Data(format!(
            "input length {} does not match first layer width {}",
            x.len(),
            m.input_dim()
        )));
    }
    let encoded = m.encoded_layers();
    if encoded.is_empty() {
        return Err(NetError::NoEncodedLayer);
    }
    for (i, _) in &faults.datapath {
        if *i >= m.num_layers() || m.specs[*i].is_none() {
            return Err(NetError::InvalidConfig(format!(
                "datapath fault targets layer {i}, which is not an encoded layer"
            )));
        }
    }
    let l = m.num_layers();
    let mut results = Vec::new();
    let mut cur = x.clone();
    for i in 0..l {
        let mut z = match &m.specs[i] {
            Some(spec) => {
                let augmented = spec.shape.1 == m.weights[i].cols() + 1;
                // The observed product: bias rides along only when it is
                // part of the coded matrix.
                let mut y = m.weights[i].matvec(&cur)?;
                if augmented {
                    y = y.add(&m.biases[i])?;
                }
                for (li, e) in &faults.datapath {
                    if *li == i {
                        if e.len() != y.len() {
                            return Err(NetError::InvalidConfig(format!(
                                "datapath fault for layer {i} has length {}, product has {}",
                                e.len(),
                                y.len()
                            )));
                        }
                        y = y.add(e)?;
                    }
                }
                let mut z = if opts.correct {
                    let cs = ConstraintSet::from_spec(spec.clone())?;
                    let h_tilde = m.coded_matrix(i)?;
                    let x_in = if augmented {
                        Vector::from_fn(cur.len() + 1, |r| {
                            if r < cur.len() {
                                cur.at(r)
                            } else {
                                1.0
                            }
                        })
                    } else {
                        cur.clone()
                    };
                    let res = decoder::correct_layer(
                        &y,
                        &h_tilde,
                        &x_in,
                        &cs,
                        &opts.solve,
                        opts.detect_tol,
                    )?;
                    let z = res.y_corrected.clone();
                    results.push(res);
                    z
                } else {
                    y
                };
                if !augmented {
                    z = z.add(&m.biases[i])?;
                }
                z
            }
            None => m.weights[i].matvec(&cur)?.add(&m.biases[i])?,
        };
        if i + 1 < l {
            for v in z.as_mut_slice() {
                *v = m.activation.apply(*v);
            }
        }
        cur = z;
    }
    Ok((cur, results))
}

/// What [`evaluate`] measures.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalMode {
    /// The model as-is; no injection. Trial-invariant.
    Clean,
    /// Faults injected, no detection or correction.
    Corrupted,
    /// Faults injected, encoded layers corrected before proceeding.
    Corrected,
}

/// Fault configuration for one evaluation. Memory faults strike every
/// encoded layer's stored matrix once per trial; datapath faults strike the
/// product of every encoded layer freshly per inference.
#[derive(Clone, Debug, Default)]
pub struct FaultPlan {
    pub memory: Option<MemoryFaultSpec>,
    pub datapath: Option<DatapathFaultSpec>,
}

/// Per-trial accuracies with their mean and sample standard deviation
/// (zero for a single trial).
#[derive(Clone, Debug)]
pub struct AccuracyStats {
    pub per_trial: Vec<f64>,
    pub mean: f64,
    pub std_dev: f64,
}

impl AccuracyStats {
    fn from_trials(per_trial: Vec<f64>) -> AccuracyStats {
        let n = per_trial.len() as f64;
        let mean = per_trial.iter().sum::<f64>() / n;
        let std_dev = if per_trial.len() > 1 {
            (per_trial.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        AccuracyStats { per_trial, mean, std_dev }
    }
}

/// Seed for trial `t`'s memory corruption of layer `i`: distinct per
/// (base, trial, layer), identical across modes so comparisons are paired.
fn trial_seed(base: u64, trial: usize, layer: usize) -> u64 {
    base ^ (trial as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (layer as u64 + 1).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
}

/// Seed for the datapath error on sample `sample` of trial `t` at layer `i`.
fn sample_seed(base: u64, trial: usize, layer: usize, sample: usize) -> u64 {
    trial_seed(base, trial, layer) ^ (sample as u64).wrapping_mul(0xD6E8_FEB8_6659_FD93)
}

struct TrialLayer {
    /// Corrupted stored matrix, split back into weight and (possibly coded)
    /// bias parts for batched products.
    w_tilde: Matrix,
    delta_tilde: Option<Vector>,
    /// Corrected counterparts (mode == Corrected only).
    w_hat: Option<Matrix>,
    delta_hat: Option<Vector>,
    cs: ConstraintSet,
    augmented: bool,
}

fn prepare_trial_layer(
    m: &MLPModel,
    i: usize,
    plan: &FaultPlan,
    trial: usize,
    mode: EvalMode,
    opts: &ProtectedOptions,
) -> Result<TrialLayer, NetError> {
    let spec = m.specs[i].as_ref().unwrap();
    let augmented = spec.shape.1 == m.weights[i].cols() + 1;
    let cs = ConstraintSet::from_spec(spec.clone())?;
    let stored = m.coded_matrix(i)?;
    let stored = match &plan.memory {
        Some(ms) => {
            let per_trial =
                MemoryFaultSpec { seed: trial_seed(ms.seed, trial, i), ..ms.clone() };
            inject_memory(&stored, &per_trial)?.0
        }
        None => stored,
    };
    let q = m.weights[i].cols();
    let (w_tilde, delta_tilde) = if augmented {
        (
            Matrix::from_fn(stored.rows(), q, |r, c| stored.at(r, c)),
            Some(Vector::from_fn(stored.rows(), |r| stored.at(r, q))),
        )
    } else {
        (stored.clone(), None)
    };
    let (w_hat, delta_hat) = if mode == EvalMode::Corrected {
        let (e_hat, statuses) = decoder::correct_memory(&stored, &cs, &opts.solve)?;
        for (g, st) in statuses.iter().enumerate() {
            if *st != SolveStatus::Optimal {
                eprintln!("trial {trial} layer {i} group {g}: solver status {st}");
            }
        }
        let h_hat = stored.sub(&e_hat)?;
        if augmented {
            (
                Some(Matrix::from_fn(h_hat.rows(), q, |r, c| h_hat.at(r, c))),
                Some(Vector::from_fn(h_hat.rows(), |r| h_hat.at(r, q))),
            )
        } else {
            (Some(h_hat), None)
        }
    } else {
        (None, None)
    };
    Ok(TrialLayer { w_tilde, delta_tilde, w_hat, delta_hat, cs, augmented })
}

fn run_trial(
    m: &MLPModel,
    data: &Dataset,
    mode: EvalMode,
    plan: &FaultPlan,
    trial: usize,
    opts: &ProtectedOptions,
) -> Result<f64, NetError> {
    let mut layers: Vec<Option<TrialLayer>> = Vec::with_capacity(m.num_layers());
    for i in 0..m.num_layers() {
        layers.push(if m.specs[i].is_some() {
            Some(prepare_trial_layer(m, i, plan, trial, mode, opts)?)
        } else {
            None
        });
    }
    let l = m.num_layers();
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_BLOCK) {
        let mut cur = gather_columns(data, chunk);
        for i in 0..l {
            let mut z = match &layers[i] {
                Some(tl) => {
                    // Observed products under the corrupted stored matrix.
                    let mut p_mat = tl.w_tilde.matmul(&cur)?;
                    if let Some(dt) = &tl.delta_tilde {
                        add_bias_columns(&mut p_mat, dt);
                    }
                    if let Some(ds) = &plan.datapath {
                        if ds.num_errors > 0 {
                            for (j, &sample) in chunk.iter().enumerate() {
                                let col = Vector::from_fn(p_mat.rows(), |r| p_mat.at(r, j));
                                let per_sample = DatapathFaultSpec {
                                    seed: sample_seed(ds.seed, trial, i, sample),
                                    ..ds.clone()
                                };
                                let (hit, _) = inject_datapath(&col, &per_sample)?;
                                for r in 0..p_mat.rows() {
                                    p_mat[(r, j)] = hit.at(r);
                                }
                            }
                        }
                    }
                    if mode == EvalMode::Corrected {
                        // Reference products under the repaired matrix; a
                        // column is swapped in exactly when its syndrome
                        // fires, matching the per-sample corrected pass
                        // (whose output equals the repaired product).
                        let w_hat = tl.w_hat.as_ref().unwrap();
                        let mut r_mat = w_hat.matmul(&cur)?;
                        if let Some(dh) = &tl.delta_hat {
                            add_bias_columns(&mut r_mat, dh);
                        }
                        for j in 0..p_mat.cols() {
                            let col = Vector::from_fn(p_mat.rows(), |r| p_mat.at(r, j));
                            let rep = decoder::detect(&col, &tl.cs, opts.detect_tol)?;
                            if rep.detected {
                                for r in 0..p_mat.rows() {
                                    p_mat[(r, j)] = r_mat.at(r, j);
                                }
                            }
                        }
                    }
                    if !tl.augmented {
                        add_bias_columns(&mut p_mat, &m.biases[i]);
                    }
                    p_mat
                }
                None => {
                    let mut z = m.weights[i].matmul(&cur)?;
                    add_bias_columns(&mut z, &m.biases[i]);
                    z
                }
            };
            if i + 1 < l {
                for v in z.as_mut_slice() {
                    *v = m.activation.apply(*v);
                }
            }
            cur = z;
        }
        for (j, &sample) in chunk.iter().enumerate() {
            if argmax_column(&cur, j) == data.labels[sample] {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Test-set accuracy under repeated fault injection, with default options.
pub fn evaluate(
    m: &MLPModel,
    data: &Dataset,
    mode: EvalMode,
    plan: &FaultPlan,
    trials: usize,
) -> Result<AccuracyStats, NetError> {
    evaluate_with(m, data, mode, plan, trials, &ProtectedOptions::default())
}

/// Test-set accuracy under repeated fault injection.
///
/// Each trial draws fresh memory faults per encoded layer (one draw per
/// trial) and fresh datapath faults per inference, seeded by trial, layer,
/// and sample index — never by mode, so corrupted and corrected runs face
/// identical faults. Trials run in parallel; the model is shared read-only.
/// Clean mode is deterministic, so it is computed once and replicated.
pub fn evaluate_with(
    m: &MLPModel,
    data: &Dataset,
    mode: EvalMode,
    plan: &FaultPlan,
    trials: usize,
    opts: &ProtectedOptions,
) -> Result<AccuracyStats, NetError> {
    if trials == 0 {
        return Err(NetError::InvalidConfig("need at least one trial".into()));
    }
    check_features(m, data)?;
    if mode == EvalMode::Clean {
        let acc = accuracy(m, data)?;
        return Ok(AccuracyStats::from_trials(vec![acc; trials]));
    }
    if m.encoded_layers().is_empty() {
        return Err(NetError::NoEncodedLayer);
    }
    let per_trial: Vec<f64> = (0..trials)
        .into_par_iter()
        .map(|t| run_trial(m, data, mode, plan, t, opts))
        .collect::<Result<_, _>>()?;
    Ok(AccuracyStats::from_trials(per_trial))
}
