//! Dense neural-network numerics.
//!
//! Everything here is deliberately small and deterministic: fully-connected
//! layers with ReLU/identity activations, exact analytic gradients, plain
//! mini-batch SGD with best-validation selection, and the information
//! primitives (entropy, KL divergence) the selection criteria are built on.
//!
//! All arithmetic is 64-bit. Batches are row-major `(batch, dim)` matrices.
//!
//! # Checkpoint format
//!
//! [`DenseParams::write_to`] emits a flat little-endian layout:
//!
//! ```text
//! magic   b"CBMDENSE"            8 bytes
//! version u32                    currently 1
//! n       u32                    number of layers
//! n × (in_dim u32, out_dim u32, activation u8)   activation: 0 ReLU, 1 identity
//! n × (weights f64[out×in] row-major, bias f64[out])
//! ```

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution as RandDistribution, Normal};
use std::io::{Read, Write};

/// Smoothing constant applied to every distribution entering entropy/KL so
/// saturated softmax outputs never produce `log(0)`.
pub const PROB_EPS: f64 = 1e-12;

/// Tolerance on `sum(probs) == 1` when validating a [`Distribution`].
pub const DIST_SUM_TOL: f64 = 1e-9;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("training diverged (non-finite loss) at lr={lr}, epoch {epoch}")]
    Diverged { lr: f64, epoch: usize },
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NnError>;

// ---------------------------------------------------------------------------
// Layers and parameters
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply_inplace(self, z: &mut Array2<f64>) {
        if self == Activation::Relu {
            z.mapv_inplace(|v| v.max(0.0));
        }
    }

    /// Derivative expressed in terms of the layer *output* (valid for ReLU
    /// and identity).
    fn grad_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// One fully-connected layer: `y = act(x · Wᵀ + b)`.
#[derive(Debug, Clone)]
pub struct DenseLayer {
    /// `(out_dim, in_dim)`, row-major.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn in_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.nrows()
    }
}

/// A stack of dense layers with chained dimensions.
#[derive(Debug, Clone)]
pub struct DenseParams {
    layers: Vec<DenseLayer>,
}

/// Per-layer post-activation outputs from a forward pass, retained for the
/// backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `outputs[l]` has shape `(batch, out_dim(l))`; the last entry holds the
    /// network logits.
    pub outputs: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub fn logits(&self) -> &Array2<f64> {
        self.outputs.last().expect("cache has at least one layer")
    }
}

/// Mean parameter gradients over a batch, one `(dW, db)` pair per layer.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub d_weights: Vec<Array2<f64>>,
    pub d_biases: Vec<Array1<f64>>,
}

impl DenseParams {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(NnError::InvalidParam("network needs at least one layer".into()));
        }
        for w in layers.windows(2) {
            if w[0].out_dim() != w[1].in_dim() {
                return Err(NnError::DimMismatch(format!(
                    "layer output dim {} does not chain into next input dim {}",
                    w[0].out_dim(),
                    w[1].in_dim()
                )));
            }
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.out_dim() {
                return Err(NnError::DimMismatch(format!(
                    "layer {i}: bias len {} != out_dim {}",
                    l.bias.len(),
                    l.out_dim()
                )));
            }
            if l.weights.iter().chain(l.bias.iter()).any(|v| !v.is_finite()) {
                return Err(NnError::InvalidParam(format!("layer {i} has non-finite entries")));
            }
        }
        Ok(Self { layers })
    }

    /// He-normal initialization for an MLP with ReLU hidden layers and an
    /// identity output layer. `dims` lists `[input, hidden..., output]`.
    pub fn init_mlp(dims: &[usize], rng: &mut impl Rng) -> Result<Self> {
        if dims.len() < 2 {
            return Err(NnError::InvalidParam("init_mlp needs at least [in, out] dims".into()));
        }
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for i in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[i], dims[i + 1]);
            let std = (2.0 / fan_in as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("finite std");
            let weights =
                Array2::from_shape_fn((fan_out, fan_in), |_| normal.sample(rng));
            let activation = if i + 1 == dims.len() - 1 {
                Activation::Identity
            } else {
                Activation::Relu
            };
            layers.push(DenseLayer { weights, bias: Array1::zeros(fan_out), activation });
        }
        Self::new(layers)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().expect("nonempty").in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("nonempty").out_dim()
    }

    /// Forward pass for a batch; keeps per-layer activations for [`Self::backward`].
    pub fn forward(&self, x: ArrayView2<f64>) -> Result<ForwardCache> {
        if x.ncols() != self.input_dim() {
            return Err(NnError::DimMismatch(format!(
                "input has {} columns, network expects {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        let mut outputs: Vec<Array2<f64>> = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let prev: ArrayView2<f64> = if i == 0 { x } else { outputs[i - 1].view() };
            let mut z = prev.dot(&layer.weights.t());
            z += &layer.bias;
            layer.activation.apply_inplace(&mut z);
            outputs.push(z);
        }
        Ok(ForwardCache { outputs })
    }

    /// Forward pass for a single example, returning the logits.
    pub fn forward_one(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        if x.len() != self.input_dim() {
            return Err(NnError::DimMismatch(format!(
                "input has {} entries, network expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        let mut cur = x.to_owned();
        for layer in &self.layers {
            let mut z = layer.weights.dot(&cur);
            z += &layer.bias;
            if layer.activation == Activation::Relu {
                z.mapv_inplace(|v| v.max(0.0));
            }
            cur = z;
        }
        Ok(cur)
    }

    /// Backward pass from an upstream gradient on the logits.
    ///
    /// `cache` must come from a matching [`Self::forward`] over the same `x`.
    /// Returns mean parameter gradients (the caller bakes any `1/batch`
    /// normalization into `d_logits`) and the gradient w.r.t. the input.
    pub fn backward(
        &self,
        x: ArrayView2<f64>,
        cache: &ForwardCache,
        d_logits: ArrayView2<f64>,
    ) -> Result<(Gradients, Array2<f64>)> {
        let n = self.layers.len();
        if cache.outputs.len() != n {
            return Err(NnError::DimMismatch(format!(
                "cache has {} layer outputs, network has {n} layers",
                cache.outputs.len()
            )));
        }
        if d_logits.dim() != cache.logits().dim() {
            return Err(NnError::DimMismatch("d_logits shape != logits shape".into()));
        }
        if x.nrows() != d_logits.nrows() {
            return Err(NnError::DimMismatch("stale cache: batch size mismatch".into()));
        }

        let mut d_weights = vec![Array2::zeros((0, 0)); n];
        let mut d_biases = vec![Array1::zeros(0); n];
        let mut d_cur = d_logits.to_owned();

        for i in (0..n).rev() {
            let layer = &self.layers[i];
            let y = &cache.outputs[i];
            // dZ = dY ⊙ act'(Y)
            ndarray::Zip::from(&mut d_cur).and(y).for_each(|d, &yv| {
                *d *= layer.activation.grad_from_output(yv);
            });
            let input: ArrayView2<f64> = if i == 0 { x } else { cache.outputs[i - 1].view() };
            d_weights[i] = d_cur.t().dot(&input);
            d_biases[i] = d_cur.sum_axis(Axis(0));
            if i > 0 {
                d_cur = d_cur.dot(&layer.weights);
            }
        }
        let d_input = d_cur.dot(&self.layers[0].weights);
        Ok((Gradients { d_weights, d_biases }, d_input))
    }

    pub fn sgd_step(&mut self, grads: &Gradients, lr: f64) {
        for (layer, (dw, db)) in self
            .layers
            .iter_mut()
            .zip(grads.d_weights.iter().zip(grads.d_biases.iter()))
        {
            layer.weights.scaled_add(-lr, dw);
            layer.bias.scaled_add(-lr, db);
        }
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(b"CBMDENSE")?;
        w.write_all(&1u32.to_le_bytes())?;
        w.write_all(&(self.layers.len() as u32).to_le_bytes())?;
        for l in &self.layers {
            w.write_all(&(l.in_dim() as u32).to_le_bytes())?;
            w.write_all(&(l.out_dim() as u32).to_le_bytes())?;
            w.write_all(&[match l.activation {
                Activation::Relu => 0u8,
                Activation::Identity => 1u8,
            }])?;
        }
        for l in &self.layers {
            for v in l.weights.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
            for v in l.bias.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != b"CBMDENSE" {
            return Err(NnError::Checkpoint("bad magic".into()));
        }
        let version = read_u32(r)?;
        if version != 1 {
            return Err(NnError::Checkpoint(format!("unsupported version {version}")));
        }
        let n = read_u32(r)? as usize;
        let mut shapes = Vec::with_capacity(n);
        for _ in 0..n {
            let in_dim = read_u32(r)? as usize;
            let out_dim = read_u32(r)? as usize;
            let mut act = [0u8; 1];
            r.read_exact(&mut act)?;
            let activation = match act[0] {
                0 => Activation::Relu,
                1 => Activation::Identity,
                other => return Err(NnError::Checkpoint(format!("bad activation tag {other}"))),
            };
            shapes.push((in_dim, out_dim, activation));
        }
        let mut layers = Vec::with_capacity(n);
        for (in_dim, out_dim, activation) in shapes {
            let mut wbuf = vec![0f64; in_dim * out_dim];
            read_f64s(r, &mut wbuf)?;
            let weights = Array2::from_shape_vec((out_dim, in_dim), wbuf)
                .map_err(|e| NnError::Checkpoint(e.to_string()))?;
            let mut bias = vec![0f64; out_dim];
            read_f64s(r, &mut bias)?;
            layers.push(DenseLayer { weights, bias: Array1::from_vec(bias), activation });
        }
        Self::new(layers)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64s(r: &mut impl Read, out: &mut [f64]) -> Result<()> {
    let mut b = [0u8; 8];
    for v in out {
        r.read_exact(&mut b)?;
        *v = f64::from_le_bytes(b);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Activations and losses
// ---------------------------------------------------------------------------

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid_array(z: &ArrayView1<f64>) -> Array1<f64> {
    z.mapv(sigmoid)
}

pub fn sigmoid_batch(z: &ArrayView2<f64>) -> Array2<f64> {
    z.mapv(sigmoid)
}

/// Numerically stable softmax of one logit row.
pub fn softmax(logits: ArrayView1<f64>) -> Distribution {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps = logits.mapv(|v| (v - max).exp());
    let sum: f64 = exps.sum();
    Distribution::new(exps / sum).expect("softmax yields a valid distribution")
}

/// Row-wise softmax over a batch of logits.
pub fn softmax_batch(logits: ArrayView2<f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum: f64 = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Mean categorical cross-entropy and its gradient w.r.t. the logits.
pub fn softmax_ce_loss_grad(logits: ArrayView2<f64>, labels: &[usize]) -> (f64, Array2<f64>) {
    let batch = logits.nrows();
    assert_eq!(batch, labels.len(), "labels must match batch size");
    let mut probs = softmax_batch(logits);
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        loss -= (probs[[i, y]] + PROB_EPS).ln();
    }
    loss /= batch as f64;
    for (i, &y) in labels.iter().enumerate() {
        probs[[i, y]] -= 1.0;
    }
    probs /= batch as f64;
    (loss, probs)
}

/// Mean binary cross-entropy (over batch and concepts) for sigmoid outputs,
/// with its gradient w.r.t. the logits.
pub fn bce_with_logits_loss_grad(
    logits: ArrayView2<f64>,
    targets: ArrayView2<f64>,
) -> (f64, Array2<f64>) {
    assert_eq!(logits.dim(), targets.dim(), "targets must match logits shape");
    let scale = 1.0 / (logits.nrows() * logits.ncols()) as f64;
    let mut loss = 0.0;
    let mut grad = Array2::zeros(logits.raw_dim());
    ndarray::Zip::from(&mut grad)
        .and(logits)
        .and(targets)
        .for_each(|g, &z, &t| {
            // ln(1 + e^{-|z|}) + max(z, 0) - z·t  is the stable BCE form.
            loss += (1.0 + (-z.abs()).exp()).ln() + z.max(0.0) - z * t;
            *g = (sigmoid(z) - t) * scale;
        });
    (loss * scale, grad)
}

// ---------------------------------------------------------------------------
// Distributions, entropy, KL
// ---------------------------------------------------------------------------

/// A categorical probability distribution: non-negative entries summing to 1
/// (within [`DIST_SUM_TOL`]).
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution(Array1<f64>);

impl Distribution {
    pub fn new(probs: Array1<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(NnError::InvalidDistribution("empty".into()));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(NnError::InvalidDistribution("negative or non-finite entry".into()));
        }
        let sum: f64 = probs.sum();
        if (sum - 1.0).abs() > DIST_SUM_TOL {
            return Err(NnError::InvalidDistribution(format!("sum {sum} != 1")));
        }
        Ok(Self(probs))
    }

    pub fn probs(&self) -> &Array1<f64> {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.0.iter().enumerate() {
            if p > self.0[best] {
                best = i;
            }
        }
        best
    }

    /// Mean of several distributions of equal length, renormalized.
    pub fn mean(dists: &[Distribution]) -> Result<Self> {
        if dists.is_empty() {
            return Err(NnError::InvalidDistribution("mean of zero distributions".into()));
        }
        let mut acc = Array1::<f64>::zeros(dists[0].len());
        for d in dists {
            if d.len() != acc.len() {
                return Err(NnError::DimMismatch("distribution lengths differ".into()));
            }
            acc += d.probs();
        }
        let sum: f64 = acc.sum();
        Self::new(acc / sum)
    }

    fn smoothed(&self) -> Array1<f64> {
        let m = self.0.len() as f64;
        self.0.mapv(|p| (p + PROB_EPS) / (1.0 + m * PROB_EPS))
    }
}

/// Shannon entropy in nats, with epsilon smoothing.
pub fn entropy(p: &Distribution) -> f64 {
    let sp = p.smoothed();
    -sp.iter().map(|&v| v * v.ln()).sum::<f64>()
}

/// `KL(p ‖ q)` in nats; both arguments are epsilon-smoothed, and float-level
/// negatives are clamped to zero.
pub fn kl_divergence(p: &Distribution, q: &Distribution) -> f64 {
    assert_eq!(p.len(), q.len(), "KL needs equal-length distributions");
    let (sp, sq) = (p.smoothed(), q.smoothed());
    let kl: f64 = sp.iter().zip(sq.iter()).map(|(&a, &b)| a * (a / b).ln()).sum();
    kl.max(0.0)
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// Supervision for [`sgd_train`]: binary targets use sigmoid + BCE, class
/// labels use softmax + cross-entropy.
#[derive(Clone, Copy)]
pub enum Targets<'a> {
    Binary(ArrayView2<'a, f64>),
    Classes(&'a [usize]),
}

impl Targets<'_> {
    fn len(&self) -> usize {
        match self {
            Targets::Binary(t) => t.nrows(),
            Targets::Classes(y) => y.len(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FitOptions {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub params: DenseParams,
    /// Epoch whose validation error was best (0 = the initial parameters).
    pub best_epoch: usize,
    pub best_val_error: f64,
}

/// Classification error of `params` on `(x, targets)`: mean thresholded
/// per-entry error for binary targets, misclassification rate for classes.
pub fn eval_error(params: &DenseParams, x: ArrayView2<f64>, targets: Targets) -> Result<f64> {
    let cache = params.forward(x)?;
    let logits = cache.logits();
    match targets {
        Targets::Binary(t) => {
            let mut wrong = 0usize;
            ndarray::Zip::from(logits).and(t).for_each(|&z, &tv| {
                let pred = if z >= 0.0 { 1.0 } else { 0.0 };
                if pred != tv {
                    wrong += 1;
                }
            });
            Ok(wrong as f64 / (logits.nrows() * logits.ncols()) as f64)
        }
        Targets::Classes(y) => {
            let mut wrong = 0usize;
            for (row, &label) in logits.rows().into_iter().zip(y.iter()) {
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                if best != label {
                    wrong += 1;
                }
            }
            Ok(wrong as f64 / y.len() as f64)
        }
    }
}

/// Mini-batch SGD with per-epoch reshuffling and best-validation selection.
///
/// Returns the parameter snapshot of the epoch with the lowest validation
/// error (the initial parameters count as epoch 0, so `lr = 0` returns them
/// unchanged). A non-finite training loss aborts with [`NnError::Diverged`].
pub fn sgd_train(
    init: &DenseParams,
    train_x: ArrayView2<f64>,
    train_t: Targets,
    val_x: ArrayView2<f64>,
    val_t: Targets,
    opts: &FitOptions,
    rng: &mut impl Rng,
) -> Result<FitOutcome> {
    if opts.lr < 0.0 || !opts.lr.is_finite() {
        return Err(NnError::InvalidParam(format!("lr must be finite and >= 0, got {}", opts.lr)));
    }
    if opts.batch_size == 0 {
        return Err(NnError::InvalidParam("batch_size must be >= 1".into()));
    }
    if train_x.nrows() != train_t.len() {
        return Err(NnError::DimMismatch("training targets must match inputs".into()));
    }

    let n = train_x.nrows();
    let mut params = init.clone();
    let mut best = FitOutcome {
        params: params.clone(),
        best_epoch: 0,
        best_val_error: eval_error(&params, val_x, val_t)?,
    };

    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 1..=opts.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(opts.batch_size) {
            let xb = train_x.select(Axis(0), chunk);
            let cache = params.forward(xb.view())?;
            let (loss, d_logits) = match train_t {
                Targets::Binary(t) => {
                    let tb = t.select(Axis(0), chunk);
                    bce_with_logits_loss_grad(cache.logits().view(), tb.view())
                }
                Targets::Classes(y) => {
                    let yb: Vec<usize> = chunk.iter().map(|&i| y[i]).collect();
                    softmax_ce_loss_grad(cache.logits().view(), &yb)
                }
            };
            if !loss.is_finite() {
                return Err(NnError::Diverged { lr: opts.lr, epoch });
            }
            let (grads, _) = params.backward(xb.view(), &cache, d_logits.view())?;
            params.sgd_step(&grads, opts.lr);
        }
        let val_error = eval_error(&params, val_x, val_t)?;
        if val_error < best.best_val_error {
            best = FitOutcome { params: params.clone(), best_epoch: epoch, best_val_error: val_error };
        }
    }
    Ok(best)
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn zero_params_give_zero_logits() {
        let params = DenseParams::new(vec![DenseLayer {
            weights: Array2::zeros((3, 2)),
            bias: Array1::zeros(3),
            activation: Activation::Identity,
        }])
        .unwrap();
        let x = array![[1.5, -2.0]];
        let out = params.forward(x.view()).unwrap();
        assert!(out.logits().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let params = DenseParams::new(vec![DenseLayer {
            weights: Array2::eye(3),
            bias: Array1::zeros(3),
            activation: Activation::Identity,
        }])
        .unwrap();
        let x = array![[0.3, -1.2, 7.0]];
        let out = params.forward(x.view()).unwrap();
        assert_eq!(out.logits(), &x);
    }

    #[test]
    fn forward_rejects_dim_mismatch() {
        let mut r = rng(0);
        let params = DenseParams::init_mlp(&[4, 3], &mut r).unwrap();
        let x = Array2::<f64>::zeros((2, 5));
        assert!(matches!(params.forward(x.view()), Err(NnError::DimMismatch(_))));
    }

    #[test]
    fn linear_layer_squared_loss_gradient_matches_closed_form() {
        // L = ||Wx - t||², upstream dL/dy = 2(Wx - t); expect dW = 2(Wx-t)xᵀ.
        let mut r = rng(7);
        let params = DenseParams::init_mlp(&[3, 2], &mut r).unwrap();
        let x = array![[0.5, -1.0, 2.0]];
        let t = array![0.3, -0.7];
        let cache = params.forward(x.view()).unwrap();
        let y = cache.logits().row(0).to_owned();
        let d_logits = (&y - &t).mapv(|v| 2.0 * v).insert_axis(Axis(0));
        let (grads, _) = params.backward(x.view(), &cache, d_logits.view()).unwrap();

        for i in 0..2 {
            for j in 0..3 {
                let expect = 2.0 * (y[i] - t[i]) * x[[0, j]];
                assert!((grads.d_weights[0][[i, j]] - expect).abs() < 1e-12);
            }
        }
    }

    /// Central-difference loss gradient, the independent oracle for backward().
    fn numeric_grads(
        params: &DenseParams,
        x: ArrayView2<f64>,
        targets: Targets,
        eps: f64,
    ) -> Vec<Array2<f64>> {
        let loss_of = |p: &DenseParams| -> f64 {
            let cache = p.forward(x).unwrap();
            match targets {
                Targets::Binary(t) => bce_with_logits_loss_grad(cache.logits().view(), t).0,
                Targets::Classes(y) => softmax_ce_loss_grad(cache.logits().view(), y).0,
            }
        };
        let mut out = Vec::new();
        for li in 0..params.layers().len() {
            let shape = params.layers()[li].weights.raw_dim();
            let mut dw = Array2::zeros(shape);
            for i in 0..dw.nrows() {
                for j in 0..dw.ncols() {
                    let mut plus = params.clone();
                    plus.layers_mut()[li].weights[[i, j]] += eps;
                    let mut minus = params.clone();
                    minus.layers_mut()[li].weights[[i, j]] -= eps;
                    dw[[i, j]] = (loss_of(&plus) - loss_of(&minus)) / (2.0 * eps);
                }
            }
            out.push(dw);
        }
        out
    }

    fn max_rel_error(analytic: &Array2<f64>, numeric: &Array2<f64>) -> f64 {
        let mut worst: f64 = 0.0;
        ndarray::Zip::from(analytic).and(numeric).for_each(|&a, &n| {
            let scale = a.abs().max(n.abs()).max(1e-6);
            worst = worst.max((a - n).abs() / scale);
        });
        worst
    }

    #[test]
    fn gradients_match_finite_differences_over_random_draws() {
        // Both loss heads, 20 random parameter draws, <= 1e-3 relative error.
        for seed in 0..20u64 {
            let mut r = rng(seed);
            let params = DenseParams::init_mlp(&[4, 6, 6, 3], &mut r).unwrap();
            let x = Array2::from_shape_fn((5, 4), |_| r.random_range(-1.0..1.0));

            let labels: Vec<usize> = (0..5).map(|_| r.random_range(0..3)).collect();
            let cache = params.forward(x.view()).unwrap();
            let (_, d_logits) = softmax_ce_loss_grad(cache.logits().view(), &labels);
            let (grads, _) = params.backward(x.view(), &cache, d_logits.view()).unwrap();
            let numeric = numeric_grads(&params, x.view(), Targets::Classes(&labels), 1e-5);
            for (a, n) in grads.d_weights.iter().zip(&numeric) {
                assert!(max_rel_error(a, n) <= 1e-3, "CE gradient check failed (seed {seed})");
            }

            let targets = Array2::from_shape_fn((5, 3), |_| f64::from(u32::from(r.random::<bool>())));
            let (_, d_logits) = bce_with_logits_loss_grad(cache.logits().view(), targets.view());
            let (grads, _) = params.backward(x.view(), &cache, d_logits.view()).unwrap();
            let numeric = numeric_grads(&params, x.view(), Targets::Binary(targets.view()), 1e-5);
            for (a, n) in grads.d_weights.iter().zip(&numeric) {
                assert!(max_rel_error(a, n) <= 1e-3, "BCE gradient check failed (seed {seed})");
            }
        }
    }

    #[test]
    fn directional_derivative_matches_finite_difference() {
        let mut r = rng(11);
        let params = DenseParams::init_mlp(&[4, 5, 2], &mut r).unwrap();
        let labels = vec![1usize, 0, 1];
        let x = Array2::from_shape_fn((3, 4), |_| r.random_range(-1.0..1.0));
        let dir = Array2::from_shape_fn((3, 4), |_| r.random_range(-1.0..1.0));

        let cache = params.forward(x.view()).unwrap();
        let (_, d_logits) = softmax_ce_loss_grad(cache.logits().view(), &labels);
        let (_, d_input) = params.backward(x.view(), &cache, d_logits.view()).unwrap();
        let analytic: f64 = (&d_input * &dir).sum();

        let eps = 1e-5;
        let loss_at = |shift: f64| {
            let xs = &x + &(&dir * shift);
            let c = params.forward(xs.view()).unwrap();
            softmax_ce_loss_grad(c.logits().view(), &labels).0
        };
        let numeric = (loss_at(eps) - loss_at(-eps)) / (2.0 * eps);
        assert!(
            (analytic - numeric).abs() / numeric.abs().max(1e-6) < 1e-4,
            "directional derivative mismatch: {analytic} vs {numeric}"
        );
    }

    #[test]
    fn entropy_of_one_hot_is_zero() {
        let p = Distribution::new(array![1.0, 0.0, 0.0]).unwrap();
        assert!(entropy(&p).abs() < 1e-8);
    }

    #[test]
    fn entropy_of_uniform_is_ln_m() {
        for m in [2usize, 5, 17] {
            let p = Distribution::new(Array1::from_elem(m, 1.0 / m as f64)).unwrap();
            assert!((entropy(&p) - (m as f64).ln()).abs() < 1e-9);
        }
    }

    #[test]
    fn entropy_matches_direct_evaluation() {
        let p = Distribution::new(array![0.9, 0.1]).unwrap();
        assert!((entropy(&p) - 0.3251).abs() < 5e-5);
    }

    #[test]
    fn kl_of_identical_distributions_is_zero() {
        let p = Distribution::new(array![0.2, 0.3, 0.5]).unwrap();
        assert!(kl_divergence(&p, &p).abs() < 1e-12);
    }

    #[test]
    fn kl_matches_direct_evaluation() {
        let p = Distribution::new(array![0.9, 0.1]).unwrap();
        let q = Distribution::new(array![0.5, 0.5]).unwrap();
        assert!((kl_divergence(&p, &q) - 0.3681).abs() < 5e-5);
    }

    /// Unsmoothed reference implementations for the agreement check.
    fn naive_entropy(p: &[f64]) -> f64 {
        -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
    }

    fn naive_kl(p: &[f64], q: &[f64]) -> f64 {
        p.iter().zip(q).filter(|(&a, _)| a > 0.0).map(|(&a, &b)| a * (a / b).ln()).sum()
    }

    #[test]
    fn entropy_and_kl_agree_with_naive_implementation() {
        let mut r = rng(3);
        for _ in 0..50 {
            let raw = Array1::from_shape_fn(10, |_| r.random_range(0.5..1.5));
            let p = Distribution::new(&raw / raw.sum()).unwrap();
            let raw = Array1::from_shape_fn(10, |_| r.random_range(0.5..1.5));
            let q = Distribution::new(&raw / raw.sum()).unwrap();
            assert!((entropy(&p) - naive_entropy(p.probs().as_slice().unwrap())).abs() < 1e-10);
            assert!(
                (kl_divergence(&p, &q)
                    - naive_kl(p.probs().as_slice().unwrap(), q.probs().as_slice().unwrap()))
                .abs()
                    < 1e-10
            );
        }
    }

    #[test]
    fn softmax_handles_extreme_logits() {
        for scale in [-50.0, 50.0] {
            let mut r = rng(9);
            let logits = Array1::from_shape_fn(8, |_| r.random_range(-1.0..1.0) * scale);
            let d = softmax(logits.view());
            assert!((d.probs().sum() - 1.0).abs() < DIST_SUM_TOL);
            assert!(d.probs().iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn sgd_with_zero_lr_leaves_parameters_unchanged() {
        let mut r = rng(21);
        let init = DenseParams::init_mlp(&[3, 4, 2], &mut r).unwrap();
        let x = Array2::from_shape_fn((8, 3), |_| r.random_range(-1.0..1.0));
        let y: Vec<usize> = (0..8).map(|i| i % 2).collect();
        let out = sgd_train(
            &init,
            x.view(),
            Targets::Classes(&y),
            x.view(),
            Targets::Classes(&y),
            &FitOptions { lr: 0.0, epochs: 3, batch_size: 4 },
            &mut r,
        )
        .unwrap();
        for (a, b) in out.params.layers().iter().zip(init.layers()) {
            assert_eq!(a.weights, b.weights);
            assert_eq!(a.bias, b.bias);
        }
    }

    #[test]
    fn sgd_drives_separable_toy_problem_to_zero_error() {
        // Two well-separated Gaussian blobs in 2D.
        let mut r = rng(5);
        let n = 60;
        let mut x = Array2::zeros((n, 2));
        let mut y = vec![0usize; n];
        for i in 0..n {
            let class = i % 2;
            let center = if class == 0 { -2.0 } else { 2.0 };
            x[[i, 0]] = center + r.random_range(-0.5..0.5);
            x[[i, 1]] = center + r.random_range(-0.5..0.5);
            y[i] = class;
        }
        let init = DenseParams::init_mlp(&[2, 8, 2], &mut r).unwrap();
        let out = sgd_train(
            &init,
            x.view(),
            Targets::Classes(&y),
            x.view(),
            Targets::Classes(&y),
            &FitOptions { lr: 0.1, epochs: 50, batch_size: 16 },
            &mut r,
        )
        .unwrap();
        let err = eval_error(&out.params, x.view(), Targets::Classes(&y)).unwrap();
        assert_eq!(err, 0.0, "separable toy set should reach zero training error");
    }

    #[test]
    fn sgd_is_deterministic_for_fixed_seed() {
        let make = || {
            let mut r = rng(33);
            let init = DenseParams::init_mlp(&[3, 5, 2], &mut r).unwrap();
            let x = Array2::from_shape_fn((20, 3), |_| r.random_range(-1.0..1.0));
            let y: Vec<usize> = (0..20).map(|i| i % 2).collect();
            sgd_train(
                &init,
                x.view(),
                Targets::Classes(&y),
                x.view(),
                Targets::Classes(&y),
                &FitOptions { lr: 0.05, epochs: 10, batch_size: 7 },
                &mut r,
            )
            .unwrap()
        };
        let (a, b) = (make(), make());
        for (la, lb) in a.params.layers().iter().zip(b.params.layers()) {
            assert_eq!(la.weights, lb.weights);
            assert_eq!(la.bias, lb.bias);
        }
    }

    #[test]
    fn divergence_is_reported_with_lr() {
        let mut r = rng(2);
        let init = DenseParams::init_mlp(&[2, 4, 2], &mut r).unwrap();
        let x = Array2::from_shape_fn((16, 2), |_| r.random_range(-1.0..1.0) * 100.0);
        let y: Vec<usize> = (0..16).map(|i| i % 2).collect();
        let res = sgd_train(
            &init,
            x.view(),
            Targets::Classes(&y),
            x.view(),
            Targets::Classes(&y),
            &FitOptions { lr: 1e6, epochs: 20, batch_size: 4 },
            &mut r,
        );
        match res {
            Err(NnError::Diverged { lr, .. }) => assert_eq!(lr, 1e6),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let mut r = rng(14);
        let params = DenseParams::init_mlp(&[5, 7, 3], &mut r).unwrap();
        let mut buf = Vec::new();
        params.write_to(&mut buf).unwrap();
        let loaded = DenseParams::read_from(&mut buf.as_slice()).unwrap();
        for (a, b) in params.layers().iter().zip(loaded.layers()) {
            assert_eq!(a.weights, b.weights);
            assert_eq!(a.bias, b.bias);
            assert_eq!(a.activation, b.activation);
        }
    }
}
