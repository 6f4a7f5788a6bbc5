//! Concept bottleneck models.
//!
//! A model is a concept predictor `g` (MLP from inputs to concept logits) and
//! a target predictor `f` (a single linear layer from some concept
//! representation to class logits). The four training strategies differ in
//! what `f` sees during training:
//!
//! - `ind`: `g` and `f` fit independently; `f` takes ground-truth concepts.
//! - `seq`: `g` first, then `f` on `g`'s soft (sigmoid) outputs.
//! - `jnt`: one joint objective `L_y + λ·L_c`; `f` consumes concept *logits*.
//! - `jnt+p`: as `jnt` but `f` consumes sigmoid probabilities.
//!
//! The model records which input space `f` was trained on so that inference
//! and intervention never feed probabilities to a logits-trained `f`.
//!
//! Learning-rate selection is a grid search (best validation error per
//! network); diverging learning rates are skipped and recorded, and training
//! fails only if every candidate diverges.

use crate::datagen::{ConceptDataset, SplitDataset};
use crate::nncore::{
    self, bce_with_logits_loss_grad, sigmoid, softmax, softmax_ce_loss_grad, DenseParams,
    Distribution, FitOptions, NnError, Targets,
};
use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::str::FromStr;

#[derive(Debug, thiserror::Error)]
pub enum CbmError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("every learning rate diverged: {0:?}")]
    AllDiverged(Vec<f64>),
    #[error("invalid training setup: {0}")]
    Invalid(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CbmError>;

// ---------------------------------------------------------------------------
// Enums
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Ind,
    Seq,
    Jnt,
    #[serde(rename = "jnt+p")]
    JntP,
}

impl FromStr for Strategy {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "ind" => Ok(Strategy::Ind),
            "seq" => Ok(Strategy::Seq),
            "jnt" => Ok(Strategy::Jnt),
            "jnt+p" | "jntp" | "jnt_p" => Ok(Strategy::JntP),
            other => Err(format!("unknown training strategy '{other}'")),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Strategy::Ind => "ind",
            Strategy::Seq => "seq",
            Strategy::Jnt => "jnt",
            Strategy::JntP => "jnt+p",
        })
    }
}

/// How concept predictions are presented to `f` at inference time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Conceptualization {
    Soft,
    Hard,
    Samp,
}

impl FromStr for Conceptualization {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "soft" => Ok(Conceptualization::Soft),
            "hard" => Ok(Conceptualization::Hard),
            "samp" => Ok(Conceptualization::Samp),
            other => Err(format!("unknown conceptualization '{other}'")),
        }
    }
}

impl std::fmt::Display for Conceptualization {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Conceptualization::Soft => "soft",
            Conceptualization::Hard => "hard",
            Conceptualization::Samp => "samp",
        })
    }
}

/// The input space `f` was trained on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConceptSpace {
    /// Values in `[0, 1]` (ind/seq/jnt+p).
    Probs,
    /// Raw concept logits (jnt).
    Logits,
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

/// Outcome of the learning-rate grid search, kept for provenance.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub lr_g: Option<f64>,
    pub lr_f: Option<f64>,
    pub val_error_g: Option<f64>,
    pub val_error_f: Option<f64>,
    /// Learning rates that diverged during the grid search.
    pub diverged: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct CbmModel {
    /// Input (dim k) → concept logits (dim `k_eff`).
    pub g: DenseParams,
    /// Concept representation (dim `k_eff`) → class logits (dim M).
    pub f: DenseParams,
    pub strategy: Strategy,
    pub lambda: f64,
    pub concept_space: ConceptSpace,
    /// Original concept indices the model's concept layer covers (accounts
    /// for hidden concepts).
    pub active_concepts: Vec<usize>,
    pub report: TrainReport,
}

/// Concept predictor outputs for one example.
#[derive(Debug, Clone)]
pub struct ConceptPrediction {
    /// Sigmoid probabilities, elementwise `sigmoid(logits)`.
    pub soft: Array1<f64>,
    pub logits: Array1<f64>,
}

impl CbmModel {
    pub fn k_eff(&self) -> usize {
        self.g.output_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.f.output_dim()
    }

    /// Deterministic concept prediction for one example.
    pub fn predict_concepts(&self, x: ArrayView1<f64>) -> Result<ConceptPrediction> {
        let logits = self.g.forward_one(x)?;
        let soft = logits.mapv(sigmoid);
        Ok(ConceptPrediction { soft, logits })
    }

    /// Batched concept prediction: returns `(soft, logits)` matrices.
    pub fn predict_concepts_batch(
        &self,
        x: ndarray::ArrayView2<f64>,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        let cache = self.g.forward(x)?;
        let logits = cache.logits().clone();
        let soft = logits.mapv(sigmoid);
        Ok((soft, logits))
    }

    /// The concept vectors fed to `f` for a given conceptualization, in the
    /// space `f` was trained on (soft uses logits for a logits-trained `f`).
    pub fn representation(
        &self,
        cp: &ConceptPrediction,
        mode: Conceptualization,
        m: usize,
        rng: &mut impl Rng,
    ) -> Vec<Array1<f64>> {
        match mode {
            Conceptualization::Soft => match self.concept_space {
                ConceptSpace::Probs => vec![cp.soft.clone()],
                ConceptSpace::Logits => vec![cp.logits.clone()],
            },
            _ => conceptualize(cp, mode, m, rng),
        }
    }

    /// Target distribution from one or more concept vectors (an ensemble for
    /// `samp`): softmax per vector, mean, renormalize.
    pub fn predict_target(&self, vectors: &[Array1<f64>]) -> Result<Distribution> {
        if vectors.is_empty() {
            return Err(CbmError::Invalid("predict_target needs at least one vector".into()));
        }
        let mut dists = Vec::with_capacity(vectors.len());
        for v in vectors {
            let logits = self.f.forward_one(v.view())?;
            dists.push(softmax(logits.view()));
        }
        Ok(Distribution::mean(&dists)?)
    }

    /// Checkpoint: magic, JSON metadata (strategy, λ, concept space, active
    /// concepts, train report), then the two parameter blocks.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        #[derive(Serialize)]
        struct Meta<'a> {
            strategy: Strategy,
            lambda: f64,
            concept_space: ConceptSpace,
            active_concepts: &'a [usize],
            report: &'a TrainReport,
        }
        w.write_all(b"CBMMODEL")?;
        let meta = serde_json::to_vec(&Meta {
            strategy: self.strategy,
            lambda: self.lambda,
            concept_space: self.concept_space,
            active_concepts: &self.active_concepts,
            report: &self.report,
        })?;
        w.write_all(&(meta.len() as u32).to_le_bytes())?;
        w.write_all(&meta)?;
        self.g.write_to(w)?;
        self.f.write_to(w)?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        #[derive(Deserialize)]
        struct Meta {
            strategy: Strategy,
            lambda: f64,
            concept_space: ConceptSpace,
            active_concepts: Vec<usize>,
            report: TrainReport,
        }
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != b"CBMMODEL" {
            return Err(CbmError::Checkpoint("bad magic".into()));
        }
        let mut len = [0u8; 4];
        r.read_exact(&mut len)?;
        let mut meta = vec![0u8; u32::from_le_bytes(len) as usize];
        r.read_exact(&mut meta)?;
        let meta: Meta = serde_json::from_slice(&meta)?;
        let g = DenseParams::read_from(r)?;
        let f = DenseParams::read_from(r)?;
        Ok(CbmModel {
            g,
            f,
            strategy: meta.strategy,
            lambda: meta.lambda,
            concept_space: meta.concept_space,
            active_concepts: meta.active_concepts,
            report: meta.report,
        })
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

/// Spec-level conceptualization of a concept prediction: `soft` passes the
/// probabilities through, `hard` thresholds at 0.5 (boundary maps to 1), and
/// `samp` draws `m` Bernoulli vectors from the soft scores.
pub fn conceptualize(
    cp: &ConceptPrediction,
    mode: Conceptualization,
    m: usize,
    rng: &mut impl Rng,
) -> Vec<Array1<f64>> {
    match mode {
        Conceptualization::Soft => vec![cp.soft.clone()],
        Conceptualization::Hard => {
            vec![cp.soft.mapv(|p| if p >= 0.5 { 1.0 } else { 0.0 })]
        }
        Conceptualization::Samp => (0..m.max(1))
            .map(|_| cp.soft.mapv(|p| f64::from(u8::from(rng.random::<f64>() < p))))
            .collect(),
    }
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// Training hyperparameters. The learning-rate grid, constant schedule and
/// λ = 0.1 follow the synthetic-experiment recipe; epochs/batch size are
/// configuration, not architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub strategy: Strategy,
    pub lrs: Vec<f64>,
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Hidden layer sizes of `g`.
    pub hidden: Vec<usize>,
    /// Skip the grid and train `g` (or the joint run) at this rate.
    pub pinned_lr_g: Option<f64>,
    /// Skip the grid and train `f` at this rate.
    pub pinned_lr_f: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Ind,
            lrs: vec![0.01, 0.1, 1.0],
            lambda: 0.1,
            epochs: 100,
            batch_size: 64,
            hidden: vec![100, 100],
            pinned_lr_g: None,
            pinned_lr_f: None,
        }
    }
}

impl TrainConfig {
    fn grid_g(&self) -> Vec<f64> {
        self.pinned_lr_g.map(|l| vec![l]).unwrap_or_else(|| self.lrs.clone())
    }

    fn grid_f(&self) -> Vec<f64> {
        self.pinned_lr_f.map(|l| vec![l]).unwrap_or_else(|| self.lrs.clone())
    }

    /// The configuration a later run uses to retrain at this model's winning
    /// learning rates without re-searching.
    pub fn pinned_to(&self, report: &TrainReport) -> TrainConfig {
        TrainConfig {
            pinned_lr_g: report.lr_g.or(self.pinned_lr_g),
            pinned_lr_f: report.lr_f.or(self.pinned_lr_f),
            ..self.clone()
        }
    }
}

/// Ground-truth concepts of the active (non-hidden) columns as f64.
pub fn concept_targets(ds: &ConceptDataset) -> Array2<f64> {
    let active = ds.active_concepts();
    let mut out = Array2::zeros((ds.n(), active.len()));
    for (e, mut row) in out.rows_mut().into_iter().enumerate() {
        for (j, &i) in active.iter().enumerate() {
            row[j] = f64::from(ds.concepts[[e, i]]);
        }
    }
    out
}

struct GridFit {
    outcome: nncore::FitOutcome,
    lr: f64,
    diverged: Vec<f64>,
}

/// Grid search over learning rates with a shared initial parameter set and a
/// shared shuffle stream per candidate; diverged candidates are skipped.
#[allow(clippy::too_many_arguments)]
fn fit_grid(
    init: &DenseParams,
    train_x: ndarray::ArrayView2<f64>,
    train_t: Targets,
    val_x: ndarray::ArrayView2<f64>,
    val_t: Targets,
    lrs: &[f64],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<GridFit> {
    let shuffle_seed = rng.random::<u64>();
    let mut best: Option<(f64, nncore::FitOutcome)> = None;
    let mut diverged = Vec::new();
    for &lr in lrs {
        let mut sr = ChaCha8Rng::seed_from_u64(shuffle_seed);
        let opts = FitOptions { lr, epochs: cfg.epochs, batch_size: cfg.batch_size };
        match nncore::sgd_train(init, train_x, train_t, val_x, val_t, &opts, &mut sr) {
            Ok(out) => {
                let better = best
                    .as_ref()
                    .map(|(_, b)| out.best_val_error < b.best_val_error)
                    .unwrap_or(true);
                if better {
                    best = Some((lr, out));
                }
            }
            Err(NnError::Diverged { lr, .. }) => diverged.push(lr),
            Err(e) => return Err(e.into()),
        }
    }
    match best {
        Some((lr, outcome)) => Ok(GridFit { outcome, lr, diverged }),
        None => Err(CbmError::AllDiverged(diverged)),
    }
}

/// Trains a CBM on a split dataset under the configured strategy.
pub fn train(cfg: &TrainConfig, split: &SplitDataset, rng: &mut ChaCha8Rng) -> Result<CbmModel> {
    if split.train.n() == 0 || split.val.n() == 0 {
        return Err(CbmError::Invalid("empty train or validation shard".into()));
    }
    if matches!(cfg.strategy, Strategy::Jnt | Strategy::JntP) && cfg.lambda <= 0.0 {
        return Err(CbmError::Invalid(format!(
            "lambda must be > 0 for {}, got {}",
            cfg.strategy, cfg.lambda
        )));
    }
    let active = split.train.active_concepts();
    let k_eff = active.len();
    let num_classes = split.train.class_concepts.num_classes();
    let input_dim = split.train.inputs.ncols();

    let mut g_dims = vec![input_dim];
    g_dims.extend_from_slice(&cfg.hidden);
    g_dims.push(k_eff);

    let mut init_rng = ChaCha8Rng::seed_from_u64(rng.random::<u64>());
    let init_g = DenseParams::init_mlp(&g_dims, &mut init_rng)?;
    let init_f = DenseParams::init_mlp(&[k_eff, num_classes], &mut init_rng)?;

    let train_c = concept_targets(&split.train);
    let val_c = concept_targets(&split.val);

    match cfg.strategy {
        Strategy::Ind | Strategy::Seq => {
            let g_fit = fit_grid(
                &init_g,
                split.train.inputs.view(),
                Targets::Binary(train_c.view()),
                split.val.inputs.view(),
                Targets::Binary(val_c.view()),
                &cfg.grid_g(),
                cfg,
                rng,
            )?;
            let g = g_fit.outcome.params;

            // ind: f on ground truth; seq: f on g's soft predictions.
            let (f_train_in, f_val_in) = if cfg.strategy == Strategy::Ind {
                (train_c.clone(), val_c.clone())
            } else {
                let soft_train = g.forward(split.train.inputs.view())?.logits().mapv(sigmoid);
                let soft_val = g.forward(split.val.inputs.view())?.logits().mapv(sigmoid);
                (soft_train, soft_val)
            };
            let f_fit = fit_grid(
                &init_f,
                f_train_in.view(),
                Targets::Classes(&split.train.labels),
                f_val_in.view(),
                Targets::Classes(&split.val.labels),
                &cfg.grid_f(),
                cfg,
                rng,
            )?;

            let mut diverged = g_fit.diverged;
            diverged.extend(f_fit.diverged);
            Ok(CbmModel {
                g,
                f: f_fit.outcome.params,
                strategy: cfg.strategy,
                lambda: cfg.lambda,
                concept_space: ConceptSpace::Probs,
                active_concepts: active,
                report: TrainReport {
                    lr_g: Some(g_fit.lr),
                    lr_f: Some(f_fit.lr),
                    val_error_g: Some(g_fit.outcome.best_val_error),
                    val_error_f: Some(f_fit.outcome.best_val_error),
                    diverged,
                },
            })
        }
        Strategy::Jnt | Strategy::JntP => {
            let space = if cfg.strategy == Strategy::Jnt {
                ConceptSpace::Logits
            } else {
                ConceptSpace::Probs
            };
            let shuffle_seed = rng.random::<u64>();
            let mut best: Option<(f64, JointFit)> = None;
            let mut diverged = Vec::new();
            for &lr in &cfg.grid_g() {
                let mut sr = ChaCha8Rng::seed_from_u64(shuffle_seed);
                match fit_joint(
                    &init_g, &init_f, space, cfg, lr, split, &train_c, &mut sr,
                ) {
                    Ok(fit) => {
                        let better = best
                            .as_ref()
                            .map(|(_, b)| fit.val_error < b.val_error)
                            .unwrap_or(true);
                        if better {
                            best = Some((lr, fit));
                        }
                    }
                    Err(CbmError::Nn(NnError::Diverged { lr, .. })) => diverged.push(lr),
                    Err(e) => return Err(e),
                }
            }
            let (lr, fit) = best.ok_or(CbmError::AllDiverged(diverged.clone()))?;
            Ok(CbmModel {
                g: fit.g,
                f: fit.f,
                strategy: cfg.strategy,
                lambda: cfg.lambda,
                concept_space: space,
                active_concepts: active,
                report: TrainReport {
                    lr_g: Some(lr),
                    lr_f: Some(lr),
                    val_error_g: None,
                    val_error_f: Some(fit.val_error),
                    diverged,
                },
            })
        }
    }
}

struct JointFit {
    g: DenseParams,
    f: DenseParams,
    val_error: f64,
}

/// Joint task error of `f ∘ g` in the given concept space.
fn joint_task_error(
    g: &DenseParams,
    f: &DenseParams,
    space: ConceptSpace,
    x: ndarray::ArrayView2<f64>,
    labels: &[usize],
) -> Result<f64> {
    let zc = g.forward(x)?.logits().clone();
    let f_in = match space {
        ConceptSpace::Logits => zc,
        ConceptSpace::Probs => zc.mapv(sigmoid),
    };
    Ok(nncore::eval_error(f, f_in.view(), Targets::Classes(labels))?)
}

/// One joint training run: gradients flow from `L_y + λ·L_c` through `f` into
/// `g`; best epoch by validation task error.
#[allow(clippy::too_many_arguments)]
fn fit_joint(
    init_g: &DenseParams,
    init_f: &DenseParams,
    space: ConceptSpace,
    cfg: &TrainConfig,
    lr: f64,
    split: &SplitDataset,
    train_c: &Array2<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<JointFit> {
    let mut g = init_g.clone();
    let mut f = init_f.clone();
    let mut best = JointFit {
        g: g.clone(),
        f: f.clone(),
        val_error: joint_task_error(&g, &f, space, split.val.inputs.view(), &split.val.labels)?,
    };

    let n = split.train.n();
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 1..=cfg.epochs {
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), rng);
        for chunk in order.chunks(cfg.batch_size) {
            let xb = split.train.inputs.select(Axis(0), chunk);
            let cb = train_c.select(Axis(0), chunk);
            let yb: Vec<usize> = chunk.iter().map(|&i| split.train.labels[i]).collect();

            let g_cache = g.forward(xb.view())?;
            let zc = g_cache.logits();
            let f_in = match space {
                ConceptSpace::Logits => zc.clone(),
                ConceptSpace::Probs => zc.mapv(sigmoid),
            };
            let f_cache = f.forward(f_in.view())?;
            let (loss_y, d_flogits) = softmax_ce_loss_grad(f_cache.logits().view(), &yb);
            let (f_grads, d_fin) = f.backward(f_in.view(), &f_cache, d_flogits.view())?;

            let (loss_c, d_zc_bce) = bce_with_logits_loss_grad(zc.view(), cb.view());
            let loss = loss_y + cfg.lambda * loss_c;
            if !loss.is_finite() {
                return Err(NnError::Diverged { lr, epoch }.into());
            }

            let mut d_zc = match space {
                ConceptSpace::Logits => d_fin,
                ConceptSpace::Probs => {
                    // Chain through the sigmoid: dσ/dz = σ(1-σ).
                    let mut d = d_fin;
                    ndarray::Zip::from(&mut d).and(&f_in).for_each(|dv, &s| {
                        *dv *= s * (1.0 - s);
                    });
                    d
                }
            };
            d_zc.scaled_add(cfg.lambda, &d_zc_bce);
            let (g_grads, _) = g.backward(xb.view(), &g_cache, d_zc.view())?;

            f.sgd_step(&f_grads, lr);
            g.sgd_step(&g_grads, lr);
        }
        let val_error =
            joint_task_error(&g, &f, space, split.val.inputs.view(), &split.val.labels)?;
        if val_error < best.val_error {
            best = JointFit { g: g.clone(), f: f.clone(), val_error };
        }
    }
    Ok(best)
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{self, SyntheticSpec};
    use ndarray::array;

    fn tiny_split(spec: &SyntheticSpec) -> SplitDataset {
        datagen::generate_split(spec).unwrap()
    }

    fn fast_cfg(strategy: Strategy) -> TrainConfig {
        TrainConfig {
            strategy,
            epochs: 40,
            hidden: vec![32, 32],
            ..TrainConfig::default()
        }
    }

    fn spec16() -> SyntheticSpec {
        SyntheticSpec {
            k: 16,
            gamma: 2,
            nu: 30,
            sigma_z: 0.1,
            group_size: 4,
            seed: 5,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn hard_thresholds_at_half_with_boundary_to_one() {
        let cp = ConceptPrediction {
            soft: array![0.9, 0.2, 0.5],
            logits: array![2.2, -1.4, 0.0],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = conceptualize(&cp, Conceptualization::Hard, 1, &mut rng);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0], array![1.0, 0.0, 1.0]);
    }

    #[test]
    fn hard_is_idempotent_on_binary_vectors() {
        let cp = ConceptPrediction { soft: array![1.0, 0.0, 1.0], logits: array![9.0, -9.0, 9.0] };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let once = conceptualize(&cp, Conceptualization::Hard, 1, &mut rng);
        let cp2 = ConceptPrediction { soft: once[0].clone(), logits: once[0].clone() };
        let twice = conceptualize(&cp2, Conceptualization::Hard, 1, &mut rng);
        assert_eq!(once, twice);
    }

    #[test]
    fn samp_with_degenerate_probabilities_matches_hard() {
        let cp = ConceptPrediction { soft: array![1.0, 0.0, 1.0], logits: array![9.0, -9.0, 9.0] };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let hard = conceptualize(&cp, Conceptualization::Hard, 1, &mut rng)[0].clone();
        let samples = conceptualize(&cp, Conceptualization::Samp, 5, &mut rng);
        assert_eq!(samples.len(), 5);
        for s in samples {
            assert_eq!(s, hard);
        }
    }

    #[test]
    fn zero_f_weights_give_uniform_target() {
        let model = trained_small(Strategy::Ind);
        let mut model = model;
        for layer in model.f.layers_mut() {
            layer.weights.fill(0.0);
            layer.bias.fill(0.0);
        }
        let v = Array1::from_elem(model.k_eff(), 0.7);
        let d = model.predict_target(&[v]).unwrap();
        let m = model.num_classes() as f64;
        for &p in d.probs() {
            assert!((p - 1.0 / m).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_samples_match_single_vector_prediction() {
        let model = trained_small(Strategy::Ind);
        let v = Array1::from_elem(model.k_eff(), 0.3);
        let single = model.predict_target(std::slice::from_ref(&v)).unwrap();
        let ensemble = model.predict_target(&[v.clone(), v.clone(), v]).unwrap();
        for (a, b) in single.probs().iter().zip(ensemble.probs()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn soft_probabilities_are_strictly_inside_unit_interval() {
        let model = trained_small(Strategy::Ind);
        let spec = spec16();
        let split = tiny_split(&spec);
        for e in 0..3 {
            let cp = model.predict_concepts(split.test.inputs.row(e)).unwrap();
            assert!(cp.soft.iter().all(|&p| p > 0.0 && p < 1.0));
            for (s, z) in cp.soft.iter().zip(cp.logits.iter()) {
                assert!((s - sigmoid(*z)).abs() < 1e-15);
            }
        }
    }

    fn trained_small(strategy: Strategy) -> CbmModel {
        let spec = spec16();
        let split = tiny_split(&spec);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        train(&fast_cfg(strategy), &split, &mut rng).unwrap()
    }

    #[test]
    fn ind_training_reaches_low_error_on_clean_data() {
        let spec = spec16();
        let split = tiny_split(&spec);
        let model = trained_small(Strategy::Ind);

        // f was trained on exactly the ground-truth class patterns, so feeding
        // ground truth should classify nearly perfectly.
        let mut wrong = 0usize;
        for e in 0..split.test.n() {
            let truth: Array1<f64> =
                concept_targets(&split.test).row(e).to_owned();
            let d = model.predict_target(&[truth]).unwrap();
            if d.argmax() != split.test.labels[e] {
                wrong += 1;
            }
        }
        let err = wrong as f64 / split.test.n() as f64;
        assert!(err < 0.02, "ground-truth-concept task error {err} too high");
    }

    #[test]
    fn concept_space_bookkeeping_matches_strategy() {
        assert_eq!(trained_small(Strategy::Ind).concept_space, ConceptSpace::Probs);
        assert_eq!(trained_small(Strategy::Jnt).concept_space, ConceptSpace::Logits);
        assert_eq!(trained_small(Strategy::JntP).concept_space, ConceptSpace::Probs);
    }

    #[test]
    fn pure_noise_inputs_leave_concepts_at_base_rate() {
        // sigma_w = 0 disconnects inputs from concepts; the trained predictor
        // cannot beat the per-concept majority baseline.
        let spec = SyntheticSpec {
            k: 8,
            gamma: 2,
            nu: 40,
            sigma_w: 0.0,
            sigma_z: 0.5,
            group_size: 2,
            seed: 3,
            ..SyntheticSpec::default()
        };
        let split = tiny_split(&spec);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = TrainConfig { epochs: 30, hidden: vec![16, 16], ..TrainConfig::default() };
        let model = train(&cfg, &split, &mut rng).unwrap();

        let c_test = concept_targets(&split.test);
        let (soft, _) = model.predict_concepts_batch(split.test.inputs.view()).unwrap();
        let mut wrong = 0usize;
        ndarray::Zip::from(&soft).and(&c_test).for_each(|&p, &t| {
            if (if p >= 0.5 { 1.0 } else { 0.0 }) != t {
                wrong += 1;
            }
        });
        let model_err = wrong as f64 / c_test.len() as f64;

        // Majority baseline from the train shard.
        let c_train = concept_targets(&split.train);
        let mut base_wrong = 0usize;
        for j in 0..c_train.ncols() {
            let ones: f64 = c_train.column(j).sum();
            let majority = if ones * 2.0 >= c_train.nrows() as f64 { 1.0 } else { 0.0 };
            base_wrong += c_test.column(j).iter().filter(|&&t| t != majority).count();
        }
        let base_err = base_wrong as f64 / c_test.len() as f64;
        assert!(
            model_err >= base_err - 0.02,
            "model error {model_err} should not beat base rate {base_err} on noise"
        );
    }

    #[test]
    fn full_ground_truth_intervention_equalizes_conceptualizations() {
        let model = trained_small(Strategy::Ind);
        let spec = spec16();
        let split = tiny_split(&spec);
        let truth: Array1<f64> = concept_targets(&split.test).row(0).to_owned();
        // With every concept rectified, all three modes see the same binary vector.
        let d_soft = model.predict_target(std::slice::from_ref(&truth)).unwrap();
        let d_samp = model.predict_target(&[truth.clone(), truth.clone(), truth]).unwrap();
        for (a, b) in d_soft.probs().iter().zip(d_samp.probs()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn checkpoint_roundtrip_preserves_model() {
        let model = trained_small(Strategy::JntP);
        let mut buf = Vec::new();
        model.write_to(&mut buf).unwrap();
        let back = CbmModel::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back.strategy, Strategy::JntP);
        assert_eq!(back.concept_space, ConceptSpace::Probs);
        assert_eq!(back.lambda, model.lambda);
        assert_eq!(back.active_concepts, model.active_concepts);
        for (a, b) in model.g.layers().iter().zip(back.g.layers()) {
            assert_eq!(a.weights, b.weights);
        }
        for (a, b) in model.f.layers().iter().zip(back.f.layers()) {
            assert_eq!(a.weights, b.weights);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let a = trained_small(Strategy::Ind);
        let b = trained_small(Strategy::Ind);
        for (la, lb) in a.g.layers().iter().zip(b.g.layers()) {
            assert_eq!(la.weights, lb.weights);
        }
    }
}
