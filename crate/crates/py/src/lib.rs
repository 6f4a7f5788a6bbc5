//! Python bindings for the CBM laboratory.
//!
//! Exposes the main types and operations — synthetic data generation, model
//! training, test-time intervention, and the cost model — as a `cbmlab`
//! extension module. Build with `cargo build --release -p cbm-py`; the
//! `python/smoke_test.py` script shows how to load the resulting cdylib
//! without any packaging step.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use std::path::PathBuf;
use std::str::FromStr;

use cbm_core::cbm::{self, Conceptualization, Strategy, TrainConfig};
use cbm_core::costmodel;
use cbm_core::datagen::{self, SyntheticSpec};
use cbm_core::intervention::{
    intervene_batch, intervene_single, Criterion, InterventionPolicy, LevelBudget, NvcMode,
    TieBreak,
};
use cbm_core::nncore;
use cbm_core::harness::LevelPair;
use ndarray::Array1;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Generation parameters for a synthetic dataset.
#[pyclass(name = "SyntheticSpec")]
struct PySyntheticSpec {
    inner: SyntheticSpec,
}

#[pymethods]
impl PySyntheticSpec {
    #[new]
    #[pyo3(signature = (
        k=100, gamma=2, nu=100, mu_alpha=0.8, sigma_alpha=0.1, sigma_w=0.1, sigma_z=0.5,
        hidden_frac=0.0, diversity_prob=0.0, visible_prob=1.0, group_size=4, seed=0
    ))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        k: usize,
        gamma: usize,
        nu: usize,
        mu_alpha: f64,
        sigma_alpha: f64,
        sigma_w: f64,
        sigma_z: f64,
        hidden_frac: f64,
        diversity_prob: f64,
        visible_prob: f64,
        group_size: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let inner = SyntheticSpec {
            k,
            gamma,
            nu,
            mu_alpha,
            sigma_alpha,
            sigma_w,
            sigma_z,
            hidden_frac,
            diversity_prob,
            visible_prob,
            group_size,
            seed,
        };
        inner.validate().map_err(err)?;
        Ok(Self { inner })
    }

    /// Total number of examples (k * nu).
    fn n(&self) -> usize {
        self.inner.n()
    }

    fn __repr__(&self) -> String {
        format!(
            "SyntheticSpec(k={}, gamma={}, nu={}, sigma_z={}, hidden_frac={}, diversity_prob={}, seed={})",
            self.inner.k,
            self.inner.gamma,
            self.inner.nu,
            self.inner.sigma_z,
            self.inner.hidden_frac,
            self.inner.diversity_prob,
            self.inner.seed
        )
    }
}

/// A materialized synthetic dataset.
#[pyclass(name = "Dataset")]
struct PyDataset {
    inner: datagen::ConceptDataset,
}

#[pymethods]
impl PyDataset {
    fn n(&self) -> usize {
        self.inner.n()
    }

    fn k(&self) -> usize {
        self.inner.k()
    }

    /// Concepts still present in the concept layer.
    fn k_eff(&self) -> usize {
        self.inner.k_eff()
    }

    fn labels(&self) -> Vec<usize> {
        self.inner.labels.clone()
    }

    fn input_row(&self, e: usize) -> PyResult<Vec<f64>> {
        if e >= self.inner.n() {
            return Err(PyValueError::new_err(format!("row {e} out of range")));
        }
        Ok(self.inner.inputs.row(e).to_vec())
    }

    fn concept_row(&self, e: usize) -> PyResult<Vec<u8>> {
        if e >= self.inner.n() {
            return Err(PyValueError::new_err(format!("row {e} out of range")));
        }
        Ok(self.inner.concepts.row(e).to_vec())
    }

    /// Examples whose concepts differ from their class majority vote, once
    /// `majority_voting` has run.
    fn minority_mask(&self) -> Option<Vec<bool>> {
        self.inner.minority.clone()
    }

    /// Write the dataset as a CSV + JSON bundle directory.
    fn save(&self, path: PathBuf) -> PyResult<()> {
        datagen::save_bundle(&self.inner, &path).map_err(err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: datagen::load_bundle(&path).map_err(err)? })
    }

    fn __repr__(&self) -> String {
        format!("Dataset(n={}, k={}, k_eff={})", self.n(), self.k(), self.k_eff())
    }
}

/// Generate a dataset from a spec (deterministic in the spec's seed).
#[pyfunction]
fn generate(spec: &PySyntheticSpec) -> PyResult<PyDataset> {
    Ok(PyDataset { inner: datagen::generate(&spec.inner).map_err(err)? })
}

/// Replace every example's concepts by its class majority vote.
#[pyfunction]
fn majority_voting(ds: &PyDataset) -> PyDataset {
    PyDataset { inner: datagen::apply_majority_voting(ds.inner.clone()) }
}

/// A trained concept bottleneck model.
#[pyclass(name = "Model")]
struct PyModel {
    inner: cbm::CbmModel,
}

#[pymethods]
impl PyModel {
    fn strategy(&self) -> String {
        self.inner.strategy.to_string()
    }

    fn k_eff(&self) -> usize {
        self.inner.k_eff()
    }

    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    /// Chosen learning rates `(g, f)` from the grid search.
    fn learning_rates(&self) -> (Option<f64>, Option<f64>) {
        (self.inner.report.lr_g, self.inner.report.lr_f)
    }

    /// Soft concept probabilities for one input vector.
    fn predict_concepts(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        let x = Array1::from_vec(x);
        let cp = self.inner.predict_concepts(x.view()).map_err(err)?;
        Ok(cp.soft.to_vec())
    }

    /// Class distribution for one input vector under soft conceptualization.
    fn predict_target(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        let x = Array1::from_vec(x);
        let cp = self.inner.predict_concepts(x.view()).map_err(err)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let repr = self.inner.representation(&cp, Conceptualization::Soft, 1, &mut rng);
        let dist = self.inner.predict_target(&repr).map_err(err)?;
        Ok(dist.probs().to_vec())
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: cbm::CbmModel::load(&path).map_err(err)? })
    }

    fn __repr__(&self) -> String {
        format!("Model(strategy={}, k_eff={}, classes={})", self.strategy(), self.k_eff(), self.num_classes())
    }
}

/// Train a CBM on the dataset's canonical 70/15/15 split.
#[pyfunction]
#[pyo3(signature = (ds, strategy="ind", epochs=100, lambda_=0.1, seed=0))]
fn train(ds: &PyDataset, strategy: &str, epochs: usize, lambda_: f64, seed: u64) -> PyResult<PyModel> {
    let split = datagen::split_canonical(&ds.inner).map_err(err)?;
    let cfg = TrainConfig {
        strategy: Strategy::from_str(strategy).map_err(err)?,
        epochs,
        lambda: lambda_,
        ..TrainConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(PyModel { inner: cbm::train(&cfg, &split, &mut rng).map_err(err)? })
}

/// One intervention trace: task/concept error per intervention step.
#[pyclass(name = "Trace")]
struct PyTrace {
    inner: cbm_core::intervention::InterventionTrace,
}

#[pymethods]
impl PyTrace {
    /// `(step, units_intervened, concepts_intervened, task_error, concept_error)` rows.
    fn steps(&self) -> Vec<(usize, f64, f64, f64, f64)> {
        self.inner
            .steps
            .iter()
            .map(|s| {
                (s.step, s.units_intervened, s.concepts_intervened, s.task_error, s.concept_error)
            })
            .collect()
    }

    fn task_errors(&self) -> Vec<f64> {
        self.inner.steps.iter().map(|s| s.task_error).collect()
    }

    /// Theoretical `(n_g, n_f)` pass counts for the criterion.
    fn pass_counts(&self) -> (u64, u64) {
        (self.inner.n_g_passes, self.inner.n_f_passes)
    }

    fn __repr__(&self) -> String {
        format!(
            "Trace(criterion={}, steps={}, baseline={:.4}, final={:.4})",
            self.inner.criterion,
            self.inner.steps.len(),
            self.inner.steps.first().map(|s| s.task_error).unwrap_or(f64::NAN),
            self.inner.steps.last().map(|s| s.task_error).unwrap_or(f64::NAN),
        )
    }
}

/// Run an intervention trace over the dataset's canonical test shard.
#[pyfunction]
#[pyo3(signature = (
    model, ds, criterion="ucp", level="i+s", budget=None, conceptualization="soft",
    nvc_nullify=true, samp_m=5, seed=0
))]
#[allow(clippy::too_many_arguments)]
fn intervene(
    model: &PyModel,
    ds: &PyDataset,
    criterion: &str,
    level: &str,
    budget: Option<usize>,
    conceptualization: &str,
    nvc_nullify: bool,
    samp_m: usize,
    seed: u64,
) -> PyResult<PyTrace> {
    let split = datagen::split_canonical(&ds.inner).map_err(err)?;
    let test = &split.test;
    let criterion = Criterion::from_str(criterion).map_err(err)?;
    let level = LevelPair::from_str(level).map_err(err)?;
    let conceptualization = Conceptualization::from_str(conceptualization).map_err(err)?;
    let units = match level.assoc {
        cbm_core::intervention::LevelAssoc::Individual => test.k_eff(),
        cbm_core::intervention::LevelAssoc::Group => {
            test.groups.as_ref().map(|g| g.num_groups()).unwrap_or(test.k_eff())
        }
    };
    let per_example = budget.unwrap_or(units).min(units);
    let policy = InterventionPolicy {
        criterion,
        level_assoc: level.assoc,
        level_budget: level.budget,
        budget: match level.budget {
            LevelBudget::Single => per_example,
            LevelBudget::Batch => per_example * test.n(),
        },
        nvc: if nvc_nullify { NvcMode::NvcO } else { NvcMode::NvcX },
        samp_m,
        tie_break: TieBreak::LowestIndex,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let trace = match level.budget {
        LevelBudget::Single => {
            intervene_single(&model.inner, test, &policy, conceptualization, &mut rng)
        }
        LevelBudget::Batch => {
            intervene_batch(&model.inner, test, &policy, conceptualization, &mut rng)
        }
    }
    .map_err(err)?;
    Ok(PyTrace { inner: trace })
}

/// Theoretical `(n_g, n_f)` pass counts for a criterion at `k` concepts.
#[pyfunction]
fn pass_counts(criterion: &str, k: usize) -> PyResult<(u64, u64)> {
    let criterion = Criterion::from_str(criterion).map_err(err)?;
    let pc = costmodel::pass_counts(criterion, k);
    Ok((pc.n_g, pc.n_f))
}

/// Total intervention cost at `n` concepts under the ratio parametrization.
#[pyfunction]
#[pyo3(signature = (criterion, k, n, alpha=1.0, beta=100.0, tau_i=1.0))]
fn cumulative_cost(
    criterion: &str,
    k: usize,
    n: f64,
    alpha: f64,
    beta: f64,
    tau_i: f64,
) -> PyResult<f64> {
    let criterion = Criterion::from_str(criterion).map_err(err)?;
    let params = costmodel::CostParams::from_alpha_beta(alpha, beta, tau_i).map_err(err)?;
    Ok(costmodel::cumulative_cost(criterion, k, n, &params))
}

/// Shannon entropy (nats) of a probability vector.
#[pyfunction]
fn entropy(probs: Vec<f64>) -> PyResult<f64> {
    let d = nncore::Distribution::new(Array1::from_vec(probs)).map_err(err)?;
    Ok(nncore::entropy(&d))
}

/// Kullback-Leibler divergence KL(p || q) in nats.
#[pyfunction]
fn kl_divergence(p: Vec<f64>, q: Vec<f64>) -> PyResult<f64> {
    let p = nncore::Distribution::new(Array1::from_vec(p)).map_err(err)?;
    let q = nncore::Distribution::new(Array1::from_vec(q)).map_err(err)?;
    Ok(nncore::kl_divergence(&p, &q))
}

#[pymodule]
#[pyo3(name = "cbmlab")]
fn cbmlab_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySyntheticSpec>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyTrace>()?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(majority_voting, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(intervene, m)?)?;
    m.add_function(wrap_pyfunction!(pass_counts, m)?)?;
    m.add_function(wrap_pyfunction!(cumulative_cost, m)?)?;
    m.add_function(wrap_pyfunction!(entropy, m)?)?;
    m.add_function(wrap_pyfunction!(kl_divergence, m)?)?;
    Ok(())
}
