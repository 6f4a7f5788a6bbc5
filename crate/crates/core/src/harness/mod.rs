//! Configuration-driven experiments.
//!
//! An [`ExperimentConfig`] names a synthetic dataset, a training setup, and a
//! set of (criterion × level) intervention policies to evaluate over several
//! seeds. [`run_experiment`] wires generation → training → intervention into
//! an [`ExperimentReport`] with per-seed traces and mean/std aggregates;
//! [`sweep`] repeats that over one data axis with paired seeds, and
//! [`nvc_study`]/[`mv_fairness_study`] run the two pitfall experiments.
//!
//! Reproducibility contract: every cell is a pure function of (config, seed).
//! Data generation uses the experiment seed directly, training and evaluation
//! use streams derived from it with fixed tags, so a sweep shares data and
//! model-init randomness across axis values and curve differences isolate the
//! swept parameter. Learning rates are grid-searched once on the first seed's
//! data, then every seed retrains at the winning rates.

pub mod presets;
pub mod report;
pub mod svg;

use crate::cbm::{self, CbmModel, Conceptualization, TrainConfig};
use crate::costmodel::{self, CostParams};
use crate::datagen::{self, ConceptDataset, SplitDataset, SyntheticSpec};
use crate::intervention::{
    self, intervene_batch, intervene_single, level_token, Criterion, InterventionPolicy,
    InterventionTrace, LevelAssoc, LevelBudget, NvcMode, TieBreak,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::str::FromStr;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("unknown preset '{0}'")]
    UnknownPreset(String),
    #[error("unknown sweep axis '{0}' (expected sigma_z, hidden_frac, diversity_prob, gamma, mu_alpha or group_size)")]
    UnknownAxis(String),
    #[error(transparent)]
    Datagen(#[from] datagen::DatagenError),
    #[error(transparent)]
    Cbm(#[from] cbm::CbmError),
    #[error(transparent)]
    Intervention(#[from] intervention::InterventionError),
    #[error(transparent)]
    Cost(#[from] costmodel::CostError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// An intervention level: concept association × budget scope.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LevelPair {
    pub assoc: LevelAssoc,
    pub budget: LevelBudget,
}

impl LevelPair {
    pub const IS: LevelPair =
        LevelPair { assoc: LevelAssoc::Individual, budget: LevelBudget::Single };
    pub const GS: LevelPair = LevelPair { assoc: LevelAssoc::Group, budget: LevelBudget::Single };
    pub const IB: LevelPair =
        LevelPair { assoc: LevelAssoc::Individual, budget: LevelBudget::Batch };
    pub const GB: LevelPair = LevelPair { assoc: LevelAssoc::Group, budget: LevelBudget::Batch };

    pub fn token(&self) -> String {
        level_token(self.assoc, self.budget)
    }
}

impl FromStr for LevelPair {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().replace(['-', '_'], "+").as_str() {
            "i+s" => Ok(LevelPair::IS),
            "g+s" => Ok(LevelPair::GS),
            "i+b" => Ok(LevelPair::IB),
            "g+b" => Ok(LevelPair::GB),
            other => Err(format!("unknown level '{other}' (expected i+s, g+s, i+b or g+b)")),
        }
    }
}

/// Cost presets for the error-vs-cost transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CostConfig {
    AlphaBeta { alpha: f64, beta: f64, tau_i: f64 },
    Taus { tau_i: f64, tau_g: f64, tau_f: f64 },
    CubWallclock,
}

impl CostConfig {
    pub fn params(&self) -> Result<CostParams> {
        Ok(match *self {
            CostConfig::AlphaBeta { alpha, beta, tau_i } => {
                CostParams::from_alpha_beta(alpha, beta, tau_i)?
            }
            CostConfig::Taus { tau_i, tau_g, tau_f } => CostParams::from_taus(tau_i, tau_g, tau_f)?,
            CostConfig::CubWallclock => CostParams::cub_wallclock(),
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub name: String,
    pub data: SyntheticSpec,
    pub train: TrainConfig,
    pub conceptualization: Conceptualization,
    pub samp_m: usize,
    pub criteria: Vec<Criterion>,
    pub levels: Vec<LevelPair>,
    /// Per-example intervention budget in units; `None` means every unit.
    pub budget: Option<usize>,
    pub nvc: NvcMode,
    pub cost: Option<CostConfig>,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "default".into(),
            data: SyntheticSpec::default(),
            train: TrainConfig::default(),
            conceptualization: Conceptualization::Soft,
            samp_m: 5,
            criteria: Criterion::ALL.to_vec(),
            levels: vec![LevelPair::IS],
            budget: None,
            nvc: NvcMode::NvcO,
            cost: None,
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(HarnessError::InvalidConfig("seeds must be non-empty".into()));
        }
        if self.criteria.is_empty() || self.levels.is_empty() {
            return Err(HarnessError::InvalidConfig(
                "criteria and levels must be non-empty".into(),
            ));
        }
        if self.samp_m == 0 {
            return Err(HarnessError::InvalidConfig("samp_m must be >= 1".into()));
        }
        self.data.validate()?;
        if let Some(cost) = &self.cost {
            cost.params()?;
        }
        Ok(())
    }

    /// Stable fingerprint of the full configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        format!("{:016x}", fnv1a64(json.as_bytes()))
    }
}

pub(crate) fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Splitmix-style seed derivation so training/evaluation streams are
/// independent of each other and of execution order.
pub(crate) fn mix_seed(seed: u64, tag: u64) -> u64 {
    let mut x = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    x ^= x >> 30;
    x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

const TAG_GRID: u64 = 0x47524944; // "GRID"
const TAG_TRAIN: u64 = 0x545249; // "TRI"
const TAG_EVAL: u64 = 0x4556414C; // "EVAL"

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellResult {
    pub criterion: Criterion,
    pub level: LevelPair,
    pub seed: u64,
    pub trace: Option<InterventionTrace>,
    /// Populated instead of `trace` when the cell failed; sweeps never abort.
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AggregateStep {
    pub step: usize,
    pub units_intervened: f64,
    pub concepts_intervened: f64,
    pub mean_task_error: f64,
    pub std_task_error: f64,
    pub mean_concept_error: f64,
    pub std_concept_error: f64,
    pub n_seeds: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregateCurve {
    pub criterion: Criterion,
    pub level: LevelPair,
    pub steps: Vec<AggregateStep>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MistakeBucket {
    pub mistakes: usize,
    pub mean_task_error: f64,
    pub population: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub cells: Vec<CellResult>,
    pub aggregates: Vec<AggregateCurve>,
    /// Error-vs-concept-mistakes buckets per seed (on the test shard).
    pub mistake_curves: Vec<(u64, Vec<MistakeBucket>)>,
}

impl ExperimentReport {
    pub fn all_cells_succeeded(&self) -> bool {
        self.cells.iter().all(|c| c.error.is_none())
    }

    pub fn aggregate(&self, criterion: Criterion, level: LevelPair) -> Option<&AggregateCurve> {
        self.aggregates.iter().find(|a| a.criterion == criterion && a.level == level)
    }
}

/// Mean/std curves over the seeds that produced a trace.
pub fn aggregate_traces(traces: &[&InterventionTrace]) -> Vec<AggregateStep> {
    if traces.is_empty() {
        return Vec::new();
    }
    let n_steps = traces.iter().map(|t| t.steps.len()).min().unwrap_or(0);
    (0..n_steps)
        .map(|s| {
            let tasks: Vec<f64> = traces.iter().map(|t| t.steps[s].task_error).collect();
            let concepts: Vec<f64> = traces.iter().map(|t| t.steps[s].concept_error).collect();
            let (mt, st) = mean_std(&tasks);
            let (mc, sc) = mean_std(&concepts);
            AggregateStep {
                step: traces[0].steps[s].step,
                units_intervened: mean(traces.iter().map(|t| t.steps[s].units_intervened)),
                concepts_intervened: mean(traces.iter().map(|t| t.steps[s].concepts_intervened)),
                mean_task_error: mt,
                std_task_error: st,
                mean_concept_error: mc,
                std_concept_error: sc,
                n_seeds: traces.len(),
            }
        })
        .collect()
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

// ---------------------------------------------------------------------------
// Training plumbing
// ---------------------------------------------------------------------------

/// A trained model together with the split it was trained on.
pub struct TrainedSeed {
    pub seed: u64,
    pub split: SplitDataset,
    pub model: CbmModel,
}

fn data_spec(config: &ExperimentConfig, seed: u64) -> SyntheticSpec {
    SyntheticSpec { seed, ..config.data.clone() }
}

/// Grid-searches learning rates on the first seed's data and returns the
/// training config pinned to the winners.
pub fn select_learning_rates(config: &ExperimentConfig) -> Result<TrainConfig> {
    if config.train.pinned_lr_g.is_some() && config.train.pinned_lr_f.is_some() {
        return Ok(config.train.clone());
    }
    let seed = config.seeds[0];
    let split = datagen::generate_split(&data_spec(config, seed))?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, TAG_GRID));
    let model = cbm::train(&config.train, &split, &mut rng)?;
    Ok(config.train.pinned_to(&model.report))
}

/// Trains one model per seed (in parallel) at the given training config.
pub fn train_seeds(
    config: &ExperimentConfig,
    pinned: &TrainConfig,
) -> Vec<(u64, Result<TrainedSeed>)> {
    config
        .seeds
        .par_iter()
        .map(|&seed| {
            let run = || -> Result<TrainedSeed> {
                let split = datagen::generate_split(&data_spec(config, seed))?;
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, TAG_TRAIN));
                let model = cbm::train(pinned, &split, &mut rng)?;
                Ok(TrainedSeed { seed, split, model })
            };
            (seed, run())
        })
        .collect()
}

fn units_for(level: LevelPair, ds: &ConceptDataset) -> usize {
    match level.assoc {
        LevelAssoc::Individual => ds.k_eff(),
        LevelAssoc::Group => {
            ds.groups.as_ref().map(|g| g.num_groups()).unwrap_or_else(|| ds.k_eff())
        }
    }
}

/// Runs one (criterion, level) cell on a trained seed over `eval`.
pub fn run_cell(
    trained: &TrainedSeed,
    config: &ExperimentConfig,
    criterion: Criterion,
    level: LevelPair,
    eval: &ConceptDataset,
) -> intervention::Result<InterventionTrace> {
    let per_example = config.budget.unwrap_or(usize::MAX).min(units_for(level, eval));
    let policy = InterventionPolicy {
        criterion,
        level_assoc: level.assoc,
        level_budget: level.budget,
        budget: match level.budget {
            LevelBudget::Single => per_example,
            LevelBudget::Batch => per_example * eval.n(),
        },
        nvc: config.nvc,
        samp_m: config.samp_m,
        tie_break: TieBreak::LowestIndex,
    };
    let crit_idx = Criterion::ALL.iter().position(|&c| c == criterion).unwrap_or(0) as u64;
    let level_idx = [LevelPair::IS, LevelPair::GS, LevelPair::IB, LevelPair::GB]
        .iter()
        .position(|&l| l == level)
        .unwrap_or(0) as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(
        mix_seed(trained.seed, TAG_EVAL),
        crit_idx * 8 + level_idx,
    ));
    match level.budget {
        LevelBudget::Single => {
            intervene_single(&trained.model, eval, &policy, config.conceptualization, &mut rng)
        }
        LevelBudget::Batch => {
            intervene_batch(&trained.model, eval, &policy, config.conceptualization, &mut rng)
        }
    }
}

// ---------------------------------------------------------------------------
// Experiments
// ---------------------------------------------------------------------------

/// Runs the full experiment: per-seed training, every (criterion, level)
/// cell on the test shard, aggregation, and the mistake-bucket analysis.
/// Cell failures become error rows; the run itself only fails on invalid
/// configuration.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let pinned = select_learning_rates(config)?;
    let trained = train_seeds(config, &pinned);

    let mut cells = Vec::new();
    let mut mistake_curves = Vec::new();
    for (seed, outcome) in &trained {
        match outcome {
            Err(e) => {
                for &criterion in &config.criteria {
                    for &level in &config.levels {
                        cells.push(CellResult {
                            criterion,
                            level,
                            seed: *seed,
                            trace: None,
                            error: Some(format!("training failed: {e}")),
                        });
                    }
                }
            }
            Ok(ts) => {
                let pairs: Vec<(Criterion, LevelPair)> = config
                    .criteria
                    .iter()
                    .flat_map(|&c| config.levels.iter().map(move |&l| (c, l)))
                    .collect();
                let cell_results: Vec<CellResult> = pairs
                    .par_iter()
                    .map(|&(criterion, level)| {
                        match run_cell(ts, config, criterion, level, &ts.split.test) {
                            Ok(trace) => CellResult {
                                criterion,
                                level,
                                seed: *seed,
                                trace: Some(trace),
                                error: None,
                            },
                            Err(e) => CellResult {
                                criterion,
                                level,
                                seed: *seed,
                                trace: None,
                                error: Some(e.to_string()),
                            },
                        }
                    })
                    .collect();
                cells.extend(cell_results);
                mistake_curves.push((*seed, error_vs_concept_mistakes(&ts.model, &ts.split.test)?));
            }
        }
    }

    let mut aggregates = Vec::new();
    for &criterion in &config.criteria {
        for &level in &config.levels {
            let traces: Vec<&InterventionTrace> = cells
                .iter()
                .filter(|c| c.criterion == criterion && c.level == level)
                .filter_map(|c| c.trace.as_ref())
                .collect();
            if !traces.is_empty() {
                aggregates.push(AggregateCurve {
                    criterion,
                    level,
                    steps: aggregate_traces(&traces),
                });
            }
        }
    }

    Ok(ExperimentReport {
        config_hash: config.hash(),
        config: config.clone(),
        cells,
        aggregates,
        mistake_curves,
    })
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    SigmaZ,
    HiddenFrac,
    DiversityProb,
    Gamma,
    MuAlpha,
    GroupSize,
}

impl FromStr for SweepAxis {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "sigma_z" | "z" => Ok(SweepAxis::SigmaZ),
            "hidden_frac" | "h" => Ok(SweepAxis::HiddenFrac),
            "diversity_prob" | "d" => Ok(SweepAxis::DiversityProb),
            "gamma" => Ok(SweepAxis::Gamma),
            "mu_alpha" => Ok(SweepAxis::MuAlpha),
            "group_size" => Ok(SweepAxis::GroupSize),
            other => Err(format!("unknown sweep axis '{other}'")),
        }
    }
}

impl std::fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SweepAxis::SigmaZ => "sigma_z",
            SweepAxis::HiddenFrac => "hidden_frac",
            SweepAxis::DiversityProb => "diversity_prob",
            SweepAxis::Gamma => "gamma",
            SweepAxis::MuAlpha => "mu_alpha",
            SweepAxis::GroupSize => "group_size",
        })
    }
}

impl SweepAxis {
    pub fn apply(self, spec: &mut SyntheticSpec, value: f64) -> Result<()> {
        let as_usize = |v: f64| -> Result<usize> {
            if v.fract() != 0.0 || v < 1.0 {
                return Err(HarnessError::InvalidConfig(format!(
                    "axis {self} needs a positive integer, got {v}"
                )));
            }
            Ok(v as usize)
        };
        match self {
            SweepAxis::SigmaZ => spec.sigma_z = value,
            SweepAxis::HiddenFrac => spec.hidden_frac = value,
            SweepAxis::DiversityProb => spec.diversity_prob = value,
            SweepAxis::Gamma => spec.gamma = as_usize(value)?,
            SweepAxis::MuAlpha => spec.mu_alpha = value,
            SweepAxis::GroupSize => spec.group_size = as_usize(value)?,
        }
        Ok(())
    }
}

/// One experiment per axis value, sharing seeds (and therefore data and
/// model-init randomness) across values for paired comparison.
pub fn sweep(
    base: &ExperimentConfig,
    axis: SweepAxis,
    values: &[f64],
) -> Result<Vec<(f64, ExperimentReport)>> {
    if values.is_empty() {
        return Err(HarnessError::InvalidConfig("sweep needs at least one value".into()));
    }
    let mut out = Vec::with_capacity(values.len());
    for &value in values {
        let mut config = base.clone();
        config.name = format!("{}_{axis}={value}", base.name);
        axis.apply(&mut config.data, value)?;
        out.push((value, run_experiment(&config)?));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Analyses and pitfall studies
// ---------------------------------------------------------------------------

/// Buckets test examples by their number of wrong hard concept predictions
/// and reports mean task error per bucket (soft inference, no intervention).
/// Empty buckets are absent from the output.
pub fn error_vs_concept_mistakes(
    model: &CbmModel,
    ds: &ConceptDataset,
) -> Result<Vec<MistakeBucket>> {
    let active = ds.active_concepts();
    let (soft, logits) = model.predict_concepts_batch(ds.inputs.view())?;
    let mut buckets: std::collections::BTreeMap<usize, (usize, usize)> =
        std::collections::BTreeMap::new();
    for e in 0..ds.n() {
        let mistakes = active
            .iter()
            .enumerate()
            .filter(|&(j, &i)| u8::from(soft[[e, j]] >= 0.5) != ds.concepts[[e, i]])
            .count();
        let repr = match model.concept_space {
            cbm::ConceptSpace::Probs => soft.row(e).to_owned(),
            cbm::ConceptSpace::Logits => logits.row(e).to_owned(),
        };
        let dist = model
            .predict_target(&[repr])
            .map_err(intervention::InterventionError::from)?;
        let wrong = dist.argmax() != ds.labels[e];
        let entry = buckets.entry(mistakes).or_insert((0, 0));
        entry.0 += usize::from(wrong);
        entry.1 += 1;
    }
    Ok(buckets
        .into_iter()
        .map(|(mistakes, (wrong, population))| MistakeBucket {
            mistakes,
            mean_task_error: wrong as f64 / population as f64,
            population,
        })
        .collect())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NvcCell {
    pub criterion: Criterion,
    pub nvc: NvcMode,
    pub seed: u64,
    pub trace: Option<InterventionTrace>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NvcStudyReport {
    pub config: ExperimentConfig,
    pub config_hash: String,
    /// (seed, kept, total): how many test examples had all concepts predicted
    /// correctly.
    pub filtered: Vec<(u64, usize, usize)>,
    pub cells: Vec<NvcCell>,
    pub aggregates: Vec<(Criterion, NvcMode, Vec<AggregateStep>)>,
}

/// The void-concept pitfall experiment: filter the test shard to examples
/// whose concepts are all predicted correctly, then intervene with and
/// without nullification and compare paired curves. Under hard
/// conceptualization an intervention on a correctly predicted visible concept
/// is an exact no-op, so any error movement is attributable to void handling.
pub fn nvc_study(config: &ExperimentConfig) -> Result<NvcStudyReport> {
    config.validate()?;
    let pinned = select_learning_rates(config)?;
    let trained = train_seeds(config, &pinned);

    let mut filtered = Vec::new();
    let mut cells = Vec::new();
    for (seed, outcome) in &trained {
        match outcome {
            Err(e) => {
                for &criterion in &config.criteria {
                    for nvc in [NvcMode::NvcO, NvcMode::NvcX] {
                        cells.push(NvcCell {
                            criterion,
                            nvc,
                            seed: *seed,
                            trace: None,
                            error: Some(format!("training failed: {e}")),
                        });
                    }
                }
            }
            Ok(ts) => {
                let mut eval = ts.split.test.clone();
                if eval.visibility.is_none() {
                    // All-visible mask; nvc-o and nvc-x then coincide.
                    eval.visibility = Some(ndarray::Array2::from_elem((eval.n(), eval.k()), 1u8));
                }
                let active = eval.active_concepts();
                let (soft, _) = ts.model.predict_concepts_batch(eval.inputs.view())?;
                let keep: Vec<usize> = (0..eval.n())
                    .filter(|&e| {
                        active
                            .iter()
                            .enumerate()
                            .all(|(j, &i)| u8::from(soft[[e, j]] >= 0.5) == eval.concepts[[e, i]])
                    })
                    .collect();
                filtered.push((*seed, keep.len(), eval.n()));
                if keep.is_empty() {
                    for &criterion in &config.criteria {
                        for nvc in [NvcMode::NvcO, NvcMode::NvcX] {
                            cells.push(NvcCell {
                                criterion,
                                nvc,
                                seed: *seed,
                                trace: None,
                                error: Some("no test example has fully correct concepts".into()),
                            });
                        }
                    }
                    continue;
                }
                let eval = eval.subset(&keep);
                for &criterion in &config.criteria {
                    for nvc in [NvcMode::NvcO, NvcMode::NvcX] {
                        let cfg = ExperimentConfig { nvc, ..config.clone() };
                        let result = run_cell(ts, &cfg, criterion, LevelPair::IS, &eval);
                        cells.push(match result {
                            Ok(trace) => NvcCell {
                                criterion,
                                nvc,
                                seed: *seed,
                                trace: Some(trace),
                                error: None,
                            },
                            Err(e) => NvcCell {
                                criterion,
                                nvc,
                                seed: *seed,
                                trace: None,
                                error: Some(e.to_string()),
                            },
                        });
                    }
                }
            }
        }
    }

    let mut aggregates = Vec::new();
    for &criterion in &config.criteria {
        for nvc in [NvcMode::NvcO, NvcMode::NvcX] {
            let traces: Vec<&InterventionTrace> = cells
                .iter()
                .filter(|c| c.criterion == criterion && c.nvc == nvc)
                .filter_map(|c| c.trace.as_ref())
                .collect();
            if !traces.is_empty() {
                aggregates.push((criterion, nvc, aggregate_traces(&traces)));
            }
        }
    }

    Ok(NvcStudyReport {
        config_hash: config.hash(),
        config: config.clone(),
        filtered,
        cells,
        aggregates,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MvVariant {
    MvOn,
    MvOff,
}

impl std::fmt::Display for MvVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MvVariant::MvOn => "mv-on",
            MvVariant::MvOff => "mv-off",
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MvCell {
    pub variant: MvVariant,
    pub criterion: Criterion,
    pub seed: u64,
    pub trace: Option<InterventionTrace>,
    pub error: Option<String>,
}

/// Per-seed fairness numbers under majority-voting training.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MvFairnessRow {
    pub seed: u64,
    pub minority_n: usize,
    pub majority_n: usize,
    pub minority_error: f64,
    pub majority_error: f64,
    /// Fraction of minority test examples classified correctly while their
    /// concept prediction sides with the majority (disagreeing with their own
    /// pre-vote values) on at least one contested concept.
    pub correct_by_disagreement: f64,
    /// True when the minority shard has fewer than 10 examples.
    pub degenerate: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MvStudyReport {
    pub config: ExperimentConfig,
    pub config_hash: String,
    /// Set when `diversity_prob = 0`: voting is the identity, so the study
    /// only reports that both variants coincide.
    pub datasets_identical: bool,
    pub cells: Vec<MvCell>,
    pub aggregates: Vec<(MvVariant, Criterion, Vec<AggregateStep>)>,
    pub fairness: Vec<MvFairnessRow>,
}

/// The majority-voting pitfall experiment: train with and without per-class
/// vote coalescing on a diverse-concept dataset, compare intervention curves,
/// and split baseline error by the minority mask.
pub fn mv_fairness_study(config: &ExperimentConfig) -> Result<MvStudyReport> {
    config.validate()?;
    if config.data.diversity_prob == 0.0 {
        // No diversity means voting is the identity: verify and report.
        let ds = datagen::generate(&data_spec(config, config.seeds[0]))?;
        let voted = datagen::apply_majority_voting(ds.clone());
        let identical = voted.concepts == ds.concepts;
        return Ok(MvStudyReport {
            config_hash: config.hash(),
            config: config.clone(),
            datasets_identical: identical,
            cells: Vec::new(),
            aggregates: Vec::new(),
            fairness: Vec::new(),
        });
    }

    // Pin learning rates per variant on the first seed.
    let pin_for = |variant: MvVariant| -> Result<TrainConfig> {
        if config.train.pinned_lr_g.is_some() && config.train.pinned_lr_f.is_some() {
            return Ok(config.train.clone());
        }
        let ds = datagen::generate(&data_spec(config, config.seeds[0]))?;
        let ds = match variant {
            MvVariant::MvOn => datagen::apply_majority_voting(ds),
            MvVariant::MvOff => ds,
        };
        let split = datagen::split_canonical(&ds)?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seeds[0], TAG_GRID));
        let model = cbm::train(&config.train, &split, &mut rng)?;
        Ok(config.train.pinned_to(&model.report))
    };
    let pinned_on = pin_for(MvVariant::MvOn)?;
    let pinned_off = pin_for(MvVariant::MvOff)?;

    struct SeedRun {
        seed: u64,
        on: TrainedSeed,
        off: TrainedSeed,
    }

    let runs: Vec<(u64, Result<SeedRun>)> = config
        .seeds
        .par_iter()
        .map(|&seed| {
            let run = || -> Result<SeedRun> {
                let ds = datagen::generate(&data_spec(config, seed))?;
                let voted = datagen::apply_majority_voting(ds.clone());
                let split_off = datagen::split_canonical(&ds)?;
                let split_on = datagen::split_canonical(&voted)?;
                let mut rng_on = ChaCha8Rng::seed_from_u64(mix_seed(seed, TAG_TRAIN));
                let model_on = cbm::train(&pinned_on, &split_on, &mut rng_on)?;
                let mut rng_off = ChaCha8Rng::seed_from_u64(mix_seed(seed, TAG_TRAIN));
                let model_off = cbm::train(&pinned_off, &split_off, &mut rng_off)?;
                Ok(SeedRun {
                    seed,
                    on: TrainedSeed { seed, split: split_on, model: model_on },
                    off: TrainedSeed { seed, split: split_off, model: model_off },
                })
            };
            (seed, run())
        })
        .collect();

    let mut cells = Vec::new();
    let mut fairness = Vec::new();
    for (seed, run) in &runs {
        match run {
            Err(e) => {
                for variant in [MvVariant::MvOn, MvVariant::MvOff] {
                    for &criterion in &config.criteria {
                        cells.push(MvCell {
                            variant,
                            criterion,
                            seed: *seed,
                            trace: None,
                            error: Some(format!("training failed: {e}")),
                        });
                    }
                }
            }
            Ok(run) => {
                for (variant, ts) in [(MvVariant::MvOn, &run.on), (MvVariant::MvOff, &run.off)] {
                    for &criterion in &config.criteria {
                        let result = run_cell(ts, config, criterion, LevelPair::IS, &ts.split.test);
                        cells.push(match result {
                            Ok(trace) => MvCell {
                                variant,
                                criterion,
                                seed: run.seed,
                                trace: Some(trace),
                                error: None,
                            },
                            Err(e) => MvCell {
                                variant,
                                criterion,
                                seed: run.seed,
                                trace: None,
                                error: Some(e.to_string()),
                            },
                        });
                    }
                }
                fairness.push(mv_fairness_row(run.seed, &run.on, &run.off)?);
            }
        }
    }

    let mut aggregates = Vec::new();
    for variant in [MvVariant::MvOn, MvVariant::MvOff] {
        for &criterion in &config.criteria {
            let traces: Vec<&InterventionTrace> = cells
                .iter()
                .filter(|c| c.variant == variant && c.criterion == criterion)
                .filter_map(|c| c.trace.as_ref())
                .collect();
            if !traces.is_empty() {
                aggregates.push((variant, criterion, aggregate_traces(&traces)));
            }
        }
    }

    Ok(MvStudyReport {
        config_hash: config.hash(),
        config: config.clone(),
        datasets_identical: false,
        cells,
        aggregates,
        fairness,
    })
}

/// Baseline (no-intervention) fairness numbers for one seed: error split by
/// the minority mask under mv-on, and the correct-by-disagreement fraction.
fn mv_fairness_row(seed: u64, on: &TrainedSeed, off: &TrainedSeed) -> Result<MvFairnessRow> {
    let test_on = &on.split.test;
    let test_off = &off.split.test;
    let minority = test_on
        .minority
        .clone()
        .ok_or_else(|| HarnessError::InvalidConfig("mv-on test shard lacks minority mask".into()))?;

    let (soft, _) = on.model.predict_concepts_batch(test_on.inputs.view())?;
    let mut min_wrong = 0usize;
    let mut min_n = 0usize;
    let mut maj_wrong = 0usize;
    let mut maj_n = 0usize;
    let mut correct_by_disagreement = 0usize;
    for e in 0..test_on.n() {
        let repr = vec![soft.row(e).to_owned()];
        let dist =
            on.model.predict_target(&repr).map_err(intervention::InterventionError::from)?;
        let wrong = dist.argmax() != test_on.labels[e];
        if minority[e] {
            min_n += 1;
            min_wrong += usize::from(wrong);
            if !wrong {
                // Contested concepts: where the example's own pre-vote value
                // differs from the voted value. Both variants split with the
                // same canonical stream, so row e lines up across shards.
                let disagrees = (0..test_on.k()).any(|i| {
                    test_off.concepts[[e, i]] != test_on.concepts[[e, i]]
                        && u8::from(soft[[e, i]] >= 0.5) != test_off.concepts[[e, i]]
                });
                correct_by_disagreement += usize::from(disagrees);
            }
        } else {
            maj_n += 1;
            maj_wrong += usize::from(wrong);
        }
    }

    Ok(MvFairnessRow {
        seed,
        minority_n: min_n,
        majority_n: maj_n,
        minority_error: if min_n == 0 { 0.0 } else { min_wrong as f64 / min_n as f64 },
        majority_error: if maj_n == 0 { 0.0 } else { maj_wrong as f64 / maj_n as f64 },
        correct_by_disagreement: if min_n == 0 {
            0.0
        } else {
            correct_by_disagreement as f64 / min_n as f64
        },
        degenerate: min_n < 10,
    })
}
