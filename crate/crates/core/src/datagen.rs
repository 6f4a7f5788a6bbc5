//! Synthetic CBM dataset generation.
//!
//! Datasets are built from a class-level concept matrix: concepts are sampled
//! group-wise so that classes within the same sub-group share a concept
//! pattern except for one negated index each, and inputs are a fixed random
//! linear map of the concepts plus Gaussian noise. Three knobs reproduce the
//! causal-graph variants: input noise (`sigma_z`), hidden concepts
//! (`hidden_frac`), and per-example concept diversity (`diversity_prob`).
//! Majority voting and per-example visibility masks support the pitfall
//! studies.
//!
//! Everything is a pure function of an explicit RNG; [`generate`] wires the
//! individual steps together from a single seed.
//!
//! # On-disk bundle
//!
//! [`save_bundle`] writes a directory of CSV files plus `meta.json`:
//! `inputs.csv`, `concepts.csv`, `labels.csv` (0-based class ids), and
//! optionally `visibility.csv`. Columns are ordered by ascending concept
//! index; `meta.json` embeds the generating spec, the hidden mask, the group
//! partition, and the minority mask, so a bundle is self-describing.

use ndarray::{Array1, Array2, Axis};
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as RandDistribution, Normal};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum DatagenError {
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("{0}")]
    Invalid(String),
    #[error("bundle: {0}")]
    Bundle(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, DatagenError>;

// ---------------------------------------------------------------------------
// Spec
// ---------------------------------------------------------------------------

/// All generation parameters. `k` doubles as the input dimensionality and the
/// class count, matching the one-class-per-concept-pattern construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    /// Concept count (= input dim = class count).
    pub k: usize,
    /// Sub-group size: classes per shared concept pattern. Must divide `k`.
    pub gamma: usize,
    /// Samples per class.
    pub nu: usize,
    /// Mean probability that a concept is zero (sparsity level).
    pub mu_alpha: f64,
    /// Std of the per-concept zero probabilities.
    pub sigma_alpha: f64,
    /// Std of the entries of the concept-to-input map.
    pub sigma_w: f64,
    /// Std of the additive input noise.
    pub sigma_z: f64,
    /// Fraction of concepts to hide from the concept layer, in `[0, 1)`.
    pub hidden_frac: f64,
    /// Probability of flipping each per-example concept value.
    pub diversity_prob: f64,
    /// Probability that a concept is visible in a given example, in `(0, 1]`.
    pub visible_prob: f64,
    /// Concepts per intervention group. Must divide `k`.
    pub group_size: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            k: 100,
            gamma: 2,
            nu: 100,
            mu_alpha: 0.8,
            sigma_alpha: 0.1,
            sigma_w: 0.1,
            sigma_z: 0.5,
            hidden_frac: 0.0,
            diversity_prob: 0.0,
            visible_prob: 1.0,
            group_size: 4,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.gamma == 0 || self.nu == 0 {
            return Err(DatagenError::InvalidSpec("k, gamma and nu must be >= 1".into()));
        }
        if !self.k.is_multiple_of(self.gamma) {
            return Err(DatagenError::InvalidSpec(format!(
                "gamma {} must divide k {}",
                self.gamma, self.k
            )));
        }
        if self.group_size == 0 || !self.k.is_multiple_of(self.group_size) {
            return Err(DatagenError::InvalidSpec(format!(
                "group_size {} must divide k {}",
                self.group_size, self.k
            )));
        }
        for (name, v) in [
            ("mu_alpha", self.mu_alpha),
            ("diversity_prob", self.diversity_prob),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(DatagenError::InvalidSpec(format!("{name} {v} outside [0, 1]")));
            }
        }
        if !(0.0..1.0).contains(&self.hidden_frac) {
            return Err(DatagenError::InvalidSpec(format!(
                "hidden_frac {} outside [0, 1)",
                self.hidden_frac
            )));
        }
        if !(self.visible_prob > 0.0 && self.visible_prob <= 1.0) {
            return Err(DatagenError::InvalidSpec(format!(
                "visible_prob {} outside (0, 1]",
                self.visible_prob
            )));
        }
        for (name, v) in [
            ("sigma_alpha", self.sigma_alpha),
            ("sigma_w", self.sigma_w),
            ("sigma_z", self.sigma_z),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(DatagenError::InvalidSpec(format!("{name} {v} must be >= 0")));
            }
        }
        Ok(())
    }

    /// Total example count before splitting.
    pub fn n(&self) -> usize {
        self.k * self.nu
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }
}

// ---------------------------------------------------------------------------
// Types
// ---------------------------------------------------------------------------

/// Per-class canonical concept values: `k` classes × `k` binary concepts.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassConceptMatrix {
    pub values: Array2<u8>,
}

impl ClassConceptMatrix {
    pub fn num_classes(&self) -> usize {
        self.values.nrows()
    }
}

/// Partition of concept indices into equal-size contiguous groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupPartition {
    pub groups: Vec<Vec<usize>>,
}

impl GroupPartition {
    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }
}

/// A fully materialized synthetic dataset.
///
/// `concepts` holds the per-example (possibly diversified) values while
/// `class_concepts` retains the pre-diversity canonical rows. `hidden_mask`
/// marks concepts removed from the concept layer: downstream modules must
/// restrict themselves to [`ConceptDataset::active_concepts`].
#[derive(Debug, Clone)]
pub struct ConceptDataset {
    pub spec: SyntheticSpec,
    /// `N × k` real inputs.
    pub inputs: Array2<f64>,
    /// `N × k` binary concepts.
    pub concepts: Array2<u8>,
    /// 0-based class ids, one per example.
    pub labels: Vec<usize>,
    pub class_concepts: ClassConceptMatrix,
    /// The fixed concept-to-input map used to produce `inputs`.
    pub input_map: Array2<f64>,
    /// Per-(example, concept) visibility; absent means everything visible.
    pub visibility: Option<Array2<u8>>,
    pub groups: Option<GroupPartition>,
    /// `hidden_mask[i]` marks concept `i` as removed from the concept layer.
    pub hidden_mask: Vec<bool>,
    /// Set by [`apply_majority_voting`]: examples whose pre-vote concept
    /// vector differed from their class majority vector.
    pub minority: Option<Vec<bool>>,
}

impl ConceptDataset {
    pub fn n(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn k(&self) -> usize {
        self.concepts.ncols()
    }

    /// Indices of concepts still present in the concept layer.
    pub fn active_concepts(&self) -> Vec<usize> {
        (0..self.k()).filter(|&i| !self.hidden_mask[i]).collect()
    }

    pub fn k_eff(&self) -> usize {
        self.hidden_mask.iter().filter(|h| !**h).count()
    }

    /// Row-subset of the dataset (shared class matrix and input map).
    pub fn subset(&self, idx: &[usize]) -> ConceptDataset {
        ConceptDataset {
            spec: self.spec.clone(),
            inputs: self.inputs.select(Axis(0), idx),
            concepts: self.concepts.select(Axis(0), idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            class_concepts: self.class_concepts.clone(),
            input_map: self.input_map.clone(),
            visibility: self.visibility.as_ref().map(|v| v.select(Axis(0), idx)),
            groups: self.groups.clone(),
            hidden_mask: self.hidden_mask.clone(),
            minority: self.minority.as_ref().map(|m| idx.iter().map(|&i| m[i]).collect()),
        }
    }
}

/// 70/15/15 shards of one dataset.
#[derive(Debug, Clone)]
pub struct SplitDataset {
    pub train: ConceptDataset,
    pub val: ConceptDataset,
    pub test: ConceptDataset,
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

/// Samples the class-level concept matrix.
///
/// Per sub-group: draw one binary pattern (concept `i` is 1 with probability
/// `1 - p_i`, where `p_i ~ N(mu_alpha, sigma_alpha)` clamped to `[0, 1]`),
/// then give each class in the group the pattern with exactly one distinct
/// index negated.
pub fn sample_class_concepts(
    spec: &SyntheticSpec,
    rng: &mut impl Rng,
) -> Result<ClassConceptMatrix> {
    spec.validate()?;
    let k = spec.k;
    let normal = Normal::new(spec.mu_alpha, spec.sigma_alpha)
        .map_err(|e| DatagenError::InvalidSpec(e.to_string()))?;
    let p: Vec<f64> = (0..k).map(|_| normal.sample(rng).clamp(0.0, 1.0)).collect();

    let mut values = Array2::<u8>::zeros((k, k));
    for group in 0..k / spec.gamma {
        let pattern: Vec<u8> = p
            .iter()
            .map(|&pi| u8::from(rng.random::<f64>() >= pi))
            .collect();
        let flips = sample_indices(rng, k, spec.gamma);
        for (y, flip_idx) in flips.iter().enumerate() {
            let class = group * spec.gamma + y;
            for i in 0..k {
                values[[class, i]] = if i == flip_idx { 1 - pattern[i] } else { pattern[i] };
            }
        }
    }
    Ok(ClassConceptMatrix { values })
}

/// Draws the shared input map `W` (entries `N(0, sigma_w)`) and `nu` inputs
/// per class as `x = W·c + z`, `z ~ N(0, sigma_z)` per coordinate. Each
/// example's concepts start as its class row.
pub fn sample_inputs(
    cc: &ClassConceptMatrix,
    spec: &SyntheticSpec,
    rng: &mut impl Rng,
) -> Result<ConceptDataset> {
    spec.validate()?;
    let k = spec.k;
    if cc.values.dim() != (k, k) {
        return Err(DatagenError::Invalid(format!(
            "class matrix is {:?}, spec expects ({k}, {k})",
            cc.values.dim()
        )));
    }
    let w_normal = Normal::new(0.0, spec.sigma_w)
        .map_err(|e| DatagenError::InvalidSpec(e.to_string()))?;
    let input_map = Array2::from_shape_fn((k, k), |_| w_normal.sample(rng));

    let n = spec.n();
    let mut inputs = Array2::zeros((n, k));
    let mut concepts = Array2::zeros((n, k));
    let mut labels = Vec::with_capacity(n);
    let z_normal = Normal::new(0.0, spec.sigma_z)
        .map_err(|e| DatagenError::InvalidSpec(e.to_string()))?;

    for class in 0..k {
        let c_row = cc.values.row(class);
        let c_real: Array1<f64> = c_row.mapv(f64::from);
        let clean = input_map.dot(&c_real);
        for s in 0..spec.nu {
            let row = class * spec.nu + s;
            for i in 0..k {
                inputs[[row, i]] = clean[i] + z_normal.sample(rng);
                concepts[[row, i]] = c_row[i];
            }
            labels.push(class);
        }
    }

    Ok(ConceptDataset {
        spec: spec.clone(),
        inputs,
        concepts,
        labels,
        class_concepts: cc.clone(),
        input_map,
        visibility: None,
        groups: None,
        hidden_mask: vec![false; k],
        minority: None,
    })
}

/// Hides `⌊h·k⌋` concepts chosen uniformly without replacement. Labels and
/// inputs are untouched; the hidden columns simply disappear from the concept
/// layer for every downstream consumer.
pub fn apply_hidden_concepts(
    mut ds: ConceptDataset,
    h: f64,
    rng: &mut impl Rng,
) -> Result<ConceptDataset> {
    if !(0.0..1.0).contains(&h) {
        return Err(DatagenError::Invalid(format!("hidden fraction {h} outside [0, 1)")));
    }
    if ds.hidden_mask.iter().any(|&m| m) {
        return Err(DatagenError::Invalid("dataset already has hidden concepts".into()));
    }
    let k = ds.k();
    let count = (h * k as f64).floor() as usize;
    if count >= k {
        return Err(DatagenError::Invalid("cannot hide every concept".into()));
    }
    for idx in sample_indices(rng, k, count).iter() {
        ds.hidden_mask[idx] = true;
    }
    Ok(ds)
}

/// Flips every (example, concept) entry independently with probability `d`,
/// then regenerates inputs as `W·c + z` from the flipped concepts so the
/// diverse-concept causal graph (concepts cause inputs) holds. The canonical
/// `class_concepts` are retained; `d = 0` is the identity.
pub fn apply_concept_diversity(
    mut ds: ConceptDataset,
    d: f64,
    rng: &mut impl Rng,
) -> Result<ConceptDataset> {
    if !(0.0..=1.0).contains(&d) {
        return Err(DatagenError::Invalid(format!("diversity probability {d} outside [0, 1]")));
    }
    if d == 0.0 {
        return Ok(ds);
    }
    let z_normal = Normal::new(0.0, ds.spec.sigma_z)
        .map_err(|e| DatagenError::InvalidSpec(e.to_string()))?;
    for mut row in ds.concepts.rows_mut() {
        for v in row.iter_mut() {
            if rng.random::<f64>() < d {
                *v = 1 - *v;
            }
        }
    }
    for e in 0..ds.n() {
        let c_real: Array1<f64> = ds.concepts.row(e).mapv(f64::from);
        let clean = ds.input_map.dot(&c_real);
        for i in 0..ds.k() {
            ds.inputs[[e, i]] = clean[i] + z_normal.sample(rng);
        }
    }
    Ok(ds)
}

/// Replaces every example's concepts with its class majority vote over the
/// whole dataset (exact ties resolve to 1) and records which examples
/// disagreed with their majority vector in [`ConceptDataset::minority`].
pub fn apply_majority_voting(mut ds: ConceptDataset) -> ConceptDataset {
    let k = ds.k();
    let num_classes = ds.class_concepts.num_classes();
    let mut ones = vec![vec![0usize; k]; num_classes];
    let mut counts = vec![0usize; num_classes];
    for (e, &label) in ds.labels.iter().enumerate() {
        counts[label] += 1;
        for (slot, &c) in ones[label].iter_mut().zip(ds.concepts.row(e)) {
            *slot += usize::from(c);
        }
    }
    let mut majority = Array2::<u8>::zeros((num_classes, k));
    for class in 0..num_classes {
        for i in 0..k {
            // Ties (exactly half ones) resolve to 1.
            majority[[class, i]] = u8::from(2 * ones[class][i] >= counts[class].max(1));
        }
    }

    let mut minority = vec![false; ds.n()];
    for (e, &label) in ds.labels.iter().enumerate() {
        let differs = (0..k).any(|i| ds.concepts[[e, i]] != majority[[label, i]]);
        minority[e] = differs;
        for i in 0..k {
            ds.concepts[[e, i]] = majority[[label, i]];
        }
    }
    ds.minority = Some(minority);
    ds
}

/// Marks each (example, concept) pair visible independently with probability
/// `visible_prob`; invisible concepts are "void" for intervention.
pub fn assign_visibility(
    mut ds: ConceptDataset,
    visible_prob: f64,
    rng: &mut impl Rng,
) -> Result<ConceptDataset> {
    if !(visible_prob > 0.0 && visible_prob <= 1.0) {
        return Err(DatagenError::Invalid(format!(
            "visible_prob {visible_prob} outside (0, 1]"
        )));
    }
    let vis = Array2::from_shape_fn((ds.n(), ds.k()), |_| {
        u8::from(rng.random::<f64>() < visible_prob)
    });
    ds.visibility = Some(vis);
    Ok(ds)
}

/// Disjoint uniform-random 70/15/15 shards. The train share rounds half-up,
/// validation takes `⌊0.15·N⌋`, and the test shard absorbs the remainder
/// (so N=10 splits 7/1/2).
pub fn split(ds: &ConceptDataset, rng: &mut impl Rng) -> Result<SplitDataset> {
    let n = ds.n();
    if n < 10 {
        return Err(DatagenError::Invalid(format!("need at least 10 examples, have {n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let n_train = (0.7 * n as f64 + 0.5).floor() as usize;
    let n_val = (0.15 * n as f64).floor() as usize;
    let (train_idx, rest) = order.split_at(n_train);
    let (val_idx, test_idx) = rest.split_at(n_val);
    Ok(SplitDataset {
        train: ds.subset(train_idx),
        val: ds.subset(val_idx),
        test: ds.subset(test_idx),
    })
}

/// Contiguous equal-size concept groups `[0..g), [g..2g), …`.
pub fn assign_groups(k: usize, group_size: usize) -> Result<GroupPartition> {
    if group_size == 0 || !k.is_multiple_of(group_size) {
        return Err(DatagenError::Invalid(format!(
            "group_size {group_size} must divide k {k}"
        )));
    }
    let groups = (0..k / group_size)
        .map(|g| (g * group_size..(g + 1) * group_size).collect())
        .collect();
    Ok(GroupPartition { groups })
}

fn generate_with_rng(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Result<ConceptDataset> {
    spec.validate()?;
    let cc = sample_class_concepts(spec, rng)?;
    let mut ds = sample_inputs(&cc, spec, rng)?;
    if spec.diversity_prob > 0.0 {
        ds = apply_concept_diversity(ds, spec.diversity_prob, rng)?;
    }
    if spec.hidden_frac > 0.0 {
        ds = apply_hidden_concepts(ds, spec.hidden_frac, rng)?;
    }
    if spec.visible_prob < 1.0 {
        ds = assign_visibility(ds, spec.visible_prob, rng)?;
    }
    ds.groups = Some(assign_groups(spec.k, spec.group_size)?);
    Ok(ds)
}

/// Runs the whole generation pipeline from `spec.seed`: class concepts,
/// inputs, diversity flips, hidden concepts, visibility, and the group
/// partition. Identical specs yield bit-identical datasets.
pub fn generate(spec: &SyntheticSpec) -> Result<ConceptDataset> {
    let mut rng = spec.rng();
    generate_with_rng(spec, &mut rng)
}

const SPLIT_SALT: u64 = 0x53504C4954; // "SPLIT"

/// The canonical shard assignment stream for a spec. Derived from the seed
/// alone so that a dataset reloaded from disk splits exactly like the one
/// produced by [`generate_split`].
pub fn split_rng(spec: &SyntheticSpec) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(spec.seed ^ SPLIT_SALT)
}

/// [`generate`] followed by the canonical [`split`].
pub fn generate_split(spec: &SyntheticSpec) -> Result<SplitDataset> {
    let ds = generate(spec)?;
    split_canonical(&ds)
}

/// Splits with the canonical per-spec stream from [`split_rng`].
pub fn split_canonical(ds: &ConceptDataset) -> Result<SplitDataset> {
    split(ds, &mut split_rng(&ds.spec))
}

// ---------------------------------------------------------------------------
// Bundle serialization
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct BundleMeta {
    spec: SyntheticSpec,
    n: usize,
    k: usize,
    /// Class ids in labels.csv are 0-based.
    label_base: usize,
    /// CSV columns are ordered by ascending concept index.
    column_order: String,
    hidden_mask: Vec<bool>,
    groups: Option<GroupPartition>,
    minority: Option<Vec<bool>>,
    has_visibility: bool,
}

fn write_f64_csv(path: &Path, header_prefix: &str, m: &Array2<f64>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let header: Vec<String> = (0..m.ncols()).map(|i| format!("{header_prefix}{i}")).collect();
    writeln!(f, "{}", header.join(","))?;
    for row in m.rows() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        writeln!(f, "{}", cells.join(","))?;
    }
    Ok(())
}

fn write_u8_csv(path: &Path, header_prefix: &str, m: &Array2<u8>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let header: Vec<String> = (0..m.ncols()).map(|i| format!("{header_prefix}{i}")).collect();
    writeln!(f, "{}", header.join(","))?;
    for row in m.rows() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        writeln!(f, "{}", cells.join(","))?;
    }
    Ok(())
}

fn read_csv_rows(path: &Path) -> Result<Vec<Vec<String>>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut rows = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if i == 0 || line.is_empty() {
            continue; // header
        }
        rows.push(line.split(',').map(str::to_owned).collect());
    }
    Ok(rows)
}

/// Writes the dataset as a self-describing directory bundle.
pub fn save_bundle(ds: &ConceptDataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let meta = BundleMeta {
        spec: ds.spec.clone(),
        n: ds.n(),
        k: ds.k(),
        label_base: 0,
        column_order: "concept index ascending".into(),
        hidden_mask: ds.hidden_mask.clone(),
        groups: ds.groups.clone(),
        minority: ds.minority.clone(),
        has_visibility: ds.visibility.is_some(),
    };
    std::fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    write_f64_csv(&dir.join("inputs.csv"), "x", &ds.inputs)?;
    write_u8_csv(&dir.join("concepts.csv"), "c", &ds.concepts)?;
    write_u8_csv(&dir.join("class_concepts.csv"), "c", &ds.class_concepts.values)?;
    write_f64_csv(&dir.join("input_map.csv"), "w", &ds.input_map)?;
    {
        let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("labels.csv"))?);
        writeln!(f, "label")?;
        for &y in &ds.labels {
            writeln!(f, "{y}")?;
        }
    }
    if let Some(vis) = &ds.visibility {
        write_u8_csv(&dir.join("visibility.csv"), "v", vis)?;
    }
    Ok(())
}

/// Reads a bundle written by [`save_bundle`].
pub fn load_bundle(dir: &Path) -> Result<ConceptDataset> {
    let meta: BundleMeta =
        serde_json::from_str(&std::fs::read_to_string(dir.join("meta.json"))?)?;
    let parse_f64 = |rows: Vec<Vec<String>>, cols: usize| -> Result<Array2<f64>> {
        let mut m = Array2::zeros((rows.len(), cols));
        for (i, row) in rows.iter().enumerate() {
            if row.len() != cols {
                return Err(DatagenError::Bundle(format!("row {i} has {} cells, want {cols}", row.len())));
            }
            for (j, cell) in row.iter().enumerate() {
                m[[i, j]] = cell
                    .parse::<f64>()
                    .map_err(|e| DatagenError::Bundle(format!("row {i} col {j}: {e}")))?;
            }
        }
        Ok(m)
    };
    let parse_u8 = |rows: Vec<Vec<String>>, cols: usize| -> Result<Array2<u8>> {
        let mut m = Array2::zeros((rows.len(), cols));
        for (i, row) in rows.iter().enumerate() {
            if row.len() != cols {
                return Err(DatagenError::Bundle(format!("row {i} has {} cells, want {cols}", row.len())));
            }
            for (j, cell) in row.iter().enumerate() {
                m[[i, j]] = cell
                    .parse::<u8>()
                    .map_err(|e| DatagenError::Bundle(format!("row {i} col {j}: {e}")))?;
            }
        }
        Ok(m)
    };

    let inputs = parse_f64(read_csv_rows(&dir.join("inputs.csv"))?, meta.k)?;
    let concepts = parse_u8(read_csv_rows(&dir.join("concepts.csv"))?, meta.k)?;
    let class_concepts = parse_u8(read_csv_rows(&dir.join("class_concepts.csv"))?, meta.k)?;
    let input_map = parse_f64(read_csv_rows(&dir.join("input_map.csv"))?, meta.k)?;
    let labels: Vec<usize> = read_csv_rows(&dir.join("labels.csv"))?
        .iter()
        .map(|row| row[0].parse::<usize>().map_err(|e| DatagenError::Bundle(e.to_string())))
        .collect::<Result<_>>()?;
    let visibility = if meta.has_visibility {
        Some(parse_u8(read_csv_rows(&dir.join("visibility.csv"))?, meta.k)?)
    } else {
        None
    };
    if inputs.nrows() != meta.n || labels.len() != meta.n {
        return Err(DatagenError::Bundle("row counts disagree with meta.json".into()));
    }
    Ok(ConceptDataset {
        spec: meta.spec,
        inputs,
        concepts,
        labels,
        class_concepts: ClassConceptMatrix { values: class_concepts },
        input_map,
        visibility,
        groups: meta.groups,
        hidden_mask: meta.hidden_mask,
        minority: meta.minority,
    })
}

// ---------------------------------------------------------------------------
