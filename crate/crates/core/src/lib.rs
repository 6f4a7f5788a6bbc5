//! A desk-scale laboratory for concept bottleneck models (CBMs).
//!
//! A CBM predicts in two stages: a concept predictor `g` maps an input to
//! human-interpretable binary concepts, and a target predictor `f` maps those
//! concepts to a class distribution. At test time a user can *intervene* on a
//! subset of the predicted concepts, replacing them with ground-truth values,
//! and re-predict the target. This crate implements the full intervention
//! procedure on controlled synthetic data:
//!
//! - [`datagen`] — synthetic dataset generation from causal graphs (input
//!   noise, hidden concepts, diverse concepts), plus majority-voting and
//!   visibility transforms used by the pitfall studies.
//! - [`nncore`] — dense-network numerics: forward/backward passes, SGD, and
//!   the entropy/KL primitives used by the selection criteria.
//! - [`cbm`] — the concept and target predictors, four training strategies
//!   (ind/seq/jnt/jnt+p) and three conceptualization modes (soft/hard/samp).
//! - [`intervention`] — six concept-selection criteria, individual/group and
//!   single/batch intervention levels, and void-concept handling.
//! - [`costmodel`] — theoretical cost accounting for each criterion and the
//!   alpha/beta cost parametrization.
//! - [`harness`] — configuration-driven experiments, sweeps, pitfall studies,
//!   and CSV/SVG report emission.

pub mod cbm;
pub mod costmodel;
pub mod datagen;
pub mod harness;
pub mod intervention;
pub mod nncore;

pub use cbm::{CbmModel, ConceptPrediction, Conceptualization, Strategy};
pub use costmodel::{CostParams, PassCounts};
pub use datagen::{ClassConceptMatrix, ConceptDataset, GroupPartition, SplitDataset, SyntheticSpec};
pub use intervention::{
    Criterion, InterventionPolicy, InterventionTrace, LevelAssoc, LevelBudget, NvcMode, TieBreak,
};
pub use nncore::{DenseParams, Distribution};
