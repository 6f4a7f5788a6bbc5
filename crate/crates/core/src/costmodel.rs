//! Theoretical intervention-cost accounting.
//!
//! Each criterion pays a fixed number of `g`/`f` passes to produce its scores
//! plus `τ_i` per intervened concept, so the total cost of a trace point at
//! `n` concepts is `N_g·τ_g + N_f·τ_f + n·τ_i`. The pass counts are exact by
//! construction: one `g` pass and one baseline `f` pass everywhere, two extra
//! passes for the contribution criterion's gradient, and two counterfactual
//! `f` passes per concept plus the final re-prediction for the expected-change
//! criteria.
//!
//! Costs can be given directly as `(τ_i, τ_g, τ_f)` or through the ratio
//! parametrization `τ_i = α·τ_g`, `τ_g = β·τ_f`.

use crate::intervention::{Criterion, InterventionTrace};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum CostError {
    #[error("invalid cost parameters: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, CostError>;

/// Number of `g` and `f` passes a criterion needs before the first
/// intervention (backward passes on `f` count as `τ_f`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassCounts {
    pub n_g: u64,
    pub n_f: u64,
}

/// Exact pass counts per criterion for `k` concepts.
pub fn pass_counts(criterion: Criterion, k: usize) -> PassCounts {
    let n_f = match criterion {
        Criterion::Rand | Criterion::Ucp | Criterion::Lcp => 1,
        Criterion::Cctp => 3,
        Criterion::Ectp | Criterion::Eudtp => 2 * k as u64 + 2,
    };
    PassCounts { n_g: 1, n_f }
}

/// Intervention cost parameters in arbitrary units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostParams {
    /// Cost per concept intervention.
    pub tau_i: f64,
    /// Cost per `g` pass.
    pub tau_g: f64,
    /// Cost per `f` pass.
    pub tau_f: f64,
}

impl CostParams {
    pub fn from_taus(tau_i: f64, tau_g: f64, tau_f: f64) -> Result<Self> {
        for (name, v) in [("tau_i", tau_i), ("tau_g", tau_g), ("tau_f", tau_f)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(CostError::Invalid(format!("{name} must be > 0, got {v}")));
            }
        }
        Ok(Self { tau_i, tau_g, tau_f })
    }

    /// Ratio parametrization: `τ_i = α·τ_g` and `τ_g = β·τ_f`.
    pub fn from_alpha_beta(alpha: f64, beta: f64, tau_i: f64) -> Result<Self> {
        for (name, v) in [("alpha", alpha), ("beta", beta), ("tau_i", tau_i)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(CostError::Invalid(format!("{name} must be > 0, got {v}")));
            }
        }
        let tau_g = tau_i / alpha;
        let tau_f = tau_g / beta;
        Self::from_taus(tau_i, tau_g, tau_f)
    }

    pub fn alpha(&self) -> f64 {
        self.tau_i / self.tau_g
    }

    pub fn beta(&self) -> f64 {
        self.tau_g / self.tau_f
    }

    /// Illustrative wall-clock preset measured on CUB hardware elsewhere:
    /// τ_i ≈ 0.7 s annotation time, τ_g ≈ 18.7 ms, τ_f ≈ 0.03 ms.
    pub fn cub_wallclock() -> Self {
        Self { tau_i: 0.7, tau_g: 18.7e-3, tau_f: 0.03e-3 }
    }
}

/// Total cost of reaching `n` intervened concepts under `criterion`:
/// `N_g·τ_g + N_f·τ_f + n·τ_i`. The fixed term is charged at `n = 0`.
pub fn cumulative_cost(criterion: Criterion, k: usize, n: f64, cp: &CostParams) -> f64 {
    let pc = pass_counts(criterion, k);
    pc.n_g as f64 * cp.tau_g + pc.n_f as f64 * cp.tau_f + n * cp.tau_i
}

/// Transforms a trace's step axis into cumulative cost, yielding
/// `(cost, task_error)` points; the baseline point sits at the criterion's
/// fixed cost.
pub fn error_vs_cost_curve(trace: &InterventionTrace, cp: &CostParams) -> Vec<(f64, f64)> {
    trace
        .steps
        .iter()
        .map(|s| {
            (
                cumulative_cost(trace.criterion, trace.k_eff, s.concepts_intervened, cp),
                s.task_error,
            )
        })
        .collect()
}

// ---------------------------------------------------------------------------
