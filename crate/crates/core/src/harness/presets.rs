//! Named experiment presets.
//!
//! Each preset is a ready-to-run plan: a plain experiment, a data-axis sweep,
//! a cost-ratio sweep (one experiment, several cost transforms), or one of
//! the pitfall studies. `default` is the six-criteria comparison on the
//! standard synthetic dataset.

use super::{ExperimentConfig, HarnessError, LevelPair, Result, SweepAxis};
use crate::cbm::Conceptualization;
use crate::datagen::SyntheticSpec;
use crate::intervention::Criterion;

#[derive(Debug, Clone)]
pub enum Preset {
    Experiment(ExperimentConfig),
    Sweep { base: ExperimentConfig, axis: SweepAxis, values: Vec<f64> },
    /// One experiment evaluated under several (alpha, beta) cost ratios.
    CostSweep { base: ExperimentConfig, pairs: Vec<(f64, f64)>, tau_i: f64 },
    Nvc(ExperimentConfig),
    Mv(ExperimentConfig),
}

pub const PRESET_NAMES: &[&str] = &[
    "default",
    "criteria",
    "levels",
    "cost-alpha",
    "cost-beta",
    "noise",
    "hidden",
    "diversity",
    "subgroup",
    "extreme-noise",
    "extreme-diversity",
    "sparsity",
    "subgroup-ucp",
    "nvc",
    "mv",
];

fn base() -> ExperimentConfig {
    ExperimentConfig::default()
}

/// Resolves a preset by name. Unknown names list the available presets.
pub fn preset(name: &str) -> Result<Preset> {
    let p = match name.to_ascii_lowercase().as_str() {
        // Six-criteria comparison on synthetic defaults, individual+single.
        "default" | "criteria" => Preset::Experiment(ExperimentConfig {
            name: "criteria".into(),
            ..base()
        }),
        // All four levels under ucp; batch curves are checkpointed at equal
        // average counts so the levels are directly comparable.
        "levels" => Preset::Experiment(ExperimentConfig {
            name: "levels".into(),
            criteria: vec![Criterion::Ucp],
            levels: vec![LevelPair::IS, LevelPair::GS, LevelPair::IB, LevelPair::GB],
            ..base()
        }),
        // Cost-ratio sweeps: intervention cost relative to model passes.
        "cost-alpha" => Preset::CostSweep {
            base: ExperimentConfig { name: "cost-alpha".into(), ..base() },
            pairs: [0.01, 0.03, 0.05, 0.1, 1.0, 100.0].iter().map(|&a| (a, 100.0)).collect(),
            tau_i: 1.0,
        },
        "cost-beta" => Preset::CostSweep {
            base: ExperimentConfig { name: "cost-beta".into(), ..base() },
            pairs: [1.0, 3.0, 5.0, 10.0, 100.0].iter().map(|&b| (1.0, b)).collect(),
            tau_i: 1.0,
        },
        // Data-characteristic sweeps under ucp.
        "noise" => Preset::Sweep {
            base: ExperimentConfig {
                name: "noise".into(),
                criteria: vec![Criterion::Ucp],
                ..base()
            },
            axis: SweepAxis::SigmaZ,
            values: vec![0.1, 0.5, 2.0],
        },
        "hidden" => Preset::Sweep {
            base: ExperimentConfig {
                name: "hidden".into(),
                criteria: vec![Criterion::Ucp],
                ..base()
            },
            axis: SweepAxis::HiddenFrac,
            values: vec![0.0, 0.25, 0.5],
        },
        "diversity" => Preset::Sweep {
            base: ExperimentConfig {
                name: "diversity".into(),
                criteria: vec![Criterion::Ucp],
                ..base()
            },
            axis: SweepAxis::DiversityProb,
            values: vec![0.0, 0.1, 0.2],
        },
        // Sub-group size changes the relative ordering of criteria.
        "subgroup" => Preset::Sweep {
            base: ExperimentConfig { name: "subgroup".into(), ..base() },
            axis: SweepAxis::Gamma,
            values: vec![1.0, 10.0],
        },
        // Stress settings where the informed criteria lose their edge.
        "extreme-noise" => Preset::Experiment(ExperimentConfig {
            name: "extreme-noise".into(),
            data: SyntheticSpec { sigma_z: 2.0, ..SyntheticSpec::default() },
            ..base()
        }),
        "extreme-diversity" => Preset::Experiment(ExperimentConfig {
            name: "extreme-diversity".into(),
            data: SyntheticSpec { diversity_prob: 0.3, ..SyntheticSpec::default() },
            ..base()
        }),
        // Concept sparsity sweep, the contribution criterion's weak spot.
        "sparsity" => Preset::Sweep {
            base: ExperimentConfig {
                name: "sparsity".into(),
                criteria: vec![Criterion::Cctp],
                ..base()
            },
            axis: SweepAxis::MuAlpha,
            values: vec![0.5, 0.65, 0.8, 0.95],
        },
        "subgroup-ucp" => Preset::Sweep {
            base: ExperimentConfig {
                name: "subgroup-ucp".into(),
                criteria: vec![Criterion::Ucp],
                ..base()
            },
            axis: SweepAxis::Gamma,
            values: vec![1.0, 2.0, 10.0],
        },
        // Void-concept pitfall: half the concepts invisible per example,
        // hard conceptualization so interventions on correct visible concepts
        // are exact no-ops.
        "nvc" => Preset::Nvc(ExperimentConfig {
            name: "nvc".into(),
            data: SyntheticSpec { visible_prob: 0.5, nu: 200, ..SyntheticSpec::default() },
            conceptualization: Conceptualization::Hard,
            criteria: vec![Criterion::Rand, Criterion::Ucp, Criterion::Ectp],
            ..base()
        }),
        // Majority-voting pitfall: diverse concepts at low input noise so the
        // concept-to-class ambiguity (not concept prediction noise) drives
        // the curves; small k keeps a real majority population.
        "mv" => Preset::Mv(ExperimentConfig {
            name: "mv".into(),
            data: SyntheticSpec {
                k: 20,
                gamma: 2,
                nu: 250,
                diversity_prob: 0.1,
                sigma_z: 0.1,
                group_size: 4,
                ..SyntheticSpec::default()
            },
            criteria: vec![Criterion::Rand, Criterion::Ucp],
            ..base()
        }),
        other => return Err(HarnessError::UnknownPreset(other.into())),
    };
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_listed_preset_resolves_and_validates() {
        for name in PRESET_NAMES {
            let p = preset(name).unwrap_or_else(|e| panic!("preset {name}: {e}"));
            let config = match &p {
                Preset::Experiment(c) | Preset::Nvc(c) | Preset::Mv(c) => c,
                Preset::Sweep { base, values, .. } => {
                    assert!(!values.is_empty());
                    base
                }
                Preset::CostSweep { base, pairs, .. } => {
                    assert!(!pairs.is_empty());
                    base
                }
            };
            config.validate().unwrap_or_else(|e| panic!("preset {name} invalid: {e}"));
        }
    }

    #[test]
    fn unknown_preset_is_rejected() {
        assert!(matches!(preset("nope"), Err(HarnessError::UnknownPreset(_))));
    }

    #[test]
    fn cost_alpha_matches_the_published_grid() {
        let Preset::CostSweep { pairs, tau_i, .. } = preset("cost-alpha").unwrap() else {
            panic!("cost-alpha should be a cost sweep");
        };
        assert_eq!(tau_i, 1.0);
        let alphas: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        assert_eq!(alphas, vec![0.01, 0.03, 0.05, 0.1, 1.0, 100.0]);
        assert!(pairs.iter().all(|p| p.1 == 100.0));
    }
}
