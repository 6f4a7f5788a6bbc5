//! `cbmlab` — command-line harness for the concept-bottleneck laboratory.
//!
//! Subcommands: `generate` (dataset bundle to disk), `train` (checkpoint from
//! a bundle), `intervene` (intervention experiments), `sweep` (data-axis
//! sweeps), `nvc` / `mv` (pitfall studies), `report` (re-emit aggregates and
//! charts from saved traces). Exit code is 0 only when every cell succeeded.

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use cbm_core::cbm::{self, CbmModel, Conceptualization, Strategy, TrainConfig};
use cbm_core::datagen::{self, SyntheticSpec};
use cbm_core::harness::presets::{preset, Preset, PRESET_NAMES};
use cbm_core::harness::{
    self, report, AggregateCurve, CellResult, ExperimentConfig, ExperimentReport, LevelPair,
    SweepAxis, TrainedSeed,
};
use cbm_core::intervention::Criterion;

#[derive(Parser)]
#[command(
    name = "cbmlab",
    about = "Concept bottleneck model laboratory: synthetic data, training, and test-time intervention experiments",
    after_help = format!("Presets: {}", PRESET_NAMES.join(", "))
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset bundle (CSV files + meta.json).
    Generate {
        /// Preset whose data spec to use.
        #[arg(long)]
        preset: Option<String>,
        /// JSON file with a full data spec (overrides --preset).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override the spec's RNG seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a CBM on a dataset bundle and write a model checkpoint.
    Train {
        /// Dataset bundle directory from `generate`.
        #[arg(long)]
        data: PathBuf,
        /// Training strategy: ind, seq, jnt or jnt+p.
        #[arg(long, default_value = "ind")]
        strategy: String,
        /// Training RNG seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        epochs: Option<usize>,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run intervention experiments: a full preset/config pipeline, or a
    /// saved dataset + checkpoint.
    Intervene {
        #[arg(long)]
        preset: Option<String>,
        /// JSON experiment config (overrides --preset).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset bundle (requires --model; bypasses training).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Model checkpoint from `train`.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Comma-separated criteria (rand,ucp,lcp,cctp,ectp,eudtp).
        #[arg(long)]
        criteria: Option<String>,
        /// Intervention level: i+s, g+s, i+b or g+b.
        #[arg(long)]
        level: Option<String>,
        /// Per-example budget in units (default: all).
        #[arg(long)]
        budget: Option<usize>,
        /// soft, hard or samp.
        #[arg(long)]
        conceptualization: Option<String>,
        /// Evaluation RNG seed (random scores / sampling).
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep one data axis with paired seeds.
    Sweep {
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// sigma_z, hidden_frac, diversity_prob, gamma, mu_alpha, group_size.
        #[arg(long)]
        axis: Option<String>,
        /// Comma-separated axis values.
        #[arg(long)]
        values: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Void-concept pitfall study (interventions on all-correct examples).
    Nvc {
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Majority-voting fairness study (train with and without voting).
    Mv {
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recompute aggregates and charts from a run directory's traces.csv.
    Report {
        /// Run directory produced by `intervene`.
        #[arg(long)]
        run: PathBuf,
    },
}

fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn experiment_config(
    preset_name: &Option<String>,
    config: &Option<PathBuf>,
    expect: &str,
) -> Result<ExperimentConfig> {
    if let Some(path) = config {
        return load_json(path);
    }
    let name = preset_name.as_deref().unwrap_or(expect);
    match preset(name)? {
        Preset::Experiment(c) | Preset::Nvc(c) | Preset::Mv(c) => Ok(c),
        Preset::Sweep { base, .. } | Preset::CostSweep { base, .. } => Ok(base),
    }
}

fn finish(all_ok: bool, out: &Path) -> Result<()> {
    if all_ok {
        println!("done: {}", out.display());
        Ok(())
    } else {
        bail!("some cells failed; see {}/errors.csv", out.display());
    }
}

fn print_experiment_summary(report: &ExperimentReport) {
    for AggregateCurve { criterion, level, steps } in &report.aggregates {
        if let (Some(first), Some(last)) = (steps.first(), steps.last()) {
            println!(
                "  {criterion:>5} {}: task error {:.4} -> {:.4} over {} steps ({} seeds)",
                level.token(),
                first.mean_task_error,
                last.mean_task_error,
                steps.len() - 1,
                last.n_seeds
            );
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn run_pretrained_cells(
    data: &Path,
    model_path: &Path,
    criteria: &Option<String>,
    level: &Option<String>,
    budget: Option<usize>,
    conceptualization: &Option<String>,
    seed: Option<u64>,
) -> Result<ExperimentReport> {
    let ds = datagen::load_bundle(data)?;
    let split = datagen::split_canonical(&ds)?;
    let model = CbmModel::load(model_path)?;
    let seed = seed.unwrap_or(0);

    let criteria: Vec<Criterion> = match criteria {
        None => Criterion::ALL.to_vec(),
        Some(list) => list
            .split(',')
            .map(|s| Criterion::from_str(s.trim()).map_err(anyhow::Error::msg))
            .collect::<Result<_>>()?,
    };
    let level = match level {
        None => LevelPair::IS,
        Some(s) => LevelPair::from_str(s).map_err(anyhow::Error::msg)?,
    };
    let conceptualization = match conceptualization {
        None => Conceptualization::Soft,
        Some(s) => Conceptualization::from_str(s).map_err(anyhow::Error::msg)?,
    };

    let config = ExperimentConfig {
        name: "cli-intervene".into(),
        data: ds.spec.clone(),
        conceptualization,
        criteria: criteria.clone(),
        levels: vec![level],
        budget,
        seeds: vec![seed],
        ..ExperimentConfig::default()
    };
    let trained = TrainedSeed { seed, split, model };

    let mut cells = Vec::new();
    for &criterion in &criteria {
        match harness::run_cell(&trained, &config, criterion, level, &trained.split.test) {
            Ok(trace) => {
                cells.push(CellResult { criterion, level, seed, trace: Some(trace), error: None })
            }
            Err(e) => cells.push(CellResult {
                criterion,
                level,
                seed,
                trace: None,
                error: Some(e.to_string()),
            }),
        }
    }
    let aggregates = criteria
        .iter()
        .filter_map(|&criterion| {
            let traces: Vec<_> = cells
                .iter()
                .filter(|c| c.criterion == criterion)
                .filter_map(|c| c.trace.as_ref())
                .collect();
            if traces.is_empty() {
                None
            } else {
                Some(AggregateCurve { criterion, level, steps: harness::aggregate_traces(&traces) })
            }
        })
        .collect();
    let mistake_curves =
        vec![(seed, harness::error_vs_concept_mistakes(&trained.model, &trained.split.test)?)];
    Ok(ExperimentReport { config_hash: config.hash(), config, cells, aggregates, mistake_curves })
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Generate { preset: preset_name, config, seed, out } => {
            let mut spec: SyntheticSpec = if let Some(path) = &config {
                load_json(path)?
            } else if preset_name.is_some() {
                experiment_config(&preset_name, &None, "default")?.data
            } else {
                SyntheticSpec::default()
            };
            if let Some(seed) = seed {
                spec.seed = seed;
            }
            let ds = datagen::generate(&spec)?;
            datagen::save_bundle(&ds, &out)?;
            println!(
                "generated {} examples ({} active concepts, {} classes) -> {}",
                ds.n(),
                ds.k_eff(),
                ds.class_concepts.num_classes(),
                out.display()
            );
            Ok(())
        }
        Command::Train { data, strategy, seed, epochs, out } => {
            let ds = datagen::load_bundle(&data)?;
            let split = datagen::split_canonical(&ds)?;
            let mut cfg = TrainConfig {
                strategy: Strategy::from_str(&strategy).map_err(anyhow::Error::msg)?,
                ..TrainConfig::default()
            };
            if let Some(epochs) = epochs {
                cfg.epochs = epochs;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let model = cbm::train(&cfg, &split, &mut rng)?;
            model.save(&out)?;
            println!(
                "trained {} model: lr_g={:?} lr_f={:?} val_g={:?} val_f={:?} -> {}",
                cfg.strategy,
                model.report.lr_g,
                model.report.lr_f,
                model.report.val_error_g,
                model.report.val_error_f,
                out.display()
            );
            Ok(())
        }
        Command::Intervene {
            preset: preset_name,
            config,
            data,
            model,
            criteria,
            level,
            budget,
            conceptualization,
            seed,
            out,
        } => {
            if let (Some(data), Some(model)) = (&data, &model) {
                let rep = run_pretrained_cells(
                    data,
                    model,
                    &criteria,
                    &level,
                    budget,
                    &conceptualization,
                    seed,
                )?;
                report::write_experiment(&out, &rep)?;
                print_experiment_summary(&rep);
                return finish(rep.all_cells_succeeded(), &out);
            }
            if data.is_some() != model.is_some() {
                bail!("--data and --model must be given together");
            }
            let plan = if let Some(path) = &config {
                Preset::Experiment(load_json(path)?)
            } else {
                preset(preset_name.as_deref().unwrap_or("default"))?
            };
            match plan {
                Preset::Experiment(cfg) => {
                    let rep = harness::run_experiment(&cfg)?;
                    report::write_experiment(&out, &rep)?;
                    print_experiment_summary(&rep);
                    finish(rep.all_cells_succeeded(), &out)
                }
                Preset::CostSweep { base, pairs, tau_i } => {
                    let rep = harness::run_experiment(&base)?;
                    report::write_cost_sweep(&out, &rep, &pairs, tau_i)?;
                    print_experiment_summary(&rep);
                    finish(rep.all_cells_succeeded(), &out)
                }
                Preset::Sweep { .. } => bail!("this preset is a sweep; use `cbmlab sweep`"),
                Preset::Nvc(_) => bail!("this preset is an nvc study; use `cbmlab nvc`"),
                Preset::Mv(_) => bail!("this preset is an mv study; use `cbmlab mv`"),
            }
        }
        Command::Sweep { preset: preset_name, config, axis, values, out } => {
            let (base, axis, values) = if let (Some(axis), Some(values)) = (&axis, &values) {
                let base = experiment_config(&preset_name, &config, "default")?;
                let axis = SweepAxis::from_str(axis).map_err(anyhow::Error::msg)?;
                let values: Vec<f64> = values
                    .split(',')
                    .map(|v| v.trim().parse::<f64>().context("parsing sweep value"))
                    .collect::<Result<_>>()?;
                (base, axis, values)
            } else {
                match preset(preset_name.as_deref().unwrap_or("noise"))? {
                    Preset::Sweep { base, axis, values } => (base, axis, values),
                    _ => bail!("preset is not a sweep; pass --axis and --values"),
                }
            };
            let runs = harness::sweep(&base, axis, &values)?;
            report::write_sweep(&out, axis, &runs)?;
            for (value, rep) in &runs {
                println!("{axis}={value}:");
                print_experiment_summary(rep);
            }
            let ok = runs.iter().all(|(_, r)| r.all_cells_succeeded());
            finish(ok, &out)
        }
        Command::Nvc { preset: preset_name, config, out } => {
            let cfg = experiment_config(&preset_name, &config, "nvc")?;
            let rep = harness::nvc_study(&cfg)?;
            report::write_nvc(&out, &rep)?;
            for (seed, kept, total) in &rep.filtered {
                println!("seed {seed}: {kept}/{total} test examples fully correct");
            }
            let ok = rep.cells.iter().all(|c| c.error.is_none());
            finish(ok, &out)
        }
        Command::Mv { preset: preset_name, config, out } => {
            let cfg = experiment_config(&preset_name, &config, "mv")?;
            let rep = harness::mv_fairness_study(&cfg)?;
            report::write_mv(&out, &rep)?;
            if rep.datasets_identical {
                println!("diversity_prob = 0: voting is the identity; nothing to compare");
            }
            for row in &rep.fairness {
                println!(
                    "seed {}: minority err {:.3} ({} ex), majority err {:.3} ({} ex){}",
                    row.seed,
                    row.minority_error,
                    row.minority_n,
                    row.majority_error,
                    row.majority_n,
                    if row.degenerate { " [degenerate]" } else { "" }
                );
            }
            let ok = rep.cells.iter().all(|c| c.error.is_none());
            finish(ok, &out)
        }
        Command::Report { run } => {
            let config: ExperimentConfig = load_json(&run.join("config.json"))?;
            let cells = report::read_traces(&run.join("traces.csv"))?;
            let mut aggregates = Vec::new();
            for &criterion in &config.criteria {
                for &level in &config.levels {
                    let traces: Vec<_> = cells
                        .iter()
                        .filter(|c| c.criterion == criterion && c.level == level)
                        .filter_map(|c| c.trace.as_ref())
                        .collect();
                    if !traces.is_empty() {
                        aggregates.push(AggregateCurve {
                            criterion,
                            level,
                            steps: harness::aggregate_traces(&traces),
                        });
                    }
                }
            }
            let rep = ExperimentReport {
                config_hash: config.hash(),
                config,
                cells,
                aggregates,
                mistake_curves: Vec::new(),
            };
            report::write_experiment(&run, &rep)?;
            print_experiment_summary(&rep);
            println!("re-emitted aggregates and charts in {}", run.display());
            Ok(())
        }
    }
}
