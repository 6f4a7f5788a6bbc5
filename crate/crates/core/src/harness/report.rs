//! Report emission: CSV tables and SVG charts.
//!
//! Every emitted file embeds the config hash — CSVs in a leading `#` comment
//! line, SVGs in a comment element — so outputs are traceable to the exact
//! configuration that produced them. Reruns of the same config with the same
//! artifact version produce byte-identical files.
//!
//! Trace CSV columns:
//! `seed,criterion,level,step,units_intervened,task_error,concept_error,n_g_passes,n_f_passes`
//! (the pitfall studies append one discriminating column at the end).
//! Cost curve columns: `criterion,cost_units,task_error`.

use super::svg::{line_chart, ChartSpec, Series};
use super::{
    AggregateStep, CellResult, ExperimentReport, HarnessError, LevelPair, MvStudyReport,
    NvcStudyReport, Result, SweepAxis,
};
use crate::costmodel;
use crate::intervention::{Criterion, InterventionTrace, NvcMode};
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

fn write_file(path: &Path, content: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, content)?;
    Ok(())
}

fn trace_rows(out: &mut String, seed: u64, trace: &InterventionTrace, extra: Option<&str>) {
    for s in &trace.steps {
        let _ = write!(
            out,
            "{seed},{},{},{},{},{},{},{},{}",
            trace.criterion,
            super::level_token(trace.level_assoc, trace.level_budget),
            s.step,
            s.units_intervened,
            s.task_error,
            s.concept_error,
            trace.n_g_passes,
            trace.n_f_passes
        );
        if let Some(extra) = extra {
            let _ = write!(out, ",{extra}");
        }
        out.push('\n');
    }
}

const TRACE_HEADER: &str =
    "seed,criterion,level,step,units_intervened,task_error,concept_error,n_g_passes,n_f_passes";

fn aggregate_rows(out: &mut String, prefix: &str, steps: &[AggregateStep]) {
    for s in steps {
        let _ = writeln!(
            out,
            "{prefix},{},{},{},{},{},{},{},{}",
            s.step,
            s.units_intervened,
            s.concepts_intervened,
            s.mean_task_error,
            s.std_task_error,
            s.mean_concept_error,
            s.std_concept_error,
            s.n_seeds
        );
    }
}

fn band_series(label: String, steps: &[AggregateStep]) -> Series {
    Series {
        label,
        points: steps.iter().map(|s| (s.units_intervened, s.mean_task_error)).collect(),
        band: Some(
            steps
                .iter()
                .map(|s| {
                    (
                        s.units_intervened,
                        (s.mean_task_error - s.std_task_error).max(0.0),
                        s.mean_task_error + s.std_task_error,
                    )
                })
                .collect(),
        ),
    }
}

/// Writes an experiment run directory: config echo, per-seed traces, error
/// rows, aggregates, mistake buckets, per-level charts, and (when a cost
/// model is configured) cost-based curves for the first level.
pub fn write_experiment(dir: &Path, report: &ExperimentReport) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let hash = &report.config_hash;
    write_file(dir.join("config.json").as_path(), &serde_json::to_string_pretty(&report.config)?)?;

    let mut traces = format!("# config_hash: {hash}\n{TRACE_HEADER}\n");
    for cell in &report.cells {
        if let Some(trace) = &cell.trace {
            trace_rows(&mut traces, cell.seed, trace, None);
        }
    }
    write_file(&dir.join("traces.csv"), &traces)?;

    let failures: Vec<&CellResult> = report.cells.iter().filter(|c| c.error.is_some()).collect();
    if !failures.is_empty() {
        let mut errors = format!("# config_hash: {hash}\nseed,criterion,level,error\n");
        for cell in failures {
            let _ = writeln!(
                errors,
                "{},{},{},\"{}\"",
                cell.seed,
                cell.criterion,
                cell.level.token(),
                cell.error.as_deref().unwrap_or("").replace('"', "'")
            );
        }
        write_file(&dir.join("errors.csv"), &errors)?;
    }

    let mut agg = format!(
        "# config_hash: {hash}\ncriterion,level,oracle,step,units_intervened,concepts_intervened,\
         mean_task_error,std_task_error,mean_concept_error,std_concept_error,n_seeds\n"
    );
    for curve in &report.aggregates {
        let prefix =
            format!("{},{},{}", curve.criterion, curve.level.token(), curve.criterion.is_oracle());
        aggregate_rows(&mut agg, &prefix, &curve.steps);
    }
    write_file(&dir.join("aggregate.csv"), &agg)?;

    // Empty on re-emission from saved traces (no models to re-run).
    if !report.mistake_curves.is_empty() {
        let mut mistakes =
            format!("# config_hash: {hash}\nseed,mistakes,mean_task_error,population\n");
        for (seed, buckets) in &report.mistake_curves {
            for b in buckets {
                let _ =
                    writeln!(mistakes, "{seed},{},{},{}", b.mistakes, b.mean_task_error, b.population);
            }
        }
        write_file(&dir.join("mistakes.csv"), &mistakes)?;
    }

    // Count-based chart per level.
    for &level in &report.config.levels {
        let series: Vec<Series> = report
            .aggregates
            .iter()
            .filter(|a| a.level == level)
            .map(|a| band_series(a.criterion.to_string(), &a.steps))
            .collect();
        if series.is_empty() {
            continue;
        }
        let svg = line_chart(
            &ChartSpec {
                title: format!("{} — task error vs intervention counts ({})", report.config.name, level.token()),
                x_label: "intervened units".into(),
                y_label: "task error".into(),
                footnote: format!("config_hash: {hash}"),
            },
            &series,
        );
        write_file(&dir.join(format!("chart_counts_{}.svg", level.token().replace('+', ""))), &svg)?;
    }

    // Cost-based view for the first configured level.
    if let Some(cost) = &report.config.cost {
        let params = cost.params()?;
        let level = report.config.levels[0];
        let mut csv = format!("# config_hash: {hash}\ncriterion,cost_units,task_error\n");
        let mut series = Vec::new();
        for a in report.aggregates.iter().filter(|a| a.level == level) {
            let k = report
                .cells
                .iter()
                .find(|c| c.criterion == a.criterion && c.level == level && c.trace.is_some())
                .and_then(|c| c.trace.as_ref())
                .map(|t| t.k_eff)
                .unwrap_or(report.config.data.k);
            let pts: Vec<(f64, f64)> = a
                .steps
                .iter()
                .map(|s| {
                    (
                        costmodel::cumulative_cost(a.criterion, k, s.concepts_intervened, &params),
                        s.mean_task_error,
                    )
                })
                .collect();
            for (cost_units, err) in &pts {
                let _ = writeln!(csv, "{},{cost_units},{err}", a.criterion);
            }
            series.push(Series { label: a.criterion.to_string(), points: pts, band: None });
        }
        write_file(&dir.join("cost_curves.csv"), &csv)?;
        let svg = line_chart(
            &ChartSpec {
                title: format!(
                    "{} — task error vs cost (alpha={:.3}, beta={:.1})",
                    report.config.name,
                    params.alpha(),
                    params.beta()
                ),
                x_label: "cost (arbitrary units)".into(),
                y_label: "task error".into(),
                footnote: format!("config_hash: {hash}"),
            },
            &series,
        );
        write_file(&dir.join("chart_cost.svg"), &svg)?;
    }
    Ok(())
}

/// Writes one experiment evaluated under several (alpha, beta) cost ratios:
/// the count-based run itself plus a cost-curve CSV and chart per ratio pair.
pub fn write_cost_sweep(
    dir: &Path,
    report: &ExperimentReport,
    pairs: &[(f64, f64)],
    tau_i: f64,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_experiment(&dir.join("base"), report)?;
    let hash = &report.config_hash;
    let level = report.config.levels[0];
    for &(alpha, beta) in pairs {
        let params = costmodel::CostParams::from_alpha_beta(alpha, beta, tau_i)?;
        let sub = dir.join(format!("alpha={alpha}_beta={beta}"));
        std::fs::create_dir_all(&sub)?;
        let mut csv = format!("# config_hash: {hash}\ncriterion,cost_units,task_error\n");
        let mut series = Vec::new();
        for a in report.aggregates.iter().filter(|a| a.level == level) {
            let k = report
                .cells
                .iter()
                .find(|c| c.criterion == a.criterion && c.level == level && c.trace.is_some())
                .and_then(|c| c.trace.as_ref())
                .map(|t| t.k_eff)
                .unwrap_or(report.config.data.k);
            let pts: Vec<(f64, f64)> = a
                .steps
                .iter()
                .map(|s| {
                    (
                        costmodel::cumulative_cost(a.criterion, k, s.concepts_intervened, &params),
                        s.mean_task_error,
                    )
                })
                .collect();
            for (cost_units, err) in &pts {
                let _ = writeln!(csv, "{},{cost_units},{err}", a.criterion);
            }
            series.push(Series { label: a.criterion.to_string(), points: pts, band: None });
        }
        write_file(&sub.join("cost_curves.csv"), &csv)?;
        let svg = line_chart(
            &ChartSpec {
                title: format!("task error vs cost (alpha={alpha}, beta={beta})"),
                x_label: "cost (arbitrary units)".into(),
                y_label: "task error".into(),
                footnote: format!("config_hash: {hash}"),
            },
            &series,
        );
        write_file(&sub.join("chart_cost.svg"), &svg)?;
    }
    Ok(())
}

/// Writes a sweep: one run directory per axis value plus a summary CSV and an
/// overview chart of the first configured criterion across values.
pub fn write_sweep(
    dir: &Path,
    axis: SweepAxis,
    runs: &[(f64, ExperimentReport)],
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let hashes: Vec<String> =
        runs.iter().map(|(v, r)| format!("{axis}={v}:{}", r.config_hash)).collect();
    let mut summary = format!(
        "# config_hashes: {}\naxis,value,criterion,level,step,units_intervened,\
         mean_task_error,std_task_error,n_seeds\n",
        hashes.join(" ")
    );
    let mut series = Vec::new();
    for (value, report) in runs {
        write_experiment(&dir.join(format!("{axis}={value}")), report)?;
        for curve in &report.aggregates {
            for s in &curve.steps {
                let _ = writeln!(
                    summary,
                    "{axis},{value},{},{},{},{},{},{},{}",
                    curve.criterion,
                    curve.level.token(),
                    s.step,
                    s.units_intervened,
                    s.mean_task_error,
                    s.std_task_error,
                    s.n_seeds
                );
            }
        }
        let focus = report.config.criteria[0];
        if let Some(curve) = report.aggregate(focus, report.config.levels[0]) {
            series.push(band_series(format!("{axis}={value}"), &curve.steps));
        }
    }
    write_file(&dir.join("sweep_summary.csv"), &summary)?;
    if !series.is_empty() {
        let focus = runs[0].1.config.criteria[0];
        let svg = line_chart(
            &ChartSpec {
                title: format!("{focus} under a {axis} sweep"),
                x_label: "intervened units".into(),
                y_label: "task error".into(),
                footnote: format!("config_hashes: {}", hashes.join(" ")),
            },
            &series,
        );
        write_file(&dir.join("sweep_chart.svg"), &svg)?;
    }
    Ok(())
}

/// Writes the void-concept study: traces with an `nvc` column, the filter
/// census, aggregates, and one nvc-o vs nvc-x chart per criterion.
pub fn write_nvc(dir: &Path, report: &NvcStudyReport) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let hash = &report.config_hash;
    write_file(&dir.join("config.json"), &serde_json::to_string_pretty(&report.config)?)?;

    let mut traces = format!("# config_hash: {hash}\n{TRACE_HEADER},nvc\n");
    let mut errors = String::new();
    for cell in &report.cells {
        if let Some(trace) = &cell.trace {
            trace_rows(&mut traces, cell.seed, trace, Some(&cell.nvc.to_string()));
        } else if let Some(e) = &cell.error {
            let _ = writeln!(errors, "{},{},{},\"{}\"", cell.seed, cell.criterion, cell.nvc, e);
        }
    }
    write_file(&dir.join("traces.csv"), &traces)?;
    if !errors.is_empty() {
        write_file(
            &dir.join("errors.csv"),
            &format!("# config_hash: {hash}\nseed,criterion,nvc,error\n{errors}"),
        )?;
    }

    let mut filtered = format!("# config_hash: {hash}\nseed,kept,total\n");
    for (seed, kept, total) in &report.filtered {
        let _ = writeln!(filtered, "{seed},{kept},{total}");
    }
    write_file(&dir.join("filtered.csv"), &filtered)?;

    let mut agg = format!(
        "# config_hash: {hash}\ncriterion,nvc,step,units_intervened,concepts_intervened,\
         mean_task_error,std_task_error,mean_concept_error,std_concept_error,n_seeds\n"
    );
    for (criterion, nvc, steps) in &report.aggregates {
        aggregate_rows(&mut agg, &format!("{criterion},{nvc}"), steps);
    }
    write_file(&dir.join("aggregate.csv"), &agg)?;

    for &criterion in &report.config.criteria {
        let series: Vec<Series> = [NvcMode::NvcO, NvcMode::NvcX]
            .iter()
            .filter_map(|&mode| {
                report
                    .aggregates
                    .iter()
                    .find(|(c, m, _)| *c == criterion && *m == mode)
                    .map(|(_, _, steps)| band_series(mode.to_string(), steps))
            })
            .collect();
        if series.is_empty() {
            continue;
        }
        let svg = line_chart(
            &ChartSpec {
                title: format!("void-concept handling under {criterion} (all-correct examples)"),
                x_label: "intervened concepts".into(),
                y_label: "task error".into(),
                footnote: format!("config_hash: {hash}"),
            },
            &series,
        );
        write_file(&dir.join(format!("nvc_{criterion}.svg")), &svg)?;
    }
    Ok(())
}

/// Writes the majority-voting study: traces with a `variant` column, the
/// per-seed fairness table, aggregates, and mv-on vs mv-off charts.
pub fn write_mv(dir: &Path, report: &MvStudyReport) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let hash = &report.config_hash;
    write_file(&dir.join("config.json"), &serde_json::to_string_pretty(&report.config)?)?;

    if report.datasets_identical {
        write_file(
            &dir.join("summary.txt"),
            &format!(
                "# config_hash: {hash}\ndiversity_prob = 0: majority voting is the identity; \
                 mv-on and mv-off datasets are identical and no curves were produced.\n"
            ),
        )?;
        return Ok(());
    }

    let mut traces = format!("# config_hash: {hash}\n{TRACE_HEADER},variant\n");
    let mut errors = String::new();
    for cell in &report.cells {
        if let Some(trace) = &cell.trace {
            trace_rows(&mut traces, cell.seed, trace, Some(&cell.variant.to_string()));
        } else if let Some(e) = &cell.error {
            let _ = writeln!(errors, "{},{},{},\"{}\"", cell.seed, cell.criterion, cell.variant, e);
        }
    }
    write_file(&dir.join("traces.csv"), &traces)?;
    if !errors.is_empty() {
        write_file(
            &dir.join("errors.csv"),
            &format!("# config_hash: {hash}\nseed,criterion,variant,error\n{errors}"),
        )?;
    }

    let mut fairness = format!(
        "# config_hash: {hash}\nseed,minority_n,majority_n,minority_error,majority_error,\
         correct_by_disagreement,degenerate\n"
    );
    for row in &report.fairness {
        let _ = writeln!(
            fairness,
            "{},{},{},{},{},{},{}",
            row.seed,
            row.minority_n,
            row.majority_n,
            row.minority_error,
            row.majority_error,
            row.correct_by_disagreement,
            row.degenerate
        );
    }
    write_file(&dir.join("fairness.csv"), &fairness)?;

    let mut agg = format!(
        "# config_hash: {hash}\nvariant,criterion,step,units_intervened,concepts_intervened,\
         mean_task_error,std_task_error,mean_concept_error,std_concept_error,n_seeds\n"
    );
    for (variant, criterion, steps) in &report.aggregates {
        aggregate_rows(&mut agg, &format!("{variant},{criterion}"), steps);
    }
    write_file(&dir.join("aggregate.csv"), &agg)?;

    for &criterion in &report.config.criteria {
        let series: Vec<Series> = report
            .aggregates
            .iter()
            .filter(|(_, c, _)| *c == criterion)
            .map(|(variant, _, steps)| band_series(variant.to_string(), steps))
            .collect();
        if series.is_empty() {
            continue;
        }
        let svg = line_chart(
            &ChartSpec {
                title: format!("majority voting on/off under {criterion}"),
                x_label: "intervened concepts".into(),
                y_label: "task error".into(),
                footnote: format!("config_hash: {hash}"),
            },
            &series,
        );
        write_file(&dir.join(format!("mv_{criterion}.svg")), &svg)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Reading traces back (for the `report` subcommand)
// ---------------------------------------------------------------------------

/// Parses a `traces.csv` written by [`write_experiment`] back into cells.
/// The `concepts_intervened` column is not part of the trace contract, so the
/// reconstruction sets it equal to `units_intervened` (exact for individual
/// levels, which is what the cost transform consumes).
pub fn read_traces(path: &Path) -> Result<Vec<CellResult>> {
    use crate::intervention::TraceStep;

    let content = std::fs::read_to_string(path)?;
    let mut cells: std::collections::BTreeMap<(u64, String, String), Vec<TraceStep>> =
        std::collections::BTreeMap::new();
    let mut passes: std::collections::BTreeMap<(u64, String, String), (u64, u64)> =
        std::collections::BTreeMap::new();
    for line in content.lines() {
        if line.starts_with('#') || line.starts_with("seed,") || line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() < 9 {
            return Err(HarnessError::InvalidConfig(format!("malformed trace row: {line}")));
        }
        let parse_f = |s: &str| {
            s.parse::<f64>()
                .map_err(|e| HarnessError::InvalidConfig(format!("bad number '{s}': {e}")))
        };
        let parse_u = |s: &str| {
            s.parse::<u64>()
                .map_err(|e| HarnessError::InvalidConfig(format!("bad integer '{s}': {e}")))
        };
        let key = (parse_u(f[0])?, f[1].to_string(), f[2].to_string());
        let units = parse_f(f[4])?;
        cells.entry(key.clone()).or_default().push(TraceStep {
            step: parse_u(f[3])? as usize,
            units_intervened: units,
            concepts_intervened: units,
            task_error: parse_f(f[5])?,
            concept_error: parse_f(f[6])?,
        });
        passes.insert(key, (parse_u(f[7])?, parse_u(f[8])?));
    }

    let mut out = Vec::new();
    for ((seed, criterion, level), mut steps) in cells {
        steps.sort_by_key(|s| s.step);
        let criterion = Criterion::from_str(&criterion)
            .map_err(HarnessError::InvalidConfig)?;
        let level = LevelPair::from_str(&level).map_err(HarnessError::InvalidConfig)?;
        let (n_g, n_f) = passes[&(seed, criterion.to_string(), level.token())];
        let k_eff = steps
            .iter()
            .map(|s| s.units_intervened as usize)
            .max()
            .unwrap_or(0)
            .max(1);
        out.push(CellResult {
            criterion,
            level,
            seed,
            trace: Some(InterventionTrace {
                criterion,
                level_assoc: level.assoc,
                level_budget: level.budget,
                k_eff,
                n_g_passes: n_g,
                n_f_passes: n_f,
                steps,
            }),
            error: None,
        });
    }
    Ok(out)
}
