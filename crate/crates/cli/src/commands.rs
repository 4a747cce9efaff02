use std::path::Path;

use prefix_moe::attention::{equivalence_trial, EquivalenceTrial};
use prefix_moe::estimation::{fit, gradient_check, FitResult, GradCheck, InitStrategy};
use prefix_moe::experiments::{
    density_l2_error, run_sweep, witness_table, Aggregate, Series, SlopeFit, SweepResult, SweepSpec, WitnessRow,
};
use prefix_moe::model::{gen_dataset, Dataset, Setting};
use prefix_moe::seed::child_seed;
use prefix_moe::voronoi::{loss_name, voronoi_loss};
use serde::{Deserialize, Serialize};

use crate::config::{EquivConfig, FitCliConfig, GenConfig, SweepConfig, WitnessConfig};
use crate::output::OutputDir;
use crate::{CliError, Outcome};

/// Maximum relative error accepted by `fit --grad-check`.
pub const GRAD_CHECK_TOL: f64 = 1e-5;

/// Failure share of a sample size above which a sweep is rejected.
pub const MAX_FAILURE_RATE: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivReport {
    pub trials: usize,
    pub tolerance: f64,
    pub max_prefix_diff: f64,
    pub max_prompt_diff: f64,
    pub failures: usize,
    pub passed: bool,
}

pub fn equiv_trials(cfg: &EquivConfig) -> Result<Vec<EquivalenceTrial>, CliError> {
    (0..cfg.trials as u64)
        .map(|t| equivalence_trial(child_seed(cfg.seed, t, 0, "equiv"), cfg.limits).map_err(CliError::from))
        .collect()
}

pub fn equiv_report(cfg: &EquivConfig, trials: &[EquivalenceTrial]) -> EquivReport {
    let failures = trials.iter().filter(|t| !(t.max_diff() <= cfg.tolerance)).count();
    EquivReport {
        trials: trials.len(),
        tolerance: cfg.tolerance,
        max_prefix_diff: trials.iter().map(|t| t.prefix_diff).fold(0.0, f64::max),
        max_prompt_diff: trials.iter().map(|t| t.prompt_diff).fold(0.0, f64::max),
        failures,
        passed: failures == 0,
    }
}

pub fn equiv(cfg: &EquivConfig, dry_run: bool, out: &mut OutputDir) -> Result<Outcome, CliError> {
    if dry_run {
        let seeds: Vec<u64> = (0..cfg.trials as u64).map(|t| child_seed(cfg.seed, t, 0, "equiv")).collect();
        println!("{}", serde_json::json!({"command": "equiv", "trials": cfg.trials, "tolerance": cfg.tolerance, "limits": cfg.limits, "trial_seeds": seeds}));
        return Ok(Outcome::Success);
    }
    out.check(&["equiv.csv".into(), "equiv.json".into()])?;
    let trials = equiv_trials(cfg)?;
    let mut csv = String::from("seed,tokens,dim,heads,prompts,prefix_diff,prompt_diff\n");
    for t in &trials {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            t.seed, t.tokens, t.dim, t.heads, t.prompts, t.prefix_diff, t.prompt_diff
        ));
    }
    let report = equiv_report(cfg, &trials);
    out.write("equiv.csv", &csv)?;
    out.write_json("equiv.json", &report)?;
    println!(
        "equiv: {} trials, max prefix diff {:.3e}, max prompt diff {:.3e}, tolerance {:e}",
        report.trials, report.max_prefix_diff, report.max_prompt_diff, report.tolerance
    );
    Ok(if report.passed {
        Outcome::Success
    } else {
        Outcome::Failure(format!("{} of {} trials exceed tolerance {:e}", report.failures, report.trials, cfg.tolerance))
    })
}

/// Everything in a [`SweepResult`] except the per-cell records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub setting: Setting,
    pub loss_name: String,
    pub init: InitStrategy,
    pub aggregates: Vec<Aggregate>,
    pub loss_slope: Option<SlopeFit>,
    pub l2_slope: Option<SlopeFit>,
    pub excluded: usize,
    pub config: SweepSpec,
}

impl From<&SweepResult> for SweepSummary {
    fn from(r: &SweepResult) -> Self {
        Self {
            setting: r.setting,
            loss_name: r.loss_name.clone(),
            init: r.spec.fit.init,
            aggregates: r.aggregates.clone(),
            loss_slope: r.loss_slope,
            l2_slope: r.l2_slope,
            excluded: r.excluded,
            config: r.spec.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Separation {
    pub shared_loss: String,
    pub shared_slope: f64,
    pub non_shared_loss: String,
    pub non_shared_slope: f64,
    /// `non_shared_slope − shared_slope`; positive when the non-shared loss
    /// decays more slowly.
    pub separation: f64,
}

fn sweep_files(setting: Setting, loss: &str) -> Vec<String> {
    let s = setting.as_str();
    vec![format!("{s}.csv"), format!("{s}_summary.json"), format!("{s}_{loss}.dat"), format!("{s}_L2.dat")]
}

fn write_sweep(out: &mut OutputDir, res: &SweepResult) -> Result<(), CliError> {
    let files = sweep_files(res.setting, &res.loss_name);
    out.write(&files[0], &res.to_csv()?)?;
    out.write_json(&files[1], &SweepSummary::from(res))?;
    out.write(&files[2], &res.plot_data(Series::Loss))?;
    out.write(&files[3], &res.plot_data(Series::L2))?;
    Ok(())
}

fn in_window(v: Option<&SlopeFit>, w: [f64; 2]) -> bool {
    v.is_some_and(|s| s.slope >= w[0] && s.slope <= w[1])
}

fn describe(res: &SweepResult) -> String {
    let fmt = |s: Option<SlopeFit>| s.map(|s| format!("{:.3} ± {:.3}", s.slope, s.half_width())).unwrap_or("n/a".into());
    format!(
        "{}: {} slope {}, L2 slope {}, {} excluded cells",
        res.setting,
        res.loss_name,
        fmt(res.loss_slope),
        fmt(res.l2_slope),
        res.excluded
    )
}

pub fn sweep(cfg: &SweepConfig, dry_run: bool, out: &mut OutputDir) -> Result<Outcome, CliError> {
    let mut specs = vec![cfg.sweep.clone()];
    if cfg.paired_non_shared {
        specs.push(cfg.sweep.paired_non_shared()?);
    }
    for s in &specs {
        s.validate()?;
    }
    if dry_run {
        let plan: Vec<_> = specs
            .iter()
            .map(|s| serde_json::json!({"setting": s.setting, "loss": s.loss_name(), "init": s.fit.init, "cells": s.plan()}))
            .collect();
        println!("{}", serde_json::to_string_pretty(&plan).map_err(|e| CliError::Failure(e.to_string()))?);
        return Ok(Outcome::Success);
    }
    let mut names: Vec<String> = specs.iter().flat_map(|s| sweep_files(s.setting, &s.loss_name())).collect();
    if cfg.paired_non_shared {
        names.push("separation.json".into());
    }
    out.check(&names)?;

    let mut results = Vec::new();
    for s in &specs {
        let res = run_sweep(s)?;
        println!("{}", describe(&res));
        write_sweep(out, &res)?;
        results.push(res);
    }

    let mut problems = Vec::new();
    for res in &results {
        let rate = res.max_failure_rate();
        if rate > MAX_FAILURE_RATE {
            let worst: Vec<String> = res
                .aggregates
                .iter()
                .filter(|a| a.failure_rate() > MAX_FAILURE_RATE)
                .map(|a| format!("n={} ({} of {} failed)", a.n, a.excluded, a.count + a.excluded))
                .collect();
            problems.push(format!("{}: fit failure rate above 50% at {}", res.setting, worst.join(", ")));
        }
    }
    let main = &results[0];
    if let Some(w) = cfg.expect.loss_slope {
        if !in_window(main.loss_slope.as_ref(), w) {
            problems.push(format!("{} slope outside [{}, {}]", main.loss_name, w[0], w[1]));
        }
    }
    if let Some(w) = cfg.expect.l2_slope {
        if !in_window(main.l2_slope.as_ref(), w) {
            problems.push(format!("L2 slope outside [{}, {}]", w[0], w[1]));
        }
    }
    if let [shared, non_shared] = &results[..] {
        if let (Some(a), Some(b)) = (shared.loss_slope, non_shared.loss_slope) {
            let sep = Separation {
                shared_loss: shared.loss_name.clone(),
                shared_slope: a.slope,
                non_shared_loss: non_shared.loss_name.clone(),
                non_shared_slope: b.slope,
                separation: b.slope - a.slope,
            };
            println!("separation: {:.3}", sep.separation);
            if let Some(min) = cfg.expect.min_separation {
                if !(sep.separation >= min) {
                    problems.push(format!("separation {:.3} below {min}", sep.separation));
                }
            }
            out.write_json("separation.json", &sep)?;
        } else if cfg.expect.min_separation.is_some() {
            problems.push("separation undefined: a slope could not be fitted".into());
        }
    }
    Ok(if problems.is_empty() { Outcome::Success } else { Outcome::Failure(problems.join("; ")) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WitnessReport {
    pub r: u32,
    pub mc_samples: usize,
    pub tolerance: f64,
    pub max_abs_diff: f64,
    pub rows: Vec<WitnessRow>,
}

pub fn witness(cfg: &WitnessConfig, dry_run: bool, out: &mut OutputDir) -> Result<Outcome, CliError> {
    if cfg.r == 0 {
        return Err(CliError::Config("witness order r must be at least 1".into()));
    }
    if cfg.n_values.contains(&0) {
        return Err(CliError::Config("witness indices n must be at least 1".into()));
    }
    cfg.truth.validate()?;
    if dry_run {
        println!("{}", serde_json::json!({"command": "witness", "r": cfg.r, "n_values": cfg.n_values, "mc_samples": cfg.mc_samples, "seed": cfg.seed}));
        return Ok(Outcome::Success);
    }
    out.check(&["witness.csv".into(), "witness.json".into()])?;
    let rows = witness_table(&cfg.truth, &cfg.n_values, cfg.r, cfg.mc_samples, cfg.seed)?;
    let max_abs_diff = rows.iter().map(WitnessRow::abs_diff).fold(0.0, f64::max);
    let mut csv = String::from("n,closed_form,computed,l2_error,ratio\n");
    for r in &rows {
        csv.push_str(&format!("{},{},{},{},{}\n", r.n, r.closed_form, r.computed, r.l2_error, r.ratio));
        println!("n={:>6}  D={:.6e}  closed form={:.6e}  L2={:.4e}  ratio={:.4e}", r.n, r.computed, r.closed_form, r.l2_error, r.ratio);
    }
    out.write("witness.csv", &csv)?;
    out.write_json("witness.json", &WitnessReport { r: cfg.r, mc_samples: cfg.mc_samples, tolerance: cfg.tolerance, max_abs_diff, rows })?;
    Ok(if max_abs_diff <= cfg.tolerance {
        Outcome::Success
    } else {
        Outcome::Failure(format!("closed form and computed loss differ by {max_abs_diff:e} > {:e}", cfg.tolerance))
    })
}

pub fn gen(cfg: &GenConfig, dry_run: bool, out: &mut OutputDir) -> Result<Outcome, CliError> {
    cfg.model.validate()?;
    if dry_run {
        println!("{}", serde_json::json!({"command": "gen", "n": cfg.n, "seed": cfg.seed, "output": cfg.output}));
        return Ok(Outcome::Success);
    }
    let meta = Dataset::meta_path(Path::new(&cfg.output)).display().to_string();
    out.check(&[cfg.output.clone(), meta.clone()])?;
    let ds = gen_dataset(&cfg.model, cfg.n, cfg.seed)?;
    out.ensure_dir()?;
    ds.write(&out.path(&cfg.output))?;
    out.record(&cfg.output);
    out.record(&meta);
    println!("gen: wrote {} samples to {}", ds.len(), out.path(&cfg.output).display());
    Ok(Outcome::Success)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub setting: Setting,
    pub dataset: String,
    pub n: usize,
    pub init: InitStrategy,
    pub result: FitResult,
    pub loss_name: String,
    pub voronoi_loss: f64,
    pub l2_error: f64,
    pub gradient_check: Option<GradCheckSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckSummary {
    pub step: f64,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradCheckSummary {
    fn new(g: GradCheck) -> Self {
        Self {
            step: g.step,
            max_rel_error: g.max_rel_error,
            tolerance: GRAD_CHECK_TOL,
            passed: g.max_rel_error <= GRAD_CHECK_TOL,
            analytic: g.analytic,
            numeric: g.numeric,
        }
    }
}

pub fn fit_cmd(cfg: &FitCliConfig, grad_check: bool, dry_run: bool, out: &mut OutputDir) -> Result<Outcome, CliError> {
    cfg.fit.validate()?;
    let data_path = out.path(&cfg.dataset);
    let ds = Dataset::read(&data_path)?;
    if ds.meta.setting != cfg.fit.setting {
        return Err(CliError::Config(format!(
            "dataset {} was generated in the {} setting but the fit config asks for {}",
            data_path.display(),
            ds.meta.setting,
            cfg.fit.setting
        )));
    }
    let model = &ds.meta.model;
    let truth = cfg.truth.clone().unwrap_or_else(|| model.measure.clone());
    if truth.setting() != cfg.fit.setting {
        return Err(CliError::Config(format!("reference measure is {} but the fit is {}", truth.setting(), cfg.fit.setting)));
    }
    if dry_run {
        println!("{}", serde_json::json!({"command": "fit", "dataset": cfg.dataset, "n": ds.len(), "fit": cfg.fit, "grad_check": grad_check}));
        return Ok(Outcome::Success);
    }
    out.check(&["fit.json".into()])?;
    let res = fit(&ds, &model.bank, &model.projection, &cfg.fit, Some(&truth))?;
    for w in &res.warnings {
        log::warn!("{w}");
    }
    let loss = voronoi_loss(&res.measure, &truth, 2)?;
    let l2_error = density_l2_error(&model.with_measure(truth.clone()), &res.measure, cfg.mc_samples, child_seed(cfg.fit.seed, 0, 0, "mc"))?;
    let gradient_check = if grad_check {
        Some(GradCheckSummary::new(gradient_check(&res.measure, &model.bank, &model.projection, &ds, cfg.grad_check_step)?))
    } else {
        None
    };
    let report = FitReport {
        setting: cfg.fit.setting,
        dataset: cfg.dataset.clone(),
        n: ds.len(),
        init: cfg.fit.init,
        loss_name: loss_name(cfg.fit.setting, 2),
        voronoi_loss: loss,
        l2_error,
        result: res,
        gradient_check,
    };
    println!(
        "fit: objective {:.6e} after {} iterations (converged: {}), {} = {:.4e}, L2 error {:.4e}",
        report.result.final_objective,
        report.result.iterations,
        report.result.converged,
        report.loss_name,
        report.voronoi_loss,
        report.l2_error
    );
    out.write_json("fit.json", &report)?;
    match &report.gradient_check {
        Some(g) if !g.passed => Ok(Outcome::Failure(format!("gradient check failed: max relative error {:e}", g.max_rel_error))),
        Some(g) => {
            println!("gradient check: max relative error {:.3e}", g.max_rel_error);
            Ok(Outcome::Success)
        }
        None => Ok(Outcome::Success),
    }
}
