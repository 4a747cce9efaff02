//! Sample-size sweeps: for every `(n, rep)` cell a fresh dataset is drawn
//! from the truth, a measure is fitted and its Voronoi loss and `L²(μ)`
//! density error are recorded. Per-`n` means are then regressed on `log n`.
//!
//! Cell seeds come from [`child_seed`] with roles `"data"` and `"fit"`, so
//! adding sample sizes or replications never changes existing cells, and two
//! sweeps with the same seed and the same regression function see identical
//! covariates and noise. All cells share the Monte-Carlo draws of the
//! `L²(μ)` estimate.

use serde::{Deserialize, Serialize};

use super::l2::density_l2_error;
use super::slope::{fit_slope, SlopeFit};
use crate::error::{config, Result};
use crate::estimation::{fit, FitConfig};
use crate::model::{check_identifiability, gen_dataset, MixingMeasure, RegressionModel, Setting, IDENTIFIABILITY_TOL};
use crate::seed::{child_seed, role_seed};
use crate::voronoi::{loss_name, voronoi_loss};

fn two() -> u32 {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub setting: Setting,
    pub truth: RegressionModel,
    pub sample_sizes: Vec<usize>,
    pub replications: usize,
    /// Template; its seed is replaced per cell.
    pub fit: FitConfig,
    /// Monte-Carlo draws `M` for the density error.
    pub mc_samples: usize,
    pub seed: u64,
    /// Order `r` of `D_{1,r}`; ignored by the shared settings.
    #[serde(default = "two")]
    pub loss_order: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellPlan {
    pub n: usize,
    pub rep: usize,
    pub data_seed: u64,
    pub fit_seed: u64,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        self.truth.validate()?;
        if self.truth.measure.setting() != self.setting || self.fit.setting != self.setting {
            return config(format!(
                "sweep setting {} must match the truth ({}) and the fit config ({})",
                self.setting,
                self.truth.measure.setting(),
                self.fit.setting
            ));
        }
        if self.sample_sizes.is_empty() || self.sample_sizes[0] == 0 {
            return config("sample_sizes must be non-empty and positive");
        }
        if self.sample_sizes.windows(2).any(|w| w[0] >= w[1]) {
            return config("sample_sizes must be strictly increasing");
        }
        if self.replications == 0 {
            return config("replications must be at least 1");
        }
        if self.mc_samples == 0 {
            return config("mc_samples must be at least 1");
        }
        if self.loss_order == 0 {
            return config("loss_order must be at least 1");
        }
        self.fit.validate()
    }

    /// Cells in output order (by `n`, then replication) with their seeds.
    pub fn plan(&self) -> Vec<CellPlan> {
        self.sample_sizes
            .iter()
            .flat_map(|&n| {
                (0..self.replications).map(move |rep| CellPlan {
                    n,
                    rep,
                    data_seed: child_seed(self.seed, n as u64, rep as u64, "data"),
                    fit_seed: child_seed(self.seed, n as u64, rep as u64, "fit"),
                })
            })
            .collect()
    }

    pub fn loss_name(&self) -> String {
        loss_name(self.setting, self.loss_order)
    }

    /// The same sweep run in the non-shared parameterization of a
    /// linear-shared truth (`k_i = v_i = p_i`). The regression function, and
    /// therefore every dataset, is unchanged.
    pub fn paired_non_shared(&self) -> Result<SweepSpec> {
        let MixingMeasure::LinearShared(m) = &self.truth.measure else {
            return config("paired non-shared sweep needs a linear_shared truth");
        };
        let truth = self.truth.with_measure(MixingMeasure::NonShared(m.to_non_shared()));
        let mut fit = self.fit.clone();
        fit.setting = Setting::NonShared;
        Ok(SweepSpec { setting: Setting::NonShared, truth, fit, ..self.clone() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub n: usize,
    pub rep: usize,
    pub data_seed: u64,
    pub loss: Option<f64>,
    pub l2_error: Option<f64>,
    pub objective: Option<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Set when the fit failed; such cells are excluded from aggregates.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub n: usize,
    pub count: usize,
    pub excluded: usize,
    pub mean_loss: Option<f64>,
    pub median_loss: Option<f64>,
    pub mean_l2: Option<f64>,
    pub median_l2: Option<f64>,
}

impl Aggregate {
    pub fn failure_rate(&self) -> f64 {
        self.excluded as f64 / (self.count + self.excluded) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub setting: Setting,
    pub loss_name: String,
    pub records: Vec<CellRecord>,
    pub aggregates: Vec<Aggregate>,
    /// Slope of `log mean loss` against `log n`.
    pub loss_slope: Option<SlopeFit>,
    /// Slope of `log mean L²(μ) error` against `log n`.
    pub l2_slope: Option<SlopeFit>,
    pub excluded: usize,
    pub spec: SweepSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Series {
    Loss,
    L2,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn median(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let k = s.len();
    Some(if k % 2 == 1 { s[k / 2] } else { 0.5 * (s[k / 2 - 1] + s[k / 2]) })
}

fn log_slope(aggs: &[Aggregate], pick: impl Fn(&Aggregate) -> Option<f64>) -> Option<SlopeFit> {
    let (xs, ys): (Vec<f64>, Vec<f64>) = aggs
        .iter()
        .filter_map(|a| pick(a).filter(|v| *v > 0.0).map(|v| ((a.n as f64).ln(), v.ln())))
        .unzip();
    fit_slope(&xs, &ys).ok()
}

fn run_cell(spec: &SweepSpec, plan: CellPlan, mc_seed: u64) -> CellRecord {
    let mut record = CellRecord {
        n: plan.n,
        rep: plan.rep,
        data_seed: plan.data_seed,
        loss: None,
        l2_error: None,
        objective: None,
        converged: false,
        iterations: 0,
        error: None,
    };
    let outcome = (|| -> Result<()> {
        let data = gen_dataset(&spec.truth, plan.n, plan.data_seed)?;
        let cfg = FitConfig { seed: plan.fit_seed, ..spec.fit.clone() };
        let t = &spec.truth;
        let res = fit(&data, &t.bank, &t.projection, &cfg, Some(&t.measure))?;
        record.objective = Some(res.final_objective);
        record.converged = res.converged;
        record.iterations = res.iterations;
        record.loss = Some(voronoi_loss(&res.measure, &t.measure, spec.loss_order)?);
        record.l2_error = Some(density_l2_error(t, &res.measure, spec.mc_samples, mc_seed)?);
        Ok(())
    })();
    if let Err(e) = outcome {
        log::warn!("sweep cell n={} rep={} failed: {e}", plan.n, plan.rep);
        record.loss = None;
        record.l2_error = None;
        record.error = Some(e.to_string());
    }
    record
}

#[cfg(feature = "parallel")]
fn run_cells(spec: &SweepSpec, plan: Vec<CellPlan>, mc_seed: u64) -> Vec<CellRecord> {
    use rayon::prelude::*;
    plan.into_par_iter().map(|p| run_cell(spec, p, mc_seed)).collect()
}

#[cfg(not(feature = "parallel"))]
fn run_cells(spec: &SweepSpec, plan: Vec<CellPlan>, mc_seed: u64) -> Vec<CellRecord> {
    plan.into_iter().map(|p| run_cell(spec, p, mc_seed)).collect()
}

/// Runs every cell of `spec`. Fails only on an invalid spec or a truth whose
/// projected prompts are not pairwise distinct; fit failures are recorded
/// per cell.
pub fn run_sweep(spec: &SweepSpec) -> Result<SweepResult> {
    spec.validate()?;
    let id = check_identifiability(&spec.truth.measure, &spec.truth.projection, IDENTIFIABILITY_TOL);
    if !id.passed {
        return config(format!(
            "truth is not identifiable: two projected prompts are {:.3e} apart",
            id.min_distance
        ));
    }
    let records = run_cells(spec, spec.plan(), role_seed(spec.seed, "mc"));
    let aggregates: Vec<Aggregate> = spec
        .sample_sizes
        .iter()
        .map(|&n| {
            let cell: Vec<&CellRecord> = records.iter().filter(|r| r.n == n).collect();
            let loss: Vec<f64> = cell.iter().filter_map(|r| r.loss).collect();
            let l2: Vec<f64> = cell.iter().filter_map(|r| r.l2_error).collect();
            Aggregate {
                n,
                count: loss.len(),
                excluded: cell.len() - loss.len(),
                mean_loss: mean(&loss),
                median_loss: median(&loss),
                mean_l2: mean(&l2),
                median_l2: median(&l2),
            }
        })
        .collect();
    Ok(SweepResult {
        setting: spec.setting,
        loss_name: spec.loss_name(),
        loss_slope: log_slope(&aggregates, |a| a.mean_loss),
        l2_slope: log_slope(&aggregates, |a| a.mean_l2),
        excluded: aggregates.iter().map(|a| a.excluded).sum(),
        records,
        aggregates,
        spec: spec.clone(),
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl SweepResult {
    /// Long-format CSV: `setting,n,rep,loss_name,loss_value,l2_error,objective,converged`.
    /// Failed cells leave the numeric columns empty.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["setting", "n", "rep", "loss_name", "loss_value", "l2_error", "objective", "converged"])?;
        for r in &self.records {
            w.write_record([
                self.setting.as_str().to_string(),
                r.n.to_string(),
                r.rep.to_string(),
                self.loss_name.clone(),
                opt(r.loss),
                opt(r.l2_error),
                opt(r.objective),
                r.converged.to_string(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| crate::Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Whitespace-separated `log n` / `log mean` columns for gnuplot.
    pub fn plot_data(&self, series: Series) -> String {
        let name = match series {
            Series::Loss => self.loss_name.as_str(),
            Series::L2 => "L2",
        };
        let mut out = format!("# log_n log_mean_{name}\n");
        for a in &self.aggregates {
            let v = match series {
                Series::Loss => a.mean_loss,
                Series::L2 => a.mean_l2,
            };
            if let Some(v) = v.filter(|v| *v > 0.0) {
                out.push_str(&format!("{} {}\n", (a.n as f64).ln(), v.ln()));
            }
        }
        out
    }

    pub fn max_failure_rate(&self) -> f64 {
        self.aggregates.iter().map(Aggregate::failure_rate).fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ExpertForm, InputLaw, LinearSharedMeasure, PretrainedBank, ProjectionPair, SharedAtom};
    use crate::seed::rng;

    fn spec(noise: f64, scale: f64) -> SweepSpec {
        let mut r = rng(2);
        let truth = RegressionModel::new(
            PretrainedBank::random(2, 2, ExpertForm::Linear, &mut r).unwrap(),
            ProjectionPair::random(2, &mut r).unwrap(),
            MixingMeasure::LinearShared(LinearSharedMeasure {
                atoms: vec![SharedAtom { b: 0.1, p: vec![1.0, -0.5] }, SharedAtom { b: -0.2, p: vec![-0.8, 0.6] }],
            }),
            noise,
            InputLaw::default(),
        )
        .unwrap();
        let mut fit = FitConfig::oracle(Setting::LinearShared, 2, scale, 0);
        fit.optimizer.max_iters = 400;
        SweepSpec {
            setting: Setting::LinearShared,
            truth,
            sample_sizes: vec![50, 100, 200],
            replications: 2,
            fit,
            mc_samples: 500,
            seed: 11,
            loss_order: 2,
        }
    }

    #[test]
    fn noiseless_oracle_cells_have_zero_loss() {
        let s = SweepSpec { sample_sizes: vec![100], replications: 1, ..spec(0.0, 0.0) };
        let r = run_sweep(&s).unwrap();
        assert_eq!(r.records.len(), 1);
        assert!(r.records[0].loss.unwrap() < 1e-12);
        assert!(r.loss_slope.is_none());
    }

    #[test]
    fn record_count_and_determinism() {
        let s = spec(0.1, 0.1);
        let a = run_sweep(&s).unwrap();
        assert_eq!(a.records.len(), 6);
        assert_eq!(a.aggregates.len(), 3);
        assert!(a.loss_slope.is_some() && a.l2_slope.is_some());
        let b = run_sweep(&s).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert_eq!(a.to_csv().unwrap(), b.to_csv().unwrap());
        let csv = a.to_csv().unwrap();
        assert!(csv.starts_with("setting,n,rep,loss_name,loss_value,l2_error,objective,converged\nlinear_shared,50,0,D2,"));
    }

    #[test]
    fn adding_sizes_keeps_existing_cells() {
        let s = spec(0.1, 0.1);
        let small = SweepSpec { sample_sizes: vec![100], ..s.clone() };
        let a = run_sweep(&small).unwrap();
        let b = run_sweep(&s).unwrap();
        assert_eq!(a.records[..], b.records[2..4]);
    }

    #[test]
    fn paired_sweep_sees_identical_data() {
        let s = spec(0.1, 0.1);
        let p = s.paired_non_shared().unwrap();
        for (a, b) in s.plan().iter().zip(p.plan()) {
            let da = gen_dataset(&s.truth, a.n, a.data_seed).unwrap();
            let db = gen_dataset(&p.truth, b.n, b.data_seed).unwrap();
            assert_eq!(da.x, db.x);
            for (ya, yb) in da.y.iter().zip(&db.y) {
                assert!((ya - yb).abs() <= 1e-14);
            }
        }
        assert_eq!(p.loss_name(), "D1_2");
    }

    #[test]
    fn invalid_specs() {
        let s = spec(0.1, 0.1);
        assert!(SweepSpec { sample_sizes: vec![100, 100], ..s.clone() }.validate().is_err());
        assert!(SweepSpec { replications: 0, ..s.clone() }.validate().is_err());
        assert!(SweepSpec { setting: Setting::NonShared, ..s.clone() }.validate().is_err());
        let mut dup = s.clone();
        if let MixingMeasure::LinearShared(m) = &mut dup.truth.measure {
            m.atoms[1].p = m.atoms[0].p.clone();
        }
        assert!(matches!(run_sweep(&dup), Err(crate::Error::Config(_))));
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }
}
