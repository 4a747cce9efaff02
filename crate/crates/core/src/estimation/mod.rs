//! Least-squares estimation of mixing measures by projected Adam.
//!
//! Every step takes an Adam update on the full-batch objective and then clips
//! every free parameter to `[-box_bound, box_bound]`. The step size decays
//! geometrically from `learning_rate` to `final_learning_rate` over
//! `max_iters`. A restart stops when the gradient norm drops below
//! `grad_tol`, or when the objective changed by less than
//! `obj_tol · (1 + J)` across the last [`STALL_WINDOW`] iterations. The lowest
//! objective seen in a restart is its result, and the best restart is
//! returned.
//!
//! Initialization is either `multistart` (independent random starts) or
//! `oracle_perturb`, which starts from the true measure (atoms split to reach
//! `L'`) plus Gaussian noise. Rate experiments use the latter because the
//! estimator of interest is the global least-squares minimizer, which random
//! restarts cannot guarantee to find.

mod objective;

pub use objective::{gradient, loss_and_grad, objective, Design};

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{config, usage, Error, Result};
use crate::model::{
    Activation, Dataset, LinearSharedMeasure, MixingMeasure, NeuralSharedMeasure, NonSharedAtom, NonSharedMeasure,
    PretrainedBank, ProjectionPair, Setting, SharedAtom,
};
use crate::seed::{child_seed, rng, standard_normal};

/// Iterations over which the objective change is measured for the stall test.
pub const STALL_WINDOW: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitStrategy {
    Multistart { restarts: usize },
    /// Truth plus `N(0, scale²)` noise on every free parameter.
    OraclePerturb { scale: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub final_learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub max_iters: usize,
    pub grad_tol: f64,
    pub obj_tol: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.02,
            final_learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            max_iters: 20_000,
            grad_tol: 1e-8,
            obj_tol: 1e-10,
        }
    }
}

/// Shape of the neural reparameterization for random starts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeuralShape {
    pub hidden_dim: usize,
    #[serde(default = "tanh")]
    pub key_activation: Activation,
    #[serde(default = "tanh")]
    pub value_activation: Activation,
}

fn tanh() -> Activation {
    Activation::Tanh
}

fn default_bound() -> f64 {
    5.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub setting: Setting,
    /// Number of fitted atoms `L'`.
    pub atoms: usize,
    pub init: InitStrategy,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    /// Coordinate bound `θ_max` of the compact parameter box.
    #[serde(default = "default_bound")]
    pub box_bound: f64,
    #[serde(default)]
    pub seed: u64,
    /// Required for neural-shared multistart fits.
    #[serde(default)]
    pub neural: Option<NeuralShape>,
}

impl FitConfig {
    pub fn oracle(setting: Setting, atoms: usize, scale: f64, seed: u64) -> Self {
        Self {
            setting,
            atoms,
            init: InitStrategy::OraclePerturb { scale },
            optimizer: OptimizerConfig::default(),
            box_bound: default_bound(),
            seed,
            neural: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.atoms == 0 {
            return config("fit needs at least one atom");
        }
        let o = &self.optimizer;
        if o.max_iters == 0 {
            return config("max_iters must be at least 1");
        }
        if !(o.learning_rate > 0.0 && o.final_learning_rate > 0.0) {
            return config("learning rates must be positive");
        }
        if !(self.box_bound > 0.0) {
            return config("box_bound must be positive");
        }
        match self.init {
            InitStrategy::Multistart { restarts: 0 } => config("multistart needs at least one restart"),
            InitStrategy::OraclePerturb { scale } if !(scale >= 0.0) => {
                config("oracle perturbation scale must be non-negative")
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub measure: MixingMeasure,
    pub final_objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub restarts_used: usize,
    pub failed_restarts: usize,
    pub gradient_norm: f64,
    #[serde(default)]
    pub warnings: Vec<String>,
}

struct RestartOutcome {
    measure: MixingMeasure,
    objective: f64,
    iterations: usize,
    converged: bool,
    gradient_norm: f64,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn run_adam(
    start: MixingMeasure,
    proj: &ProjectionPair,
    design: &Design<'_>,
    cfg: &FitConfig,
) -> std::result::Result<RestartOutcome, String> {
    let o = &cfg.optimizer;
    let bound = cfg.box_bound;
    let mut theta = start.params();
    theta.iter_mut().for_each(|v| *v = v.clamp(-bound, bound));
    let mut current = start.with_params(&theta);
    let k = theta.len();
    let (mut m, mut v) = (vec![0.0; k], vec![0.0; k]);
    let mut grad = vec![0.0; k];
    let decay = (o.final_learning_rate / o.learning_rate).ln() / o.max_iters as f64;

    let mut best = (f64::INFINITY, theta.clone(), f64::INFINITY);
    let mut history = std::collections::VecDeque::with_capacity(STALL_WINDOW + 1);
    let mut converged = false;
    let mut iterations = 0;

    for t in 1..=o.max_iters {
        iterations = t;
        let obj = loss_and_grad(&current, proj, design, Some(&mut grad));
        let gnorm = norm(&grad);
        if !obj.is_finite() || !gnorm.is_finite() {
            return Err(format!("non-finite objective at iteration {t}"));
        }
        if obj < best.0 {
            best = (obj, theta.clone(), gnorm);
        }
        if gnorm < o.grad_tol {
            converged = true;
            break;
        }
        history.push_back(obj);
        if history.len() > STALL_WINDOW {
            let old = history.pop_front().unwrap_or(obj);
            if (old - obj).abs() < o.obj_tol * (1.0 + obj) {
                converged = true;
                break;
            }
        }

        let lr = o.learning_rate * (decay * (t - 1) as f64).exp();
        let (bc1, bc2) = (1.0 - o.beta1.powi(t as i32), 1.0 - o.beta2.powi(t as i32));
        for i in 0..k {
            m[i] = o.beta1 * m[i] + (1.0 - o.beta1) * grad[i];
            v[i] = o.beta2 * v[i] + (1.0 - o.beta2) * grad[i] * grad[i];
            let step = lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + o.epsilon);
            theta[i] = (theta[i] - step).clamp(-bound, bound);
        }
        current.set_params(&theta);
    }
    let (objective, theta, gradient_norm) = best;
    Ok(RestartOutcome { measure: start.with_params(&theta), objective, iterations, converged, gradient_norm })
}

/// Splits the truth's atoms to reach `atoms`: atom `i` copies true atom
/// `i mod L`, and each true weight is shared equally among its copies. With
/// fewer fitted than true atoms the first `atoms` true atoms are kept.
pub fn expand_truth(truth: &MixingMeasure, atoms: usize) -> MixingMeasure {
    let l = truth.len();
    let src: Vec<usize> = (0..atoms).map(|i| i % l).collect();
    let copies = |j: usize| src.iter().filter(|&&s| s == j).count() as f64;
    let mut out = truth.permuted(&src);
    let b: Vec<f64> = src.iter().map(|&j| truth.log_weights()[j] - copies(j).ln()).collect();
    match &mut out {
        MixingMeasure::NonShared(m) => m.atoms.iter_mut().zip(&b).for_each(|(a, b)| a.b = *b),
        MixingMeasure::LinearShared(m) => m.atoms.iter_mut().zip(&b).for_each(|(a, b)| a.b = *b),
        MixingMeasure::NeuralShared(m) => m.atoms.iter_mut().zip(&b).for_each(|(a, b)| a.b = *b),
    }
    out
}

fn perturb<R: Rng + ?Sized>(measure: &MixingMeasure, scale: f64, rng: &mut R) -> MixingMeasure {
    if scale == 0.0 {
        return measure.clone();
    }
    let theta: Vec<f64> = measure.params().iter().map(|v| v + scale * standard_normal(rng)).collect();
    measure.with_params(&theta)
}

fn random_start<R: Rng + ?Sized>(cfg: &FitConfig, dim: usize, rng: &mut R) -> Result<MixingMeasure> {
    let b = Uniform::new(-1.0, 1.0).expect("valid range");
    let gauss = |n: usize, s: f64, rng: &mut R| (0..n).map(|_| s * standard_normal(rng)).collect::<Vec<_>>();
    let l = cfg.atoms;
    Ok(match cfg.setting {
        Setting::NonShared => MixingMeasure::NonShared(NonSharedMeasure {
            atoms: (0..l)
                .map(|_| NonSharedAtom { b: b.sample(rng), key: gauss(dim, 1.0, rng), value: gauss(dim, 1.0, rng) })
                .collect(),
        }),
        Setting::LinearShared => MixingMeasure::LinearShared(LinearSharedMeasure {
            atoms: (0..l).map(|_| SharedAtom { b: b.sample(rng), p: gauss(dim, 1.0, rng) }).collect(),
        }),
        Setting::NeuralShared => {
            let Some(shape) = cfg.neural else {
                return config("neural-shared multistart needs the `neural` shape (hidden_dim, activations)");
            };
            let h = shape.hidden_dim;
            let s = 1.0 / (h as f64).sqrt();
            let w1 = DMatrix::from_vec(dim, h, gauss(dim * h, s, rng));
            let w2 = DMatrix::from_vec(dim, h, gauss(dim * h, s, rng));
            MixingMeasure::NeuralShared(NeuralSharedMeasure {
                w1,
                w2,
                key_activation: shape.key_activation,
                value_activation: shape.value_activation,
                atoms: (0..l).map(|_| SharedAtom { b: b.sample(rng), p: gauss(h, 1.0, rng) }).collect(),
            })
        }
    })
}

/// Least-squares fit of a mixing measure with `config.atoms` atoms.
///
/// `truth` is required for `oracle_perturb` initialization and is used for
/// the over-specification check otherwise; its setting must match the
/// configured one.
pub fn fit(
    dataset: &Dataset,
    bank: &PretrainedBank,
    proj: &ProjectionPair,
    config: &FitConfig,
    truth: Option<&MixingMeasure>,
) -> Result<FitResult> {
    config.validate()?;
    let design = Design::new(dataset, bank)?;
    let mut warnings = Vec::new();
    if let Some(t) = truth {
        if t.setting() != config.setting {
            return usage(format!("fit setting {} but reference measure is {}", config.setting, t.setting()));
        }
        if config.atoms < t.len() {
            warnings.push(format!(
                "fitted atom budget L' = {} is below the true number of atoms L = {}; the over-specified regime requires L' >= L",
                config.atoms,
                t.len()
            ));
        }
    }

    let starts: Vec<MixingMeasure> = match config.init {
        InitStrategy::OraclePerturb { scale } => {
            let Some(t) = truth else {
                return usage("oracle_perturb initialization needs the true measure");
            };
            let mut r = rng(child_seed(config.seed, 0, 0, "init"));
            vec![perturb(&expand_truth(t, config.atoms), scale, &mut r)]
        }
        InitStrategy::Multistart { restarts } => (0..restarts)
            .map(|k| random_start(config, dataset.dim(), &mut rng(child_seed(config.seed, k as u64, 0, "init"))))
            .collect::<Result<_>>()?,
    };
    for s in &starts {
        objective::check_design(s, proj, &design)?;
        if let MixingMeasure::NeuralShared(m) = s {
            m.check_value_curvature()?;
        }
    }

    let outcomes = run_restarts(starts, proj, &design, config);
    let failed = outcomes.iter().filter(|o| o.is_err()).count();
    for e in outcomes.iter().filter_map(|o| o.as_ref().err()) {
        warnings.push(format!("restart aborted: {e}"));
    }
    let restarts_used = outcomes.len();
    let best = outcomes
        .into_iter()
        .filter_map(|o| o.ok())
        .reduce(|a, b| if b.objective < a.objective { b } else { a })
        .ok_or_else(|| Error::Optimization(format!("all {restarts_used} restarts failed")))?;
    Ok(FitResult {
        measure: best.measure,
        final_objective: best.objective,
        iterations: best.iterations,
        converged: best.converged,
        restarts_used,
        failed_restarts: failed,
        gradient_norm: best.gradient_norm,
        warnings,
    })
}

type Outcome = std::result::Result<RestartOutcome, String>;

#[cfg(feature = "parallel")]
fn run_restarts(starts: Vec<MixingMeasure>, proj: &ProjectionPair, design: &Design<'_>, cfg: &FitConfig) -> Vec<Outcome> {
    use rayon::prelude::*;
    starts.into_par_iter().map(|s| run_adam(s, proj, design, cfg)).collect()
}

#[cfg(not(feature = "parallel"))]
fn run_restarts(starts: Vec<MixingMeasure>, proj: &ProjectionPair, design: &Design<'_>, cfg: &FitConfig) -> Vec<Outcome> {
    starts.into_iter().map(|s| run_adam(s, proj, design, cfg)).collect()
}

/// Analytic gradient compared with central differences of the objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub step: f64,
    /// `max_k |g_k − fd_k| / max(1, |g_k|, |fd_k|)`
    pub max_rel_error: f64,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

pub fn gradient_check(
    measure: &MixingMeasure,
    bank: &PretrainedBank,
    proj: &ProjectionPair,
    dataset: &Dataset,
    step: f64,
) -> Result<GradCheck> {
    let analytic = gradient(measure, bank, proj, dataset)?;
    let design = Design::new(dataset, bank)?;
    let theta = measure.params();
    let mut probe = measure.clone();
    let mut shifted = theta.clone();
    let numeric: Vec<f64> = (0..theta.len())
        .map(|k| {
            shifted[k] = theta[k] + step;
            probe.set_params(&shifted);
            let up = loss_and_grad(&probe, proj, &design, None);
            shifted[k] = theta[k] - step;
            probe.set_params(&shifted);
            let down = loss_and_grad(&probe, proj, &design, None);
            shifted[k] = theta[k];
            (up - down) / (2.0 * step)
        })
        .collect();
    let max_rel_error = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1.0))
        .fold(0.0, f64::max);
    Ok(GradCheck { step, max_rel_error, analytic, numeric })
}
