//! Browser demo. Each operation takes plain numbers and returns a JSON
//! string, so the page needs no bindings beyond `JSON.parse`.
//!
//! The `*_json` functions are the native entry points; the `#[wasm_bindgen]`
//! wrappers only convert errors.

use prefix_moe::attention::{equivalence_trial, TrialLimits};
use prefix_moe::estimation::{fit, FitConfig};
use prefix_moe::experiments::{density_l2_error, witness_table};
use prefix_moe::model::{gen_dataset, MixingMeasure, RegressionModel, Setting};
use prefix_moe::seed::child_seed;
use prefix_moe::voronoi::voronoi_loss;
use serde::Serialize;
use wasm_bindgen::prelude::*;

const WITNESS_TRUTH: &str = r#"{
  "bank": {"form": "linear", "experts": [{"gate_matrix": [[0, 0], [0, 0]], "gate_bias": 0, "weights": [2, -2]}]},
  "projection": {"b": [[2, 0], [0, 2]], "c": [2, 1]},
  "measure": {"setting": "non_shared", "atoms": [
    {"b": 0, "key": [1.0, 0.0], "value": [0.5, -0.5]},
    {"b": -0.5, "key": [-1.0, 0.5], "value": [-0.4, 0.8]}]},
  "noise_sd": 0.1
}"#;

const FIT_TRUTH: &str = r#"{
  "bank": {"form": "linear", "experts": [{"gate_matrix": [[0, 0], [0, 0]], "gate_bias": 0, "weights": [2, -2]}]},
  "projection": {"b": [[2, 0], [0, 2]], "c": [2, 1]},
  "measure": {"setting": "linear_shared", "atoms": [{"b": 0, "p": [1.2, -0.6]}, {"b": 0, "p": [-0.9, 1.2]}]},
  "noise_sd": 0.1
}"#;

/// Largest sample size accepted by [`fit_json`]; keeps the page responsive.
pub const MAX_FIT_SAMPLES: usize = 5_000;

fn model(text: &str) -> RegressionModel {
    serde_json::from_str(text).expect("built-in model parses")
}

fn to_json<T: Serialize>(value: &T) -> Result<String, String> {
    serde_json::to_string(value).map_err(|e| e.to_string())
}

/// One random attention instance checked against both MoE decompositions.
pub fn equivalence_json(seed: u32, max_tokens: usize, max_dim: usize, max_heads: usize, max_prompts: usize) -> Result<String, String> {
    let limits = TrialLimits { max_tokens, max_dim, max_heads, max_prompts };
    let trial = equivalence_trial(u64::from(seed), limits).map_err(|e| e.to_string())?;
    to_json(&trial)
}

/// Witness table on a log-spaced grid of `points` indices in `[2, n_max]`.
pub fn witness_json(r: u32, n_max: u32, points: usize, mc_samples: usize) -> Result<String, String> {
    if n_max < 2 || points < 2 {
        return Err("need n_max >= 2 and at least 2 points".into());
    }
    let step = (f64::from(n_max) / 2.0).ln() / (points - 1) as f64;
    let mut ns: Vec<u64> = (0..points).map(|k| (2.0 * (step * k as f64).exp()).round() as u64).collect();
    ns.dedup();
    let rows = witness_table(&model(WITNESS_TRUTH), &ns, r, mc_samples, 7).map_err(|e| e.to_string())?;
    to_json(&rows)
}

#[derive(Serialize)]
struct FitSummary {
    n: usize,
    noise_sd: f64,
    truth: MixingMeasure,
    fitted: MixingMeasure,
    loss_d2: f64,
    l2_error: f64,
    objective: f64,
    iterations: usize,
    converged: bool,
}

/// Fits `atoms` linear-shared atoms to `n` samples of a fixed two-atom truth,
/// starting from the truth perturbed by `N(0, 0.1²)`.
pub fn fit_json(n: usize, noise_sd: f64, atoms: usize, max_iters: usize, seed: u32) -> Result<String, String> {
    if n == 0 || n > MAX_FIT_SAMPLES {
        return Err(format!("n must be in 1..={MAX_FIT_SAMPLES}"));
    }
    let mut truth = model(FIT_TRUTH);
    truth.noise_sd = noise_sd;
    truth.validate().map_err(|e| e.to_string())?;
    let seed = u64::from(seed);
    let data = gen_dataset(&truth, n, child_seed(seed, n as u64, 0, "data")).map_err(|e| e.to_string())?;
    let mut cfg = FitConfig::oracle(Setting::LinearShared, atoms, 0.1, child_seed(seed, n as u64, 0, "fit"));
    cfg.optimizer.max_iters = max_iters;
    let res = fit(&data, &truth.bank, &truth.projection, &cfg, Some(&truth.measure)).map_err(|e| e.to_string())?;
    let loss_d2 = voronoi_loss(&res.measure, &truth.measure, 2).map_err(|e| e.to_string())?;
    let l2_error = density_l2_error(&truth, &res.measure, 5_000, child_seed(seed, 0, 0, "mc")).map_err(|e| e.to_string())?;
    to_json(&FitSummary {
        n,
        noise_sd,
        truth: truth.measure.clone(),
        fitted: res.measure,
        loss_d2,
        l2_error,
        objective: res.final_objective,
        iterations: res.iterations,
        converged: res.converged,
    })
}

fn js(r: Result<String, String>) -> Result<String, JsError> {
    r.map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn equivalence(seed: u32, max_tokens: usize, max_dim: usize, max_heads: usize, max_prompts: usize) -> Result<String, JsError> {
    js(equivalence_json(seed, max_tokens, max_dim, max_heads, max_prompts))
}

#[wasm_bindgen]
pub fn witness(r: u32, n_max: u32, points: usize, mc_samples: usize) -> Result<String, JsError> {
    js(witness_json(r, n_max, points, mc_samples))
}

#[wasm_bindgen]
pub fn fit_small(n: usize, noise_sd: f64, atoms: usize, max_iters: usize, seed: u32) -> Result<String, JsError> {
    js(fit_json(n, noise_sd, atoms, max_iters, seed))
}
