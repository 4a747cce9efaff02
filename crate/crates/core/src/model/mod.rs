//! Regression model whose mean function is a prefix mixture of experts:
//!
//! ```text
//! f(X) = [ Σ_j exp(X^T A⁰_j X + a⁰_j) h(X, η⁰_j) + Σ_i exp((B k_i)^T X + b_i) C v_i ] / D(X)
//! ```
//!
//! where `D(X)` is the sum of all the exponentials, `k_i`/`v_i` are the prefix
//! key/value of atom `i` (see [`measure`]), and `Y = f(X) + ε`, `ε ~ N(0, ν²)`.

mod bank;
mod dataset;
pub mod measure;

pub use bank::{Activation, ExpertForm, PretrainedBank, PretrainedExpert, ProjectionPair};
pub use dataset::{gen_dataset, Dataset, DatasetMeta};
pub use measure::{
    check_identifiability, Identifiability, LinearSharedMeasure, MixingMeasure, NeuralSharedMeasure,
    NonSharedAtom, NonSharedMeasure, PrefixExpert, Setting, SharedAtom, IDENTIFIABILITY_TOL,
};

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{config, Result};
use crate::seed::standard_normal;

/// Distribution `μ` of the covariates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputLaw {
    /// Uniform on `[-half_width, half_width]^d`.
    Uniform { half_width: f64 },
    /// Standard Gaussian conditioned on `‖X‖ ≤ radius`.
    TruncatedGaussian { radius: f64 },
}

impl Default for InputLaw {
    fn default() -> Self {
        Self::Uniform { half_width: 1.0 }
    }
}

impl InputLaw {
    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        match *self {
            Self::Uniform { half_width } => {
                let u = Uniform::new_inclusive(-half_width, half_width).expect("valid width");
                out.iter_mut().for_each(|v| *v = u.sample(rng));
            }
            Self::TruncatedGaussian { radius } => loop {
                out.iter_mut().for_each(|v| *v = standard_normal(rng));
                if out.iter().map(|v| v * v).sum::<f64>() <= radius * radius {
                    break;
                }
            },
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, dim: usize, rng: &mut R) -> Vec<f64> {
        let mut x = vec![0.0; dim];
        self.sample_into(rng, &mut x);
        x
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::Uniform { half_width } if half_width > 0.0 && half_width.is_finite() => Ok(()),
            Self::TruncatedGaussian { radius } if radius > 0.0 && radius.is_finite() => Ok(()),
            _ => config(format!("invalid input law {self:?}")),
        }
    }
}

/// Ground truth (or candidate) regression model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionModel {
    pub bank: PretrainedBank,
    pub projection: ProjectionPair,
    pub measure: MixingMeasure,
    /// Noise standard deviation `ν`.
    pub noise_sd: f64,
    #[serde(default)]
    pub input_law: InputLaw,
}

impl RegressionModel {
    pub fn new(
        bank: PretrainedBank,
        projection: ProjectionPair,
        measure: MixingMeasure,
        noise_sd: f64,
        input_law: InputLaw,
    ) -> Result<Self> {
        let m = Self { bank, projection, measure, noise_sd, input_law };
        m.validate()?;
        Ok(m)
    }

    pub fn dim(&self) -> usize {
        self.projection.dim()
    }

    pub fn validate(&self) -> Result<()> {
        self.bank.validate()?;
        self.projection.validate()?;
        let d = self.dim();
        if self.bank.dim() != d {
            return config(format!("pre-trained bank has dim {} but projections have dim {d}", self.bank.dim()));
        }
        self.measure.validate(d)?;
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return config(format!("noise standard deviation must be finite and >= 0, got {}", self.noise_sd));
        }
        self.input_law.validate()
    }

    /// The same bank, projections and noise with a different measure.
    pub fn with_measure(&self, measure: MixingMeasure) -> Self {
        Self { measure, ..self.clone() }
    }

    /// Reusable evaluator with prefix experts precomputed.
    pub fn evaluator(&self) -> Evaluator<'_> {
        Evaluator { model: self, experts: self.measure.prefix_experts(&self.projection) }
    }

    /// Gate weights at `x`: the `N` pre-trained experts followed by the atoms.
    pub fn gates(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(self.evaluator().gates(x))
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return config(format!("input has length {}, model dimension is {}", x.len(), self.dim()));
        }
        Ok(())
    }
}

/// Evaluates `f(X)` for a model whose prefix experts have been precomputed.
pub struct Evaluator<'a> {
    model: &'a RegressionModel,
    experts: Vec<PrefixExpert>,
}

impl Evaluator<'_> {
    fn logits(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let bank = &self.model.bank;
        let mut logits = Vec::with_capacity(bank.len() + self.experts.len());
        let mut outputs = Vec::with_capacity(logits.capacity());
        for j in 0..bank.len() {
            logits.push(bank.logit(j, x));
            outputs.push(bank.output(j, x));
        }
        for e in &self.experts {
            logits.push(e.gate.iter().zip(x).map(|(g, v)| g * v).sum::<f64>() + e.log_weight);
            outputs.push(e.value);
        }
        (logits, outputs)
    }

    pub fn gates(&self, x: &[f64]) -> Vec<f64> {
        let (mut logits, _) = self.logits(x);
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for l in logits.iter_mut() {
            *l = (*l - max).exp();
            sum += *l;
        }
        logits.iter_mut().for_each(|l| *l /= sum);
        logits
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        let (logits, outputs) = self.logits(x);
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let (mut num, mut den) = (0.0, 0.0);
        for (l, o) in logits.iter().zip(&outputs) {
            let w = (l - max).exp();
            num += w * o;
            den += w;
        }
        num / den
    }
}

/// Evaluates the regression function at one input.
pub fn eval_regression(model: &RegressionModel, x: &[f64]) -> Result<f64> {
    model.check_input(x)?;
    Ok(model.evaluator().eval(x))
}
