use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{config, Result};
use crate::seed::standard_normal;

/// Serde adapter storing a `DMatrix` as a list of rows.
pub(crate) mod rows {
    use nalgebra::DMatrix;
    use serde::{de::Error, Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = m.row_iter().map(|r| r.iter().copied().collect()).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        let ncols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(D::Error::custom("matrix rows have differing lengths"));
        }
        Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
    }
}

/// Element-wise activation used by the one-layer reparameterization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Sigmoid,
    /// Linear map. Accepted for evaluation, rejected as a value activation
    /// for estimation since its second derivative vanishes.
    Identity,
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Self::Tanh => z.tanh(),
            Self::Sigmoid => 1.0 / (1.0 + (-z).exp()),
            Self::Identity => z,
        }
    }

    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Self::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Self::Sigmoid => {
                let s = self.apply(z);
                s * (1.0 - s)
            }
            Self::Identity => 1.0,
        }
    }

    pub fn second_derivative(self, z: f64) -> f64 {
        match self {
            Self::Tanh => {
                let t = z.tanh();
                -2.0 * t * (1.0 - t * t)
            }
            Self::Sigmoid => {
                let s = self.apply(z);
                s * (1.0 - s) * (1.0 - 2.0 * s)
            }
            Self::Identity => 0.0,
        }
    }

    /// Whether the second derivative is nonzero away from a null set.
    pub fn has_curvature(self) -> bool {
        !matches!(self, Self::Identity)
    }
}

/// Functional form `h(X, η)` of the pre-trained experts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertForm {
    /// `h(X, η) = η^T X`
    #[default]
    Linear,
    /// `h(X, η) = η^T X + η_0`
    Affine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainedExpert {
    /// `A⁰_j`, the quadratic gating form.
    #[serde(with = "rows")]
    pub gate_matrix: DMatrix<f64>,
    /// `a⁰_j`
    pub gate_bias: f64,
    /// `η⁰_j`
    pub weights: Vec<f64>,
    /// `η⁰_{j,0}`; only used by [`ExpertForm::Affine`].
    #[serde(default)]
    pub intercept: f64,
}

/// The frozen experts of the pre-trained mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainedBank {
    #[serde(default)]
    pub form: ExpertForm,
    pub experts: Vec<PretrainedExpert>,
}

impl PretrainedBank {
    pub fn new(form: ExpertForm, experts: Vec<PretrainedExpert>) -> Result<Self> {
        let bank = Self { form, experts };
        bank.validate()?;
        Ok(bank)
    }

    /// `A⁰ = 0.1 · (G + G^T)/2` with Gaussian `G`, `a⁰ ~ U(-0.5, 0.5)`,
    /// `η⁰ ~ N(0, I)/sqrt(d)`.
    pub fn random<R: Rng + ?Sized>(count: usize, dim: usize, form: ExpertForm, rng: &mut R) -> Result<Self> {
        let bias = Uniform::new(-0.5, 0.5).expect("valid range");
        let inv_sqrt = 1.0 / (dim as f64).sqrt();
        let experts = (0..count)
            .map(|_| {
                let g = DMatrix::from_fn(dim, dim, |_, _| standard_normal(rng));
                let gate_matrix = (&g + g.transpose()) * 0.05;
                let gate_bias = bias.sample(rng);
                let weights = (0..dim)
                    .map(|_| inv_sqrt * standard_normal(rng))
                    .collect();
                let intercept = match form {
                    ExpertForm::Linear => 0.0,
                    ExpertForm::Affine => inv_sqrt * standard_normal(rng),
                };
                PretrainedExpert { gate_matrix, gate_bias, weights, intercept }
            })
            .collect();
        Self::new(form, experts)
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.experts.first().map_or(0, |e| e.weights.len())
    }

    pub fn validate(&self) -> Result<()> {
        if self.experts.is_empty() {
            return config("pre-trained bank needs at least one expert");
        }
        let d = self.dim();
        for (j, e) in self.experts.iter().enumerate() {
            if e.gate_matrix.shape() != (d, d) || e.weights.len() != d {
                return config(format!("pre-trained expert {j} does not have dimension {d}"));
            }
            if !e.gate_bias.is_finite()
                || !e.intercept.is_finite()
                || !e.weights.iter().chain(e.gate_matrix.iter()).all(|v| v.is_finite())
            {
                return config(format!("pre-trained expert {j} has non-finite entries"));
            }
        }
        Ok(())
    }

    /// Gating logit `X^T A⁰_j X + a⁰_j`.
    pub fn logit(&self, j: usize, x: &[f64]) -> f64 {
        let e = &self.experts[j];
        let a = &e.gate_matrix;
        let mut q = 0.0;
        for r in 0..x.len() {
            let mut t = 0.0;
            for c in 0..x.len() {
                t += a[(r, c)] * x[c];
            }
            q += x[r] * t;
        }
        q + e.gate_bias
    }

    /// Expert output `h(X, η⁰_j)`.
    pub fn output(&self, j: usize, x: &[f64]) -> f64 {
        let e = &self.experts[j];
        let lin: f64 = e.weights.iter().zip(x).map(|(w, v)| w * v).sum();
        match self.form {
            ExpertForm::Linear => lin,
            ExpertForm::Affine => lin + e.intercept,
        }
    }
}

/// Frozen projections `B` (`d × d`) and `C` (`1 × d`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionPair {
    #[serde(with = "rows")]
    pub b: DMatrix<f64>,
    pub c: Vec<f64>,
}

impl ProjectionPair {
    /// Validates shapes; a rank-deficient `B` only logs a warning.
    pub fn new(b: DMatrix<f64>, c: Vec<f64>) -> Result<Self> {
        let p = Self { b, c };
        p.validate()?;
        Ok(p)
    }

    /// `B = I + 0.3 G/sqrt(d)`, `C ~ N(0, I)/sqrt(d) + 0.5` elementwise.
    pub fn random<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Result<Self> {
        let s = 1.0 / (dim as f64).sqrt();
        let g = DMatrix::from_fn(dim, dim, |_, _| standard_normal(rng));
        let b = DMatrix::identity(dim, dim) + g * (0.3 * s);
        let c = (0..dim).map(|_| 0.5 + s * standard_normal(rng)).collect();
        Self::new(b, c)
    }

    pub fn identity(dim: usize) -> Self {
        Self { b: DMatrix::identity(dim, dim), c: vec![1.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.c.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.c.len();
        if d == 0 || self.b.shape() != (d, d) {
            return config(format!("projection B is {:?} but C has length {d}", self.b.shape()));
        }
        if !self.b.iter().chain(&self.c).all(|v| v.is_finite()) {
            return config("projection matrices contain non-finite entries");
        }
        let smin = self.min_singular_value();
        if smin <= 1e-8 {
            log::warn!("projection B is numerically rank deficient (smallest singular value {smin:e})");
        }
        Ok(())
    }

    pub fn min_singular_value(&self) -> f64 {
        self.b
            .clone()
            .singular_values()
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }

    pub fn project_key(&self, key: &[f64]) -> Vec<f64> {
        (self.b.clone() * DVector::from_column_slice(key)).iter().copied().collect()
    }

    pub fn project_value(&self, value: &[f64]) -> f64 {
        self.c.iter().zip(value).map(|(c, v)| c * v).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng;

    #[test]
    fn activation_derivatives_match_central_differences() {
        let h = 1e-5;
        for act in [Activation::Tanh, Activation::Sigmoid, Activation::Identity] {
            for z in [-1.7, -0.2, 0.0, 0.4, 2.3] {
                let d1 = (act.apply(z + h) - act.apply(z - h)) / (2.0 * h);
                let d2 = (act.derivative(z + h) - act.derivative(z - h)) / (2.0 * h);
                assert!((d1 - act.derivative(z)).abs() < 1e-9, "{act:?} {z}");
                assert!((d2 - act.second_derivative(z)).abs() < 1e-9, "{act:?} {z}");
            }
        }
        assert!(!Activation::Identity.has_curvature());
        assert!(Activation::Tanh.has_curvature());
    }

    #[test]
    fn random_bank_is_symmetric_and_small() {
        let bank = PretrainedBank::random(3, 4, ExpertForm::Linear, &mut rng(2)).unwrap();
        for e in &bank.experts {
            assert_eq!(e.gate_matrix, e.gate_matrix.transpose());
            assert!(e.gate_bias.abs() <= 0.5);
            assert_eq!(e.intercept, 0.0);
        }
    }

    #[test]
    fn rank_deficient_b_is_accepted() {
        let p = ProjectionPair::new(DMatrix::zeros(2, 2), vec![1.0, 0.0]).unwrap();
        assert!(p.min_singular_value() <= 1e-8);
        assert!(ProjectionPair::new(DMatrix::zeros(2, 3), vec![1.0, 0.0]).is_err());
    }

    #[test]
    fn matrices_serialize_as_rows() {
        let p = ProjectionPair::new(DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]), vec![1.0, 0.5]).unwrap();
        let s = serde_json::to_string(&p).unwrap();
        assert_eq!(s, r#"{"b":[[1.0,2.0],[3.0,4.0]],"c":[1.0,0.5]}"#);
        let back: ProjectionPair = serde_json::from_str(&s).unwrap();
        assert_eq!(back, p);
        assert!(serde_json::from_str::<ProjectionPair>(r#"{"b":[[1.0],[3.0,4.0]],"c":[1.0]}"#).is_err());
    }
}
