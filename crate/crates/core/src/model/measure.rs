//! Mixing measures over prompt parameters.
//!
//! Each atom carries a log-weight `b` (its gate bias, weight `exp(b)`) and
//! prompt parameters whose form depends on the setting:
//!
//! | setting         | atom parameters | prefix key       | prefix value     |
//! |-----------------|-----------------|------------------|------------------|
//! | `NonShared`     | `(b, pK, pV)`   | `pK`             | `pV`             |
//! | `LinearShared`  | `(b, p)`        | `p`              | `p`              |
//! | `NeuralShared`  | `(b, p)`        | `σ̄₁(W₁ p)`       | `σ̄₂(W₂ p)`       |
//!
//! `W₁`, `W₂` (`d × d'`) are shared by all atoms of a neural measure.
//!
//! Flat parameter order, used by the gradient and optimizer: atoms in order,
//! each as `b` followed by its prompt coordinates (`pK` then `pV` for the
//! non-shared setting); for the neural setting the atoms are followed by
//! `W₁` row-major and then `W₂` row-major.

use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::bank::{rows, Activation, ProjectionPair};
use crate::error::{config, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    NonShared,
    LinearShared,
    NeuralShared,
}

impl Setting {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::NonShared => "non_shared",
            Self::LinearShared => "linear_shared",
            Self::NeuralShared => "neural_shared",
        }
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonSharedAtom {
    pub b: f64,
    pub key: Vec<f64>,
    pub value: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharedAtom {
    pub b: f64,
    pub p: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonSharedMeasure {
    pub atoms: Vec<NonSharedAtom>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearSharedMeasure {
    pub atoms: Vec<SharedAtom>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuralSharedMeasure {
    #[serde(with = "rows")]
    pub w1: DMatrix<f64>,
    #[serde(with = "rows")]
    pub w2: DMatrix<f64>,
    #[serde(default = "tanh")]
    pub key_activation: Activation,
    #[serde(default = "tanh")]
    pub value_activation: Activation,
    pub atoms: Vec<SharedAtom>,
}

fn tanh() -> Activation {
    Activation::Tanh
}

fn mat_vec(w: &DMatrix<f64>, p: &[f64]) -> Vec<f64> {
    (0..w.nrows())
        .map(|r| (0..w.ncols()).map(|c| w[(r, c)] * p[c]).sum())
        .collect()
}

impl NeuralSharedMeasure {
    pub fn hidden_dim(&self) -> usize {
        self.w1.ncols()
    }

    /// `W₁ p_i`
    pub fn key_pre(&self, i: usize) -> Vec<f64> {
        mat_vec(&self.w1, &self.atoms[i].p)
    }

    /// `W₂ p_i`
    pub fn value_pre(&self, i: usize) -> Vec<f64> {
        mat_vec(&self.w2, &self.atoms[i].p)
    }

    /// The (A.2)-style condition used by estimation: the value activation must
    /// have non-vanishing curvature.
    pub fn check_value_curvature(&self) -> Result<()> {
        if !self.value_activation.has_curvature() {
            return config(format!(
                "value activation {:?} has zero second derivative; it cannot be used for estimation",
                self.value_activation
            ));
        }
        Ok(())
    }
}

/// A mixing measure in one of the three prompt parameterizations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "setting", rename_all = "snake_case")]
pub enum MixingMeasure {
    NonShared(NonSharedMeasure),
    LinearShared(LinearSharedMeasure),
    NeuralShared(NeuralSharedMeasure),
}

/// A prefix expert as seen by the regression function: gate direction `B pK`,
/// log-weight `b` and scalar output `C pV`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefixExpert {
    pub log_weight: f64,
    pub gate: Vec<f64>,
    pub value: f64,
}

impl MixingMeasure {
    pub fn setting(&self) -> Setting {
        match self {
            Self::NonShared(_) => Setting::NonShared,
            Self::LinearShared(_) => Setting::LinearShared,
            Self::NeuralShared(_) => Setting::NeuralShared,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Self::NonShared(m) => m.atoms.len(),
            Self::LinearShared(m) => m.atoms.len(),
            Self::NeuralShared(m) => m.atoms.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn log_weights(&self) -> Vec<f64> {
        match self {
            Self::NonShared(m) => m.atoms.iter().map(|a| a.b).collect(),
            Self::LinearShared(m) => m.atoms.iter().map(|a| a.b).collect(),
            Self::NeuralShared(m) => m.atoms.iter().map(|a| a.b).collect(),
        }
    }

    /// Prefix key and value vectors of each atom in embedding space.
    pub fn key_values(&self) -> Vec<(Vec<f64>, Vec<f64>)> {
        match self {
            Self::NonShared(m) => m.atoms.iter().map(|a| (a.key.clone(), a.value.clone())).collect(),
            Self::LinearShared(m) => m.atoms.iter().map(|a| (a.p.clone(), a.p.clone())).collect(),
            Self::NeuralShared(m) => (0..m.atoms.len())
                .map(|i| {
                    let k = m.key_pre(i).into_iter().map(|z| m.key_activation.apply(z)).collect();
                    let v = m.value_pre(i).into_iter().map(|z| m.value_activation.apply(z)).collect();
                    (k, v)
                })
                .collect(),
        }
    }

    /// Point used for Voronoi cells: `(pK, pV)`, `p`, or `(W₁p, W₂p)`.
    pub fn voronoi_embedding(&self) -> Vec<Vec<f64>> {
        match self {
            Self::NonShared(m) => m
                .atoms
                .iter()
                .map(|a| a.key.iter().chain(&a.value).copied().collect())
                .collect(),
            Self::LinearShared(m) => m.atoms.iter().map(|a| a.p.clone()).collect(),
            Self::NeuralShared(m) => (0..m.atoms.len())
                .map(|i| {
                    let mut e = m.key_pre(i);
                    e.extend(m.value_pre(i));
                    e
                })
                .collect(),
        }
    }

    pub fn prefix_experts(&self, proj: &ProjectionPair) -> Vec<PrefixExpert> {
        self.log_weights()
            .into_iter()
            .zip(self.key_values())
            .map(|(b, (k, v))| PrefixExpert {
                log_weight: b,
                gate: proj.project_key(&k),
                value: proj.project_value(&v),
            })
            .collect()
    }

    /// The same regression function expressed with independent keys and values.
    pub fn to_non_shared(&self) -> NonSharedMeasure {
        NonSharedMeasure {
            atoms: self
                .log_weights()
                .into_iter()
                .zip(self.key_values())
                .map(|(b, (key, value))| NonSharedAtom { b, key, value })
                .collect(),
        }
    }

    /// Dimension `d` of the prefix keys/values.
    pub fn embed_dim(&self) -> usize {
        match self {
            Self::NonShared(m) => m.atoms.first().map_or(0, |a| a.key.len()),
            Self::LinearShared(m) => m.atoms.first().map_or(0, |a| a.p.len()),
            Self::NeuralShared(m) => m.w1.nrows(),
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        let bad = |what: &str| config(format!("{} measure: {what}", self.setting()));
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        match self {
            Self::NonShared(m) => {
                for a in &m.atoms {
                    if a.key.len() != dim || a.value.len() != dim {
                        return bad(&format!("atom prompts must have length {dim}"));
                    }
                    if !a.b.is_finite() || !finite(&a.key) || !finite(&a.value) {
                        return bad("non-finite parameter");
                    }
                }
            }
            Self::LinearShared(m) => {
                for a in &m.atoms {
                    if a.p.len() != dim {
                        return bad(&format!("atom prompts must have length {dim}"));
                    }
                    if !a.b.is_finite() || !finite(&a.p) {
                        return bad("non-finite parameter");
                    }
                }
            }
            Self::NeuralShared(m) => {
                let h = m.w1.ncols();
                if m.w1.shape() != (dim, h) || m.w2.shape() != (dim, h) || h == 0 {
                    return bad(&format!(
                        "W1 {:?} and W2 {:?} must both be {dim} x d'",
                        m.w1.shape(),
                        m.w2.shape()
                    ));
                }
                if !finite(m.w1.as_slice()) || !finite(m.w2.as_slice()) {
                    return bad("non-finite weights");
                }
                for a in &m.atoms {
                    if a.p.len() != h {
                        return bad(&format!("atom prompts must have length d' = {h}"));
                    }
                    if !a.b.is_finite() || !finite(&a.p) {
                        return bad("non-finite parameter");
                    }
                }
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        match self {
            Self::NonShared(m) => m.atoms.iter().map(|a| 1 + a.key.len() + a.value.len()).sum(),
            Self::LinearShared(m) => m.atoms.iter().map(|a| 1 + a.p.len()).sum(),
            Self::NeuralShared(m) => {
                m.atoms.iter().map(|a| 1 + a.p.len()).sum::<usize>() + m.w1.len() + m.w2.len()
            }
        }
    }

    /// Flattens the free parameters (see module docs for the order).
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        match self {
            Self::NonShared(m) => {
                for a in &m.atoms {
                    out.push(a.b);
                    out.extend(&a.key);
                    out.extend(&a.value);
                }
            }
            Self::LinearShared(m) => {
                for a in &m.atoms {
                    out.push(a.b);
                    out.extend(&a.p);
                }
            }
            Self::NeuralShared(m) => {
                for a in &m.atoms {
                    out.push(a.b);
                    out.extend(&a.p);
                }
                push_row_major(&mut out, &m.w1);
                push_row_major(&mut out, &m.w2);
            }
        }
        out
    }

    /// Overwrites the free parameters from a flat slice of `param_count()` values.
    pub fn set_params(&mut self, theta: &[f64]) {
        assert_eq!(theta.len(), self.param_count(), "parameter vector length");
        let mut it = theta.iter().copied();
        let mut fill = |dst: &mut [f64]| dst.iter_mut().for_each(|v| *v = it.next().unwrap());
        match self {
            Self::NonShared(m) => {
                for a in &mut m.atoms {
                    fill(std::slice::from_mut(&mut a.b));
                    fill(&mut a.key);
                    fill(&mut a.value);
                }
            }
            Self::LinearShared(m) => {
                for a in &mut m.atoms {
                    fill(std::slice::from_mut(&mut a.b));
                    fill(&mut a.p);
                }
            }
            Self::NeuralShared(m) => {
                for a in &mut m.atoms {
                    fill(std::slice::from_mut(&mut a.b));
                    fill(&mut a.p);
                }
                for w in [&mut m.w1, &mut m.w2] {
                    for r in 0..w.nrows() {
                        for c in 0..w.ncols() {
                            let mut v = [0.0];
                            fill(&mut v);
                            w[(r, c)] = v[0];
                        }
                    }
                }
            }
        }
    }

    pub fn with_params(&self, theta: &[f64]) -> Self {
        let mut m = self.clone();
        m.set_params(theta);
        m
    }

    /// Whether every free parameter lies in `[-bound, bound]`.
    pub fn in_box(&self, bound: f64) -> bool {
        self.params().iter().all(|v| v.abs() <= bound)
    }

    /// Applies a permutation to the atoms: atom `i` of the result is atom `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        fn pick<T: Clone>(v: &[T], perm: &[usize]) -> Vec<T> {
            perm.iter().map(|&i| v[i].clone()).collect()
        }
        match self {
            Self::NonShared(m) => Self::NonShared(NonSharedMeasure { atoms: pick(&m.atoms, perm) }),
            Self::LinearShared(m) => Self::LinearShared(LinearSharedMeasure { atoms: pick(&m.atoms, perm) }),
            Self::NeuralShared(m) => Self::NeuralShared(NeuralSharedMeasure {
                atoms: pick(&m.atoms, perm),
                ..m.clone()
            }),
        }
    }
}

fn push_row_major(out: &mut Vec<f64>, w: &DMatrix<f64>) {
    for r in 0..w.nrows() {
        for c in 0..w.ncols() {
            out.push(w[(r, c)]);
        }
    }
}

impl From<NonSharedMeasure> for MixingMeasure {
    fn from(m: NonSharedMeasure) -> Self {
        Self::NonShared(m)
    }
}

impl From<LinearSharedMeasure> for MixingMeasure {
    fn from(m: LinearSharedMeasure) -> Self {
        Self::LinearShared(m)
    }
}

impl From<NeuralSharedMeasure> for MixingMeasure {
    fn from(m: NeuralSharedMeasure) -> Self {
        Self::NeuralShared(m)
    }
}

impl LinearSharedMeasure {
    pub fn to_non_shared(&self) -> NonSharedMeasure {
        MixingMeasure::LinearShared(self.clone()).to_non_shared()
    }
}

/// Outcome of the pairwise-distinct check on projected prompt keys.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Identifiability {
    pub passed: bool,
    /// Smallest pairwise distance between projected keys, `+inf` for one atom.
    pub min_distance: f64,
}

pub const IDENTIFIABILITY_TOL: f64 = 1e-6;

/// Checks that the gate directions `B pK_j` (`B p_j`, `B σ̄₁(W₁ p_j)`) of the
/// atoms are pairwise distinct.
pub fn check_identifiability(measure: &MixingMeasure, proj: &ProjectionPair, tol: f64) -> Identifiability {
    let gates: Vec<Vec<f64>> = measure.prefix_experts(proj).into_iter().map(|e| e.gate).collect();
    let mut min_distance = f64::INFINITY;
    for i in 0..gates.len() {
        for j in i + 1..gates.len() {
            min_distance = min_distance.min(euclidean(&gates[i], &gates[j]));
        }
    }
    Identifiability { passed: min_distance >= tol, min_distance }
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::{rng, standard_normal};

    fn neural(d: usize, h: usize, atoms: usize, seed: u64) -> MixingMeasure {
        let mut r = rng(seed);
        let mut g = |n: usize| (0..n).map(|_| standard_normal(&mut r)).collect::<Vec<_>>();
        let w1 = DMatrix::from_vec(d, h, g(d * h));
        let w2 = DMatrix::from_vec(d, h, g(d * h));
        let atoms = (0..atoms).map(|_| SharedAtom { b: g(1)[0], p: g(h) }).collect();
        MixingMeasure::NeuralShared(NeuralSharedMeasure {
            w1,
            w2,
            key_activation: Activation::Tanh,
            value_activation: Activation::Tanh,
            atoms,
        })
    }

    #[test]
    fn params_round_trip_and_order() {
        let m = neural(3, 2, 2, 4);
        let theta = m.params();
        assert_eq!(theta.len(), m.param_count());
        assert_eq!(theta.len(), 2 * 3 + 12);
        let MixingMeasure::NeuralShared(n) = &m else { unreachable!() };
        assert_eq!(theta[0], n.atoms[0].b);
        assert_eq!(theta[3], n.atoms[1].b);
        assert_eq!(theta[6], n.w1[(0, 0)]);
        assert_eq!(theta[7], n.w1[(0, 1)]);
        assert_eq!(theta[12], n.w2[(0, 0)]);
        assert_eq!(m.with_params(&theta), m);
        let shifted: Vec<f64> = theta.iter().map(|v| v + 1.0).collect();
        assert_eq!(m.with_params(&shifted).params(), shifted);
    }

    #[test]
    fn identifiability_detects_duplicates() {
        let proj = ProjectionPair::identity(2);
        let one = MixingMeasure::LinearShared(LinearSharedMeasure {
            atoms: vec![SharedAtom { b: 0.0, p: vec![1.0, 2.0] }],
        });
        let r = check_identifiability(&one, &proj, IDENTIFIABILITY_TOL);
        assert!(r.passed && r.min_distance.is_infinite());
        let two = MixingMeasure::LinearShared(LinearSharedMeasure {
            atoms: vec![SharedAtom { b: 0.0, p: vec![1.0, 2.0] }, SharedAtom { b: 1.0, p: vec![1.0, 2.0] }],
        });
        let r = check_identifiability(&two, &proj, IDENTIFIABILITY_TOL);
        assert!(!r.passed);
        assert_eq!(r.min_distance, 0.0);
    }

    #[test]
    fn random_atoms_are_identifiable() {
        let mut r = rng(11);
        let atoms = (0..3)
            .map(|_| NonSharedAtom {
                b: 0.0,
                key: (0..4).map(|_| standard_normal(&mut r)).collect(),
                value: (0..4).map(|_| standard_normal(&mut r)).collect(),
            })
            .collect();
        let m = MixingMeasure::NonShared(NonSharedMeasure { atoms });
        let proj = ProjectionPair::random(4, &mut r).unwrap();
        let res = check_identifiability(&m, &proj, IDENTIFIABILITY_TOL);
        assert!(res.passed);
        assert!(res.min_distance > 0.0);
    }

    #[test]
    fn measure_json_is_tagged_by_setting() {
        let m = MixingMeasure::LinearShared(LinearSharedMeasure {
            atoms: vec![SharedAtom { b: 0.5, p: vec![1.0, -1.0] }],
        });
        let s = serde_json::to_string(&m).unwrap();
        assert_eq!(s, r#"{"setting":"linear_shared","atoms":[{"b":0.5,"p":[1.0,-1.0]}]}"#);
        let n = neural(2, 1, 1, 3);
        let back: MixingMeasure = serde_json::from_str(&serde_json::to_string(&n).unwrap()).unwrap();
        assert_eq!(back, n);
    }

    #[test]
    fn validate_rejects_wrong_dims() {
        let m = neural(3, 2, 2, 1);
        assert!(m.validate(3).is_ok());
        assert!(m.validate(2).is_err());
    }
}
