//! Voronoi cells generated by the atoms of a true mixing measure, and the
//! Voronoi losses between a fitted and a true measure.
//!
//! Every fitted atom belongs to the cell of its nearest true atom (Euclidean
//! distance on the setting's atom embedding, ties to the lowest true index).
//! All three losses share the weight discrepancy
//! `Σ_j |Σ_{i∈V_j} exp(b_i) − exp(b*_j)|`; an empty cell contributes
//! `exp(b*_j)`. They differ in the prompt term:
//!
//! * `D1,r` (non-shared): `Σ_j Σ_{i∈V_j} exp(b_i)(‖ΔpK‖^r + ‖ΔpV‖^r)`.
//! * `D2` (linear-shared): `exp(b_i)‖Δp‖` in singleton cells and
//!   `exp(b_i)‖Δp‖²` in cells holding more than one fitted atom.
//! * `D3` (neural-shared): like `D2` on the pairs `(W₁p, W₂p)`, with both
//!   distances added, to the first power or squared.

use serde::{Deserialize, Serialize};

use crate::error::{config, usage, Result};
use crate::model::measure::euclidean;
use crate::model::{LinearSharedMeasure, MixingMeasure, NeuralSharedMeasure, NonSharedMeasure, Setting};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellAssignment {
    /// `cells[j]` lists the fitted atoms nearest to true atom `j`, in increasing order.
    pub cells: Vec<Vec<usize>>,
    /// `distances[i][j]` between fitted atom `i` and true atom `j`.
    pub distances: Vec<Vec<f64>>,
}

impl CellAssignment {
    /// Cell index of each fitted atom.
    pub fn owner(&self) -> Vec<usize> {
        let mut owner = vec![0; self.distances.len()];
        for (j, cell) in self.cells.iter().enumerate() {
            for &i in cell {
                owner[i] = j;
            }
        }
        owner
    }
}

/// Nearest-point assignment of `fitted` points to the cells of `truth` points.
pub fn assign_points(fitted: &[Vec<f64>], truth: &[Vec<f64>]) -> CellAssignment {
    let distances: Vec<Vec<f64>> = fitted
        .iter()
        .map(|f| truth.iter().map(|t| euclidean(f, t)).collect())
        .collect();
    let mut cells = vec![Vec::new(); truth.len()];
    for (i, row) in distances.iter().enumerate() {
        let mut best = 0;
        for (j, &dist) in row.iter().enumerate().skip(1) {
            if dist < row[best] {
                best = j;
            }
        }
        if !truth.is_empty() {
            cells[best].push(i);
        }
    }
    CellAssignment { cells, distances }
}

fn check_pair(fitted: &MixingMeasure, truth: &MixingMeasure) -> Result<()> {
    if fitted.setting() != truth.setting() {
        return usage(format!(
            "cannot compare a {} measure with a {} measure",
            fitted.setting(),
            truth.setting()
        ));
    }
    if fitted.is_empty() || truth.is_empty() {
        return usage("Voronoi cells need non-empty fitted and true measures");
    }
    Ok(())
}

/// Voronoi cells of `fitted`'s atoms around `truth`'s atoms.
pub fn assign_cells(fitted: &MixingMeasure, truth: &MixingMeasure) -> Result<CellAssignment> {
    check_pair(fitted, truth)?;
    let (fe, te) = (fitted.voronoi_embedding(), truth.voronoi_embedding());
    if fe[0].len() != te[0].len() {
        return config(format!("atom embeddings differ in length: {} vs {}", fe[0].len(), te[0].len()));
    }
    Ok(assign_points(&fe, &te))
}

fn weight_term(cells: &[Vec<usize>], fitted_b: &[f64], truth_b: &[f64]) -> f64 {
    cells
        .iter()
        .zip(truth_b)
        .map(|(cell, bj)| (cell.iter().map(|&i| fitted_b[i].exp()).sum::<f64>() - bj.exp()).abs())
        .sum()
}

/// `D1,r` between non-shared measures.
pub fn loss_d1r(fitted: &NonSharedMeasure, truth: &NonSharedMeasure, r: u32) -> Result<f64> {
    if r == 0 {
        return usage("loss order r must be at least 1");
    }
    let (f, t) = (MixingMeasure::NonShared(fitted.clone()), MixingMeasure::NonShared(truth.clone()));
    let cells = assign_cells(&f, &t)?.cells;
    let r = r as i32;
    let mut prompt = 0.0;
    for (j, cell) in cells.iter().enumerate() {
        let tj = &truth.atoms[j];
        for &i in cell {
            let fi = &fitted.atoms[i];
            prompt += fi.b.exp() * (euclidean(&fi.key, &tj.key).powi(r) + euclidean(&fi.value, &tj.value).powi(r));
        }
    }
    Ok(weight_term(&cells, &f.log_weights(), &t.log_weights()) + prompt)
}

/// Shared-structure loss given per-pair distances `(‖Δkey‖, ‖Δvalue‖)`; the
/// linear setting passes `(‖Δp‖, 0)`.
fn shared_loss(
    cells: &[Vec<usize>],
    fitted_b: &[f64],
    truth_b: &[f64],
    delta: impl Fn(usize, usize) -> (f64, f64),
) -> f64 {
    let mut prompt = 0.0;
    for (j, cell) in cells.iter().enumerate() {
        let squared = cell.len() > 1;
        for &i in cell {
            let (dk, dv) = delta(i, j);
            let term = if squared { dk * dk + dv * dv } else { dk + dv };
            prompt += fitted_b[i].exp() * term;
        }
    }
    weight_term(cells, fitted_b, truth_b) + prompt
}

/// `D2` between linear-shared measures.
pub fn loss_d2(fitted: &LinearSharedMeasure, truth: &LinearSharedMeasure) -> Result<f64> {
    let (f, t) = (MixingMeasure::LinearShared(fitted.clone()), MixingMeasure::LinearShared(truth.clone()));
    let cells = assign_cells(&f, &t)?.cells;
    Ok(shared_loss(&cells, &f.log_weights(), &t.log_weights(), |i, j| {
        (euclidean(&fitted.atoms[i].p, &truth.atoms[j].p), 0.0)
    }))
}

/// `D3` between neural-shared measures (their `W` matrices may differ).
pub fn loss_d3(fitted: &NeuralSharedMeasure, truth: &NeuralSharedMeasure) -> Result<f64> {
    if fitted.w1.shape() != truth.w1.shape() || fitted.w2.shape() != truth.w2.shape() {
        return config("neural measures must share d and d'");
    }
    let (f, t) = (MixingMeasure::NeuralShared(fitted.clone()), MixingMeasure::NeuralShared(truth.clone()));
    let cells = assign_cells(&f, &t)?.cells;
    let fk: Vec<_> = (0..fitted.atoms.len()).map(|i| (fitted.key_pre(i), fitted.value_pre(i))).collect();
    let tk: Vec<_> = (0..truth.atoms.len()).map(|j| (truth.key_pre(j), truth.value_pre(j))).collect();
    Ok(shared_loss(&cells, &f.log_weights(), &t.log_weights(), |i, j| {
        (euclidean(&fk[i].0, &tk[j].0), euclidean(&fk[i].1, &tk[j].1))
    }))
}

/// Name of the loss used for a setting (`D1_r`, `D2`, `D3`).
pub fn loss_name(setting: Setting, r: u32) -> String {
    match setting {
        Setting::NonShared => format!("D1_{r}"),
        Setting::LinearShared => "D2".into(),
        Setting::NeuralShared => "D3".into(),
    }
}

/// The setting's Voronoi loss; `r` only matters for the non-shared setting.
pub fn voronoi_loss(fitted: &MixingMeasure, truth: &MixingMeasure, r: u32) -> Result<f64> {
    check_pair(fitted, truth)?;
    match (fitted, truth) {
        (MixingMeasure::NonShared(f), MixingMeasure::NonShared(t)) => loss_d1r(f, t, r),
        (MixingMeasure::LinearShared(f), MixingMeasure::LinearShared(t)) => loss_d2(f, t),
        (MixingMeasure::NeuralShared(f), MixingMeasure::NeuralShared(t)) => loss_d3(f, t),
        _ => unreachable!("settings checked above"),
    }
}
