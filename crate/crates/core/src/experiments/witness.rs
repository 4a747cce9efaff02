//! The slow-rate witness for non-shared prompts.
//!
//! `G_n` splits the first true atom into two atoms that share its key, carry
//! half its weight plus `1/(2n^{r+1})` each, and move its value by `±e₁/n`.
//! The remaining true atoms are copied unchanged. Its loss is
//!
//! ```text
//! D_{1,r}(G_n, G*) = 1/n^{r+1} + (exp(b*_1) + 1/n^{r+1}) · n^{-r}
//! ```
//!
//! while the two value perturbations cancel to first order in the regression
//! function, so `‖f_{G_n} − f_{G*}‖ / D_{1,r}` vanishes as `n` grows. No
//! estimator can therefore be uniformly polynomial in `D_{1,r}`.

use serde::{Deserialize, Serialize};

use super::l2::density_l2_error;
use crate::error::{config, usage, Result};
use crate::model::{MixingMeasure, NonSharedAtom, NonSharedMeasure, RegressionModel};
use crate::voronoi::loss_d1r;

fn check(n: u64, r: u32) -> Result<()> {
    if n < 1 {
        return usage("witness index n must be at least 1");
    }
    if r < 1 {
        return usage("witness loss order r must be at least 1");
    }
    Ok(())
}

/// The measure `G_n` for `truth` (`L` atoms in, `L + 1` atoms out).
pub fn witness_sequence(truth: &NonSharedMeasure, n: u64, r: u32) -> Result<NonSharedMeasure> {
    check(n, r)?;
    let Some(first) = truth.atoms.first() else {
        return usage("witness needs a truth with at least one atom");
    };
    let nf = n as f64;
    let weight = 0.5 * first.b.exp() + 0.5 / nf.powi(r as i32 + 1);
    let split = |sign: f64| {
        let mut value = first.value.clone();
        value[0] += sign / nf;
        NonSharedAtom { b: weight.ln(), key: first.key.clone(), value }
    };
    let mut atoms = vec![split(1.0), split(-1.0)];
    atoms.extend(truth.atoms[1..].iter().cloned());
    Ok(NonSharedMeasure { atoms })
}

/// Closed-form `D_{1,r}(G_n, G*)` given `exp(b*_1)`.
pub fn witness_loss_closed_form(first_weight: f64, n: u64, r: u32) -> Result<f64> {
    check(n, r)?;
    let nf = n as f64;
    let tail = 1.0 / nf.powi(r as i32 + 1);
    Ok(tail + (first_weight + tail) / nf.powi(r as i32))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WitnessRow {
    pub n: u64,
    pub closed_form: f64,
    pub computed: f64,
    pub l2_error: f64,
    /// `l2_error / computed`
    pub ratio: f64,
}

impl WitnessRow {
    pub fn abs_diff(&self) -> f64 {
        (self.closed_form - self.computed).abs()
    }
}

/// Witness table over `ns` for a non-shared `truth` model. All rows use the
/// same Monte-Carlo draws.
pub fn witness_table(truth: &RegressionModel, ns: &[u64], r: u32, mc_samples: usize, seed: u64) -> Result<Vec<WitnessRow>> {
    let MixingMeasure::NonShared(t) = &truth.measure else {
        return config(format!("witness needs a non_shared truth, got {}", truth.measure.setting()));
    };
    ns.iter()
        .map(|&n| {
            let g = witness_sequence(t, n, r)?;
            let computed = loss_d1r(&g, t, r)?;
            let closed_form = witness_loss_closed_form(t.atoms[0].b.exp(), n, r)?;
            let l2_error = density_l2_error(truth, &MixingMeasure::NonShared(g), mc_samples, seed)?;
            Ok(WitnessRow { n, closed_form, computed, l2_error, ratio: l2_error / computed })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn truth() -> NonSharedMeasure {
        NonSharedMeasure {
            atoms: vec![
                NonSharedAtom { b: 0.0, key: vec![1.0, 0.0], value: vec![0.5, 0.5] },
                NonSharedAtom { b: 0.3, key: vec![-2.0, 1.0], value: vec![-1.5, 2.0] },
            ],
        }
    }

    #[test]
    fn hand_computed_value() {
        // 1/100 + (1 + 1/100) / 10
        assert!((witness_loss_closed_form(1.0, 10, 1).unwrap() - 0.111).abs() < 1e-15);
        let g = witness_sequence(&truth(), 10, 1).unwrap();
        assert!((loss_d1r(&g, &truth(), 1).unwrap() - 0.111).abs() < 1e-14);
    }

    #[test]
    fn structure() {
        let t = truth();
        let g = witness_sequence(&t, 4, 2).unwrap();
        assert_eq!(g.atoms.len(), 3);
        assert_eq!(g.atoms[0].key, t.atoms[0].key);
        assert_eq!(g.atoms[1].key, t.atoms[0].key);
        assert_eq!(g.atoms[0].value[0] - g.atoms[1].value[0], 0.5);
        assert_eq!(g.atoms[0].value[1], t.atoms[0].value[1]);
        assert_eq!(g.atoms[2], t.atoms[1]);
        let w = g.atoms[0].b.exp() + g.atoms[1].b.exp();
        assert!((w - (1.0 + 1.0 / 64.0)).abs() < 1e-15);
    }

    #[test]
    fn loss_decreases_in_n() {
        let t = truth();
        let d: Vec<f64> = [10, 100, 1000].iter().map(|&n| loss_d1r(&witness_sequence(&t, n, 1).unwrap(), &t, 1).unwrap()).collect();
        assert!(d[0] > d[1] && d[1] > d[2]);
    }

    #[test]
    fn invalid_arguments() {
        assert!(matches!(witness_sequence(&truth(), 0, 1), Err(crate::Error::Usage(_))));
        assert!(matches!(witness_sequence(&truth(), 3, 0), Err(crate::Error::Usage(_))));
        assert!(witness_sequence(&NonSharedMeasure { atoms: vec![] }, 3, 1).is_err());
    }
}
