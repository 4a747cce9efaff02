use crate::error::{usage, Result};
use crate::model::{InputLaw, MixingMeasure, RegressionModel};
use crate::seed::rng;

/// Monte-Carlo estimate of `‖f − g‖_{L²(μ)}` from `m` draws of `law`.
///
/// The draws depend only on `(law, dim, m, seed)`, so comparisons that reuse
/// the seed see common random numbers.
pub fn l2_norm_mc<F, G>(f: F, g: G, law: &InputLaw, dim: usize, m: usize, seed: u64) -> Result<f64>
where
    F: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> f64,
{
    if m == 0 {
        return usage("Monte-Carlo sample count must be at least 1");
    }
    law.validate()?;
    let mut r = rng(seed);
    let mut x = vec![0.0; dim];
    let mut sum = 0.0;
    for _ in 0..m {
        law.sample_into(&mut r, &mut x);
        let diff = f(&x) - g(&x);
        sum += diff * diff;
    }
    Ok((sum / m as f64).sqrt())
}

/// `‖f_G − f_{G*}‖_{L²(μ)}` where both regression functions share the
/// truth's bank, projections and input law.
pub fn density_l2_error(truth: &RegressionModel, fitted: &MixingMeasure, m: usize, seed: u64) -> Result<f64> {
    let other = truth.with_measure(fitted.clone());
    other.validate()?;
    let (ft, fo) = (truth.evaluator(), other.evaluator());
    l2_norm_mc(|x| fo.eval(x), |x| ft.eval(x), &truth.input_law, truth.dim(), m, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_functions_have_zero_distance() {
        let law = InputLaw::default();
        assert_eq!(l2_norm_mc(|x| x[0].sin(), |x| x[0].sin(), &law, 2, 100, 1).unwrap(), 0.0);
    }

    #[test]
    fn constant_difference_is_exact() {
        let law = InputLaw::default();
        for m in [1, 7, 1000] {
            let v = l2_norm_mc(|x| x[0] + 0.25, |x| x[0], &law, 3, m, 4).unwrap();
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn identity_on_symmetric_interval() {
        // E[X²] = 1/3 on [-1, 1]; the standard error of the second moment
        // is sqrt(Var(X²)/M) with Var(X²) = 1/5 − 1/9, mapped through the sqrt.
        let m = 100_000;
        let v = l2_norm_mc(|x| x[0], |_| 0.0, &InputLaw::default(), 1, m, 17).unwrap();
        let target = (1.0f64 / 3.0).sqrt();
        let se = ((1.0 / 5.0 - 1.0 / 9.0) / m as f64).sqrt() / (2.0 * target);
        assert!((v - target).abs() <= 3.0 * se, "{v} vs {target} (se {se})");
    }

    #[test]
    fn zero_samples_rejected() {
        assert!(l2_norm_mc(|_| 0.0, |_| 0.0, &InputLaw::default(), 1, 0, 1).is_err());
    }
}
