use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{usage, Result};

/// Ordinary least-squares line with a 95% confidence interval on the slope.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub std_error: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub points: usize,
}

impl SlopeFit {
    pub fn half_width(&self) -> f64 {
        (self.ci_high - self.ci_low) / 2.0
    }
}

/// Fits `y = a + b x`. The interval is `b ± t_{0.975, k−2} · se(b)` under the
/// usual Gaussian-error model.
pub fn fit_slope(xs: &[f64], ys: &[f64]) -> Result<SlopeFit> {
    let k = xs.len();
    if k != ys.len() {
        return usage(format!("slope fit needs paired values, got {} xs and {} ys", k, ys.len()));
    }
    if k < 3 {
        return usage(format!("slope fit needs at least 3 points, got {k}"));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return usage("slope fit values must be finite");
    }
    let kf = k as f64;
    let mx = xs.iter().sum::<f64>() / kf;
    let my = ys.iter().sum::<f64>() / kf;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx <= f64::EPSILON * xs.iter().map(|x| x * x).sum::<f64>().max(1.0) {
        return usage("slope fit needs at least two distinct x values");
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = xs.iter().zip(ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    let std_error = (rss / (kf - 2.0) / sxx).sqrt();
    let t = StudentsT::new(0.0, 1.0, kf - 2.0).expect("positive degrees of freedom").inverse_cdf(0.975);
    Ok(SlopeFit {
        slope,
        intercept,
        std_error,
        ci_low: slope - t * std_error,
        ci_high: slope + t * std_error,
        points: k,
    })
}
