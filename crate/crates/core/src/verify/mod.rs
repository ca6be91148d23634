//! Independent checks of the normalization code: central finite differences,
//! a compensated-summation re-evaluation of the Kalman statistics, and the
//! batch-vs-moving variance gap of trained networks.

mod gradcheck;
pub mod oracle;
mod vargap;

pub use gradcheck::{check_layer_gradients, LayerCheckConfig, LayerInstance};
pub use oracle::statistics_oracle;
pub use vargap::{variance_gap, LayerGap, VarianceGapReport};

use thiserror::Error;

use crate::net::NetError;
use crate::norm::NormError;

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("finite-difference step must be positive and finite, got {0}")]
    InvalidStep(f64),
    #[error("objective is not finite at coordinate {0}")]
    NonFinite(usize),
    #[error("normalization layer {0} has unseeded moving statistics")]
    Unseeded(usize),
    #[error("invalid check configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Norm(#[from] NormError),
    #[error(transparent)]
    Net(#[from] NetError),
}

pub type Result<T> = std::result::Result<T, VerifyError>;

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Central differences `(f(t + h e_i) - f(t - h e_i)) / 2h` for every coordinate.
pub fn finite_diff<F: FnMut(&[f64]) -> f64>(mut f: F, theta: &[f64], step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) || !step.is_finite() {
        return Err(VerifyError::InvalidStep(step));
    }
    let mut work = theta.to_vec();
    let mut grad = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        work[i] = theta[i] + step;
        let plus = f(&work);
        work[i] = theta[i] - step;
        let minus = f(&work);
        work[i] = theta[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(VerifyError::NonFinite(i));
        }
        grad.push((plus - minus) / (2.0 * step));
    }
    Ok(grad)
}

/// Comparison of one parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub max_rel: f64,
    pub max_abs: f64,
    /// Largest relative error at the coarser step.
    pub max_rel_coarse: f64,
    /// Coordinates whose relative error exceeds the tolerance.
    pub failures: Vec<usize>,
}

impl ParamCheck {
    pub fn new(name: &str, analytic: Vec<f64>, numeric: Vec<f64>, coarse: &[f64], tolerance: f64) -> Self {
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        let mut max_rel_coarse: f64 = 0.0;
        let mut failures = Vec::new();
        for (i, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
            let r = rel_err(a, n);
            max_rel = max_rel.max(r);
            max_abs = max_abs.max((a - n).abs());
            max_rel_coarse = max_rel_coarse.max(rel_err(a, coarse[i]));
            if !(r <= tolerance) {
                failures.push(i);
            }
        }
        Self {
            name: name.to_string(),
            analytic,
            numeric,
            max_rel,
            max_abs,
            max_rel_coarse,
            failures,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.failures.is_empty())
    }

    pub fn max_rel(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel).fold(0.0, f64::max)
    }

    /// Refining the step tenfold did not grow the error by more than tenfold
    /// (errors already under the tolerance are exempt).
    pub fn refinement_consistent(&self) -> bool {
        self.params
            .iter()
            .all(|p| p.max_rel <= self.tolerance || p.max_rel <= 10.0 * p.max_rel_coarse)
    }

    pub fn get(&self, name: &str) -> Option<&ParamCheck> {
        self.params.iter().find(|p| p.name == name)
    }

    /// One row per parameter group.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("param,coordinates,max_rel,max_abs,max_rel_coarse,failures\n");
        for p in &self.params {
            let failing: Vec<String> = p.failures.iter().map(|i| i.to_string()).collect();
            out.push_str(&format!(
                "{},{},{:e},{:e},{:e},{}\n",
                p.name,
                p.analytic.len(),
                p.max_rel,
                p.max_abs,
                p.max_rel_coarse,
                failing.join(" ")
            ));
        }
        out
    }

    pub fn summary(&self) -> String {
        let mut out = String::new();
        for p in &self.params {
            out.push_str(&format!(
                "{:<12} n={:<4} max_rel={:.3e} max_abs={:.3e} failures={}\n",
                p.name,
                p.analytic.len(),
                p.max_rel,
                p.max_abs,
                p.failures.len()
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let g = finite_diff(|t| t.iter().map(|v| v * v).sum(), &[1.0, 2.0], 1e-6).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-8 && (g[1] - 4.0).abs() < 1e-8);
    }

    #[test]
    fn constant_has_zero_gradient() {
        let g = finite_diff(|_| 3.5, &[1.0, -2.0, 0.0], 1e-6).unwrap();
        assert_eq!(g, vec![0.0; 3]);
    }

    #[test]
    fn rejects_bad_step_and_nan() {
        assert!(matches!(finite_diff(|_| 0.0, &[1.0], 0.0), Err(VerifyError::InvalidStep(_))));
        assert!(matches!(
            finite_diff(|t| if t[1] > 0.5 { f64::NAN } else { 0.0 }, &[0.0, 0.5], 1e-3),
            Err(VerifyError::NonFinite(1))
        ));
    }

    #[test]
    fn rel_err_floor() {
        assert_eq!(rel_err(0.0, 0.0), 0.0);
        assert!((rel_err(1e-12, 0.0) - 1e-4).abs() < 1e-18);
        assert_eq!(rel_err(2.0, 1.0), 0.5);
    }
}
