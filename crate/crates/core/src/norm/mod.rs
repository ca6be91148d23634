//! Normalization layers: BatchNorm, Batch Renormalization and Batch Kalman
//! Normalization.
//!
//! All three share the same standardization kernel,
//! `y = gamma * (x - mean) / sqrt(var + eps) + beta`, and differ only in
//! where `mean`/`var` come from:
//!
//! * BN uses the statistics of the current (micro-)batch.
//! * BRN uses batch statistics corrected toward the moving averages by the
//!   clipped factors `r` and `d`.
//! * BKN fuses the batch statistics with a prediction carried over from the
//!   preceding normalization layer through a learned transition matrix.
//!
//! Statistics pool over batch and spatial positions, so a `[m, C, a, b]`
//! input contributes `m * a * b` samples per channel.

mod kalman;
mod layers;

pub use kalman::{batch_stats, kalman_fuse, kalman_predict};
pub use layers::{
    bkn_backward, bkn_forward_eval_batchstats, bkn_forward_infer, bkn_forward_train, bn_backward,
    bn_forward_eval_batchstats, bn_forward_infer, bn_forward_train, brn_backward,
    brn_forward_train, BknCache, BknGrads, BnCache, BnGrads, BrnCache, BrnClip, ChainLink,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

/// Default variance floor added under every square root.
pub const DEFAULT_EPS: f64 = 1e-5;
/// Default moving-average momentum.
pub const DEFAULT_ALPHA: f64 = 0.01;
/// Initial value of every diagonal entry of the process noise `R`.
pub const DEFAULT_NOISE: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NormError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("normalization input is empty")]
    Empty,
    #[error("non-finite {what}")]
    NonFinite { what: &'static str },
    #[error("{what}: expected {expected}, got {actual}")]
    Dimension {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("covariance representations differ ({0})")]
    ModeMismatch(&'static str),
    #[error("moving statistics have never been updated or seeded")]
    Unseeded,
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
}

pub type Result<T> = std::result::Result<T, NormError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovMode {
    #[default]
    Diag,
    Full,
}

impl CovMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            CovMode::Diag => "diag",
            CovMode::Full => "full",
        }
    }
}

impl std::str::FromStr for CovMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "diag" => Ok(CovMode::Diag),
            "full" => Ok(CovMode::Full),
            other => Err(format!("unknown covariance mode `{other}`")),
        }
    }
}

/// A covariance estimate, either as a length-C variance vector or a full
/// row-major `C x C` matrix.
#[derive(Debug, Clone, PartialEq)]
pub enum Covariance {
    Diag(Vec<f64>),
    Full(Tensor),
}

impl Covariance {
    pub fn identity(dim: usize, mode: CovMode) -> Self {
        match mode {
            CovMode::Diag => Covariance::Diag(vec![1.0; dim]),
            CovMode::Full => Covariance::Full(Tensor::eye(dim)),
        }
    }

    pub fn zeros(dim: usize, mode: CovMode) -> Self {
        match mode {
            CovMode::Diag => Covariance::Diag(vec![0.0; dim]),
            CovMode::Full => Covariance::Full(Tensor::zeros(&[dim, dim])),
        }
    }

    pub fn mode(&self) -> CovMode {
        match self {
            Covariance::Diag(_) => CovMode::Diag,
            Covariance::Full(_) => CovMode::Full,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Covariance::Diag(v) => v.len(),
            Covariance::Full(t) => t.shape()[0],
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        match self {
            Covariance::Diag(v) => v.clone(),
            Covariance::Full(t) => {
                let n = t.shape()[0];
                (0..n).map(|i| t.data()[i * n + i]).collect()
            }
        }
    }

    /// Raw values: the variances in diagonal mode, the row-major matrix in full mode.
    pub fn values(&self) -> &[f64] {
        match self {
            Covariance::Diag(v) => v,
            Covariance::Full(t) => t.data(),
        }
    }

    fn values_mut(&mut self) -> &mut [f64] {
        match self {
            Covariance::Diag(v) => v,
            Covariance::Full(t) => t.data_mut(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values().iter().all(|v| v.is_finite())
    }
}

/// Per-channel scale `gamma` and shift `beta`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl AffineParams {
    pub fn identity(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn validate(&self, channels: usize) -> Result<()> {
        if self.gamma.len() != channels || self.beta.len() != channels {
            return Err(NormError::Dimension {
                what: "affine parameters",
                expected: channels,
                actual: self.gamma.len().min(self.beta.len()),
            });
        }
        Ok(())
    }
}

/// Observed statistics of one batch: per-channel mean, biased covariance and
/// the number of pooled positions `m * a * b`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStatistics {
    pub mean: Vec<f64>,
    pub cov: Covariance,
    pub effective_count: usize,
}

/// Learnable state of a chained BKN layer.
///
/// The gain and noise are stored unconstrained: `q = logistic(q_raw)` and
/// `R = diag(softplus(r_raw))`.
#[derive(Debug, Clone, PartialEq)]
pub struct KalmanLayerParams {
    /// `C_k x C_{k-1}` map from the previous layer's statistics to this one.
    pub transition: Tensor,
    pub q_raw: f64,
    pub r_raw: Vec<f64>,
    /// Fixes the gain to a constant (e.g. `1.0` to recover BN); `q_raw`
    /// then receives no gradient.
    pub gain_override: Option<f64>,
}

impl KalmanLayerParams {
    /// Identity transition when the channel counts match, an averaging map
    /// otherwise; `q = 0.5`; `R = 1e-3`.
    pub fn new(channels: usize, prev_channels: usize) -> Self {
        let transition = if channels == prev_channels {
            Tensor::eye(channels)
        } else {
            Tensor::full(&[channels, prev_channels], 1.0 / prev_channels as f64)
        };
        Self {
            transition,
            q_raw: 0.0,
            r_raw: vec![inverse_softplus(DEFAULT_NOISE); channels],
            gain_override: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.transition.shape()[0]
    }

    pub fn prev_channels(&self) -> usize {
        self.transition.shape()[1]
    }

    pub fn gain(&self) -> f64 {
        self.gain_override.unwrap_or_else(|| logistic(self.q_raw))
    }

    pub fn noise(&self) -> Vec<f64> {
        self.r_raw.iter().map(|&r| softplus(r)).collect()
    }
}

/// Prior (`k|k-1`) and posterior (`k|k`) statistic estimates of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct KalmanEstimate {
    pub mean_prior: Vec<f64>,
    pub cov_prior: Covariance,
    pub mean_post: Vec<f64>,
    pub cov_post: Covariance,
}

impl KalmanEstimate {
    pub fn channels(&self) -> usize {
        self.mean_post.len()
    }
}

/// Exponential moving averages used at inference.
#[derive(Debug, Clone, PartialEq)]
pub struct MovingStatistics {
    pub mu: Vec<f64>,
    pub sigma: Covariance,
    pub alpha: f64,
    /// Number of updates applied; zero means unseeded unless constructed
    /// through [`MovingStatistics::seeded`].
    pub updates: u64,
}

impl MovingStatistics {
    /// Zero mean, identity covariance, not yet seeded.
    pub fn new(channels: usize, mode: CovMode, alpha: f64) -> Self {
        Self {
            mu: vec![0.0; channels],
            sigma: Covariance::identity(channels, mode),
            alpha,
            updates: 0,
        }
    }

    pub fn seeded(mu: Vec<f64>, sigma: Covariance, alpha: f64) -> Self {
        Self {
            mu,
            sigma,
            alpha,
            updates: 1,
        }
    }

    pub fn is_seeded(&self) -> bool {
        self.updates > 0
    }

    pub fn channels(&self) -> usize {
        self.mu.len()
    }

    /// `mu <- (1 - alpha) mu + alpha mean`, likewise for `sigma`.
    pub fn update(&mut self, mean: &[f64], cov: &Covariance) -> Result<()> {
        if mean.len() != self.mu.len() {
            return Err(NormError::Dimension {
                what: "moving mean",
                expected: self.mu.len(),
                actual: mean.len(),
            });
        }
        if cov.mode() != self.sigma.mode() {
            return Err(NormError::ModeMismatch("moving covariance"));
        }
        self.updates += 1;
        let a = self.alpha;
        if a == 0.0 {
            return Ok(());
        }
        let b = 1.0 - a;
        for (m, &v) in self.mu.iter_mut().zip(mean) {
            *m = b * *m + a * v;
        }
        for (s, &v) in self.sigma.values_mut().iter_mut().zip(cov.values()) {
            *s = b * *s + a * v;
        }
        Ok(())
    }
}

/// Positive constant added to variances under the square root.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormEpsilon(f64);

impl NormEpsilon {
    pub fn new(eps: f64) -> Result<Self> {
        if eps > 0.0 && eps.is_finite() {
            Ok(Self(eps))
        } else {
            Err(NormError::InvalidParam(format!("eps must be positive, got {eps}")))
        }
    }

    pub fn get(&self) -> f64 {
        self.0
    }
}

impl Default for NormEpsilon {
    fn default() -> Self {
        Self(DEFAULT_EPS)
    }
}

/// Which normalizer a layer uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    Bn,
    Brn,
    Bkn,
}

impl NormKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            NormKind::Bn => "bn",
            NormKind::Brn => "brn",
            NormKind::Bkn => "bkn",
        }
    }
}

impl std::str::FromStr for NormKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "bn" => Ok(NormKind::Bn),
            "brn" => Ok(NormKind::Brn),
            "bkn" => Ok(NormKind::Bkn),
            other => Err(format!("unknown normalizer `{other}`")),
        }
    }
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)`, evaluated without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

pub fn inverse_softplus(y: f64) -> f64 {
    // ln(e^y - 1)
    if y > 30.0 {
        y + (-(-y).exp()).ln_1p()
    } else {
        y.exp_m1().ln()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gain_and_noise_maps() {
        let p = KalmanLayerParams::new(3, 3);
        assert_eq!(p.gain(), 0.5);
        assert_eq!(p.transition, Tensor::eye(3));
        for r in p.noise() {
            assert!((r - DEFAULT_NOISE).abs() < 1e-15);
        }
        let avg = KalmanLayerParams::new(2, 4);
        assert_eq!(avg.transition.data(), &[0.25; 8]);
        assert!(logistic(-800.0) >= 0.0 && logistic(800.0) <= 1.0);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert!(softplus(-50.0) >= 0.0);
        assert!((softplus(inverse_softplus(2.5)) - 2.5).abs() < 1e-12);
    }

    #[test]
    fn moving_update_convex_form() {
        let mut m = MovingStatistics::new(2, CovMode::Diag, 0.25);
        assert!(!m.is_seeded());
        m.update(&[4.0, 8.0], &Covariance::Diag(vec![5.0, 1.0])).unwrap();
        assert_eq!(m.mu, vec![1.0, 2.0]);
        assert_eq!(m.sigma, Covariance::Diag(vec![2.0, 1.0]));
        assert!(m.is_seeded());
    }

    #[test]
    fn moving_update_alpha_zero_is_bitwise_noop() {
        let mut m = MovingStatistics::seeded(vec![0.1, -0.3], Covariance::Diag(vec![0.7, 1e-9]), 0.0);
        let before = m.clone();
        m.update(&[5.0, 6.0], &Covariance::Diag(vec![3.0, 3.0])).unwrap();
        assert_eq!(m.mu, before.mu);
        assert_eq!(m.sigma, before.sigma);
    }

    #[test]
    fn moving_average_converges_geometrically() {
        let alpha = 0.1;
        let mut m = MovingStatistics::new(1, CovMode::Diag, alpha);
        let target = 3.0;
        for step in 1..=50 {
            m.update(&[target], &Covariance::Diag(vec![1.0])).unwrap();
            let expected_gap = target * (1.0 - alpha).powi(step);
            assert!(((target - m.mu[0]) - expected_gap).abs() < 1e-12);
        }
    }

    #[test]
    fn epsilon_must_be_positive() {
        assert!(NormEpsilon::new(0.0).is_err());
        assert!(NormEpsilon::new(-1.0).is_err());
        assert_eq!(NormEpsilon::default().get(), 1e-5);
    }
}
