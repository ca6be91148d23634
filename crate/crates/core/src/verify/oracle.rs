//! Straight-line re-evaluation of the batch statistics, the prediction
//! `A mu`, `A Sigma A^T + R` and the fusion step, with Neumaier-compensated
//! sums. Shares no code with the production path.

use crate::norm::{CovMode, Covariance, KalmanLayerParams};
use crate::tensor::Tensor;

/// Neumaier's compensated sum.
pub fn neumaier<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0_f64;
    let mut comp = 0.0_f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Mean and biased covariance over batch and spatial positions.
pub fn oracle_batch_stats(x: &Tensor, mode: CovMode) -> (Vec<f64>, Covariance) {
    let sh = x.shape();
    let (m, c, sp) = (sh[0], sh[1], sh[2] * sh[3]);
    let count = (m * sp) as f64;
    let d = x.data();
    let at = |n: usize, ch: usize, p: usize| d[(n * c + ch) * sp + p];
    let positions = || (0..m).flat_map(move |n| (0..sp).map(move |p| (n, p)));
    let mean: Vec<f64> = (0..c)
        .map(|ch| neumaier(positions().map(|(n, p)| at(n, ch, p))) / count)
        .collect();
    let central = |i: usize, j: usize| {
        neumaier(positions().map(|(n, p)| (at(n, i, p) - mean[i]) * (at(n, j, p) - mean[j]))) / count
    };
    let cov = match mode {
        CovMode::Diag => Covariance::Diag((0..c).map(|i| central(i, i)).collect()),
        CovMode::Full => full((0..c * c).map(|k| central(k / c, k % c)).collect(), c),
    };
    (mean, cov)
}

fn full(values: Vec<f64>, c: usize) -> Covariance {
    Covariance::Full(Tensor::new(vec![c, c], values).expect("square"))
}

fn entry(cov: &Covariance, i: usize, j: usize) -> f64 {
    match cov {
        Covariance::Diag(v) => {
            if i == j {
                v[i]
            } else {
                0.0
            }
        }
        Covariance::Full(t) => t.data()[i * t.shape()[1] + j],
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// `(A mu, A Sigma A^T + R)`; the covariance mode follows `prev_cov`.
pub fn oracle_predict(prev_mean: &[f64], prev_cov: &Covariance, a: &Tensor, noise: &[f64]) -> (Vec<f64>, Covariance) {
    let (rows, cols) = (a.shape()[0], a.shape()[1]);
    let ad = a.data();
    let mean = (0..rows)
        .map(|i| neumaier((0..cols).map(|k| ad[i * cols + k] * prev_mean[k])))
        .collect();
    let quad = |i: usize, j: usize| {
        neumaier((0..cols).flat_map(|k| (0..cols).map(move |l| (k, l))).map(|(k, l)| {
            ad[i * cols + k] * entry(prev_cov, k, l) * ad[j * cols + l]
        }))
    };
    let cov = match prev_cov {
        Covariance::Diag(_) => Covariance::Diag((0..rows).map(|i| quad(i, i) + noise[i]).collect()),
        Covariance::Full(_) => full(
            (0..rows * rows)
                .map(|k| {
                    let (i, j) = (k / rows, k % rows);
                    quad(i, j) + if i == j { noise[i] } else { 0.0 }
                })
                .collect(),
            rows,
        ),
    };
    (mean, cov)
}

/// `mu = p mu_prior + q xbar`,
/// `Sigma = p Sigma_prior + q S + p q (xbar - mu_prior)(xbar - mu_prior)^T`.
pub fn oracle_fuse(
    mean_prior: &[f64],
    cov_prior: &Covariance,
    obs_mean: &[f64],
    obs_cov: &Covariance,
    q: f64,
) -> (Vec<f64>, Covariance) {
    let p = 1.0 - q;
    let c = mean_prior.len();
    let mean = (0..c).map(|i| neumaier([p * mean_prior[i], q * obs_mean[i]])).collect();
    let value = |i: usize, j: usize| {
        let di = obs_mean[i] - mean_prior[i];
        let dj = obs_mean[j] - mean_prior[j];
        neumaier([p * entry(cov_prior, i, j), q * entry(obs_cov, i, j), p * q * di * dj])
    };
    let cov = match cov_prior {
        Covariance::Diag(_) => Covariance::Diag((0..c).map(|i| value(i, i)).collect()),
        Covariance::Full(_) => full((0..c * c).map(|k| value(k / c, k % c)).collect(), c),
    };
    (mean, cov)
}

/// The fused covariance as the second central moment of the mixture that
/// draws from the prior with probability `p` and from the observation with
/// probability `q`: `E[x x^T] - mu mu^T`.
pub fn mixture_covariance(
    mean_prior: &[f64],
    cov_prior: &Covariance,
    obs_mean: &[f64],
    obs_cov: &Covariance,
    q: f64,
) -> Covariance {
    let p = 1.0 - q;
    let c = mean_prior.len();
    let mu: Vec<f64> = (0..c).map(|i| p * mean_prior[i] + q * obs_mean[i]).collect();
    let value = |i: usize, j: usize| {
        let second = p * (entry(cov_prior, i, j) + mean_prior[i] * mean_prior[j])
            + q * (entry(obs_cov, i, j) + obs_mean[i] * obs_mean[j]);
        second - mu[i] * mu[j]
    };
    match cov_prior {
        Covariance::Diag(_) => Covariance::Diag((0..c).map(|i| value(i, i)).collect()),
        Covariance::Full(_) => full((0..c * c).map(|k| value(k / c, k % c)).collect(), c),
    }
}

/// One normalization layer's input and, unless it heads the chain, its
/// Kalman parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleLayer {
    pub x: Tensor,
    pub params: Option<KalmanLayerParams>,
}

/// Posterior `(mean, covariance)` of every layer of a chain. A layer without
/// parameters restarts the chain with its observed statistics.
pub fn statistics_oracle(layers: &[OracleLayer], mode: CovMode) -> Vec<(Vec<f64>, Covariance)> {
    let mut out: Vec<(Vec<f64>, Covariance)> = Vec::with_capacity(layers.len());
    for layer in layers {
        let (obs_mean, obs_cov) = oracle_batch_stats(&layer.x, mode);
        let post = match (&layer.params, out.last()) {
            (Some(params), Some((prev_mean, prev_cov))) => {
                let noise: Vec<f64> = params.r_raw.iter().map(|&r| softplus(r)).collect();
                let (mp, cp) = oracle_predict(prev_mean, prev_cov, &params.transition, &noise);
                let q = params.gain_override.unwrap_or_else(|| 1.0 / (1.0 + (-params.q_raw).exp()));
                oracle_fuse(&mp, &cp, &obs_mean, &obs_cov, q)
            }
            _ => (obs_mean, obs_cov),
        };
        out.push(post);
    }
    out
}

/// Largest absolute entrywise difference of two covariances of the same mode.
pub fn cov_max_diff(a: &Covariance, b: &Covariance) -> f64 {
    if a.mode() != b.mode() || a.dim() != b.dim() {
        return f64::INFINITY;
    }
    a.values().iter().zip(b.values()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn vec_max_diff(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
