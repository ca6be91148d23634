//! Forward and backward passes of the BN, BRN and BKN layers.
//!
//! Inputs are `[m, C, a, b]`; element `(n, c, p)` lives at `(n * C + c) * a * b + p`.

use super::kalman::{batch_stats, kalman_fuse, kalman_predict};
use super::{
    logistic, AffineParams, BatchStatistics, CovMode, Covariance, KalmanEstimate, KalmanLayerParams,
    MovingStatistics, NormEpsilon, NormError, Result,
};
use crate::tensor::{Shape4, Tensor};

/// The previous normalization layer's estimate together with this layer's
/// Kalman parameters. Absent for the first normalization layer of a chain.
#[derive(Debug, Clone, Copy)]
pub struct ChainLink<'a> {
    pub prev: &'a KalmanEstimate,
    pub params: &'a KalmanLayerParams,
}

#[derive(Debug, Clone)]
struct LinkCache {
    prev_mean: Vec<f64>,
    prev_cov: Covariance,
    transition: Tensor,
    r_raw: Vec<f64>,
    gain_pinned: bool,
}

/// Everything the BKN backward pass needs from its forward call.
#[derive(Debug, Clone)]
pub struct BknCache {
    shape: Shape4,
    x: Vec<f64>,
    x_hat: Vec<f64>,
    gamma: Vec<f64>,
    inv_std: Vec<f64>,
    mean_post: Vec<f64>,
    batch_mean: Vec<f64>,
    batch_var: Vec<f64>,
    mean_prior: Vec<f64>,
    var_prior: Vec<f64>,
    q: f64,
    link: Option<LinkCache>,
}

impl BknCache {
    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn gain(&self) -> f64 {
        self.q
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BknGrads {
    pub x: Tensor,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub q_raw: f64,
    /// `None` when the layer has no chain predecessor.
    pub transition: Option<Tensor>,
    pub r_raw: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct BnCache {
    shape: Shape4,
    x_hat: Vec<f64>,
    gamma: Vec<f64>,
    inv_std: Vec<f64>,
}

impl BnCache {
    pub fn shape(&self) -> Shape4 {
        self.shape
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnGrads {
    pub x: Tensor,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

/// BRN correction bounds for the current step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BrnClip {
    pub r_max: f64,
    pub d_max: f64,
}

impl BrnClip {
    pub fn new(r_max: f64, d_max: f64) -> Result<Self> {
        if !(r_max >= 1.0) || !(d_max >= 0.0) {
            return Err(NormError::InvalidParam(format!(
                "brn clip needs r_max >= 1 and d_max >= 0, got ({r_max}, {d_max})"
            )));
        }
        Ok(Self { r_max, d_max })
    }
}

#[derive(Debug, Clone)]
pub struct BrnCache {
    bn: BnCache,
    /// Corrected standardized input `r * x_hat + d`.
    x_corrected: Vec<f64>,
    r: Vec<f64>,
    d: Vec<f64>,
}

impl BrnCache {
    pub fn shape(&self) -> Shape4 {
        self.bn.shape
    }

    /// The per-channel `(r, d)` used in the forward pass.
    pub fn correction(&self) -> (&[f64], &[f64]) {
        (&self.r, &self.d)
    }
}

fn check_input(x: &Tensor, affine: &AffineParams) -> Result<Shape4> {
    let s = x.shape4()?;
    if s.effective_count() == 0 {
        return Err(NormError::Empty);
    }
    affine.validate(s.channels)?;
    Ok(s)
}

/// `y = gamma (x - mean) / sqrt(var + eps) + beta`; returns `(y, x_hat, inv_std)`.
fn standardize(
    x: &Tensor,
    s: Shape4,
    mean: &[f64],
    var: &[f64],
    eps: NormEpsilon,
    affine: &AffineParams,
) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let inv_std: Vec<f64> = var
        .iter()
        .map(|&v| {
            let d = v + eps.get();
            if d > 0.0 && d.is_finite() {
                Ok(1.0 / d.sqrt())
            } else {
                Err(NormError::NonFinite { what: "normalization divisor" })
            }
        })
        .collect::<Result<_>>()?;
    let (c_n, sp) = (s.channels, s.spatial());
    let data = x.data();
    let mut x_hat = vec![0.0; data.len()];
    let mut y = vec![0.0; data.len()];
    for n in 0..s.batch {
        for c in 0..c_n {
            let base = (n * c_n + c) * sp;
            let (m, inv, g, b) = (mean[c], inv_std[c], affine.gamma[c], affine.beta[c]);
            for p in base..base + sp {
                let h = (data[p] - m) * inv;
                x_hat[p] = h;
                y[p] = g * h + b;
            }
        }
    }
    Ok((Tensor::new(x.shape().to_vec(), y)?, x_hat, inv_std))
}

fn check_finite_stats(mean: &[f64], cov: &Covariance, what: &'static str) -> Result<()> {
    if mean.iter().all(|v| v.is_finite()) && cov.all_finite() {
        Ok(())
    } else {
        Err(NormError::NonFinite { what })
    }
}

/// Observed statistics, the fused estimate and the gain used.
fn estimate(x: &Tensor, link: Option<ChainLink<'_>>, mode: CovMode) -> Result<(BatchStatistics, KalmanEstimate, f64)> {
    let obs = batch_stats(x, mode)?;
    check_finite_stats(&obs.mean, &obs.cov, "batch statistics")?;
    let Some(link) = link else {
        let est = KalmanEstimate {
            mean_prior: obs.mean.clone(),
            cov_prior: obs.cov.clone(),
            mean_post: obs.mean.clone(),
            cov_post: obs.cov.clone(),
        };
        return Ok((obs, est, 1.0));
    };
    if link.params.channels() != obs.mean.len() {
        return Err(NormError::Dimension {
            what: "transition rows vs input channels",
            expected: obs.mean.len(),
            actual: link.params.channels(),
        });
    }
    let (mean_prior, cov_prior) = kalman_predict(link.prev, link.params)?;
    let q = link.params.gain();
    let (mean_post, cov_post) = kalman_fuse(&mean_prior, &cov_prior, &obs, q)?;
    check_finite_stats(&mean_post, &cov_post, "fused statistics")?;
    Ok((
        obs,
        KalmanEstimate {
            mean_prior,
            cov_prior,
            mean_post,
            cov_post,
        },
        q,
    ))
}

/// Training-mode BKN: estimate statistics, normalize with the posterior,
/// fold the posterior into the moving averages.
///
/// The covariance representation follows `moving.sigma`. The returned
/// estimate feeds the next layer's [`ChainLink`]; no gradient flows back
/// through it.
pub fn bkn_forward_train(
    x: &Tensor,
    link: Option<ChainLink<'_>>,
    affine: &AffineParams,
    moving: &mut MovingStatistics,
    eps: NormEpsilon,
) -> Result<(Tensor, KalmanEstimate, BknCache)> {
    let s = check_input(x, affine)?;
    let (obs, est, q) = estimate(x, link, moving.sigma.mode())?;
    let var_post = est.cov_post.diagonal();
    let (y, x_hat, inv_std) = standardize(x, s, &est.mean_post, &var_post, eps, affine)?;
    moving.update(&est.mean_post, &est.cov_post)?;
    let cache = BknCache {
        shape: s,
        x: x.data().to_vec(),
        x_hat,
        gamma: affine.gamma.clone(),
        inv_std,
        mean_post: est.mean_post.clone(),
        batch_mean: obs.mean,
        batch_var: obs.cov.diagonal(),
        mean_prior: est.mean_prior.clone(),
        var_prior: est.cov_prior.diagonal(),
        q,
        link: link.map(|l| LinkCache {
            prev_mean: l.prev.mean_post.clone(),
            prev_cov: l.prev.cov_post.clone(),
            transition: l.params.transition.clone(),
            r_raw: l.params.r_raw.clone(),
            gain_pinned: l.params.gain_override.is_some(),
        }),
    };
    Ok((y, est, cache))
}

/// Evaluation with fused batch statistics; moving averages are not touched.
pub fn bkn_forward_eval_batchstats(
    x: &Tensor,
    link: Option<ChainLink<'_>>,
    affine: &AffineParams,
    eps: NormEpsilon,
    mode: CovMode,
) -> Result<(Tensor, KalmanEstimate)> {
    let s = check_input(x, affine)?;
    let (_, est, _) = estimate(x, link, mode)?;
    let (y, _, _) = standardize(x, s, &est.mean_post, &est.cov_post.diagonal(), eps, affine)?;
    Ok((y, est))
}

/// Inference with the moving averages.
pub fn bkn_forward_infer(
    x: &Tensor,
    moving: &MovingStatistics,
    affine: &AffineParams,
    eps: NormEpsilon,
) -> Result<Tensor> {
    let s = check_input(x, affine)?;
    if !moving.is_seeded() {
        return Err(NormError::Unseeded);
    }
    if moving.channels() != s.channels {
        return Err(NormError::Dimension {
            what: "moving statistics channels",
            expected: s.channels,
            actual: moving.channels(),
        });
    }
    let (y, _, _) = standardize(x, s, &moving.mu, &moving.sigma.diagonal(), eps, affine)?;
    Ok(y)
}

/// Analytic BKN gradients.
///
/// Per channel, with `v = diag(cov_post) + eps`, `N = m a b`, `p = 1 - q`:
///
/// ```text
/// dl/dxhat_i  = dl/dy_i gamma
/// dl/dSigma   = sum_i dl/dxhat_i (x_i - mu_post) (-1/2) v^(-3/2)
/// dl/dmu      = -sum_i dl/dxhat_i v^(-1/2)
/// dl/dx_i     = dl/dxhat_i v^(-1/2) + dl/dSigma (2q/N)(x_i - q xbar - p mu_prior) + dl/dmu q/N
/// dl/dq       = dl/dSigma (S - Sigma_prior + (1 - 2q)(xbar - mu_prior)^2) + dl/dmu (xbar - mu_prior)
/// ```
///
/// The gain gradient is summed over channels and chained through the
/// logistic map. `A` and `R` receive gradient through `mu_prior` and
/// `Sigma_prior` with the previous layer's estimate held constant.
pub fn bkn_backward(grad_y: &Tensor, cache: &BknCache) -> Result<BknGrads> {
    let s = cache.shape;
    if grad_y.shape() != s.dims() {
        return Err(NormError::Dimension {
            what: "upstream gradient length",
            expected: s.numel(),
            actual: grad_y.len(),
        });
    }
    let (c_n, sp) = (s.channels, s.spatial());
    let count = s.effective_count() as f64;
    let q = cache.q;
    let p = 1.0 - q;
    let gy = grad_y.data();
    let mut gx = vec![0.0; gy.len()];
    let mut g_gamma = vec![0.0; c_n];
    let mut g_beta = vec![0.0; c_n];
    let mut g_q = 0.0;
    let mut g_mean_prior = vec![0.0; c_n];
    let mut g_var_prior = vec![0.0; c_n];

    for c in 0..c_n {
        let (gamma, inv, mu) = (cache.gamma[c], cache.inv_std[c], cache.mean_post[c]);
        let mut g_sigma = 0.0;
        let mut g_mu = 0.0;
        for n in 0..s.batch {
            let base = (n * c_n + c) * sp;
            for i in base..base + sp {
                let g_xhat = gy[i] * gamma;
                g_sigma += g_xhat * (cache.x[i] - mu);
                g_mu += g_xhat;
                g_gamma[c] += gy[i] * cache.x_hat[i];
                g_beta[c] += gy[i];
            }
        }
        g_sigma *= -0.5 * inv * inv * inv;
        g_mu *= -inv;

        let xbar = cache.batch_mean[c];
        let mu_prior = cache.mean_prior[c];
        let innovation = xbar - mu_prior;
        let sigma_coef = 2.0 * q / count;
        let shift = q * xbar + p * mu_prior;
        let mu_coef = q / count;
        for n in 0..s.batch {
            let base = (n * c_n + c) * sp;
            for i in base..base + sp {
                let g_xhat = gy[i] * gamma;
                gx[i] = g_xhat * inv + g_sigma * sigma_coef * (cache.x[i] - shift) + g_mu * mu_coef;
            }
        }

        let dsigma_dq = cache.batch_var[c] - cache.var_prior[c] + (1.0 - 2.0 * q) * innovation * innovation;
        g_q += g_sigma * dsigma_dq + g_mu * innovation;
        g_mean_prior[c] = p * g_mu - 2.0 * p * q * innovation * g_sigma;
        g_var_prior[c] = p * g_sigma;
    }

    let (q_raw, transition, r_raw) = match &cache.link {
        None => (0.0, None, None),
        Some(link) => {
            let q_raw = if link.gain_pinned { 0.0 } else { g_q * q * (1.0 - q) };
            let cols = link.prev_mean.len();
            let a = link.transition.data();
            let mut g_a = vec![0.0; c_n * cols];
            for r in 0..c_n {
                for j in 0..cols {
                    // d var_prior[r] / d A[r][j]
                    let d_var = match &link.prev_cov {
                        Covariance::Diag(v) => 2.0 * a[r * cols + j] * v[j],
                        Covariance::Full(pc) => {
                            let pd = pc.data();
                            (0..cols)
                                .map(|l| (pd[j * cols + l] + pd[l * cols + j]) * a[r * cols + l])
                                .sum()
                        }
                    };
                    g_a[r * cols + j] = g_mean_prior[r] * link.prev_mean[j] + g_var_prior[r] * d_var;
                }
            }
            let g_r: Vec<f64> = link
                .r_raw
                .iter()
                .zip(&g_var_prior)
                .map(|(&raw, &g)| g * logistic(raw))
                .collect();
            (q_raw, Some(Tensor::new(vec![c_n, cols], g_a)?), Some(g_r))
        }
    };

    Ok(BknGrads {
        x: Tensor::new(grad_y.shape().to_vec(), gx)?,
        gamma: g_gamma,
        beta: g_beta,
        q_raw,
        transition,
        r_raw,
    })
}

/// Training-mode BN. The covariance representation follows `moving.sigma`.
pub fn bn_forward_train(
    x: &Tensor,
    affine: &AffineParams,
    moving: &mut MovingStatistics,
    eps: NormEpsilon,
) -> Result<(Tensor, BnCache)> {
    let s = check_input(x, affine)?;
    let obs = batch_stats(x, moving.sigma.mode())?;
    check_finite_stats(&obs.mean, &obs.cov, "batch statistics")?;
    let (y, x_hat, inv_std) = standardize(x, s, &obs.mean, &obs.cov.diagonal(), eps, affine)?;
    moving.update(&obs.mean, &obs.cov)?;
    Ok((
        y,
        BnCache {
            shape: s,
            x_hat,
            gamma: affine.gamma.clone(),
            inv_std,
        },
    ))
}

pub fn bn_forward_eval_batchstats(x: &Tensor, affine: &AffineParams, eps: NormEpsilon) -> Result<Tensor> {
    let s = check_input(x, affine)?;
    let obs = batch_stats(x, CovMode::Diag)?;
    check_finite_stats(&obs.mean, &obs.cov, "batch statistics")?;
    Ok(standardize(x, s, &obs.mean, obs.cov.values(), eps, affine)?.0)
}

pub fn bn_forward_infer(
    x: &Tensor,
    moving: &MovingStatistics,
    affine: &AffineParams,
    eps: NormEpsilon,
) -> Result<Tensor> {
    bkn_forward_infer(x, moving, affine, eps)
}

/// Classical BN gradient with the upstream gradient on `x_hat` scaled per
/// channel by `scale`:
/// `dx = inv/N (N g - sum g - x_hat sum(g x_hat))`, `g = dy gamma scale`.
fn standardization_backward(grad_y: &Tensor, bn: &BnCache, scale: Option<&[f64]>, x_hat_out: &[f64]) -> Result<BnGrads> {
    let s = bn.shape;
    if grad_y.shape() != s.dims() {
        return Err(NormError::Dimension {
            what: "upstream gradient length",
            expected: s.numel(),
            actual: grad_y.len(),
        });
    }
    let (c_n, sp) = (s.channels, s.spatial());
    let count = s.effective_count() as f64;
    let gy = grad_y.data();
    let mut gx = vec![0.0; gy.len()];
    let mut g_gamma = vec![0.0; c_n];
    let mut g_beta = vec![0.0; c_n];
    for c in 0..c_n {
        let k = bn.gamma[c] * scale.map_or(1.0, |r| r[c]);
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for n in 0..s.batch {
            let base = (n * c_n + c) * sp;
            for i in base..base + sp {
                let g = gy[i] * k;
                sum_g += g;
                sum_gx += g * bn.x_hat[i];
                g_gamma[c] += gy[i] * x_hat_out[i];
                g_beta[c] += gy[i];
            }
        }
        let f = bn.inv_std[c] / count;
        for n in 0..s.batch {
            let base = (n * c_n + c) * sp;
            for i in base..base + sp {
                let g = gy[i] * k;
                gx[i] = f * (count * g - sum_g - bn.x_hat[i] * sum_gx);
            }
        }
    }
    Ok(BnGrads {
        x: Tensor::new(grad_y.shape().to_vec(), gx)?,
        gamma: g_gamma,
        beta: g_beta,
    })
}

pub fn bn_backward(grad_y: &Tensor, cache: &BnCache) -> Result<BnGrads> {
    standardization_backward(grad_y, cache, None, &cache.x_hat)
}

/// Training-mode Batch Renormalization.
///
/// `r = clip(sigma_B / sigma_mov, 1/r_max, r_max)`,
/// `d = clip((xbar - mu_mov) / sigma_mov, -d_max, d_max)`,
/// `x_hat = r (x - xbar) / sigma_B + d`, with both sigmas including eps.
/// The correction uses the moving statistics from before this step's update.
pub fn brn_forward_train(
    x: &Tensor,
    affine: &AffineParams,
    moving: &mut MovingStatistics,
    eps: NormEpsilon,
    clip: BrnClip,
) -> Result<(Tensor, BrnCache)> {
    let s = check_input(x, affine)?;
    let moving_var = moving.sigma.diagonal();
    if let Some(v) = moving_var.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
        return Err(NormError::InvalidParam(format!("moving variance {v} is not a valid variance")));
    }
    let obs = batch_stats(x, moving.sigma.mode())?;
    check_finite_stats(&obs.mean, &obs.cov, "batch statistics")?;
    let batch_var = obs.cov.diagonal();
    let mut r = vec![1.0; s.channels];
    let mut d = vec![0.0; s.channels];
    for c in 0..s.channels {
        let sigma_b = (batch_var[c] + eps.get()).sqrt();
        let sigma_mov = (moving_var[c] + eps.get()).sqrt();
        r[c] = (sigma_b / sigma_mov).clamp(1.0 / clip.r_max, clip.r_max);
        d[c] = ((obs.mean[c] - moving.mu[c]) / sigma_mov).clamp(-clip.d_max, clip.d_max);
    }
    let identity = AffineParams::identity(s.channels);
    let (_, x_hat, inv_std) = standardize(x, s, &obs.mean, &batch_var, eps, &identity)?;
    let (c_n, sp) = (s.channels, s.spatial());
    let mut x_corrected = vec![0.0; x_hat.len()];
    let mut y = vec![0.0; x_hat.len()];
    for n in 0..s.batch {
        for c in 0..c_n {
            let base = (n * c_n + c) * sp;
            for i in base..base + sp {
                let h = r[c] * x_hat[i] + d[c];
                x_corrected[i] = h;
                y[i] = affine.gamma[c] * h + affine.beta[c];
            }
        }
    }
    moving.update(&obs.mean, &obs.cov)?;
    Ok((
        Tensor::new(x.shape().to_vec(), y)?,
        BrnCache {
            bn: BnCache {
                shape: s,
                x_hat,
                gamma: affine.gamma.clone(),
                inv_std,
            },
            x_corrected,
            r,
            d,
        },
    ))
}

/// BRN gradients with `r` and `d` held constant.
pub fn brn_backward(grad_y: &Tensor, cache: &BrnCache) -> Result<BnGrads> {
    standardization_backward(grad_y, &cache.bn, Some(&cache.r), &cache.x_corrected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::norm::{inverse_softplus, DEFAULT_EPS};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn eps() -> NormEpsilon {
        NormEpsilon::default()
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    fn random_affine(c: usize, rng: &mut ChaCha8Rng) -> AffineParams {
        AffineParams {
            gamma: (0..c).map(|_| rng.random_range(0.5..1.5)).collect(),
            beta: (0..c).map(|_| rng.random_range(-0.5..0.5)).collect(),
        }
    }

    fn random_prev(c: usize, rng: &mut ChaCha8Rng) -> KalmanEstimate {
        let mean: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cov = Covariance::Diag((0..c).map(|_| rng.random_range(0.1..2.0)).collect());
        KalmanEstimate {
            mean_prior: mean.clone(),
            cov_prior: cov.clone(),
            mean_post: mean,
            cov_post: cov,
        }
    }

    fn random_params(c: usize, c_prev: usize, rng: &mut ChaCha8Rng) -> KalmanLayerParams {
        KalmanLayerParams {
            transition: random(&[c, c_prev], rng),
            q_raw: rng.random_range(-1.0..1.0),
            r_raw: (0..c).map(|_| inverse_softplus(rng.random_range(0.01..0.5))).collect(),
            gain_override: None,
        }
    }

    #[test]
    fn first_layer_standardizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[6, 3, 2, 2], &mut rng);
        let mut moving = MovingStatistics::new(3, CovMode::Diag, 0.1);
        let (y, est, _) = bkn_forward_train(&x, None, &AffineParams::identity(3), &mut moving, eps()).unwrap();
        let st = batch_stats(&y, CovMode::Diag).unwrap();
        for c in 0..3 {
            assert!(st.mean[c].abs() < 1e-10);
            let var = est.cov_post.values()[c];
            assert!((st.cov.values()[c] - var / (var + DEFAULT_EPS)).abs() < 1e-10);
        }
    }

    #[test]
    fn alpha_zero_leaves_moving_stats_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&[4, 2, 1, 1], &mut rng);
        let mut moving = MovingStatistics::seeded(vec![0.3, 0.4], Covariance::Diag(vec![1.1, 0.9]), 0.0);
        let before = (moving.mu.clone(), moving.sigma.clone());
        bkn_forward_train(&x, None, &AffineParams::identity(2), &mut moving, eps()).unwrap();
        assert_eq!((moving.mu, moving.sigma), before);
    }

    #[test]
    fn bn_is_bkn_without_chain_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[5, 3, 2, 2], &mut rng);
        let affine = random_affine(3, &mut rng);
        let mut m1 = MovingStatistics::new(3, CovMode::Diag, 0.1);
        let mut m2 = m1.clone();
        let (y1, _, _) = bkn_forward_train(&x, None, &affine, &mut m1, eps()).unwrap();
        let (y2, _) = bn_forward_train(&x, &affine, &mut m2, eps()).unwrap();
        assert_eq!(y1, y2);
        assert_eq!(m1, m2);
    }

    #[test]
    fn constant_input_normalizes_to_zero() {
        let x = Tensor::full(&[3, 2, 2, 1], 4.0);
        let mut moving = MovingStatistics::new(2, CovMode::Diag, 0.1);
        let (y, _) = bn_forward_train(&x, &AffineParams::identity(2), &mut moving, eps()).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_position_batch_is_finite() {
        let x = Tensor::new(vec![1, 2, 1, 1], vec![3.0, -1.0]).unwrap();
        let mut moving = MovingStatistics::new(2, CovMode::Diag, 0.1);
        let (y, cache) = bn_forward_train(&x, &AffineParams::identity(2), &mut moving, eps()).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0]);
        let g = bn_backward(&Tensor::full(&[1, 2, 1, 1], 1.0), &cache).unwrap();
        assert!(g.x.all_finite());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&[3, 2, 2, 2], &mut rng);
        let prev = random_prev(3, &mut rng);
        let params = random_params(2, 3, &mut rng);
        let mut moving = MovingStatistics::new(2, CovMode::Diag, 0.1);
        let link = ChainLink { prev: &prev, params: &params };
        let (_, _, cache) = bkn_forward_train(&x, Some(link), &random_affine(2, &mut rng), &mut moving, eps()).unwrap();
        let g = bkn_backward(&Tensor::zeros(&[3, 2, 2, 2]), &cache).unwrap();
        assert!(g.x.data().iter().all(|&v| v == 0.0));
        assert!(g.gamma.iter().chain(&g.beta).all(|&v| v == 0.0));
        assert_eq!(g.q_raw, 0.0);
        assert!(g.transition.unwrap().data().iter().all(|&v| v == 0.0));
        assert!(g.r_raw.unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn beta_gradient_is_channel_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&[4, 2, 3, 1], &mut rng);
        let gy = random(&[4, 2, 3, 1], &mut rng);
        let prev = random_prev(2, &mut rng);
        let params = random_params(2, 2, &mut rng);
        let mut moving = MovingStatistics::new(2, CovMode::Diag, 0.1);
        let link = ChainLink { prev: &prev, params: &params };
        let (_, _, cache) = bkn_forward_train(&x, Some(link), &random_affine(2, &mut rng), &mut moving, eps()).unwrap();
        let g = bkn_backward(&gy, &cache).unwrap();
        let sums = gy.reduce_mean_over(&[0, 2, 3]).unwrap().scale(12.0);
        for c in 0..2 {
            assert!((g.beta[c] - sums.data()[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn pinned_gain_matches_bn() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random(&[5, 3, 2, 2], &mut rng);
        let gy = random(&[5, 3, 2, 2], &mut rng);
        let affine = random_affine(3, &mut rng);
        let prev = random_prev(4, &mut rng);
        let mut params = random_params(3, 4, &mut rng);
        params.gain_override = Some(1.0);
        let mut m1 = MovingStatistics::new(3, CovMode::Diag, 0.1);
        let mut m2 = m1.clone();
        let link = ChainLink { prev: &prev, params: &params };
        let (y1, _, c1) = bkn_forward_train(&x, Some(link), &affine, &mut m1, eps()).unwrap();
        let (y2, c2) = bn_forward_train(&x, &affine, &mut m2, eps()).unwrap();
        assert!(y1.max_abs_diff(&y2).unwrap() <= 1e-12);
        let g1 = bkn_backward(&gy, &c1).unwrap();
        let g2 = bn_backward(&gy, &c2).unwrap();
        assert!(g1.x.max_abs_diff(&g2.x).unwrap() <= 1e-12);
        for c in 0..3 {
            assert!((g1.gamma[c] - g2.gamma[c]).abs() <= 1e-12);
            assert!((g1.beta[c] - g2.beta[c]).abs() <= 1e-12);
        }
        assert_eq!(g1.q_raw, 0.0);
    }

    #[test]
    fn infer_paths() {
        let affine = AffineParams {
            gamma: vec![2.0, 3.0],
            beta: vec![0.5, -0.5],
        };
        let moving = MovingStatistics::seeded(vec![1.0, -1.0], Covariance::Diag(vec![4.0, 0.25]), 0.1);
        let x = Tensor::new(vec![2, 2, 1, 1], vec![1.0, -1.0, 1.0, -1.0]).unwrap();
        let y = bkn_forward_infer(&x, &moving, &affine, eps()).unwrap();
        assert_eq!(y.data(), &[0.5, -0.5, 0.5, -0.5]);

        let unit = MovingStatistics::seeded(vec![0.0; 2], Covariance::Diag(vec![1.0; 2]), 0.1);
        let x = Tensor::new(vec![1, 2, 1, 1], vec![3.0, -2.0]).unwrap();
        let y = bkn_forward_infer(&x, &unit, &AffineParams::identity(2), eps()).unwrap();
        let k = 1.0 / (1.0 + DEFAULT_EPS).sqrt();
        assert!((y.data()[0] - 3.0 * k).abs() < 1e-15 && (y.data()[1] + 2.0 * k).abs() < 1e-15);

        let fresh = MovingStatistics::new(2, CovMode::Diag, 0.1);
        assert!(matches!(
            bkn_forward_infer(&x, &fresh, &AffineParams::identity(2), eps()),
            Err(NormError::Unseeded)
        ));
    }

    #[test]
    fn eval_batchstats_equals_train_with_alpha_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(&[4, 2, 2, 2], &mut rng);
        let prev = random_prev(2, &mut rng);
        let params = random_params(2, 2, &mut rng);
        let affine = random_affine(2, &mut rng);
        let link = ChainLink { prev: &prev, params: &params };
        let mut moving = MovingStatistics::new(2, CovMode::Diag, 0.0);
        let (y1, e1, _) = bkn_forward_train(&x, Some(link), &affine, &mut moving, eps()).unwrap();
        let (y2, e2) = bkn_forward_eval_batchstats(&x, Some(link), &affine, eps(), CovMode::Diag).unwrap();
        assert_eq!(y1, y2);
        assert_eq!(e1, e2);
        let (y3, _) = bkn_forward_eval_batchstats(&x, None, &affine, eps(), CovMode::Diag).unwrap();
        assert_eq!(y3, bn_forward_eval_batchstats(&x, &affine, eps()).unwrap());
    }

    #[test]
    fn brn_collapses_to_bn() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random(&[4, 3, 2, 1], &mut rng);
        let gy = random(&[4, 3, 2, 1], &mut rng);
        let affine = random_affine(3, &mut rng);
        let mut m1 = MovingStatistics::seeded(vec![0.2; 3], Covariance::Diag(vec![2.0; 3]), 0.1);
        let mut m2 = m1.clone();
        let (y1, c1) = brn_forward_train(&x, &affine, &mut m1, eps(), BrnClip::new(1.0, 0.0).unwrap()).unwrap();
        let (y2, c2) = bn_forward_train(&x, &affine, &mut m2, eps()).unwrap();
        assert_eq!(y1, y2);
        assert_eq!(m1, m2);
        assert_eq!(brn_backward(&gy, &c1).unwrap(), bn_backward(&gy, &c2).unwrap());

        // moving statistics equal to the batch statistics give r = 1, d = 0
        let st = batch_stats(&x, CovMode::Diag).unwrap();
        let mut m3 = MovingStatistics::seeded(st.mean.clone(), st.cov.clone(), 0.1);
        let mut m4 = m3.clone();
        let (y3, c3) = brn_forward_train(&x, &affine, &mut m3, eps(), BrnClip::new(3.0, 5.0).unwrap()).unwrap();
        let (y4, _) = bn_forward_train(&x, &affine, &mut m4, eps()).unwrap();
        assert!(c3.correction().0.iter().all(|&r| r == 1.0) && c3.correction().1.iter().all(|&d| d == 0.0));
        assert!(y3.max_abs_diff(&y4).unwrap() < 1e-15);
    }

    #[test]
    fn brn_rejects_bad_clip_and_negative_variance() {
        assert!(BrnClip::new(0.5, 0.0).is_err());
        assert!(BrnClip::new(2.0, -1.0).is_err());
        let x = Tensor::zeros(&[2, 1, 1, 1]);
        let mut moving = MovingStatistics::seeded(vec![0.0], Covariance::Diag(vec![-1.0]), 0.1);
        let clip = BrnClip::new(2.0, 1.0).unwrap();
        assert!(brn_forward_train(&x, &AffineParams::identity(1), &mut moving, eps(), clip).is_err());
    }

    #[test]
    fn non_finite_input_is_reported() {
        let x = Tensor::new(vec![2, 1, 1, 1], vec![1.0, f64::NAN]).unwrap();
        let mut moving = MovingStatistics::new(1, CovMode::Diag, 0.1);
        let err = bkn_forward_train(&x, None, &AffineParams::identity(1), &mut moving, eps()).unwrap_err();
        assert!(matches!(err, NormError::NonFinite { .. }));
    }

    #[test]
    fn mismatched_upstream_gradient_is_rejected() {
        let x = Tensor::zeros(&[2, 1, 1, 1]);
        let mut moving = MovingStatistics::new(1, CovMode::Diag, 0.1);
        let (_, _, cache) = bkn_forward_train(&x, None, &AffineParams::identity(1), &mut moving, eps()).unwrap();
        assert!(bkn_backward(&Tensor::zeros(&[3, 1, 1, 1]), &cache).is_err());
    }
}
