//! Batch statistics and the two Kalman steps: prediction from the previous
//! layer and fusion with the current observation.

use super::{BatchStatistics, CovMode, Covariance, KalmanEstimate, KalmanLayerParams, NormError, Result};
use crate::tensor::Tensor;

/// Per-channel mean and biased covariance of a `[m, C, a, b]` tensor,
/// pooled over the `m * a * b` positions.
pub fn batch_stats(x: &Tensor, mode: CovMode) -> Result<BatchStatistics> {
    let s = x.shape4()?;
    let count = s.effective_count();
    if count == 0 || s.channels == 0 {
        return Err(NormError::Empty);
    }
    let (c_n, sp) = (s.channels, s.spatial());
    let data = x.data();
    let mut mean = vec![0.0; c_n];
    for n in 0..s.batch {
        for (c, m) in mean.iter_mut().enumerate() {
            let base = (n * c_n + c) * sp;
            for &v in &data[base..base + sp] {
                *m += v;
            }
        }
    }
    let inv = 1.0 / count as f64;
    for m in &mut mean {
        *m *= inv;
    }
    let cov = match mode {
        CovMode::Diag => {
            let mut var = vec![0.0; c_n];
            for n in 0..s.batch {
                for c in 0..c_n {
                    let base = (n * c_n + c) * sp;
                    for &v in &data[base..base + sp] {
                        let d = v - mean[c];
                        var[c] += d * d;
                    }
                }
            }
            for v in &mut var {
                *v *= inv;
            }
            Covariance::Diag(var)
        }
        CovMode::Full => {
            let mut cov = vec![0.0; c_n * c_n];
            let mut centered = vec![0.0; c_n];
            for n in 0..s.batch {
                for p in 0..sp {
                    for c in 0..c_n {
                        centered[c] = data[(n * c_n + c) * sp + p] - mean[c];
                    }
                    for i in 0..c_n {
                        for j in 0..c_n {
                            cov[i * c_n + j] += centered[i] * centered[j];
                        }
                    }
                }
            }
            for v in &mut cov {
                *v *= inv;
            }
            Covariance::Full(Tensor::new(vec![c_n, c_n], cov)?)
        }
    };
    Ok(BatchStatistics {
        mean,
        cov,
        effective_count: count,
    })
}

/// Carries the previous layer's posterior into this layer:
/// `mean = A mean_prev`, `cov = A cov_prev A^T + R`.
///
/// A diagonal `cov_prev` yields the diagonal `(A o A) var_prev + R`.
pub fn kalman_predict(prev: &KalmanEstimate, params: &KalmanLayerParams) -> Result<(Vec<f64>, Covariance)> {
    let a = &params.transition;
    let (rows, cols) = (a.shape()[0], a.shape()[1]);
    if cols != prev.mean_post.len() || cols != prev.cov_post.dim() {
        return Err(NormError::Dimension {
            what: "transition columns vs previous channels",
            expected: cols,
            actual: prev.mean_post.len(),
        });
    }
    if params.r_raw.len() != rows {
        return Err(NormError::Dimension {
            what: "noise diagonal",
            expected: rows,
            actual: params.r_raw.len(),
        });
    }
    let ad = a.data();
    let noise = params.noise();
    let mean = (0..rows)
        .map(|i| {
            let mut s = 0.0;
            for j in 0..cols {
                s += ad[i * cols + j] * prev.mean_post[j];
            }
            s
        })
        .collect();
    let cov = match &prev.cov_post {
        Covariance::Diag(var) => Covariance::Diag(
            (0..rows)
                .map(|i| {
                    let mut s = 0.0;
                    for j in 0..cols {
                        let w = ad[i * cols + j];
                        s += w * w * var[j];
                    }
                    s + noise[i]
                })
                .collect(),
        ),
        Covariance::Full(p) => {
            let mut out = a.matmul(p)?.matmul(&a.transpose()?)?;
            let d = out.data_mut();
            for i in 0..rows {
                d[i * rows + i] += noise[i];
            }
            Covariance::Full(out)
        }
    };
    Ok((mean, cov))
}

/// Fuses a prior with the observed batch statistics under gain `q`
/// (`p = 1 - q`):
///
/// ```text
/// mean_post = p mean_prior + q xbar
/// cov_post  = p cov_prior + q S + p q (xbar - mean_prior)(xbar - mean_prior)^T
/// ```
pub fn kalman_fuse(
    mean_prior: &[f64],
    cov_prior: &Covariance,
    obs: &BatchStatistics,
    q: f64,
) -> Result<(Vec<f64>, Covariance)> {
    let c_n = obs.mean.len();
    if mean_prior.len() != c_n || cov_prior.dim() != c_n || obs.cov.dim() != c_n {
        return Err(NormError::Dimension {
            what: "prior vs observed channels",
            expected: c_n,
            actual: mean_prior.len(),
        });
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(NormError::InvalidParam(format!("gain {q} outside [0, 1]")));
    }
    let p = 1.0 - q;
    let pq = p * q;
    let diff: Vec<f64> = obs.mean.iter().zip(mean_prior).map(|(x, m)| x - m).collect();
    let mean = mean_prior
        .iter()
        .zip(&obs.mean)
        .map(|(&m, &x)| p * m + q * x)
        .collect();
    let cov = match (cov_prior, &obs.cov) {
        (Covariance::Diag(prior), Covariance::Diag(s)) => Covariance::Diag(
            (0..c_n)
                .map(|c| p * prior[c] + q * s[c] + pq * diff[c] * diff[c])
                .collect(),
        ),
        (Covariance::Full(prior), Covariance::Full(s)) => {
            let (pd, sd) = (prior.data(), s.data());
            let mut out = vec![0.0; c_n * c_n];
            for i in 0..c_n {
                for j in 0..c_n {
                    let k = i * c_n + j;
                    out[k] = p * pd[k] + q * sd[k] + pq * diff[i] * diff[j];
                }
            }
            Covariance::Full(Tensor::new(vec![c_n, c_n], out)?)
        }
        _ => return Err(NormError::ModeMismatch("prior vs observation")),
    };
    Ok((mean, cov))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::norm::inverse_softplus;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn params(a: Tensor, r: &[f64]) -> KalmanLayerParams {
        KalmanLayerParams {
            transition: a,
            q_raw: 0.0,
            r_raw: r.iter().map(|&v| inverse_softplus(v)).collect(),
            gain_override: None,
        }
    }

    fn estimate(mean: Vec<f64>, cov: Covariance) -> KalmanEstimate {
        KalmanEstimate {
            mean_prior: mean.clone(),
            cov_prior: cov.clone(),
            mean_post: mean,
            cov_post: cov,
        }
    }

    fn obs(mean: Vec<f64>, var: Vec<f64>) -> BatchStatistics {
        BatchStatistics {
            mean,
            cov: Covariance::Diag(var),
            effective_count: 1,
        }
    }

    #[test]
    fn effective_count_pools_spatial_positions() {
        let x = Tensor::zeros(&[32, 2, 7, 7]);
        assert_eq!(batch_stats(&x, CovMode::Diag).unwrap().effective_count, 1568);
    }

    #[test]
    fn constant_input_has_zero_covariance() {
        let x = Tensor::full(&[3, 2, 2, 2], 1.5);
        let st = batch_stats(&x, CovMode::Full).unwrap();
        assert_eq!(st.mean, vec![1.5, 1.5]);
        assert!(st.cov.values().iter().all(|&v| v == 0.0));
        assert!(matches!(
            batch_stats(&Tensor::zeros(&[0, 2, 1, 1]), CovMode::Diag),
            Err(NormError::Empty)
        ));
    }

    #[test]
    fn batch_stats_match_two_pass_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let data: Vec<f64> = (0..48).map(|_| rng.random_range(-3.0..3.0)).collect();
        let x = Tensor::new(vec![4, 3, 2, 2], data.clone()).unwrap();
        let full = batch_stats(&x, CovMode::Full).unwrap();
        let diag = batch_stats(&x, CovMode::Diag).unwrap();
        let channel = |c: usize| -> Vec<f64> {
            (0..4).flat_map(|n| (0..4).map(move |p| (n, p))).map(|(n, p)| data[(n * 3 + c) * 4 + p]).collect()
        };
        for c in 0..3 {
            let xs = channel(c);
            let mean = xs.iter().sum::<f64>() / 16.0;
            assert!((full.mean[c] - mean).abs() <= 1e-12);
            for d in 0..3 {
                let ys = channel(d);
                let my = ys.iter().sum::<f64>() / 16.0;
                let cov = xs.iter().zip(&ys).map(|(a, b)| (a - mean) * (b - my)).sum::<f64>() / 16.0;
                assert!((full.cov.values()[c * 3 + d] - cov).abs() <= 1e-12);
            }
            assert!((diag.cov.values()[c] - full.cov.diagonal()[c]).abs() <= 1e-12);
        }
    }

    #[test]
    fn predict_identity_and_pure_noise() {
        let prev = estimate(vec![1.0, 2.0], Covariance::Diag(vec![3.0, 4.0]));
        let mut p = params(Tensor::eye(2), &[1e-3, 1e-3]);
        p.r_raw = vec![-800.0; 2];
        let (m, c) = kalman_predict(&prev, &p).unwrap();
        assert_eq!(m, vec![1.0, 2.0]);
        assert_eq!(c, Covariance::Diag(vec![3.0, 4.0]));

        let p = params(Tensor::zeros(&[2, 2]), &[0.25, 0.5]);
        let (m, c) = kalman_predict(&prev, &p).unwrap();
        assert_eq!(m, vec![0.0, 0.0]);
        let d = c.diagonal();
        assert!((d[0] - 0.25).abs() < 1e-15 && (d[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn predict_single_row_transition() {
        let a = Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap();
        let p = params(a, &[0.5]);
        let diag = estimate(vec![0.0, 0.0], Covariance::Diag(vec![1.0, 4.0]));
        let full = estimate(
            vec![0.0, 0.0],
            Covariance::Full(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 4.0]).unwrap()),
        );
        let (_, cd) = kalman_predict(&diag, &p).unwrap();
        let (_, cf) = kalman_predict(&full, &p).unwrap();
        assert!((cd.values()[0] - 5.5).abs() < 1e-12);
        assert!((cf.values()[0] - 5.5).abs() < 1e-12);
    }

    #[test]
    fn predict_rejects_mismatched_transition() {
        let prev = estimate(vec![1.0, 2.0, 3.0], Covariance::Diag(vec![1.0; 3]));
        let p = params(Tensor::eye(2), &[0.1, 0.1]);
        assert!(matches!(kalman_predict(&prev, &p), Err(NormError::Dimension { .. })));
    }

    #[test]
    fn fuse_limits_and_worked_value() {
        let prior_cov = Covariance::Diag(vec![1.0]);
        let o = obs(vec![2.0], vec![3.0]);
        let (m, c) = kalman_fuse(&[0.0], &prior_cov, &o, 1.0).unwrap();
        assert_eq!((m, c), (vec![2.0], Covariance::Diag(vec![3.0])));
        let (m, c) = kalman_fuse(&[0.0], &prior_cov, &o, 0.0).unwrap();
        assert_eq!((m, c), (vec![0.0], Covariance::Diag(vec![1.0])));
        let (m, c) = kalman_fuse(&[0.0], &prior_cov, &o, 0.5).unwrap();
        assert_eq!(m, vec![1.0]);
        assert!((c.values()[0] - 3.0).abs() < 1e-15);
    }

    #[test]
    fn fuse_rejects_mixed_modes() {
        let prior = Covariance::Full(Tensor::eye(1));
        let o = obs(vec![2.0], vec![3.0]);
        assert!(matches!(kalman_fuse(&[0.0], &prior, &o, 0.5), Err(NormError::ModeMismatch(_))));
    }
}
