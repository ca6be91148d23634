use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{finite_diff, GradCheckReport, ParamCheck, Result, VerifyError};
use crate::norm::{
    bkn_backward, bkn_forward_train, bn_backward, bn_forward_train, brn_backward, brn_forward_train, AffineParams,
    BrnClip, ChainLink, CovMode, Covariance, KalmanEstimate, KalmanLayerParams, MovingStatistics, NormEpsilon,
    NormKind,
};
use crate::tensor::Tensor;

/// Shape and options of a single-layer gradient check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerCheckConfig {
    pub kind: NormKind,
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Channel count of the preceding layer's estimate; `None` checks a
    /// chain head (BKN only).
    pub prev_channels: Option<usize>,
    pub mode: CovMode,
    pub pinned_gain: Option<f64>,
    pub brn_clip: BrnClip,
    pub step: f64,
    pub tolerance: f64,
}

impl LayerCheckConfig {
    /// `m = 5, C = 3, 2x2` spatial, prior from a 3-channel layer.
    pub fn small(kind: NormKind) -> Self {
        Self {
            kind,
            batch: 5,
            channels: 3,
            height: 2,
            width: 2,
            prev_channels: (kind == NormKind::Bkn).then_some(3),
            mode: CovMode::Diag,
            pinned_gain: None,
            brn_clip: BrnClip { r_max: 2.0, d_max: 0.5 },
            step: 1e-6,
            tolerance: 1e-5,
        }
    }

    /// Random BKN shape: `m` in 1..=8, `C` in 1..=4, spatial up to 3x3, a
    /// random prior of 1..=4 channels, either covariance mode.
    pub fn random_bkn(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            batch: rng.random_range(1..=8),
            channels: rng.random_range(1..=4),
            height: rng.random_range(1..=3),
            width: rng.random_range(1..=3),
            prev_channels: Some(rng.random_range(1..=4)),
            mode: if rng.random_bool(0.5) { CovMode::Diag } else { CovMode::Full },
            ..Self::small(NormKind::Bkn)
        }
    }

    fn coordinates(&self) -> usize {
        let x = self.batch * self.channels * self.height * self.width;
        x + 2 * self.channels + self.prev_channels.map_or(0, |p| 1 + self.channels * (p + 1))
    }
}

/// Randomized inputs and parameters of one layer check. The scalar loss is
/// `sum_i weights_i * y_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerInstance {
    pub x: Tensor,
    pub affine: AffineParams,
    pub prev: Option<KalmanEstimate>,
    pub params: Option<KalmanLayerParams>,
    pub moving: MovingStatistics,
    pub weights: Vec<f64>,
    pub eps: NormEpsilon,
}

fn uniform(n: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// A random covariance: diagonal entries in `[0.1, 2)`, or `B B^T / c + 0.1 I`.
pub(crate) fn random_covariance(c: usize, mode: CovMode, rng: &mut ChaCha8Rng) -> Covariance {
    match mode {
        CovMode::Diag => Covariance::Diag(uniform(c, 0.1, 2.0, rng)),
        CovMode::Full => {
            let b = uniform(c * c, -1.0, 1.0, rng);
            let mut s = vec![0.0; c * c];
            for i in 0..c {
                for j in 0..c {
                    let mut acc = 0.0;
                    for k in 0..c {
                        acc += b[i * c + k] * b[j * c + k];
                    }
                    s[i * c + j] = acc / c as f64 + if i == j { 0.1 } else { 0.0 };
                }
            }
            Covariance::Full(Tensor::new(vec![c, c], s).expect("square"))
        }
    }
}

impl LayerInstance {
    pub fn random(cfg: &LayerCheckConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_1a7e);
        let c = cfg.channels;
        let dims = vec![cfg.batch, c, cfg.height, cfg.width];
        let n: usize = dims.iter().product();
        let x = Tensor::new(dims, uniform(n, -2.0, 2.0, &mut rng)).expect("consistent shape");
        let affine = AffineParams {
            gamma: uniform(c, 0.5, 1.5, &mut rng),
            beta: uniform(c, -0.5, 0.5, &mut rng),
        };
        let (prev, params) = match (cfg.kind, cfg.prev_channels) {
            (NormKind::Bkn, Some(pc)) => {
                let mean = uniform(pc, -1.0, 1.0, &mut rng);
                let cov = random_covariance(pc, cfg.mode, &mut rng);
                let prev = KalmanEstimate {
                    mean_prior: mean.clone(),
                    cov_prior: cov.clone(),
                    mean_post: mean,
                    cov_post: cov,
                };
                let params = KalmanLayerParams {
                    transition: Tensor::new(vec![c, pc], uniform(c * pc, -1.0, 1.0, &mut rng)).expect("shape"),
                    q_raw: rng.random_range(-1.5..1.5),
                    r_raw: uniform(c, -3.0, 0.5, &mut rng),
                    gain_override: cfg.pinned_gain,
                };
                (Some(prev), Some(params))
            }
            _ => (None, None),
        };
        let moving = if cfg.kind == NormKind::Brn {
            MovingStatistics::seeded(uniform(c, -1.0, 1.0, &mut rng), Covariance::Diag(uniform(c, 0.2, 3.0, &mut rng)), 0.1)
        } else {
            MovingStatistics::new(c, cfg.mode, 0.1)
        };
        Self {
            x,
            affine,
            prev,
            params,
            moving,
            weights: uniform(n, -1.0, 1.0, &mut rng),
            eps: NormEpsilon::default(),
        }
    }

    fn weighted(&self, y: &Tensor) -> f64 {
        super::oracle::neumaier(y.data().iter().zip(&self.weights).map(|(a, b)| a * b))
    }

    fn link(&self) -> Option<ChainLink<'_>> {
        match (&self.prev, &self.params) {
            (Some(prev), Some(params)) => Some(ChainLink { prev, params }),
            _ => None,
        }
    }

    fn bkn_loss(&self) -> f64 {
        let mut moving = self.moving.clone();
        bkn_forward_train(&self.x, self.link(), &self.affine, &mut moving, self.eps)
            .map_or(f64::NAN, |(y, _, _)| self.weighted(&y))
    }

    fn bn_loss(&self) -> f64 {
        let mut moving = self.moving.clone();
        bn_forward_train(&self.x, &self.affine, &mut moving, self.eps).map_or(f64::NAN, |(y, _)| self.weighted(&y))
    }

    /// BRN with `r` and `d` held at the given values, evaluated without the
    /// production code path.
    fn brn_frozen_loss(&self, r: &[f64], d: &[f64]) -> f64 {
        let s = match self.x.shape4() {
            Ok(s) => s,
            Err(_) => return f64::NAN,
        };
        let (c_n, sp) = (s.channels, s.spatial());
        let count = s.effective_count() as f64;
        let xs = self.x.data();
        let mut loss = 0.0;
        for c in 0..c_n {
            let idx = || (0..s.batch).flat_map(move |n| (n * c_n + c) * sp..(n * c_n + c + 1) * sp);
            let mean = idx().map(|i| xs[i]).sum::<f64>() / count;
            let var = idx().map(|i| (xs[i] - mean).powi(2)).sum::<f64>() / count;
            let sigma = (var + self.eps.get()).sqrt();
            for i in idx() {
                let y = self.affine.gamma[c] * (r[c] * (xs[i] - mean) / sigma + d[c]) + self.affine.beta[c];
                loss += self.weights[i] * y;
            }
        }
        loss
    }
}

struct Checker<'a> {
    cfg: &'a LayerCheckConfig,
    params: Vec<ParamCheck>,
}

impl Checker<'_> {
    fn group<G, S>(&mut self, name: &str, analytic: Vec<f64>, base: &LayerInstance, get: G, set: S, loss: &dyn Fn(&LayerInstance) -> f64) -> Result<()>
    where
        G: Fn(&LayerInstance) -> Vec<f64>,
        S: Fn(&mut LayerInstance, &[f64]),
    {
        let theta = get(base);
        let eval = |v: &[f64]| {
            let mut inst = base.clone();
            set(&mut inst, v);
            loss(&inst)
        };
        let numeric = finite_diff(eval, &theta, self.cfg.step)?;
        let coarse = finite_diff(eval, &theta, self.cfg.step * 10.0)?;
        self.params.push(ParamCheck::new(name, analytic, numeric, &coarse, self.cfg.tolerance));
        Ok(())
    }
}

fn set_x(i: &mut LayerInstance, v: &[f64]) {
    i.x.data_mut().copy_from_slice(v);
}

/// Compares every analytic gradient of one layer (`x`, `gamma`, `beta` and,
/// for chained BKN, `q_raw`, `transition`, `r_raw`) with central differences
/// of `sum_i w_i y_i`.
pub fn check_layer_gradients(cfg: &LayerCheckConfig, seed: u64) -> Result<GradCheckReport> {
    check_instance(cfg, &LayerInstance::random(cfg, seed))
}

pub fn check_instance(cfg: &LayerCheckConfig, inst: &LayerInstance) -> Result<GradCheckReport> {
    if cfg.coordinates() > 5000 {
        return Err(VerifyError::Config(format!("{} coordinates is too many to difference", cfg.coordinates())));
    }
    if cfg.prev_channels.is_some() && cfg.kind != NormKind::Bkn {
        return Err(VerifyError::Config("only BKN layers take a prior".into()));
    }
    let grad_y = Tensor::new(inst.x.shape().to_vec(), inst.weights.clone()).map_err(crate::norm::NormError::from)?;
    let mut ck = Checker { cfg, params: Vec::new() };
    let get_x = |i: &LayerInstance| i.x.data().to_vec();
    let get_gamma = |i: &LayerInstance| i.affine.gamma.clone();
    let set_gamma = |i: &mut LayerInstance, v: &[f64]| i.affine.gamma = v.to_vec();
    let get_beta = |i: &LayerInstance| i.affine.beta.clone();
    let set_beta = |i: &mut LayerInstance, v: &[f64]| i.affine.beta = v.to_vec();
    match cfg.kind {
        NormKind::Bn => {
            let mut moving = inst.moving.clone();
            let (_, cache) = bn_forward_train(&inst.x, &inst.affine, &mut moving, inst.eps)?;
            let g = bn_backward(&grad_y, &cache)?;
            let loss = |i: &LayerInstance| i.bn_loss();
            ck.group("x", g.x.into_data(), inst, get_x, set_x, &loss)?;
            ck.group("gamma", g.gamma, inst, get_gamma, set_gamma, &loss)?;
            ck.group("beta", g.beta, inst, get_beta, set_beta, &loss)?;
        }
        NormKind::Brn => {
            let mut moving = inst.moving.clone();
            let (_, cache) = brn_forward_train(&inst.x, &inst.affine, &mut moving, inst.eps, cfg.brn_clip)?;
            let g = brn_backward(&grad_y, &cache)?;
            let (r, d) = cache.correction();
            let (r, d) = (r.to_vec(), d.to_vec());
            let loss = move |i: &LayerInstance| i.brn_frozen_loss(&r, &d);
            ck.group("x", g.x.into_data(), inst, get_x, set_x, &loss)?;
            ck.group("gamma", g.gamma, inst, get_gamma, set_gamma, &loss)?;
            ck.group("beta", g.beta, inst, get_beta, set_beta, &loss)?;
        }
        NormKind::Bkn => {
            let mut moving = inst.moving.clone();
            let (_, _, cache) = bkn_forward_train(&inst.x, inst.link(), &inst.affine, &mut moving, inst.eps)?;
            let g = bkn_backward(&grad_y, &cache)?;
            let loss = |i: &LayerInstance| i.bkn_loss();
            ck.group("x", g.x.into_data(), inst, get_x, set_x, &loss)?;
            ck.group("gamma", g.gamma, inst, get_gamma, set_gamma, &loss)?;
            ck.group("beta", g.beta, inst, get_beta, set_beta, &loss)?;
            if let (Some(params), Some(ga), Some(gr)) = (&inst.params, g.transition, g.r_raw) {
                if params.gain_override.is_none() {
                    ck.group(
                        "q_raw",
                        vec![g.q_raw],
                        inst,
                        |i| vec![i.params.as_ref().expect("linked").q_raw],
                        |i, v| i.params.as_mut().expect("linked").q_raw = v[0],
                        &loss,
                    )?;
                }
                ck.group(
                    "transition",
                    ga.into_data(),
                    inst,
                    |i| i.params.as_ref().expect("linked").transition.data().to_vec(),
                    |i, v| i.params.as_mut().expect("linked").transition.data_mut().copy_from_slice(v),
                    &loss,
                )?;
                ck.group(
                    "r_raw",
                    gr,
                    inst,
                    |i| i.params.as_ref().expect("linked").r_raw.clone(),
                    |i, v| i.params.as_mut().expect("linked").r_raw = v.to_vec(),
                    &loss,
                )?;
            }
        }
    }
    Ok(GradCheckReport {
        tolerance: cfg.tolerance,
        params: ck.params,
    })
}
