//! Layer zoo, networks, loss and optimizer for the desk-scale experiments.

pub mod checkpoint;
pub mod layers;
mod loss;
mod sgd;

pub use loss::softmax_cross_entropy;
pub use sgd::{sgd_step, SgdState};

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::norm::{
    self, AffineParams, BknCache, BnCache, BrnCache, BrnClip, ChainLink, CovMode, KalmanEstimate,
    KalmanLayerParams, MovingStatistics, NormEpsilon, NormError, NormKind,
};
use crate::tensor::{Shape4, Tensor, TensorError};
use layers::{Conv3x3, Dense};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("layer {index}: {source}")]
    Norm {
        index: usize,
        #[source]
        source: NormError,
    },
    #[error("layer {index}: expected input {expected:?}, got {actual:?}")]
    Shape {
        index: usize,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("backward called without a training-mode forward cache")]
    MissingCache,
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NetError>;

/// Shared settings of every normalization layer in a network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormSettings {
    pub eps: NormEpsilon,
    pub mode: CovMode,
    pub alpha: f64,
    pub brn_clip: BrnClip,
}

impl Default for NormSettings {
    fn default() -> Self {
        Self {
            eps: NormEpsilon::default(),
            mode: CovMode::Diag,
            alpha: norm::DEFAULT_ALPHA,
            brn_clip: BrnClip { r_max: 1.0, d_max: 0.0 },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormLayer {
    pub kind: NormKind,
    pub channels: usize,
    pub affine: AffineParams,
    pub moving: MovingStatistics,
    /// Present on every BKN layer except the first of the chain.
    pub kalman: Option<KalmanLayerParams>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Dense(Dense),
    Conv3x3(Conv3x3),
    Relu,
    AvgPoolGlobal,
    Norm(NormLayer),
}

impl Layer {
    pub fn name(&self) -> &'static str {
        match self {
            Layer::Dense(_) => "dense",
            Layer::Conv3x3(_) => "conv",
            Layer::Relu => "relu",
            Layer::AvgPoolGlobal => "avgpool",
            Layer::Norm(_) => "norm",
        }
    }

    /// Output shape for a given input shape, or `None` if incompatible.
    fn output_shape(&self, s: Shape4) -> Option<Shape4> {
        match self {
            Layer::Dense(d) => {
                (s.channels * s.spatial() == d.in_features).then(|| Shape4::new(s.batch, d.out_features, 1, 1))
            }
            Layer::Conv3x3(c) => (s.channels == c.in_channels).then(|| Shape4::new(s.batch, c.out_channels, s.height, s.width)),
            Layer::Relu => Some(s),
            Layer::AvgPoolGlobal => Some(Shape4::new(s.batch, s.channels, 1, 1)),
            Layer::Norm(n) => (s.channels == n.channels).then_some(s),
        }
    }

    fn expected_input(&self, s: Shape4) -> Vec<usize> {
        match self {
            Layer::Dense(d) => vec![s.batch, d.in_features, 1, 1],
            Layer::Conv3x3(c) => vec![s.batch, c.in_channels, s.height, s.width],
            Layer::Norm(n) => vec![s.batch, n.channels, s.height, s.width],
            _ => s.dims().to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, moving averages updated, caches kept.
    Train,
    /// Moving statistics.
    Infer,
    /// Batch (fused, for BKN) statistics without touching moving averages.
    EvalBatchStats,
}

#[derive(Debug, Clone)]
pub enum LayerCache {
    Dense { input: Vec<f64>, shape: Shape4 },
    Conv { cols: Vec<f64>, shape: Shape4 },
    Relu { input: Vec<f64> },
    AvgPool { shape: Shape4 },
    Bn(BnCache),
    Brn(BrnCache),
    Bkn(BknCache),
}

/// Per-normalization-layer variances seen during a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct NormTrace {
    pub layer: usize,
    /// Variance used to normalize this batch (fused for BKN).
    pub batch_var: Vec<f64>,
    pub moving_var: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    /// Keyed by stable parameter name.
    pub params: BTreeMap<String, Tensor>,
    pub input: Tensor,
}

/// An ordered stack of layers operating on `[N, C, H, W]` tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub input: (usize, usize, usize),
    pub layers: Vec<Layer>,
    pub settings: NormSettings,
}

/// Channel widths and class count of the conv-norm-relu desk architecture.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchSpec {
    pub widths: Vec<usize>,
    pub classes: usize,
}

impl Default for ArchSpec {
    fn default() -> Self {
        Self {
            widths: vec![16, 32, 32, 64],
            classes: 10,
        }
    }
}

fn param_name(index: usize, layer: &str, field: &str) -> String {
    format!("{index:02}.{layer}.{field}")
}

impl Network {
    pub fn new(input: (usize, usize, usize), layers: Vec<Layer>, settings: NormSettings) -> Self {
        Self { input, layers, settings }
    }

    /// `[conv -> norm -> relu] x widths -> global avgpool -> dense`.
    pub fn desk(input: (usize, usize, usize), arch: &ArchSpec, kind: NormKind, settings: NormSettings, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        let mut channels = input.0;
        for &w in &arch.widths {
            layers.push(Layer::Conv3x3(Conv3x3::new(channels, w, &mut rng)));
            layers.push(Layer::Norm(NormLayer {
                kind,
                channels: w,
                affine: AffineParams::identity(w),
                moving: MovingStatistics::new(w, settings.mode, settings.alpha),
                kalman: None,
            }));
            layers.push(Layer::Relu);
            channels = w;
        }
        layers.push(Layer::AvgPoolGlobal);
        layers.push(Layer::Dense(Dense::new(channels, arch.classes, &mut rng)));
        let mut net = Self::new(input, layers, settings);
        net.link_kalman_chain();
        net
    }

    /// Gives every BKN layer after the first Kalman parameters linking it to
    /// the nearest preceding normalization layer.
    pub fn link_kalman_chain(&mut self) {
        let mut prev: Option<usize> = None;
        for layer in &mut self.layers {
            if let Layer::Norm(n) = layer {
                if n.kind == NormKind::Bkn {
                    n.kalman = prev.map(|pc| KalmanLayerParams::new(n.channels, pc));
                }
                prev = Some(n.channels);
            }
        }
    }

    /// Pins every BKN gain to `q` (e.g. `1.0` for the BN reduction).
    pub fn pin_gains(&mut self, q: Option<f64>) {
        for layer in &mut self.layers {
            if let Layer::Norm(NormLayer { kalman: Some(k), .. }) = layer {
                k.gain_override = q;
            }
        }
    }

    pub fn norm_layers(&self) -> impl Iterator<Item = (usize, &NormLayer)> {
        self.layers.iter().enumerate().filter_map(|(i, l)| match l {
            Layer::Norm(n) => Some((i, n)),
            _ => None,
        })
    }

    pub fn set_brn_clip(&mut self, clip: BrnClip) {
        self.settings.brn_clip = clip;
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().values().map(Tensor::len).sum()
    }

    /// Copies of every learnable tensor, keyed by name.
    pub fn parameters(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Dense(d) => {
                    out.insert(param_name(i, "dense", "weight"), d.weight.clone());
                    out.insert(param_name(i, "dense", "bias"), Tensor::from_vec(d.bias.clone()));
                }
                Layer::Conv3x3(c) => {
                    out.insert(param_name(i, "conv", "weight"), c.weight.clone());
                    out.insert(param_name(i, "conv", "bias"), Tensor::from_vec(c.bias.clone()));
                }
                Layer::Norm(n) => {
                    out.insert(param_name(i, "norm", "gamma"), Tensor::from_vec(n.affine.gamma.clone()));
                    out.insert(param_name(i, "norm", "beta"), Tensor::from_vec(n.affine.beta.clone()));
                    if let Some(k) = &n.kalman {
                        if k.gain_override.is_none() {
                            out.insert(param_name(i, "norm", "q_raw"), Tensor::from_vec(vec![k.q_raw]));
                        }
                        out.insert(param_name(i, "norm", "transition"), k.transition.clone());
                        out.insert(param_name(i, "norm", "r_raw"), Tensor::from_vec(k.r_raw.clone()));
                    }
                }
                Layer::Relu | Layer::AvgPoolGlobal => {}
            }
        }
        out
    }

    /// Mutable views of every learnable tensor, sorted by name.
    pub fn parameters_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = Vec::new();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            match layer {
                Layer::Dense(d) => {
                    out.push((param_name(i, "dense", "weight"), d.weight.data_mut()));
                    out.push((param_name(i, "dense", "bias"), &mut d.bias));
                }
                Layer::Conv3x3(c) => {
                    out.push((param_name(i, "conv", "weight"), c.weight.data_mut()));
                    out.push((param_name(i, "conv", "bias"), &mut c.bias));
                }
                Layer::Norm(n) => {
                    out.push((param_name(i, "norm", "gamma"), &mut n.affine.gamma));
                    out.push((param_name(i, "norm", "beta"), &mut n.affine.beta));
                    if let Some(k) = &mut n.kalman {
                        if k.gain_override.is_none() {
                            out.push((param_name(i, "norm", "q_raw"), std::slice::from_mut(&mut k.q_raw)));
                        }
                        out.push((param_name(i, "norm", "transition"), k.transition.data_mut()));
                        out.push((param_name(i, "norm", "r_raw"), &mut k.r_raw));
                    }
                }
                Layer::Relu | Layer::AvgPoolGlobal => {}
            }
        }
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    fn check_input(&self, x: &Tensor) -> Result<Shape4> {
        let s = x.shape4().map_err(|_| NetError::Shape {
            index: 0,
            expected: vec![0, self.input.0, self.input.1, self.input.2],
            actual: x.shape().to_vec(),
        })?;
        if (s.channels, s.height, s.width) != self.input && !self.layers.is_empty() {
            return Err(NetError::Shape {
                index: 0,
                expected: vec![s.batch, self.input.0, self.input.1, self.input.2],
                actual: x.shape().to_vec(),
            });
        }
        Ok(s)
    }

    /// Forward pass. Caches are returned only in [`Mode::Train`], which also
    /// updates the moving statistics of every normalization layer.
    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<(Tensor, Option<Vec<LayerCache>>)> {
        match mode {
            Mode::Train => {
                let (y, caches) = self.forward_train(x)?;
                Ok((y, Some(caches)))
            }
            other => Ok((self.predict(x, other == Mode::EvalBatchStats)?, None)),
        }
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Result<(Tensor, Vec<LayerCache>)> {
        let (y, caches, _) = self.forward_train_chain(x, None)?;
        Ok((y, caches))
    }

    /// Training forward that also returns each BKN layer's estimate, in
    /// order. With `frozen`, the i-th chained BKN layer takes its prior from
    /// `frozen[i - 1]` instead of the live estimate; this is the function
    /// whose derivative the backward pass computes, since the chain is
    /// detached from gradient flow.
    pub fn forward_train_chain(
        &mut self,
        x: &Tensor,
        frozen: Option<&[KalmanEstimate]>,
    ) -> Result<(Tensor, Vec<LayerCache>, Vec<KalmanEstimate>)> {
        let mut s = self.check_input(x)?;
        let mut estimates = Vec::new();
        let settings = self.settings;
        let mut h = x.data().to_vec();
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut chain: Option<KalmanEstimate> = None;
        for (index, layer) in self.layers.iter_mut().enumerate() {
            let out_shape = layer.output_shape(s).ok_or_else(|| NetError::Shape {
                index,
                expected: layer.expected_input(s),
                actual: s.dims().to_vec(),
            })?;
            let wrap = |source| NetError::Norm { index, source };
            let (next, cache) = match layer {
                Layer::Dense(d) => (d.forward(&h, s.batch), LayerCache::Dense { input: h, shape: s }),
                Layer::Conv3x3(c) => {
                    let (out, cols) = c.forward(&h, s);
                    (out, LayerCache::Conv { cols, shape: s })
                }
                Layer::Relu => (layers::relu_forward(&h), LayerCache::Relu { input: h }),
                Layer::AvgPoolGlobal => (layers::avgpool_forward(&h, s), LayerCache::AvgPool { shape: s }),
                Layer::Norm(n) => {
                    let xt = Tensor::new(s.dims().to_vec(), h)?;
                    match n.kind {
                        NormKind::Bn => {
                            let (y, c) = norm::bn_forward_train(&xt, &n.affine, &mut n.moving, settings.eps).map_err(wrap)?;
                            chain = None;
                            (y.into_data(), LayerCache::Bn(c))
                        }
                        NormKind::Brn => {
                            let (y, c) = norm::brn_forward_train(&xt, &n.affine, &mut n.moving, settings.eps, settings.brn_clip)
                                .map_err(wrap)?;
                            chain = None;
                            (y.into_data(), LayerCache::Brn(c))
                        }
                        NormKind::Bkn => {
                            let prev = match frozen {
                                Some(f) if chain.is_some() => estimates.len().checked_sub(1).and_then(|i| f.get(i)),
                                _ => chain.as_ref(),
                            };
                            let link = match (prev, &n.kalman) {
                                (Some(prev), Some(params)) => Some(ChainLink { prev, params }),
                                _ => None,
                            };
                            let (y, est, c) =
                                norm::bkn_forward_train(&xt, link, &n.affine, &mut n.moving, settings.eps).map_err(wrap)?;
                            estimates.push(est.clone());
                            chain = Some(est);
                            (y.into_data(), LayerCache::Bkn(c))
                        }
                    }
                }
            };
            h = next;
            s = out_shape;
            caches.push(cache);
        }
        Ok((Tensor::new(s.dims().to_vec(), h)?, caches, estimates))
    }

    /// Inference with moving statistics, or with batch statistics when
    /// `batch_stats` is set. Never mutates the network.
    pub fn predict(&self, x: &Tensor, batch_stats: bool) -> Result<Tensor> {
        Ok(self.forward_eval(x, batch_stats, false)?.0)
    }

    /// Like [`Network::predict`] but also reports, for every normalization
    /// layer, the variance used on this batch and the moving variance.
    pub fn forward_eval(&self, x: &Tensor, batch_stats: bool, trace: bool) -> Result<(Tensor, Vec<NormTrace>)> {
        let mut s = self.check_input(x)?;
        let settings = self.settings;
        let mut h = x.data().to_vec();
        let mut chain: Option<KalmanEstimate> = None;
        let mut traces = Vec::new();
        for (index, layer) in self.layers.iter().enumerate() {
            let out_shape = layer.output_shape(s).ok_or_else(|| NetError::Shape {
                index,
                expected: layer.expected_input(s),
                actual: s.dims().to_vec(),
            })?;
            let wrap = |source| NetError::Norm { index, source };
            h = match layer {
                Layer::Dense(d) => d.forward(&h, s.batch),
                Layer::Conv3x3(c) => c.forward(&h, s).0,
                Layer::Relu => layers::relu_forward(&h),
                Layer::AvgPoolGlobal => layers::avgpool_forward(&h, s),
                Layer::Norm(n) => {
                    let xt = Tensor::new(s.dims().to_vec(), h)?;
                    if !batch_stats {
                        if trace {
                            let var = n.moving.sigma.diagonal();
                            traces.push(NormTrace {
                                layer: index,
                                batch_var: var.clone(),
                                moving_var: var,
                            });
                        }
                        norm::bkn_forward_infer(&xt, &n.moving, &n.affine, settings.eps).map_err(wrap)?.into_data()
                    } else {
                        let link = match (n.kind, &chain, &n.kalman) {
                            (NormKind::Bkn, Some(prev), Some(params)) => Some(ChainLink { prev, params }),
                            _ => None,
                        };
                        let (y, est) =
                            norm::bkn_forward_eval_batchstats(&xt, link, &n.affine, settings.eps, settings.mode).map_err(wrap)?;
                        if trace {
                            traces.push(NormTrace {
                                layer: index,
                                batch_var: est.cov_post.diagonal(),
                                moving_var: n.moving.sigma.diagonal(),
                            });
                        }
                        chain = (n.kind == NormKind::Bkn).then_some(est);
                        y.into_data()
                    }
                }
            };
            s = out_shape;
        }
        Ok((Tensor::new(s.dims().to_vec(), h)?, traces))
    }

    /// Backpropagates `grad_logits` through a training-mode forward.
    pub fn backward(&self, caches: &[LayerCache], grad_logits: &Tensor) -> Result<Gradients> {
        if caches.len() != self.layers.len() {
            return Err(NetError::MissingCache);
        }
        let mut params = BTreeMap::new();
        let mut g = grad_logits.data().to_vec();
        for (index, (layer, cache)) in self.layers.iter().zip(caches).enumerate().rev() {
            let wrap = |source| NetError::Norm { index, source };
            g = match (layer, cache) {
                (Layer::Dense(d), LayerCache::Dense { input, shape }) => {
                    let (gx, gw, gb) = d.backward(input, &g, shape.batch);
                    params.insert(param_name(index, "dense", "weight"), Tensor::new(d.weight.shape().to_vec(), gw)?);
                    params.insert(param_name(index, "dense", "bias"), Tensor::from_vec(gb));
                    gx
                }
                (Layer::Conv3x3(c), LayerCache::Conv { cols, shape }) => {
                    let (gx, gw, gb) = c.backward(cols, &g, *shape);
                    params.insert(param_name(index, "conv", "weight"), Tensor::new(c.weight.shape().to_vec(), gw)?);
                    params.insert(param_name(index, "conv", "bias"), Tensor::from_vec(gb));
                    gx
                }
                (Layer::Relu, LayerCache::Relu { input }) => layers::relu_backward(input, &g),
                (Layer::AvgPoolGlobal, LayerCache::AvgPool { shape }) => layers::avgpool_backward(&g, *shape),
                (Layer::Norm(n), LayerCache::Bn(c)) => {
                    let gy = Tensor::new(c_shape(c.shape()), g)?;
                    let gr = norm::bn_backward(&gy, c).map_err(wrap)?;
                    insert_affine(&mut params, index, gr.gamma, gr.beta);
                    debug_assert_eq!(n.kind, NormKind::Bn);
                    gr.x.into_data()
                }
                (Layer::Norm(_), LayerCache::Brn(c)) => {
                    let gy = Tensor::new(c_shape(c.shape()), g)?;
                    let gr = norm::brn_backward(&gy, c).map_err(wrap)?;
                    insert_affine(&mut params, index, gr.gamma, gr.beta);
                    gr.x.into_data()
                }
                (Layer::Norm(n), LayerCache::Bkn(c)) => {
                    let gy = Tensor::new(c_shape(c.shape()), g)?;
                    let gr = norm::bkn_backward(&gy, c).map_err(wrap)?;
                    insert_affine(&mut params, index, gr.gamma, gr.beta);
                    if let Some(k) = &n.kalman {
                        if k.gain_override.is_none() {
                            params.insert(param_name(index, "norm", "q_raw"), Tensor::from_vec(vec![gr.q_raw]));
                        }
                        let zero_t = || Tensor::zeros(k.transition.shape());
                        params.insert(param_name(index, "norm", "transition"), gr.transition.unwrap_or_else(zero_t));
                        params.insert(
                            param_name(index, "norm", "r_raw"),
                            Tensor::from_vec(gr.r_raw.unwrap_or_else(|| vec![0.0; k.r_raw.len()])),
                        );
                    }
                    gr.x.into_data()
                }
                _ => return Err(NetError::MissingCache),
            };
        }
        let (c, h, w) = self.input;
        let batch = g.len() / (c * h * w).max(1);
        Ok(Gradients {
            params,
            input: Tensor::new(vec![batch, c, h, w], g)?,
        })
    }
}

fn c_shape(s: Shape4) -> Vec<usize> {
    s.dims().to_vec()
}

fn insert_affine(params: &mut BTreeMap<String, Tensor>, index: usize, gamma: Vec<f64>, beta: Vec<f64>) {
    params.insert(param_name(index, "norm", "gamma"), Tensor::from_vec(gamma));
    params.insert(param_name(index, "norm", "beta"), Tensor::from_vec(beta));
}
