//! A small trainable neural kernel: a fixed set of layer kinds with
//! hand-written backward passes, cross-entropy/MSE losses, and momentum SGD.
//!
//! Networks are generic over [`Real`] so the same code trains in `f32` and is
//! gradient-checked in `f64`.

mod kernels;
pub mod gradcheck;
pub mod loss;
pub mod optim;

use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, RngCore};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};
use kernels::{ncp, ConvGeom};

pub use loss::{cross_entropy, cross_entropy_batch, mse, onehot_mse_batch};
pub use optim::{sgd_step, LearningRates, SgdConfig};

pub const BATCHNORM_EPS: f64 = 1e-5;
pub const BATCHNORM_MOMENTUM: f64 = 0.1;

/// Training mode enables dropout and batch statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Layer kind plus its hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    Conv2d { in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize },
    /// Transposed convolution; output side is `(in − 1)·stride − 2·padding + kernel`.
    Deconv2d { in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize },
    /// Affine map over the channel axis; applied per position on `[N, C, H, W]`.
    Dense { inputs: usize, outputs: usize },
    BatchNorm { features: usize },
    Dropout { rate: f64 },
    Tanh,
    Relu,
    /// Softmax over the channel axis.
    Softmax,
    UpsampleNearest { factor: usize },
    /// Non-overlapping `patch × patch` blocks projected to `dim` channels.
    PatchEmbed { in_channels: usize, patch: usize, dim: usize },
    /// Mean over all spatial positions: `[N, C, H, W]` → `[N, C]`.
    GlobalAvgPool,
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Deconv2d { .. } => "deconv2d",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::BatchNorm { .. } => "batchnorm",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::Tanh => "tanh",
            LayerSpec::Relu => "relu",
            LayerSpec::Softmax => "softmax",
            LayerSpec::UpsampleNearest { .. } => "upsample_nearest",
            LayerSpec::PatchEmbed { .. } => "patch_embed",
            LayerSpec::GlobalAvgPool => "global_avg_pool",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            LayerSpec::Conv2d { in_channels, out_channels, kernel, stride, .. }
            | LayerSpec::Deconv2d { in_channels, out_channels, kernel, stride, .. } => {
                in_channels > 0 && out_channels > 0 && kernel > 0 && stride > 0
            }
            LayerSpec::Dense { inputs, outputs } => inputs > 0 && outputs > 0,
            LayerSpec::BatchNorm { features } => features > 0,
            LayerSpec::Dropout { rate } => (0.0..1.0).contains(&rate),
            LayerSpec::UpsampleNearest { factor } => factor > 0,
            LayerSpec::PatchEmbed { in_channels, patch, dim } => {
                in_channels > 0 && patch > 0 && dim > 0
            }
            LayerSpec::Tanh | LayerSpec::Relu | LayerSpec::Softmax | LayerSpec::GlobalAvgPool => {
                true
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid hyperparameters for {self:?}")))
        }
    }

    /// Trainable tensors as `(suffix, shape, fan_in)`; fan_in is 0 for
    /// tensors that are not He-initialized.
    fn param_layout(&self) -> Vec<(&'static str, Vec<usize>, usize)> {
        match *self {
            LayerSpec::Conv2d { in_channels, out_channels, kernel, .. } => vec![
                ("weight", vec![out_channels, in_channels, kernel, kernel], in_channels * kernel * kernel),
                ("bias", vec![out_channels], 0),
            ],
            LayerSpec::Deconv2d { in_channels, out_channels, kernel, stride, .. } => {
                // each output pixel sees about cin·(k/stride)² inputs
                let taps = (kernel / stride).max(1);
                vec![
                    ("weight", vec![in_channels, out_channels, kernel, kernel], in_channels * taps * taps),
                    ("bias", vec![out_channels], 0),
                ]
            }
            LayerSpec::Dense { inputs, outputs } => {
                vec![("weight", vec![outputs, inputs], inputs), ("bias", vec![outputs], 0)]
            }
            LayerSpec::PatchEmbed { in_channels, patch, dim } => {
                let k = in_channels * patch * patch;
                vec![("weight", vec![dim, k], k), ("bias", vec![dim], 0)]
            }
            LayerSpec::BatchNorm { features } => {
                vec![("gamma", vec![features], 0), ("beta", vec![features], 0)]
            }
            _ => Vec::new(),
        }
    }
}

/// A weight tensor with its gradient and momentum buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamTensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
    pub momentum: Vec<T>,
    /// Learning-rate group; `None` marks a non-trainable buffer (running stats).
    pub group: Option<String>,
}

impl<T: Real> ParamTensor<T> {
    pub fn new(name: String, shape: Vec<usize>, value: Vec<T>, group: Option<String>) -> Self {
        let n = value.len();
        debug_assert_eq!(n, shape.iter().product::<usize>());
        Self { name, shape, value, grad: vec![T::zero(); n], momentum: vec![T::zero(); n], group }
    }

    pub fn trainable(&self) -> bool {
        self.group.is_some()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    fn cast<U: Real>(&self) -> ParamTensor<U> {
        let c = |v: &[T]| v.iter().map(|x| U::from_f64(x.to_f64().unwrap()).unwrap()).collect();
        ParamTensor {
            name: self.name.clone(),
            shape: self.shape.clone(),
            value: c(&self.value),
            grad: c(&self.grad),
            momentum: c(&self.momentum),
            group: self.group.clone(),
        }
    }
}

/// Anything holding parameter tensors in a stable order.
pub trait Parameterized<T: Real> {
    fn visit_params(&self, f: &mut dyn FnMut(&ParamTensor<T>));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut ParamTensor<T>));
    /// Marks outstanding activation caches stale after a weight update.
    fn bump_version(&mut self);

    fn zero_grad(&mut self) {
        self.visit_params_mut(&mut |p| p.zero_grad());
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| {
            if p.trainable() {
                n += p.value.len()
            }
        });
        n
    }
}

#[derive(Clone, Debug)]
pub struct Layer<T> {
    pub id: String,
    pub spec: LayerSpec,
    pub params: Vec<ParamTensor<T>>,
}

impl<T: Real> Layer<T> {
    fn new<R: Rng + ?Sized>(id: String, spec: LayerSpec, group: &str, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut params = Vec::new();
        for (suffix, shape, fan_in) in spec.param_layout() {
            let n: usize = shape.iter().product();
            let value: Vec<T> = match suffix {
                "gamma" => vec![T::one(); n],
                _ if fan_in == 0 => vec![T::zero(); n],
                _ => {
                    let bound = (6.0 / fan_in as f64).sqrt();
                    (0..n).map(|_| T::lit(rng.random_range(-bound..bound))).collect()
                }
            };
            params.push(ParamTensor::new(format!("{id}.{suffix}"), shape, value, Some(group.into())));
        }
        if let LayerSpec::BatchNorm { features } = spec {
            params.push(ParamTensor::new(format!("{id}.running_mean"), vec![features], vec![T::zero(); features], None));
            params.push(ParamTensor::new(format!("{id}.running_var"), vec![features], vec![T::one(); features], None));
        }
        Ok(Self { id, spec, params })
    }

    fn shape_err(&self, msg: String) -> Error {
        Error::Shape { layer: Some(self.id.clone()), msg }
    }

    fn expect_channels(&self, x: &Tensor<T>, c: usize) -> Result<()> {
        if x.shape().len() < 2 || x.shape()[1] != c {
            return Err(self.shape_err(format!("expected {c} channels, got input {:?}", x.shape())));
        }
        Ok(())
    }

    fn expect_4d(&self, x: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
        match *x.shape() {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(self.shape_err(format!("expected NCHW input, got {:?}", x.shape()))),
        }
    }

    fn conv_geom(&self, x: &Tensor<T>) -> Result<ConvGeom> {
        let (n, c, h, w) = self.expect_4d(x)?;
        match self.spec {
            LayerSpec::Conv2d { in_channels, out_channels, kernel, stride, padding } => {
                self.expect_channels(x, in_channels)?;
                if h + 2 * padding < kernel || w + 2 * padding < kernel {
                    return Err(self.shape_err(format!("input {h}x{w} smaller than kernel {kernel}")));
                }
                let oh = (h + 2 * padding - kernel) / stride + 1;
                let ow = (w + 2 * padding - kernel) / stride + 1;
                Ok(ConvGeom { n, cin: c, cout: out_channels, h, w, oh, ow, k: kernel, stride, pad: padding })
            }
            LayerSpec::Deconv2d { in_channels, out_channels, kernel, stride, padding } => {
                self.expect_channels(x, in_channels)?;
                let oh = ((h - 1) * stride + kernel).checked_sub(2 * padding);
                let ow = ((w - 1) * stride + kernel).checked_sub(2 * padding);
                match (oh, ow) {
                    (Some(oh), Some(ow)) if oh > 0 && ow > 0 => Ok(ConvGeom {
                        n, cin: c, cout: out_channels, h, w, oh, ow, k: kernel, stride, pad: padding,
                    }),
                    _ => Err(self.shape_err("padding larger than output".into())),
                }
            }
            _ => unreachable!(),
        }
    }

    /// Runs the layer; returns the output and any auxiliary tensor backward needs.
    fn forward<'r>(
        &mut self,
        x: &Tensor<T>,
        mode: Mode,
        rng: Option<&mut (dyn RngCore + 'r)>,
    ) -> Result<(Tensor<T>, Aux<T>)> {
        let shape = x.shape().to_vec();
        match self.spec {
            LayerSpec::BatchNorm { features } if mode == Mode::Train => {
                self.expect_channels(x, features)?;
                let (n, c, p) = ncp(&shape);
                let m = n * p;
                let eps = T::lit(BATCHNORM_EPS);
                let mom = T::lit(BATCHNORM_MOMENTUM);
                let xd = x.data();
                let mut xhat = vec![T::zero(); xd.len()];
                let mut y = vec![T::zero(); xd.len()];
                let mut inv_std = vec![T::zero(); c];
                for ci in 0..c {
                    let idx = |ni: usize, pi: usize| (ni * c + ci) * p + pi;
                    let mut mean = T::zero();
                    for ni in 0..n {
                        for pi in 0..p {
                            mean += xd[idx(ni, pi)];
                        }
                    }
                    mean /= T::lit(m as f64);
                    let mut var = T::zero();
                    for ni in 0..n {
                        for pi in 0..p {
                            let d = xd[idx(ni, pi)] - mean;
                            var += d * d;
                        }
                    }
                    let unbiased = if m > 1 { var / T::lit((m - 1) as f64) } else { T::zero() };
                    var /= T::lit(m as f64);
                    let inv = (var + eps).sqrt().recip();
                    inv_std[ci] = inv;
                    let (gamma, beta) = (self.params[0].value[ci], self.params[1].value[ci]);
                    for ni in 0..n {
                        for pi in 0..p {
                            let i = idx(ni, pi);
                            xhat[i] = (xd[i] - mean) * inv;
                            y[i] = gamma * xhat[i] + beta;
                        }
                    }
                    let rm = &mut self.params[2].value[ci];
                    *rm = (T::one() - mom) * *rm + mom * mean;
                    let rv = &mut self.params[3].value[ci];
                    *rv = (T::one() - mom) * *rv + mom * unbiased;
                }
                Ok((Tensor::from_parts(shape, y), Aux::BatchNorm { xhat, inv_std }))
            }
            LayerSpec::Dropout { rate } if mode == Mode::Train && rate > 0.0 => {
                let rng = rng.ok_or_else(|| {
                    Error::State(format!("dropout layer `{}` needs a random source in training", self.id))
                })?;
                let keep = T::lit(1.0 / (1.0 - rate));
                let mask: Vec<T> = (0..x.len())
                    .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
                    .collect();
                let y = x.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
                Ok((Tensor::from_parts(shape, y), Aux::Mask(mask)))
            }
            _ => Ok((self.infer(x)?, Aux::None)),
        }
    }

    /// Inference-mode forward; never mutates the layer.
    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = x.shape();
        if shape.len() < 2 {
            return Err(self.shape_err(format!("expected at least 2 axes, got {shape:?}")));
        }
        let xd = x.data();
        let out = match self.spec {
            LayerSpec::Dense { inputs, outputs } => {
                self.expect_channels(x, inputs)?;
                let (n, _, p) = ncp(shape);
                let y = kernels::dense_forward(xd, n, p, &self.params[0].value, &self.params[1].value, inputs, outputs);
                let mut s = shape.to_vec();
                s[1] = outputs;
                Tensor::from_parts(s, y)
            }
            LayerSpec::Conv2d { .. } => {
                let g = self.conv_geom(x)?;
                let y = kernels::conv_forward(xd, &self.params[0].value, &self.params[1].value, g);
                Tensor::from_parts(vec![g.n, g.cout, g.oh, g.ow], y)
            }
            LayerSpec::Deconv2d { .. } => {
                let g = self.conv_geom(x)?;
                let y = kernels::deconv_forward(xd, &self.params[0].value, &self.params[1].value, g);
                Tensor::from_parts(vec![g.n, g.cout, g.oh, g.ow], y)
            }
            LayerSpec::PatchEmbed { in_channels, patch, dim } => {
                let (n, _, h, w) = self.expect_4d(x)?;
                self.expect_channels(x, in_channels)?;
                if h % patch != 0 || w % patch != 0 {
                    return Err(self.shape_err(format!("{h}x{w} not divisible by patch {patch}")));
                }
                let cols = kernels::patches_to_cols(xd, n, in_channels, h, w, patch);
                let k = in_channels * patch * patch;
                let q = (h / patch) * (w / patch);
                let y = kernels::dense_forward(&cols, n, q, &self.params[0].value, &self.params[1].value, k, dim);
                Tensor::from_parts(vec![n, dim, h / patch, w / patch], y)
            }
            LayerSpec::BatchNorm { features } => {
                self.expect_channels(x, features)?;
                let (n, c, p) = ncp(shape);
                let eps = T::lit(BATCHNORM_EPS);
                let mut y = vec![T::zero(); xd.len()];
                for ci in 0..c {
                    let (gamma, beta) = (self.params[0].value[ci], self.params[1].value[ci]);
                    let (rm, rv) = (self.params[2].value[ci], self.params[3].value[ci]);
                    let scale = gamma / (rv + eps).sqrt();
                    for ni in 0..n {
                        for pi in 0..p {
                            let i = (ni * c + ci) * p + pi;
                            y[i] = (xd[i] - rm) * scale + beta;
                        }
                    }
                }
                Tensor::from_parts(shape.to_vec(), y)
            }
            LayerSpec::Dropout { .. } => x.clone(),
            LayerSpec::Tanh => x.map(|v| v.tanh()),
            LayerSpec::Relu => x.map(|v| v.max(T::zero())),
            LayerSpec::Softmax => {
                let (n, c, p) = ncp(shape);
                Tensor::from_parts(shape.to_vec(), kernels::softmax_forward(xd, n, c, p))
            }
            LayerSpec::UpsampleNearest { factor } => {
                let (n, c, h, w) = self.expect_4d(x)?;
                let y = kernels::upsample_forward(xd, n * c, h, w, factor);
                Tensor::from_parts(vec![n, c, h * factor, w * factor], y)
            }
            LayerSpec::GlobalAvgPool => {
                let (n, c, p) = ncp(shape);
                let inv = T::lit(1.0 / p as f64);
                let y = xd.chunks_exact(p).map(|plane| plane.iter().copied().sum::<T>() * inv).collect();
                Tensor::from_parts(vec![n, c], y)
            }
        };
        Ok(out)
    }

    fn backward(&mut self, x: &Tensor<T>, y: &Tensor<T>, aux: &Aux<T>, gy: &Tensor<T>) -> Result<Tensor<T>> {
        if gy.shape() != y.shape() {
            return Err(self.shape_err(format!("output gradient {:?} vs output {:?}", gy.shape(), y.shape())));
        }
        let shape = x.shape().to_vec();
        let xd = x.data();
        let g = gy.data();
        let gx = match (&self.spec, aux) {
            (&LayerSpec::Dense { inputs, outputs }, _) => {
                let (n, _, p) = ncp(&shape);
                let (w, b) = self.params.split_at_mut(1);
                kernels::dense_backward(xd, g, n, p, &w[0].value, &mut w[0].grad, &mut b[0].grad, inputs, outputs)
            }
            (LayerSpec::Conv2d { .. }, _) => {
                let geom = self.conv_geom(x)?;
                let (w, b) = self.params.split_at_mut(1);
                kernels::conv_backward(xd, g, &w[0].value, &mut w[0].grad, &mut b[0].grad, geom)
            }
            (LayerSpec::Deconv2d { .. }, _) => {
                let geom = self.conv_geom(x)?;
                let (w, b) = self.params.split_at_mut(1);
                kernels::deconv_backward(xd, g, &w[0].value, &mut w[0].grad, &mut b[0].grad, geom)
            }
            (&LayerSpec::PatchEmbed { in_channels, patch, dim }, _) => {
                let (n, _, h, w) = self.expect_4d(x)?;
                let cols = kernels::patches_to_cols(xd, n, in_channels, h, w, patch);
                let k = in_channels * patch * patch;
                let q = (h / patch) * (w / patch);
                let (wt, b) = self.params.split_at_mut(1);
                let gcols = kernels::dense_backward(&cols, g, n, q, &wt[0].value, &mut wt[0].grad, &mut b[0].grad, k, dim);
                kernels::cols_to_patches(&gcols, n, in_channels, h, w, patch)
            }
            (LayerSpec::BatchNorm { .. }, Aux::BatchNorm { xhat, inv_std }) => {
                let (n, c, p) = ncp(&shape);
                let m = T::lit((n * p) as f64);
                let mut gx = vec![T::zero(); xd.len()];
                for ci in 0..c {
                    let idx = |ni: usize, pi: usize| (ni * c + ci) * p + pi;
                    let mut sum_g = T::zero();
                    let mut sum_gx = T::zero();
                    for ni in 0..n {
                        for pi in 0..p {
                            let i = idx(ni, pi);
                            sum_g += g[i];
                            sum_gx += g[i] * xhat[i];
                        }
                    }
                    self.params[0].grad[ci] += sum_gx;
                    self.params[1].grad[ci] += sum_g;
                    let scale = self.params[0].value[ci] * inv_std[ci] / m;
                    for ni in 0..n {
                        for pi in 0..p {
                            let i = idx(ni, pi);
                            gx[i] = scale * (m * g[i] - sum_g - xhat[i] * sum_gx);
                        }
                    }
                }
                gx
            }
            (LayerSpec::BatchNorm { .. }, _) => {
                // inference statistics are constants
                let (n, c, p) = ncp(&shape);
                let eps = T::lit(BATCHNORM_EPS);
                let mut gx = vec![T::zero(); xd.len()];
                for ci in 0..c {
                    let (rm, rv) = (self.params[2].value[ci], self.params[3].value[ci]);
                    let inv = (rv + eps).sqrt().recip();
                    for ni in 0..n {
                        for pi in 0..p {
                            let i = (ni * c + ci) * p + pi;
                            let xh = (xd[i] - rm) * inv;
                            self.params[0].grad[ci] += g[i] * xh;
                            self.params[1].grad[ci] += g[i];
                            gx[i] = g[i] * self.params[0].value[ci] * inv;
                        }
                    }
                }
                gx
            }
            (LayerSpec::Dropout { .. }, Aux::Mask(mask)) => {
                g.iter().zip(mask).map(|(&a, &m)| a * m).collect()
            }
            (LayerSpec::Dropout { .. }, _) => g.to_vec(),
            (LayerSpec::Tanh, _) => {
                g.iter().zip(y.data()).map(|(&a, &t)| a * (T::one() - t * t)).collect()
            }
            (LayerSpec::Relu, _) => g
                .iter()
                .zip(xd)
                .map(|(&a, &v)| if v > T::zero() { a } else { T::zero() })
                .collect(),
            (LayerSpec::Softmax, _) => {
                let (n, c, p) = ncp(&shape);
                kernels::softmax_backward(y.data(), g, n, c, p)
            }
            (&LayerSpec::UpsampleNearest { factor }, _) => {
                let (n, c, h, w) = self.expect_4d(x)?;
                kernels::upsample_backward(g, n * c, h, w, factor)
            }
            (LayerSpec::GlobalAvgPool, _) => {
                let (_, _, p) = ncp(&shape);
                let inv = T::lit(1.0 / p as f64);
                g.iter().flat_map(|&v| std::iter::repeat_n(v * inv, p)).collect()
            }
        };
        Ok(Tensor::from_parts(shape, gx))
    }
}

#[derive(Clone, Debug)]
enum Aux<T> {
    None,
    Mask(Vec<T>),
    BatchNorm { xhat: Vec<T>, inv_std: Vec<T> },
}

#[derive(Clone, Debug)]
struct CacheEntry<T> {
    input: Tensor<T>,
    output: Tensor<T>,
    aux: Aux<T>,
}

/// Intermediates recorded by a training forward pass; consumed by
/// [`Network::backward`].
#[derive(Clone, Debug)]
pub struct Cache<T> {
    network: u64,
    version: u64,
    start: usize,
    entries: Vec<CacheEntry<T>>,
}

static NEXT_NETWORK_ID: AtomicU64 = AtomicU64::new(1);

/// An ordered stack of layers sharing one learning-rate group.
#[derive(Clone, Debug)]
pub struct Network<T> {
    uid: u64,
    version: u64,
    layers: Vec<Layer<T>>,
}

impl<T: Real> Network<T> {
    pub fn new<R: Rng + ?Sized>(specs: Vec<(String, LayerSpec)>, group: &str, rng: &mut R) -> Result<Self> {
        let mut layers: Vec<Layer<T>> = Vec::with_capacity(specs.len());
        for (id, spec) in specs {
            if layers.iter().any(|l| l.id == id) {
                return Err(Error::Config(format!("duplicate layer id `{id}`")));
            }
            layers.push(Layer::new(id, spec, group, rng)?);
        }
        Ok(Self { uid: NEXT_NETWORK_ID.fetch_add(1, Ordering::Relaxed), version: 0, layers })
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn specs(&self) -> Vec<&LayerSpec> {
        self.layers.iter().map(|l| &l.spec).collect()
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn cast<U: Real>(&self) -> Network<U> {
        Network {
            uid: NEXT_NETWORK_ID.fetch_add(1, Ordering::Relaxed),
            version: 0,
            layers: self
                .layers
                .iter()
                .map(|l| Layer { id: l.id.clone(), spec: l.spec.clone(), params: l.params.iter().map(|p| p.cast()).collect() })
                .collect(),
        }
    }

    /// Full forward pass. In training mode, dropout draws from `rng` and batch
    /// norm updates its running statistics.
    pub fn forward<'r>(&mut self, x: &Tensor<T>, mode: Mode, rng: Option<&mut (dyn RngCore + 'r)>) -> Result<(Tensor<T>, Cache<T>)> {
        self.forward_range(x, 0..self.layers.len(), mode, rng)
    }

    /// Forward through a contiguous sub-range of layers.
    pub fn forward_range<'r>(
        &mut self,
        x: &Tensor<T>,
        range: std::ops::Range<usize>,
        mode: Mode,
        mut rng: Option<&mut (dyn RngCore + 'r)>,
    ) -> Result<(Tensor<T>, Cache<T>)> {
        if range.end > self.layers.len() {
            return Err(Error::State(format!("layer range {range:?} exceeds {}", self.layers.len())));
        }
        let mut cur = x.clone();
        let mut entries = Vec::with_capacity(range.len());
        for layer in &mut self.layers[range.clone()] {
            let (out, aux) = layer
                .forward(&cur, mode, rng.as_deref_mut())
                .map_err(|e| e.in_layer(&layer.id))?;
            entries.push(CacheEntry { input: cur, output: out.clone(), aux });
            cur = out;
        }
        let cache = Cache { network: self.uid, version: self.version, start: range.start, entries };
        Ok((cur, cache))
    }

    /// Deterministic inference pass using running statistics.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.infer_range(x, 0..self.layers.len())
    }

    pub fn infer_range(&self, x: &Tensor<T>, range: std::ops::Range<usize>) -> Result<Tensor<T>> {
        let mut cur = x.clone();
        for layer in &self.layers[range] {
            cur = layer.infer(&cur).map_err(|e| e.in_layer(&layer.id))?;
        }
        Ok(cur)
    }

    /// Back-propagates `grad_out` through the layers recorded in `cache`,
    /// accumulating parameter gradients; returns the input gradient.
    pub fn backward(&mut self, cache: &Cache<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        if cache.network != self.uid {
            return Err(Error::State("activation cache belongs to a different network".into()));
        }
        if cache.version != self.version {
            return Err(Error::State("activation cache is stale (weights changed since forward)".into()));
        }
        let mut g = grad_out.clone();
        for (i, entry) in cache.entries.iter().enumerate().rev() {
            let layer = &mut self.layers[cache.start + i];
            g = layer
                .backward(&entry.input, &entry.output, &entry.aux, &g)
                .map_err(|e| e.in_layer(&layer.id))?;
        }
        Ok(g)
    }
}

impl<T: Real> Parameterized<T> for Network<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&ParamTensor<T>)) {
        self.layers.iter().flat_map(|l| &l.params).for_each(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut ParamTensor<T>)) {
        self.layers.iter_mut().flat_map(|l| &mut l.params).for_each(f);
    }

    fn bump_version(&mut self) {
        self.version += 1;
    }
}
