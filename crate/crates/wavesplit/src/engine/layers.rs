//! The seven layer kinds used by the networks, with hand-rolled forward
//! and backward passes.
//!
//! Convolutions follow cross-correlation semantics with output size
//! floor((L + 2p - k)/s) + 1. The heavy 2D path goes through im2col so the
//! inner loops are contiguous dot/axpy operations.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::tensor::Tensor;
use crate::scalar::Scalar;

pub const LAYERNORM_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("shape mismatch in {layer}: {msg}")]
    ShapeMismatch { layer: String, msg: String },
    #[error("adam_step: parameter `{0}` has no gradient")]
    MissingGradient(String),
    #[error("training diverged: non-finite loss at epoch {0}")]
    Diverged(usize),
}

fn shape_err<L: Into<String>, M: Into<String>>(layer: L, msg: M) -> EngineError {
    EngineError::ShapeMismatch {
        layer: layer.into(),
        msg: msg.into(),
    }
}

/// A named trainable tensor with its Adam state.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    pub adam_m: Tensor<T>,
    pub adam_v: Tensor<T>,
    pub step_count: u64,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let shape = value.shape().to_vec();
        Param {
            name: name.into(),
            value,
            grad: None,
            adam_m: Tensor::zeros(&shape),
            adam_v: Tensor::zeros(&shape),
            step_count: 0,
        }
    }
}

/// Hyperparameters of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Conv1d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    /// Transposed 1D convolution; output length (L-1)*s - 2p + k.
    TConv1d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Conv2d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Linear {
        in_f: usize,
        out_f: usize,
    },
    /// Normalizes each sample over all non-batch dims; per-channel affine.
    LayerNorm {
        features: usize,
    },
    Relu,
    /// Kernel 2, stride 2.
    MaxPool1d,
    /// (B, ...) -> (B, prod).
    Flatten,
}

impl LayerSpec {
    fn validate(&self) {
        match *self {
            LayerSpec::Conv1d {
                kernel, padding, stride, ..
            }
            | LayerSpec::TConv1d {
                kernel, padding, stride, ..
            }
            | LayerSpec::Conv2d {
                kernel, padding, stride, ..
            } => {
                assert!(kernel > 0 && stride > 0, "kernel and stride must be positive");
                assert!(padding < kernel, "padding must be < kernel");
            }
            LayerSpec::Linear { in_f, out_f } => assert!(in_f > 0 && out_f > 0),
            LayerSpec::LayerNorm { features } => assert!(features > 0),
            _ => {}
        }
    }
}

/// Per-layer state cached by the forward pass for backward.
#[derive(Debug)]
pub enum Cache<T> {
    Input(Tensor<T>),
    LayerNorm {
        x: Tensor<T>,
        mean: Vec<T>,
        invstd: Vec<T>,
    },
    Relu(Tensor<T>),
    MaxPool {
        in_shape: Vec<usize>,
        argmax: Vec<usize>,
    },
    Flatten(Vec<usize>),
    None,
}

/// A layer: spec plus owned parameters.
#[derive(Debug, Clone)]
pub struct Layer<T> {
    pub spec: LayerSpec,
    pub params: Vec<Param<T>>,
}

fn kaiming_uniform<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let data = (0..shape.iter().product::<usize>())
        .map(|_| T::real(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::from_vec(shape, data)
}

impl<T: Scalar> Layer<T> {
    /// Build a layer, initializing weights (Kaiming-uniform fan-in, zero
    /// bias; unit gain for layer norm). `prefix` names the parameters.
    pub fn new(spec: LayerSpec, prefix: &str, rng: &mut ChaCha8Rng) -> Self {
        spec.validate();
        let params = match spec {
            LayerSpec::Conv1d {
                in_ch, out_ch, kernel, ..
            } => vec![
                Param::new(
                    format!("{prefix}.weight"),
                    kaiming_uniform(&[out_ch, in_ch, kernel], in_ch * kernel, rng),
                ),
                Param::new(format!("{prefix}.bias"), Tensor::zeros(&[out_ch])),
            ],
            LayerSpec::TConv1d {
                in_ch, out_ch, kernel, ..
            } => vec![
                Param::new(
                    format!("{prefix}.weight"),
                    kaiming_uniform(&[in_ch, out_ch, kernel], in_ch * kernel, rng),
                ),
                Param::new(format!("{prefix}.bias"), Tensor::zeros(&[out_ch])),
            ],
            LayerSpec::Conv2d {
                in_ch, out_ch, kernel, ..
            } => vec![
                Param::new(
                    format!("{prefix}.weight"),
                    kaiming_uniform(&[out_ch, in_ch, kernel, kernel], in_ch * kernel * kernel, rng),
                ),
                Param::new(format!("{prefix}.bias"), Tensor::zeros(&[out_ch])),
            ],
            LayerSpec::Linear { in_f, out_f } => vec![
                Param::new(
                    format!("{prefix}.weight"),
                    kaiming_uniform(&[out_f, in_f], in_f, rng),
                ),
                Param::new(format!("{prefix}.bias"), Tensor::zeros(&[out_f])),
            ],
            LayerSpec::LayerNorm { features } => {
                let mut gain = Tensor::zeros(&[features]);
                gain.fill(T::one());
                vec![
                    Param::new(format!("{prefix}.gain"), gain),
                    Param::new(format!("{prefix}.bias"), Tensor::zeros(&[features])),
                ]
            }
            _ => vec![],
        };
        Layer { spec, params }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>, EngineError> {
        Ok(self.forward_train(x)?.0)
    }

    pub fn forward_train(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Cache<T>), EngineError> {
        match self.spec {
            LayerSpec::Conv1d {
                in_ch,
                out_ch,
                kernel,
                stride,
                padding,
            } => {
                let (b, c, l) = dims3("conv1d", x)?;
                if c != in_ch {
                    return Err(shape_err("conv1d", format!("expected {in_ch} channels, got {c}")));
                }
                let lo = conv_out(l, kernel, stride, padding)
                    .ok_or_else(|| shape_err("conv1d", "input shorter than kernel"))?;
                let w = self.params[0].value.data();
                let bias = self.params[1].value.data();
                let mut y = Tensor::zeros(&[b, out_ch, lo]);
                let xd = x.data();
                let yd = y.data_mut();
                for bi in 0..b {
                    for co in 0..out_ch {
                        let yrow = &mut yd[(bi * out_ch + co) * lo..][..lo];
                        yrow.iter_mut().for_each(|v| *v = bias[co]);
                        for ci in 0..in_ch {
                            let xrow = &xd[(bi * c + ci) * l..][..l];
                            let wrow = &w[(co * in_ch + ci) * kernel..][..kernel];
                            for (o, yv) in yrow.iter_mut().enumerate() {
                                let base = o * stride;
                                let mut acc = T::zero();
                                for (kk, &wv) in wrow.iter().enumerate() {
                                    let i = base + kk;
                                    if i >= padding && i - padding < l {
                                        acc = acc + xrow[i - padding] * wv;
                                    }
                                }
                                *yv = *yv + acc;
                            }
                        }
                    }
                }
                Ok((y, Cache::Input(x.clone())))
            }
            LayerSpec::TConv1d {
                in_ch,
                out_ch,
                kernel,
                stride,
                padding,
            } => {
                let (b, c, l) = dims3("tconv1d", x)?;
                if c != in_ch {
                    return Err(shape_err("tconv1d", format!("expected {in_ch} channels, got {c}")));
                }
                let lo = (l - 1) * stride + kernel - 2 * padding;
                let w = self.params[0].value.data();
                let bias = self.params[1].value.data();
                let mut y = Tensor::zeros(&[b, out_ch, lo]);
                let xd = x.data();
                let yd = y.data_mut();
                for bi in 0..b {
                    for co in 0..out_ch {
                        let yrow = &mut yd[(bi * out_ch + co) * lo..][..lo];
                        yrow.iter_mut().for_each(|v| *v = bias[co]);
                        for ci in 0..in_ch {
                            let xrow = &xd[(bi * c + ci) * l..][..l];
                            let wrow = &w[(ci * out_ch + co) * kernel..][..kernel];
                            for (i, &xv) in xrow.iter().enumerate() {
                                for (kk, &wv) in wrow.iter().enumerate() {
                                    let o = i * stride + kk;
                                    if o >= padding && o - padding < lo {
                                        yrow[o - padding] = yrow[o - padding] + xv * wv;
                                    }
                                }
                            }
                        }
                    }
                }
                Ok((y, Cache::Input(x.clone())))
            }
            LayerSpec::Conv2d {
                in_ch,
                out_ch,
                kernel,
                stride,
                padding,
            } => {
                let (b, c, h, wdt) = dims4("conv2d", x)?;
                if c != in_ch {
                    return Err(shape_err("conv2d", format!("expected {in_ch} channels, got {c}")));
                }
                let ho = conv_out(h, kernel, stride, padding)
                    .ok_or_else(|| shape_err("conv2d", "input smaller than kernel"))?;
                let wo = conv_out(wdt, kernel, stride, padding)
                    .ok_or_else(|| shape_err("conv2d", "input smaller than kernel"))?;
                let w = self.params[0].value.data();
                let bias = self.params[1].value.data();
                let npos = ho * wo;
                let ncol = in_ch * kernel * kernel;
                let mut y = Tensor::zeros(&[b, out_ch, ho, wo]);
                let mut col = vec![T::zero(); ncol * npos];
                let yd = y.data_mut();
                for bi in 0..b {
                    im2col(x.data(), bi, in_ch, h, wdt, kernel, stride, padding, ho, wo, &mut col);
                    for co in 0..out_ch {
                        let yrow = &mut yd[(bi * out_ch + co) * npos..][..npos];
                        yrow.iter_mut().for_each(|v| *v = bias[co]);
                        let wrow = &w[co * ncol..][..ncol];
                        for (r, &wv) in wrow.iter().enumerate() {
                            if wv != T::zero() {
                                let crow = &col[r * npos..][..npos];
                                for (yv, &cv) in yrow.iter_mut().zip(crow) {
                                    *yv = *yv + wv * cv;
                                }
                            }
                        }
                    }
                }
                Ok((y, Cache::Input(x.clone())))
            }
            LayerSpec::Linear { in_f, out_f } => {
                let (b, f) = dims2("linear", x)?;
                if f != in_f {
                    return Err(shape_err("linear", format!("expected {in_f} features, got {f}")));
                }
                let w = self.params[0].value.data();
                let bias = self.params[1].value.data();
                let mut y = Tensor::zeros(&[b, out_f]);
                let xd = x.data();
                let yd = y.data_mut();
                for bi in 0..b {
                    let xrow = &xd[bi * in_f..][..in_f];
                    let yrow = &mut yd[bi * out_f..][..out_f];
                    for (o, yv) in yrow.iter_mut().enumerate() {
                        let wrow = &w[o * in_f..][..in_f];
                        let mut acc = T::zero();
                        for (a, bfac) in xrow.iter().zip(wrow) {
                            acc = acc + *a * *bfac;
                        }
                        *yv = acc + bias[o];
                    }
                }
                Ok((y, Cache::Input(x.clone())))
            }
            LayerSpec::LayerNorm { features } => {
                let shape = x.shape();
                if shape.len() < 2 || shape[1] != features {
                    return Err(shape_err(
                        "layernorm",
                        format!("expected dim 1 == {features}, got {shape:?}"),
                    ));
                }
                let b = shape[0];
                let n = x.len() / b;
                let spatial = n / features;
                let eps = T::real(LAYERNORM_EPS);
                let gain = self.params[0].value.data();
                let bias = self.params[1].value.data();
                let mut y = Tensor::zeros(shape);
                let mut means = Vec::with_capacity(b);
                let mut invstds = Vec::with_capacity(b);
                let xd = x.data();
                let yd = y.data_mut();
                for bi in 0..b {
                    let xs = &xd[bi * n..][..n];
                    let mean = xs.iter().copied().sum::<T>() / T::real(n as f64);
                    let var = xs
                        .iter()
                        .map(|&v| (v - mean) * (v - mean))
                        .sum::<T>()
                        / T::real(n as f64);
                    let inv = T::one() / (var + eps).sqrt();
                    means.push(mean);
                    invstds.push(inv);
                    let ys = &mut yd[bi * n..][..n];
                    for c in 0..features {
                        for s in 0..spatial {
                            let i = c * spatial + s;
                            ys[i] = gain[c] * (xs[i] - mean) * inv + bias[c];
                        }
                    }
                }
                Ok((
                    y,
                    Cache::LayerNorm {
                        x: x.clone(),
                        mean: means,
                        invstd: invstds,
                    },
                ))
            }
            LayerSpec::Relu => {
                let mut y = x.clone();
                y.data_mut().iter_mut().for_each(|v| {
                    if *v < T::zero() {
                        *v = T::zero();
                    }
                });
                Ok((y, Cache::Relu(x.clone())))
            }
            LayerSpec::MaxPool1d => {
                let (b, c, l) = dims3("maxpool1d", x)?;
                if l % 2 != 0 {
                    return Err(shape_err("maxpool1d", format!("length {l} not even")));
                }
                let lo = l / 2;
                let mut y = Tensor::zeros(&[b, c, lo]);
                let mut argmax = Vec::with_capacity(b * c * lo);
                let xd = x.data();
                let yd = y.data_mut();
                for row in 0..b * c {
                    let xrow = &xd[row * l..][..l];
                    let yrow = &mut yd[row * lo..][..lo];
                    for (o, yv) in yrow.iter_mut().enumerate() {
                        // first-on-tie
                        let (a, bv) = (xrow[2 * o], xrow[2 * o + 1]);
                        if bv > a {
                            *yv = bv;
                            argmax.push(row * l + 2 * o + 1);
                        } else {
                            *yv = a;
                            argmax.push(row * l + 2 * o);
                        }
                    }
                }
                Ok((
                    y,
                    Cache::MaxPool {
                        in_shape: x.shape().to_vec(),
                        argmax,
                    },
                ))
            }
            LayerSpec::Flatten => {
                let shape = x.shape().to_vec();
                if shape.is_empty() {
                    return Err(shape_err("flatten", "needs a batch dim"));
                }
                let b = shape[0];
                let n = x.len() / b;
                Ok((x.clone().reshape(&[b, n]), Cache::Flatten(shape)))
            }
        }
    }

    /// Backward pass: returns the input gradient and per-parameter
    /// gradients aligned with `self.params`.
    pub fn backward(
        &self,
        cache: &Cache<T>,
        dy: &Tensor<T>,
    ) -> Result<(Tensor<T>, Vec<Tensor<T>>), EngineError> {
        match (self.spec, cache) {
            (
                LayerSpec::Conv1d {
                    in_ch,
                    out_ch,
                    kernel,
                    stride,
                    padding,
                },
                Cache::Input(x),
            ) => {
                let (b, _, l) = dims3("conv1d", x)?;
                let lo = dy.shape()[2];
                let w = self.params[0].value.data();
                let mut dx = Tensor::zeros(x.shape());
                let mut dw = Tensor::zeros(self.params[0].value.shape());
                let mut db = Tensor::zeros(&[out_ch]);
                let xd = x.data();
                let dyd = dy.data();
                let dxd = dx.data_mut();
                let dwd = dw.data_mut();
                let dbd = db.data_mut();
                for bi in 0..b {
                    for co in 0..out_ch {
                        let dyrow = &dyd[(bi * out_ch + co) * lo..][..lo];
                        dbd[co] = dbd[co] + dyrow.iter().copied().sum::<T>();
                        for ci in 0..in_ch {
                            let xrow = &xd[(bi * in_ch + ci) * l..][..l];
                            let dxrow = &mut dxd[(bi * in_ch + ci) * l..][..l];
                            let wrow = &w[(co * in_ch + ci) * kernel..][..kernel];
                            let dwrow = &mut dwd[(co * in_ch + ci) * kernel..][..kernel];
                            for (o, &g) in dyrow.iter().enumerate() {
                                if g == T::zero() {
                                    continue;
                                }
                                let base = o * stride;
                                for kk in 0..kernel {
                                    let i = base + kk;
                                    if i >= padding && i - padding < l {
                                        dwrow[kk] = dwrow[kk] + g * xrow[i - padding];
                                        dxrow[i - padding] = dxrow[i - padding] + g * wrow[kk];
                                    }
                                }
                            }
                        }
                    }
                }
                Ok((dx, vec![dw, db]))
            }
            (
                LayerSpec::TConv1d {
                    in_ch,
                    out_ch,
                    kernel,
                    stride,
                    padding,
                },
                Cache::Input(x),
            ) => {
                let (b, _, l) = dims3("tconv1d", x)?;
                let lo = dy.shape()[2];
                let w = self.params[0].value.data();
                let mut dx = Tensor::zeros(x.shape());
                let mut dw = Tensor::zeros(self.params[0].value.shape());
                let mut db = Tensor::zeros(&[out_ch]);
                let xd = x.data();
                let dyd = dy.data();
                let dxd = dx.data_mut();
                let dwd = dw.data_mut();
                let dbd = db.data_mut();
                for bi in 0..b {
                    for co in 0..out_ch {
                        let dyrow = &dyd[(bi * out_ch + co) * lo..][..lo];
                        dbd[co] = dbd[co] + dyrow.iter().copied().sum::<T>();
                        for ci in 0..in_ch {
                            let xrow = &xd[(bi * in_ch + ci) * l..][..l];
                            let dxrow = &mut dxd[(bi * in_ch + ci) * l..][..l];
                            let wrow = &w[(ci * out_ch + co) * kernel..][..kernel];
                            let dwrow = &mut dwd[(ci * out_ch + co) * kernel..][..kernel];
                            for i in 0..l {
                                for kk in 0..kernel {
                                    let o = i * stride + kk;
                                    if o >= padding && o - padding < lo {
                                        let g = dyrow[o - padding];
                                        dxrow[i] = dxrow[i] + g * wrow[kk];
                                        dwrow[kk] = dwrow[kk] + g * xrow[i];
                                    }
                                }
                            }
                        }
                    }
                }
                Ok((dx, vec![dw, db]))
            }
            (
                LayerSpec::Conv2d {
                    in_ch,
                    out_ch,
                    kernel,
                    stride,
                    padding,
                },
                Cache::Input(x),
            ) => {
                let (b, _, h, wdt) = dims4("conv2d", x)?;
                let ho = dy.shape()[2];
                let wo = dy.shape()[3];
                let npos = ho * wo;
                let ncol = in_ch * kernel * kernel;
                let w = self.params[0].value.data();
                let mut dx = Tensor::zeros(x.shape());
                let mut dw = Tensor::zeros(self.params[0].value.shape());
                let mut db = Tensor::zeros(&[out_ch]);
                let mut col = vec![T::zero(); ncol * npos];
                let mut dcol = vec![T::zero(); ncol * npos];
                let dyd = dy.data();
                let dwd = dw.data_mut();
                let dbd = db.data_mut();
                for bi in 0..b {
                    im2col(x.data(), bi, in_ch, h, wdt, kernel, stride, padding, ho, wo, &mut col);
                    dcol.iter_mut().for_each(|v| *v = T::zero());
                    for co in 0..out_ch {
                        let dyrow = &dyd[(bi * out_ch + co) * npos..][..npos];
                        dbd[co] = dbd[co] + dyrow.iter().copied().sum::<T>();
                        let wrow = &w[co * ncol..][..ncol];
                        let dwrow = &mut dwd[co * ncol..][..ncol];
                        for r in 0..ncol {
                            let crow = &col[r * npos..][..npos];
                            let dcrow = &mut dcol[r * npos..][..npos];
                            let wv = wrow[r];
                            let mut acc = T::zero();
                            for i in 0..npos {
                                let g = dyrow[i];
                                acc = acc + g * crow[i];
                                dcrow[i] = dcrow[i] + g * wv;
                            }
                            dwrow[r] = dwrow[r] + acc;
                        }
                    }
                    col2im(
                        dx.data_mut(),
                        bi,
                        in_ch,
                        h,
                        wdt,
                        kernel,
                        stride,
                        padding,
                        ho,
                        wo,
                        &dcol,
                    );
                }
                Ok((dx, vec![dw, db]))
            }
            (LayerSpec::Linear { in_f, out_f }, Cache::Input(x)) => {
                let (b, _) = dims2("linear", x)?;
                let w = self.params[0].value.data();
                let mut dx = Tensor::zeros(x.shape());
                let mut dw = Tensor::zeros(self.params[0].value.shape());
                let mut db = Tensor::zeros(&[out_f]);
                let xd = x.data();
                let dyd = dy.data();
                let dxd = dx.data_mut();
                let dwd = dw.data_mut();
                let dbd = db.data_mut();
                for bi in 0..b {
                    let xrow = &xd[bi * in_f..][..in_f];
                    let dxrow = &mut dxd[bi * in_f..][..in_f];
                    let dyrow = &dyd[bi * out_f..][..out_f];
                    for (o, &g) in dyrow.iter().enumerate() {
                        dbd[o] = dbd[o] + g;
                        if g == T::zero() {
                            continue;
                        }
                        let wrow = &w[o * in_f..][..in_f];
                        let dwrow = &mut dwd[o * in_f..][..in_f];
                        for i in 0..in_f {
                            dxrow[i] = dxrow[i] + g * wrow[i];
                            dwrow[i] = dwrow[i] + g * xrow[i];
                        }
                    }
                }
                Ok((dx, vec![dw, db]))
            }
            (LayerSpec::LayerNorm { features }, Cache::LayerNorm { x, mean, invstd }) => {
                let b = x.shape()[0];
                let n = x.len() / b;
                let spatial = n / features;
                let gain = self.params[0].value.data();
                let mut dx = Tensor::zeros(x.shape());
                let mut dg = Tensor::zeros(&[features]);
                let mut dbias = Tensor::zeros(&[features]);
                let xd = x.data();
                let dyd = dy.data();
                let dxd = dx.data_mut();
                let dgd = dg.data_mut();
                let dbd = dbias.data_mut();
                let nn = T::real(n as f64);
                for bi in 0..b {
                    let xs = &xd[bi * n..][..n];
                    let dys = &dyd[bi * n..][..n];
                    let dxs = &mut dxd[bi * n..][..n];
                    let (mu, inv) = (mean[bi], invstd[bi]);
                    // accumulate sums of h = g*dy and h*xhat
                    let mut sum_h = T::zero();
                    let mut sum_hx = T::zero();
                    for c in 0..features {
                        for s in 0..spatial {
                            let i = c * spatial + s;
                            let xhat = (xs[i] - mu) * inv;
                            let h = gain[c] * dys[i];
                            sum_h = sum_h + h;
                            sum_hx = sum_hx + h * xhat;
                            dgd[c] = dgd[c] + dys[i] * xhat;
                            dbd[c] = dbd[c] + dys[i];
                        }
                    }
                    let mh = sum_h / nn;
                    let mhx = sum_hx / nn;
                    for c in 0..features {
                        for s in 0..spatial {
                            let i = c * spatial + s;
                            let xhat = (xs[i] - mu) * inv;
                            dxs[i] = inv * (gain[c] * dys[i] - mh - xhat * mhx);
                        }
                    }
                }
                Ok((dx, vec![dg, dbias]))
            }
            (LayerSpec::Relu, Cache::Relu(x)) => {
                let mut dx = dy.clone();
                for (g, &xv) in dx.data_mut().iter_mut().zip(x.data()) {
                    if xv <= T::zero() {
                        *g = T::zero();
                    }
                }
                Ok((dx, vec![]))
            }
            (LayerSpec::MaxPool1d, Cache::MaxPool { in_shape, argmax }) => {
                let mut dx = Tensor::zeros(in_shape);
                let dxd = dx.data_mut();
                for (&idx, &g) in argmax.iter().zip(dy.data()) {
                    dxd[idx] = dxd[idx] + g;
                }
                Ok((dx, vec![]))
            }
            (LayerSpec::Flatten, Cache::Flatten(in_shape)) => {
                Ok((dy.clone().reshape(in_shape), vec![]))
            }
            _ => Err(shape_err("backward", "cache does not match layer kind")),
        }
    }
}

pub fn conv_out(l: usize, k: usize, s: usize, p: usize) -> Option<usize> {
    (l + 2 * p).checked_sub(k).map(|d| d / s + 1)
}

fn dims2<T: Scalar>(layer: &str, x: &Tensor<T>) -> Result<(usize, usize), EngineError> {
    match x.shape() {
        [a, b] => Ok((*a, *b)),
        s => Err(shape_err(layer, format!("expected 2D input, got {s:?}"))),
    }
}

fn dims3<T: Scalar>(layer: &str, x: &Tensor<T>) -> Result<(usize, usize, usize), EngineError> {
    match x.shape() {
        [a, b, c] => Ok((*a, *b, *c)),
        s => Err(shape_err(layer, format!("expected 3D input, got {s:?}"))),
    }
}

fn dims4<T: Scalar>(
    layer: &str,
    x: &Tensor<T>,
) -> Result<(usize, usize, usize, usize), EngineError> {
    match x.shape() {
        [a, b, c, d] => Ok((*a, *b, *c, *d)),
        s => Err(shape_err(layer, format!("expected 4D input, got {s:?}"))),
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    bi: usize,
    in_ch: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
    col: &mut [T],
) {
    let npos = ho * wo;
    for ci in 0..in_ch {
        let xplane = &x[(bi * in_ch + ci) * h * w..][..h * w];
        for ky in 0..kernel {
            for kx in 0..kernel {
                let r = (ci * kernel + ky) * kernel + kx;
                let crow = &mut col[r * npos..][..npos];
                for oy in 0..ho {
                    let iy = oy * stride + ky;
                    let dst = &mut crow[oy * wo..][..wo];
                    if iy < padding || iy - padding >= h {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let xrow = &xplane[(iy - padding) * w..][..w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = ox * stride + kx;
                        *d = if ix >= padding && ix - padding < w {
                            xrow[ix - padding]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    dx: &mut [T],
    bi: usize,
    in_ch: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
    dcol: &[T],
) {
    let npos = ho * wo;
    for ci in 0..in_ch {
        let dxplane = &mut dx[(bi * in_ch + ci) * h * w..][..h * w];
        for ky in 0..kernel {
            for kx in 0..kernel {
                let r = (ci * kernel + ky) * kernel + kx;
                let crow = &dcol[r * npos..][..npos];
                for oy in 0..ho {
                    let iy = oy * stride + ky;
                    if iy < padding || iy - padding >= h {
                        continue;
                    }
                    let src = &crow[oy * wo..][..wo];
                    let dxrow = &mut dxplane[(iy - padding) * w..][..w];
                    for (ox, &g) in src.iter().enumerate() {
                        let ix = ox * stride + kx;
                        if ix >= padding && ix - padding < w {
                            dxrow[ix - padding] = dxrow[ix - padding] + g;
                        }
                    }
                }
            }
        }
    }
}
