//! The three network architectures: SFS 1D U-net, SSL localizer, and the
//! two-source baseline (an SSL with a width-6 head).

use rand_chacha::ChaCha8Rng;

use crate::engine::{Cache, EngineError, Layer, LayerSpec, Param, Tensor};
use crate::scalar::Scalar;

/// Default encoder channel widths of the separator U-net.
pub const SFS_WIDTHS: [usize; 3] = [32, 64, 128];
/// Default conv widths of the localizer feature extractor.
pub const SSL_CONV_WIDTHS: [usize; 4] = [16, 32, 64, 128];
/// Default MLP hidden widths of the localizer.
pub const SSL_MLP_WIDTHS: [usize; 3] = [512, 256, 128];

/// Common forward/backward surface of the three networks.
pub trait Network<T: Scalar>: Send + Sync {
    type TrainCache;

    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>, EngineError>;
    fn forward_train(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Self::TrainCache), EngineError>;
    /// Returns the input gradient and per-parameter gradients aligned with
    /// [`Network::params`] order.
    fn backward(
        &self,
        cache: &Self::TrainCache,
        dy: &Tensor<T>,
    ) -> Result<(Tensor<T>, Vec<Tensor<T>>), EngineError>;
    fn params(&self) -> Vec<&Param<T>>;
    fn params_mut(&mut self) -> Vec<&mut Param<T>>;
}

/// Plain layer chain.
#[derive(Debug, Clone)]
pub struct Sequential<T> {
    pub layers: Vec<Layer<T>>,
}

impl<T: Scalar> Sequential<T> {
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>, EngineError> {
        let mut cur = x.clone();
        for l in &self.layers {
            cur = l.forward(&cur)?;
        }
        Ok(cur)
    }

    pub fn forward_train(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Vec<Cache<T>>), EngineError> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for l in &self.layers {
            let (y, c) = l.forward_train(&cur)?;
            caches.push(c);
            cur = y;
        }
        Ok((cur, caches))
    }

    /// Backward through the chain; parameter gradients come out in layer
    /// order (matching `params`).
    pub fn backward(
        &self,
        caches: &[Cache<T>],
        dy: &Tensor<T>,
    ) -> Result<(Tensor<T>, Vec<Tensor<T>>), EngineError> {
        let mut per_layer: Vec<Vec<Tensor<T>>> = Vec::with_capacity(self.layers.len());
        let mut cur = dy.clone();
        for (l, c) in self.layers.iter().zip(caches).rev() {
            let (dx, grads) = l.backward(c, &cur)?;
            per_layer.push(grads);
            cur = dx;
        }
        per_layer.reverse();
        Ok((cur, per_layer.into_iter().flatten().collect()))
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        self.layers.iter().flat_map(|l| l.params.iter()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.params.iter_mut())
            .collect()
    }
}

fn conv_block<T: Scalar>(
    layers: &mut Vec<Layer<T>>,
    prefix: &str,
    spec: LayerSpec,
    norm_features: usize,
    rng: &mut ChaCha8Rng,
) {
    layers.push(Layer::new(spec, prefix, rng));
    layers.push(Layer::new(
        LayerSpec::LayerNorm { features: norm_features },
        &format!("{prefix}.norm"),
        rng,
    ));
    layers.push(Layer::new(LayerSpec::Relu, "", rng));
}

/// Single-source localizer: conv2d feature extractor + MLP regressing a
/// 3D position (6 for the baseline head).
#[derive(Debug, Clone)]
pub struct SslNet<T> {
    pub seq: Sequential<T>,
    pub mic_count: usize,
    pub out_dim: usize,
    pub conv_widths: Vec<usize>,
    pub mlp_widths: Vec<usize>,
}

impl<T: Scalar> SslNet<T> {
    pub fn build(
        mic_count: usize,
        out_dim: usize,
        conv_widths: &[usize],
        mlp_widths: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(!conv_widths.is_empty() && !mlp_widths.is_empty());
        let mut layers = Vec::new();
        let mut ch = 2;
        let mut sp = mic_count;
        for (i, &w) in conv_widths.iter().enumerate() {
            conv_block(
                &mut layers,
                &format!("conv{}", i + 1),
                LayerSpec::Conv2d { in_ch: ch, out_ch: w, kernel: 5, stride: 2, padding: 1 },
                w,
                rng,
            );
            ch = w;
            sp = crate::engine::layers::conv_out(sp, 5, 2, 1)
                .expect("mic count too small for the conv stack");
            assert!(sp > 0, "mic count too small for the conv stack");
        }
        layers.push(Layer::new(LayerSpec::Flatten, "", rng));
        let mut f = ch * sp * sp;
        for (i, &w) in mlp_widths.iter().enumerate() {
            conv_block(
                &mut layers,
                &format!("fc{}", i + 1),
                LayerSpec::Linear { in_f: f, out_f: w },
                w,
                rng,
            );
            f = w;
        }
        // final layer: linear only, no norm or activation
        layers.push(Layer::new(
            LayerSpec::Linear { in_f: f, out_f: out_dim },
            "head",
            rng,
        ));
        SslNet {
            seq: Sequential { layers },
            mic_count,
            out_dim,
            conv_widths: conv_widths.to_vec(),
            mlp_widths: mlp_widths.to_vec(),
        }
    }
}

impl<T: Scalar> Network<T> for SslNet<T> {
    type TrainCache = Vec<Cache<T>>;

    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>, EngineError> {
        self.seq.forward(x)
    }

    fn forward_train(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Self::TrainCache), EngineError> {
        self.seq.forward_train(x)
    }

    fn backward(
        &self,
        cache: &Self::TrainCache,
        dy: &Tensor<T>,
    ) -> Result<(Tensor<T>, Vec<Tensor<T>>), EngineError> {
        self.seq.backward(cache, dy)
    }

    fn params(&self) -> Vec<&Param<T>> {
        self.seq.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.seq.params_mut()
    }
}

/// Build the localizer for M microphones (position head).
pub fn build_ssl<T: Scalar>(mic_count: usize, rng: &mut ChaCha8Rng) -> SslNet<T> {
    SslNet::build(mic_count, 3, &SSL_CONV_WIDTHS, &SSL_MLP_WIDTHS, rng)
}

/// Build the two-source baseline (two stacked positions).
pub fn build_baseline<T: Scalar>(mic_count: usize, rng: &mut ChaCha8Rng) -> SslNet<T> {
    SslNet::build(mic_count, 6, &SSL_CONV_WIDTHS, &SSL_MLP_WIDTHS, rng)
}

/// Sound field separator: 1D U-net with two pooling levels and
/// channel-concatenation skips.
#[derive(Debug, Clone)]
pub struct SfsNet<T> {
    enc1: Sequential<T>,
    pool1: Layer<T>,
    enc2: Sequential<T>,
    pool2: Layer<T>,
    bottom: Sequential<T>,
    up1: Sequential<T>,
    dec1: Sequential<T>,
    up2: Sequential<T>,
    dec2: Sequential<T>,
    head: Layer<T>,
    pub mic_count: usize,
    pub source_count: usize,
    pub widths: Vec<usize>,
}

pub struct SfsCache<T> {
    enc1: Vec<Cache<T>>,
    pool1: Cache<T>,
    enc2: Vec<Cache<T>>,
    pool2: Cache<T>,
    bottom: Vec<Cache<T>>,
    up1: Vec<Cache<T>>,
    dec1: Vec<Cache<T>>,
    up2: Vec<Cache<T>>,
    dec2: Vec<Cache<T>>,
    head: Cache<T>,
    skip1_ch: usize,
    skip2_ch: usize,
}

/// Concatenate along the channel dim of (B, C, L) tensors.
fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (ba, ca, l) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let cb = b.shape()[1];
    assert_eq!(b.shape()[0], ba);
    assert_eq!(b.shape()[2], l);
    let mut out = Tensor::zeros(&[ba, ca + cb, l]);
    let od = out.data_mut();
    for bi in 0..ba {
        let dst = &mut od[bi * (ca + cb) * l..][..(ca + cb) * l];
        dst[..ca * l].copy_from_slice(&a.data()[bi * ca * l..][..ca * l]);
        dst[ca * l..].copy_from_slice(&b.data()[bi * cb * l..][..cb * l]);
    }
    out
}

/// Split a channel-concatenated gradient back into the two branches.
fn split_channels<T: Scalar>(d: &Tensor<T>, ca: usize) -> (Tensor<T>, Tensor<T>) {
    let (b, c, l) = (d.shape()[0], d.shape()[1], d.shape()[2]);
    let cb = c - ca;
    let mut da = Tensor::zeros(&[b, ca, l]);
    let mut db = Tensor::zeros(&[b, cb, l]);
    for bi in 0..b {
        let src = &d.data()[bi * c * l..][..c * l];
        da.data_mut()[bi * ca * l..][..ca * l].copy_from_slice(&src[..ca * l]);
        db.data_mut()[bi * cb * l..][..cb * l].copy_from_slice(&src[ca * l..]);
    }
    (da, db)
}

fn conv5<T: Scalar>(
    seq: &mut Vec<Layer<T>>,
    prefix: &str,
    in_ch: usize,
    out_ch: usize,
    rng: &mut ChaCha8Rng,
) {
    conv_block(
        seq,
        prefix,
        LayerSpec::Conv1d { in_ch, out_ch, kernel: 5, stride: 1, padding: 2 },
        out_ch,
        rng,
    );
}

impl<T: Scalar> SfsNet<T> {
    pub fn build(mic_count: usize, source_count: usize, widths: &[usize], rng: &mut ChaCha8Rng) -> Self {
        assert_eq!(widths.len(), 3);
        assert!(mic_count % 4 == 0, "mic count must be divisible by 4");
        assert!(source_count >= 1);
        let (w0, w1, w2) = (widths[0], widths[1], widths[2]);

        let mut enc1 = Vec::new();
        conv5(&mut enc1, "enc1.conv1", 2, w0, rng);
        conv5(&mut enc1, "enc1.conv2", w0, w0, rng);
        let pool1 = Layer::new(LayerSpec::MaxPool1d, "", rng);

        let mut enc2 = Vec::new();
        conv5(&mut enc2, "enc2.conv1", w0, w1, rng);
        conv5(&mut enc2, "enc2.conv2", w1, w1, rng);
        let pool2 = Layer::new(LayerSpec::MaxPool1d, "", rng);

        let mut bottom = Vec::new();
        conv5(&mut bottom, "bottom.conv1", w1, w2, rng);
        conv5(&mut bottom, "bottom.conv2", w2, w2, rng);

        // transposed conv doubles the length exactly (k=4, s=2, p=1)
        let mut up1 = Vec::new();
        conv_block(
            &mut up1,
            "up1.tconv",
            LayerSpec::TConv1d { in_ch: w2, out_ch: w1, kernel: 4, stride: 2, padding: 1 },
            w1,
            rng,
        );
        let mut dec1 = Vec::new();
        conv5(&mut dec1, "dec1.conv1", 2 * w1, w1, rng);
        conv5(&mut dec1, "dec1.conv2", w1, w1, rng);

        let mut up2 = Vec::new();
        conv_block(
            &mut up2,
            "up2.tconv",
            LayerSpec::TConv1d { in_ch: w1, out_ch: w0, kernel: 4, stride: 2, padding: 1 },
            w0,
            rng,
        );
        let mut dec2 = Vec::new();
        conv5(&mut dec2, "dec2.conv1", 2 * w0, w0, rng);
        conv5(&mut dec2, "dec2.conv2", w0, w0, rng);

        // final layer: convolution only
        let head = Layer::new(
            LayerSpec::Conv1d { in_ch: w0, out_ch: 2 * source_count, kernel: 5, stride: 1, padding: 2 },
            "head",
            rng,
        );

        SfsNet {
            enc1: Sequential { layers: enc1 },
            pool1,
            enc2: Sequential { layers: enc2 },
            pool2,
            bottom: Sequential { layers: bottom },
            up1: Sequential { layers: up1 },
            dec1: Sequential { layers: dec1 },
            up2: Sequential { layers: up2 },
            dec2: Sequential { layers: dec2 },
            head,
            mic_count,
            source_count,
            widths: widths.to_vec(),
        }
    }
}

impl<T: Scalar> Network<T> for SfsNet<T> {
    type TrainCache = SfsCache<T>;

    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>, EngineError> {
        let s1 = self.enc1.forward(x)?;
        let p1 = self.pool1.forward(&s1)?;
        let s2 = self.enc2.forward(&p1)?;
        let p2 = self.pool2.forward(&s2)?;
        let bt = self.bottom.forward(&p2)?;
        let u1 = self.up1.forward(&bt)?;
        let d1 = self.dec1.forward(&concat_channels(&u1, &s2))?;
        let u2 = self.up2.forward(&d1)?;
        let d2 = self.dec2.forward(&concat_channels(&u2, &s1))?;
        self.head.forward(&d2)
    }

    fn forward_train(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Self::TrainCache), EngineError> {
        let (s1, c_enc1) = self.enc1.forward_train(x)?;
        let (p1, c_pool1) = self.pool1.forward_train(&s1)?;
        let (s2, c_enc2) = self.enc2.forward_train(&p1)?;
        let (p2, c_pool2) = self.pool2.forward_train(&s2)?;
        let (bt, c_bottom) = self.bottom.forward_train(&p2)?;
        let (u1, c_up1) = self.up1.forward_train(&bt)?;
        let (d1, c_dec1) = self.dec1.forward_train(&concat_channels(&u1, &s2))?;
        let (u2, c_up2) = self.up2.forward_train(&d1)?;
        let (d2, c_dec2) = self.dec2.forward_train(&concat_channels(&u2, &s1))?;
        let (y, c_head) = self.head.forward_train(&d2)?;
        Ok((
            y,
            SfsCache {
                enc1: c_enc1,
                pool1: c_pool1,
                enc2: c_enc2,
                pool2: c_pool2,
                bottom: c_bottom,
                up1: c_up1,
                dec1: c_dec1,
                up2: c_up2,
                dec2: c_dec2,
                head: c_head,
                skip1_ch: u2.shape()[1],
                skip2_ch: u1.shape()[1],
            },
        ))
    }

    fn backward(
        &self,
        cache: &SfsCache<T>,
        dy: &Tensor<T>,
    ) -> Result<(Tensor<T>, Vec<Tensor<T>>), EngineError> {
        let (dd2, g_head) = self.head.backward(&cache.head, dy)?;
        let (dcat2, g_dec2) = self.dec2.backward(&cache.dec2, &dd2)?;
        let (du2, ds1_skip) = split_channels(&dcat2, cache.skip1_ch);
        let (dd1, g_up2) = self.up2.backward(&cache.up2, &du2)?;
        let (dcat1, g_dec1) = self.dec1.backward(&cache.dec1, &dd1)?;
        let (du1, ds2_skip) = split_channels(&dcat1, cache.skip2_ch);
        let (dbt, g_up1) = self.up1.backward(&cache.up1, &du1)?;
        let (dp2, g_bottom) = self.bottom.backward(&cache.bottom, &dbt)?;
        let (mut ds2, _) = self.pool2.backward(&cache.pool2, &dp2)?;
        ds2.add_assign(&ds2_skip);
        let (dp1, g_enc2) = self.enc2.backward(&cache.enc2, &ds2)?;
        let (mut ds1, _) = self.pool1.backward(&cache.pool1, &dp1)?;
        ds1.add_assign(&ds1_skip);
        let (dx, g_enc1) = self.enc1.backward(&cache.enc1, &ds1)?;

        // grads in params() traversal order
        let mut grads = Vec::new();
        grads.extend(g_enc1);
        grads.extend(g_enc2);
        grads.extend(g_bottom);
        grads.extend(g_up1);
        grads.extend(g_dec1);
        grads.extend(g_up2);
        grads.extend(g_dec2);
        grads.extend(g_head.into_iter());
        Ok((dx, grads))
    }

    fn params(&self) -> Vec<&Param<T>> {
        let mut p = Vec::new();
        p.extend(self.enc1.params());
        p.extend(self.enc2.params());
        p.extend(self.bottom.params());
        p.extend(self.up1.params());
        p.extend(self.dec1.params());
        p.extend(self.up2.params());
        p.extend(self.dec2.params());
        p.extend(self.head.params.iter());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut p = Vec::new();
        p.extend(self.enc1.params_mut());
        p.extend(self.enc2.params_mut());
        p.extend(self.bottom.params_mut());
        p.extend(self.up1.params_mut());
        p.extend(self.dec1.params_mut());
        p.extend(self.up2.params_mut());
        p.extend(self.dec2.params_mut());
        p.extend(self.head.params.iter_mut());
        p
    }
}

/// Build the separator for M microphones and S sources.
pub fn build_sfs<T: Scalar>(mic_count: usize, source_count: usize, rng: &mut ChaCha8Rng) -> SfsNet<T> {
    SfsNet::build(mic_count, source_count, &SFS_WIDTHS, rng)
}
