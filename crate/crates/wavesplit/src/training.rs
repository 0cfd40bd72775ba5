//! Datasets and training loops.
//!
//! All randomness is derived from one master seed through named streams
//! (see [`crate::seed`]): dataset draws, per-epoch shuffles, per-batch
//! phases/amplitudes/SNRs/noise, and the fixed validation draws each use
//! their own stream, so training is bit-reproducible and the validation
//! loss is comparable across epochs.
//!
//! Split discipline: separator training mixtures pair positions drawn
//! from the localizer's *training* split only, and validation mixtures
//! from its *validation* split only, so the joint pipeline is never
//! evaluated on positions any stage has trained on.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::acoustics::{
    add_noise, synthesize, MicArray, PointSource, PressureVector, Wavenumber,
    SOURCE_REGION_RADIUS,
};
use crate::engine::{adam_step, AdamConfig, EngineError, Tensor};
use crate::models::net::{build_baseline, build_sfs, build_ssl, SfsNet, SslNet};
use crate::models::pack::{cov_pack_backward, cov_pack_forward, pack_sfs_input, pack_ssl_input};
use crate::models::{loss_base_batch, loss_sfs_packed, loss_ssl_batch, Network};
use crate::scalar::Point3;
use crate::seed::stream_rng;

/// Fraction of dataset items held out for validation.
pub const VALIDATION_FRACTION: f64 = 0.1;

/// Source positions for localizer training. The first `train_count`
/// entries are the training split; the rest validate.
#[derive(Debug, Clone)]
pub struct SslDataset {
    pub positions: Vec<Point3<f64>>,
    pub train_count: usize,
    pub frequency_hz: f64,
    pub seed: u64,
}

impl SslDataset {
    pub fn generate(count: usize, frequency_hz: f64, seed: u64) -> Self {
        assert!(count >= 2);
        let mut rng = stream_rng(seed, "ssl-pos", 0);
        let positions = (0..count)
            .map(|_| sample_position(&mut rng))
            .collect();
        SslDataset {
            positions,
            train_count: train_split(count),
            frequency_hz,
            seed,
        }
    }

    pub fn train(&self) -> &[Point3<f64>] {
        &self.positions[..self.train_count]
    }

    pub fn val(&self) -> &[Point3<f64>] {
        &self.positions[self.train_count..]
    }
}

/// Position pairs for separator / baseline training, built from an
/// [`SslDataset`] so the split discipline holds by construction.
#[derive(Debug, Clone)]
pub struct SfsDataset {
    pub pairs: Vec<(Point3<f64>, Point3<f64>)>,
    pub train_count: usize,
    pub frequency_hz: f64,
    pub seed: u64,
}

impl SfsDataset {
    pub fn generate_from(ssl: &SslDataset, count: usize, seed: u64) -> Self {
        assert!(count >= 2);
        assert!(ssl.train().len() >= 2 && ssl.val().len() >= 2);
        let train_count = train_split(count);
        let mut rng = stream_rng(seed, "sfs-pairs", 0);
        let mut pairs = Vec::with_capacity(count);
        for i in 0..count {
            let pool = if i < train_count { ssl.train() } else { ssl.val() };
            let a = rng.gen_range(0..pool.len());
            let b = loop {
                let b = rng.gen_range(0..pool.len());
                if b != a {
                    break b;
                }
            };
            pairs.push((pool[a], pool[b]));
        }
        SfsDataset {
            pairs,
            train_count,
            frequency_hz: ssl.frequency_hz,
            seed,
        }
    }

    pub fn train(&self) -> &[(Point3<f64>, Point3<f64>)] {
        &self.pairs[..self.train_count]
    }

    pub fn val(&self) -> &[(Point3<f64>, Point3<f64>)] {
        &self.pairs[self.train_count..]
    }
}

fn train_split(count: usize) -> usize {
    let val = ((count as f64) * VALIDATION_FRACTION).round() as usize;
    count - val.clamp(1, count - 1)
}

fn sample_position(rng: &mut ChaCha8Rng) -> Point3<f64> {
    crate::acoustics::sample_source_position(rng, SOURCE_REGION_RADIUS)
}

#[derive(Debug, Clone, Copy)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Per-mixture SNR draw bounds in dB; non-finite bounds mean noiseless.
    pub snr_range_db: (f64, f64),
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 100,
            learning_rate: 1e-3,
            snr_range_db: (20.0, 60.0),
            seed: 0,
        }
    }
}

/// Per-epoch mean train and validation loss.
pub type Curve = Vec<(usize, f64, f64)>;

/// Final and best-validation states of a training run.
#[derive(Debug, Clone)]
pub struct Trained<N> {
    pub best: N,
    pub final_net: N,
    pub best_epoch: usize,
    pub curves: Curve,
}

fn draw_snr(range: (f64, f64), rng: &mut ChaCha8Rng) -> f64 {
    if !range.0.is_finite() || !range.1.is_finite() {
        return f64::INFINITY;
    }
    if range.0 == range.1 {
        range.0
    } else {
        rng.gen_range(range.0..range.1)
    }
}

/// One random-phase unit source at `pos`, measured at the array with noise:
/// the localizer's training input.
fn ssl_item(
    pos: &Point3<f64>,
    mics: &MicArray<f64>,
    k: &Wavenumber<f64>,
    snr_range: (f64, f64),
    rng: &mut ChaCha8Rng,
) -> Tensor<f64> {
    let phi = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
    let amp = num_complex::Complex::new(phi.cos(), phi.sin());
    let src = PointSource {
        position: *pos,
        amplitude: amp,
    };
    let p = synthesize(&[src], mics, k).expect("mic/source geometry is valid");
    let snr = draw_snr(snr_range, rng);
    let noisy = add_noise(&p, snr, rng).expect("non-zero signal");
    pack_ssl_input(&noisy).expect("non-zero after noise")
}

/// Batched localizer inputs: (B, 2, M, M) covariance stacks plus targets.
pub fn make_ssl_batch(
    positions: &[Point3<f64>],
    mics: &MicArray<f64>,
    k: &Wavenumber<f64>,
    snr_range: (f64, f64),
    rng: &mut ChaCha8Rng,
) -> (Tensor<f64>, Vec<Point3<f64>>) {
    let m = mics.len();
    let b = positions.len();
    let mut x = Tensor::zeros(&[b, 2, m, m]);
    for (i, pos) in positions.iter().enumerate() {
        let item = ssl_item(pos, mics, k, snr_range, rng);
        x.data_mut()[i * 2 * m * m..(i + 1) * 2 * m * m].copy_from_slice(item.data());
    }
    (x, positions.to_vec())
}

/// One two-source mixture: noisy packed input row pair, the per-source
/// clean pressures normalized by the mixture scale, and the scale itself.
fn sfs_item(
    pair: &(Point3<f64>, Point3<f64>),
    mics: &MicArray<f64>,
    k: &Wavenumber<f64>,
    snr_range: (f64, f64),
    rng: &mut ChaCha8Rng,
) -> (Tensor<f64>, [PressureVector<f64>; 2], f64) {
    let a1 = num_complex::Complex::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
    let a2 = num_complex::Complex::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
    let s1 = PointSource {
        position: pair.0,
        amplitude: a1,
    };
    let s2 = PointSource {
        position: pair.1,
        amplitude: a2,
    };
    let p1 = synthesize(&[s1], mics, k).expect("valid geometry");
    let p2 = synthesize(&[s2], mics, k).expect("valid geometry");
    let mixture: PressureVector<f64> = p1.iter().zip(&p2).map(|(a, b)| a + b).collect();
    let snr = draw_snr(snr_range, rng);
    let noisy = add_noise(&mixture, snr, rng).expect("non-zero signal");
    let (x, scale) = pack_sfs_input(&noisy).expect("non-zero after noise");
    let t1: PressureVector<f64> = p1.iter().map(|c| c / scale).collect();
    let t2: PressureVector<f64> = p2.iter().map(|c| c / scale).collect();
    (x, [t1, t2], scale)
}

/// Batched separator inputs: (B, 2, M) mixtures plus normalized per-source
/// targets aligned with [`loss_sfs_packed`].
pub fn make_sfs_batch(
    pairs: &[(Point3<f64>, Point3<f64>)],
    mics: &MicArray<f64>,
    k: &Wavenumber<f64>,
    snr_range: (f64, f64),
    rng: &mut ChaCha8Rng,
) -> (Tensor<f64>, Vec<[PressureVector<f64>; 2]>) {
    let m = mics.len();
    let b = pairs.len();
    let mut x = Tensor::zeros(&[b, 2, m]);
    let mut targets = Vec::with_capacity(b);
    for (i, pair) in pairs.iter().enumerate() {
        let (xi, t, _) = sfs_item(pair, mics, k, snr_range, rng);
        x.data_mut()[i * 2 * m..(i + 1) * 2 * m].copy_from_slice(xi.data());
        targets.push(t);
    }
    (x, targets)
}

/// Batched baseline inputs: covariance stacks of two-source mixtures plus
/// the position pairs.
pub fn make_baseline_batch(
    pairs: &[(Point3<f64>, Point3<f64>)],
    mics: &MicArray<f64>,
    k: &Wavenumber<f64>,
    snr_range: (f64, f64),
    rng: &mut ChaCha8Rng,
) -> (Tensor<f64>, Vec<(Point3<f64>, Point3<f64>)>) {
    let m = mics.len();
    let b = pairs.len();
    let mut x = Tensor::zeros(&[b, 2, m, m]);
    for (i, pair) in pairs.iter().enumerate() {
        let a1 = num_complex::Complex::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let a2 = num_complex::Complex::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let srcs = [
            PointSource {
                position: pair.0,
                amplitude: a1,
            },
            PointSource {
                position: pair.1,
                amplitude: a2,
            },
        ];
        let p = synthesize(&srcs, mics, k).expect("valid geometry");
        let snr = draw_snr(snr_range, rng);
        let noisy = add_noise(&p, snr, rng).expect("non-zero signal");
        let item = pack_ssl_input(&noisy).expect("non-zero after noise");
        x.data_mut()[i * 2 * m * m..(i + 1) * 2 * m * m].copy_from_slice(item.data());
    }
    (x, pairs.to_vec())
}

fn batch_rng(seed: u64, epoch: usize, batch: usize) -> ChaCha8Rng {
    stream_rng(seed, "batch", (epoch as u64) * 1_048_576 + batch as u64)
}

fn val_rng(seed: u64, batch: usize) -> ChaCha8Rng {
    stream_rng(seed, "val", batch as u64)
}

fn check_finite(loss: f64, epoch: usize) -> Result<(), EngineError> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(EngineError::Diverged(epoch))
    }
}

fn apply_grads<N: Network<f64>>(
    net: &mut N,
    grads: Vec<Tensor<f64>>,
    cfg: &AdamConfig,
) -> Result<(), EngineError> {
    let mut params = net.params_mut();
    assert_eq!(params.len(), grads.len());
    for (p, g) in params.iter_mut().zip(grads) {
        p.grad = Some(g);
    }
    adam_step(&mut params, cfg)
}

fn shuffled_train_indices(count: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(&mut stream_rng(seed, "shuffle", epoch as u64));
    order
}

macro_rules! epoch_loop {
    ($ds:ident, $cfg:ident, $net:ident, $train_step:expr, $val_loss:expr) => {{
        let mut curves = Vec::with_capacity($cfg.epochs);
        let mut best = $net.clone();
        let mut best_epoch = 0;
        let mut best_val = f64::INFINITY;
        for epoch in 0..$cfg.epochs {
            let order = shuffled_train_indices($ds.train().len(), $cfg.seed, epoch);
            let mut train_sum = 0.0;
            let mut train_n = 0usize;
            for (bi, chunk) in order.chunks($cfg.batch_size.max(1)).enumerate() {
                let loss = $train_step(&mut $net, chunk, epoch, bi)?;
                check_finite(loss, epoch)?;
                train_sum += loss * chunk.len() as f64;
                train_n += chunk.len();
            }
            let val = $val_loss(&$net)?;
            check_finite(val, epoch)?;
            let train = if train_n > 0 { train_sum / train_n as f64 } else { 0.0 };
            curves.push((epoch, train, val));
            if val < best_val {
                best_val = val;
                best = $net.clone();
                best_epoch = epoch;
            }
        }
        Trained {
            best,
            final_net: $net,
            best_epoch,
            curves,
        }
    }};
}

/// Train the localizer from scratch on the dataset's positions.
pub fn train_ssl(
    ds: &SslDataset,
    mics: &MicArray<f64>,
    cfg: &TrainConfig,
    init: Option<SslNet<f64>>,
) -> Result<Trained<SslNet<f64>>, EngineError> {
    let k = Wavenumber::from_frequency(ds.frequency_hz);
    let mut net = init.unwrap_or_else(|| {
        build_ssl::<f64>(mics.len(), &mut stream_rng(cfg.seed, "init-ssl", 0))
    });
    let adam = AdamConfig::with_lr(cfg.learning_rate);
    let train_pos = ds.train();
    let val_pos = ds.val();

    let step = |net: &mut SslNet<f64>, chunk: &[usize], epoch: usize, bi: usize| {
        let mut rng = batch_rng(cfg.seed, epoch, bi);
        let pos: Vec<Point3<f64>> = chunk.iter().map(|&i| train_pos[i]).collect();
        let (x, targets) = make_ssl_batch(&pos, mics, &k, cfg.snr_range_db, &mut rng);
        let (y, cache) = net.forward_train(&x)?;
        let (loss, dy) = loss_ssl_batch(&y, &targets);
        let (_, grads) = net.backward(&cache, &dy)?;
        apply_grads(net, grads, &adam)?;
        Ok::<f64, EngineError>(loss)
    };
    let val = |net: &SslNet<f64>| {
        let mut sum = 0.0;
        for (bi, chunk) in val_pos.chunks(cfg.batch_size.max(1)).enumerate() {
            let mut rng = val_rng(cfg.seed, bi);
            let (x, targets) = make_ssl_batch(chunk, mics, &k, cfg.snr_range_db, &mut rng);
            let y = net.forward(&x)?;
            let (loss, _) = loss_ssl_batch(&y, &targets);
            sum += loss * chunk.len() as f64;
        }
        Ok::<f64, EngineError>(sum / val_pos.len() as f64)
    };
    Ok(epoch_loop!(ds, cfg, net, step, val))
}

/// Train the separator with the permutation-invariant spectral loss.
pub fn train_sfs(
    ds: &SfsDataset,
    mics: &MicArray<f64>,
    cfg: &TrainConfig,
    init: Option<SfsNet<f64>>,
) -> Result<Trained<SfsNet<f64>>, EngineError> {
    let k = Wavenumber::from_frequency(ds.frequency_hz);
    let mut net = init.unwrap_or_else(|| {
        build_sfs::<f64>(mics.len(), 2, &mut stream_rng(cfg.seed, "init-sfs", 0))
    });
    let adam = AdamConfig::with_lr(cfg.learning_rate);
    let train_pairs = ds.train();
    let val_pairs = ds.val();

    let step = |net: &mut SfsNet<f64>, chunk: &[usize], epoch: usize, bi: usize| {
        let mut rng = batch_rng(cfg.seed, epoch, bi);
        let pairs: Vec<_> = chunk.iter().map(|&i| train_pairs[i]).collect();
        let (x, targets) = make_sfs_batch(&pairs, mics, &k, cfg.snr_range_db, &mut rng);
        let (y, cache) = net.forward_train(&x)?;
        let (loss, dy) = loss_sfs_packed(&y, &targets);
        let (_, grads) = net.backward(&cache, &dy)?;
        apply_grads(net, grads, &adam)?;
        Ok::<f64, EngineError>(loss)
    };
    let val = |net: &SfsNet<f64>| {
        let mut sum = 0.0;
        for (bi, chunk) in val_pairs.chunks(cfg.batch_size.max(1)).enumerate() {
            let mut rng = val_rng(cfg.seed, bi);
            let (x, targets) = make_sfs_batch(chunk, mics, &k, cfg.snr_range_db, &mut rng);
            let y = net.forward(&x)?;
            let (loss, _) = loss_sfs_packed(&y, &targets);
            sum += loss * chunk.len() as f64;
        }
        Ok::<f64, EngineError>(sum / val_pairs.len() as f64)
    };
    Ok(epoch_loop!(ds, cfg, net, step, val))
}

/// Train the six-output direct baseline localizer.
pub fn train_baseline(
    ds: &SfsDataset,
    mics: &MicArray<f64>,
    cfg: &TrainConfig,
    init: Option<SslNet<f64>>,
) -> Result<Trained<SslNet<f64>>, EngineError> {
    let k = Wavenumber::from_frequency(ds.frequency_hz);
    let mut net = init.unwrap_or_else(|| {
        build_baseline::<f64>(mics.len(), &mut stream_rng(cfg.seed, "init-base", 0))
    });
    let adam = AdamConfig::with_lr(cfg.learning_rate);
    let train_pairs = ds.train();
    let val_pairs = ds.val();

    let step = |net: &mut SslNet<f64>, chunk: &[usize], epoch: usize, bi: usize| {
        let mut rng = batch_rng(cfg.seed, epoch, bi);
        let pairs: Vec<_> = chunk.iter().map(|&i| train_pairs[i]).collect();
        let (x, targets) = make_baseline_batch(&pairs, mics, &k, cfg.snr_range_db, &mut rng);
        let (y, cache) = net.forward_train(&x)?;
        let (loss, dy) = loss_base_batch(&y, &targets);
        let (_, grads) = net.backward(&cache, &dy)?;
        apply_grads(net, grads, &adam)?;
        Ok::<f64, EngineError>(loss)
    };
    let val = |net: &SslNet<f64>| {
        let mut sum = 0.0;
        for (bi, chunk) in val_pairs.chunks(cfg.batch_size.max(1)).enumerate() {
            let mut rng = val_rng(cfg.seed, bi);
            let (x, targets) = make_baseline_batch(chunk, mics, &k, cfg.snr_range_db, &mut rng);
            let y = net.forward(&x)?;
            let (loss, _) = loss_base_batch(&y, &targets);
            sum += loss * chunk.len() as f64;
        }
        Ok::<f64, EngineError>(sum / val_pairs.len() as f64)
    };
    Ok(epoch_loop!(ds, cfg, net, step, val))
}

/// Forward + loss (+ optional input gradient) of the frozen-localizer
/// objective: separate, repack each estimated source as a covariance
/// stack, localize with the frozen net, and score against the true pair.
fn frozen_objective(
    sfs: &SfsNet<f64>,
    ssl: &SslNet<f64>,
    y: &Tensor<f64>,
    targets: &[(Point3<f64>, Point3<f64>)],
    want_grad: bool,
    epoch: usize,
) -> Result<(f64, Option<Tensor<f64>>), EngineError> {
    let _ = sfs;
    let b = targets.len();
    let m = y.shape()[2];
    assert_eq!(y.shape(), &[b, 4, m]);
    let mut cov = Tensor::zeros(&[2 * b, 2, m, m]);
    let mut caches = Vec::with_capacity(2 * b);
    for i in 0..b {
        for s in 0..2 {
            let re = &y.data()[(i * 4 + 2 * s) * m..][..m];
            let im = &y.data()[(i * 4 + 2 * s + 1) * m..][..m];
            let (c, cache) =
                cov_pack_forward(re, im).map_err(|_| EngineError::Diverged(epoch))?;
            let idx = 2 * i + s;
            cov.data_mut()[idx * 2 * m * m..(idx + 1) * 2 * m * m].copy_from_slice(c.data());
            caches.push(cache);
        }
    }
    if want_grad {
        let (pred3, ssl_cache) = ssl.forward_train(&cov)?;
        let mut pred6 = Tensor::zeros(&[b, 6]);
        for i in 0..b {
            for s in 0..2 {
                for a in 0..3 {
                    pred6.data_mut()[i * 6 + 3 * s + a] = pred3.data()[(2 * i + s) * 3 + a];
                }
            }
        }
        let (loss, d6) = loss_base_batch(&pred6, targets);
        let mut d3 = Tensor::zeros(&[2 * b, 3]);
        for i in 0..b {
            for s in 0..2 {
                for a in 0..3 {
                    d3.data_mut()[(2 * i + s) * 3 + a] = d6.data()[i * 6 + 3 * s + a];
                }
            }
        }
        // frozen: parameter gradients of the localizer are discarded
        let (d_cov, _) = ssl.backward(&ssl_cache, &d3)?;
        let mut dy = Tensor::zeros(&[b, 4, m]);
        for i in 0..b {
            for s in 0..2 {
                let idx = 2 * i + s;
                let slice = Tensor::from_vec(
                    &[2, m, m],
                    d_cov.data()[idx * 2 * m * m..(idx + 1) * 2 * m * m].to_vec(),
                );
                let (dre, dim) = cov_pack_backward(&caches[idx], &slice);
                dy.data_mut()[(i * 4 + 2 * s) * m..][..m].copy_from_slice(&dre);
                dy.data_mut()[(i * 4 + 2 * s + 1) * m..][..m].copy_from_slice(&dim);
            }
        }
        Ok((loss, Some(dy)))
    } else {
        let pred3 = ssl.forward(&cov)?;
        let mut pred6 = Tensor::zeros(&[b, 6]);
        for i in 0..b {
            for s in 0..2 {
                for a in 0..3 {
                    pred6.data_mut()[i * 6 + 3 * s + a] = pred3.data()[(2 * i + s) * 3 + a];
                }
            }
        }
        let (loss, _) = loss_base_batch(&pred6, targets);
        Ok((loss, None))
    }
}

/// Fine-tune (or train) the separator through a frozen localizer using
/// the position loss only. The localizer's weights are never touched.
pub fn train_sfs_frozen_ssl(
    ds: &SfsDataset,
    mics: &MicArray<f64>,
    ssl: &SslNet<f64>,
    init: Option<SfsNet<f64>>,
    cfg: &TrainConfig,
) -> Result<Trained<SfsNet<f64>>, EngineError> {
    let k = Wavenumber::from_frequency(ds.frequency_hz);
    let mut net = init.unwrap_or_else(|| {
        build_sfs::<f64>(mics.len(), 2, &mut stream_rng(cfg.seed, "init-sfs", 0))
    });
    let adam = AdamConfig::with_lr(cfg.learning_rate);
    let train_pairs = ds.train();
    let val_pairs = ds.val();

    let step = |net: &mut SfsNet<f64>, chunk: &[usize], epoch: usize, bi: usize| {
        let mut rng = batch_rng(cfg.seed, epoch, bi);
        let pairs: Vec<_> = chunk.iter().map(|&i| train_pairs[i]).collect();
        let (x, _) = make_sfs_batch(&pairs, mics, &k, cfg.snr_range_db, &mut rng);
        let (y, cache) = net.forward_train(&x)?;
        let (loss, dy) = frozen_objective(net, ssl, &y, &pairs, true, epoch)?;
        let dy = dy.expect("grad requested");
        let (_, grads) = net.backward(&cache, &dy)?;
        apply_grads(net, grads, &adam)?;
        Ok::<f64, EngineError>(loss)
    };
    let val = |net: &SfsNet<f64>| {
        let mut sum = 0.0;
        for (bi, chunk) in val_pairs.chunks(cfg.batch_size.max(1)).enumerate() {
            let mut rng = val_rng(cfg.seed, bi);
            let (x, _) = make_sfs_batch(chunk, mics, &k, cfg.snr_range_db, &mut rng);
            let y = net.forward(&x)?;
            let (loss, _) = frozen_objective(net, ssl, &y, chunk, false, 0)?;
            sum += loss * chunk.len() as f64;
        }
        Ok::<f64, EngineError>(sum / val_pairs.len() as f64)
    };
    Ok(epoch_loop!(ds, cfg, net, step, val))
}

/// Write learning curves as `epoch,train_loss,val_loss` CSV.
pub fn curves_to_csv(curves: &Curve) -> String {
    let mut s = String::from("epoch,train_loss,val_loss\n");
    for (e, t, v) in curves {
        s.push_str(&format!("{e},{t},{v}\n"));
    }
    s
}
