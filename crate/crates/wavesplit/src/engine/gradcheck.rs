//! Central-finite-difference gradient oracle, independent of the backward
//! pass it checks. Test support; kept public so integration suites can use
//! the same oracle.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::layers::Layer;
use super::tensor::Tensor;

/// Fill a tensor with uniform(-1,1) values.
pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let data = (0..shape.iter().product::<usize>())
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    Tensor::from_vec(shape, data)
}

fn loss_weights(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Check analytic input and parameter gradients of a layer against central
/// differences on a random linear functional of the output. Returns the
/// max relative error observed.
pub fn check_layer(layer: &mut Layer<f64>, x: &Tensor<f64>, h: f64, rng: &mut ChaCha8Rng) -> f64 {
    let (y0, cache) = layer.forward_train(x).expect("forward");
    let lw = loss_weights(y0.len(), rng);
    let loss = |y: &Tensor<f64>| -> f64 { y.data().iter().zip(&lw).map(|(a, b)| a * b).sum() };

    let dy = Tensor::from_vec(y0.shape(), lw.clone());
    let (dx, dparams) = layer.backward(&cache, &dy).expect("backward");

    let mut max_rel: f64 = 0.0;
    let mut record = |analytic: f64, numeric: f64| {
        let denom = analytic.abs().max(numeric.abs()).max(1e-6);
        max_rel = max_rel.max((analytic - numeric).abs() / denom);
    };

    // input gradient
    let mut xp = x.clone();
    for i in 0..x.len() {
        let orig = xp.data()[i];
        xp.data_mut()[i] = orig + h;
        let lp = loss(&layer.forward(&xp).unwrap());
        xp.data_mut()[i] = orig - h;
        let lm = loss(&layer.forward(&xp).unwrap());
        xp.data_mut()[i] = orig;
        record(dx.data()[i], (lp - lm) / (2.0 * h));
    }

    // parameter gradients
    for pi in 0..layer.params.len() {
        for i in 0..layer.params[pi].value.len() {
            let orig = layer.params[pi].value.data()[i];
            layer.params[pi].value.data_mut()[i] = orig + h;
            let lp = loss(&layer.forward(x).unwrap());
            layer.params[pi].value.data_mut()[i] = orig - h;
            let lm = loss(&layer.forward(x).unwrap());
            layer.params[pi].value.data_mut()[i] = orig;
            record(dparams[pi].data()[i], (lp - lm) / (2.0 * h));
        }
    }
    max_rel
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::layers::{Cache, LayerSpec};
    use crate::seed::stream_rng;

    fn check(spec: LayerSpec, in_shape: &[usize], seed: u64) -> f64 {
        let mut rng = stream_rng(seed, "gradcheck", 0);
        let mut layer = Layer::new(spec, "t", &mut rng);
        let x = random_tensor(in_shape, &mut rng);
        check_layer(&mut layer, &x, 1e-5, &mut rng)
    }

    #[test]
    fn all_layer_kinds_pass_finite_differences() {
        let cases: Vec<(LayerSpec, Vec<usize>)> = vec![
            (
                LayerSpec::Conv1d { in_ch: 3, out_ch: 4, kernel: 5, stride: 1, padding: 2 },
                vec![2, 3, 12],
            ),
            (
                LayerSpec::TConv1d { in_ch: 3, out_ch: 2, kernel: 4, stride: 2, padding: 1 },
                vec![2, 3, 6],
            ),
            (
                LayerSpec::Conv2d { in_ch: 2, out_ch: 3, kernel: 5, stride: 2, padding: 1 },
                vec![2, 2, 8, 8],
            ),
            (LayerSpec::Linear { in_f: 7, out_f: 4 }, vec![3, 7]),
            (LayerSpec::LayerNorm { features: 4 }, vec![2, 4, 6]),
            (LayerSpec::LayerNorm { features: 5 }, vec![3, 5]),
            (LayerSpec::Relu, vec![2, 4, 6]),
            (LayerSpec::MaxPool1d, vec![2, 3, 8]),
            (LayerSpec::Flatten, vec![2, 3, 4]),
        ];
        for (si, (spec, shape)) in cases.into_iter().enumerate() {
            for seed in 0..3 {
                let err = check(spec, &shape, (si * 10 + seed) as u64);
                assert!(err < 1e-4, "{spec:?} seed {seed}: max rel err {err}");
            }
        }
    }

    #[test]
    fn backward_is_deterministic() {
        let mut rng = stream_rng(5, "det", 0);
        let layer = Layer::new(
            LayerSpec::Conv2d { in_ch: 2, out_ch: 3, kernel: 5, stride: 2, padding: 1 },
            "t",
            &mut rng,
        );
        let x = random_tensor(&[2, 2, 8, 8], &mut rng);
        let (y, cache) = layer.forward_train(&x).unwrap();
        let dy = random_tensor(y.shape(), &mut rng);
        let (dx1, dp1) = layer.backward(&cache, &dy).unwrap();
        let (dx2, dp2) = layer.backward(&cache, &dy).unwrap();
        assert_eq!(dx1, dx2);
        assert_eq!(dp1, dp2);
    }

    #[test]
    fn backward_cache_mismatch_errors() {
        let mut rng = stream_rng(6, "det", 0);
        let layer = Layer::<f64>::new(LayerSpec::Relu, "t", &mut rng);
        let dy = Tensor::zeros(&[1, 2]);
        assert!(layer.backward(&Cache::None, &dy).is_err());
    }
}
