//! Complex <-> real packing at the network boundaries.
//!
//! The separator eats a max-abs-normalized pressure vector split into
//! real/imag rows; the localizer eats the real/imag planes of the
//! normalized spatial covariance matrix. The covariance packing also has a
//! hand-rolled backward pass so position losses can flow through a frozen
//! localizer into the separator.

use num_complex::Complex;
use thiserror::Error;

use crate::acoustics::PressureVector;
use crate::engine::Tensor;
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum PackError {
    #[error("all-zero pressure vector cannot be normalized")]
    ZeroInput,
    #[error("packed tensor must have an even row count, got {0}")]
    OddRows(usize),
}

/// Max elementwise modulus and its index (first on tie).
fn max_abs<T: Scalar>(p: &[Complex<T>]) -> (T, usize) {
    let mut best = T::zero();
    let mut idx = 0;
    for (i, c) in p.iter().enumerate() {
        let a = c.norm();
        if a > best {
            best = a;
            idx = i;
        }
    }
    (best, idx)
}

/// Normalize by the max modulus and split into a (2, M) real tensor.
/// Returns the tensor and the normalization scale.
pub fn pack_sfs_input<T: Scalar>(p: &PressureVector<T>) -> Result<(Tensor<T>, T), PackError> {
    let (scale, _) = max_abs(p);
    if scale <= T::zero() {
        return Err(PackError::ZeroInput);
    }
    let m = p.len();
    let mut data = vec![T::zero(); 2 * m];
    for (i, c) in p.iter().enumerate() {
        data[i] = c.re / scale;
        data[m + i] = c.im / scale;
    }
    Ok((Tensor::from_vec(&[2, m], data), scale))
}

/// Recombine a (2S, M) output into S complex vectors, undoing the scale.
pub fn unpack_sfs_output<T: Scalar>(
    y: &Tensor<T>,
    scale: T,
) -> Result<Vec<PressureVector<T>>, PackError> {
    let (rows, m) = (y.shape()[0], y.shape()[1]);
    if rows % 2 != 0 {
        return Err(PackError::OddRows(rows));
    }
    let d = y.data();
    let mut out = Vec::with_capacity(rows / 2);
    for s in 0..rows / 2 {
        let re = &d[2 * s * m..][..m];
        let im = &d[(2 * s + 1) * m..][..m];
        out.push(
            re.iter()
                .zip(im)
                .map(|(&a, &b)| Complex::new(a * scale, b * scale))
                .collect(),
        );
    }
    Ok(out)
}

/// Normalized spatial covariance input: planes Re / Im of u_bar u_bar^H.
pub fn pack_ssl_input<T: Scalar>(u: &PressureVector<T>) -> Result<Tensor<T>, PackError> {
    let (scale, _) = max_abs(u);
    if scale <= T::zero() {
        return Err(PackError::ZeroInput);
    }
    let m = u.len();
    let ub: Vec<Complex<T>> = u.iter().map(|c| c / scale).collect();
    let mut data = vec![T::zero(); 2 * m * m];
    for i in 0..m {
        for j in 0..m {
            let c = ub[i] * ub[j].conj();
            data[i * m + j] = c.re;
            data[m * m + i * m + j] = c.im;
        }
    }
    Ok(Tensor::from_vec(&[2, m, m], data))
}

/// Forward state for [`cov_pack_backward`].
#[derive(Debug, Clone)]
pub struct CovCache<T> {
    alpha: Vec<T>,
    beta: Vec<T>,
    scale: T,
    argmax: usize,
}

/// Differentiable covariance packing from real/imag component slices.
/// Numerically identical to [`pack_ssl_input`]; the max-abs index is
/// treated as constant for the subgradient.
pub fn cov_pack_forward<T: Scalar>(
    re: &[T],
    im: &[T],
) -> Result<(Tensor<T>, CovCache<T>), PackError> {
    let m = re.len();
    let mut scale = T::zero();
    let mut argmax = 0;
    for i in 0..m {
        let a = (re[i] * re[i] + im[i] * im[i]).sqrt();
        if a > scale {
            scale = a;
            argmax = i;
        }
    }
    if scale <= T::zero() {
        return Err(PackError::ZeroInput);
    }
    let alpha: Vec<T> = re.iter().map(|&v| v / scale).collect();
    let beta: Vec<T> = im.iter().map(|&v| v / scale).collect();
    let mut data = vec![T::zero(); 2 * m * m];
    for i in 0..m {
        for j in 0..m {
            data[i * m + j] = alpha[i] * alpha[j] + beta[i] * beta[j];
            data[m * m + i * m + j] = beta[i] * alpha[j] - alpha[i] * beta[j];
        }
    }
    Ok((
        Tensor::from_vec(&[2, m, m], data),
        CovCache {
            alpha,
            beta,
            scale,
            argmax,
        },
    ))
}

/// Backward of [`cov_pack_forward`]: gradient w.r.t. the raw re/im slices
/// given the gradient on the (2, M, M) planes.
pub fn cov_pack_backward<T: Scalar>(cache: &CovCache<T>, d: &Tensor<T>) -> (Vec<T>, Vec<T>) {
    let m = cache.alpha.len();
    let dd = d.data();
    let (gr, gi) = dd.split_at(m * m);
    let (alpha, beta) = (&cache.alpha, &cache.beta);
    // gradients w.r.t. the normalized components
    let mut da = vec![T::zero(); m];
    let mut db = vec![T::zero(); m];
    for k in 0..m {
        let mut sa = T::zero();
        let mut sb = T::zero();
        for j in 0..m {
            // d ReC_kj / d alpha_k = alpha_j ; d ReC_jk / d alpha_k = alpha_j
            sa = sa + gr[k * m + j] * alpha[j] + gr[j * m + k] * alpha[j];
            // Im C_ij = beta_i alpha_j - alpha_i beta_j
            sa = sa + gi[j * m + k] * beta[j] - gi[k * m + j] * beta[j];
            sb = sb + gr[k * m + j] * beta[j] + gr[j * m + k] * beta[j];
            sb = sb + gi[k * m + j] * alpha[j] - gi[j * m + k] * alpha[j];
        }
        da[k] = sa;
        db[k] = sb;
    }
    // chain through alpha = re/s, beta = im/s with s depending on the
    // argmax component only
    let s = cache.scale;
    let q = cache.argmax;
    let inner: T = (0..m)
        .map(|i| da[i] * alpha[i] + db[i] * beta[i])
        .sum();
    let mut dre = vec![T::zero(); m];
    let mut dim = vec![T::zero(); m];
    for i in 0..m {
        dre[i] = da[i] / s;
        dim[i] = db[i] / s;
    }
    // ds/dre_q = alpha_q, ds/dim_q = beta_q (unit-normalized components)
    dre[q] = dre[q] - alpha[q] * inner / s;
    dim[q] = dim[q] - beta[q] * inner / s;
    (dre, dim)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    use crate::seed::stream_rng;

    type C = Complex<f64>;

    #[test]
    fn sfs_pack_examples() {
        let p = vec![C::new(1.0, 0.0), C::new(0.0, 2.0), C::new(-0.5, 0.0)];
        let (t, scale) = pack_sfs_input(&p).unwrap();
        assert_eq!(scale, 2.0);
        assert_eq!(t.shape(), &[2, 3]);
        assert_eq!(t.data(), &[0.5, 0.0, -0.25, 0.0, 1.0, 0.0]);

        // positive real scaling leaves the packed tensor unchanged
        let p5: Vec<C> = p.iter().map(|c| c * 5.0).collect();
        let (t5, s5) = pack_sfs_input(&p5).unwrap();
        assert_eq!(t.data(), t5.data());
        assert_eq!(s5, 10.0);

        let single = vec![C::new(1.0, 0.0)];
        let (t1, s1) = pack_sfs_input(&single).unwrap();
        assert_eq!(s1, 1.0);
        assert_eq!(t1.data(), &[1.0, 0.0]);

        assert!(matches!(
            pack_sfs_input(&vec![C::new(0.0, 0.0); 4]),
            Err(PackError::ZeroInput)
        ));
    }

    #[test]
    fn sfs_unpack_and_round_trip() {
        let y = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let got = unpack_sfs_output(&y, 2.0).unwrap();
        assert_eq!(got.len(), 1);
        assert_eq!(got[0], vec![C::new(2.0, 0.0), C::new(0.0, 2.0)]);

        let mut rng = stream_rng(3, "pack", 0);
        let p: Vec<C> = (0..8)
            .map(|_| C::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let (t, scale) = pack_sfs_input(&p).unwrap();
        let back = unpack_sfs_output(&t, scale).unwrap();
        for (a, b) in p.iter().zip(&back[0]) {
            assert!((a - b).norm() < 1e-15);
        }

        let odd = Tensor::from_vec(&[3, 2], vec![0.0; 6]);
        assert!(matches!(
            unpack_sfs_output(&odd, 1.0),
            Err(PackError::OddRows(3))
        ));
    }

    #[test]
    fn ssl_pack_hand_example() {
        // u = [1, j]: ubar ubar^H = [[1, -j], [j, 1]]
        let u = vec![C::new(1.0, 0.0), C::new(0.0, 1.0)];
        let t = pack_ssl_input(&u).unwrap();
        assert_eq!(t.shape(), &[2, 2, 2]);
        let re = &t.data()[0..4];
        let im = &t.data()[4..8];
        assert_eq!(re, &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(im, &[0.0, -1.0, 1.0, 0.0]);
    }

    #[test]
    fn ssl_pack_phase_and_scale_invariance() {
        let mut rng = stream_rng(4, "pack", 0);
        let u: Vec<C> = (0..6)
            .map(|_| C::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let t = pack_ssl_input(&u).unwrap();
        for _ in 0..10 {
            let phi: f64 = rng.gen_range(-3.14..3.14);
            let mag: f64 = rng.gen_range(0.1..10.0);
            let c = C::from_polar(mag, phi);
            let u2: Vec<C> = u.iter().map(|v| v * c).collect();
            let t2 = pack_ssl_input(&u2).unwrap();
            for (a, b) in t.data().iter().zip(t2.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cov_pack_matches_inference_path() {
        let mut rng = stream_rng(5, "pack", 0);
        let u: Vec<C> = (0..5)
            .map(|_| C::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let re: Vec<f64> = u.iter().map(|c| c.re).collect();
        let im: Vec<f64> = u.iter().map(|c| c.im).collect();
        let (t, _) = cov_pack_forward(&re, &im).unwrap();
        let t2 = pack_ssl_input(&u).unwrap();
        for (a, b) in t.data().iter().zip(t2.data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn cov_pack_gradient_matches_finite_differences() {
        let mut rng = stream_rng(6, "pack", 0);
        let m = 5;
        let re: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let im: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let lw: Vec<f64> = (0..2 * m * m).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let loss = |re: &[f64], im: &[f64]| -> f64 {
            let (t, _) = cov_pack_forward(re, im).unwrap();
            t.data().iter().zip(&lw).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = cov_pack_forward(&re, &im).unwrap();
        let d = Tensor::from_vec(&[2, m, m], lw.clone());
        let (dre, dim) = cov_pack_backward(&cache, &d);
        let h = 1e-6;
        for i in 0..m {
            let mut rp = re.clone();
            rp[i] += h;
            let mut rm = re.clone();
            rm[i] -= h;
            let fd = (loss(&rp, &im) - loss(&rm, &im)) / (2.0 * h);
            assert!((fd - dre[i]).abs() < 1e-6, "re {i}: fd {fd} vs {}", dre[i]);

            let mut ip = im.clone();
            ip[i] += h;
            let mut imn = im.clone();
            imn[i] -= h;
            let fd = (loss(&re, &ip) - loss(&re, &imn)) / (2.0 * h);
            assert!((fd - dim[i]).abs() < 1e-6, "im {i}: fd {fd} vs {}", dim[i]);
        }
    }
}
