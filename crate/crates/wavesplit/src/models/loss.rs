//! The three loss functions: position MSE for the localizer,
//! permutation-invariant pressure MSE for the separator, and
//! permutation-invariant position MSE for the baseline.
//!
//! Gradients flow only through the argmin branch; ties take branch 1.

use num_complex::Complex;

use crate::acoustics::PressureVector;
use crate::engine::Tensor;
use crate::scalar::{Point3, Scalar};

/// Localizer loss: (1/3) ||r - r_hat||^2.
pub fn loss_ssl<T: Scalar>(r_true: &Point3<T>, r_hat: &Point3<T>) -> T {
    r_true.dist2(r_hat) / T::real(3.0)
}

/// Batch-mean localizer loss with gradient w.r.t. the (B, 3) predictions.
pub fn loss_ssl_batch<T: Scalar>(pred: &Tensor<T>, targets: &[Point3<T>]) -> (T, Tensor<T>) {
    let b = targets.len();
    assert_eq!(pred.shape(), &[b, 3]);
    let mut grad = Tensor::zeros(pred.shape());
    let mut total = T::zero();
    let bn = T::real(b as f64);
    let three = T::real(3.0);
    let two = T::real(2.0);
    let pd = pred.data();
    let gd = grad.data_mut();
    for (bi, t) in targets.iter().enumerate() {
        for a in 0..3 {
            let diff = pd[bi * 3 + a] - t.0[a];
            total = total + diff * diff / three;
            gd[bi * 3 + a] = two * diff / (three * bn);
        }
    }
    (total / bn, grad)
}

fn mse_pair<T: Scalar>(t: &PressureVector<T>, y: &PressureVector<T>) -> T {
    let m = T::real(t.len() as f64);
    t.iter()
        .zip(y)
        .map(|(a, b)| (a - b).norm_sqr())
        .sum::<T>()
        / m
}

/// Permutation-invariant separator loss for S = 2:
/// (1/S) min(MSE11 + MSE22, MSE12 + MSE21).
pub fn loss_sfs<T: Scalar>(
    targets: &[PressureVector<T>; 2],
    preds: &[PressureVector<T>; 2],
) -> T {
    let direct = mse_pair(&targets[0], &preds[0]) + mse_pair(&targets[1], &preds[1]);
    let swapped = mse_pair(&targets[0], &preds[1]) + mse_pair(&targets[1], &preds[0]);
    direct.min(swapped) / T::real(2.0)
}

/// Batch separator loss on the packed (B, 4, M) network output against
/// per-sample complex target pairs (already in the normalized scale).
/// Returns the batch-mean loss and the gradient on the packed output.
pub fn loss_sfs_packed<T: Scalar>(
    y: &Tensor<T>,
    targets: &[[PressureVector<T>; 2]],
) -> (T, Tensor<T>) {
    let b = targets.len();
    let m = y.shape()[2];
    assert_eq!(y.shape(), &[b, 4, m]);
    let yd = y.data();
    let mut grad = Tensor::zeros(y.shape());
    let gd = grad.data_mut();
    let mut total = T::zero();
    let mn = T::real(m as f64);
    let bn = T::real(b as f64);
    let two = T::real(2.0);

    // complex prediction s from rows 2s, 2s+1 of sample bi
    let pred = |bi: usize, s: usize, i: usize| -> Complex<T> {
        Complex::new(yd[(bi * 4 + 2 * s) * m + i], yd[(bi * 4 + 2 * s + 1) * m + i])
    };

    for (bi, t) in targets.iter().enumerate() {
        let mut mse = [[T::zero(); 2]; 2];
        for (ti, trow) in t.iter().enumerate() {
            for pj in 0..2 {
                let mut acc = T::zero();
                for i in 0..m {
                    acc = acc + (trow[i] - pred(bi, pj, i)).norm_sqr();
                }
                mse[ti][pj] = acc / mn;
            }
        }
        let direct = mse[0][0] + mse[1][1];
        let swapped = mse[0][1] + mse[1][0];
        // assignment[j] = target index matched to prediction j
        let (lv, assign) = if direct <= swapped {
            (direct, [0usize, 1])
        } else {
            (swapped, [1usize, 0])
        };
        total = total + lv / two;
        for pj in 0..2 {
            let trow = &t[assign[pj]];
            for i in 0..m {
                let diff = pred(bi, pj, i) - trow[i];
                // d/dy of (1/(S*M*B)) |y - t|^2
                let c = two / (two * mn * bn);
                gd[(bi * 4 + 2 * pj) * m + i] = diff.re * c;
                gd[(bi * 4 + 2 * pj + 1) * m + i] = diff.im * c;
            }
        }
    }
    (total / bn, grad)
}

/// Baseline loss (S = 2): (1/(3S)) min over the two pairings of summed
/// squared position errors.
pub fn loss_base<T: Scalar>(
    r1: &Point3<T>,
    r2: &Point3<T>,
    rh1: &Point3<T>,
    rh2: &Point3<T>,
) -> T {
    let direct = r1.dist2(rh1) + r2.dist2(rh2);
    let swapped = r1.dist2(rh2) + r2.dist2(rh1);
    direct.min(swapped) / T::real(6.0)
}

/// Batch baseline loss on (B, 6) predictions (two stacked 3D positions);
/// returns batch mean and gradient.
pub fn loss_base_batch<T: Scalar>(
    pred: &Tensor<T>,
    targets: &[(Point3<T>, Point3<T>)],
) -> (T, Tensor<T>) {
    let b = targets.len();
    assert_eq!(pred.shape(), &[b, 6]);
    let pd = pred.data();
    let mut grad = Tensor::zeros(pred.shape());
    let gd = grad.data_mut();
    let mut total = T::zero();
    let six = T::real(6.0);
    let two = T::real(2.0);
    let bn = T::real(b as f64);
    for (bi, (r1, r2)) in targets.iter().enumerate() {
        let rh1 = Point3([pd[bi * 6], pd[bi * 6 + 1], pd[bi * 6 + 2]]);
        let rh2 = Point3([pd[bi * 6 + 3], pd[bi * 6 + 4], pd[bi * 6 + 5]]);
        let direct = r1.dist2(&rh1) + r2.dist2(&rh2);
        let swapped = r1.dist2(&rh2) + r2.dist2(&rh1);
        let (lv, t1, t2) = if direct <= swapped {
            (direct, r1, r2)
        } else {
            (swapped, r2, r1)
        };
        total = total + lv / six;
        for a in 0..3 {
            gd[bi * 6 + a] = two * (rh1.0[a] - t1.0[a]) / (six * bn);
            gd[bi * 6 + 3 + a] = two * (rh2.0[a] - t2.0[a]) / (six * bn);
        }
    }
    (total / bn, grad)
}
