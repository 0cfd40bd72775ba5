//! Small dense complex solvers used by the amplitude regression and OMP.
//!
//! Systems here are tiny (n = S or the OMP support size), so plain
//! Gaussian elimination with partial pivoting on the normal equations is
//! both adequate and easy to audit.

use num_complex::Complex;

use crate::scalar::Scalar;

/// Relative Tikhonov damping applied to the normal-equation diagonal.
pub const TIKHONOV_REL: f64 = 1e-12;

/// Solve the n-by-n system `a x = b` in place (row-major `a`), partial
/// pivoting by magnitude. Returns `None` on rank collapse.
pub fn solve<T: Scalar>(
    a: &mut [Complex<T>],
    b: &mut [Complex<T>],
    n: usize,
) -> Option<Vec<Complex<T>>> {
    assert_eq!(a.len(), n * n);
    assert_eq!(b.len(), n);
    for col in 0..n {
        let mut pivot = col;
        let mut best = a[col * n + col].norm_sqr();
        for row in col + 1..n {
            let v = a[row * n + col].norm_sqr();
            if v > best {
                best = v;
                pivot = row;
            }
        }
        if best.to_real() <= 0.0 || !best.to_real().is_finite() {
            return None;
        }
        if pivot != col {
            for j in 0..n {
                a.swap(col * n + j, pivot * n + j);
            }
            b.swap(col, pivot);
        }
        let d = a[col * n + col];
        for row in col + 1..n {
            let f = a[row * n + col] / d;
            if f.norm_sqr().to_real() == 0.0 {
                continue;
            }
            for j in col..n {
                let v = a[col * n + j];
                a[row * n + j] = a[row * n + j] - f * v;
            }
            let v = b[col];
            b[row] = b[row] - f * v;
        }
    }
    let mut x = vec![Complex::new(T::zero(), T::zero()); n];
    for row in (0..n).rev() {
        let mut acc = b[row];
        for j in row + 1..n {
            acc = acc - a[row * n + j] * x[j];
        }
        x[row] = acc / a[row * n + row];
    }
    if x.iter().all(|c| c.re.to_real().is_finite() && c.im.to_real().is_finite()) {
        Some(x)
    } else {
        None
    }
}

/// Least-squares solution of the m-by-n system `a x ≈ b` (row-major,
/// m ≥ n) via conjugate-transpose normal equations with a trace-scaled
/// Tikhonov guard on the diagonal. Returns `None` on rank collapse.
pub fn lstsq<T: Scalar>(
    a: &[Complex<T>],
    b: &[Complex<T>],
    m: usize,
    n: usize,
) -> Option<Vec<Complex<T>>> {
    assert_eq!(a.len(), m * n);
    assert_eq!(b.len(), m);
    assert!(m >= n && n > 0);
    let zero = Complex::new(T::zero(), T::zero());
    let mut ata = vec![zero; n * n];
    let mut atb = vec![zero; n];
    for i in 0..n {
        for j in 0..n {
            let mut acc = zero;
            for r in 0..m {
                acc = acc + a[r * n + i].conj() * a[r * n + j];
            }
            ata[i * n + j] = acc;
        }
        let mut acc = zero;
        for r in 0..m {
            acc = acc + a[r * n + i].conj() * b[r];
        }
        atb[i] = acc;
    }
    let trace: T = (0..n).map(|i| ata[i * n + i].re).sum();
    let lambda = trace / T::real(n as f64) * T::real(TIKHONOV_REL);
    for i in 0..n {
        ata[i * n + i].re = ata[i * n + i].re + lambda;
    }
    solve(&mut ata, &mut atb, n)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Complex<f64> {
        Complex::new(re, im)
    }

    #[test]
    fn solve_known_system() {
        // [[1, j], [j, 2]] x = [1+j, 3] has a closed-form solution
        let mut a = vec![c(1.0, 0.0), c(0.0, 1.0), c(0.0, 1.0), c(2.0, 0.0)];
        let mut b = vec![c(1.0, 1.0), c(3.0, 0.0)];
        let a0 = a.clone();
        let b0 = b.clone();
        let x = solve(&mut a, &mut b, 2).unwrap();
        for r in 0..2 {
            let lhs = a0[r * 2] * x[0] + a0[r * 2 + 1] * x[1];
            assert!((lhs - b0[r]).norm() < 1e-12);
        }
    }

    #[test]
    fn solve_detects_singular() {
        let mut a = vec![c(1.0, 2.0), c(2.0, 4.0), c(2.0, 4.0), c(4.0, 8.0)];
        let mut b = vec![c(1.0, 0.0), c(0.0, 0.0)];
        assert!(solve(&mut a, &mut b, 2).is_none());
    }

    #[test]
    fn lstsq_recovers_consistent_overdetermined_system() {
        // 4 rows, 2 unknowns, b constructed from a known x
        let a: Vec<Complex<f64>> = vec![
            c(1.0, 0.5), c(0.2, -0.3),
            c(-0.4, 1.0), c(0.9, 0.1),
            c(0.3, -0.7), c(-0.5, 0.6),
            c(0.8, 0.2), c(0.1, -0.9),
        ];
        let x_true = [c(2.0, -1.0), c(-0.5, 0.25)];
        let b: Vec<Complex<f64>> = (0..4)
            .map(|r| a[r * 2] * x_true[0] + a[r * 2 + 1] * x_true[1])
            .collect();
        let x = lstsq(&a, &b, 4, 2).unwrap();
        assert!((x[0] - x_true[0]).norm() < 1e-10);
        assert!((x[1] - x_true[1]).norm() < 1e-10);
    }
}
