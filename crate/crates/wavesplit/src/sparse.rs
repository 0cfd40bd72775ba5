//! Gridded sparse baseline: a dictionary of Green's functions on a
//! lattice over the source region, solved greedily with orthogonal
//! matching pursuit (OMP).

use num_complex::Complex;
use thiserror::Error;

use crate::acoustics::{green, MicArray, PointSource, PressureVector, Wavenumber};
use crate::linalg::lstsq;
use crate::pipeline::Decomposition;
use crate::scalar::{Point3, Scalar};

#[derive(Debug, Error)]
pub enum SparseError {
    #[error("rank collapse in the selected dictionary subset")]
    RankCollapse,
    #[error(transparent)]
    Acoustics(#[from] crate::acoustics::AcousticsError),
}

/// Cartesian lattice of pitch `delta` covering the ball of radius
/// `radius`, anchored at the origin. Lattice points on the boundary
/// sphere are included (within a tiny tolerance): this is the anchoring
/// that yields 2,109 points at pitch 0.1 and 257 at pitch 0.2 for
/// radius 0.8.
#[derive(Debug, Clone)]
pub struct Grid<T> {
    pub pitch: f64,
    pub points: Vec<Point3<T>>,
}

impl<T: Scalar> Grid<T> {
    pub fn build(delta: f64, radius: f64) -> Self {
        assert!(delta > 0.0 && radius > 0.0);
        let n = (radius / delta).floor() as i64;
        let r2 = radius * radius + 1e-9;
        let mut points = Vec::new();
        for i in -n..=n {
            for j in -n..=n {
                for l in -n..=n {
                    let (x, y, z) = (i as f64 * delta, j as f64 * delta, l as f64 * delta);
                    if x * x + y * y + z * z <= r2 {
                        points.push(Point3::from_f64(Point3([x, y, z])));
                    }
                }
            }
        }
        Grid {
            pitch: delta,
            points,
        }
    }
}

/// Green's-function dictionary: column n holds the transfer vector from
/// grid point n to every microphone, with its l2 norm cached for the
/// normalized correlation scan.
#[derive(Debug, Clone)]
pub struct Dictionary<T> {
    pub grid: Grid<T>,
    /// Column-major: columns[n][m] = green(mic m | grid point n).
    pub columns: Vec<Vec<Complex<T>>>,
    pub norms: Vec<T>,
}

impl<T: Scalar> Dictionary<T> {
    pub fn build(grid: Grid<T>, mics: &MicArray<T>, k: &Wavenumber<T>) -> Result<Self, SparseError> {
        let mut columns = Vec::with_capacity(grid.points.len());
        let mut norms = Vec::with_capacity(grid.points.len());
        for pt in &grid.points {
            let col: Vec<Complex<T>> = mics
                .positions
                .iter()
                .map(|rm| green(rm, pt, k))
                .collect::<Result<_, _>>()?;
            let norm = col
                .iter()
                .map(|c| c.norm_sqr())
                .fold(T::zero(), |a, b| a + b)
                .sqrt();
            columns.push(col);
            norms.push(norm);
        }
        Ok(Dictionary {
            grid,
            columns,
            norms,
        })
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }
}

/// Classical OMP: `s` rounds of normalized-correlation selection, joint
/// least-squares re-solve on the support, residual update. Ties break to
/// the lowest index; an all-zero observation selects index 0 with
/// amplitude 0.
pub fn omp<T: Scalar>(
    p: &PressureVector<T>,
    dict: &Dictionary<T>,
    s: usize,
) -> Result<(Vec<usize>, Vec<Complex<T>>), SparseError> {
    let m = p.len();
    assert!(s >= 1 && s <= m && s <= dict.len());
    assert!(dict.columns.iter().all(|c| c.len() == m));
    let zero = Complex::new(T::zero(), T::zero());
    let mut residual = p.clone();
    let mut support: Vec<usize> = Vec::with_capacity(s);
    let mut amps: Vec<Complex<T>> = Vec::new();
    for _ in 0..s {
        let mut best_idx = None;
        let mut best = T::neg_infinity();
        for (n, col) in dict.columns.iter().enumerate() {
            if support.contains(&n) {
                continue;
            }
            let mut inner = zero;
            for (c, r) in col.iter().zip(&residual) {
                inner = inner + c.conj() * r;
            }
            let corr = inner.norm() / dict.norms[n];
            if corr > best {
                best = corr;
                best_idx = Some(n);
            }
        }
        support.push(best_idx.expect("support smaller than dictionary"));
        // joint least squares on the (unnormalized) selected columns
        let mut a = vec![zero; m * support.len()];
        for (ci, &n) in support.iter().enumerate() {
            for r in 0..m {
                a[r * support.len() + ci] = dict.columns[n][r];
            }
        }
        amps = lstsq(&a, p, m, support.len()).ok_or(SparseError::RankCollapse)?;
        for r in 0..m {
            let mut acc = p[r];
            for (ci, &n) in support.iter().enumerate() {
                acc = acc - dict.columns[n][r] * amps[ci];
            }
            residual[r] = acc;
        }
    }
    Ok((support, amps))
}

/// The Sparse baseline end-to-end: build the grid dictionary for the
/// source region with the given pitch and emit the OMP solution as point
/// sources.
pub fn sparse_decompose<T: Scalar>(
    p: &PressureVector<T>,
    delta: f64,
    s: usize,
    mics: &MicArray<T>,
    k: &Wavenumber<T>,
) -> Result<Decomposition<T>, SparseError> {
    let grid = Grid::build(delta, crate::acoustics::SOURCE_REGION_RADIUS);
    let dict = Dictionary::build(grid, mics, k)?;
    omp_decompose(p, &dict, s)
}

/// OMP on a prebuilt dictionary (lets sweeps reuse it across trials).
pub fn omp_decompose<T: Scalar>(
    p: &PressureVector<T>,
    dict: &Dictionary<T>,
    s: usize,
) -> Result<Decomposition<T>, SparseError> {
    let (idx, amps) = omp(p, dict, s)?;
    Ok(Decomposition {
        sources: idx
            .iter()
            .zip(&amps)
            .map(|(&n, &amplitude)| PointSource {
                position: dict.grid.points[n],
                amplitude,
            })
            .collect(),
        separated: Vec::new(),
        degenerate: false,
    })
}
