//! Scalar abstraction for the numeric core.
//!
//! Everything downstream of the geometry and tensor code is generic over
//! [`Scalar`], so the same kernels run in `f32` or `f64`. The concrete
//! aliases live at the crate root; `f64` is the default everywhere.

use std::fmt;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point scalar usable throughout the numeric core.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum<Self> + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    /// Lossy conversion from `f64`; randomness and file formats are always
    /// generated in `f64` and narrowed here.
    fn real(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("finite f64 converts to any Scalar")
    }

    /// Widening conversion back to `f64`.
    fn to_real(self) -> f64 {
        self.to_f64().expect("Scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// 3D point / vector in Cartesian coordinates (meters).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point3<T>(pub [T; 3]);

impl<T: Scalar> Point3<T> {
    pub fn new(x: T, y: T, z: T) -> Self {
        Point3([x, y, z])
    }

    pub fn zero() -> Self {
        Point3([T::zero(); 3])
    }

    pub fn x(&self) -> T {
        self.0[0]
    }

    pub fn y(&self) -> T {
        self.0[1]
    }

    pub fn z(&self) -> T {
        self.0[2]
    }

    pub fn sub(&self, o: &Point3<T>) -> Point3<T> {
        Point3([
            self.0[0] - o.0[0],
            self.0[1] - o.0[1],
            self.0[2] - o.0[2],
        ])
    }

    pub fn add(&self, o: &Point3<T>) -> Point3<T> {
        Point3([
            self.0[0] + o.0[0],
            self.0[1] + o.0[1],
            self.0[2] + o.0[2],
        ])
    }

    pub fn scale(&self, c: T) -> Point3<T> {
        Point3([self.0[0] * c, self.0[1] * c, self.0[2] * c])
    }

    pub fn dot(&self, o: &Point3<T>) -> T {
        self.0[0] * o.0[0] + self.0[1] * o.0[1] + self.0[2] * o.0[2]
    }

    pub fn norm(&self) -> T {
        self.dot(self).sqrt()
    }

    pub fn dist(&self, o: &Point3<T>) -> T {
        self.sub(o).norm()
    }

    /// Squared Euclidean distance.
    pub fn dist2(&self, o: &Point3<T>) -> T {
        let d = self.sub(o);
        d.dot(&d)
    }

    pub fn map_to_f64(&self) -> Point3<f64> {
        Point3([
            self.0[0].to_real(),
            self.0[1].to_real(),
            self.0[2].to_real(),
        ])
    }

    pub fn from_f64(p: Point3<f64>) -> Self {
        Point3([T::real(p.0[0]), T::real(p.0[1]), T::real(p.0[2])])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn point_ops() {
        let a = Point3::new(3.0f64, 0.0, 4.0);
        let b = Point3::zero();
        assert_eq!(a.dist(&b), 5.0);
        assert_eq!(a.scale(2.0).x(), 6.0);
        assert_eq!(a.dot(&a), 25.0);
    }
}
