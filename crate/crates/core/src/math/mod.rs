//! Scalar abstraction and small vector helpers.
//!
//! Geometry and residual code is written once, generically over [`Real`], and
//! evaluated either with plain `f64` (residuals, simulation) or with [`Jet`]
//! (residuals plus exact first derivatives for the solver).

mod jet;
mod rotation;

pub use jet::Jet;
pub use rotation::{
    canonical_axis_angle, log_rotation, retract_unit, rotate_small, rotation_matrix, tangent_basis,
};

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Sub, SubAssign};

use nalgebra::Vector3;

/// Scalar type usable in geometric formulas: `f64` or a dual number.
pub trait Real:
    Copy
    + Clone
    + Debug
    + PartialEq
    + PartialOrd
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    fn from_f64(x: f64) -> Self;
    /// Value part (the derivative payload, if any, is dropped).
    fn value(&self) -> f64;
    fn zero() -> Self {
        Self::from_f64(0.0)
    }
    fn one() -> Self {
        Self::from_f64(1.0)
    }
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn is_finite_value(&self) -> bool {
        self.value().is_finite()
    }
}

impl Real for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn value(&self) -> f64 {
        *self
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn sin(self) -> Self {
        f64::sin(self)
    }
    fn cos(self) -> Self {
        f64::cos(self)
    }
}

/// Dot product without nalgebra's `ClosedMul` bounds.
pub fn dot3<T: Real>(a: &Vector3<T>, b: &Vector3<T>) -> T {
    a.x * b.x + a.y * b.y + a.z * b.z
}

pub fn cross3<T: Real>(a: &Vector3<T>, b: &Vector3<T>) -> Vector3<T> {
    Vector3::new(
        a.y * b.z - a.z * b.y,
        a.z * b.x - a.x * b.z,
        a.x * b.y - a.y * b.x,
    )
}

pub fn norm3<T: Real>(v: &Vector3<T>) -> T {
    dot3(v, v).sqrt()
}

pub fn normalize3<T: Real>(v: &Vector3<T>) -> Vector3<T> {
    let n = norm3(v);
    Vector3::new(v.x / n, v.y / n, v.z / n)
}

pub fn add3<T: Real>(a: &Vector3<T>, b: &Vector3<T>) -> Vector3<T> {
    Vector3::new(a.x + b.x, a.y + b.y, a.z + b.z)
}

pub fn sub3<T: Real>(a: &Vector3<T>, b: &Vector3<T>) -> Vector3<T> {
    Vector3::new(a.x - b.x, a.y - b.y, a.z - b.z)
}

pub fn scale3<T: Real>(v: &Vector3<T>, s: T) -> Vector3<T> {
    Vector3::new(v.x * s, v.y * s, v.z * s)
}

/// `a + b * s`.
pub fn axpy3<T: Real>(a: &Vector3<T>, b: &Vector3<T>, s: T) -> Vector3<T> {
    Vector3::new(a.x + b.x * s, a.y + b.y * s, a.z + b.z * s)
}

/// Multiply a constant `f64` matrix by a generic-scalar vector.
pub fn mat3_mul<T: Real>(m: &nalgebra::Matrix3<f64>, v: &Vector3<T>) -> Vector3<T> {
    let c = |r: usize| {
        v.x * T::from_f64(m[(r, 0)]) + v.y * T::from_f64(m[(r, 1)]) + v.z * T::from_f64(m[(r, 2)])
    };
    Vector3::new(c(0), c(1), c(2))
}

/// Multiply the transpose of a constant `f64` matrix by a generic-scalar vector.
pub fn mat3_tr_mul<T: Real>(m: &nalgebra::Matrix3<f64>, v: &Vector3<T>) -> Vector3<T> {
    let c = |r: usize| {
        v.x * T::from_f64(m[(0, r)]) + v.y * T::from_f64(m[(1, r)]) + v.z * T::from_f64(m[(2, r)])
    };
    Vector3::new(c(0), c(1), c(2))
}

/// Lift a constant `f64` vector into the generic scalar type.
pub fn lift3<T: Real>(v: &Vector3<f64>) -> Vector3<T> {
    Vector3::new(T::from_f64(v.x), T::from_f64(v.y), T::from_f64(v.z))
}
