//! Axis-angle rotation helpers shared by poses and unit-normal charts.

use nalgebra::{Matrix3, Rotation3, Vector3};

use super::{axpy3, cross3, dot3, scale3, Real};

/// Rotation matrix of an axis-angle vector (angle = vector norm, radians).
pub fn rotation_matrix(axis_angle: &Vector3<f64>) -> Matrix3<f64> {
    Rotation3::from_scaled_axis(*axis_angle).into_inner()
}

/// Axis-angle vector of a rotation matrix, with angle in `[0, pi]`.
///
/// The input must already be a rotation (all callers pass products of
/// rotations); skipping nalgebra's iterative re-orthonormalization keeps the
/// map deterministic to machine precision.
pub fn log_rotation(m: &Matrix3<f64>) -> Vector3<f64> {
    Rotation3::from_matrix_unchecked(*m).scaled_axis()
}

/// Wraps an axis-angle vector so its magnitude stays below pi.
pub fn canonical_axis_angle(axis_angle: &Vector3<f64>) -> Vector3<f64> {
    log_rotation(&rotation_matrix(axis_angle))
}

/// Applies `Exp(aa)` to `v` for small `aa` (third-order series).
///
/// Used for the optimizer's local rotation increments, which are evaluated at
/// zero; the truncation error is O(|aa|^4) and the derivative at zero is exact.
pub fn rotate_small<T: Real>(aa: &Vector3<T>, v: &Vector3<T>) -> Vector3<T> {
    let c1 = cross3(aa, v);
    let c2 = cross3(aa, &c1);
    let c3 = cross3(aa, &c2);
    let half = T::from_f64(0.5);
    let sixth = T::from_f64(1.0 / 6.0);
    axpy3(&axpy3(&axpy3(v, &c1, T::one()), &c2, half), &c3, sixth)
}

/// Orthonormal basis of the plane orthogonal to unit vector `n`.
pub fn tangent_basis(n: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let ax = n.x.abs();
    let ay = n.y.abs();
    let az = n.z.abs();
    let seed = if ax <= ay && ax <= az {
        Vector3::x()
    } else if ay <= az {
        Vector3::y()
    } else {
        Vector3::z()
    };
    let b1 = n.cross(&seed).normalize();
    let b2 = n.cross(&b1);
    (b1, b2)
}

/// Retraction for unit vectors: `normalize(n + b1*t1 + b2*t2)`, generic scalar.
pub fn retract_unit<T: Real>(
    n: &Vector3<f64>,
    b1: &Vector3<f64>,
    b2: &Vector3<f64>,
    t1: T,
    t2: T,
) -> Vector3<T> {
    let p = Vector3::new(
        T::from_f64(n.x) + T::from_f64(b1.x) * t1 + T::from_f64(b2.x) * t2,
        T::from_f64(n.y) + T::from_f64(b1.y) * t1 + T::from_f64(b2.y) * t2,
        T::from_f64(n.z) + T::from_f64(b1.z) * t1 + T::from_f64(b2.z) * t2,
    );
    let inv = T::one() / dot3(&p, &p).sqrt();
    scale3(&p, inv)
}
