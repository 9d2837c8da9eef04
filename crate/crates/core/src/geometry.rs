//! Refraction of rays at a planar interface, back-projection of pixels through
//! the interface, and forward projection of submerged points to pixels.
//!
//! Conventions, used throughout the crate:
//!
//! - The camera sits at the origin of its own frame and looks down `+z`.
//! - An interface plane is `{X : n.X = d}` with unit normal `n` canonically
//!   oriented so `n.z > 0` and depth `d > 0`; the camera side satisfies
//!   `n.X < d`, the medium side `n.X > d`.
//! - `mu` is the refractive index of the medium below the interface relative
//!   to the medium that holds the camera (about 1.333 for air to water), so
//!   Snell's law reads `sin(theta_in) = mu * sin(theta_out)`.
//!
//! Everything here is a pure function; the generic scalar parameter lets the
//! solver evaluate the same formulas with dual numbers to obtain Jacobians.
//! The forward projection contains an inner 1D root solve; its derivative is
//! obtained by implicit differentiation of the root condition rather than by
//! differentiating through solver iterations (see [`RefractionScalar`]).

use nalgebra::{Unit, Vector2, Vector3};
use thiserror::Error;

use crate::math::{axpy3, dot3, lift3, normalize3, scale3, sub3, Jet, Real};

pub type UnitVec3 = Unit<Vector3<f64>>;

/// Incidence cosines below this are treated as grazing and rejected；the
/// Jacobians of the refracted direction blow up as the cosine goes to zero.
pub const GRAZING_COS_MIN: f64 = 1e-6;

/// Rays closer than this to parallel with the interface cannot be intersected.
pub const RAY_PLANE_MIN_DOT: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("total internal reflection (mu = {mu}, sin(theta_in) = {sin_incident})")]
    TotalInternalReflection { mu: f64, sin_incident: f64 },
    #[error("ray is parallel to the interface plane")]
    RayParallelToPlane,
    #[error("ray meets the interface plane behind the camera")]
    BehindCamera,
    #[error("grazing incidence: |incident.normal| below {GRAZING_COS_MIN}")]
    GrazingIncidence,
    #[error("no valid refraction point on the interface")]
    NoValidRefractionPoint,
    #[error("invalid parameter: {0}")]
    InvalidParameter(&'static str),
}

/// Pinhole projection parameters mapping metric rays to pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self, GeometryError> {
        if !(fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite())
            || !cx.is_finite()
            || !cy.is_finite()
        {
            return Err(GeometryError::InvalidParameter(
                "focal lengths must be positive and finite",
            ));
        }
        Ok(CameraIntrinsics { fx, fy, cx, cy })
    }

    /// Unit direction in the camera frame whose projection is `p`.
    pub fn pixel_to_ray(&self, p: &Vector2<f64>) -> UnitVec3 {
        Unit::new_normalize(Vector3::new(
            (p.x - self.cx) / self.fx,
            (p.y - self.cy) / self.fy,
            1.0,
        ))
    }

    /// Pixel of a camera-frame direction (any positive scaling of it).
    pub fn ray_to_pixel<T: Real>(&self, v: &Vector3<T>) -> Result<Vector2<T>, GeometryError> {
        if v.z.value() <= 0.0 {
            return Err(GeometryError::BehindCamera);
        }
        Ok(Vector2::new(
            v.x / v.z * T::from_f64(self.fx) + T::from_f64(self.cx),
            v.y / v.z * T::from_f64(self.fy) + T::from_f64(self.cy),
        ))
    }
}

/// Relative refractive index of the medium below the interface.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefractiveIndex(f64);

impl RefractiveIndex {
    pub fn new(mu: f64) -> Result<Self, GeometryError> {
        if mu > 0.0 && mu.is_finite() {
            Ok(RefractiveIndex(mu))
        } else {
            Err(GeometryError::InvalidParameter(
                "refractive index must be positive and finite",
            ))
        }
    }

    pub fn get(&self) -> f64 {
        self.0
    }
}

/// Per-image planar interface in the camera frame: `{X : normal.X = depth}`.
///
/// Construction canonicalizes the normal to point away from the camera
/// (`normal.z > 0`); the paper leaves the orientation unstated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InterfacePlane {
    normal: UnitVec3,
    depth: f64,
}

impl InterfacePlane {
    pub fn new(normal: Vector3<f64>, depth: f64) -> Result<Self, GeometryError> {
        if !(depth > 0.0 && depth.is_finite()) {
            return Err(GeometryError::InvalidParameter(
                "interface depth must be positive and finite",
            ));
        }
        let n = normal.norm();
        if !(n > 0.0 && n.is_finite()) {
            return Err(GeometryError::InvalidParameter(
                "interface normal must be a nonzero finite vector",
            ));
        }
        let mut unit = normal / n;
        if unit.z.abs() < RAY_PLANE_MIN_DOT {
            return Err(GeometryError::InvalidParameter(
                "interface plane contains the optical axis",
            ));
        }
        if unit.z < 0.0 {
            unit = -unit;
        }
        Ok(InterfacePlane {
            normal: Unit::new_unchecked(unit),
            depth,
        })
    }

    pub fn normal(&self) -> &UnitVec3 {
        &self.normal
    }

    pub fn depth(&self) -> f64 {
        self.depth
    }
}

/// A ray with unit direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub direction: UnitVec3,
}

/// Interface plane with generic scalar entries, for solver-side evaluation.
#[derive(Debug, Clone, Copy)]
pub struct PlaneG<T: Real> {
    pub normal: Vector3<T>,
    pub depth: T,
}

impl PlaneG<f64> {
    pub fn from_plane(p: &InterfacePlane) -> Self {
        PlaneG {
            normal: p.normal.into_inner(),
            depth: p.depth,
        }
    }
}

/// Bends `incident` (unit, travelling towards the interface) at a surface with
/// the given unit normal. The normal may be supplied with either orientation;
/// it is flipped internally so it opposes the incident direction.
pub fn refract_direction_g<T: Real>(
    incident: &Vector3<T>,
    surface_normal: &Vector3<T>,
    mu: f64,
) -> Result<Vector3<T>, GeometryError> {
    let mut m = *surface_normal;
    let mut c = dot3(incident, &m);
    if c.value() > 0.0 {
        m = scale3(&m, -T::one());
        c = -c;
    }
    let cos_in = -c;
    if cos_in.value() < GRAZING_COS_MIN {
        return Err(GeometryError::GrazingIncidence);
    }
    let eta = 1.0 / mu;
    let sin2_out = T::one() - T::from_f64(eta * eta) * (T::one() - cos_in * cos_in);
    if sin2_out.value() < 0.0 {
        let sin_incident = (1.0 - cos_in.value() * cos_in.value()).max(0.0).sqrt();
        return Err(GeometryError::TotalInternalReflection { mu, sin_incident });
    }
    let cos_out = sin2_out.sqrt();
    let t = axpy3(
        &scale3(incident, T::from_f64(eta)),
        &m,
        T::from_f64(eta) * cos_in - cos_out,
    );
    // |t| = 1 analytically; renormalize to keep the invariant watertight.
    Ok(normalize3(&t))
}

/// Intersection of the ray `t * dir`, `t > 0`, with a generic-scalar plane.
pub fn intersect_ray_plane_g<T: Real>(
    dir: &Vector3<T>,
    plane: &PlaneG<T>,
) -> Result<Vector3<T>, GeometryError> {
    let denom = dot3(dir, &plane.normal);
    if denom.value().abs() <= RAY_PLANE_MIN_DOT {
        return Err(GeometryError::RayParallelToPlane);
    }
    let t = plane.depth / denom;
    if t.value() <= 0.0 {
        return Err(GeometryError::BehindCamera);
    }
    Ok(scale3(dir, t))
}

/// Back-projects a pixel ray through the interface: returns the interface
/// intersection point and the refracted unit direction.
///
/// The intersection uses the plane parameters while the bending uses the
/// per-observation local normal; under the hard constraint the two coincide.
pub fn back_project_ray_g<T: Real>(
    pixel_ray: &Vector3<f64>,
    plane: &PlaneG<T>,
    local_normal: &Vector3<T>,
    mu: f64,
) -> Result<(Vector3<T>, Vector3<T>), GeometryError> {
    let dir = lift3::<T>(pixel_ray);
    let origin = intersect_ray_plane_g(&dir, plane)?;
    let refracted = refract_direction_g(&dir, local_normal, mu)?;
    Ok((origin, refracted))
}

/// Full back-projection: interface point plus `depth_after` along the
/// refracted direction.
pub fn back_project_g<T: Real>(
    pixel_ray: &Vector3<f64>,
    depth_after: T,
    plane: &PlaneG<T>,
    local_normal: &Vector3<T>,
    mu: f64,
) -> Result<Vector3<T>, GeometryError> {
    let (origin, refracted) = back_project_ray_g(pixel_ray, plane, local_normal, mu)?;
    Ok(axpy3(&origin, &refracted, depth_after))
}

/// Residual of the planar refraction-point condition.
///
/// With the camera at distance `h1` above the plane, the target point at
/// depth `h2` below it and lateral offset `x_p`, a refraction point at lateral
/// offset `x` satisfies Snell's law iff
/// `g(x) = x/sqrt(x^2+h1^2) - mu*(x_p-x)/sqrt((x_p-x)^2+h2^2) = 0`.
/// `g` is strictly increasing with `g(0) <= 0 <= g(x_p)`, so the physical
/// root is unique and bracketed by `[0, x_p]`.
fn refraction_point_residual<T: Real>(x: T, x_p: T, h1: T, h2: T, mu: f64) -> T {
    let sin_in = x / (x * x + h1 * h1).sqrt();
    let r = x_p - x;
    let sin_out = r / (r * r + h2 * h2).sqrt();
    sin_in - T::from_f64(mu) * sin_out
}

/// d/dx of [`refraction_point_residual`]; strictly positive on the bracket.
fn refraction_point_slope(x: f64, x_p: f64, h1: f64, h2: f64, mu: f64) -> f64 {
    let a = x * x + h1 * h1;
    let r = x_p - x;
    let b = r * r + h2 * h2;
    h1 * h1 / (a * a.sqrt()) + mu * h2 * h2 / (b * b.sqrt())
}

/// Safeguarded Newton on the bracketed refraction-point condition.
fn solve_refraction_root(x_p: f64, h1: f64, h2: f64, mu: f64) -> Option<f64> {
    if !(x_p >= 0.0 && h1 > 0.0 && h2 > 0.0 && mu > 0.0)
        || !(x_p.is_finite() && h1.is_finite() && h2.is_finite())
    {
        return None;
    }
    if x_p == 0.0 {
        return Some(0.0);
    }
    let mut lo = 0.0;
    let mut hi = x_p;
    // Straight-line (mu = 1) crossing as the initial guess.
    let mut x = x_p * h1 / (h1 + h2);
    for _ in 0..100 {
        let g = refraction_point_residual(x, x_p, h1, h2, mu);
        if g.abs() < 1e-15 {
            // One polishing step pins the root to machine precision, so the
            // solver's termination threshold never shows up as evaluation
            // noise downstream.
            let polished = x - g / refraction_point_slope(x, x_p, h1, h2, mu);
            if polished > lo && polished < hi {
                x = polished;
            }
            return Some(x);
        }
        if g > 0.0 {
            hi = x;
        } else {
            lo = x;
        }
        let slope = refraction_point_slope(x, x_p, h1, h2, mu);
        let mut next = x - g / slope;
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - x).abs() <= f64::EPSILON * x_p {
            x = next;
            break;
        }
        x = next;
    }
    if refraction_point_residual(x, x_p, h1, h2, mu).abs() < 1e-10 {
        Some(x)
    } else {
        None
    }
}

/// Scalars on which the refraction-point solve is defined.
///
/// The `f64` implementation runs the safeguarded Newton solver. The [`Jet`]
/// implementation solves on value parts and then applies the implicit function
/// theorem to the root condition `g(x, params) = 0`, giving
/// `dx = -(dg/dx)^-1 * dg/dparams`; derivatives never see solver iterations.
pub trait RefractionScalar: Real {
    fn refraction_root(x_p: Self, h1: Self, h2: Self, mu: f64) -> Option<Self>;
}

impl RefractionScalar for f64 {
    fn refraction_root(x_p: Self, h1: Self, h2: Self, mu: f64) -> Option<Self> {
        solve_refraction_root(x_p, h1, h2, mu)
    }
}

impl<const N: usize> RefractionScalar for Jet<N> {
    fn refraction_root(x_p: Self, h1: Self, h2: Self, mu: f64) -> Option<Self> {
        let x = solve_refraction_root(x_p.v, h1.v, h2.v, mu)?;
        let slope = refraction_point_slope(x, x_p.v, h1.v, h2.v, mu);
        let g = refraction_point_residual(Jet::constant(x), x_p, h1, h2, mu);
        Some(Jet {
            v: x,
            d: g.d * (-1.0 / slope),
        })
    }
}

/// Projects a camera-frame point on the medium side of the interface to the
/// pixel that observes it through the (perfectly planar) interface.
pub fn forward_project_flat_g<T: RefractionScalar>(
    point_cam: &Vector3<T>,
    plane: &PlaneG<T>,
    mu: f64,
    k: &CameraIntrinsics,
) -> Result<Vector2<T>, GeometryError> {
    if plane.depth.value() <= 0.0 {
        return Err(GeometryError::InvalidParameter(
            "interface depth must be positive",
        ));
    }
    let pn = dot3(point_cam, &plane.normal);
    let h2 = pn - plane.depth;
    if h2.value() <= 0.0 {
        return Err(GeometryError::NoValidRefractionPoint);
    }
    let lateral = sub3(point_cam, &scale3(&plane.normal, pn));
    let lat2 = dot3(&lateral, &lateral);
    if lat2.value() < 1e-24 {
        // On-axis point: the ray is not bent.
        return k.ray_to_pixel(&normalize3(point_cam));
    }
    let x_p = lat2.sqrt();
    let u = scale3(&lateral, T::one() / x_p);
    let x = T::refraction_root(x_p, plane.depth, h2, mu)
        .ok_or(GeometryError::NoValidRefractionPoint)?;
    let refraction_point = axpy3(&scale3(&plane.normal, plane.depth), &u, x);
    k.ray_to_pixel(&refraction_point)
}

// f64 entry points in terms of the crate's domain types.

/// See [`refract_direction_g`]; checks and returns unit vectors.
pub fn refract_direction(
    incident: &UnitVec3,
    surface_normal: &UnitVec3,
    mu: RefractiveIndex,
) -> Result<UnitVec3, GeometryError> {
    refract_direction_g(incident.as_ref(), surface_normal.as_ref(), mu.get())
        .map(Unit::new_normalize)
}

/// Intersection of the pixel's line of sight with the interface plane.
pub fn intersect_plane(
    pixel: &Vector2<f64>,
    k: &CameraIntrinsics,
    plane: &InterfacePlane,
) -> Result<Vector3<f64>, GeometryError> {
    let ray = k.pixel_to_ray(pixel);
    intersect_ray_plane_g(ray.as_ref(), &PlaneG::from_plane(plane))
}

/// Back-projection of a pixel to the 3D point at `depth_after` beyond the
/// interface along the refracted line of sight.
pub fn back_project(
    pixel: &Vector2<f64>,
    depth_after: f64,
    plane: &InterfacePlane,
    local_normal: &UnitVec3,
    mu: RefractiveIndex,
    k: &CameraIntrinsics,
) -> Result<Vector3<f64>, GeometryError> {
    let ray = k.pixel_to_ray(pixel);
    back_project_g(
        ray.as_ref(),
        depth_after,
        &PlaneG::from_plane(plane),
        local_normal.as_ref(),
        mu.get(),
    )
}

/// Refracted line of sight of a pixel: origin on the interface, unit direction
/// into the medium.
pub fn back_project_ray(
    pixel: &Vector2<f64>,
    plane: &InterfacePlane,
    local_normal: &UnitVec3,
    mu: RefractiveIndex,
    k: &CameraIntrinsics,
) -> Result<Ray, GeometryError> {
    let ray = k.pixel_to_ray(pixel);
    let (origin, dir) = back_project_ray_g(
        ray.as_ref(),
        &PlaneG::from_plane(plane),
        local_normal.as_ref(),
        mu.get(),
    )?;
    Ok(Ray {
        origin,
        direction: Unit::new_normalize(dir),
    })
}

/// See [`forward_project_flat_g`].
pub fn forward_project_flat(
    point_cam: &Vector3<f64>,
    plane: &InterfacePlane,
    mu: RefractiveIndex,
    k: &CameraIntrinsics,
) -> Result<Vector2<f64>, GeometryError> {
    forward_project_flat_g(point_cam, &PlaneG::from_plane(plane), mu.get(), k)
}

/// Unit normal that bends `incident` into `refracted` under Snell's law.
///
/// Both arguments are unit directions of travel (camera towards medium). The
/// returned normal points towards the camera side. Used by the simulator to
/// express exact wavy-surface renderings in the per-observation normal model.
pub fn normal_from_refraction(
    incident: &Vector3<f64>,
    refracted: &Vector3<f64>,
    mu: f64,
) -> UnitVec3 {
    let eta = 1.0 / mu;
    let m = incident * eta - refracted;
    if m.norm() < 1e-12 {
        // Undeviated ray (mu = 1 or normal incidence): normal opposes travel.
        return Unit::new_normalize(-incident);
    }
    Unit::new_normalize(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn k() -> CameraIntrinsics {
        CameraIntrinsics::new(600.0, 600.0, 320.0, 240.0).unwrap()
    }

    const MU_WATER: f64 = 4.0 / 3.0;

    #[test]
    fn normal_incidence_is_unchanged() {
        let incident = Unit::new_normalize(Vector3::new(0.0, 0.0, 1.0));
        let normal = Unit::new_normalize(Vector3::new(0.0, 0.0, -1.0));
        let out = refract_direction(&incident, &normal, RefractiveIndex::new(1.333).unwrap())
            .unwrap();
        assert_relative_eq!(out.into_inner(), Vector3::new(0.0, 0.0, 1.0), epsilon = 1e-15);
    }

    #[test]
    fn unit_index_is_identity() {
        let incident = Unit::new_normalize(Vector3::new(0.2, -0.3, 1.0));
        let normal = Unit::new_normalize(Vector3::new(0.05, 0.02, 1.0));
        let out = refract_direction(&incident, &normal, RefractiveIndex::new(1.0).unwrap())
            .unwrap();
        assert_relative_eq!(out.into_inner(), incident.into_inner(), epsilon = 1e-14);
    }

    #[test]
    fn snell_at_45_degrees() {
        // Closed-form oracle: theta_out = asin(sin(45 deg) / mu).
        let incident = Unit::new_normalize(Vector3::new(1.0, 0.0, 1.0));
        let normal = Unit::new_normalize(Vector3::new(0.0, 0.0, 1.0));
        let mu = 1.333;
        let out = refract_direction(&incident, &normal, RefractiveIndex::new(mu).unwrap())
            .unwrap();
        let theta_out = out.z.acos();
        let expected = (std::f64::consts::FRAC_PI_4.sin() / mu).asin();
        assert_relative_eq!(theta_out, expected, epsilon = 1e-12);
        // Same plane of incidence: no y component.
        assert!(out.y.abs() < 1e-15);
        assert!(out.x > 0.0);
    }

    #[test]
    fn total_internal_reflection_detected() {
        // mu < 1 means the lower medium is less dense; steep incidence fails.
        let incident = Unit::new_normalize(Vector3::new(1.0, 0.0, 0.4));
        let normal = Unit::new_normalize(Vector3::new(0.0, 0.0, 1.0));
        let err = refract_direction(&incident, &normal, RefractiveIndex::new(0.75).unwrap())
            .unwrap_err();
        assert!(matches!(err, GeometryError::TotalInternalReflection { .. }));
    }

    #[test]
    fn grazing_incidence_rejected() {
        let incident = Unit::new_normalize(Vector3::new(1.0, 0.0, 1e-9));
        let normal = Unit::new_normalize(Vector3::new(0.0, 0.0, 1.0));
        let err = refract_direction(&incident, &normal, RefractiveIndex::new(1.333).unwrap())
            .unwrap_err();
        assert_eq!(err, GeometryError::GrazingIncidence);
    }

    #[test]
    fn snell_residual_and_coplanarity_randomized() {
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..2000 {
            let incident = Unit::new_normalize(Vector3::new(
                rng.random_range(-0.7..0.7),
                rng.random_range(-0.7..0.7),
                1.0,
            ));
            let normal = Unit::new_normalize(Vector3::new(
                rng.random_range(-0.3..0.3),
                rng.random_range(-0.3..0.3),
                1.0,
            ));
            let mu = rng.random_range(1.0..1.8);
            let out = refract_direction(&incident, &normal, RefractiveIndex::new(mu).unwrap())
                .unwrap();
            let sin_in = incident.cross(&normal).norm();
            let sin_out = out.cross(&normal).norm();
            assert!((sin_in - mu * sin_out).abs() <= 1e-12);
            // Coplanar: triple product vanishes.
            let triple = incident.cross(&normal).dot(&out);
            assert!(triple.abs() <= 1e-12);
            assert_relative_eq!(out.norm(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn principal_point_maps_to_axis() {
        let ray = k().pixel_to_ray(&Vector2::new(320.0, 240.0));
        assert_relative_eq!(ray.into_inner(), Vector3::new(0.0, 0.0, 1.0), epsilon = 1e-15);
        let ray = k().pixel_to_ray(&Vector2::new(320.0 + 600.0, 240.0));
        assert_relative_eq!(
            ray.into_inner(),
            Vector3::new(1.0, 0.0, 1.0).normalize(),
            epsilon = 1e-15
        );
    }

    #[test]
    fn pixel_ray_round_trip() {
        let mut rng = StdRng::seed_from_u64(3);
        for _ in 0..200 {
            let p = Vector2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
            let ray = k().pixel_to_ray(&p);
            let back = k().ray_to_pixel(ray.as_ref()).unwrap();
            assert_relative_eq!(back, p, epsilon = 1e-12);
        }
    }

    #[test]
    fn axial_plane_intersections() {
        let plane = InterfacePlane::new(Vector3::new(0.0, 0.0, 1.0), 1.0).unwrap();
        let p = intersect_plane(&Vector2::new(320.0, 240.0), &k(), &plane).unwrap();
        assert_relative_eq!(p, Vector3::new(0.0, 0.0, 1.0), epsilon = 1e-15);
        let plane2 = InterfacePlane::new(Vector3::new(0.0, 0.0, 1.0), 2.0).unwrap();
        let p2 = intersect_plane(&Vector2::new(320.0, 240.0), &k(), &plane2).unwrap();
        assert_relative_eq!(p2, Vector3::new(0.0, 0.0, 2.0), epsilon = 1e-15);
    }

    #[test]
    fn oblique_intersection_lies_on_plane_and_ray() {
        let plane = InterfacePlane::new(Vector3::new(0.15, -0.1, 1.0), 1.3).unwrap();
        let pixel = Vector2::new(410.0, 150.0);
        let p = intersect_plane(&pixel, &k(), &plane).unwrap();
        assert!((p.dot(plane.normal()) - plane.depth()).abs() <= 1e-12 * plane.depth());
        let ray = k().pixel_to_ray(&pixel);
        assert!(p.cross(&ray).norm() <= 1e-12 * p.norm());
    }

    #[test]
    fn normal_canonicalization_flips_downward_normals() {
        let a = InterfacePlane::new(Vector3::new(0.1, 0.2, -1.0), 1.0).unwrap();
        assert!(a.normal().z > 0.0);
        let b = InterfacePlane::new(Vector3::new(-0.1, -0.2, 1.0), 1.0).unwrap();
        assert_relative_eq!(
            a.normal().into_inner(),
            b.normal().into_inner(),
            epsilon = 1e-15
        );
    }

    #[test]
    fn back_project_zero_depth_is_interface_point() {
        let plane = InterfacePlane::new(Vector3::new(0.1, 0.0, 1.0), 1.1).unwrap();
        let pixel = Vector2::new(250.0, 300.0);
        let mu = RefractiveIndex::new(1.333).unwrap();
        let bp = back_project(&pixel, 0.0, &plane, plane.normal(), mu, &k()).unwrap();
        let ip = intersect_plane(&pixel, &k(), &plane).unwrap();
        assert_relative_eq!(bp, ip, epsilon = 1e-14);
    }

    #[test]
    fn back_project_unit_index_is_collinear_with_pixel_ray() {
        let plane = InterfacePlane::new(Vector3::new(0.0, 0.0, 1.0), 1.0).unwrap();
        let pixel = Vector2::new(400.0, 200.0);
        let mu = RefractiveIndex::new(1.0).unwrap();
        let bp = back_project(&pixel, 0.7, &plane, plane.normal(), mu, &k()).unwrap();
        let ray = k().pixel_to_ray(&pixel);
        assert!(bp.cross(&ray).norm() <= 1e-12 * bp.norm());
    }

    #[test]
    fn back_project_ray_consistency() {
        let plane = InterfacePlane::new(Vector3::new(-0.05, 0.12, 1.0), 0.9).unwrap();
        let pixel = Vector2::new(500.0, 333.0);
        let mu = RefractiveIndex::new(1.333).unwrap();
        let normal = Unit::new_normalize(Vector3::new(0.02, 0.1, 1.0));
        let ray = back_project_ray(&pixel, &plane, &normal, mu, &k()).unwrap();
        assert!((ray.origin.dot(plane.normal()) - plane.depth()).abs() <= 1e-12);
        for d in [0.5, 1.0, 2.0] {
            let p = back_project(&pixel, d, &plane, &normal, mu, &k()).unwrap();
            let expect = ray.origin + ray.direction.into_inner() * d;
            assert_relative_eq!(p, expect, epsilon = 1e-13);
        }
    }

    #[test]
    fn axial_forward_projection_hits_principal_point() {
        let plane = InterfacePlane::new(Vector3::new(0.0, 0.0, 1.0), 1.0).unwrap();
        let mu = RefractiveIndex::new(1.333).unwrap();
        let p = forward_project_flat(&Vector3::new(0.0, 0.0, 2.5), &plane, mu, &k()).unwrap();
        assert_relative_eq!(p, Vector2::new(320.0, 240.0), epsilon = 1e-12);
    }

    #[test]
    fn unit_index_forward_projection_is_pinhole() {
        let plane = InterfacePlane::new(Vector3::new(0.1, -0.2, 1.0), 1.0).unwrap();
        let mu = RefractiveIndex::new(1.0).unwrap();
        let point = Vector3::new(0.4, 0.2, 2.0);
        let p = forward_project_flat(&point, &plane, mu, &k()).unwrap();
        let pinhole = k().ray_to_pixel(&point).unwrap();
        assert_relative_eq!(p, pinhole, epsilon = 1e-9);
    }

    /// Bisection-only root solve, independent of the production Newton path.
    fn bisection_forward_project(
        point: &Vector3<f64>,
        plane: &InterfacePlane,
        mu: f64,
        k: &CameraIntrinsics,
    ) -> Vector2<f64> {
        let n = plane.normal().into_inner();
        let pn = point.dot(&n);
        let h1 = plane.depth();
        let h2 = pn - h1;
        let lateral = point - n * pn;
        let x_p = lateral.norm();
        if x_p < 1e-15 {
            return k.ray_to_pixel(&point.normalize()).unwrap();
        }
        let u = lateral / x_p;
        let g = |x: f64| refraction_point_residual(x, x_p, h1, h2, mu);
        let (mut lo, mut hi) = (0.0, x_p);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if g(mid) > 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        let x = 0.5 * (lo + hi);
        k.ray_to_pixel(&(n * h1 + u * x)).unwrap()
    }

    #[test]
    fn forward_projection_matches_bisection_oracle() {
        let mut rng = StdRng::seed_from_u64(11);
        for _ in 0..500 {
            let plane = InterfacePlane::new(
                Vector3::new(
                    rng.random_range(-0.3..0.3),
                    rng.random_range(-0.3..0.3),
                    1.0,
                ),
                rng.random_range(0.5..1.5),
            )
            .unwrap();
            let n = plane.normal().into_inner();
            let point = loop {
                let p = Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(1.5..3.5),
                );
                if p.dot(&n) > plane.depth() + 0.2 {
                    break p;
                }
            };
            let mu = rng.random_range(1.0..1.8);
            let got =
                forward_project_flat(&point, &plane, RefractiveIndex::new(mu).unwrap(), &k())
                    .unwrap();
            let want = bisection_forward_project(&point, &plane, mu, &k());
            assert_relative_eq!(got, want, epsilon = 1e-7);
        }
    }

    #[test]
    fn forward_back_round_trip() {
        let mut rng = StdRng::seed_from_u64(23);
        let mu = RefractiveIndex::new(MU_WATER).unwrap();
        for _ in 0..1000 {
            let plane = InterfacePlane::new(
                Vector3::new(
                    rng.random_range(-0.35..0.35),
                    rng.random_range(-0.35..0.35),
                    1.0,
                ),
                rng.random_range(0.6..1.4),
            )
            .unwrap();
            let pixel = Vector2::new(rng.random_range(40.0..600.0), rng.random_range(40.0..440.0));
            let d = rng.random_range(0.3..2.0);
            let p = back_project(&pixel, d, &plane, plane.normal(), mu, &k()).unwrap();
            let back = forward_project_flat(&p, &plane, mu, &k()).unwrap();
            assert!(
                (back - pixel).norm() <= 1e-6,
                "round trip error {}",
                (back - pixel).norm()
            );
        }
    }

    #[test]
    fn point_not_beyond_interface_is_rejected() {
        let plane = InterfacePlane::new(Vector3::new(0.0, 0.0, 1.0), 1.0).unwrap();
        let mu = RefractiveIndex::new(1.333).unwrap();
        let err =
            forward_project_flat(&Vector3::new(0.2, 0.1, 0.8), &plane, mu, &k()).unwrap_err();
        assert_eq!(err, GeometryError::NoValidRefractionPoint);
    }

    #[test]
    fn forward_projection_jacobian_matches_finite_differences() {
        // Continuity/differentiability away from grazing incidence.
        let mu = MU_WATER;
        let plane = InterfacePlane::new(Vector3::new(0.12, -0.08, 1.0), 1.1).unwrap();
        let point = Vector3::new(0.5, -0.3, 2.2);
        let plane_g = PlaneG {
            normal: lift3::<Jet<3>>(&plane.normal().into_inner()),
            depth: Jet::constant(plane.depth()),
        };
        let pj = Vector3::new(
            Jet::<3>::variable(point.x, 0),
            Jet::<3>::variable(point.y, 1),
            Jet::<3>::variable(point.z, 2),
        );
        let proj = forward_project_flat_g(&pj, &plane_g, mu, &k()).unwrap();

        let h = 1e-6;
        for axis in 0..3 {
            let mut dp = Vector3::zeros();
            dp[axis] = h;
            let plus = forward_project_flat(
                &(point + dp),
                &plane,
                RefractiveIndex::new(mu).unwrap(),
                &k(),
            )
            .unwrap();
            let minus = forward_project_flat(
                &(point - dp),
                &plane,
                RefractiveIndex::new(mu).unwrap(),
                &k(),
            )
            .unwrap();
            let fd = (plus - minus) / (2.0 * h);
            for row in 0..2 {
                let ad = proj[row].d[axis];
                let denom = ad.abs().max(fd[row].abs()).max(1e-8);
                assert!(
                    ((ad - fd[row]) / denom).abs() < 1e-5,
                    "axis {axis} row {row}: ad {ad} fd {}",
                    fd[row]
                );
            }
        }
    }

    #[test]
    fn normal_from_refraction_inverts_refract() {
        let mut rng = StdRng::seed_from_u64(41);
        for _ in 0..300 {
            let incident = Unit::new_normalize(Vector3::new(
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                1.0,
            ));
            let normal = Unit::new_normalize(Vector3::new(
                rng.random_range(-0.2..0.2),
                rng.random_range(-0.2..0.2),
                1.0,
            ));
            let mu = RefractiveIndex::new(MU_WATER).unwrap();
            let out = refract_direction(&incident, &normal, mu).unwrap();
            let recovered = normal_from_refraction(&incident, &out, MU_WATER);
            // Same axis up to sign.
            let cosang = recovered.dot(&normal).abs();
            assert!(cosang > 1.0 - 1e-12, "cos angle {cosang}");
        }
    }
}
