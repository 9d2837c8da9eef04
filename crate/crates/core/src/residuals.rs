//! Residuals and total energies of the three cost formulations.
//!
//! Every residual is written once over a generic scalar so the optimizer can
//! evaluate it with dual numbers; the `f64` entry points below feed the same
//! code plain values.

use nalgebra::{Matrix3, Vector2, Vector3};

use crate::geometry::{
    back_project_g, back_project_ray_g, forward_project_flat_g, CameraIntrinsics, GeometryError,
    PlaneG, RefractionScalar, UnitVec3,
};
use crate::math::{
    axpy3, dot3, lift3, mat3_tr_mul, rotate_small, scale3, sub3, Real,
};
use crate::scenarios::{ConstraintMode, Problem};
use crate::state::{ParameterState, PointParams, Pose};

/// World-to-camera transform with the rotation split into a constant base and
/// a small generic increment: `R = R_base * Exp(delta)`.
#[derive(Debug, Clone)]
pub struct PoseEval<T: Real> {
    pub base_r: Matrix3<f64>,
    pub delta_r: Vector3<T>,
    pub t: Vector3<T>,
}

impl<T: Real> PoseEval<T> {
    pub fn constant(pose: &Pose) -> Self {
        PoseEval {
            base_r: pose.rotation_matrix(),
            delta_r: Vector3::new(T::zero(), T::zero(), T::zero()),
            t: lift3(&pose.translation),
        }
    }

    pub fn transform(&self, p: &Vector3<T>) -> Vector3<T> {
        let rotated = crate::math::mat3_mul(&self.base_r, &rotate_small(&self.delta_r, p));
        axpy3(&rotated, &self.t, T::one())
    }

    pub fn inverse_rotate(&self, v: &Vector3<T>) -> Vector3<T> {
        let minus = scale3(&self.delta_r, -T::one());
        rotate_small(&minus, &mat3_tr_mul(&self.base_r, v))
    }

    pub fn inverse_transform(&self, p: &Vector3<T>) -> Vector3<T> {
        self.inverse_rotate(&sub3(p, &self.t))
    }
}

/// Below this, the world-frame ray direction's z-component counts as zero and
/// the ray-point residual falls back to the closest-point parameter.
const RAY_Z_MIN: f64 = 1e-6;

/// Reprojection residual of the reference formulation: the reference
/// observation defines the point at depth `d_j`; the residual is its forward
/// projection into image `i` minus the observed pixel.
#[allow(clippy::too_many_arguments)]
pub fn reproj_residual_ref_g<T: RefractionScalar>(
    k: &CameraIntrinsics,
    mu: f64,
    ref_pixel_ray: &Vector3<f64>,
    obs_pixel: &Vector2<f64>,
    pose_i: &PoseEval<T>,
    iface_i: &PlaneG<T>,
    iface_r: &PlaneG<T>,
    d_j: T,
    n_rj: &Vector3<T>,
) -> Result<Vector2<T>, GeometryError> {
    let p_world = back_project_g(ref_pixel_ray, d_j, iface_r, n_rj, mu)?;
    let p_cam = pose_i.transform(&p_world);
    let proj = forward_project_flat_g(&p_cam, iface_i, mu, k)?;
    Ok(Vector2::new(
        proj.x - T::from_f64(obs_pixel.x),
        proj.y - T::from_f64(obs_pixel.y),
    ))
}

/// Reprojection residual of the no-reference formulation: free 3D point,
/// every image treated alike.
pub fn reproj_residual_noref_g<T: RefractionScalar>(
    k: &CameraIntrinsics,
    mu: f64,
    obs_pixel: &Vector2<f64>,
    pose_i: &PoseEval<T>,
    iface_i: &PlaneG<T>,
    p_j: &Vector3<T>,
) -> Result<Vector2<T>, GeometryError> {
    let p_cam = pose_i.transform(p_j);
    let proj = forward_project_flat_g(&p_cam, iface_i, mu, k)?;
    Ok(Vector2::new(
        proj.x - T::from_f64(obs_pixel.x),
        proj.y - T::from_f64(obs_pixel.y),
    ))
}

/// Ray-point distance residual: difference between the reference-defined
/// point and the point generated on image `i`'s refracted ray at the same
/// reference-frame depth (closest point when the ray is depth-degenerate).
/// Scaled by `inv_scale` (one over the reference interface depth) so the soft
/// balancing coefficient is scale-free.
#[allow(clippy::too_many_arguments)]
pub fn ray_point_residual_g<T: Real>(
    mu: f64,
    ref_pixel_ray: &Vector3<f64>,
    obs_pixel_ray: &Vector3<f64>,
    pose_i: &PoseEval<T>,
    iface_i: &PlaneG<T>,
    iface_r: &PlaneG<T>,
    d_j: T,
    n_rj: &Vector3<T>,
    n_ij: &Vector3<T>,
    inv_scale: f64,
) -> Result<Vector3<T>, GeometryError> {
    let p_j = back_project_g(ref_pixel_ray, d_j, iface_r, n_rj, mu)?;
    let (origin_cam, dir_cam) = back_project_ray_g(obs_pixel_ray, iface_i, n_ij, mu)?;
    let origin_w = pose_i.inverse_transform(&origin_cam);
    let dir_w = pose_i.inverse_rotate(&dir_cam);
    let t = if dir_w.z.value().abs() >= RAY_Z_MIN {
        (p_j.z - origin_w.z) / dir_w.z
    } else {
        dot3(&sub3(&p_j, &origin_w), &dir_w)
    };
    let p_ij = axpy3(&origin_w, &dir_w, t);
    Ok(scale3(&sub3(&p_j, &p_ij), T::from_f64(inv_scale)))
}

/// Sum over observations of the squared deviations of each neighborhood's
/// normals from the neighborhood mean. Zero iff every neighborhood is
/// constant.
pub fn soft_regularizer(local_normals: &[UnitVec3], neighborhoods: &[Vec<usize>]) -> f64 {
    let mut total = 0.0;
    for hood in neighborhoods {
        if hood.is_empty() {
            continue;
        }
        let mut mean = Vector3::zeros();
        for &m in hood {
            mean += local_normals[m].into_inner();
        }
        mean /= hood.len() as f64;
        for &m in hood {
            total += (local_normals[m].into_inner() - mean).norm_squared();
        }
    }
    total
}

/// One residual block of the active cost; enumeration order is deterministic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResidualKind {
    /// Reference-mode reprojection of the observation at this index (2D).
    ReprojRef { obs: usize },
    /// No-reference reprojection (2D).
    ReprojNoRef { obs: usize },
    /// Soft-mode ray-point distance (3D).
    RayPoint { obs: usize },
    /// Soft regularizer: deviation of the `member`-th normal of observation
    /// `obs`'s neighborhood from the neighborhood mean, scaled by
    /// sqrt(lambda) (3D).
    SoftReg { obs: usize, member: usize },
}

impl ResidualKind {
    pub fn dim(&self) -> usize {
        match self {
            ResidualKind::ReprojRef { .. } | ResidualKind::ReprojNoRef { .. } => 2,
            ResidualKind::RayPoint { .. } | ResidualKind::SoftReg { .. } => 3,
        }
    }
}

/// All residual blocks of the problem, in evaluation order.
pub fn residual_blocks(problem: &Problem) -> Vec<ResidualKind> {
    let mut blocks = Vec::new();
    match problem.mode {
        ConstraintMode::HardWithRef => {
            let r = problem.anchor();
            for (idx, obs) in problem.tracks.observations().iter().enumerate() {
                if obs.image != r {
                    blocks.push(ResidualKind::ReprojRef { obs: idx });
                }
            }
        }
        ConstraintMode::HardNoRef => {
            for idx in 0..problem.tracks.observations().len() {
                blocks.push(ResidualKind::ReprojNoRef { obs: idx });
            }
        }
        ConstraintMode::Soft => {
            let r = problem.anchor();
            for (idx, obs) in problem.tracks.observations().iter().enumerate() {
                if obs.image != r {
                    blocks.push(ResidualKind::RayPoint { obs: idx });
                }
            }
            if problem.lambda > 0.0 {
                let hoods = problem.neighborhoods().expect("soft mode has neighborhoods");
                for (idx, hood) in hoods.iter().enumerate() {
                    for member in 0..hood.len() {
                        blocks.push(ResidualKind::SoftReg { obs: idx, member });
                    }
                }
            }
        }
    }
    blocks
}

/// Evaluates one block at the given state, plain `f64`.
pub fn eval_block(
    problem: &Problem,
    state: &ParameterState,
    kind: ResidualKind,
) -> Result<Vec<f64>, GeometryError> {
    let k = &problem.intrinsics;
    let mu = state.mu.get();
    let obs_list = problem.tracks.observations();
    match kind {
        ResidualKind::ReprojRef { obs } => {
            let o = &obs_list[obs];
            let r = problem.anchor();
            let ref_idx = problem
                .tracks
                .obs_index(r, o.point)
                .expect("reference observes every point");
            let ref_ray = k.pixel_to_ray(&obs_list[ref_idx].pixel);
            let d_j = match &state.points {
                PointParams::Depths(d) => d[o.point],
                PointParams::Coords(_) => {
                    return Err(GeometryError::InvalidParameter(
                        "reference residual needs depth parameterization",
                    ))
                }
            };
            let n_rj = state.local_normal(ref_idx, r).into_inner();
            let res = reproj_residual_ref_g(
                k,
                mu,
                ref_ray.as_ref(),
                &o.pixel,
                &PoseEval::constant(&state.poses[o.image]),
                &PlaneG::from_plane(&state.interfaces[o.image]),
                &PlaneG::from_plane(&state.interfaces[r]),
                d_j,
                &n_rj,
            )?;
            Ok(vec![res.x, res.y])
        }
        ResidualKind::ReprojNoRef { obs } => {
            let o = &obs_list[obs];
            let p_j = match &state.points {
                PointParams::Coords(p) => p[o.point],
                PointParams::Depths(_) => {
                    return Err(GeometryError::InvalidParameter(
                        "no-reference residual needs coordinate parameterization",
                    ))
                }
            };
            let res = reproj_residual_noref_g(
                k,
                mu,
                &o.pixel,
                &PoseEval::constant(&state.poses[o.image]),
                &PlaneG::from_plane(&state.interfaces[o.image]),
                &p_j,
            )?;
            Ok(vec![res.x, res.y])
        }
        ResidualKind::RayPoint { obs } => {
            let o = &obs_list[obs];
            let r = problem.anchor();
            let ref_idx = problem
                .tracks
                .obs_index(r, o.point)
                .expect("reference observes every point");
            let ref_ray = k.pixel_to_ray(&obs_list[ref_idx].pixel);
            let obs_ray = k.pixel_to_ray(&o.pixel);
            let d_j = match &state.points {
                PointParams::Depths(d) => d[o.point],
                PointParams::Coords(_) => {
                    return Err(GeometryError::InvalidParameter(
                        "ray-point residual needs depth parameterization",
                    ))
                }
            };
            let n_rj = state.local_normal(ref_idx, r).into_inner();
            let n_ij = state.local_normal(obs, o.image).into_inner();
            let res = ray_point_residual_g(
                mu,
                ref_ray.as_ref(),
                obs_ray.as_ref(),
                &PoseEval::constant(&state.poses[o.image]),
                &PlaneG::from_plane(&state.interfaces[o.image]),
                &PlaneG::from_plane(&state.interfaces[r]),
                d_j,
                &n_rj,
                &n_ij,
                1.0 / problem.reference_depth,
            )?;
            Ok(vec![res.x, res.y, res.z])
        }
        ResidualKind::SoftReg { obs, member } => {
            let normals = state
                .local_normals
                .as_ref()
                .expect("soft mode carries local normals");
            let hood = &problem.neighborhoods().expect("soft neighborhoods")[obs];
            let mut mean = Vector3::zeros();
            for &m in hood {
                mean += normals[m].into_inner();
            }
            mean /= hood.len() as f64;
            let dev = (normals[hood[member]].into_inner() - mean) * problem.lambda.sqrt();
            Ok(vec![dev.x, dev.y, dev.z])
        }
    }
}

/// Total energy of the active formulation: the sum of squared residual norms
/// (the soft energy is the ray-point sum plus lambda times the regularizer,
/// realized here through the sqrt(lambda)-scaled regularizer blocks).
pub fn total_energy(problem: &Problem, state: &ParameterState) -> Result<f64, GeometryError> {
    let mut total = 0.0;
    for kind in residual_blocks(problem) {
        for v in eval_block(problem, state, kind)? {
            total += v * v;
        }
    }
    Ok(total)
}
