//! Pinhole pose recovery from 3D-2D correspondences: linear DLT start,
//! 6-dof Gauss-Newton/LM polish on the pixel reprojection error.

use nalgebra::{DMatrix, Matrix3, SMatrix, SVector, Vector2, Vector3};

use crate::geometry::CameraIntrinsics;
use crate::math::{mat3_mul, rotate_small, Jet};
use crate::state::Pose;

/// Linear pose from >= 6 correspondences (normalized coordinates are built
/// internally). Returns `None` on rank deficiency.
fn dlt_pose(
    points: &[Vector3<f64>],
    pixels: &[Vector2<f64>],
    k: &CameraIntrinsics,
) -> Option<Pose> {
    let n = points.len();
    if n < 6 {
        return None;
    }
    let mut a = DMatrix::<f64>::zeros(2 * n, 12);
    for (i, (x, p)) in points.iter().zip(pixels.iter()).enumerate() {
        let u = (p.x - k.cx) / k.fx;
        let v = (p.y - k.cy) / k.fy;
        let xt = [x.x, x.y, x.z, 1.0];
        for c in 0..4 {
            a[(2 * i, c)] = xt[c];
            a[(2 * i, 8 + c)] = -u * xt[c];
            a[(2 * i + 1, 4 + c)] = xt[c];
            a[(2 * i + 1, 8 + c)] = -v * xt[c];
        }
    }
    let svd = (a.transpose() * &a).symmetric_eigen();
    let min_idx = svd
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|x, y| x.1.partial_cmp(y.1).unwrap_or(std::cmp::Ordering::Equal))?
        .0;
    let m = svd.eigenvectors.column(min_idx);
    let mut proj = SMatrix::<f64, 3, 4>::from_fn(|r, c| m[4 * r + c]);
    // Fix the global sign so depths come out positive for the majority.
    let mut pos = 0usize;
    for x in points {
        let z = proj[(2, 0)] * x.x + proj[(2, 1)] * x.y + proj[(2, 2)] * x.z + proj[(2, 3)];
        if z > 0.0 {
            pos += 1;
        }
    }
    if pos * 2 < n {
        proj = -proj;
    }
    // Orthogonal Procrustes on the rotation part, common scale for t.
    let a3 = proj.fixed_view::<3, 3>(0, 0).into_owned();
    let svd3 = a3.svd(true, true);
    let (u3, v3t) = (svd3.u?, svd3.v_t?);
    let mut r = u3 * v3t;
    if r.determinant() < 0.0 {
        let mut u_fix = u3;
        u_fix.column_mut(2).neg_mut();
        r = u_fix * v3t;
    }
    let scale = 3.0 / svd3.singular_values.iter().sum::<f64>();
    let t = Vector3::new(proj[(0, 3)], proj[(1, 3)], proj[(2, 3)]) * scale;
    if !t.iter().all(|v| v.is_finite()) {
        return None;
    }
    Some(Pose::from_matrix(&r, t))
}

/// Damped Gauss-Newton refinement of a pose over 6 tangent dof.
fn refine_pose(
    initial: &Pose,
    points: &[Vector3<f64>],
    pixels: &[Vector2<f64>],
    k: &CameraIntrinsics,
) -> Option<Pose> {
    type J6 = Jet<6>;
    let cost = |pose: &Pose| -> Option<f64> {
        let mut e = 0.0;
        for (x, p) in points.iter().zip(pixels.iter()) {
            let cam = pose.transform(x);
            if cam.z <= 1e-9 {
                return None;
            }
            let proj = k.ray_to_pixel(&cam).ok()?;
            e += (proj - p).norm_squared();
        }
        Some(e)
    };

    let mut pose = *initial;
    let mut energy = cost(&pose)?;
    let mut damping = 1e-6;
    for _ in 0..60 {
        let base_r = pose.rotation_matrix();
        let mut h = SMatrix::<f64, 6, 6>::zeros();
        let mut g = SVector::<f64, 6>::zeros();
        for (x, p) in points.iter().zip(pixels.iter()) {
            let delta = Vector3::new(
                J6::variable(0.0, 0),
                J6::variable(0.0, 1),
                J6::variable(0.0, 2),
            );
            let t = Vector3::new(
                J6::variable(pose.translation.x, 3),
                J6::variable(pose.translation.y, 4),
                J6::variable(pose.translation.z, 5),
            );
            let xj = Vector3::new(J6::constant(x.x), J6::constant(x.y), J6::constant(x.z));
            let cam_rot = mat3_mul(&base_r, &rotate_small(&delta, &xj));
            let cam = Vector3::new(cam_rot.x + t.x, cam_rot.y + t.y, cam_rot.z + t.z);
            if cam.z.v <= 1e-9 {
                return None;
            }
            let proj = k.ray_to_pixel(&cam).ok()?;
            for (res, target) in [(proj.x, p.x), (proj.y, p.y)] {
                let r = res.v - target;
                g += res.d * r;
                h += res.d * res.d.transpose();
            }
        }
        if g.amax() <= 1e-12 * (1.0 + h.diagonal().amax()) {
            break;
        }
        let mut improved = false;
        for _ in 0..12 {
            let mut a = h;
            for i in 0..6 {
                a[(i, i)] += damping * h[(i, i)].max(1e-12);
            }
            let Some(chol) = a.cholesky() else {
                damping *= 10.0;
                continue;
            };
            let step = chol.solve(&(-g));
            let mut trial = pose;
            let r_new = trial.rotation_matrix()
                * crate::math::rotation_matrix(&Vector3::new(step[0], step[1], step[2]));
            trial.rotation = crate::math::log_rotation(&r_new);
            trial.translation += Vector3::new(step[3], step[4], step[5]);
            match cost(&trial) {
                Some(e) if e < energy => {
                    pose = trial;
                    energy = e;
                    damping = (damping / 3.0).max(1e-12);
                    improved = true;
                    break;
                }
                _ => damping *= 10.0,
            }
        }
        if !improved {
            break;
        }
    }
    Some(pose)
}

/// Pose of one image from the merged cloud: DLT start when enough points,
/// the supplied fallback otherwise, always followed by nonlinear refinement.
pub(crate) fn solve_pnp(
    points: &[Vector3<f64>],
    pixels: &[Vector2<f64>],
    k: &CameraIntrinsics,
    fallback: Option<Pose>,
) -> Option<Pose> {
    if points.len() < 4 {
        return None;
    }
    let start = dlt_pose(points, pixels, k)
        .or(fallback)
        .unwrap_or_else(Pose::identity);
    let refined = refine_pose(&start, points, pixels, k)
        .or_else(|| refine_pose(&Pose::identity(), points, pixels, k))?;
    let finite = refined.rotation.iter().all(|v| v.is_finite())
        && refined.translation.iter().all(|v| v.is_finite());
    finite.then_some(refined)
}
