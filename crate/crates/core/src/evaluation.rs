//! Similarity alignment against ground truth and error reporting.

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::geometry::{CameraIntrinsics, GeometryError};
use crate::residuals::{eval_block, residual_blocks};
use crate::scenarios::Problem;
use crate::state::{ParameterState, StateError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("need at least 3 point pairs, got {0}")]
    TooFewPoints(usize),
    #[error("point counts differ: {0} vs {1}")]
    CountMismatch(usize, usize),
    #[error("degenerate configuration: points are collinear or coincident")]
    DegenerateConfiguration,
    #[error(transparent)]
    State(#[from] StateError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Least-squares similarity transform `x -> scale * rotation * x + translation`
/// mapping the estimated points onto the truth, with the residuals it leaves.
#[derive(Debug, Clone)]
pub struct AlignmentResult {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub scale: f64,
    pub residuals: Vec<Vector3<f64>>,
    pub rmse: f64,
}

impl AlignmentResult {
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p * self.scale + self.translation
    }
}

/// Closed-form similarity alignment via the cross-covariance decomposition.
pub fn align_similarity(
    estimated: &[Vector3<f64>],
    truth: &[Vector3<f64>],
) -> Result<AlignmentResult, EvalError> {
    if estimated.len() != truth.len() {
        return Err(EvalError::CountMismatch(estimated.len(), truth.len()));
    }
    let n = estimated.len();
    if n < 3 {
        return Err(EvalError::TooFewPoints(n));
    }
    let inv_n = 1.0 / n as f64;
    let mean_e: Vector3<f64> = estimated.iter().sum::<Vector3<f64>>() * inv_n;
    let mean_t: Vector3<f64> = truth.iter().sum::<Vector3<f64>>() * inv_n;

    let mut sigma = Matrix3::zeros();
    let mut var_e = 0.0;
    for (e, t) in estimated.iter().zip(truth.iter()) {
        let de = e - mean_e;
        let dt = t - mean_t;
        sigma += dt * de.transpose() * inv_n;
        var_e += de.norm_squared() * inv_n;
    }
    if var_e < 1e-300 {
        return Err(EvalError::DegenerateConfiguration);
    }
    let svd = sigma.svd(true, true);
    let u = svd.u.ok_or(EvalError::DegenerateConfiguration)?;
    let v_t = svd.v_t.ok_or(EvalError::DegenerateConfiguration)?;
    // Collinear estimates leave the rotation about the line unconstrained.
    if svd.singular_values[1] <= 1e-12 * svd.singular_values[0].max(1e-300) {
        return Err(EvalError::DegenerateConfiguration);
    }
    let mut s = Vector3::new(1.0, 1.0, 1.0);
    if (u.determinant() * v_t.determinant()) < 0.0 {
        s[2] = -1.0;
    }
    let rotation = u * Matrix3::from_diagonal(&s) * v_t;
    let scale = svd.singular_values.dot(&s) / var_e;
    if !(scale > 0.0) {
        return Err(EvalError::DegenerateConfiguration);
    }
    let translation = mean_t - rotation * mean_e * scale;

    let result_stub = AlignmentResult {
        rotation,
        translation,
        scale,
        residuals: Vec::new(),
        rmse: 0.0,
    };
    let residuals: Vec<Vector3<f64>> = estimated
        .iter()
        .zip(truth.iter())
        .map(|(e, t)| result_stub.apply(e) - t)
        .collect();
    let rmse =
        (residuals.iter().map(|r| r.norm_squared()).sum::<f64>() / n as f64).sqrt();
    Ok(AlignmentResult {
        residuals,
        rmse,
        ..result_stub
    })
}

/// Per-run evaluation against ground truth.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub point_count: usize,
    /// Post-alignment point RMSE of the initial state, if one was supplied.
    pub rmse_initial: Option<f64>,
    /// Post-alignment point RMSE of the solution.
    pub rmse: f64,
    pub alignment_scale: f64,
    /// Per-image RMS of the solution's reprojection residuals on the tracks.
    pub reproj_rms_px: Vec<f64>,
    /// Angle (radians) between estimated and true interface normals, compared
    /// in the truth world frame through the alignment rotation.
    pub interface_normal_err_rad: Vec<f64>,
    /// Relative interface depth errors `|scale * d_est - d_true| / d_true`.
    pub interface_depth_rel_err: Vec<f64>,
}

impl RunReport {
    /// Stable key-value serialization for CI diffing.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("point_count = {}\n", self.point_count));
        if let Some(init) = self.rmse_initial {
            out.push_str(&format!("rmse_initial = {init}\n"));
        }
        out.push_str(&format!("rmse = {}\n", self.rmse));
        out.push_str(&format!("alignment_scale = {}\n", self.alignment_scale));
        for (i, v) in self.reproj_rms_px.iter().enumerate() {
            out.push_str(&format!("reproj_rms_px_{i} = {v}\n"));
        }
        for (i, v) in self.interface_normal_err_rad.iter().enumerate() {
            out.push_str(&format!("interface_normal_err_rad_{i} = {v}\n"));
        }
        for (i, v) in self.interface_depth_rel_err.iter().enumerate() {
            out.push_str(&format!("interface_depth_rel_err_{i} = {v}\n"));
        }
        out
    }
}

/// Evaluates a solution state (and optionally the initial state it started
/// from) against ground-truth points/poses/interfaces.
pub fn evaluate_run(
    problem: &Problem,
    solution: &ParameterState,
    initial: Option<&ParameterState>,
    truth_points: &[Vector3<f64>],
    truth_poses: &[crate::state::Pose],
    truth_interfaces: &[crate::geometry::InterfacePlane],
    k: &CameraIntrinsics,
) -> Result<RunReport, EvalError> {
    let est_points = solution.world_points(&problem.tracks, k)?;
    if est_points.len() != truth_points.len() {
        return Err(EvalError::CountMismatch(est_points.len(), truth_points.len()));
    }
    let alignment = align_similarity(&est_points, truth_points)?;

    let rmse_initial = match initial {
        Some(state) => {
            let pts = state.world_points(&problem.tracks, k)?;
            Some(align_similarity(&pts, truth_points)?.rmse)
        }
        None => None,
    };

    // Reprojection RMS per image, from the active cost's pixel residuals.
    let image_count = problem.tracks.image_count();
    let mut sq_sum = vec![0.0; image_count];
    let mut counts = vec![0usize; image_count];
    for kind in residual_blocks(problem) {
        let obs_idx = match kind {
            crate::residuals::ResidualKind::ReprojRef { obs }
            | crate::residuals::ResidualKind::ReprojNoRef { obs }
            | crate::residuals::ResidualKind::RayPoint { obs } => obs,
            crate::residuals::ResidualKind::SoftReg { .. } => continue,
        };
        let image = problem.tracks.observations()[obs_idx].image;
        let res = eval_block(problem, solution, kind)?;
        sq_sum[image] += res.iter().map(|v| v * v).sum::<f64>();
        counts[image] += 1;
    }
    let reproj_rms_px = sq_sum
        .iter()
        .zip(counts.iter())
        .map(|(s, &c)| if c == 0 { 0.0 } else { (s / c as f64).sqrt() })
        .collect();

    // Interface errors: map camera-frame normals to the truth world frame
    // (estimates additionally through the alignment rotation).
    let mut interface_normal_err_rad = Vec::with_capacity(image_count);
    let mut interface_depth_rel_err = Vec::with_capacity(image_count);
    for i in 0..image_count {
        let n_est_world = solution.poses[i].rotation_matrix().transpose()
            * solution.interfaces[i].normal().into_inner();
        let n_est_aligned = alignment.rotation * n_est_world;
        let n_true_world = truth_poses[i].rotation_matrix().transpose()
            * truth_interfaces[i].normal().into_inner();
        let cos = n_est_aligned.dot(&n_true_world).clamp(-1.0, 1.0);
        interface_normal_err_rad.push(cos.acos());
        let d_true = truth_interfaces[i].depth();
        interface_depth_rel_err
            .push((alignment.scale * solution.interfaces[i].depth() - d_true).abs() / d_true);
    }

    Ok(RunReport {
        point_count: truth_points.len(),
        rmse_initial,
        rmse: alignment.rmse,
        alignment_scale: alignment.scale,
        reproj_rms_px,
        interface_normal_err_rad,
        interface_depth_rel_err,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::Rotation3;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn cloud(n: usize, seed: u64) -> Vec<Vector3<f64>> {
        let mut rng = StdRng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                )
            })
            .collect()
    }

    #[test]
    fn identity_alignment() {
        let pts = cloud(20, 1);
        let a = align_similarity(&pts, &pts).unwrap();
        assert_relative_eq!(a.rotation, Matrix3::identity(), epsilon = 1e-12);
        assert_relative_eq!(a.translation, Vector3::zeros(), epsilon = 1e-12);
        assert_relative_eq!(a.scale, 1.0, epsilon = 1e-12);
        assert!(a.rmse <= 1e-14);
    }

    #[test]
    fn exact_similarity_recovered() {
        let truth = cloud(30, 2);
        let rot = Rotation3::from_euler_angles(0.3, -0.5, 0.52).into_inner();
        let scale = 2.0;
        let t = Vector3::new(0.4, -1.0, 2.0);
        // estimated = inverse similarity of truth
        let est: Vec<Vector3<f64>> = truth
            .iter()
            .map(|p| rot.transpose() * (p - t) / scale)
            .collect();
        let a = align_similarity(&est, &truth).unwrap();
        assert!(a.rmse <= 1e-12, "rmse {}", a.rmse);
        assert_relative_eq!(a.scale, scale, epsilon = 1e-10);
        assert_relative_eq!(a.rotation, rot, epsilon = 1e-10);
    }

    #[test]
    fn noisy_rmse_matches_sigma_sqrt3() {
        let truth = cloud(1000, 3);
        let sigma = 0.01;
        let mut rng = StdRng::seed_from_u64(4);
        let est: Vec<Vector3<f64>> = truth
            .iter()
            .map(|p| {
                p + Vector3::new(
                    sigma * gauss(&mut rng),
                    sigma * gauss(&mut rng),
                    sigma * gauss(&mut rng),
                )
            })
            .collect();
        let a = align_similarity(&est, &truth).unwrap();
        let expect = sigma * 3.0_f64.sqrt();
        assert!(
            (a.rmse - expect).abs() / expect < 0.10,
            "rmse {} vs {}",
            a.rmse,
            expect
        );
    }

    fn gauss(rng: &mut StdRng) -> f64 {
        // Box-Muller; test-only helper.
        let u1: f64 = rng.random_range(1e-12..1.0);
        let u2: f64 = rng.random_range(0.0..1.0);
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    #[test]
    fn degenerate_inputs_rejected() {
        let line: Vec<Vector3<f64>> = (0..5).map(|i| Vector3::new(i as f64, 0.0, 0.0)).collect();
        assert_eq!(
            align_similarity(&line, &line).unwrap_err(),
            EvalError::DegenerateConfiguration
        );
        let pts = cloud(2, 5);
        assert_eq!(
            align_similarity(&pts, &pts).unwrap_err(),
            EvalError::TooFewPoints(2)
        );
    }

    #[test]
    fn alignment_is_locally_optimal() {
        let truth = cloud(50, 6);
        let mut rng = StdRng::seed_from_u64(7);
        let est: Vec<Vector3<f64>> = truth
            .iter()
            .map(|p| p * 0.5 + Vector3::new(0.02 * gauss(&mut rng), 0.0, 0.01))
            .collect();
        let a = align_similarity(&est, &truth).unwrap();
        for _ in 0..100 {
            let d_rot = Rotation3::from_scaled_axis(Vector3::new(
                1e-4 * gauss(&mut rng),
                1e-4 * gauss(&mut rng),
                1e-4 * gauss(&mut rng),
            ));
            let d_t = Vector3::new(
                1e-5 * gauss(&mut rng),
                1e-5 * gauss(&mut rng),
                1e-5 * gauss(&mut rng),
            );
            let d_s = 1.0 + 1e-5 * gauss(&mut rng);
            let rot = d_rot.into_inner() * a.rotation;
            let scale = a.scale * d_s;
            let t = a.translation + d_t;
            let rmse = (est
                .iter()
                .zip(truth.iter())
                .map(|(e, p)| (rot * e * scale + t - p).norm_squared())
                .sum::<f64>()
                / est.len() as f64)
                .sqrt();
            assert!(rmse >= a.rmse - 1e-15, "perturbation improved alignment");
        }
    }

    #[test]
    fn scale_equivariance() {
        let truth = cloud(40, 8);
        let mut rng = StdRng::seed_from_u64(9);
        let est: Vec<Vector3<f64>> = truth
            .iter()
            .map(|p| p * 1.7 + Vector3::new(0.01 * gauss(&mut rng), 0.0, 0.0))
            .collect();
        let a = align_similarity(&est, &truth).unwrap();
        let k = 3.0;
        let est_scaled: Vec<Vector3<f64>> = est.iter().map(|p| p * k).collect();
        let b = align_similarity(&est_scaled, &truth).unwrap();
        assert_relative_eq!(b.scale, a.scale / k, max_relative = 1e-10);
        assert_relative_eq!(b.rmse, a.rmse, max_relative = 1e-10);
    }
}
