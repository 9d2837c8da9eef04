//! Observations, camera poses and the parameter blocks being optimized.

use nalgebra::{Matrix3, Vector2, Vector3};
use thiserror::Error;

use crate::geometry::{
    back_project, CameraIntrinsics, GeometryError, InterfacePlane, RefractiveIndex, UnitVec3,
};
use crate::math::{canonical_axis_angle, log_rotation, rotation_matrix};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StateError {
    #[error("observation ({image}, {point}) out of range")]
    IndexOutOfRange { image: usize, point: usize },
    #[error("duplicate observation ({image}, {point})")]
    DuplicateObservation { image: usize, point: usize },
    #[error("point {0} is observed in fewer than 2 images")]
    PointUnderObserved(usize),
    #[error("point {0} is not observed in the reference image")]
    PointNotInReference(usize),
    #[error("reference image index {0} out of range")]
    ReferenceOutOfRange(usize),
    #[error("parameter state is inconsistent: {0}")]
    InvalidState(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Rigid transform mapping world coordinates (the reference camera frame)
/// into an image's camera frame: `x_cam = R x_world + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    /// Axis-angle rotation vector, magnitude below pi.
    pub rotation: Vector3<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: Vector3::zeros(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Pose {
            rotation: canonical_axis_angle(&rotation),
            translation,
        }
    }

    pub fn from_matrix(r: &Matrix3<f64>, t: Vector3<f64>) -> Self {
        Pose {
            rotation: log_rotation(r),
            translation: t,
        }
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        rotation_matrix(&self.rotation)
    }

    /// World point into this camera's frame.
    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation_matrix() * p + self.translation
    }

    /// Camera-frame point back into the world frame.
    pub fn inverse_transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation_matrix().transpose() * (p - self.translation)
    }

    /// `self ∘ other⁻¹`: the pose that maps `other`'s camera frame into
    /// this camera's frame.
    pub fn compose_with_inverse(&self, other: &Pose) -> Pose {
        let ra = self.rotation_matrix();
        let rb = other.rotation_matrix();
        let r = ra * rb.transpose();
        let t = self.translation - r * other.translation;
        Pose::from_matrix(&r, t)
    }

    pub fn camera_center(&self) -> Vector3<f64> {
        -(self.rotation_matrix().transpose() * self.translation)
    }

    pub fn is_identity(&self) -> bool {
        self.rotation == Vector3::zeros() && self.translation == Vector3::zeros()
    }
}

/// One 2D detection: point `point` seen in image `image` at `pixel`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub image: usize,
    pub point: usize,
    pub pixel: Vector2<f64>,
}

/// All observations of a capture, indexed both by image and by point.
///
/// Observations are kept sorted by `(image, point)` so that iteration order,
/// and hence every downstream reduction, is deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackSet {
    observations: Vec<Observation>,
    image_count: usize,
    point_count: usize,
    reference: Option<usize>,
    image_obs: Vec<Vec<usize>>,
    point_obs: Vec<Vec<usize>>,
}

impl TrackSet {
    pub fn new(
        mut observations: Vec<Observation>,
        image_count: usize,
        point_count: usize,
        reference: Option<usize>,
    ) -> Result<Self, StateError> {
        if let Some(r) = reference {
            if r >= image_count {
                return Err(StateError::ReferenceOutOfRange(r));
            }
        }
        observations.sort_by_key(|o| (o.image, o.point));
        let mut image_obs = vec![Vec::new(); image_count];
        let mut point_obs = vec![Vec::new(); point_count];
        for (idx, obs) in observations.iter().enumerate() {
            if obs.image >= image_count || obs.point >= point_count {
                return Err(StateError::IndexOutOfRange {
                    image: obs.image,
                    point: obs.point,
                });
            }
            if idx > 0 {
                let prev = &observations[idx - 1];
                if prev.image == obs.image && prev.point == obs.point {
                    return Err(StateError::DuplicateObservation {
                        image: obs.image,
                        point: obs.point,
                    });
                }
            }
            image_obs[obs.image].push(idx);
            point_obs[obs.point].push(idx);
        }
        for (j, obs) in point_obs.iter().enumerate() {
            if obs.len() < 2 {
                return Err(StateError::PointUnderObserved(j));
            }
        }
        if let Some(r) = reference {
            for (j, obs) in point_obs.iter().enumerate() {
                if !obs.iter().any(|&idx| observations[idx].image == r) {
                    return Err(StateError::PointNotInReference(j));
                }
            }
        }
        Ok(TrackSet {
            observations,
            image_count,
            point_count,
            reference,
            image_obs,
            point_obs,
        })
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn image_count(&self) -> usize {
        self.image_count
    }

    pub fn point_count(&self) -> usize {
        self.point_count
    }

    pub fn reference(&self) -> Option<usize> {
        self.reference
    }

    /// Replaces the reference index, revalidating the visibility invariant.
    pub fn with_reference(self, reference: Option<usize>) -> Result<Self, StateError> {
        TrackSet::new(self.observations, self.image_count, self.point_count, reference)
    }

    /// Indices (into `observations`) of all observations in image `i`.
    pub fn obs_in_image(&self, image: usize) -> &[usize] {
        &self.image_obs[image]
    }

    /// Indices of all observations of point `j`.
    pub fn obs_of_point(&self, point: usize) -> &[usize] {
        &self.point_obs[point]
    }

    pub fn obs_index(&self, image: usize, point: usize) -> Option<usize> {
        self.observations
            .binary_search_by_key(&(image, point), |o| (o.image, o.point))
            .ok()
    }

    pub fn pixel(&self, image: usize, point: usize) -> Option<Vector2<f64>> {
        self.obs_index(image, point).map(|i| self.observations[i].pixel)
    }

    /// Points observed in both images, ascending.
    pub fn common_points(&self, a: usize, b: usize) -> Vec<usize> {
        let in_b: std::collections::BTreeSet<usize> = self.image_obs[b]
            .iter()
            .map(|&idx| self.observations[idx].point)
            .collect();
        self.image_obs[a]
            .iter()
            .map(|&idx| self.observations[idx].point)
            .filter(|j| in_b.contains(j))
            .collect()
    }
}

/// Point parameterization: per-point depths along the reference refracted
/// rays (reference formulations) or free 3D coordinates (no-reference).
#[derive(Debug, Clone, PartialEq)]
pub enum PointParams {
    Depths(Vec<f64>),
    Coords(Vec<Vector3<f64>>),
}

impl PointParams {
    pub fn len(&self) -> usize {
        match self {
            PointParams::Depths(d) => d.len(),
            PointParams::Coords(c) => c.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Every unknown of the reconstruction problem.
///
/// `local_normals`, present only in soft-constraint mode, is aligned with the
/// owning [`TrackSet`]'s observation order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterState {
    pub poses: Vec<Pose>,
    pub interfaces: Vec<InterfacePlane>,
    pub points: PointParams,
    pub local_normals: Option<Vec<UnitVec3>>,
    pub mu: RefractiveIndex,
}

impl ParameterState {
    pub fn validate(&self, tracks: &TrackSet) -> Result<(), StateError> {
        if self.poses.len() != tracks.image_count() {
            return Err(StateError::InvalidState(format!(
                "{} poses for {} images",
                self.poses.len(),
                tracks.image_count()
            )));
        }
        if self.interfaces.len() != tracks.image_count() {
            return Err(StateError::InvalidState(format!(
                "{} interfaces for {} images",
                self.interfaces.len(),
                tracks.image_count()
            )));
        }
        if self.points.len() != tracks.point_count() {
            return Err(StateError::InvalidState(format!(
                "{} point blocks for {} points",
                self.points.len(),
                tracks.point_count()
            )));
        }
        if let PointParams::Depths(depths) = &self.points {
            if let Some((j, _)) = depths.iter().enumerate().find(|(_, d)| !(**d > 0.0)) {
                return Err(StateError::InvalidState(format!(
                    "point depth {j} is not positive"
                )));
            }
        }
        if let Some(normals) = &self.local_normals {
            if normals.len() != tracks.observations().len() {
                return Err(StateError::InvalidState(format!(
                    "{} local normals for {} observations",
                    normals.len(),
                    tracks.observations().len()
                )));
            }
        }
        Ok(())
    }

    /// Local normal used to bend the ray of observation `obs_idx`.
    pub fn local_normal(&self, obs_idx: usize, image: usize) -> UnitVec3 {
        match &self.local_normals {
            Some(ns) => ns[obs_idx],
            None => *self.interfaces[image].normal(),
        }
    }

    /// Realizes the 3D points in the world frame for either parameterization.
    pub fn world_points(
        &self,
        tracks: &TrackSet,
        k: &CameraIntrinsics,
    ) -> Result<Vec<Vector3<f64>>, StateError> {
        match &self.points {
            PointParams::Coords(points) => Ok(points.clone()),
            PointParams::Depths(depths) => {
                let r = tracks.reference().ok_or_else(|| {
                    StateError::InvalidState(
                        "depth parameterization requires a reference image".into(),
                    )
                })?;
                let plane = &self.interfaces[r];
                let mut out = Vec::with_capacity(depths.len());
                for (j, &d) in depths.iter().enumerate() {
                    let idx = tracks
                        .obs_index(r, j)
                        .ok_or(StateError::PointNotInReference(j))?;
                    let pixel = tracks.observations()[idx].pixel;
                    let normal = self.local_normal(idx, r);
                    out.push(back_project(&pixel, d, plane, &normal, self.mu, k)?);
                }
                Ok(out)
            }
        }
    }
}
