//! Capture scenarios, constraint modes, solvability counting and the
//! assembled [`Problem`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{CameraIntrinsics, RefractiveIndex};
use crate::state::{ParameterState, Pose, StateError, TrackSet};

/// Which entities move between images.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioKind {
    /// The general case: camera and interface both move.
    MovingInterface,
    /// Interface fixed relative to the scene; all per-image interface
    /// parameters are tied to the reference block.
    StaticInterface,
    /// Camera fixed relative to the scene; all poses are identity.
    FixedCamera,
}

impl ScenarioKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ScenarioKind::MovingInterface => "moving-interface",
            ScenarioKind::StaticInterface => "static-interface",
            ScenarioKind::FixedCamera => "fixed-camera",
        }
    }
}

/// Extra constraint on the per-observation interface normals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
pub enum ConstraintMode {
    /// Planar interfaces, reference image, points as depths, reprojection cost.
    #[serde(rename = "hard-ref")]
    #[value(name = "hard-ref")]
    HardWithRef,
    /// Planar interfaces, no reference image, points as free 3D coordinates.
    #[serde(rename = "hard-noref")]
    #[value(name = "hard-noref")]
    HardNoRef,
    /// Free per-observation normals held together by a neighborhood
    /// regularizer; ray-point distance cost.
    #[serde(rename = "soft")]
    #[value(name = "soft")]
    Soft,
}

impl ConstraintMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ConstraintMode::HardWithRef => "hard-ref",
            ConstraintMode::HardNoRef => "hard-noref",
            ConstraintMode::Soft => "soft",
        }
    }

    pub fn requires_reference(&self) -> bool {
        !matches!(self, ConstraintMode::HardNoRef)
    }
}

/// Unknown-parameter count as published, for the solvability bookkeeping.
///
/// These are the paper's own tallies, reproduced verbatim; the optimizer's
/// internal free-parameter count differs slightly (it also removes the scale
/// gauge). The static-interface table below is consistent with counting 9
/// unknowns for the reference configuration, not the 3 this formula uses --
/// see `min_points_for_images`, which is the operative table.
pub fn count_unknowns(scenario: ScenarioKind, mode: ConstraintMode, images: usize, points: usize) -> usize {
    let hard = match scenario {
        ScenarioKind::MovingInterface => 9 * images + points - 6,
        ScenarioKind::StaticInterface => 3 + 6 * (images - 1) + points,
        ScenarioKind::FixedCamera => 3 + 3 * images + points,
    };
    match mode {
        ConstraintMode::HardWithRef | ConstraintMode::HardNoRef => hard,
        ConstraintMode::Soft => hard + 2 * images * points,
    }
}

/// Number of residual constraints: x and y reprojection errors for each point
/// in each non-reference image.
pub fn count_constraints(images: usize, points: usize) -> usize {
    2 * points * (images - 1)
}

/// Published minimum point counts per image count, as a table-driven function.
pub fn min_points_for_images(scenario: ScenarioKind, images: usize) -> usize {
    debug_assert!(images >= 2);
    match scenario {
        ScenarioKind::MovingInterface => match images {
            2 => 12,
            3 => 7,
            4..=8 => 6,
            _ => 5,
        },
        ScenarioKind::StaticInterface => match images {
            2 => 15,
            3 => 7,
            4 => 6,
            5..=7 => 5,
            _ => 4,
        },
        ScenarioKind::FixedCamera => match images {
            2 => 9,
            3 => 4,
            4..=8 => 3,
            _ => 2,
        },
    }
}

/// Whether the configuration meets the published point-count thresholds.
pub fn is_solvable(scenario: ScenarioKind, images: usize, points: usize) -> bool {
    images >= 2 && points >= min_points_for_images(scenario, images)
}

/// Projects a state onto the scenario's tie manifold: static interfaces copy
/// the reference block everywhere, fixed cameras force identity poses. The
/// optimizer additionally shares the tied blocks so they are updated once.
pub fn apply_scenario_ties(
    state: &ParameterState,
    scenario: ScenarioKind,
    reference: usize,
) -> ParameterState {
    let mut out = state.clone();
    match scenario {
        ScenarioKind::MovingInterface => {}
        ScenarioKind::StaticInterface => {
            let tied = out.interfaces[reference];
            for plane in &mut out.interfaces {
                *plane = tied;
            }
        }
        ScenarioKind::FixedCamera => {
            for pose in &mut out.poses {
                *pose = Pose::identity();
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProblemError {
    #[error("{mode} requires a reference image", mode = .0.as_str())]
    ReferenceRequired(ConstraintMode),
    #[error("hard-noref forbids a reference image")]
    ReferenceForbidden,
    #[error("need at least 2 images, got {0}")]
    TooFewImages(usize),
    #[error(
        "underdetermined: {scenario} with {images} images needs at least {required} points, got {points}"
    , scenario = .scenario.as_str())]
    Underdetermined {
        scenario: ScenarioKind,
        images: usize,
        points: usize,
        required: usize,
    },
    #[error("soft mode: neighborhood of observation {0} has fewer than 3 members; enlarge the radius")]
    NeighborhoodTooSmall(usize),
    #[error("lambda must be nonnegative and finite")]
    BadLambda,
    #[error(transparent)]
    State(#[from] StateError),
}

#[derive(Debug, Clone)]
pub struct ProblemOptions {
    /// Balancing coefficient of the soft regularizer.
    pub lambda: f64,
    /// Pixel radius defining soft-constraint neighborhoods.
    pub neighborhood_radius_px: f64,
    /// Skip the solvability check (research use).
    pub allow_underdetermined: bool,
    /// Gauge value of the reference interface depth.
    pub reference_depth: f64,
}

impl Default for ProblemOptions {
    fn default() -> Self {
        ProblemOptions {
            lambda: 1.0,
            neighborhood_radius_px: 40.0,
            allow_underdetermined: false,
            reference_depth: 1.0,
        }
    }
}

/// A fully validated reconstruction problem.
#[derive(Debug, Clone)]
pub struct Problem {
    pub tracks: TrackSet,
    pub intrinsics: CameraIntrinsics,
    pub mu: RefractiveIndex,
    pub scenario: ScenarioKind,
    pub mode: ConstraintMode,
    pub lambda: f64,
    pub neighborhood_radius_px: f64,
    pub reference_depth: f64,
    /// Soft mode only: per observation, the indices (into the track set's
    /// observation list) of same-image observations within the pixel radius,
    /// the observation itself included.
    neighborhoods: Option<Vec<Vec<usize>>>,
}

impl Problem {
    pub fn new(
        tracks: TrackSet,
        intrinsics: CameraIntrinsics,
        mu: RefractiveIndex,
        scenario: ScenarioKind,
        mode: ConstraintMode,
        options: ProblemOptions,
    ) -> Result<Self, ProblemError> {
        if mode.requires_reference() && tracks.reference().is_none() {
            return Err(ProblemError::ReferenceRequired(mode));
        }
        if !mode.requires_reference() && tracks.reference().is_some() {
            return Err(ProblemError::ReferenceForbidden);
        }
        if tracks.image_count() < 2 {
            return Err(ProblemError::TooFewImages(tracks.image_count()));
        }
        if !(options.lambda >= 0.0 && options.lambda.is_finite()) {
            return Err(ProblemError::BadLambda);
        }
        if !options.allow_underdetermined
            && !is_solvable(scenario, tracks.image_count(), tracks.point_count())
        {
            return Err(ProblemError::Underdetermined {
                scenario,
                images: tracks.image_count(),
                points: tracks.point_count(),
                required: min_points_for_images(scenario, tracks.image_count()),
            });
        }
        let neighborhoods = if mode == ConstraintMode::Soft {
            let n = compute_neighborhoods(&tracks, options.neighborhood_radius_px);
            if !options.allow_underdetermined {
                if let Some(idx) = n.iter().position(|members| members.len() < 3) {
                    return Err(ProblemError::NeighborhoodTooSmall(idx));
                }
            }
            Some(n)
        } else {
            None
        };
        Ok(Problem {
            tracks,
            intrinsics,
            mu,
            scenario,
            mode,
            lambda: options.lambda,
            neighborhood_radius_px: options.neighborhood_radius_px,
            reference_depth: options.reference_depth,
            neighborhoods,
        })
    }

    /// The image whose frame defines the world: the reference, or image 0 in
    /// no-reference mode (gauge only).
    pub fn anchor(&self) -> usize {
        self.tracks.reference().unwrap_or(0)
    }

    pub fn neighborhoods(&self) -> Option<&[Vec<usize>]> {
        self.neighborhoods.as_deref()
    }
}

/// Same-image observations within the pixel radius of each observation.
fn compute_neighborhoods(tracks: &TrackSet, radius_px: f64) -> Vec<Vec<usize>> {
    let r2 = radius_px * radius_px;
    let obs = tracks.observations();
    let mut out = vec![Vec::new(); obs.len()];
    for image in 0..tracks.image_count() {
        let in_image = tracks.obs_in_image(image);
        for &a in in_image {
            for &b in in_image {
                if (obs[a].pixel - obs[b].pixel).norm_squared() <= r2 {
                    out[a].push(b);
                }
            }
        }
    }
    out
}
