//! Reconstruction of submerged 3D points, camera poses and refractive
//! interface parameters from 2D tracks observed through a moving or static,
//! planar or slightly wavy interface, plus the synthetic-scene tooling used
//! to validate the solver.

pub mod evaluation;
pub mod geometry;
pub mod initializer;
pub mod io;
pub mod math;
pub mod optimizer;
pub mod residuals;
pub mod scenarios;
pub mod simulator;
pub mod state;

pub use geometry::{CameraIntrinsics, GeometryError, InterfacePlane, Ray, RefractiveIndex, UnitVec3};
pub use scenarios::{ConstraintMode, Problem, ScenarioKind};
pub use state::{Observation, ParameterState, Pose, TrackSet};
