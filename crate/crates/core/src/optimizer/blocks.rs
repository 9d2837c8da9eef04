//! Per-residual-block Jacobian evaluation.
//!
//! Data residuals are differentiated with dual numbers over the tangent
//! coordinates of the blocks they touch (at most [`JET_DIM`]); the soft
//! regularizer rows, whose neighborhood span is unbounded, get their simple
//! analytic Jacobian instead.

use nalgebra::Vector3;

use crate::geometry::{GeometryError, PlaneG, UnitVec3};
use crate::math::{retract_unit, Jet};
use crate::residuals::{ray_point_residual_g, reproj_residual_noref_g, reproj_residual_ref_g, PoseEval, ResidualKind};
use crate::scenarios::Problem;
use crate::state::{ParameterState, PointParams};

use super::layout::{BlockKind, Charts, Layout};

/// Upper bound on tangent coordinates touched by one data residual:
/// pose (6) + two interfaces (3 + 3) + depth (1) + two local normals (2 + 2).
pub(crate) const JET_DIM: usize = 17;
pub(crate) type J = Jet<JET_DIM>;

/// Dense rows of one residual block over its touched tangent columns.
#[derive(Debug, Clone)]
pub(crate) struct BlockJac {
    pub cols: Vec<usize>,
    /// Each row: residual value and d(value)/d(cols).
    pub rows: Vec<(f64, Vec<f64>)>,
}

/// Tracks which global columns occupy which jet slots within one block.
struct Slots {
    cols: Vec<usize>,
}

impl Slots {
    fn new() -> Self {
        Slots { cols: Vec::new() }
    }

    fn add(&mut self, offset: usize, dim: usize) -> usize {
        let first = self.cols.len();
        assert!(first + dim <= JET_DIM, "jet capacity exceeded");
        for d in 0..dim {
            self.cols.push(offset + d);
        }
        first
    }
}

fn jet_pose(
    state: &ParameterState,
    layout: &Layout,
    image: usize,
    slots: &mut Slots,
) -> PoseEval<J> {
    match layout.pose_block[image] {
        None => PoseEval::constant(&state.poses[image]),
        Some(b) => {
            let first = slots.add(layout.blocks[b].offset, 6);
            let t = state.poses[image].translation;
            PoseEval {
                base_r: state.poses[image].rotation_matrix(),
                delta_r: Vector3::new(
                    J::variable(0.0, first),
                    J::variable(0.0, first + 1),
                    J::variable(0.0, first + 2),
                ),
                t: Vector3::new(
                    J::variable(t.x, first + 3),
                    J::variable(t.y, first + 4),
                    J::variable(t.z, first + 5),
                ),
            }
        }
    }
}

fn jet_plane(
    state: &ParameterState,
    layout: &Layout,
    charts: &Charts,
    block: usize,
    slots: &mut Slots,
) -> PlaneG<J> {
    let spec = &layout.blocks[block];
    let BlockKind::Interface { images, depth_free } = &spec.kind else {
        unreachable!("interface block expected");
    };
    let plane = &state.interfaces[images[0]];
    let (b1, b2) = charts.basis[block].expect("interface chart");
    let first = slots.add(spec.offset, spec.dim);
    let normal = retract_unit(
        &plane.normal().into_inner(),
        &b1,
        &b2,
        J::variable(0.0, first),
        J::variable(0.0, first + 1),
    );
    let depth = if *depth_free {
        J::variable(plane.depth(), first + 2)
    } else {
        J::constant(plane.depth())
    };
    PlaneG { normal, depth }
}

fn jet_local_normal(
    normals: &[UnitVec3],
    layout: &Layout,
    charts: &Charts,
    obs: usize,
    slots: &mut Slots,
) -> Vector3<J> {
    let block = layout.normal_block[obs].expect("soft local normal block");
    let spec = &layout.blocks[block];
    let (b1, b2) = charts.basis[block].expect("normal chart");
    let first = slots.add(spec.offset, 2);
    retract_unit(
        &normals[obs].into_inner(),
        &b1,
        &b2,
        J::variable(0.0, first),
        J::variable(0.0, first + 1),
    )
}

fn rows_from_jets(values: &[J], used: usize) -> Vec<(f64, Vec<f64>)> {
    values
        .iter()
        .map(|j| (j.v, j.d.as_slice()[..used].to_vec()))
        .collect()
}

/// Evaluates residual and Jacobian of one block at the current state.
pub(crate) fn eval_block_jet(
    problem: &Problem,
    state: &ParameterState,
    layout: &Layout,
    charts: &Charts,
    rays: &[Vector3<f64>],
    kind: ResidualKind,
) -> Result<BlockJac, GeometryError> {
    let k = &problem.intrinsics;
    let mu = state.mu.get();
    let obs_list = problem.tracks.observations();
    match kind {
        ResidualKind::ReprojRef { obs } => {
            let o = &obs_list[obs];
            let r = problem.anchor();
            let ref_idx = problem.tracks.obs_index(r, o.point).expect("ref obs");
            let mut slots = Slots::new();
            let pose = jet_pose(state, layout, o.image, &mut slots);
            let bi = layout.iface_block[o.image];
            let br = layout.iface_block[r];
            let plane_i = jet_plane(state, layout, charts, bi, &mut slots);
            let plane_r = if br == bi {
                plane_i
            } else {
                jet_plane(state, layout, charts, br, &mut slots)
            };
            let PointParams::Depths(depths) = &state.points else {
                return Err(GeometryError::InvalidParameter("depths expected"));
            };
            let dj_spec = &layout.blocks[layout.point_block[o.point]];
            let first = slots.add(dj_spec.offset, 1);
            let d_j = J::variable(depths[o.point], first);
            let n_rj = plane_r.normal;
            let res = reproj_residual_ref_g(
                k,
                mu,
                &rays[ref_idx],
                &o.pixel,
                &pose,
                &plane_i,
                &plane_r,
                d_j,
                &n_rj,
            )?;
            Ok(BlockJac {
                rows: rows_from_jets(&[res.x, res.y], slots.cols.len()),
                cols: slots.cols,
            })
        }
        ResidualKind::ReprojNoRef { obs } => {
            let o = &obs_list[obs];
            let mut slots = Slots::new();
            let pose = jet_pose(state, layout, o.image, &mut slots);
            let plane_i = jet_plane(state, layout, charts, layout.iface_block[o.image], &mut slots);
            let PointParams::Coords(coords) = &state.points else {
                return Err(GeometryError::InvalidParameter("coords expected"));
            };
            let spec = &layout.blocks[layout.point_block[o.point]];
            let first = slots.add(spec.offset, 3);
            let p = coords[o.point];
            let p_j = Vector3::new(
                J::variable(p.x, first),
                J::variable(p.y, first + 1),
                J::variable(p.z, first + 2),
            );
            let res = reproj_residual_noref_g(k, mu, &o.pixel, &pose, &plane_i, &p_j)?;
            Ok(BlockJac {
                rows: rows_from_jets(&[res.x, res.y], slots.cols.len()),
                cols: slots.cols,
            })
        }
        ResidualKind::RayPoint { obs } => {
            let o = &obs_list[obs];
            let r = problem.anchor();
            let ref_idx = problem.tracks.obs_index(r, o.point).expect("ref obs");
            let mut slots = Slots::new();
            let pose = jet_pose(state, layout, o.image, &mut slots);
            let bi = layout.iface_block[o.image];
            let br = layout.iface_block[r];
            let plane_i = jet_plane(state, layout, charts, bi, &mut slots);
            let plane_r = if br == bi {
                plane_i
            } else {
                jet_plane(state, layout, charts, br, &mut slots)
            };
            let PointParams::Depths(depths) = &state.points else {
                return Err(GeometryError::InvalidParameter("depths expected"));
            };
            let dj_spec = &layout.blocks[layout.point_block[o.point]];
            let first = slots.add(dj_spec.offset, 1);
            let d_j = J::variable(depths[o.point], first);
            let normals = state.local_normals.as_ref().expect("soft normals");
            let n_rj = jet_local_normal(normals, layout, charts, ref_idx, &mut slots);
            let n_ij = jet_local_normal(normals, layout, charts, obs, &mut slots);
            let res = ray_point_residual_g(
                mu,
                &rays[ref_idx],
                &rays[obs],
                &pose,
                &plane_i,
                &plane_r,
                d_j,
                &n_rj,
                &n_ij,
                1.0 / problem.reference_depth,
            )?;
            Ok(BlockJac {
                rows: rows_from_jets(&[res.x, res.y, res.z], slots.cols.len()),
                cols: slots.cols,
            })
        }
        ResidualKind::SoftReg { obs, member } => {
            let normals = state.local_normals.as_ref().expect("soft normals");
            let hood = &problem.neighborhoods().expect("neighborhoods")[obs];
            let len = hood.len() as f64;
            let sqrt_lambda = problem.lambda.sqrt();
            let mut mean = Vector3::zeros();
            for &m in hood {
                mean += normals[m].into_inner();
            }
            mean /= len;
            let value = (normals[hood[member]].into_inner() - mean) * sqrt_lambda;

            let mut cols = Vec::with_capacity(2 * hood.len());
            let mut rows: Vec<(f64, Vec<f64>)> = (0..3)
                .map(|row| (value[row], Vec::with_capacity(2 * hood.len())))
                .collect();
            for (pos, &m) in hood.iter().enumerate() {
                let block = layout.normal_block[m].expect("normal block");
                let spec = &layout.blocks[block];
                cols.push(spec.offset);
                cols.push(spec.offset + 1);
                let (b1, b2) = charts.basis[block].expect("normal chart");
                // d(value)/d(tangent_m) = sqrt(lambda) (1[m=k] - 1/L) B_m;
                // the retraction Jacobian at zero is exactly [b1 b2].
                let w = sqrt_lambda * (if pos == member { 1.0 } else { 0.0 } - 1.0 / len);
                for (row, jac_row) in rows.iter_mut().enumerate() {
                    jac_row.1.push(w * b1[row]);
                    jac_row.1.push(w * b2[row]);
                }
            }
            Ok(BlockJac { cols, rows })
        }
    }
}

/// Precomputed unit pixel rays, one per observation.
pub(crate) fn pixel_rays(problem: &Problem) -> Vec<Vector3<f64>> {
    problem
        .tracks
        .observations()
        .iter()
        .map(|o| problem.intrinsics.pixel_to_ray(&o.pixel).into_inner())
        .collect()
}

/// Human-readable block id for numerical-failure diagnostics.
pub(crate) fn block_id(problem: &Problem, kind: ResidualKind) -> String {
    let obs_list = problem.tracks.observations();
    match kind {
        ResidualKind::ReprojRef { obs } => {
            let o = &obs_list[obs];
            format!("reproj-ref(image {}, point {})", o.image, o.point)
        }
        ResidualKind::ReprojNoRef { obs } => {
            let o = &obs_list[obs];
            format!("reproj-noref(image {}, point {})", o.image, o.point)
        }
        ResidualKind::RayPoint { obs } => {
            let o = &obs_list[obs];
            format!("ray-point(image {}, point {})", o.image, o.point)
        }
        ResidualKind::SoftReg { obs, member } => {
            let o = &obs_list[obs];
            format!(
                "soft-reg(image {}, point {}, member {member})",
                o.image, o.point
            )
        }
    }
}
