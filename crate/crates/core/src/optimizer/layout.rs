//! Tangent-space layout of the free parameter blocks.
//!
//! Gauge fixing and scenario ties are realized structurally: the reference
//! pose and reference interface depth simply have no tangent coordinates, and
//! tied interfaces share one block, so the solver updates them once.

use nalgebra::{DVector, Vector3};

use crate::geometry::InterfacePlane;
use crate::math::{log_rotation, rotation_matrix, tangent_basis};
use crate::scenarios::{ConstraintMode, Problem, ScenarioKind};
use crate::state::{ParameterState, PointParams};

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum BlockKind {
    /// 6 dof: axis-angle increment (right-multiplied) + translation.
    Pose { image: usize },
    /// 2 dof normal tangent, plus depth when not gauge-fixed. Tied scenarios
    /// list every image sharing the block.
    Interface { images: Vec<usize>, depth_free: bool },
    /// 1 dof depth along the reference refracted ray.
    PointDepth { point: usize },
    /// 3 dof free point.
    PointCoord { point: usize },
    /// 2 dof tangent of a per-observation unit normal.
    LocalNormal { obs: usize },
}

#[derive(Debug, Clone)]
pub(crate) struct BlockSpec {
    pub kind: BlockKind,
    pub offset: usize,
    pub dim: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub blocks: Vec<BlockSpec>,
    pub total_dim: usize,
    /// Per image: its pose block, `None` when gauge-fixed or scenario-tied.
    pub pose_block: Vec<Option<usize>>,
    /// Per image: the interface block (shared under static-interface ties).
    pub iface_block: Vec<usize>,
    /// Per point: its parameter block.
    pub point_block: Vec<usize>,
    /// Per observation: the local-normal block (soft mode only).
    pub normal_block: Vec<Option<usize>>,
}

pub(crate) fn build_layout(problem: &Problem) -> Layout {
    let images = problem.tracks.image_count();
    let points = problem.tracks.point_count();
    let obs_count = problem.tracks.observations().len();
    let anchor = problem.anchor();

    let mut blocks: Vec<BlockSpec> = Vec::new();
    let mut offset = 0usize;
    let mut push = |blocks: &mut Vec<BlockSpec>, kind: BlockKind, dim: usize| -> usize {
        let idx = blocks.len();
        blocks.push(BlockSpec {
            kind,
            offset,
            dim,
        });
        offset += dim;
        idx
    };

    let mut pose_block = vec![None; images];
    if problem.scenario != ScenarioKind::FixedCamera {
        for i in 0..images {
            if i != anchor {
                pose_block[i] = Some(push(&mut blocks, BlockKind::Pose { image: i }, 6));
            }
        }
    }

    let mut iface_block = vec![0usize; images];
    match problem.scenario {
        ScenarioKind::StaticInterface => {
            let idx = push(
                &mut blocks,
                BlockKind::Interface {
                    images: (0..images).collect(),
                    depth_free: false,
                },
                2,
            );
            iface_block.fill(idx);
        }
        _ => {
            for (i, slot) in iface_block.iter_mut().enumerate() {
                let depth_free = i != anchor;
                *slot = push(
                    &mut blocks,
                    BlockKind::Interface {
                        images: vec![i],
                        depth_free,
                    },
                    if depth_free { 3 } else { 2 },
                );
            }
        }
    }

    let mut point_block = vec![0usize; points];
    for (j, slot) in point_block.iter_mut().enumerate() {
        *slot = match problem.mode {
            ConstraintMode::HardNoRef => push(&mut blocks, BlockKind::PointCoord { point: j }, 3),
            _ => push(&mut blocks, BlockKind::PointDepth { point: j }, 1),
        };
    }

    let mut normal_block = vec![None; obs_count];
    if problem.mode == ConstraintMode::Soft {
        for (idx, slot) in normal_block.iter_mut().enumerate() {
            *slot = Some(push(&mut blocks, BlockKind::LocalNormal { obs: idx }, 2));
        }
    }

    Layout {
        total_dim: offset,
        blocks,
        pose_block,
        iface_block,
        point_block,
        normal_block,
    }
}

/// Per-iteration tangent charts: the orthonormal bases of every unit-vector
/// block, anchored at the current state. Jacobian evaluation and retraction
/// must use the same charts.
#[derive(Debug, Clone)]
pub(crate) struct Charts {
    /// Per layout block: basis for Interface/LocalNormal blocks.
    pub basis: Vec<Option<(Vector3<f64>, Vector3<f64>)>>,
}

pub(crate) fn build_charts(layout: &Layout, state: &ParameterState) -> Charts {
    let basis = layout
        .blocks
        .iter()
        .map(|b| match &b.kind {
            BlockKind::Interface { images, .. } => Some(tangent_basis(
                &state.interfaces[images[0]].normal().into_inner(),
            )),
            BlockKind::LocalNormal { obs } => {
                let normals = state
                    .local_normals
                    .as_ref()
                    .expect("soft mode carries local normals");
                Some(tangent_basis(&normals[*obs].into_inner()))
            }
            _ => None,
        })
        .collect();
    Charts { basis }
}

/// Applies a tangent step; `None` means the step leaves the feasible set
/// (non-positive depths, invalid plane) and must be rejected.
pub(crate) fn retract(
    state: &ParameterState,
    layout: &Layout,
    charts: &Charts,
    dx: &DVector<f64>,
) -> Option<ParameterState> {
    let mut out = state.clone();
    for (block_idx, block) in layout.blocks.iter().enumerate() {
        let o = block.offset;
        match &block.kind {
            BlockKind::Pose { image } => {
                let dr = Vector3::new(dx[o], dx[o + 1], dx[o + 2]);
                let dt = Vector3::new(dx[o + 3], dx[o + 4], dx[o + 5]);
                let pose = &mut out.poses[*image];
                let r_new = pose.rotation_matrix() * rotation_matrix(&dr);
                pose.rotation = log_rotation(&r_new);
                pose.translation += dt;
            }
            BlockKind::Interface { images, depth_free } => {
                let (b1, b2) = charts.basis[block_idx].expect("interface chart");
                let base = &state.interfaces[images[0]];
                let n_new = base.normal().into_inner() + b1 * dx[o] + b2 * dx[o + 1];
                let d_new = if *depth_free {
                    base.depth() + dx[o + 2]
                } else {
                    base.depth()
                };
                let plane = InterfacePlane::new(n_new, d_new).ok()?;
                for &i in images {
                    out.interfaces[i] = plane;
                }
            }
            BlockKind::PointDepth { point } => {
                let PointParams::Depths(depths) = &mut out.points else {
                    unreachable!("layout matches parameterization");
                };
                let d = depths[*point] + dx[o];
                if !(d > 0.0 && d.is_finite()) {
                    return None;
                }
                depths[*point] = d;
            }
            BlockKind::PointCoord { point } => {
                let PointParams::Coords(coords) = &mut out.points else {
                    unreachable!("layout matches parameterization");
                };
                coords[*point] += Vector3::new(dx[o], dx[o + 1], dx[o + 2]);
            }
            BlockKind::LocalNormal { obs } => {
                let (b1, b2) = charts.basis[block_idx].expect("normal chart");
                let normals = out.local_normals.as_mut().expect("soft normals");
                let n_new = normals[*obs].into_inner() + b1 * dx[o] + b2 * dx[o + 1];
                normals[*obs] = nalgebra::Unit::new_normalize(n_new);
            }
        }
    }
    Some(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{CameraIntrinsics, RefractiveIndex};
    use crate::scenarios::{ProblemOptions, ScenarioKind};
    use crate::state::{Observation, Pose, TrackSet};
    use nalgebra::Vector2;

    fn problem(scenario: ScenarioKind, mode: ConstraintMode) -> Problem {
        let images = 3;
        let points = 16;
        let mut obs = Vec::new();
        for i in 0..images {
            for j in 0..points {
                obs.push(Observation {
                    image: i,
                    point: j,
                    pixel: Vector2::new(100.0 + 20.0 * j as f64, 100.0 + 10.0 * i as f64),
                });
            }
        }
        let reference = if mode.requires_reference() { Some(0) } else { None };
        Problem::new(
            TrackSet::new(obs, images, points, reference).unwrap(),
            CameraIntrinsics::new(600.0, 600.0, 320.0, 240.0).unwrap(),
            RefractiveIndex::new(1.333).unwrap(),
            scenario,
            mode,
            ProblemOptions {
                neighborhood_radius_px: 100.0,
                ..Default::default()
            },
        )
        .unwrap()
    }

    fn state_for(problem: &Problem) -> ParameterState {
        let images = problem.tracks.image_count();
        let points = problem.tracks.point_count();
        let plane = InterfacePlane::new(Vector3::new(0.0, 0.0, 1.0), 1.0).unwrap();
        ParameterState {
            poses: vec![Pose::identity(); images],
            interfaces: vec![plane; images],
            points: match problem.mode {
                ConstraintMode::HardNoRef => {
                    PointParams::Coords(vec![Vector3::new(0.0, 0.0, 2.0); points])
                }
                _ => PointParams::Depths(vec![1.0; points]),
            },
            local_normals: (problem.mode == ConstraintMode::Soft).then(|| {
                vec![
                    nalgebra::Unit::new_normalize(Vector3::new(0.0, 0.0, 1.0));
                    problem.tracks.observations().len()
                ]
            }),
            mu: problem.mu,
        }
    }

    #[test]
    fn dimensions_match_gauge_and_ties() {
        // Moving + hard-ref: 6(I-1) poses + (3I - 1) interfaces + J depths.
        let p = problem(ScenarioKind::MovingInterface, ConstraintMode::HardWithRef);
        let l = build_layout(&p);
        assert_eq!(l.total_dim, 6 * 2 + (3 * 3 - 1) + 16);
        // Static + hard-ref: shared interface contributes 2.
        let p = problem(ScenarioKind::StaticInterface, ConstraintMode::HardWithRef);
        let l = build_layout(&p);
        assert_eq!(l.total_dim, 6 * 2 + 2 + 16);
        assert!(l.iface_block.iter().all(|&b| b == l.iface_block[0]));
        // Fixed camera: no pose blocks at all.
        let p = problem(ScenarioKind::FixedCamera, ConstraintMode::HardWithRef);
        let l = build_layout(&p);
        assert!(l.pose_block.iter().all(|b| b.is_none()));
        assert_eq!(l.total_dim, (3 * 3 - 1) + 16);
        // No-reference: 3 dof per point, gauge on image 0.
        let p = problem(ScenarioKind::MovingInterface, ConstraintMode::HardNoRef);
        let l = build_layout(&p);
        assert_eq!(l.total_dim, 6 * 2 + (3 * 3 - 1) + 3 * 16);
        assert!(l.pose_block[0].is_none());
        // Soft adds two dof per observation.
        let p = problem(ScenarioKind::MovingInterface, ConstraintMode::Soft);
        let l = build_layout(&p);
        assert_eq!(l.total_dim, 6 * 2 + (3 * 3 - 1) + 16 + 2 * 3 * 16);
    }

    #[test]
    fn retract_keeps_gauge_and_ties() {
        let p = problem(ScenarioKind::StaticInterface, ConstraintMode::HardWithRef);
        let l = build_layout(&p);
        let s = state_for(&p);
        let charts = build_charts(&l, &s);
        let mut dx = DVector::zeros(l.total_dim);
        for (i, v) in dx.iter_mut().enumerate() {
            *v = 1e-3 * ((i as f64 * 0.7).sin());
        }
        let out = retract(&s, &l, &charts, &dx).unwrap();
        // Gauge blocks untouched bit-exactly.
        assert_eq!(out.poses[0], s.poses[0]);
        assert_eq!(out.interfaces[0].depth(), s.interfaces[0].depth());
        // Ties: all interfaces remain one block.
        for w in out.interfaces.windows(2) {
            assert_eq!(w[0], w[1]);
        }
        // Unit norms hold after retraction.
        for plane in &out.interfaces {
            assert!((plane.normal().norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn retract_rejects_nonpositive_depths() {
        let p = problem(ScenarioKind::MovingInterface, ConstraintMode::HardWithRef);
        let l = build_layout(&p);
        let s = state_for(&p);
        let charts = build_charts(&l, &s);
        let mut dx = DVector::zeros(l.total_dim);
        let depth_block = &l.blocks[l.point_block[0]];
        dx[depth_block.offset] = -2.0;
        assert!(retract(&s, &l, &charts, &dx).is_none());
    }
}
