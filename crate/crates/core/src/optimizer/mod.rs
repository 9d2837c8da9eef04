//! Joint Levenberg-Marquardt minimization over poses, interfaces, points and
//! local normals, with gauge fixing and scenario ties baked into the
//! parameter layout.

mod blocks;
mod layout;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::geometry::GeometryError;
use crate::residuals::{eval_block, residual_blocks, ResidualKind};
use crate::scenarios::{apply_scenario_ties, Problem};
use crate::state::{ParameterState, StateError};

use blocks::{block_id, eval_block_jet, pixel_rays};
use layout::{build_charts, build_layout, retract};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolveError {
    #[error("non-finite residual or Jacobian in block {block}")]
    NumericalFailure { block: String },
    #[error("initial state is infeasible: {0}")]
    InfeasibleInitialState(String),
    #[error(transparent)]
    State(#[from] StateError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TerminationReason {
    /// Relative energy decrease fell below the function tolerance.
    FunctionTolerance,
    /// Max gradient entry fell below the gradient tolerance.
    GradientTolerance,
    /// Damping grew past its cap without an acceptable step.
    Stalled,
    /// Iteration budget exhausted without convergence.
    MaxIterations,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions {
    pub max_iterations: usize,
    /// Relative decrease of the energy below which iteration stops.
    pub function_tolerance: f64,
    /// Infinity-norm of the gradient below which iteration stops.
    pub gradient_tolerance: f64,
    pub initial_damping: f64,
    /// Optional Huber loss applied to the data residual blocks (not the soft
    /// regularizer), threshold in the residual's native units.
    pub huber_delta: Option<f64>,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            max_iterations: 200,
            function_tolerance: 1e-12,
            gradient_tolerance: 1e-10,
            initial_damping: 1e-4,
            huber_delta: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub initial_energy: f64,
    pub final_energy: f64,
    pub iterations: usize,
    pub termination: TerminationReason,
    /// RMS over all residual components at the solution.
    pub residual_rms: f64,
    /// Tangent norms of the accepted updates, in order.
    pub step_norms: Vec<f64>,
}

/// Huber rho(s) on the squared norm s, and its derivative.
fn robust_loss(s: f64, delta: Option<f64>) -> (f64, f64) {
    match delta {
        None => (s, 1.0),
        Some(d) => {
            let d2 = d * d;
            if s <= d2 {
                (s, 1.0)
            } else {
                let sq = s.sqrt();
                (2.0 * d * sq - d2, d / sq)
            }
        }
    }
}

fn is_data_block(kind: ResidualKind) -> bool {
    !matches!(kind, ResidualKind::SoftReg { .. })
}

/// Robustified total energy; `None` when the state is infeasible for some
/// residual (used to reject trial steps).
fn energy(
    problem: &Problem,
    state: &ParameterState,
    kinds: &[ResidualKind],
    huber: Option<f64>,
) -> Option<f64> {
    let mut total = 0.0;
    for &kind in kinds {
        let r = eval_block(problem, state, kind).ok()?;
        let s: f64 = r.iter().map(|v| v * v).sum();
        if !s.is_finite() {
            return None;
        }
        let (rho, _) = robust_loss(s, if is_data_block(kind) { huber } else { None });
        total += rho;
    }
    Some(total)
}

/// Joint Levenberg-Marquardt solve from the given initial state.
///
/// Accepted steps are monotone nonincreasing in energy. The reference pose
/// and reference interface depth are held constant (they carry no tangent
/// coordinates), scenario-tied blocks are shared, and unit vectors are
/// re-normalized by their tangent-plane retractions after every update.
/// Non-convergence is reported in the [`SolveReport`], not as an error.
pub fn solve(
    problem: &Problem,
    initial: &ParameterState,
    options: &SolveOptions,
) -> Result<(ParameterState, SolveReport), SolveError> {
    initial.validate(&problem.tracks)?;
    let mut state = apply_scenario_ties(initial, problem.scenario, problem.anchor());
    let layout = build_layout(problem);
    let kinds = residual_blocks(problem);
    let rays = pixel_rays(problem);
    let residual_components: usize = kinds.iter().map(|k| k.dim()).sum();

    let initial_energy = energy(problem, &state, &kinds, options.huber_delta)
        .ok_or_else(|| SolveError::InfeasibleInitialState("residuals not evaluable".into()))?;
    let mut current_energy = initial_energy;
    let mut damping = options.initial_damping;
    let mut step_norms = Vec::new();
    let mut termination = TerminationReason::MaxIterations;
    let mut iterations = 0;

    let n = layout.total_dim;
    'outer: for _ in 0..options.max_iterations {
        iterations += 1;
        let charts = build_charts(&layout, &state);

        // Assemble the normal equations from per-block Jacobians.
        let mut h = DMatrix::<f64>::zeros(n, n);
        let mut g = DVector::<f64>::zeros(n);
        for &kind in &kinds {
            let jac = eval_block_jet(problem, &state, &layout, &charts, &rays, kind)
                .map_err(|_| SolveError::NumericalFailure {
                    block: block_id(problem, kind),
                })?;
            let mut s = 0.0;
            for (value, row) in &jac.rows {
                s += value * value;
                if !value.is_finite() || row.iter().any(|v| !v.is_finite()) {
                    return Err(SolveError::NumericalFailure {
                        block: block_id(problem, kind),
                    });
                }
            }
            let (_, w) = robust_loss(
                s,
                if is_data_block(kind) {
                    options.huber_delta
                } else {
                    None
                },
            );
            for (value, row) in &jac.rows {
                for (a, &ca) in jac.cols.iter().enumerate() {
                    g[ca] += w * row[a] * value;
                    for (b, &cb) in jac.cols.iter().enumerate() {
                        h[(ca, cb)] += w * row[a] * row[b];
                    }
                }
            }
        }

        // Scale-aware gradient test: residual magnitudes enter g through the
        // Jacobian, so normalize by the curvature scale.
        let h_scale = (0..n).map(|i| h[(i, i)]).fold(0.0_f64, f64::max);
        if g.amax() <= options.gradient_tolerance * h_scale.max(1.0) {
            termination = TerminationReason::GradientTolerance;
            break;
        }

        // Damped steps until one decreases the energy.
        loop {
            let mut a = h.clone();
            for i in 0..n {
                a[(i, i)] += damping * h[(i, i)].max(1e-12);
            }
            let step = match a.cholesky() {
                Some(ch) => ch.solve(&(-&g)),
                None => {
                    damping *= 4.0;
                    if damping > 1e18 {
                        termination = TerminationReason::Stalled;
                        break 'outer;
                    }
                    continue;
                }
            };
            let trial = retract(&state, &layout, &charts, &step);
            let trial_energy = trial
                .as_ref()
                .and_then(|t| energy(problem, t, &kinds, options.huber_delta));
            match (trial, trial_energy) {
                (Some(t), Some(e)) if e < current_energy => {
                    let decrease = current_energy - e;
                    state = t;
                    step_norms.push(step.norm());
                    damping = (damping / 3.0).max(1e-15);
                    if decrease <= options.function_tolerance * current_energy.max(1e-300) {
                        current_energy = e;
                        termination = TerminationReason::FunctionTolerance;
                        break 'outer;
                    }
                    current_energy = e;
                    break;
                }
                _ => {
                    damping *= 4.0;
                    if damping > 1e18 {
                        termination = TerminationReason::Stalled;
                        break 'outer;
                    }
                }
            }
        }
    }

    let report = SolveReport {
        initial_energy,
        final_energy: current_energy,
        iterations,
        termination,
        residual_rms: (current_energy / residual_components.max(1) as f64).sqrt(),
        step_norms,
    };
    Ok((state, report))
}

/// Compares the solver's per-block Jacobians against central finite
/// differences of the residuals over the same tangent charts; returns the
/// maximum discrepancy (relative where the magnitude supports it, absolute
/// near zero).
pub fn check_gradients(problem: &Problem, state: &ParameterState) -> Result<f64, SolveError> {
    state.validate(&problem.tracks)?;
    let state = apply_scenario_ties(state, problem.scenario, problem.anchor());
    let layout = build_layout(problem);
    let charts = build_charts(&layout, &state);
    let kinds = residual_blocks(problem);
    let rays = pixel_rays(problem);
    let h = 1e-6;

    let mut worst: f64 = 0.0;
    for &kind in &kinds {
        let jac = eval_block_jet(problem, &state, &layout, &charts, &rays, kind).map_err(|_| {
            SolveError::NumericalFailure {
                block: block_id(problem, kind),
            }
        })?;
        // Entries far below the block's own scale sit under the finite
        // difference noise floor; compare those absolutely.
        let block_scale = jac
            .rows
            .iter()
            .flat_map(|(_, grad)| grad.iter())
            .fold(0.0_f64, |acc, v| acc.max(v.abs()));
        let denom_floor = (1e-4 * block_scale).max(1e-9);
        for (slot, &col) in jac.cols.iter().enumerate() {
            let mut dx = DVector::zeros(layout.total_dim);
            dx[col] = h;
            let plus_state = retract(&state, &layout, &charts, &dx);
            dx[col] = -h;
            let minus_state = retract(&state, &layout, &charts, &dx);
            let (Some(ps), Some(ms)) = (plus_state, minus_state) else {
                continue;
            };
            let (Ok(rp), Ok(rm)) = (
                eval_block(problem, &ps, kind),
                eval_block(problem, &ms, kind),
            ) else {
                continue;
            };
            for (row, (_, grad)) in jac.rows.iter().enumerate() {
                let fd = (rp[row] - rm[row]) / (2.0 * h);
                let ad = grad[slot];
                let err = (ad - fd).abs() / ad.abs().max(fd.abs()).max(denom_floor);
                worst = worst.max(err);
            }
        }
    }
    Ok(worst)
}
