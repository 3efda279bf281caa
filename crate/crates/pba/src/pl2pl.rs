//! Plane-to-plane baseline: every observation is collapsed to a plane fitted
//! once from its points, and each residual is the difference between two
//! global-frame closest-point vectors: the fitted plane mapped through the
//! current pose estimate, and the plane variable itself.
//!
//! This is the classical alternative the point-to-plane cost is measured
//! against. Its known weakness: closest-point differences taken in the
//! global frame are not invariant to a rigid change of that frame, so where
//! the map is anchored leaks into the cost.

use std::time::Instant;

use nalgebra::{Matrix3, Matrix3x6, SMatrix, Vector3};

use crate::error::PbaError;
use crate::geometry::{fit_plane, skew, PlaneCP, PlaneHesse, Pose, EPS_CP};
use crate::problem::{ProblemGraph, ProblemState};
use crate::solver::{run_lm, LeastSquares, LmConfig, Method, NormalEquations, SolveReport};

/// One observation reduced to its fitted sensor-frame plane. Produced once
/// from the raw points; never refit during iteration.
#[derive(Debug, Clone)]
pub struct PlaneObservationSummary {
    pub pose_index: usize,
    pub plane_index: usize,
    /// Canonical plane fitted to the observation's points.
    pub local_plane: PlaneHesse,
    /// Residual weight; [`summarize`] always sets 1.
    pub weight: f64,
}

/// Fits every observation. Observations whose points are too thin to fit a
/// plane are left out; their indices are returned so callers can warn about
/// them.
pub fn summarize(graph: &ProblemGraph) -> (Vec<PlaneObservationSummary>, Vec<usize>) {
    let mut summaries = Vec::with_capacity(graph.observations.len());
    let mut skipped = Vec::new();
    for (k, obs) in graph.observations.iter().enumerate() {
        let Ok(local_plane) = fit_plane(&obs.points) else {
            skipped.push(k);
            continue;
        };
        summaries.push(PlaneObservationSummary {
            pose_index: obs.pose_index,
            plane_index: obs.plane_index,
            local_plane,
            weight: 1.0,
        });
    }
    (summaries, skipped)
}

/// Closest-point difference, in the global frame, between the summary's
/// fitted plane mapped through `pose` and the plane variable.
///
/// Errors when the mapped plane passes through the global origin or the
/// plane variable's closest-point vector is too short to define a plane;
/// callers skip such residuals for the current iterate.
pub fn pl2pl_residual(
    pose: &Pose,
    global_plane: &PlaneCP,
    summary: &PlaneObservationSummary,
) -> Result<Vector3<f64>, PbaError> {
    let (residual, _, _) = residual_with_jacobians(pose, global_plane, summary)?;
    Ok(residual)
}

/// Residual vector with its pose and plane Jacobians.
pub type ResidualJacobians = (Vector3<f64>, Matrix3x6<f64>, Matrix3<f64>);

/// Residual plus its Jacobians with respect to the pose increment
/// `[theta; tau]` (rotation right-multiplied by `exp([theta]_x)`) and the
/// global plane's closest-point vector.
pub fn residual_with_jacobians(
    pose: &Pose,
    global_plane: &PlaneCP,
    summary: &PlaneObservationSummary,
) -> Result<ResidualJacobians, PbaError> {
    let r = global_plane.cp.norm();
    if r < EPS_CP {
        return Err(PbaError::DegeneratePlane(format!(
            "global closest-point vector norm {:e} is below {:e}",
            r, EPS_CP
        )));
    }
    // The fitted sensor-frame plane (n_s, d_s) expressed in the global frame:
    // points q = R p + t satisfy n_hat . q + d_hat = 0.
    let n_s = summary.local_plane.normal();
    let n_hat = pose.rotation * n_s;
    let d_hat = summary.local_plane.offset() - n_hat.dot(&pose.translation);
    if d_hat.abs() < EPS_CP {
        return Err(PbaError::DegeneratePlane(format!(
            "mapped plane offset {:e} passes through the global origin",
            d_hat
        )));
    }
    let residual = d_hat * n_hat - global_plane.cp;

    // d(n_hat)/d(theta) = -R [n_s]_x and d_hat = d_s - t . n_hat give
    // d(d_hat n_hat)/d(theta) = (n_hat t^T - d_hat I) R [n_s]_x; along tau
    // only the offset moves: d(d_hat n_hat)/d(tau) = -n_hat n_hat^T.
    let rotation_block =
        (n_hat * pose.translation.transpose() - d_hat * Matrix3::identity())
            * pose.rotation
            * skew(n_s);
    let mut j_pose = Matrix3x6::zeros();
    j_pose.fixed_view_mut::<3, 3>(0, 0).copy_from(&rotation_block);
    j_pose
        .fixed_view_mut::<3, 3>(0, 3)
        .copy_from(&(-n_hat * n_hat.transpose()));

    let j_plane: Matrix3<f64> = -Matrix3::identity();

    Ok((residual, j_pose, j_plane))
}

struct SummarySystem<'a> {
    graph: &'a ProblemGraph,
    summaries: &'a [PlaneObservationSummary],
}

impl SummarySystem<'_> {
    /// Accumulates every non-degenerate summary; degenerate ones are skipped
    /// for this iterate, matching the residual contract.
    fn try_assemble(&self, state: &ProblemState) -> Result<(NormalEquations, f64), PbaError> {
        let n_free = self.graph.poses.len().saturating_sub(1);
        let mut equations = NormalEquations::zeros(n_free, self.graph.planes.len());
        let mut cost = 0.0;
        for summary in self.summaries {
            let pose = &state.poses[summary.pose_index];
            let plane = &state.plane_cps[summary.plane_index];
            let (residual, j_pose, j_plane) =
                match residual_with_jacobians(pose, plane, summary) {
                    Ok(parts) => parts,
                    Err(PbaError::DegeneratePlane(_)) => continue,
                    Err(other) => return Err(other),
                };
            let w = summary.weight;
            cost += w * residual.norm_squared();
            equations.plane_hessians[summary.plane_index] +=
                w * j_plane.transpose() * j_plane;
            equations.plane_gradients[summary.plane_index] +=
                w * j_plane.transpose() * residual;
            if summary.pose_index > 0 {
                let free = summary.pose_index - 1;
                equations.pose_hessians[free] += w * j_pose.transpose() * j_pose;
                equations.pose_gradients[free] += w * j_pose.transpose() * residual;
                *equations
                    .couplings
                    .entry((free, summary.plane_index))
                    .or_insert_with(SMatrix::zeros) += w * j_pose.transpose() * j_plane;
            }
        }
        Ok((equations, cost))
    }
}

impl LeastSquares for SummarySystem<'_> {
    fn assemble(&self, state: &ProblemState) -> Result<(NormalEquations, f64), PbaError> {
        self.try_assemble(state)
    }

    fn cost(&self, state: &ProblemState) -> Result<f64, PbaError> {
        let mut cost = 0.0;
        for summary in self.summaries {
            let pose = &state.poses[summary.pose_index];
            let plane = &state.plane_cps[summary.plane_index];
            match pl2pl_residual(pose, plane, summary) {
                Ok(residual) => cost += summary.weight * residual.norm_squared(),
                Err(PbaError::DegeneratePlane(_)) => continue,
                Err(other) => return Err(other),
            }
        }
        Ok(cost)
    }
}

/// Total plane-to-plane cost of `state` against the given summaries,
/// skipping degenerate residuals. The baseline analogue of the point cost.
pub fn total_cost_pl2pl(
    graph: &ProblemGraph,
    summaries: &[PlaneObservationSummary],
    state: &ProblemState,
) -> Result<f64, PbaError> {
    state.check_matches(graph)?;
    SummarySystem { graph, summaries }.cost(state)
}

/// Runs the shared LM loop over plane-to-plane residuals. Same contract as
/// the point-based solve; observations that cannot be summarized are skipped
/// up front.
pub fn solve_pl2pl(
    graph: &ProblemGraph,
    initial: &ProblemState,
    config: &LmConfig,
) -> Result<(ProblemState, SolveReport), PbaError> {
    initial.check_matches(graph)?;
    let setup_start = Instant::now();
    let (summaries, skipped) = summarize(graph);
    if summaries.is_empty() {
        return Err(PbaError::DegenerateFit(format!(
            "all {} observations were too degenerate to summarize",
            skipped.len()
        )));
    }
    let system = SummarySystem {
        graph,
        summaries: &summaries,
    };
    let init_seconds = setup_start.elapsed().as_secs_f64();
    run_lm(&system, initial, config, Method::Pl2Pl, 0.0, init_seconds)
}
