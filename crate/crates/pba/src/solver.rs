//! Levenberg-Marquardt over poses and closest-point planes, with the plane
//! block eliminated by a Schur complement.
//!
//! Pose 0 is the gauge anchor: it owns no variables, so the damped system
//! has 6(N-1) pose unknowns and 3M plane unknowns. Both the compressed and
//! the per-point backends assemble the same normal equations; they differ
//! only in whether an observation contributes through its reduced 4 x 13
//! block or through all K coefficient rows.

use std::collections::BTreeMap;
use std::fmt;
use std::time::Instant;

use nalgebra::{
    Cholesky, DMatrix, DVector, Matrix3, Matrix6, Matrix6x3, SMatrix, SVector, Vector3, Vector6,
};

use crate::error::PbaError;
use crate::geometry::PlaneCP;
use crate::problem::{ProblemGraph, ProblemState};
use crate::reduction::{state_coefficients, state_vector, ReducedBlock, COEFF_DIM};

/// Which residual backend a solve runs on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Compressed blocks: one QR per observation up front, then
    /// point-count-independent iterations.
    Reduced,
    /// Per-point rows: every iteration touches all K rows of every
    /// observation.
    Direct,
    /// Plane-to-plane baseline: observations collapsed to fitted planes.
    Pl2Pl,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Method::Reduced => "reduced",
            Method::Direct => "direct",
            Method::Pl2Pl => "pl2pl",
        };
        f.write_str(name)
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "reduced" => Ok(Method::Reduced),
            "direct" => Ok(Method::Direct),
            "pl2pl" => Ok(Method::Pl2Pl),
            other => Err(format!(
                "unknown method '{other}' (expected reduced, direct, or pl2pl)"
            )),
        }
    }
}

/// Levenberg-Marquardt controls. The defaults match the CLI defaults.
#[derive(Debug, Clone)]
pub struct LmConfig {
    pub method: Method,
    pub max_iterations: usize,
    /// Stop when an accepted step decreases the cost by at most
    /// `function_tolerance * (cost + 1e-20)`.
    pub function_tolerance: f64,
    /// Stop when a proposed step's norm is at most
    /// `parameter_tolerance * (state_norm + parameter_tolerance)`.
    pub parameter_tolerance: f64,
    pub lambda_init: f64,
    pub lambda_increase: f64,
    pub lambda_decrease: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            method: Method::Reduced,
            max_iterations: 1000,
            function_tolerance: 1e-10,
            parameter_tolerance: 1e-10,
            lambda_init: 1e-4,
            lambda_increase: 10.0,
            lambda_decrease: 10.0,
        }
    }
}

/// Undamped normal equations in block form. Pose blocks are indexed by
/// free-pose index (`pose_index - 1`); the anchor contributes nothing.
#[derive(Debug, Clone)]
pub struct NormalEquations {
    pub pose_hessians: Vec<Matrix6<f64>>,
    pub plane_hessians: Vec<Matrix3<f64>>,
    /// Off-diagonal coupling blocks keyed by (free pose, plane).
    pub couplings: BTreeMap<(usize, usize), Matrix6x3<f64>>,
    pub pose_gradients: Vec<Vector6<f64>>,
    pub plane_gradients: Vec<Vector3<f64>>,
}

impl NormalEquations {
    pub fn zeros(n_free_poses: usize, n_planes: usize) -> Self {
        NormalEquations {
            pose_hessians: vec![Matrix6::zeros(); n_free_poses],
            plane_hessians: vec![Matrix3::zeros(); n_planes],
            couplings: BTreeMap::new(),
            pose_gradients: vec![Vector6::zeros(); n_free_poses],
            plane_gradients: vec![Vector3::zeros(); n_planes],
        }
    }

    pub fn n_free_poses(&self) -> usize {
        self.pose_hessians.len()
    }

    pub fn n_planes(&self) -> usize {
        self.plane_hessians.len()
    }
}

/// One LM update: per-free-pose `[theta; tau]` stacked with per-plane
/// closest-point increments.
#[derive(Debug, Clone)]
pub struct StepVector {
    pub pose_steps: Vec<Vector6<f64>>,
    pub plane_steps: Vec<Vector3<f64>>,
}

impl StepVector {
    pub fn norm(&self) -> f64 {
        let mut sq = 0.0;
        for s in &self.pose_steps {
            sq += s.norm_squared();
        }
        for s in &self.plane_steps {
            sq += s.norm_squared();
        }
        sq.sqrt()
    }
}

/// Why a solve stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    FunctionTolerance,
    ParameterTolerance,
    MaxIterations,
}

impl fmt::Display for Termination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Termination::FunctionTolerance => "function_tolerance",
            Termination::ParameterTolerance => "parameter_tolerance",
            Termination::MaxIterations => "max_iterations",
        };
        f.write_str(name)
    }
}

/// One row of the iteration trace. Rejected steps keep the previous cost and
/// record the increased lambda.
#[derive(Debug, Clone)]
pub struct IterationRecord {
    /// 1-based; every pass through the LM loop counts, accepted or not.
    pub iteration: usize,
    pub cost: f64,
    pub lambda: f64,
    pub step_norm: f64,
    /// Seconds since the optimization loop started.
    pub wall_time: f64,
}

/// Everything a solve reports besides the refined state.
#[derive(Debug, Clone)]
pub struct SolveReport {
    pub method: Method,
    pub termination: Termination,
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    /// Seconds spent compressing observations (zero for direct and pl2pl).
    pub qr_seconds: f64,
    /// Remaining setup seconds before the first iteration.
    pub init_seconds: f64,
    /// Seconds inside the iteration loop.
    pub optimization_seconds: f64,
    pub trace: Vec<IterationRecord>,
}

/// Where assembly gets its Jacobian/residual rows.
pub enum BlockProvider<'a> {
    /// Compressed blocks, aligned with nothing: each block carries its own
    /// pose and plane indices.
    Reduced(&'a [ReducedBlock]),
    /// Cached per-point coefficient matrices, one per observation, in
    /// `graph.observations` order.
    Direct(&'a [DMatrix<f64>]),
}

/// Accumulates one observation's contribution from its padded reduced block.
#[inline]
fn accumulate_reduced(
    equations: &mut NormalEquations,
    pose_index: usize,
    plane_index: usize,
    m: &SMatrix<f64, 4, COEFF_DIM>,
    nu: &SVector<f64, COEFF_DIM>,
    v_pose: &SMatrix<f64, COEFF_DIM, 6>,
    v_plane: &SMatrix<f64, COEFF_DIM, 3>,
) -> f64 {
    let delta: SVector<f64, 4> = m * nu;
    let j_plane: SMatrix<f64, 4, 3> = m * v_plane;
    equations.plane_hessians[plane_index] += j_plane.transpose() * j_plane;
    equations.plane_gradients[plane_index] += j_plane.transpose() * delta;
    if pose_index > 0 {
        let j_pose: SMatrix<f64, 4, 6> = m * v_pose;
        let free = pose_index - 1;
        equations.pose_hessians[free] += j_pose.transpose() * j_pose;
        equations.pose_gradients[free] += j_pose.transpose() * delta;
        *equations
            .couplings
            .entry((free, plane_index))
            .or_insert_with(Matrix6x3::zeros) += j_pose.transpose() * j_plane;
    }
    delta.norm_squared()
}

/// Builds the undamped normal equations and returns them with the cost at
/// `state`. The two providers produce the same blocks up to floating-point
/// rounding; only the work per observation differs.
pub fn assemble(
    graph: &ProblemGraph,
    state: &ProblemState,
    provider: &BlockProvider,
) -> Result<(NormalEquations, f64), PbaError> {
    state.check_matches(graph)?;
    let n_free = graph.poses.len().saturating_sub(1);
    let mut equations = NormalEquations::zeros(n_free, graph.planes.len());
    let mut cost = 0.0;
    match provider {
        BlockProvider::Reduced(blocks) => {
            for block in *blocks {
                let coeffs = state_coefficients(
                    &state.poses[block.pose_index],
                    &state.plane_cps[block.plane_index],
                )?;
                cost += accumulate_reduced(
                    &mut equations,
                    block.pose_index,
                    block.plane_index,
                    &block.padded(),
                    &coeffs.nu,
                    &coeffs.v_pose,
                    &coeffs.v_plane,
                );
            }
        }
        BlockProvider::Direct(coefficient_matrices) => {
            if coefficient_matrices.len() != graph.observations.len() {
                return Err(PbaError::LengthMismatch {
                    expected: graph.observations.len(),
                    actual: coefficient_matrices.len(),
                });
            }
            for (obs, c) in graph.observations.iter().zip(*coefficient_matrices) {
                let coeffs = state_coefficients(
                    &state.poses[obs.pose_index],
                    &state.plane_cps[obs.plane_index],
                )?;
                let delta: DVector<f64> = c * coeffs.nu;
                let j_plane = c * coeffs.v_plane;
                cost += delta.norm_squared();
                equations.plane_hessians[obs.plane_index] += j_plane.transpose() * &j_plane;
                equations.plane_gradients[obs.plane_index] += j_plane.transpose() * &delta;
                if obs.pose_index > 0 {
                    let j_pose = c * coeffs.v_pose;
                    let free = obs.pose_index - 1;
                    equations.pose_hessians[free] += j_pose.transpose() * &j_pose;
                    equations.pose_gradients[free] += j_pose.transpose() * &delta;
                    *equations
                        .couplings
                        .entry((free, obs.plane_index))
                        .or_insert_with(Matrix6x3::zeros) += j_pose.transpose() * &j_plane;
                }
            }
        }
    }
    Ok((equations, cost))
}

/// Cost at `state` through the given provider, without forming Jacobians.
pub fn evaluate_cost(
    graph: &ProblemGraph,
    state: &ProblemState,
    provider: &BlockProvider,
) -> Result<f64, PbaError> {
    state.check_matches(graph)?;
    let mut cost = 0.0;
    match provider {
        BlockProvider::Reduced(blocks) => {
            for block in *blocks {
                let nu = state_vector(
                    &state.poses[block.pose_index],
                    &state.plane_cps[block.plane_index],
                )?;
                let delta: SVector<f64, 4> = block.padded() * nu;
                cost += delta.norm_squared();
            }
        }
        BlockProvider::Direct(coefficient_matrices) => {
            if coefficient_matrices.len() != graph.observations.len() {
                return Err(PbaError::LengthMismatch {
                    expected: graph.observations.len(),
                    actual: coefficient_matrices.len(),
                });
            }
            for (obs, c) in graph.observations.iter().zip(*coefficient_matrices) {
                let nu = state_vector(
                    &state.poses[obs.pose_index],
                    &state.plane_cps[obs.plane_index],
                )?;
                let delta: DVector<f64> = c * nu;
                cost += delta.norm_squared();
            }
        }
    }
    Ok(cost)
}

/// Solves the damped system `(H + lambda I) xi = -g` by eliminating the
/// plane blocks, solving the dense pose system, and back-substituting.
pub fn lm_step(equations: &NormalEquations, lambda: f64) -> Result<StepVector, PbaError> {
    let n_free = equations.n_free_poses();
    let n_planes = equations.n_planes();

    let mut plane_inverses = Vec::with_capacity(n_planes);
    for b in &equations.plane_hessians {
        let damped = b + Matrix3::identity() * lambda;
        let chol = Cholesky::new(damped).ok_or_else(|| {
            PbaError::SingularSystem("damped plane block is not positive definite".to_string())
        })?;
        plane_inverses.push(chol.inverse());
    }

    let mut per_plane: Vec<Vec<(usize, &Matrix6x3<f64>)>> = vec![Vec::new(); n_planes];
    for (&(free, plane), w) in &equations.couplings {
        per_plane[plane].push((free, w));
    }

    let pose_steps = if n_free == 0 {
        Vec::new()
    } else {
        let dim = 6 * n_free;
        let mut schur = DMatrix::<f64>::zeros(dim, dim);
        for (i, a) in equations.pose_hessians.iter().enumerate() {
            let damped = a + Matrix6::identity() * lambda;
            schur.view_mut((6 * i, 6 * i), (6, 6)).copy_from(&damped);
        }
        let mut rhs = DVector::<f64>::zeros(dim);
        for (i, g) in equations.pose_gradients.iter().enumerate() {
            rhs.rows_mut(6 * i, 6).copy_from(&(-g));
        }
        for j in 0..n_planes {
            let binv = &plane_inverses[j];
            let shifted_grad = binv * equations.plane_gradients[j];
            for (a_pos, &(free_a, w_a)) in per_plane[j].iter().enumerate() {
                let mut rows = rhs.rows_mut(6 * free_a, 6);
                rows += w_a * shifted_grad;
                let z: Matrix6x3<f64> = w_a * binv;
                // Couplings iterate in ascending free-pose order, so this
                // fills the upper block triangle only.
                for &(free_b, w_b) in per_plane[j][a_pos..].iter() {
                    let contribution: Matrix6<f64> = z * w_b.transpose();
                    let mut view = schur.view_mut((6 * free_a, 6 * free_b), (6, 6));
                    view -= contribution;
                }
            }
        }
        schur.fill_lower_triangle_with_upper_triangle();
        let chol = Cholesky::new(schur).ok_or_else(|| {
            PbaError::SingularSystem("damped pose system is not positive definite".to_string())
        })?;
        let xi = chol.solve(&rhs);
        (0..n_free)
            .map(|i| xi.fixed_rows::<6>(6 * i).into_owned())
            .collect::<Vec<_>>()
    };

    let mut plane_steps = Vec::with_capacity(n_planes);
    for j in 0..n_planes {
        let mut rhs_plane = -equations.plane_gradients[j];
        for &(free, w) in &per_plane[j] {
            rhs_plane -= w.transpose() * pose_steps[free];
        }
        plane_steps.push(plane_inverses[j] * rhs_plane);
    }

    Ok(StepVector {
        pose_steps,
        plane_steps,
    })
}

/// Applies an LM step: pose 0 is copied through untouched, every other pose
/// retracts its `[theta; tau]`, and plane closest-point vectors move
/// additively.
pub fn apply_step(state: &ProblemState, step: &StepVector) -> ProblemState {
    let mut poses = Vec::with_capacity(state.poses.len());
    poses.push(state.poses[0].clone());
    for (free, pose) in state.poses.iter().skip(1).enumerate() {
        let xi = &step.pose_steps[free];
        let theta = Vector3::new(xi[0], xi[1], xi[2]);
        let tau = Vector3::new(xi[3], xi[4], xi[5]);
        poses.push(pose.retract(&theta, &tau));
    }
    let plane_cps = state
        .plane_cps
        .iter()
        .zip(&step.plane_steps)
        .map(|(p, d)| PlaneCP::new(p.cp + d))
        .collect();
    ProblemState { poses, plane_cps }
}

/// A cost model the LM loop can iterate on. Implemented by the point-based
/// backends here and by the plane-to-plane baseline.
pub(crate) trait LeastSquares {
    fn assemble(&self, state: &ProblemState) -> Result<(NormalEquations, f64), PbaError>;
    fn cost(&self, state: &ProblemState) -> Result<f64, PbaError>;
}

struct PointSystem<'a> {
    graph: &'a ProblemGraph,
    provider: BlockProvider<'a>,
}

impl LeastSquares for PointSystem<'_> {
    fn assemble(&self, state: &ProblemState) -> Result<(NormalEquations, f64), PbaError> {
        assemble(self.graph, state, &self.provider)
    }

    fn cost(&self, state: &ProblemState) -> Result<f64, PbaError> {
        evaluate_cost(self.graph, state, &self.provider)
    }
}

/// The shared LM loop. Every pass appends a trace row and counts as one
/// iteration whether the step is accepted, rejected, or skipped because the
/// damped system was singular at the current lambda.
pub(crate) fn run_lm(
    system: &dyn LeastSquares,
    initial: &ProblemState,
    config: &LmConfig,
    method: Method,
    qr_seconds: f64,
    init_seconds: f64,
) -> Result<(ProblemState, SolveReport), PbaError> {
    let opt_start = Instant::now();
    let mut state = initial.clone();
    let (mut equations, mut cost) = system.assemble(&state)?;
    if !cost.is_finite() {
        return Err(PbaError::DivergedNaN { iteration: 0 });
    }
    let initial_cost = cost;
    let mut lambda = config.lambda_init;
    let mut termination = Termination::MaxIterations;
    let mut trace: Vec<IterationRecord> = Vec::new();
    let mut iterations = 0;

    while iterations < config.max_iterations {
        iterations += 1;
        match lm_step(&equations, lambda) {
            Ok(step) => {
                let step_norm = step.norm();
                let candidate = apply_step(&state, &step);
                let trial_cost = system.cost(&candidate)?;
                if !trial_cost.is_finite() {
                    return Err(PbaError::DivergedNaN {
                        iteration: iterations,
                    });
                }
                let accepted = trial_cost <= cost;
                let mut stop_function = false;
                if accepted {
                    let drop = cost - trial_cost;
                    stop_function = drop <= config.function_tolerance * (cost + 1e-20);
                    state = candidate;
                    cost = trial_cost;
                    lambda /= config.lambda_decrease;
                } else {
                    lambda *= config.lambda_increase;
                }
                // The step-size check applies to the proposal whether or not
                // it was accepted: once the damped system can only produce
                // negligible steps, no further progress is possible, and
                // deciding by the (noise-level) accept outcome instead would
                // let two bitwise-equivalent backends diverge at convergence.
                let stop_parameter = step_norm
                    <= config.parameter_tolerance
                        * (state.reference_norm() + config.parameter_tolerance);
                trace.push(IterationRecord {
                    iteration: iterations,
                    cost,
                    lambda,
                    step_norm,
                    wall_time: opt_start.elapsed().as_secs_f64(),
                });
                if stop_parameter {
                    termination = Termination::ParameterTolerance;
                    break;
                }
                if stop_function {
                    termination = Termination::FunctionTolerance;
                    break;
                }
                if accepted {
                    equations = system.assemble(&state)?.0;
                }
            }
            Err(PbaError::SingularSystem(_)) => {
                lambda *= config.lambda_increase;
                trace.push(IterationRecord {
                    iteration: iterations,
                    cost,
                    lambda,
                    step_norm: 0.0,
                    wall_time: opt_start.elapsed().as_secs_f64(),
                });
            }
            Err(other) => return Err(other),
        }
    }

    let report = SolveReport {
        method,
        termination,
        iterations,
        initial_cost,
        final_cost: cost,
        qr_seconds,
        init_seconds,
        optimization_seconds: opt_start.elapsed().as_secs_f64(),
        trace,
    };
    Ok((state, report))
}

/// Refines `initial` on `graph` and reports how the run went.
///
/// The graph's own poses and planes are never read as estimates; they only
/// define the observation structure. Works for any pose count >= 1: with a
/// single (anchored) pose only the plane variables move.
pub fn solve(
    graph: &ProblemGraph,
    initial: &ProblemState,
    config: &LmConfig,
) -> Result<(ProblemState, SolveReport), PbaError> {
    initial.check_matches(graph)?;
    if graph.poses.is_empty() {
        return Err(PbaError::InvalidGraph("graph has no poses".to_string()));
    }
    match config.method {
        Method::Pl2Pl => crate::pl2pl::solve_pl2pl(graph, initial, config),
        Method::Reduced => {
            let setup_start = Instant::now();
            let qr_start = Instant::now();
            let blocks: Vec<ReducedBlock> = graph
                .observations
                .iter()
                .map(ReducedBlock::from_observation)
                .collect();
            let qr_seconds = qr_start.elapsed().as_secs_f64();
            let system = PointSystem {
                graph,
                provider: BlockProvider::Reduced(&blocks),
            };
            let init_seconds = setup_start.elapsed().as_secs_f64() - qr_seconds;
            run_lm(&system, initial, config, Method::Reduced, qr_seconds, init_seconds)
        }
        Method::Direct => {
            let setup_start = Instant::now();
            let matrices: Vec<DMatrix<f64>> = graph
                .observations
                .iter()
                .map(|obs| crate::reduction::build_coefficients(&obs.points))
                .collect();
            let system = PointSystem {
                graph,
                provider: BlockProvider::Direct(&matrices),
            };
            let init_seconds = setup_start.elapsed().as_secs_f64();
            run_lm(&system, initial, config, Method::Direct, 0.0, init_seconds)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{PlaneHesse, Pose};
    use crate::problem::{total_cost, Observation};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// A box of six axis-aligned planes observed from `n_poses` poses on a
    /// small arc, with exact (noise-free) points.
    fn box_graph(n_poses: usize, points_per_obs: usize, seed: u64) -> ProblemGraph {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let planes: Vec<PlaneHesse> = [
            (Vector3::new(1.0, 0.0, 0.0), -4.0),
            (Vector3::new(-1.0, 0.0, 0.0), -4.0),
            (Vector3::new(0.0, 1.0, 0.0), -3.0),
            (Vector3::new(0.0, -1.0, 0.0), -3.0),
            (Vector3::new(0.0, 0.0, 1.0), -1.5),
            (Vector3::new(0.0, 0.0, -1.0), -1.5),
        ]
        .iter()
        .map(|(n, d)| PlaneHesse::new(*n, *d).unwrap())
        .collect();

        let poses: Vec<Pose> = (0..n_poses)
            .map(|i| {
                let phi = 0.4 * i as f64;
                Pose::from_angle_axis(
                    Vector3::new(0.0, 0.0, phi),
                    Vector3::new(phi.cos() - 1.0, phi.sin(), 0.02 * i as f64),
                )
            })
            .collect();

        let mut observations = Vec::new();
        for (i, pose) in poses.iter().enumerate() {
            for (j, plane) in planes.iter().enumerate() {
                let foot = -plane.offset() * plane.normal();
                let seed_dir = Vector3::new(0.3, 0.7, 0.64);
                let u = (seed_dir - plane.normal() * plane.normal().dot(&seed_dir)).normalize();
                let v = plane.normal().cross(&u);
                let inv = pose.inverse();
                let points = (0..points_per_obs)
                    .map(|_| {
                        let g = foot
                            + u * rng.random_range(-1.0..1.0)
                            + v * rng.random_range(-1.0..1.0);
                        inv.apply(&g)
                    })
                    .collect();
                observations.push(Observation {
                    pose_index: i,
                    plane_index: j,
                    points,
                });
            }
        }
        ProblemGraph {
            poses,
            planes,
            observations,
        }
    }

    fn perturbed_state(graph: &ProblemGraph, seed: u64, rot: f64, trans: f64) -> ProblemState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut state = graph.ground_truth_state().unwrap();
        for pose in state.poses.iter_mut().skip(1) {
            let aa = Vector3::new(
                rng.random_range(-rot..rot),
                rng.random_range(-rot..rot),
                rng.random_range(-rot..rot),
            );
            let dt = Vector3::new(
                rng.random_range(-trans..trans),
                rng.random_range(-trans..trans),
                rng.random_range(-trans..trans),
            );
            *pose = pose.retract(&aa, &dt);
        }
        for cp in state.plane_cps.iter_mut() {
            cp.cp += Vector3::new(
                rng.random_range(-trans..trans),
                rng.random_range(-trans..trans),
                rng.random_range(-trans..trans),
            );
        }
        state
    }

    /// Stacks the block equations into one dense damped system and solves it
    /// directly; the Schur path must agree.
    fn dense_oracle_step(equations: &NormalEquations, lambda: f64) -> DVector<f64> {
        let np = equations.n_free_poses();
        let nl = equations.n_planes();
        let dim = 6 * np + 3 * nl;
        let mut h = DMatrix::<f64>::zeros(dim, dim);
        let mut g = DVector::<f64>::zeros(dim);
        for (i, a) in equations.pose_hessians.iter().enumerate() {
            h.view_mut((6 * i, 6 * i), (6, 6)).copy_from(a);
            g.rows_mut(6 * i, 6).copy_from(&equations.pose_gradients[i]);
        }
        for (j, b) in equations.plane_hessians.iter().enumerate() {
            let off = 6 * np + 3 * j;
            h.view_mut((off, off), (3, 3)).copy_from(b);
            g.rows_mut(off, 3).copy_from(&equations.plane_gradients[j]);
        }
        for (&(free, plane), w) in &equations.couplings {
            h.view_mut((6 * free, 6 * np + 3 * plane), (6, 3)).copy_from(w);
            h.view_mut((6 * np + 3 * plane, 6 * free), (3, 6))
                .copy_from(&w.transpose());
        }
        h += DMatrix::identity(dim, dim) * lambda;
        Cholesky::new(h).expect("oracle system should be SPD").solve(&(-g))
    }

    #[test]
    fn schur_step_matches_dense_solve() {
        let graph = box_graph(4, 30, 31);
        let state = perturbed_state(&graph, 32, 0.05, 0.05);
        let blocks: Vec<_> = graph
            .observations
            .iter()
            .map(ReducedBlock::from_observation)
            .collect();
        let (equations, _) =
            assemble(&graph, &state, &BlockProvider::Reduced(&blocks)).unwrap();
        for &lambda in &[1e-6, 1e-4, 1e-1, 10.0] {
            let step = lm_step(&equations, lambda).unwrap();
            let oracle = dense_oracle_step(&equations, lambda);
            for (i, s) in step.pose_steps.iter().enumerate() {
                let reference = oracle.fixed_rows::<6>(6 * i).into_owned();
                assert_relative_eq!(*s, reference, epsilon = 1e-9, max_relative = 1e-7);
            }
            let np = step.pose_steps.len();
            for (j, s) in step.plane_steps.iter().enumerate() {
                let reference = oracle.fixed_rows::<3>(6 * np + 3 * j).into_owned();
                assert_relative_eq!(*s, reference, epsilon = 1e-9, max_relative = 1e-7);
            }
        }
    }

    #[test]
    fn reduced_and_direct_assemble_identical_equations() {
        let graph = box_graph(3, 25, 33);
        let state = perturbed_state(&graph, 34, 0.03, 0.04);
        let blocks: Vec<_> = graph
            .observations
            .iter()
            .map(ReducedBlock::from_observation)
            .collect();
        let matrices: Vec<_> = graph
            .observations
            .iter()
            .map(|o| crate::reduction::build_coefficients(&o.points))
            .collect();
        let (red, cost_red) =
            assemble(&graph, &state, &BlockProvider::Reduced(&blocks)).unwrap();
        let (dir, cost_dir) =
            assemble(&graph, &state, &BlockProvider::Direct(&matrices)).unwrap();

        assert_relative_eq!(cost_red, cost_dir, max_relative = 1e-10);
        assert_relative_eq!(
            cost_red,
            total_cost(&graph, &state).unwrap(),
            max_relative = 1e-10
        );
        for (a, b) in red.pose_hessians.iter().zip(&dir.pose_hessians) {
            assert_relative_eq!(a, b, epsilon = 1e-8, max_relative = 1e-8);
        }
        for (a, b) in red.plane_hessians.iter().zip(&dir.plane_hessians) {
            assert_relative_eq!(a, b, epsilon = 1e-8, max_relative = 1e-8);
        }
        for (a, b) in red.pose_gradients.iter().zip(&dir.pose_gradients) {
            assert_relative_eq!(a, b, epsilon = 1e-8, max_relative = 1e-8);
        }
        for (a, b) in red.plane_gradients.iter().zip(&dir.plane_gradients) {
            assert_relative_eq!(a, b, epsilon = 1e-8, max_relative = 1e-8);
        }
        assert_eq!(red.couplings.len(), dir.couplings.len());
        for (key, w) in &red.couplings {
            assert_relative_eq!(w, &dir.couplings[key], epsilon = 1e-8, max_relative = 1e-8);
        }
    }

    #[test]
    fn single_pose_problem_solves_planes_only() {
        let mut graph = box_graph(1, 40, 35);
        assert_eq!(graph.poses.len(), 1);
        graph.observations.retain(|o| o.pose_index == 0);
        let mut initial = graph.ground_truth_state().unwrap();
        for cp in initial.plane_cps.iter_mut() {
            cp.cp += Vector3::new(0.02, -0.015, 0.01);
        }
        let (refined, report) = solve(&graph, &initial, &LmConfig::default()).unwrap();
        assert!(report.final_cost < 1e-18, "cost = {:e}", report.final_cost);
        assert_eq!(refined.poses.len(), 1);
        let truth = graph.ground_truth_state().unwrap();
        for (a, b) in refined.plane_cps.iter().zip(&truth.plane_cps) {
            assert_relative_eq!(a.cp, b.cp, epsilon = 1e-8);
        }
    }

    #[test]
    fn solve_recovers_noise_free_box() {
        let graph = box_graph(5, 60, 36);
        let initial = perturbed_state(&graph, 37, 0.04, 0.06);
        let initial_cost = total_cost(&graph, &initial).unwrap();
        assert!(initial_cost > 1e-3);
        let (refined, report) = solve(&graph, &initial, &LmConfig::default()).unwrap();
        assert!(
            report.final_cost < 1e-16 * initial_cost.max(1.0),
            "final cost {:e}",
            report.final_cost
        );
        let truth = graph.ground_truth_state().unwrap();
        for (a, b) in refined.poses.iter().zip(&truth.poses) {
            assert_relative_eq!(a.rotation, b.rotation, epsilon = 1e-6);
            assert_relative_eq!(a.translation, b.translation, epsilon = 1e-6);
        }
    }

    #[test]
    fn anchor_pose_is_bit_identical_after_solve() {
        let graph = box_graph(4, 30, 38);
        let mut initial = perturbed_state(&graph, 39, 0.03, 0.05);
        // Give the anchor a distinctive, non-identity value.
        initial.poses[0] = Pose::from_angle_axis(
            Vector3::new(0.1, -0.2, 0.3),
            Vector3::new(0.123456789, -0.987654321, 0.5),
        );
        let anchor_before = initial.poses[0].clone();
        let (refined, _) = solve(&graph, &initial, &LmConfig::default()).unwrap();
        assert_eq!(refined.poses[0].rotation, anchor_before.rotation);
        assert_eq!(refined.poses[0].translation, anchor_before.translation);
    }

    #[test]
    fn trace_has_one_row_per_iteration_and_monotone_cost() {
        let graph = box_graph(4, 30, 40);
        let initial = perturbed_state(&graph, 41, 0.05, 0.08);
        let (_, report) = solve(&graph, &initial, &LmConfig::default()).unwrap();
        assert_eq!(report.trace.len(), report.iterations);
        for (k, row) in report.trace.iter().enumerate() {
            assert_eq!(row.iteration, k + 1);
            if k > 0 {
                assert!(row.cost <= report.trace[k - 1].cost);
                assert!(row.wall_time >= report.trace[k - 1].wall_time);
            }
        }
        assert_relative_eq!(
            report.trace.last().unwrap().cost,
            report.final_cost,
            max_relative = 1e-15
        );
    }

    #[test]
    fn perfect_initial_state_terminates_immediately() {
        // The initial cost is rounding noise, not exactly zero, so either
        // tolerance may fire first; what matters is that one of them does
        // right away instead of grinding to the iteration cap.
        let graph = box_graph(3, 20, 42);
        let initial = graph.ground_truth_state().unwrap();
        let (_, report) = solve(&graph, &initial, &LmConfig::default()).unwrap();
        assert!(matches!(
            report.termination,
            Termination::FunctionTolerance | Termination::ParameterTolerance
        ));
        assert!(report.iterations <= 2, "iterations = {}", report.iterations);
        assert!(report.final_cost < 1e-20);
    }

    #[test]
    fn reduced_and_direct_agree_end_to_end() {
        let graph = box_graph(4, 50, 43);
        let initial = perturbed_state(&graph, 44, 0.04, 0.06);
        let (state_r, report_r) = solve(
            &graph,
            &initial,
            &LmConfig {
                method: Method::Reduced,
                ..LmConfig::default()
            },
        )
        .unwrap();
        let (state_d, report_d) = solve(
            &graph,
            &initial,
            &LmConfig {
                method: Method::Direct,
                ..LmConfig::default()
            },
        )
        .unwrap();
        assert_eq!(report_r.termination, report_d.termination);
        let scale = report_r.final_cost.abs().max(1e-12);
        assert!((report_r.final_cost - report_d.final_cost).abs() <= 1e-8 * scale);
        for (a, b) in state_r.poses.iter().zip(&state_d.poses) {
            assert_relative_eq!(a.translation, b.translation, epsilon = 1e-6);
        }
        assert!(report_d.qr_seconds == 0.0);
        assert!(report_r.qr_seconds >= 0.0);
    }

    #[test]
    fn nan_points_are_reported_as_divergence() {
        let mut graph = box_graph(3, 10, 45);
        graph.observations[0].points[0].x = f64::NAN;
        let initial = graph.ground_truth_state().unwrap();
        let result = solve(&graph, &initial, &LmConfig::default());
        assert!(matches!(result, Err(PbaError::DivergedNaN { iteration: 0 })));
    }

    #[test]
    fn state_shape_mismatch_is_rejected() {
        let graph = box_graph(3, 10, 46);
        let mut initial = graph.ground_truth_state().unwrap();
        initial.plane_cps.pop();
        assert!(matches!(
            solve(&graph, &initial, &LmConfig::default()),
            Err(PbaError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn singular_system_raises_lambda_instead_of_failing() {
        // One pose observing a single plane leaves the pose rotation about
        // the plane normal and in-plane translation unconstrained; with
        // lambda damping the solve must still proceed and terminate.
        let mut graph = box_graph(2, 30, 47);
        graph.observations.retain(|o| o.pose_index == 0 || o.plane_index == 0);
        let initial = graph.ground_truth_state().unwrap();
        let (_, report) = solve(&graph, &initial, &LmConfig::default()).unwrap();
        assert!(report.final_cost.is_finite());
    }

    #[test]
    fn method_names_round_trip() {
        for method in [Method::Reduced, Method::Direct, Method::Pl2Pl] {
            let name = method.to_string();
            assert_eq!(name.parse::<Method>().unwrap(), method);
        }
        assert!("banana".parse::<Method>().is_err());
    }
}
