//! Problem container: poses, planes, and the point observations tying them
//! together, plus the cost definition shared by every solver backend.

use std::collections::HashSet;

use nalgebra::{Matrix3, Vector3};

use crate::error::PbaError;
use crate::geometry::{cp_to_plane, point_to_plane_residual, plane_to_cp, PlaneCP, PlaneHesse, Pose};

/// Points measured in the frame of one pose that lie on one plane.
#[derive(Debug, Clone)]
pub struct Observation {
    pub pose_index: usize,
    pub plane_index: usize,
    /// Sensor-frame sample points.
    pub points: Vec<Vector3<f64>>,
}

/// The full adjustment problem. Poses and planes are global-frame ground
/// truth or estimates depending on context; observations never change.
#[derive(Debug, Clone)]
pub struct ProblemGraph {
    pub poses: Vec<Pose>,
    pub planes: Vec<PlaneHesse>,
    pub observations: Vec<Observation>,
}

impl ProblemGraph {
    pub fn n_poses(&self) -> usize {
        self.poses.len()
    }

    pub fn n_planes(&self) -> usize {
        self.planes.len()
    }

    /// Checks the structural invariants: at least two poses and one plane,
    /// indices in range, nonempty point sets, no duplicate (pose, plane)
    /// pairs, and no pose or plane left unreferenced.
    pub fn validate(&self) -> Result<(), PbaError> {
        if self.poses.len() < 2 {
            return Err(PbaError::InvalidGraph(format!(
                "need at least 2 poses, got {}",
                self.poses.len()
            )));
        }
        if self.planes.is_empty() {
            return Err(PbaError::InvalidGraph("need at least 1 plane".to_string()));
        }
        if self.observations.is_empty() {
            return Err(PbaError::InvalidGraph("need at least 1 observation".to_string()));
        }
        let mut seen = HashSet::new();
        let mut pose_used = vec![false; self.poses.len()];
        let mut plane_used = vec![false; self.planes.len()];
        for (k, obs) in self.observations.iter().enumerate() {
            if obs.pose_index >= self.poses.len() {
                return Err(PbaError::InvalidGraph(format!(
                    "observation {} references pose {} of {}",
                    k,
                    obs.pose_index,
                    self.poses.len()
                )));
            }
            if obs.plane_index >= self.planes.len() {
                return Err(PbaError::InvalidGraph(format!(
                    "observation {} references plane {} of {}",
                    k,
                    obs.plane_index,
                    self.planes.len()
                )));
            }
            if obs.points.is_empty() {
                return Err(PbaError::InvalidGraph(format!(
                    "observation {} has no points",
                    k
                )));
            }
            if !seen.insert((obs.pose_index, obs.plane_index)) {
                return Err(PbaError::InvalidGraph(format!(
                    "duplicate observation for pose {} and plane {}",
                    obs.pose_index, obs.plane_index
                )));
            }
            pose_used[obs.pose_index] = true;
            plane_used[obs.plane_index] = true;
        }
        if let Some(i) = pose_used.iter().position(|u| !u) {
            return Err(PbaError::InvalidGraph(format!(
                "pose {} has no observations",
                i
            )));
        }
        if let Some(j) = plane_used.iter().position(|u| !u) {
            return Err(PbaError::InvalidGraph(format!(
                "plane {} has no observations",
                j
            )));
        }
        Ok(())
    }

    /// The state holding this graph's own poses and planes, with planes
    /// converted to closest-point vectors.
    pub fn ground_truth_state(&self) -> Result<ProblemState, PbaError> {
        let plane_cps = self
            .planes
            .iter()
            .map(plane_to_cp)
            .collect::<Result<Vec<_>, _>>()?;
        Ok(ProblemState {
            poses: self.poses.clone(),
            plane_cps,
        })
    }
}

/// The variables being optimized. Pose 0 is the gauge anchor and is never
/// touched by any solver.
#[derive(Debug, Clone)]
pub struct ProblemState {
    pub poses: Vec<Pose>,
    pub plane_cps: Vec<PlaneCP>,
}

impl ProblemState {
    /// Errors unless the state dimensions match the graph.
    pub fn check_matches(&self, graph: &ProblemGraph) -> Result<(), PbaError> {
        if self.poses.len() != graph.poses.len() {
            return Err(PbaError::LengthMismatch {
                expected: graph.poses.len(),
                actual: self.poses.len(),
            });
        }
        if self.plane_cps.len() != graph.planes.len() {
            return Err(PbaError::LengthMismatch {
                expected: graph.planes.len(),
                actual: self.plane_cps.len(),
            });
        }
        Ok(())
    }

    /// Reference scale for the step-size stopping test: the norm of all
    /// non-anchor translations and closest-point vectors stacked together.
    pub fn reference_norm(&self) -> f64 {
        let mut sq = 0.0;
        for pose in self.poses.iter().skip(1) {
            sq += pose.translation.norm_squared();
        }
        for plane in &self.plane_cps {
            sq += plane.cp.norm_squared();
        }
        sq.sqrt()
    }
}

/// Sum of squared point-to-plane distances over every observation, evaluated
/// point by point. The solvers use a factored shortcut for this same value;
/// this direct form is the reference definition.
pub fn total_cost(graph: &ProblemGraph, state: &ProblemState) -> Result<f64, PbaError> {
    state.check_matches(graph)?;
    let planes = state
        .plane_cps
        .iter()
        .map(cp_to_plane)
        .collect::<Result<Vec<_>, _>>()?;
    let mut cost = 0.0;
    for obs in &graph.observations {
        let pose = &state.poses[obs.pose_index];
        let plane = &planes[obs.plane_index];
        for p in &obs.points {
            let r = point_to_plane_residual(pose, plane, p);
            cost += r * r;
        }
    }
    Ok(cost)
}

/// Per-pose constraint summary produced by [`observability_check`].
#[derive(Debug, Clone)]
pub struct PoseObservability {
    pub pose_index: usize,
    /// Rank of the span of observed plane normals (0..=3).
    pub normal_rank: usize,
    pub n_planes_observed: usize,
}

/// Report over all poses; `underconstrained` lists non-anchor poses whose
/// observed normals span less than all of 3-space, leaving translation
/// directions unconstrained.
#[derive(Debug, Clone)]
pub struct ObservabilityReport {
    pub per_pose: Vec<PoseObservability>,
    pub underconstrained: Vec<usize>,
}

/// Rank threshold: eigenvalues of the normal Gram matrix below this fraction
/// of the largest are treated as zero.
const RANK_EPS: f64 = 1e-9;

/// Diagnoses translation observability per pose from the graph's plane
/// normals. Advisory only; no solver consults it.
pub fn observability_check(graph: &ProblemGraph) -> ObservabilityReport {
    let mut per_pose = Vec::with_capacity(graph.poses.len());
    let mut underconstrained = Vec::new();
    for i in 0..graph.poses.len() {
        let mut gram = Matrix3::zeros();
        let mut n_obs = 0usize;
        for obs in &graph.observations {
            if obs.pose_index != i {
                continue;
            }
            let n = graph.planes[obs.plane_index].normal();
            gram += n * n.transpose();
            n_obs += 1;
        }
        let eig = gram.symmetric_eigen();
        let lam_max = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
        let rank = if lam_max <= 0.0 {
            0
        } else {
            eig.eigenvalues
                .iter()
                .filter(|&&l| l > RANK_EPS * lam_max)
                .count()
        };
        if rank < 3 && i != 0 {
            underconstrained.push(i);
        }
        per_pose.push(PoseObservability {
            pose_index: i,
            normal_rank: rank,
            n_planes_observed: n_obs,
        });
    }
    ObservabilityReport {
        per_pose,
        underconstrained,
    }
}
