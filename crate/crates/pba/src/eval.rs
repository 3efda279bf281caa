//! Trajectory accuracy (absolute trajectory error) and the per-method
//! comparison table.

use crate::error::PbaError;
use crate::geometry::{rotation_angle, Pose};
use crate::solver::SolveReport;

/// Absolute trajectory error of an estimated trajectory against ground
/// truth. The aggregate values are the RMS of the per-pose lists.
#[derive(Debug, Clone)]
pub struct AteResult {
    /// RMS rotation error, degrees.
    pub ate_rot: f64,
    /// RMS translation error, meters.
    pub ate_trans: f64,
    pub per_pose_rot_err: Vec<f64>,
    pub per_pose_trans_err: Vec<f64>,
}

/// Computes per-pose errors `dR_k = R_k Rhat_k^T` and
/// `dt_k = t_k - dR_k that_k`, then their RMS. No alignment is applied:
/// the trajectories share their anchor pose by construction, so aligning
/// would mask exactly the error being measured.
pub fn ate(ground_truth: &[Pose], estimate: &[Pose]) -> Result<AteResult, PbaError> {
    if ground_truth.is_empty() || ground_truth.len() != estimate.len() {
        return Err(PbaError::LengthMismatch {
            expected: ground_truth.len().max(1),
            actual: estimate.len(),
        });
    }
    let n = ground_truth.len() as f64;
    let mut per_pose_rot_err = Vec::with_capacity(ground_truth.len());
    let mut per_pose_trans_err = Vec::with_capacity(ground_truth.len());
    let mut rot_sq = 0.0;
    let mut trans_sq = 0.0;
    for (gt, est) in ground_truth.iter().zip(estimate) {
        let delta_rot = gt.rotation * est.rotation.transpose();
        let angle = rotation_angle(&delta_rot).to_degrees();
        let delta_t = gt.translation - delta_rot * est.translation;
        let dist = delta_t.norm();
        rot_sq += angle * angle;
        trans_sq += dist * dist;
        per_pose_rot_err.push(angle.abs());
        per_pose_trans_err.push(dist);
    }
    Ok(AteResult {
        ate_rot: (rot_sq / n).sqrt(),
        ate_trans: (trans_sq / n).sqrt(),
        per_pose_rot_err,
        per_pose_trans_err,
    })
}

/// One comparison-table row; columns in serialization order.
#[derive(Debug, Clone)]
pub struct ComparisonRow {
    pub method: String,
    pub iterations: usize,
    pub ate_rot: f64,
    pub ate_trans: f64,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub qr_time: f64,
    pub init_time: f64,
    pub optimization_time: f64,
    pub per_iteration_time: f64,
}

/// Pairs each solve report with its trajectory accuracy. Inputs must be
/// nonempty and of equal length.
pub fn compare_runs(
    reports: &[SolveReport],
    ates: &[AteResult],
) -> Result<Vec<ComparisonRow>, PbaError> {
    if reports.is_empty() || reports.len() != ates.len() {
        return Err(PbaError::LengthMismatch {
            expected: reports.len().max(1),
            actual: ates.len(),
        });
    }
    Ok(reports
        .iter()
        .zip(ates)
        .map(|(report, accuracy)| ComparisonRow {
            method: report.method.to_string(),
            iterations: report.iterations,
            ate_rot: accuracy.ate_rot,
            ate_trans: accuracy.ate_trans,
            initial_cost: report.initial_cost,
            final_cost: report.final_cost,
            qr_time: report.qr_seconds,
            init_time: report.init_seconds,
            optimization_time: report.optimization_seconds,
            per_iteration_time: if report.iterations == 0 {
                0.0
            } else {
                report.optimization_seconds / report.iterations as f64
            },
        })
        .collect())
}

/// Serializes comparison rows as CSV with a fixed column order.
pub fn comparison_csv(rows: &[ComparisonRow]) -> String {
    let mut out = String::from(
        "method,iterations,ate_rot,ate_trans,initial_cost,final_cost,\
         qr_time,init_time,optimization_time,per_iteration_time\n",
    );
    for row in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            row.method,
            row.iterations,
            row.ate_rot,
            row.ate_trans,
            row.initial_cost,
            row.final_cost,
            row.qr_time,
            row.init_time,
            row.optimization_time,
            row.per_iteration_time,
        ));
    }
    out
}
