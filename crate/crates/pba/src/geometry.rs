//! Rigid transforms, plane parameterizations, and plane fitting.
//!
//! Planes live in two forms: the normalized Hesse form `n.p + d = 0` with a
//! canonical sign (offset <= 0), and the closest-point vector `cp = d * n`
//! pointing from the origin to the nearest point on the plane. The solver
//! optimizes closest-point vectors; everything user-facing speaks Hesse form.

use nalgebra::{Matrix3, Vector3};

use crate::error::PbaError;

/// Closest-point vectors shorter than this are rejected as degenerate: the
/// Hesse form recovered from them would have an ill-conditioned normal.
pub const EPS_CP: f64 = 1e-8;

/// Relative eigenvalue gap below which a plane fit is declared degenerate.
const EPS_FIT: f64 = 1e-12;

/// Frobenius drift from orthonormality beyond which a rotation gets repaired.
const ROTATION_DRIFT_TOL: f64 = 1e-9;

/// A rigid transform from the sensor frame to the global frame.
///
/// Maps a sensor-frame point `p` to `rotation * p + translation`.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Pose {
            rotation,
            translation,
        }
    }

    pub fn from_angle_axis(angle_axis: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Pose {
            rotation: rotation_from_angle_axis(angle_axis),
            translation,
        }
    }

    /// Applies the transform to a point.
    pub fn apply(&self, point: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * point + self.translation
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rot_t = self.rotation.transpose();
        Pose {
            rotation: rot_t,
            translation: -(rot_t * self.translation),
        }
    }

    /// Frobenius norm of `R^T R - I`, a cheap orthonormality health check.
    pub fn orthonormality_error(&self) -> f64 {
        (self.rotation.transpose() * self.rotation - Matrix3::identity()).norm()
    }

    /// Right-multiplies the rotation by `exp([theta]_x)` and adds the
    /// translation step, repairing the rotation if it has drifted.
    pub fn retract(&self, theta: &Vector3<f64>, tau: &Vector3<f64>) -> Pose {
        let mut rotation = self.rotation * rotation_from_angle_axis(*theta);
        if (rotation.transpose() * rotation - Matrix3::identity()).norm() > ROTATION_DRIFT_TOL {
            rotation = project_to_rotation(&rotation);
        }
        Pose {
            rotation,
            translation: self.translation + tau,
        }
    }
}

/// Skew-symmetric matrix such that `skew(a) * b == a.cross(&b)`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rodrigues' formula with a Taylor fallback below 1e-8 radians.
pub fn rotation_from_angle_axis(aa: Vector3<f64>) -> Matrix3<f64> {
    let angle = aa.norm();
    let k = skew(&aa);
    if angle < 1e-8 {
        // sin(a)/a ~ 1, (1-cos(a))/a^2 ~ 1/2 to well below f64 precision here.
        Matrix3::identity() + k + 0.5 * (k * k)
    } else {
        let a2 = angle * angle;
        Matrix3::identity() + (angle.sin() / angle) * k + ((1.0 - angle.cos()) / a2) * (k * k)
    }
}

/// Rotation angle in radians from the trace/axis form of the matrix log.
///
/// Uses `atan2(|axis part|, trace part)` rather than `acos`, which stays
/// accurate near 0 and pi.
pub fn rotation_angle(rot: &Matrix3<f64>) -> f64 {
    let axis = Vector3::new(
        rot[(2, 1)] - rot[(1, 2)],
        rot[(0, 2)] - rot[(2, 0)],
        rot[(1, 0)] - rot[(0, 1)],
    );
    let sin_part = 0.5 * axis.norm();
    let cos_part = 0.5 * (rot.trace() - 1.0);
    sin_part.atan2(cos_part)
}

/// Nearest rotation matrix in the Frobenius sense, via the SVD polar factor.
fn project_to_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd of 3x3 requested u");
    let v_t = svd.v_t.expect("svd of 3x3 requested v_t");
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let mut u_fixed = u;
        u_fixed.column_mut(2).neg_mut();
        r = u_fixed * v_t;
    }
    r
}

/// A plane in normalized Hesse form: `normal . p + offset = 0` with
/// `|normal| = 1` and `offset <= 0` (ties at zero broken so the first
/// nonzero normal component is positive).
///
/// Fields are private so every constructed value is canonical, which makes
/// plane comparison a plain component-wise check.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneHesse {
    normal: Vector3<f64>,
    offset: f64,
}

impl PlaneHesse {
    /// Normalizes and canonicalizes the sign. The input normal does not need
    /// unit length, only a nonzero one.
    pub fn new(normal: Vector3<f64>, offset: f64) -> Result<Self, PbaError> {
        let scale = normal.norm();
        if scale <= 0.0 || !scale.is_finite() {
            return Err(PbaError::DegeneratePlane(
                "plane normal has zero or non-finite length".to_string(),
            ));
        }
        let mut n = normal / scale;
        let mut d = offset / scale;
        let flip = if d != 0.0 {
            d > 0.0
        } else {
            let first = if n.x != 0.0 {
                n.x
            } else if n.y != 0.0 {
                n.y
            } else {
                n.z
            };
            first < 0.0
        };
        if flip {
            n = -n;
            d = -d;
        }
        Ok(PlaneHesse { normal: n, offset: d })
    }

    pub fn normal(&self) -> &Vector3<f64> {
        &self.normal
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }
}

/// A plane as the closest point to the origin: `cp = d * n`.
///
/// Valid only for planes that do not pass through the origin; see [`EPS_CP`].
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneCP {
    pub cp: Vector3<f64>,
}

impl PlaneCP {
    pub fn new(cp: Vector3<f64>) -> Self {
        PlaneCP { cp }
    }
}

/// Converts Hesse form to the closest-point vector.
pub fn plane_to_cp(plane: &PlaneHesse) -> Result<PlaneCP, PbaError> {
    if plane.offset.abs() < EPS_CP {
        return Err(PbaError::DegeneratePlane(format!(
            "plane offset {:e} is too close to the origin for a closest-point vector",
            plane.offset
        )));
    }
    Ok(PlaneCP {
        cp: plane.offset * plane.normal,
    })
}

/// Recovers the canonical Hesse form from a closest-point vector.
pub fn cp_to_plane(plane: &PlaneCP) -> Result<PlaneHesse, PbaError> {
    let r = plane.cp.norm();
    if r < EPS_CP {
        return Err(PbaError::DegeneratePlane(format!(
            "closest-point vector norm {:e} is below {:e}",
            r, EPS_CP
        )));
    }
    // -cp/r is unit and -r < 0, so this is already canonical.
    Ok(PlaneHesse {
        normal: -plane.cp / r,
        offset: -r,
    })
}

/// Expresses a global-frame plane in the sensor frame of `pose`.
///
/// For a point transform `p_g = R p_s + t`, plane coefficients map as
/// `n_s = R^T n_g` and `d_s = n_g . t + d_g`; the result is re-canonicalized.
pub fn transform_plane(pose: &Pose, plane: &PlaneHesse) -> Result<PlaneHesse, PbaError> {
    let n_s = pose.rotation.transpose() * plane.normal;
    let d_s = plane.normal.dot(&pose.translation) + plane.offset;
    PlaneHesse::new(n_s, d_s)
}

/// Signed point-to-plane distance of a sensor-frame point after mapping it
/// through `pose` into the global frame.
pub fn point_to_plane_residual(pose: &Pose, plane: &PlaneHesse, point: &Vector3<f64>) -> f64 {
    plane.normal.dot(&pose.apply(point)) + plane.offset
}

/// Total least squares plane fit: the normal is the eigenvector of the
/// centered covariance with the smallest eigenvalue.
///
/// Fails when the two smallest eigenvalues agree to within a relative
/// `1e-12`, i.e. the points are collinear or coincident and the normal
/// direction is not identifiable.
pub fn fit_plane(points: &[Vector3<f64>]) -> Result<PlaneHesse, PbaError> {
    if points.len() < 3 {
        return Err(PbaError::DegenerateFit(format!(
            "need at least 3 points, got {}",
            points.len()
        )));
    }
    let inv_n = 1.0 / points.len() as f64;
    let centroid: Vector3<f64> = points.iter().sum::<Vector3<f64>>() * inv_n;
    let mut cov = Matrix3::zeros();
    for p in points {
        let q = p - centroid;
        cov += q * q.transpose();
    }
    cov *= inv_n;

    let eig = cov.symmetric_eigen();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let lam_min = eig.eigenvalues[order[0]].max(0.0);
    let lam_mid = eig.eigenvalues[order[1]].max(0.0);
    let lam_max = eig.eigenvalues[order[2]].max(0.0);
    if lam_max <= 0.0 || (lam_mid - lam_min) <= EPS_FIT * lam_max {
        return Err(PbaError::DegenerateFit(format!(
            "eigenvalue gap {:e} of {:e} does not identify a unique normal",
            lam_mid - lam_min,
            lam_max
        )));
    }
    let normal = eig.eigenvectors.column(order[0]).into_owned();
    let offset = -normal.dot(&centroid);
    PlaneHesse::new(normal, offset)
}
