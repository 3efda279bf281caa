//! Separation of point measurements from state, and the QR compression that
//! makes the solver's per-iteration work independent of point count.
//!
//! Each signed point-to-plane distance factors as `delta = c . nu`, where the
//! 13-vector `c` depends only on the measured point and `nu` only on the
//! pose/plane state. Stacking the `c` rows of one observation gives a K x 13
//! coefficient matrix `C` whose columns repeat the design matrix
//! `E = [x y z 1]` (K x 4). A thin QR of `E` therefore compresses `C` to an
//! `r x 13` matrix `M` (r = min(K, 4)) with `C = Q M` and orthonormal `Q`, so
//! every Gram product the solver needs (`J^T J`, `J^T delta`, `|delta|^2`)
//! is unchanged when `C` is replaced by `M`. The QR runs once per
//! observation; iterations touch only `M`.

use nalgebra::{DMatrix, DVector, Matrix3, SMatrix, SVector, Vector3};

use crate::error::PbaError;
use crate::geometry::{skew, PlaneCP, Pose, EPS_CP};
use crate::problem::Observation;

/// Width of the coefficient row `c` and of the state vector `nu`.
pub const COEFF_DIM: usize = 13;

/// Upper bound on reduced rows: rank of the design matrix `[x y z 1]`.
pub const MAX_REDUCED_ROWS: usize = 4;

/// Maps each of the 13 coefficient columns to its design-matrix column:
/// the point coordinates repeat once per normal component, the constant
/// column once per translation component and once for the offset.
const COLUMN_MAP: [usize; COEFF_DIM] = [0, 1, 2, 0, 1, 2, 0, 1, 2, 3, 3, 3, 3];

/// The K x 4 design matrix `[x y z 1]` of an observation's points.
fn build_design(points: &[Vector3<f64>]) -> DMatrix<f64> {
    let mut e = DMatrix::zeros(points.len(), 4);
    for (k, p) in points.iter().enumerate() {
        e[(k, 0)] = p.x;
        e[(k, 1)] = p.y;
        e[(k, 2)] = p.z;
        e[(k, 3)] = 1.0;
    }
    e
}

/// Expands a matrix with design-matrix columns (K x 4 or r x 4) to the full
/// 13-column layout by repeating columns per [`COLUMN_MAP`].
fn expand_columns(u: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(u.nrows(), COEFF_DIM);
    for (dst, &src) in COLUMN_MAP.iter().enumerate() {
        out.set_column(dst, &u.column(src));
    }
    out
}

/// The K x 13 coefficient matrix `C` with one row per point.
pub fn build_coefficients(points: &[Vector3<f64>]) -> DMatrix<f64> {
    expand_columns(&build_design(points))
}

/// Compresses an observation to its `r x 13` reduced coefficient matrix `M`,
/// `r = min(K, 4)`, discarding the orthonormal factor.
pub fn factorize(points: &[Vector3<f64>]) -> DMatrix<f64> {
    let qr = build_design(points).qr();
    expand_columns(&qr.r())
}

/// Like [`factorize`] but also returns the thin orthonormal factor `Q`
/// (K x r), so callers can check `C = Q M` directly.
pub fn factorize_with_q(points: &[Vector3<f64>]) -> (DMatrix<f64>, DMatrix<f64>) {
    let qr = build_design(points).qr();
    (qr.q(), expand_columns(&qr.r()))
}

/// One observation's compressed coefficients, tagged with its graph indices.
#[derive(Debug, Clone)]
pub struct ReducedBlock {
    pub pose_index: usize,
    pub plane_index: usize,
    m: DMatrix<f64>,
}

impl ReducedBlock {
    pub fn from_observation(obs: &Observation) -> Self {
        ReducedBlock {
            pose_index: obs.pose_index,
            plane_index: obs.plane_index,
            m: factorize(&obs.points),
        }
    }

    /// The `r x 13` reduced coefficient matrix.
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.m
    }

    /// `M` with zero rows appended up to 4 x 13. Zero rows contribute nothing
    /// to any Gram product, so the padded form is interchangeable with the
    /// exact one and lets hot loops use fixed-size arithmetic.
    pub fn padded(&self) -> SMatrix<f64, 4, 13> {
        let mut out = SMatrix::zeros();
        for i in 0..self.m.nrows() {
            for j in 0..COEFF_DIM {
                out[(i, j)] = self.m[(i, j)];
            }
        }
        out
    }
}

/// State-dependent factors of one (pose, plane) pair: the vector `nu` with
/// `delta = C nu`, and its derivatives with respect to the pose increment
/// (rotation right-multiplied by `exp([theta]_x)`, translation additive) and
/// the plane's closest-point vector.
#[derive(Debug, Clone)]
pub struct StateCoefficients {
    pub nu: SVector<f64, COEFF_DIM>,
    pub v_pose: SMatrix<f64, COEFF_DIM, 6>,
    pub v_plane: SMatrix<f64, COEFF_DIM, 3>,
}

/// `nu` alone, for cost evaluation at trial states where the Jacobians are
/// not needed.
pub fn state_vector(pose: &Pose, plane: &PlaneCP) -> Result<SVector<f64, COEFF_DIM>, PbaError> {
    let r = plane.cp.norm();
    if r < EPS_CP {
        return Err(PbaError::DegeneratePlane(format!(
            "closest-point vector norm {:e} is below {:e}",
            r, EPS_CP
        )));
    }
    let n = -plane.cp / r;
    let rot = &pose.rotation;
    let t = &pose.translation;
    let mut nu = SVector::<f64, COEFF_DIM>::zeros();
    for a in 0..3 {
        for b in 0..3 {
            nu[3 * a + b] = rot[(a, b)] * n[a];
        }
        nu[9 + a] = n[a] * t[a];
    }
    nu[12] = -r;
    Ok(nu)
}

/// Builds `nu` and its Jacobians at the given state.
///
/// Layout of `nu`: entries `3a + b` hold `R[a,b] * n[a]` for the plane
/// normal `n`, entries `9 + a` hold `n[a] * t[a]`, entry 12 holds the
/// offset `d`, with `n = -cp/|cp|` and `d = -|cp|`.
pub fn state_coefficients(pose: &Pose, plane: &PlaneCP) -> Result<StateCoefficients, PbaError> {
    let nu = state_vector(pose, plane)?;
    let r = plane.cp.norm();
    let n = -plane.cp / r;
    let rot = &pose.rotation;
    let t = &pose.translation;

    // d(R[a,b])/d(theta_k) = (R [e_k]_x)[a,b]; translation rows pick up the
    // normal on the matching diagonal; the offset row is constant in the pose.
    let mut v_pose = SMatrix::<f64, COEFF_DIM, 6>::zeros();
    for k in 0..3 {
        let mut axis = Vector3::zeros();
        axis[k] = 1.0;
        let rg: Matrix3<f64> = rot * skew(&axis);
        for a in 0..3 {
            for b in 0..3 {
                v_pose[(3 * a + b, k)] = rg[(a, b)] * n[a];
            }
        }
    }
    for a in 0..3 {
        v_pose[(9 + a, 3 + a)] = n[a];
    }

    // n = -cp/|cp| and d = -|cp| give dn/dcp = -(I - n n^T)/|cp| and
    // dd/dcp = n^T (the unit direction of cp is -n).
    let dn: Matrix3<f64> = -(Matrix3::identity() - n * n.transpose()) / r;
    let mut v_plane = SMatrix::<f64, COEFF_DIM, 3>::zeros();
    for a in 0..3 {
        for b in 0..3 {
            for c in 0..3 {
                v_plane[(3 * a + b, c)] = rot[(a, b)] * dn[(a, c)];
            }
        }
        for c in 0..3 {
            v_plane[(9 + a, c)] = t[a] * dn[(a, c)];
        }
    }
    for c in 0..3 {
        v_plane[(12, c)] = n[c];
    }

    Ok(StateCoefficients { nu, v_pose, v_plane })
}

/// Jacobian and residual rows contributed by one observation. `j_pose` is
/// `None` for the gauge anchor (pose 0), which has no pose variables.
#[derive(Debug, Clone)]
pub struct SystemBlocks {
    pub j_pose: Option<DMatrix<f64>>,
    pub j_plane: DMatrix<f64>,
    pub residual: DVector<f64>,
}

fn blocks_from_coefficients(
    coeff: &DMatrix<f64>,
    state: &StateCoefficients,
    anchor: bool,
) -> SystemBlocks {
    let rows = coeff.nrows();
    let j_pose = if anchor {
        None
    } else {
        let j = coeff * state.v_pose;
        Some(DMatrix::from_column_slice(rows, 6, j.as_slice()))
    };
    let j_plane = coeff * state.v_plane;
    SystemBlocks {
        j_pose,
        j_plane: DMatrix::from_column_slice(rows, 3, j_plane.as_slice()),
        residual: coeff * state.nu,
    }
}

/// Reduced rows (`r x 6`, `r x 3`, length-`r` residual) for one observation.
pub fn reduced_blocks(
    block: &ReducedBlock,
    state: &StateCoefficients,
    anchor: bool,
) -> SystemBlocks {
    blocks_from_coefficients(&block.m, state, anchor)
}

/// Uncompressed rows (`K x 6`, `K x 3`, length-`K` residual), one per point.
/// Same contract as [`reduced_blocks`] with `C` in place of `M`.
pub fn full_blocks(
    points: &[Vector3<f64>],
    state: &StateCoefficients,
    anchor: bool,
) -> SystemBlocks {
    blocks_from_coefficients(&build_coefficients(points), state, anchor)
}
