//! Planar bundle adjustment for depth sensors.
//!
//! Jointly refines sensor poses and infinite planes by minimizing signed
//! point-to-plane distances. The expensive part of such a problem is that
//! every measured point contributes a residual row; this crate factors each
//! observation's rows into a fixed-size block (at most 4 x 13) once up
//! front, after which iteration cost no longer depends on how many points
//! were measured. A classical plane-to-plane baseline and a synthetic scene
//! generator round out the toolkit for accuracy and runtime comparisons.
//!
//! Modules:
//! - [`geometry`]: rigid transforms, plane forms, plane fitting.
//! - [`problem`]: the pose/plane/observation graph and its cost.
//! - [`reduction`]: the measurement/state separation and QR compression.
//! - [`solver`]: Levenberg-Marquardt with Schur elimination of planes.
//! - [`pl2pl`]: the plane-to-plane baseline cost and solver.
//! - [`synth`]: synthetic scenes, trajectory perturbation, initialization.
//! - [`eval`]: absolute trajectory error and comparison tables.

pub mod error;
pub mod eval;
pub mod geometry;
pub mod pl2pl;
pub mod problem;
pub mod reduction;
pub mod solver;
pub mod synth;

pub use error::PbaError;
