//! JSON file formats shared by the subcommands.
//!
//! Two shapes: a dataset (poses, planes, raw point observations) and a state
//! (poses and planes only, optionally with an attached solve report). Both
//! are written with a fixed key order and floats printed at 17 significant
//! digits, so the same inputs always produce byte-identical files and every
//! binary64 value survives a write/read cycle exactly.

use std::fs;
use std::io;
use std::path::Path;

use nalgebra::{Quaternion, Rotation3, UnitQuaternion, Vector3};
use pba::geometry::{cp_to_plane, plane_to_cp, PlaneCP, PlaneHesse, Pose};
use pba::problem::{Observation, ProblemGraph, ProblemState};
use pba::PbaError;
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

/// Unit-quaternion tolerance applied when reading poses and plane normals.
pub const UNIT_TOLERANCE: f64 = 1e-9;

/// A command failure carrying the process exit code to report.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

pub fn fail(code: i32, message: impl Into<String>) -> Failure {
    Failure {
        code,
        message: message.into(),
    }
}

/// Maps library errors onto the documented exit codes: 3 for scenes that
/// cannot be generated, 4 for geometrically degenerate data, 5 for a solve
/// that diverged, and 2 for inconsistent inputs.
pub fn from_pba(err: PbaError) -> Failure {
    let code = match &err {
        PbaError::InfeasibleScene(_) => 3,
        PbaError::DegeneratePlane(_) | PbaError::DegenerateFit(_) | PbaError::SingularSystem(_) => {
            4
        }
        PbaError::DivergedNaN { .. } => 5,
        PbaError::LengthMismatch { .. } | PbaError::InvalidGraph(_) => 2,
    };
    fail(code, err.to_string())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoseRecord {
    /// Unit quaternion in w, x, y, z order.
    pub rotation: [f64; 4],
    pub translation: [f64; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlaneRecord {
    pub normal: [f64; 3],
    pub offset: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObservationRecord {
    pub pose: usize,
    pub plane: usize,
    pub points: Vec<[f64; 3]>,
}

/// Ground-truth or measured scene: everything a solve needs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetFile {
    pub schema_version: u32,
    pub poses: Vec<PoseRecord>,
    pub planes: Vec<PlaneRecord>,
    pub observations: Vec<ObservationRecord>,
}

/// Summary of a finished solve, embedded in the result state file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportRecord {
    pub method: String,
    pub termination: String,
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub qr_time: f64,
    pub init_time: f64,
    pub optimization_time: f64,
}

/// Poses and planes without points: an initialization or a solve result.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StateFile {
    pub schema_version: u32,
    pub poses: Vec<PoseRecord>,
    pub planes: Vec<PlaneRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<ReportRecord>,
}

pub fn pose_to_record(pose: &Pose) -> PoseRecord {
    let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(pose.rotation));
    PoseRecord {
        rotation: [q.w, q.i, q.j, q.k],
        translation: [
            pose.translation.x,
            pose.translation.y,
            pose.translation.z,
        ],
    }
}

pub fn record_to_pose(record: &PoseRecord, index: usize) -> Result<Pose, Failure> {
    let [w, x, y, z] = record.rotation;
    let q = Quaternion::new(w, x, y, z);
    if (q.norm() - 1.0).abs() > UNIT_TOLERANCE {
        return Err(fail(
            2,
            format!(
                "pose {index}: quaternion norm {} is not 1 within {UNIT_TOLERANCE:e}",
                q.norm()
            ),
        ));
    }
    Ok(Pose::new(
        UnitQuaternion::from_quaternion(q)
            .to_rotation_matrix()
            .into_inner(),
        Vector3::from(record.translation),
    ))
}

pub fn plane_to_record(plane: &PlaneHesse) -> PlaneRecord {
    let n = plane.normal();
    PlaneRecord {
        normal: [n.x, n.y, n.z],
        offset: plane.offset(),
    }
}

pub fn record_to_plane(record: &PlaneRecord, index: usize) -> Result<PlaneHesse, Failure> {
    let normal = Vector3::from(record.normal);
    if (normal.norm() - 1.0).abs() > UNIT_TOLERANCE {
        return Err(fail(
            2,
            format!(
                "plane {index}: normal norm {} is not 1 within {UNIT_TOLERANCE:e}",
                normal.norm()
            ),
        ));
    }
    PlaneHesse::new(normal, record.offset)
        .map_err(|err| fail(2, format!("plane {index}: {err}")))
}

fn check_schema(version: u32, path: &Path) -> Result<(), Failure> {
    if version != SCHEMA_VERSION {
        return Err(fail(
            2,
            format!(
                "{}: schema_version {version} is not supported (expected {SCHEMA_VERSION})",
                path.display()
            ),
        ));
    }
    Ok(())
}

pub fn dataset_from_graph(graph: &ProblemGraph) -> DatasetFile {
    DatasetFile {
        schema_version: SCHEMA_VERSION,
        poses: graph.poses.iter().map(pose_to_record).collect(),
        planes: graph.planes.iter().map(plane_to_record).collect(),
        observations: graph
            .observations
            .iter()
            .map(|obs| ObservationRecord {
                pose: obs.pose_index,
                plane: obs.plane_index,
                points: obs.points.iter().map(|p| [p.x, p.y, p.z]).collect(),
            })
            .collect(),
    }
}

pub fn graph_from_dataset(file: &DatasetFile, path: &Path) -> Result<ProblemGraph, Failure> {
    check_schema(file.schema_version, path)?;
    let poses = file
        .poses
        .iter()
        .enumerate()
        .map(|(i, r)| record_to_pose(r, i))
        .collect::<Result<Vec<_>, _>>()?;
    let planes = file
        .planes
        .iter()
        .enumerate()
        .map(|(i, r)| record_to_plane(r, i))
        .collect::<Result<Vec<_>, _>>()?;
    let mut observations = Vec::with_capacity(file.observations.len());
    for (i, record) in file.observations.iter().enumerate() {
        if record.pose >= poses.len() {
            return Err(fail(
                2,
                format!(
                    "observation {i}: pose index {} out of range for {} poses",
                    record.pose,
                    poses.len()
                ),
            ));
        }
        if record.plane >= planes.len() {
            return Err(fail(
                2,
                format!(
                    "observation {i}: plane index {} out of range for {} planes",
                    record.plane,
                    planes.len()
                ),
            ));
        }
        observations.push(Observation {
            pose_index: record.pose,
            plane_index: record.plane,
            points: record.points.iter().map(|p| Vector3::from(*p)).collect(),
        });
    }
    Ok(ProblemGraph {
        poses,
        planes,
        observations,
    })
}

/// Builds the state file written by `perturb` and `solve`. Plane estimates
/// live as closest-point vectors in memory; on disk they use the same
/// normal/offset records as datasets.
pub fn state_to_file(
    poses: &[Pose],
    plane_cps: &[PlaneCP],
    report: Option<ReportRecord>,
) -> Result<StateFile, Failure> {
    let planes = plane_cps
        .iter()
        .map(|cp| cp_to_plane(cp).map(|plane| plane_to_record(&plane)))
        .collect::<Result<Vec<_>, _>>()
        .map_err(from_pba)?;
    Ok(StateFile {
        schema_version: SCHEMA_VERSION,
        poses: poses.iter().map(pose_to_record).collect(),
        planes,
        report,
    })
}

pub fn state_from_file(file: &StateFile, path: &Path) -> Result<ProblemState, Failure> {
    check_schema(file.schema_version, path)?;
    let poses = file
        .poses
        .iter()
        .enumerate()
        .map(|(i, r)| record_to_pose(r, i))
        .collect::<Result<Vec<_>, _>>()?;
    let mut plane_cps = Vec::with_capacity(file.planes.len());
    for (i, record) in file.planes.iter().enumerate() {
        let plane = record_to_plane(record, i)?;
        plane_cps.push(plane_to_cp(&plane).map_err(from_pba)?);
    }
    Ok(ProblemState { poses, plane_cps })
}

/// Compact JSON, except floats are printed as `{:.16e}`: 17 significant
/// digits, enough that parsing reproduces the exact binary64 value.
struct CanonicalFormatter;

impl serde_json::ser::Formatter for CanonicalFormatter {
    fn write_f64<W>(&mut self, writer: &mut W, value: f64) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        write!(writer, "{value:.16e}")
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let mut buffer = Vec::new();
    let mut serializer = serde_json::Serializer::with_formatter(&mut buffer, CanonicalFormatter);
    value
        .serialize(&mut serializer)
        .map_err(|err| fail(2, format!("{}: {err}", path.display())))?;
    buffer.push(b'\n');
    fs::write(path, buffer).map_err(|err| fail(2, format!("{}: {err}", path.display())))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, Failure> {
    let text =
        fs::read_to_string(path).map_err(|err| fail(2, format!("{}: {err}", path.display())))?;
    serde_json::from_str(&text).map_err(|err| fail(2, format!("{}: {err}", path.display())))
}
