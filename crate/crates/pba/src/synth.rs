//! Synthetic scenes: a planar room with extra tilted planes, a smooth
//! trajectory inside it, noisy on-plane point observations, odometry-style
//! pose perturbation, and plane initialization from perturbed poses.
//!
//! Everything is a pure function of its spec and seed: repeated calls return
//! bit-identical output.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::PbaError;
use crate::geometry::{
    fit_plane, plane_to_cp, rotation_from_angle_axis, transform_plane, PlaneCP, PlaneHesse, Pose,
};
use crate::problem::{observability_check, Observation, ProblemGraph};

/// Trajectory shapes the generator knows how to lay out.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trajectory {
    Circle,
    RandomWalk,
}

/// Recipe for one synthetic scene.
#[derive(Debug, Clone)]
pub struct SceneSpec {
    /// Axis-aligned room size in meters, centered on the origin.
    pub room_extent: Vector3<f64>,
    /// Number of random tilted planes added to the six room walls.
    pub extra_planes: usize,
    pub trajectory: Trajectory,
    pub n_poses: usize,
    pub points_per_observation: usize,
    /// Standard deviation of point noise along the plane normal, meters.
    pub point_noise_sigma: f64,
    /// Maximum sensor-to-point distance, meters.
    pub max_range: f64,
    /// Maximum incidence angle at a sampled point, degrees.
    pub max_incidence: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            room_extent: Vector3::new(10.0, 8.0, 3.0),
            extra_planes: 6,
            trajectory: Trajectory::Circle,
            n_poses: 50,
            points_per_observation: 200,
            point_noise_sigma: 0.01,
            max_range: 8.0,
            max_incidence: 80.0,
            seed: 0,
        }
    }
}

/// Pose perturbation magnitudes.
#[derive(Debug, Clone)]
pub struct NoiseSpec {
    /// Per-axis Euler angle error standard deviation, degrees.
    pub sigma_rot: f64,
    /// Per-axis translation error standard deviation, meters.
    pub sigma_trans: f64,
    pub seed: u64,
}

impl NoiseSpec {
    /// The three standard noise levels:
    /// 1 = (0.1 deg, 0.01 m), 2 = (0.5 deg, 0.03 m), 3 = (1.0 deg, 0.05 m).
    pub fn level(level: u8, seed: u64) -> Option<NoiseSpec> {
        let (sigma_rot, sigma_trans) = match level {
            1 => (0.1, 0.01),
            2 => (0.5, 0.03),
            3 => (1.0, 0.05),
            _ => return None,
        };
        Some(NoiseSpec {
            sigma_rot,
            sigma_trans,
            seed,
        })
    }
}

/// A generated problem plus the noise actually injected into its points:
/// `noise_floor` is the sum of squared normal displacements, which is
/// exactly the point-to-plane cost of the ground-truth state.
#[derive(Debug, Clone)]
pub struct GeneratedScene {
    pub graph: ProblemGraph,
    pub noise_floor: f64,
}

/// Planes closer to the origin than this are re-drawn: the closest-point
/// parameterization needs |d| comfortably away from zero.
const MIN_PLANE_OFFSET: f64 = 0.1;

/// A pose closer to a plane than this does not observe it.
const MIN_STANDOFF: f64 = 1e-3;

/// Visible patches smaller than this radius are skipped as uninformative.
const MIN_PATCH_RADIUS: f64 = 0.05;

fn validate_spec(spec: &SceneSpec) -> Result<(), PbaError> {
    let e = spec.room_extent;
    if !(e.x > 0.0 && e.y > 0.0 && e.z > 0.0) {
        return Err(PbaError::InfeasibleScene(
            "room extents must be positive".to_string(),
        ));
    }
    if e.min() < 2.0 * MIN_PLANE_OFFSET {
        return Err(PbaError::InfeasibleScene(format!(
            "room extent {:.3} puts walls closer than {} m to the origin",
            e.min(),
            MIN_PLANE_OFFSET
        )));
    }
    if spec.n_poses == 0 || spec.points_per_observation == 0 {
        return Err(PbaError::InfeasibleScene(
            "need at least one pose and one point per observation".to_string(),
        ));
    }
    if spec.point_noise_sigma < 0.0 {
        return Err(PbaError::InfeasibleScene(
            "point noise sigma must be nonnegative".to_string(),
        ));
    }
    if spec.max_range <= 0.0 {
        return Err(PbaError::InfeasibleScene(
            "max range must be positive".to_string(),
        ));
    }
    if !(spec.max_incidence > 0.0 && spec.max_incidence < 90.0) {
        return Err(PbaError::InfeasibleScene(
            "max incidence must lie strictly between 0 and 90 degrees".to_string(),
        ));
    }
    Ok(())
}

fn room_planes(extent: &Vector3<f64>) -> Vec<PlaneHesse> {
    let half = extent / 2.0;
    [
        (Vector3::new(1.0, 0.0, 0.0), -half.x),
        (Vector3::new(-1.0, 0.0, 0.0), -half.x),
        (Vector3::new(0.0, 1.0, 0.0), -half.y),
        (Vector3::new(0.0, -1.0, 0.0), -half.y),
        (Vector3::new(0.0, 0.0, 1.0), -half.z),
        (Vector3::new(0.0, 0.0, -1.0), -half.z),
    ]
    .iter()
    .map(|(n, d)| PlaneHesse::new(*n, *d).expect("unit axis normal"))
    .collect()
}

fn random_unit(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let n = v.norm();
        if n > 1e-2 && n <= 1.0 {
            return v / n;
        }
    }
}

fn random_plane(rng: &mut ChaCha8Rng, extent: &Vector3<f64>) -> Result<PlaneHesse, PbaError> {
    for _ in 0..1000 {
        let anchor = Vector3::new(
            rng.random_range(-0.3..0.3) * extent.x,
            rng.random_range(-0.3..0.3) * extent.y,
            rng.random_range(-0.3..0.3) * extent.z,
        );
        let normal = random_unit(rng);
        let offset = -normal.dot(&anchor);
        if offset.abs() < MIN_PLANE_OFFSET {
            continue;
        }
        return PlaneHesse::new(normal, offset);
    }
    Err(PbaError::InfeasibleScene(
        "could not draw a plane clear of the origin".to_string(),
    ))
}

fn yaw_pose(yaw: f64, position: Vector3<f64>) -> Pose {
    Pose {
        rotation: rotation_from_angle_axis(Vector3::new(0.0, 0.0, yaw)),
        translation: position,
    }
}

fn circle_trajectory(spec: &SceneSpec) -> Vec<Pose> {
    let radius = 0.25 * spec.room_extent.x.min(spec.room_extent.y);
    (0..spec.n_poses)
        .map(|i| {
            let phi = std::f64::consts::TAU * i as f64 / spec.n_poses as f64;
            yaw_pose(
                phi + std::f64::consts::FRAC_PI_2,
                Vector3::new(radius * phi.cos(), radius * phi.sin(), 0.0),
            )
        })
        .collect()
}

fn random_walk_trajectory(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Vec<Pose> {
    let step = 0.1;
    let heading_noise = Normal::new(0.0, 10.0f64.to_radians()).expect("fixed sigma");
    let bound_x = 0.4 * spec.room_extent.x;
    let bound_y = 0.4 * spec.room_extent.y;
    let mut poses = Vec::with_capacity(spec.n_poses);
    let mut position = Vector3::zeros();
    let mut yaw = 0.0;
    poses.push(yaw_pose(yaw, position));
    for _ in 1..spec.n_poses {
        yaw += heading_noise.sample(rng);
        let mut next = position;
        for _ in 0..8 {
            let candidate =
                position + rotation_from_angle_axis(Vector3::new(0.0, 0.0, yaw)) * Vector3::new(step, 0.0, 0.0);
            if candidate.x.abs() <= bound_x && candidate.y.abs() <= bound_y {
                next = candidate;
                break;
            }
            yaw += std::f64::consts::FRAC_PI_2;
        }
        position = next;
        poses.push(yaw_pose(yaw, position));
    }
    poses
}

/// Two unit vectors spanning the plane of `normal`, chosen deterministically.
fn tangent_basis(normal: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let helper = if normal.x.abs() <= normal.y.abs() && normal.x.abs() <= normal.z.abs() {
        Vector3::x()
    } else if normal.y.abs() <= normal.z.abs() {
        Vector3::y()
    } else {
        Vector3::z()
    };
    let u = normal.cross(&helper).normalize();
    let v = normal.cross(&u);
    (u, v)
}

/// Builds the scene: room walls plus random planes, the trajectory, and one
/// observation per (pose, visible plane) with `points_per_observation`
/// samples drawn uniformly on the visible patch and displaced along the
/// normal by Gaussian noise. Points are stored in the sensor frame. Planes
/// no pose can see are dropped from the graph.
pub fn generate(spec: &SceneSpec) -> Result<GeneratedScene, PbaError> {
    validate_spec(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut planes = room_planes(&spec.room_extent);
    for _ in 0..spec.extra_planes {
        planes.push(random_plane(&mut rng, &spec.room_extent)?);
    }

    let poses = match spec.trajectory {
        Trajectory::Circle => circle_trajectory(spec),
        Trajectory::RandomWalk => random_walk_trajectory(spec, &mut rng),
    };

    let noise = Normal::new(0.0, spec.point_noise_sigma).map_err(|_| {
        PbaError::InfeasibleScene("invalid point noise sigma".to_string())
    })?;
    let incidence_tan = spec.max_incidence.to_radians().tan();
    let mut observations = Vec::new();
    let mut noise_floor = 0.0;

    for (i, pose) in poses.iter().enumerate() {
        for (j, plane) in planes.iter().enumerate() {
            let signed = plane.normal().dot(&pose.translation) + plane.offset();
            let h = signed.abs();
            if h > spec.max_range || h < MIN_STANDOFF {
                continue;
            }
            let range_limit = (spec.max_range * spec.max_range - h * h).sqrt();
            let patch_radius = range_limit.min(h * incidence_tan);
            if patch_radius < MIN_PATCH_RADIUS {
                continue;
            }
            let foot = pose.translation - signed * plane.normal();
            let (u, v) = tangent_basis(plane.normal());
            let inverse = pose.inverse();
            let points = (0..spec.points_per_observation)
                .map(|_| {
                    let radius = patch_radius * rng.random::<f64>().sqrt();
                    let angle = std::f64::consts::TAU * rng.random::<f64>();
                    let eps = noise.sample(&mut rng);
                    noise_floor += eps * eps;
                    let global = foot
                        + u * (radius * angle.cos())
                        + v * (radius * angle.sin())
                        + plane.normal() * eps;
                    inverse.apply(&global)
                })
                .collect();
            observations.push(Observation {
                pose_index: i,
                plane_index: j,
                points,
            });
        }
    }

    // Drop planes nothing observed and remap indices.
    let mut used = vec![false; planes.len()];
    for obs in &observations {
        used[obs.plane_index] = true;
    }
    let mut remap = vec![usize::MAX; planes.len()];
    let mut kept = Vec::new();
    for (j, plane) in planes.into_iter().enumerate() {
        if used[j] {
            remap[j] = kept.len();
            kept.push(plane);
        }
    }
    for obs in &mut observations {
        obs.plane_index = remap[obs.plane_index];
    }

    let graph = ProblemGraph {
        poses,
        planes: kept,
        observations,
    };

    let report = observability_check(&graph);
    for pose in &report.per_pose {
        if pose.normal_rank < 3 {
            return Err(PbaError::InfeasibleScene(format!(
                "pose {} sees normals spanning rank {} (< 3); widen max_range or add planes",
                pose.pose_index, pose.normal_rank
            )));
        }
    }

    Ok(GeneratedScene { graph, noise_floor })
}

/// Applies odometry-style accumulated noise: pose 0 stays fixed as the
/// anchor; each later pose is rebuilt from the clean relative motion and a
/// fresh error transform, so errors compound along the trajectory.
pub fn perturb(trajectory: &[Pose], noise: &NoiseSpec) -> Vec<Pose> {
    if noise.sigma_rot == 0.0 && noise.sigma_trans == 0.0 {
        return trajectory.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    let rot = Normal::new(0.0, noise.sigma_rot.max(0.0).to_radians()).expect("nonnegative");
    let trans = Normal::new(0.0, noise.sigma_trans.max(0.0)).expect("nonnegative");
    let mut errors = Vec::with_capacity(trajectory.len());
    errors.push(Pose::identity());
    for _ in 1..trajectory.len() {
        let yaw = rot.sample(&mut rng);
        let pitch = rot.sample(&mut rng);
        let roll = rot.sample(&mut rng);
        // Intrinsic Z-Y-X Euler composition.
        let rotation = rotation_from_angle_axis(Vector3::new(0.0, 0.0, yaw))
            * rotation_from_angle_axis(Vector3::new(0.0, pitch, 0.0))
            * rotation_from_angle_axis(Vector3::new(roll, 0.0, 0.0));
        let translation = Vector3::new(
            trans.sample(&mut rng),
            trans.sample(&mut rng),
            trans.sample(&mut rng),
        );
        errors.push(Pose::new(rotation, translation));
    }
    perturb_with_errors(trajectory, &errors)
}

/// The error-chaining recursion with explicit error transforms:
/// `out[i] = errors[i] * (T_i * T_{i-1}^{-1}) * out[i-1]`, `out[0] = T_0`.
/// `errors[0]` is ignored.
pub fn perturb_with_errors(trajectory: &[Pose], errors: &[Pose]) -> Vec<Pose> {
    let mut out = Vec::with_capacity(trajectory.len());
    let Some(first) = trajectory.first() else {
        return out;
    };
    out.push(first.clone());
    for i in 1..trajectory.len() {
        let relative = trajectory[i].compose(&trajectory[i - 1].inverse());
        let chained = errors[i].compose(&relative).compose(&out[i - 1]);
        out.push(chained);
    }
    out
}

/// Initializes each global plane from its earliest observing pose: fit the
/// local points, then carry the fitted plane into the global frame through
/// that pose's perturbed value.
pub fn initialize_planes(
    graph: &ProblemGraph,
    perturbed_poses: &[Pose],
) -> Result<Vec<PlaneCP>, PbaError> {
    if perturbed_poses.len() != graph.poses.len() {
        return Err(PbaError::LengthMismatch {
            expected: graph.poses.len(),
            actual: perturbed_poses.len(),
        });
    }
    let mut initialized = Vec::with_capacity(graph.planes.len());
    for j in 0..graph.planes.len() {
        let obs = graph
            .observations
            .iter()
            .filter(|o| o.plane_index == j)
            .min_by_key(|o| o.pose_index)
            .ok_or_else(|| {
                PbaError::InvalidGraph(format!("plane {j} has no observations"))
            })?;
        let local = fit_plane(&obs.points)?;
        let global = transform_plane(&perturbed_poses[obs.pose_index].inverse(), &local)?;
        initialized.push(plane_to_cp(&global)?);
    }
    Ok(initialized)
}
