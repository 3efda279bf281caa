//! `pba`: generate synthetic depth-mapping scenes, perturb their
//! trajectories, solve them, and score the results.
//!
//! Exit codes: 0 success, 2 usage or file-format problems, 3 infeasible
//! scene configuration, 4 geometrically degenerate data, 5 diverged solve.
//! Output files are deterministic for fixed inputs and seeds; only wall-time
//! fields (and the bench tables) vary between runs.

mod dataset;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use nalgebra::Vector3;
use pba::eval::{ate, compare_runs, comparison_csv};
use pba::reduction::ReducedBlock;
use pba::solver::{
    assemble, solve, BlockProvider, LmConfig, Method, SolveReport, Termination,
};
use pba::synth::{generate, initialize_planes, perturb, NoiseSpec, SceneSpec, Trajectory};

use dataset::{
    dataset_from_graph, fail, from_pba, graph_from_dataset, read_json, state_from_file,
    state_to_file, write_json, DatasetFile, Failure, ReportRecord, StateFile,
};

#[derive(Parser)]
#[command(name = "pba", version, about = "Planar bundle adjustment toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic ground-truth dataset.
    Generate {
        /// Scene configuration JSON; omitted fields use the defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the seed from the configuration.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Perturb a dataset's trajectory and initialize planes from it.
    Perturb {
        dataset: PathBuf,
        /// Noise preset: 1, 2, or 3. Mutually exclusive with explicit sigmas.
        #[arg(long)]
        level: Option<u8>,
        /// Per-axis rotation noise, degrees.
        #[arg(long)]
        sigma_rot: Option<f64>,
        /// Per-axis translation noise, meters.
        #[arg(long)]
        sigma_trans: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Refine an initialization against a dataset.
    Solve {
        dataset: PathBuf,
        init: PathBuf,
        #[arg(long, default_value = "reduced")]
        method: Method,
        #[arg(long)]
        out: PathBuf,
        /// Optional per-iteration trace CSV.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        max_iters: Option<usize>,
        #[arg(long)]
        ftol: Option<f64>,
        #[arg(long)]
        ptol: Option<f64>,
    },
    /// Print trajectory error of an estimate against a dataset's poses.
    Evaluate {
        dataset: PathBuf,
        estimate: PathBuf,
        /// Append a comparison row (the estimate must embed a solve report).
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Time normal-equation assembly across point counts and methods.
    Bench {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Optional CSV copy of the table.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate { config, seed, out } => cmd_generate(config.as_deref(), seed, &out),
        Command::Perturb {
            dataset,
            level,
            sigma_rot,
            sigma_trans,
            seed,
            out,
        } => cmd_perturb(&dataset, level, sigma_rot, sigma_trans, seed, &out),
        Command::Solve {
            dataset,
            init,
            method,
            out,
            trace,
            max_iters,
            ftol,
            ptol,
        } => cmd_solve(
            &dataset,
            &init,
            method,
            &out,
            trace.as_deref(),
            max_iters,
            ftol,
            ptol,
        ),
        Command::Evaluate {
            dataset,
            estimate,
            csv,
        } => cmd_evaluate(&dataset, &estimate, csv.as_deref()),
        Command::Bench { seed, out } => cmd_bench(seed, out.as_deref()),
    };
    if let Err(failure) = result {
        eprintln!("error: {}", failure.message);
        std::process::exit(failure.code);
    }
}

/// Scene configuration file. Every field is optional; the defaults describe
/// a 10 x 8 x 3 room circled by 50 poses measuring 200 points per visible
/// plane with 1 cm of depth noise.
#[derive(serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SceneConfig {
    room_extent: [f64; 3],
    extra_planes: usize,
    trajectory: String,
    n_poses: usize,
    points_per_observation: usize,
    point_noise_sigma: f64,
    max_range: f64,
    max_incidence: f64,
    seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        let spec = SceneSpec::default();
        SceneConfig {
            room_extent: [spec.room_extent.x, spec.room_extent.y, spec.room_extent.z],
            extra_planes: spec.extra_planes,
            trajectory: "circle".to_string(),
            n_poses: spec.n_poses,
            points_per_observation: spec.points_per_observation,
            point_noise_sigma: spec.point_noise_sigma,
            max_range: spec.max_range,
            max_incidence: spec.max_incidence,
            seed: spec.seed,
        }
    }
}

impl SceneConfig {
    fn into_spec(self) -> Result<SceneSpec, Failure> {
        let trajectory = match self.trajectory.as_str() {
            "circle" => Trajectory::Circle,
            "random_walk" => Trajectory::RandomWalk,
            other => {
                return Err(fail(
                    2,
                    format!("unknown trajectory {other:?} (expected circle or random_walk)"),
                ))
            }
        };
        Ok(SceneSpec {
            room_extent: Vector3::from(self.room_extent),
            extra_planes: self.extra_planes,
            trajectory,
            n_poses: self.n_poses,
            points_per_observation: self.points_per_observation,
            point_noise_sigma: self.point_noise_sigma,
            max_range: self.max_range,
            max_incidence: self.max_incidence,
            seed: self.seed,
        })
    }
}

fn cmd_generate(config: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<(), Failure> {
    let config: SceneConfig = match config {
        Some(path) => read_json(path)?,
        None => SceneConfig::default(),
    };
    let mut spec = config.into_spec()?;
    if let Some(seed) = seed {
        spec.seed = seed;
    }
    let scene = generate(&spec).map_err(from_pba)?;
    write_json(out, &dataset_from_graph(&scene.graph))?;
    println!(
        "wrote {}: {} poses, {} planes, {} observations, noise floor {:.6e}",
        out.display(),
        scene.graph.poses.len(),
        scene.graph.planes.len(),
        scene.graph.observations.len(),
        scene.noise_floor
    );
    Ok(())
}

fn cmd_perturb(
    dataset_path: &Path,
    level: Option<u8>,
    sigma_rot: Option<f64>,
    sigma_trans: Option<f64>,
    seed: u64,
    out: &Path,
) -> Result<(), Failure> {
    let noise = match (level, sigma_rot, sigma_trans) {
        (Some(level), None, None) => NoiseSpec::level(level, seed)
            .ok_or_else(|| fail(2, format!("--level must be 1, 2, or 3, got {level}")))?,
        (None, Some(sigma_rot), Some(sigma_trans)) => NoiseSpec {
            sigma_rot,
            sigma_trans,
            seed,
        },
        _ => {
            return Err(fail(
                2,
                "pass either --level or both --sigma-rot and --sigma-trans",
            ))
        }
    };
    let file: DatasetFile = read_json(dataset_path)?;
    let graph = graph_from_dataset(&file, dataset_path)?;
    let poses = perturb(&graph.poses, &noise);
    let plane_cps = initialize_planes(&graph, &poses).map_err(from_pba)?;
    write_json(out, &state_to_file(&poses, &plane_cps, None)?)?;
    println!(
        "wrote {}: {} poses, {} planes (sigma_rot {} deg, sigma_trans {} m, seed {})",
        out.display(),
        poses.len(),
        plane_cps.len(),
        noise.sigma_rot,
        noise.sigma_trans,
        seed
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_solve(
    dataset_path: &Path,
    init_path: &Path,
    method: Method,
    out: &Path,
    trace: Option<&Path>,
    max_iters: Option<usize>,
    ftol: Option<f64>,
    ptol: Option<f64>,
) -> Result<(), Failure> {
    let file: DatasetFile = read_json(dataset_path)?;
    let graph = graph_from_dataset(&file, dataset_path)?;
    let init_file: StateFile = read_json(init_path)?;
    let initial = state_from_file(&init_file, init_path)?;

    let defaults = LmConfig::default();
    let config = LmConfig {
        method,
        max_iterations: max_iters.unwrap_or(defaults.max_iterations),
        function_tolerance: ftol.unwrap_or(defaults.function_tolerance),
        parameter_tolerance: ptol.unwrap_or(defaults.parameter_tolerance),
        ..defaults
    };
    let (state, report) = solve(&graph, &initial, &config).map_err(from_pba)?;

    write_json(
        out,
        &state_to_file(&state.poses, &state.plane_cps, Some(report_record(&report)))?,
    )?;
    if let Some(trace_path) = trace {
        write_trace(trace_path, &report)?;
    }
    println!(
        "{}: {} after {} iterations, cost {:.6e} -> {:.6e} ({:.3}s qr, {:.3}s init, {:.3}s optimize)",
        method,
        report.termination,
        report.iterations,
        report.initial_cost,
        report.final_cost,
        report.qr_seconds,
        report.init_seconds,
        report.optimization_seconds
    );
    Ok(())
}

fn report_record(report: &SolveReport) -> ReportRecord {
    ReportRecord {
        method: report.method.to_string(),
        termination: report.termination.to_string(),
        iterations: report.iterations,
        initial_cost: report.initial_cost,
        final_cost: report.final_cost,
        qr_time: report.qr_seconds,
        init_time: report.init_seconds,
        optimization_time: report.optimization_seconds,
    }
}

fn write_trace(path: &Path, report: &SolveReport) -> Result<(), Failure> {
    let mut text = String::from("iteration,cost,lambda,step_norm,wall_time_seconds\n");
    for row in &report.trace {
        text.push_str(&format!(
            "{},{},{},{},{}\n",
            row.iteration, row.cost, row.lambda, row.step_norm, row.wall_time
        ));
    }
    fs::write(path, text).map_err(|err| fail(2, format!("{}: {err}", path.display())))
}

fn cmd_evaluate(
    dataset_path: &Path,
    estimate_path: &Path,
    csv: Option<&Path>,
) -> Result<(), Failure> {
    let file: DatasetFile = read_json(dataset_path)?;
    let graph = graph_from_dataset(&file, dataset_path)?;
    let estimate_file: StateFile = read_json(estimate_path)?;
    let estimate = state_from_file(&estimate_file, estimate_path)?;
    let result = ate(&graph.poses, &estimate.poses).map_err(from_pba)?;
    println!("ate_rot_deg {:.5e}", result.ate_rot);
    println!("ate_trans_m {:.5e}", result.ate_trans);

    if let Some(csv_path) = csv {
        let record = estimate_file.report.as_ref().ok_or_else(|| {
            fail(
                2,
                format!(
                    "{}: no embedded solve report, cannot append a comparison row",
                    estimate_path.display()
                ),
            )
        })?;
        let report = report_from_record(record, estimate_path)?;
        let rows = compare_runs(&[report], &[result]).map_err(from_pba)?;
        append_csv(csv_path, &comparison_csv(&rows))?;
        println!("appended comparison row to {}", csv_path.display());
    }
    Ok(())
}

fn report_from_record(record: &ReportRecord, path: &Path) -> Result<SolveReport, Failure> {
    let method: Method = record
        .method
        .parse()
        .map_err(|err: String| fail(2, format!("{}: {err}", path.display())))?;
    let termination = match record.termination.as_str() {
        "function_tolerance" => Termination::FunctionTolerance,
        "parameter_tolerance" => Termination::ParameterTolerance,
        "max_iterations" => Termination::MaxIterations,
        other => {
            return Err(fail(
                2,
                format!("{}: unknown termination {other:?}", path.display()),
            ))
        }
    };
    Ok(SolveReport {
        method,
        termination,
        iterations: record.iterations,
        initial_cost: record.initial_cost,
        final_cost: record.final_cost,
        qr_seconds: record.qr_time,
        init_seconds: record.init_time,
        optimization_seconds: record.optimization_time,
        trace: Vec::new(),
    })
}

/// Appends the data rows of `table` (header plus rows) to `path`, writing
/// the header only when the file does not exist yet or is empty.
fn append_csv(path: &Path, table: &str) -> Result<(), Failure> {
    let io_err = |err: std::io::Error| fail(2, format!("{}: {err}", path.display()));
    let existing = fs::metadata(path).map(|m| m.len()).unwrap_or(0);
    let mut file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(io_err)?;
    let body = match table.split_once('\n') {
        Some((header, rows)) => {
            if existing == 0 {
                file.write_all(header.as_bytes()).map_err(io_err)?;
                file.write_all(b"\n").map_err(io_err)?;
            }
            rows
        }
        None => table,
    };
    file.write_all(body.as_bytes()).map_err(io_err)
}

/// One bench scene per point count: ten poses circling the six walls of the
/// default room, no extra planes, so only `points_per_observation` changes.
fn bench_scene(points: usize, seed: u64) -> SceneSpec {
    SceneSpec {
        extra_planes: 0,
        n_poses: 10,
        points_per_observation: points,
        seed,
        ..SceneSpec::default()
    }
}

/// Median seconds for one full normal-equation assembly, with the reduced
/// blocks or cached coefficient matrices prepared outside the timed region,
/// mirroring how the solver reuses them across iterations.
fn median_assembly_seconds(
    graph: &pba::problem::ProblemGraph,
    state: &pba::problem::ProblemState,
    reduced: bool,
) -> Result<f64, Failure> {
    let blocks: Vec<ReducedBlock>;
    let coefficients: Vec<nalgebra::DMatrix<f64>>;
    let provider = if reduced {
        blocks = graph
            .observations
            .iter()
            .map(ReducedBlock::from_observation)
            .collect();
        BlockProvider::Reduced(&blocks)
    } else {
        coefficients = graph
            .observations
            .iter()
            .map(|obs| pba::reduction::build_coefficients(&obs.points))
            .collect();
        BlockProvider::Direct(&coefficients)
    };

    let once = Instant::now();
    assemble(graph, state, &provider).map_err(from_pba)?;
    let single = once.elapsed().as_secs_f64().max(1e-9);
    let reps = ((0.004 / single).ceil() as usize).clamp(1, 400);

    let mut samples = Vec::with_capacity(9);
    for _ in 0..9 {
        let start = Instant::now();
        for _ in 0..reps {
            assemble(graph, state, &provider).map_err(from_pba)?;
        }
        samples.push(start.elapsed().as_secs_f64() / reps as f64);
    }
    samples.sort_by(f64::total_cmp);
    Ok(samples[samples.len() / 2])
}

fn cmd_bench(seed: u64, out: Option<&Path>) -> Result<(), Failure> {
    let mut csv = String::from("method,points_per_observation,assembly_seconds\n");
    println!("{:<8} {:>8} {:>16}", "method", "points", "assembly_s");
    for points in [10usize, 100, 1000] {
        let scene = generate(&bench_scene(points, seed)).map_err(from_pba)?;
        let state = scene.graph.ground_truth_state().map_err(from_pba)?;
        for (name, reduced) in [("reduced", true), ("direct", false)] {
            let seconds = median_assembly_seconds(&scene.graph, &state, reduced)?;
            println!("{name:<8} {points:>8} {seconds:>16.3e}");
            csv.push_str(&format!("{name},{points},{seconds:e}\n"));
        }
    }
    if let Some(path) = out {
        fs::write(path, csv).map_err(|err| fail(2, format!("{}: {err}", path.display())))?;
    }
    Ok(())
}
