//! End-to-end tests of the `pba` binary: every subcommand, the documented
//! exit codes, and the determinism and round-trip guarantees of the file
//! formats.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn pba(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pba"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn assert_ok(output: &Output) {
    assert!(
        output.status.success(),
        "command failed: {}",
        String::from_utf8_lossy(&output.stderr)
    );
}

fn assert_exit(output: &Output, code: i32) {
    assert_eq!(
        output.status.code(),
        Some(code),
        "stderr: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    assert!(
        !output.stderr.is_empty(),
        "expected a diagnostic on stderr"
    );
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path
}

fn json_file(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// Small scene used by most tests; deterministic and quick to solve.
fn small_scene(dir: &Path) -> PathBuf {
    write_config(
        dir,
        "config.json",
        r#"{"n_poses": 8, "points_per_observation": 30, "extra_planes": 2, "seed": 42}"#,
    );
    let scene = dir.join("scene.json");
    let out = pba(
        dir,
        &[
            "generate",
            "--config",
            "config.json",
            "--out",
            scene.to_str().unwrap(),
        ],
    );
    assert_ok(&out);
    scene
}

/// Parses the two `ate_*` lines evaluate prints.
fn ate_from_stdout(output: &Output) -> (f64, f64) {
    let text = String::from_utf8_lossy(&output.stdout);
    let mut rot = None;
    let mut trans = None;
    for line in text.lines() {
        if let Some(v) = line.strip_prefix("ate_rot_deg ") {
            rot = Some(v.trim().parse().unwrap());
        }
        if let Some(v) = line.strip_prefix("ate_trans_m ") {
            trans = Some(v.trim().parse().unwrap());
        }
    }
    (rot.expect("ate_rot line"), trans.expect("ate_trans line"))
}

#[test]
fn generate_is_deterministic_and_well_formed() {
    let dir = TempDir::new().unwrap();
    write_config(
        dir.path(),
        "config.json",
        r#"{"n_poses": 6, "points_per_observation": 15, "seed": 9}"#,
    );
    for out_name in ["a.json", "b.json"] {
        let out = pba(
            dir.path(),
            &["generate", "--config", "config.json", "--out", out_name],
        );
        assert_ok(&out);
    }
    let a = std::fs::read(dir.path().join("a.json")).unwrap();
    let b = std::fs::read(dir.path().join("b.json")).unwrap();
    assert_eq!(a, b, "same config and seed must produce identical bytes");

    let scene = json_file(&dir.path().join("a.json"));
    assert_eq!(scene["schema_version"], 1);
    assert_eq!(scene["poses"].as_array().unwrap().len(), 6);
    let planes = scene["planes"].as_array().unwrap();
    assert!(planes.len() >= 7, "expected walls plus extras, got {}", planes.len());
    for pose in scene["poses"].as_array().unwrap() {
        let q: Vec<f64> = pose["rotation"]
            .as_array()
            .unwrap()
            .iter()
            .map(|v| v.as_f64().unwrap())
            .collect();
        let norm = q.iter().map(|c| c * c).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() <= 1e-9);
    }
    for plane in planes {
        let n: Vec<f64> = plane["normal"]
            .as_array()
            .unwrap()
            .iter()
            .map(|v| v.as_f64().unwrap())
            .collect();
        let norm = n.iter().map(|c| c * c).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() <= 1e-9);
    }

    // The --seed flag overrides the config seed, changing the bytes.
    let out = pba(
        dir.path(),
        &["generate", "--config", "config.json", "--seed", "10", "--out", "c.json"],
    );
    assert_ok(&out);
    let c = std::fs::read(dir.path().join("c.json")).unwrap();
    assert_ne!(a, c);
}

#[test]
fn generate_with_default_config_builds_the_default_scene() {
    let dir = TempDir::new().unwrap();
    let out = pba(dir.path(), &["generate", "--out", "scene.json"]);
    assert_ok(&out);
    let scene = json_file(&dir.path().join("scene.json"));
    assert_eq!(scene["poses"].as_array().unwrap().len(), 50);
    assert!(scene["planes"].as_array().unwrap().len() >= 7);
}

#[test]
fn malformed_config_exits_2() {
    let dir = TempDir::new().unwrap();
    write_config(dir.path(), "broken.json", "{ nonsense");
    let out = pba(
        dir.path(),
        &["generate", "--config", "broken.json", "--out", "x.json"],
    );
    assert_exit(&out, 2);

    write_config(dir.path(), "typo.json", r#"{"n_pose": 5}"#);
    let out = pba(
        dir.path(),
        &["generate", "--config", "typo.json", "--out", "x.json"],
    );
    assert_exit(&out, 2);
}

#[test]
fn infeasible_scene_exits_3() {
    let dir = TempDir::new().unwrap();
    write_config(
        dir.path(),
        "tiny_range.json",
        r#"{"n_poses": 4, "max_range": 0.05}"#,
    );
    let out = pba(
        dir.path(),
        &["generate", "--config", "tiny_range.json", "--out", "x.json"],
    );
    assert_exit(&out, 3);
}

#[test]
fn zero_noise_perturbation_reproduces_ground_truth() {
    let dir = TempDir::new().unwrap();
    // Zero point noise as well, so the initialized planes must match the
    // dataset planes to fit accuracy.
    write_config(
        dir.path(),
        "config.json",
        r#"{"n_poses": 5, "points_per_observation": 12, "point_noise_sigma": 0.0, "seed": 11}"#,
    );
    let out = pba(
        dir.path(),
        &["generate", "--config", "config.json", "--out", "scene.json"],
    );
    assert_ok(&out);
    let out = pba(
        dir.path(),
        &[
            "perturb",
            "scene.json",
            "--sigma-rot",
            "0",
            "--sigma-trans",
            "0",
            "--seed",
            "1",
            "--out",
            "init.json",
        ],
    );
    assert_ok(&out);

    let scene = json_file(&dir.path().join("scene.json"));
    let init = json_file(&dir.path().join("init.json"));
    let poses = scene["poses"].as_array().unwrap();
    let init_poses = init["poses"].as_array().unwrap();
    assert_eq!(poses.len(), init_poses.len());
    for (a, b) in poses.iter().zip(init_poses) {
        for key in ["rotation", "translation"] {
            let va: Vec<f64> = a[key]
                .as_array()
                .unwrap()
                .iter()
                .map(|v| v.as_f64().unwrap())
                .collect();
            let vb: Vec<f64> = b[key]
                .as_array()
                .unwrap()
                .iter()
                .map(|v| v.as_f64().unwrap())
                .collect();
            // Quaternions may come back with either sign; compare both.
            let direct: f64 = va
                .iter()
                .zip(&vb)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            let flipped: f64 = va
                .iter()
                .zip(&vb)
                .map(|(x, y)| (x + y) * (x + y))
                .sum::<f64>()
                .sqrt();
            assert!(
                direct.min(flipped) <= 1e-12,
                "{key} drifted by {:e}",
                direct.min(flipped)
            );
        }
    }

    let planes = scene["planes"].as_array().unwrap();
    let init_planes = init["planes"].as_array().unwrap();
    assert_eq!(planes.len(), init_planes.len());
    for (a, b) in planes.iter().zip(init_planes) {
        let da = a["offset"].as_f64().unwrap();
        let db = b["offset"].as_f64().unwrap();
        assert!((da - db).abs() <= 1e-9, "offset {da} vs {db}");
    }

    // An exact initialization evaluates to zero error.
    let out = pba(dir.path(), &["evaluate", "scene.json", "init.json"]);
    assert_ok(&out);
    let (rot, trans) = ate_from_stdout(&out);
    assert!(rot <= 1e-12 && trans <= 1e-12, "got {rot}, {trans}");
}

#[test]
fn solve_pipeline_backends_agree_and_traces_match() {
    let dir = TempDir::new().unwrap();
    let scene = small_scene(dir.path());
    let scene = scene.to_str().unwrap();
    let out = pba(
        dir.path(),
        &[
            "perturb", scene, "--level", "1", "--seed", "7", "--out", "init.json",
        ],
    );
    assert_ok(&out);

    for (method, result, trace) in [
        ("reduced", "red.json", "red.csv"),
        ("direct", "dir.json", "dir.csv"),
    ] {
        let out = pba(
            dir.path(),
            &[
                "solve", scene, "init.json", "--method", method, "--out", result,
                "--trace", trace,
            ],
        );
        assert_ok(&out);
    }

    let red = json_file(&dir.path().join("red.json"));
    let dir_result = json_file(&dir.path().join("dir.json"));
    let cost_r = red["report"]["final_cost"].as_f64().unwrap();
    let cost_d = dir_result["report"]["final_cost"].as_f64().unwrap();
    assert!(
        (cost_r - cost_d).abs() <= 1e-8 * cost_r.max(cost_d),
        "final costs diverged: {cost_r} vs {cost_d}"
    );
    assert!(red["report"]["qr_time"].as_f64().unwrap() > 0.0);
    assert_eq!(dir_result["report"]["qr_time"].as_f64().unwrap(), 0.0);

    for (result, trace) in [("red.json", "red.csv"), ("dir.json", "dir.csv")] {
        let report = &json_file(&dir.path().join(result))["report"];
        let iterations = report["iterations"].as_u64().unwrap() as usize;
        let text = std::fs::read_to_string(dir.path().join(trace)).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next(),
            Some("iteration,cost,lambda,step_norm,wall_time_seconds")
        );
        assert_eq!(lines.count(), iterations, "{trace} rows != iterations");
    }

    // Solving must reduce the trajectory error below the initialization's.
    let before = ate_from_stdout(&pba(dir.path(), &["evaluate", scene, "init.json"]));
    let out = pba(
        dir.path(),
        &["evaluate", scene, "red.json", "--csv", "table.csv"],
    );
    assert_ok(&out);
    let after = ate_from_stdout(&out);
    assert!(after.0 < before.0, "rotation error did not drop");
    assert!(after.1 < before.1, "translation error did not drop");

    // Appending twice yields one header and two data rows.
    let out = pba(
        dir.path(),
        &["evaluate", scene, "dir.json", "--csv", "table.csv"],
    );
    assert_ok(&out);
    let table = std::fs::read_to_string(dir.path().join("table.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("method,iterations,ate_rot,ate_trans"));
    assert!(lines[1].starts_with("reduced,"));
    assert!(lines[2].starts_with("direct,"));
}

#[test]
fn noise_flag_conflicts_exit_2() {
    let dir = TempDir::new().unwrap();
    let scene = small_scene(dir.path());
    let scene = scene.to_str().unwrap();
    let out = pba(
        dir.path(),
        &[
            "perturb", scene, "--level", "1", "--sigma-rot", "0.1", "--out", "x.json",
        ],
    );
    assert_exit(&out, 2);
    let out = pba(dir.path(), &["perturb", scene, "--out", "x.json"]);
    assert_exit(&out, 2);
    let out = pba(
        dir.path(),
        &["perturb", scene, "--level", "9", "--out", "x.json"],
    );
    assert_exit(&out, 2);
}

#[test]
fn unknown_flag_exits_2() {
    let dir = TempDir::new().unwrap();
    let out = pba(dir.path(), &["generate", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn mismatched_files_exit_2() {
    let dir = TempDir::new().unwrap();
    write_config(
        dir.path(),
        "big.json",
        r#"{"n_poses": 8, "points_per_observation": 20, "seed": 1}"#,
    );
    write_config(
        dir.path(),
        "small.json",
        r#"{"n_poses": 5, "points_per_observation": 20, "seed": 1}"#,
    );
    for (config, scene) in [("big.json", "a.json"), ("small.json", "b.json")] {
        let out = pba(
            dir.path(),
            &["generate", "--config", config, "--out", scene],
        );
        assert_ok(&out);
    }
    let out = pba(
        dir.path(),
        &[
            "perturb", "a.json", "--level", "1", "--seed", "2", "--out", "init_a.json",
        ],
    );
    assert_ok(&out);

    let out = pba(
        dir.path(),
        &["solve", "b.json", "init_a.json", "--out", "x.json"],
    );
    assert_exit(&out, 2);
    let out = pba(dir.path(), &["evaluate", "b.json", "init_a.json"]);
    assert_exit(&out, 2);
}

#[test]
fn evaluate_csv_without_report_exits_2() {
    let dir = TempDir::new().unwrap();
    let scene = small_scene(dir.path());
    let scene = scene.to_str().unwrap();
    let out = pba(
        dir.path(),
        &[
            "perturb", scene, "--level", "1", "--seed", "3", "--out", "init.json",
        ],
    );
    assert_ok(&out);
    let out = pba(
        dir.path(),
        &["evaluate", scene, "init.json", "--csv", "t.csv"],
    );
    assert_exit(&out, 2);
}

#[test]
fn solve_respects_tolerance_and_iteration_flags() {
    let dir = TempDir::new().unwrap();
    let scene = small_scene(dir.path());
    let scene = scene.to_str().unwrap();
    let out = pba(
        dir.path(),
        &[
            "perturb", scene, "--level", "2", "--seed", "5", "--out", "init.json",
        ],
    );
    assert_ok(&out);
    let out = pba(
        dir.path(),
        &[
            "solve", scene, "init.json", "--max-iters", "1", "--out", "one.json",
        ],
    );
    assert_ok(&out);
    let report = &json_file(&dir.path().join("one.json"))["report"];
    assert_eq!(report["iterations"].as_u64(), Some(1));
    assert_eq!(report["termination"].as_str(), Some("max_iterations"));
}

#[test]
fn bench_reports_all_six_cells() {
    let dir = TempDir::new().unwrap();
    let out = pba(dir.path(), &["bench", "--seed", "1", "--out", "bench.csv"]);
    assert_ok(&out);
    let table = std::fs::read_to_string(dir.path().join("bench.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 7, "header plus six rows: {table}");
    assert_eq!(lines[0], "method,points_per_observation,assembly_seconds");
    for (method, points) in [
        ("reduced", 10),
        ("direct", 10),
        ("reduced", 100),
        ("direct", 100),
        ("reduced", 1000),
        ("direct", 1000),
    ] {
        assert!(
            lines[1..]
                .iter()
                .any(|line| line.starts_with(&format!("{method},{points},"))),
            "missing {method}/{points} in {table}"
        );
    }
}
