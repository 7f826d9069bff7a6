use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SCENE: &str = r#"{
  "primitives": [
    {"type": "room", "center": [0, 0, 1.0], "half_extents": [2, 2, 1.0]},
    {"type": "sphere", "center": [1.0, 0.5, 0.6], "radius": 0.4}
  ],
  "bounds": {"min": [-2.2, -2.2, -0.2], "max": [2.2, 2.2, 2.2]}
}"#;

const SIMULATION: &str = r#"{
  "scene": "scene.json",
  "trajectory": {"type": "orbit", "center": [0, 0, 1.0], "radius": 0.6, "height": 1.0, "n_poses": 8},
  "sensor": {"type": "depth", "width": 24, "height": 24, "horizontal_fov": 1.5707963267948966, "max_range": 6}
}"#;

const RUN_CONFIG: &str = r#"{
  "source": {"type": "manifest", "path": "data/manifest.json"},
  "scene": "scene.json",
  "grid": {"type": "cover_scene", "voxel_size": 0.2},
  "coarse_sampler": {"n_near": 400, "m_far": 800, "epsilon": 0.1},
  "local_sampler": {"s_rays": 100, "q_per_ray": 8, "truncation": 0.2},
  "train": {"epochs_per_update": 2, "minibatch_size": 1000},
  "network": {"layer_dims": [3, 32, 32, 1], "omega0": 10.0},
  "eval": {"every_k_frames": 2, "n_points": 400},
  "output_dir": "out",
  "seed": 3
}"#;

fn sdfmap(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sdfmap"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn simulated_workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("scene.json"), SCENE).unwrap();
    fs::write(dir.path().join("sim.json"), SIMULATION).unwrap();
    fs::write(dir.path().join("config.json"), RUN_CONFIG).unwrap();
    let out = sdfmap(dir.path(), &["simulate", "--config", "sim.json", "--output", "data"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("data/manifest.json").exists());
    dir
}

#[test]
fn run_then_query_slice_and_eval() {
    let dir = simulated_workspace();
    let root = dir.path();

    let out = sdfmap(root, &["run", "--config", "config.json"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("processed 8/8 frames, 0 skipped"));
    for name in ["checkpoint.bin", "metrics.csv", "loss_trace.csv", "grid.csdf", "run_summary.json", "timings.json"] {
        assert!(root.join("out").join(name).exists(), "missing {name}");
    }
    let metrics = fs::read_to_string(root.join("out/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 4);

    fs::write(root.join("points.csv"), "x,y,z\n0,0,1\n0.5,-0.5,1.2\n# comment\n1,0.5,0.6\n").unwrap();
    let out = sdfmap(
        root,
        &["query", "--checkpoint", "out/checkpoint.bin", "--points", "points.csv", "--gradient", "--output", "values.csv"],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let values = fs::read_to_string(root.join("values.csv")).unwrap();
    let lines: Vec<&str> = values.lines().collect();
    assert_eq!(lines[0], "sdf,gx,gy,gz");
    assert_eq!(lines.len(), 4);
    assert!(lines[1..].iter().all(|l| l.split(',').all(|v| v.parse::<f64>().unwrap().is_finite())));

    let out = sdfmap(
        root,
        &["slice", "--checkpoint", "out/checkpoint.bin", "--z", "0.6", "--resolution", "0.1", "--scene", "scene.json", "--output", "slice"],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(root.join("slice.csv").exists() && root.join("slice.pgm").exists());

    let out = sdfmap(root, &["eval", "--config", "config.json", "--n-points", "300", "--output", "eval"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(root.join("eval/eval_report.json")).unwrap()).unwrap();
    assert_eq!(report["n_points"], 300);
    assert!(report["global_sdf_mae"].as_f64().unwrap().is_finite());
}

#[test]
fn skipped_frames_exit_with_two_and_first_frame_failure_with_one() {
    let dir = simulated_workspace();
    let root = dir.path();
    fs::write(root.join("data/frame_000005.bin"), [0u8; 5]).unwrap();
    let out = sdfmap(root, &["run", "--config", "config.json"]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("processed 7/8 frames, 1 skipped"));

    fs::write(root.join("data/frame_000000.bin"), [0u8; 5]).unwrap();
    let out = sdfmap(root, &["run", "--config", "config.json"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));
}

#[test]
fn frame_range_and_missing_inputs() {
    let dir = simulated_workspace();
    let root = dir.path();
    let out = sdfmap(root, &["run", "--config", "config.json", "--frames", "2..5", "--no-local", "--output", "part"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("processed 3/3 frames"));
    assert!(root.join("part/checkpoint.bin").exists());

    let out = sdfmap(root, &["run"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("--config is required"));

    let out = sdfmap(root, &["query", "--checkpoint", "nope.bin", "--points", "points.csv", "--output", "v.csv"]);
    assert_eq!(code(&out), 1);
}
