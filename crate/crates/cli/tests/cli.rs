use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn monocheck(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_monocheck")).args(args).env_remove("MONOCHECK_THREADS").output().expect("binary runs")
}

fn stdout_json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("JSON report")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small synthetic capture in a fresh directory; returns (dir guard, manifest path).
fn capture(extra: &[&str]) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cap = dir.path().join("cap");
    let mut args = vec!["synth", "orbit", "--out-dir", s(&cap), "--n-frames", "8", "--image-size", "40x30", "--focal-length", "36", "--no-meta"];
    args.extend_from_slice(extra);
    let out = monocheck(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = cap.join("manifest.json");
    (dir, manifest)
}

#[test]
fn emf_angular_on_one_degree_per_frame_orbit() {
    let (_d, m) = capture(&[]);
    let r = stdout_json(&monocheck(&["emf", "angular", "--manifest", s(&m), "--no-meta"]));
    let w = r["metrics"]["omega_deg_per_s"].as_f64().unwrap();
    assert!((w - 30.0).abs() < 1e-9, "{w}");
    assert_eq!(r["sequence"], "synth-orbit");
    assert_eq!(r["params"]["lookat_source"], "manifest");
    assert!(r.get("meta").is_none());
}

#[test]
fn lookat_flag_overrides_manifest() {
    let (_d, m) = capture(&[]);
    let r = stdout_json(&monocheck(&["emf", "angular", "--manifest", s(&m), "--lookat", "0,0,0", "--no-meta"]));
    assert_eq!(r["params"]["lookat_source"], "flag");
    let bad = monocheck(&["emf", "angular", "--manifest", s(&m), "--lookat", "0,0"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn reports_echo_conventions_and_meta() {
    let (_d, m) = capture(&[]);
    let r = stdout_json(&monocheck(&["emf", "full", "--manifest", s(&m)]));
    let conv = &r["params"]["conventions"];
    for key in ["beta", "mpsnr", "pck_threshold", "orientation"] {
        assert!(conv.get(key).is_some(), "missing convention {key}");
    }
    assert!(r["params"]["eps_flow"].as_f64().unwrap() > 0.0);
    assert_eq!(r["meta"]["tool"], "monocheck");
}

#[test]
fn identical_inputs_give_identical_bytes_across_thread_counts() {
    let (_d, m) = capture(&[]);
    let run = |threads: &str| monocheck(&["emf", "full", "--manifest", s(&m), "--no-meta", "--threads", threads]).stdout;
    let one = run("1");
    assert!(!one.is_empty());
    assert_eq!(one, run("1"));
    assert_eq!(one, run("4"));
}

#[test]
fn eval_pck_with_ground_truth_predictions() {
    let (d, m) = capture(&[]);
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(&m).unwrap()).unwrap();
    let root = m.parent().unwrap();
    let mut pred = serde_json::Map::new();
    for t in manifest["splits"]["test"].as_object().unwrap().values().flat_map(|v| v.as_array().unwrap()) {
        let t = t.as_u64().unwrap();
        let kps: Value = serde_json::from_str(&std::fs::read_to_string(root.join(format!("keypoints/{t:05}.json"))).unwrap()).unwrap();
        pred.insert(t.to_string(), kps);
    }
    let pred_path = d.path().join("kp.json");
    std::fs::write(&pred_path, Value::Object(pred).to_string()).unwrap();
    let r = stdout_json(&monocheck(&["eval", "pck", "--manifest", s(&m), "--pred", s(&pred_path), "--alpha", "0.05", "--no-meta"]));
    assert_eq!(r["metrics"]["pck_t"], json!(1.0));
}

#[test]
fn eval_nvs_serializes_infinite_psnr_as_string() {
    let (_d, m) = capture(&[]);
    let rgb = m.parent().unwrap().join("rgb");
    let r = stdout_json(&monocheck(&["eval", "nvs", "--manifest", s(&m), "--pred-dir", s(&rgb), "--no-meta"]));
    assert_eq!(r["metrics"]["mpsnr"], "inf");
    assert!(r["metrics"]["mssim"].as_f64().unwrap() >= 1.0 - 1e-9);
    assert_eq!(r["per_frame"].as_array().unwrap().len(), 2);
}

#[test]
fn unknown_metric_is_an_input_error() {
    let (_d, m) = capture(&[]);
    let rgb = m.parent().unwrap().join("rgb");
    let out = monocheck(&["eval", "nvs", "--manifest", s(&m), "--pred-dir", s(&rgb), "--metrics", "mpsnr,fid"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("fid"));
}

#[test]
fn covis_with_missing_flow_names_the_pair() {
    let (_d, m) = capture(&[]);
    std::fs::remove_file(m.parent().unwrap().join("flow/00008_00003.flo")).unwrap();
    let out = monocheck(&["covis", "--manifest", s(&m)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(out.stdout.is_empty());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("(8, 3)"), "{err}");
}

#[test]
fn covis_writes_heatmaps_and_csv() {
    let (d, m) = capture(&[]);
    let hm = d.path().join("hm");
    let out = monocheck(&["covis", "--manifest", s(&m), "--heatmap-dir", s(&hm), "--format", "csv"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = String::from_utf8(out.stdout).unwrap();
    assert!(csv.starts_with("section,row,key,value\n"));
    assert!(csv.contains("per_frame,0,beta,5"));
    assert!(hm.join("8_heatmap.dpth").exists() && hm.join("8_mask.png").exists());
}

#[test]
fn relative_depth_without_anchors_is_rejected() {
    let (_d, m) = capture(&[]);
    let text = std::fs::read_to_string(&m).unwrap().replace("\"metric\"", "\"relative\"");
    std::fs::write(&m, text).unwrap();
    let out = monocheck(&["emf", "full", "--manifest", s(&m), "--seed", "1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn static_orbit_has_no_full_emf_statistics() {
    let (_d, m) = capture(&["--velocity", "0,0,0", "--angular-step-deg", "0"]);
    let out = monocheck(&["emf", "full", "--manifest", s(&m)]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

fn write_correspondences(path: &Path, noise_free: bool) {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
    let (f, cx, cy) = (500.0, 320.0, 240.0);
    let corrs: Vec<Value> = (0..40)
        .map(|k| {
            let (u, v, z) = (rng.random_range(10.0..630.0), rng.random_range(10.0..470.0), rng.random_range(2.0..8.0));
            let world = [(u - cx) / f * z, (v - cy) / f * z, z];
            let pixel = if noise_free { [u, v] } else { [rng.random_range(0.0..640.0), rng.random_range(0.0..480.0)] };
            json!({"world": world, "pixel": pixel, "frame": k % 2})
        })
        .collect();
    std::fs::write(path, Value::Array(corrs).to_string()).unwrap();
}

fn write_intrinsics(path: &Path) {
    let cam = json!({
        "orientation": [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        "position": [0.0, 0.0, 0.0],
        "focal_length": 500.0,
        "principal_point": [320.0, 240.0],
        "skew": 0.0,
        "pixel_aspect_ratio": 1.0,
        "radial_distortion": [0.0, 0.0, 0.0],
        "tangential_distortion": [0.0, 0.0],
        "image_size": [640, 480]
    });
    std::fs::write(path, cam.to_string()).unwrap();
}

#[test]
fn calib_pnp_recovers_identity_and_writes_camera() {
    let d = tempfile::tempdir().unwrap();
    let (c, i, o) = (d.path().join("c.json"), d.path().join("i.json"), d.path().join("out/cam.json"));
    write_correspondences(&c, true);
    write_intrinsics(&i);
    let r = stdout_json(&monocheck(&["calib", "pnp", "--correspondences", s(&c), "--intrinsics", s(&i), "--seed", "3", "--camera-out", s(&o), "--no-meta"]));
    assert_eq!(r["metrics"]["inlier_count"], 40);
    let pos = r["pose"]["position"].as_array().unwrap();
    assert!(pos.iter().all(|v| v.as_f64().unwrap().abs() < 1e-6));
    assert!(o.exists());
}

#[test]
fn calib_pnp_requires_a_seed() {
    let out = monocheck(&["calib", "pnp", "--correspondences", "c.json", "--intrinsics", "i.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--seed"));
}

#[test]
fn calib_pnp_without_consensus_is_a_numerical_failure() {
    let d = tempfile::tempdir().unwrap();
    let (c, i) = (d.path().join("c.json"), d.path().join("i.json"));
    write_correspondences(&c, false);
    write_intrinsics(&i);
    let out = monocheck(&["calib", "pnp", "--correspondences", s(&c), "--intrinsics", s(&i), "--seed", "3"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn depth_filter_invalidates_a_step_edge() {
    let d = tempfile::tempdir().unwrap();
    let (w, h) = (8u32, 6u32);
    let mut bytes = b"DPTH".to_vec();
    for v in [1u32, w, h, 1] {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    for _ in 0..h {
        for x in 0..w {
            let z: f32 = if x < 4 { 1.0 } else { 5.0 };
            bytes.extend_from_slice(&z.to_le_bytes());
        }
    }
    let (input, output) = (d.path().join("d.dpth"), d.path().join("f.dpth"));
    std::fs::write(&input, bytes).unwrap();
    let r = stdout_json(&monocheck(&["depth", "filter", "--input", s(&input), "--depth-out", s(&output), "--no-meta"]));
    assert_eq!(r["metrics"]["valid_before"], 48);
    assert!(r["metrics"]["invalidated"].as_u64().unwrap() > 0);
    assert!(output.exists());
    let bad = monocheck(&["depth", "filter", "--input", s(&input), "--depth-out", s(&output), "--grad-threshold", "-1"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn report_goes_to_output_file() {
    let (d, m) = capture(&[]);
    let out_path = d.path().join("reports/angular.json");
    let out = monocheck(&["emf", "angular", "--manifest", s(&m), "--output", s(&out_path)]);
    assert!(out.status.success());
    assert!(out.stdout.is_empty());
    let r: Value = serde_json::from_str(&std::fs::read_to_string(out_path).unwrap()).unwrap();
    assert!(r["metrics"]["omega_deg_per_s"].is_number());
}

#[test]
fn usage_errors_and_help() {
    assert_eq!(monocheck(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(monocheck(&["emf", "angular"]).status.code(), Some(2));
    assert_eq!(monocheck(&["--help"]).status.code(), Some(0));
    assert_eq!(monocheck(&["emf", "angular", "--manifest", "/nonexistent/m.json"]).status.code(), Some(2));
}
