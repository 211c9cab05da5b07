use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ctslam(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctslam")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn simulate(dir: &Path, extra: &[&str]) {
    let mut args = vec!["simulate", "--duration", "6", "--out", dir.to_str().unwrap()];
    args.extend_from_slice(extra);
    let o = ctslam(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

fn listing(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&ctslam(&["--help"])), 0);
    assert_eq!(code(&ctslam(&["frobnicate"])), 1);
    assert_eq!(code(&ctslam(&["simulate", "--profile", "spiral", "--out", "x"])), 1);
    let o = ctslam(&["estimate-ct", "--out", "x"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("--dataset"));
    assert_eq!(code(&ctslam(&["estimate-dt", "--dataset", "x", "--sensors", "G", "--out", "x"])), 1);
}

#[test]
fn bad_configs_are_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    fs::write(&cfg, "mode = \"ct\"\n[ct]\nspline_order = 1\n").unwrap();
    assert_eq!(code(&ctslam(&["compare", "--config", cfg.to_str().unwrap(), "--out", "x"])), 1);
    fs::write(&cfg, "mode = \"ct\"\n[ct]\nnode_hz = \"fast\"\n").unwrap();
    let o = ctslam(&["compare", "--config", cfg.to_str().unwrap(), "--out", "x"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("run.toml:3"), "{}", stderr(&o));
}

#[test]
fn simulate_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    simulate(&a, &["--profile", "circle", "--seed", "7"]);
    simulate(&b, &["--profile", "circle", "--seed", "7"]);
    simulate(&c, &["--profile", "circle", "--seed", "8"]);
    let la = listing(&a);
    let names: Vec<&str> = la.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(
        names,
        ["features.csv", "gps.csv", "gt.csv", "imu.csv", "scene.json", "sfm_landmarks.csv", "sfm_poses.csv"]
    );
    assert!(la == listing(&b));
    assert!(la != listing(&c));
}

#[test]
fn imu_gap_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("d");
    simulate(&d, &[]);
    // Four camera frames at 20 Hz span 40 IMU samples at 200 Hz.
    let text = fs::read_to_string(d.join("imu.csv")).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines.drain(400..440);
    fs::write(d.join("imu.csv"), lines.join("\n") + "\n").unwrap();
    let mut scene: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("scene.json")).unwrap()).unwrap();
    let n = scene["counts"]["imu"].as_u64().unwrap();
    scene["counts"]["imu"] = (n - 40).into();
    fs::write(d.join("scene.json"), scene.to_string()).unwrap();

    let out = tmp.path().join("out");
    let o = ctslam(&["estimate-ct", "--dataset", d.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("gap"), "{}", stderr(&o));
}

#[test]
fn missing_and_malformed_files_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("d");
    simulate(&d, &[]);
    let ds = d.to_str().unwrap();
    let out = tmp.path().join("out");
    let os = out.to_str().unwrap();
    fs::rename(d.join("gps.csv"), d.join("gps.bak")).unwrap();
    let o = ctslam(&["estimate-dt", "--dataset", ds, "--out", os]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("gps.csv"));
    fs::write(d.join("gps.csv"), "t_ns,x,y,z\n0,1,2\n").unwrap();
    let o = ctslam(&["estimate-dt", "--dataset", ds, "--out", os]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("gps.csv:2"), "{}", stderr(&o));
}

#[test]
fn estimate_fit_and_evaluate_write_their_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("d");
    simulate(&d, &["--profile", "lemniscate", "--t-cam-imu-ms", "10"]);
    let out = tmp.path().join("ct");
    let o = ctslam(&["estimate-ct", "--dataset", d.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["mode"], "ct");
    assert_eq!(report["converged"], true);
    assert!(report["ate_p_m"].as_f64().unwrap() < 0.5, "{report}");
    for f in ["estimate.csv", "metrics.json", "traj_xy.csv", "solver_log.csv"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let log = fs::read_to_string(out.join("solver_log.csv")).unwrap();
    assert!(log.starts_with("iteration,cost,candidate_cost,lambda,step_norm,gradient_norm,accepted\n"));
    assert!(fs::read_to_string(out.join("traj_xy.csv")).unwrap().starts_with("t,est_x,est_y,gt_x,gt_y\n"));

    let ev = tmp.path().join("ev");
    let gt = d.join("gt.csv");
    let o = ctslam(&[
        "evaluate",
        "--estimate",
        gt.to_str().unwrap(),
        "--ground-truth",
        gt.to_str().unwrap(),
        "--out",
        ev.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(ev.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(m["ate_p_m"].as_f64().unwrap(), 0.0);

    let fit = tmp.path().join("fit");
    let o = ctslam(&["fit", "--poses", gt.to_str().unwrap(), "--node-hz", "20", "--out", fit.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let f: serde_json::Value = serde_json::from_str(&fs::read_to_string(fit.join("fit.json")).unwrap()).unwrap();
    assert_eq!(f["converged"], true);
    assert!(f["iterations"].as_u64().unwrap() < 20);
    assert!(f["rms_position_m"].as_f64().unwrap() < 1e-3, "{f}");
}

#[test]
fn compare_emits_the_offset_table() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    fs::write(&cfg, "seed = 2\n\n[sim.trajectory]\nduration = 5.0\nprofile = \"lemniscate\"\nperiod = 12.0\n").unwrap();
    let out = tmp.path().join("cmp");
    let o = ctslam(&["compare", "--config", cfg.to_str().unwrap(), "--offsets", "0,10", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = fs::read_to_string(out.join("compare.csv")).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows[0], "offset_true_ms,mode,ate_p_m,ate_r_deg,offset_est_ms");
    assert_eq!(rows.len(), 5);
    let modes: Vec<&str> = rows[1..].iter().map(|r| r.split(',').nth(1).unwrap()).collect();
    assert_eq!(modes, ["ct", "dt", "ct", "dt"]);
    assert!(rows[3].starts_with("10.0,ct,"));
}
