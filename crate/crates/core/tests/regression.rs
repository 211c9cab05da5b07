//! Frozen results of both estimators on one simulated sequence. Any change
//! to the numbers must be deliberate: regenerate with
//! `CTSLAM_REGENERATE=1 cargo test -p ctslam --test regression`.

use std::path::PathBuf;

use ctslam::estimators::{run, EstimationInput, EstimationReport, Mode, PipelineOptions};
use ctslam::sim::{simulate, Profile, SimConfig};

fn fixture() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/regression.json")
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 + 1e-6 * b.abs()
}

fn same(a: &EstimationReport, b: &EstimationReport) -> bool {
    let opt = |x: Option<f64>, y: Option<f64>| match (x, y) {
        (Some(x), Some(y)) => close(x, y),
        (x, y) => x == y,
    };
    a.mode == b.mode
        && opt(a.ate_p_m, b.ate_p_m)
        && opt(a.ate_r_deg, b.ate_r_deg)
        && close(a.t_cam_imu_ms, b.t_cam_imu_ms)
        && close(a.t_gps_imu_ms, b.t_gps_imu_ms)
        && a.iterations == b.iterations
        && a.converged == b.converged
}

#[test]
fn estimates_match_the_frozen_results() {
    let mut cfg = SimConfig::default();
    cfg.trajectory.profile = Profile::Lemniscate;
    cfg.trajectory.period = 12.0;
    cfg.trajectory.tilt_amp = 0.15;
    cfg.trajectory.tilt_period = 3.0;
    cfg.trajectory.duration = 6.0;
    cfg.rig.t_cam_imu = 0.01;
    cfg.noise.seed = 5;
    let d = simulate(&cfg).unwrap();
    let input = EstimationInput {
        meas: &d.meas,
        sfm: &d.sfm,
        rig: &d.rig,
        noise: &d.noise,
        ground_truth: Some(&d.gt.trajectory),
    };
    let reports: Vec<EstimationReport> = [Mode::Ct, Mode::Dt]
        .into_iter()
        .map(|m| {
            let mut r = run(&input, m, &PipelineOptions::default()).unwrap().report;
            r.wall_ms = 0.0;
            r
        })
        .collect();

    if std::env::var_os("CTSLAM_REGENERATE").is_some() {
        std::fs::write(fixture(), serde_json::to_string_pretty(&reports).unwrap() + "\n").unwrap();
        return;
    }
    let frozen: Vec<EstimationReport> = serde_json::from_str(&std::fs::read_to_string(fixture()).unwrap()).unwrap();
    assert_eq!(frozen.len(), reports.len());
    for (got, want) in reports.iter().zip(&frozen) {
        assert!(same(got, want), "got {got:?}\nwant {want:?}");
    }
}
