use ctslam::estimators::Mode;
use ctslam::sim::Profile;
use ctslam_wasm_demo::{estimate_view, fit_view, simulate_view};

#[test]
fn simulation_view_has_every_layer() {
    let v = simulate_view(Profile::Lemniscate, 1, 5.0).unwrap();
    // 5 s at 20 Hz camera, 200 Hz IMU, 10 Hz GPS; edge frames may be trimmed.
    assert!((90..=100).contains(&v.frames), "{}", v.frames);
    assert!((990..=1001).contains(&v.imu_samples), "{}", v.imu_samples);
    assert!((48..=51).contains(&v.gps.len()), "{}", v.gps.len());
    // Only landmarks seen by some frame are kept.
    assert!((100..=150).contains(&v.landmarks.len()), "{}", v.landmarks.len());
    assert!(v.truth.len() > 90);
    assert!(v.peak_rate_rad_s > 1.0);
    let again = simulate_view(Profile::Lemniscate, 1, 5.0).unwrap();
    assert_eq!(v.gps, again.gps);
}

#[test]
fn fit_error_grows_with_noise_and_coarse_nodes() {
    let exact = fit_view(6, 10.0, 0.0, 1).unwrap();
    assert!(exact.rms_truth_m < 0.01, "{}", exact.rms_truth_m);
    assert!(exact.iterations < 20);
    let noisy = fit_view(6, 10.0, 0.1, 1).unwrap();
    assert!(noisy.rms_truth_m > exact.rms_truth_m);
    let coarse = fit_view(6, 0.5, 0.0, 1).unwrap();
    assert!(coarse.rms_truth_m > 10.0 * exact.rms_truth_m);
    assert!(coarse.nodes < exact.nodes);
    assert!(fit_view(1, 10.0, 0.0, 1).is_err());
    assert!(fit_view(6, 10.0, -1.0, 1).is_err());
}

#[test]
fn estimate_view_reports_the_offset() {
    let v = estimate_view(Mode::Ct, 10.0, 1, 6.0).unwrap();
    assert_eq!(v.mode, Mode::Ct);
    assert!(v.converged);
    assert!((110..=120).contains(&v.estimate.len()));
    assert!(v.ate_p_m.unwrap() < 0.2, "{v:?}");
    assert!((v.t_cam_imu_ms - 10.0).abs() < 5.0, "{v:?}");
}
