use super::*;

fn short(profile: Profile) -> TrajectoryParams {
    TrajectoryParams {
        profile,
        duration: 8.0,
        ..TrajectoryParams::default()
    }
}

fn rel(traj: &Trajectory, t_ns: i64) -> f64 {
    traj.grid().offset_of(t_ns) + traj.grid().t0()
}

#[test]
fn line_profile_has_constant_velocity() {
    let params = TrajectoryParams {
        profile: Profile::Line,
        speed: 1.5,
        z_amp: 0.0,
        tilt_amp: 0.0,
        ..short(Profile::Line)
    };
    let traj = make_ground_truth(&params).unwrap();
    let mut t = params.start_ns();
    while t < params.end_ns() {
        let v = traj.position.sample_ns(t, 1).unwrap();
        assert!((v - Vector3::new(1.5, 0.0, 0.0)).norm() < 1e-6, "{v}");
        t += 37_000_000;
    }
}

#[test]
fn circle_speed_matches_radius_and_period() {
    let params = TrajectoryParams {
        radius: 2.0,
        period: 10.0,
        z_amp: 0.0,
        tilt_amp: 0.0,
        ..short(Profile::Circle)
    };
    let traj = make_ground_truth(&params).unwrap();
    let expected = 2.0 * PI * 2.0 / 10.0;
    let mut t = params.start_ns();
    while t < params.end_ns() {
        let v = traj.position.sample_ns(t, 1).unwrap();
        assert!((v.norm() - expected).abs() < 1e-4, "{}", v.norm());
        t += 53_000_000;
    }
}

#[test]
fn lemniscate_yaw_rate_matches_heading_change() {
    let params = TrajectoryParams {
        tilt_amp: 0.0,
        z_amp: 0.0,
        ..short(Profile::Lemniscate)
    };
    let traj = make_ground_truth(&params).unwrap();
    let heading = |t: f64| {
        let v = traj.position.sample(t, 1).unwrap();
        v.y.atan2(v.x)
    };
    let h = 1e-4;
    let mut t_ns = params.start_ns();
    while t_ns < params.end_ns() {
        let t = rel(&traj, t_ns);
        let w = traj.rotation.angular_velocity(t).unwrap();
        let mut d = heading(t + h) - heading(t - h);
        d -= 2.0 * PI * (d / (2.0 * PI)).round();
        assert!((w.z - d / (2.0 * h)).abs() < 1e-3, "t={t} {} vs {}", w.z, d / (2.0 * h));
        assert!(w.xy().norm() < 1e-6);
        t_ns += 71_000_000;
    }
}

#[test]
fn ground_truth_fit_follows_the_analytic_profile() {
    let params = short(Profile::Lemniscate);
    let traj = make_ground_truth(&params).unwrap();
    let mut sq_p = 0.0;
    let mut sq_r = 0.0;
    let mut n = 0.0;
    let mut yaw = None;
    let mut t_ns = params.t0_ns;
    while t_ns < params.end_ns() + secs_to_ns(GT_PAD) - 10_000_000 {
        let (p, y, r) = params.analytic_pose(t_ns, yaw);
        yaw = Some(y);
        let (pf, rf) = traj.pose_ns(t_ns).unwrap();
        sq_p += (p - pf).norm_squared();
        sq_r += rf.angle_to(&r).powi(2);
        n += 1.0;
        t_ns += 3_000_000;
    }
    assert!((sq_p / n).sqrt() < 1e-4, "{}", (sq_p / n).sqrt());
    assert!((sq_r / n).sqrt() < 1e-4, "{}", (sq_r / n).sqrt());
}

fn noiseless_config() -> SimConfig {
    let mut cfg = SimConfig {
        trajectory: short(Profile::Circle),
        ..SimConfig::default()
    };
    cfg.noise = cfg.noise.noiseless();
    cfg.scene.landmarks = 100;
    cfg
}

#[test]
fn noiseless_gps_equals_ground_truth() {
    let mut cfg = noiseless_config();
    cfg.rig.p_antenna_body = Vector3::zeros();
    let ds = simulate(&cfg).unwrap();
    assert!(!ds.meas.gps.is_empty());
    for fix in &ds.meas.gps {
        let (p, _) = ds.gt.trajectory.pose_ns(fix.t_ns).unwrap();
        assert_eq!(fix.position, p);
    }
}

#[test]
fn resting_accelerometer_reads_gravity() {
    let mut cfg = noiseless_config();
    cfg.trajectory.static_prefix = 2.0;
    let ds = simulate(&cfg).unwrap();
    let rest_end = cfg.trajectory.start_ns() + secs_to_ns(1.5);
    let mut n = 0;
    for s in ds.meas.imu.iter().take_while(|s| s.t_ns < rest_end) {
        let (_, r) = ds.gt.trajectory.pose_ns(s.t_ns).unwrap();
        let expected = r.matrix().transpose() * cfg.gravity;
        assert!((s.accel - expected).norm() < 1e-9, "{}", (s.accel - expected).norm());
        assert!((s.accel.norm() - 9.81).abs() < 1e-9);
        assert!(s.gyro.norm() < 1e-9);
        n += 1;
    }
    assert_eq!(n, 300);
}

#[test]
fn gps_noise_has_the_configured_spread() {
    let mut cfg = SimConfig::default();
    cfg.trajectory.duration = 60.0;
    cfg.trajectory.node_hz = 5.0;
    cfg.scene.landmarks = 50;
    cfg.rig.p_antenna_body = Vector3::zeros();
    let ds = simulate(&cfg).unwrap();
    assert_eq!(ds.meas.gps.len(), 600);
    let mut errs = Vec::new();
    for fix in &ds.meas.gps {
        let (p, _) = ds.gt.trajectory.pose_ns(fix.t_ns).unwrap();
        errs.extend((fix.position - p).iter().copied());
    }
    let n = errs.len() as f64;
    let mean = errs.iter().sum::<f64>() / n;
    let std = (errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n).sqrt();
    assert!((0.08..=0.12).contains(&std), "{std}");
}

#[test]
fn stream_counts_and_ordering() {
    let cfg = noiseless_config();
    let ds = simulate(&cfg).unwrap();
    let m = &ds.meas;
    assert_eq!(m.imu.len(), 8 * 200);
    assert_eq!(m.gps.len(), 8 * 10);
    assert!(m.frames.len() > 100 && m.frames.len() <= 156);
    m.validate().unwrap();
    for f in &m.frames {
        assert!(f.observations.len() <= cfg.scene.max_features);
        assert!(f.observations.windows(2).all(|w| w[0].landmark < w[1].landmark));
    }
}

#[test]
fn observations_reproject_at_shifted_capture_times() {
    let mut cfg = noiseless_config();
    cfg.rig.t_cam_imu = 0.015;
    let ds = simulate(&cfg).unwrap();
    let traj = &ds.gt.trajectory;
    let mut checked = 0;
    for f in ds.meas.frames.iter().step_by(10) {
        let (p, r) = traj.pose(rel(traj, f.t_ns) + cfg.rig.t_cam_imu).unwrap();
        let cam = ds.rig.camera_pose(&p, &r);
        for o in &f.observations {
            let l = ds.meas.landmarks_true[&o.landmark];
            let px = observe(&ds.rig.camera, &cam, &l, 0.0, f64::INFINITY).unwrap();
            assert!((px - o.pixel).norm() < 1e-9);
            checked += 1;
        }
    }
    assert!(checked > 50);
}

#[test]
fn simulation_is_reproducible() {
    let mut cfg = noiseless_config();
    cfg.noise = NoiseSpec {
        seed: 7,
        ..NoiseSpec::default()
    };
    let a = simulate(&cfg).unwrap();
    let b = simulate(&cfg).unwrap();
    assert_eq!(a, b);
    cfg.noise.seed = 8;
    let c = simulate(&cfg).unwrap();
    assert_ne!(a.meas.imu, c.meas.imu);
}

#[test]
fn sfm_stand_in_maps_back_to_world() {
    let mut cfg = noiseless_config();
    cfg.sfm.position_sigma = 0.0;
    cfg.sfm.rotation_sigma = 0.0;
    cfg.sfm.landmark_sigma = 0.0;
    let ds = simulate(&cfg).unwrap();
    assert!((ds.world_from_sfm.s - cfg.sfm.scale).abs() < 1e-12);
    assert_eq!(ds.sfm.poses.len(), ds.meas.frames.len());
    for (t_ns, pose) in ds.sfm.poses.iter().step_by(7) {
        let (p, r) = ds.gt.trajectory.pose_ns(*t_ns).unwrap();
        let cam = ds.rig.camera_pose(&p, &r);
        let back = ds.world_from_sfm.transform_pose(pose);
        assert!((back.translation - cam.translation).norm() < 1e-9);
        assert!(back.rotation.angle_to(&cam.rotation) < 1e-9);
    }
    for (id, l) in &ds.sfm.landmarks {
        assert!((ds.world_from_sfm.apply(l) - ds.meas.landmarks_true[id]).norm() < 1e-9);
    }
}

#[test]
fn invalid_configurations_are_rejected() {
    let mut cfg = noiseless_config();
    cfg.trajectory.duration = 2.0;
    assert!(matches!(simulate(&cfg), Err(Error::InvalidArgument(_))));
    let mut cfg = noiseless_config();
    cfg.noise.gps_sigma = -1.0;
    assert!(simulate(&cfg).is_err());
    let mut cfg = noiseless_config();
    cfg.rig.t_cam_imu = 2.0;
    assert!(simulate(&cfg).is_err());
    assert!("spiral".parse::<Profile>().is_err());
}
