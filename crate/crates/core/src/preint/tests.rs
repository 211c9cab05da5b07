use super::*;
use crate::sim::{simulate, Profile, SimConfig, SimDataset, TrajectoryParams};
use crate::solver::{check_jacobians, AutoDiff, Factor};

const NOISE: ImuNoise = ImuNoise {
    accel: 0.02,
    gyro: 0.002,
};

fn constant_samples(gyro: Vector3<f64>, accel: Vector3<f64>, n: usize, step_ns: i64) -> Vec<ImuSample> {
    (0..n)
        .map(|i| ImuSample {
            t_ns: i as i64 * step_ns,
            gyro,
            accel,
        })
        .collect()
}

fn wobbly_samples(n: usize) -> Vec<ImuSample> {
    (0..n)
        .map(|i| {
            let t = i as f64 * 0.005;
            ImuSample {
                t_ns: i as i64 * 5_000_000,
                gyro: Vector3::new(0.3 * (2.0 * t).sin(), -0.2 + 0.1 * t, 0.5 * (3.0 * t).cos()),
                accel: Vector3::new(1.0 + (t * 4.0).sin(), 0.5 * t, 9.81 + 0.2 * (5.0 * t).cos()),
            }
        })
        .collect()
}

fn close(a: &Vector3<f64>, b: &Vector3<f64>, tol: f64) -> bool {
    (a - b).norm() <= tol
}

#[test]
fn empty_window_is_identity() {
    let s = constant_samples(Vector3::zeros(), Vector3::zeros(), 1, 5_000_000);
    let pim = PreintegratedImu::integrate(&s, ImuBias::default(), NOISE).unwrap();
    assert_eq!(pim, PreintegratedImu::identity(0, ImuBias::default()));
    assert_eq!(pim.dt_total, 0.0);
}

#[test]
fn constant_acceleration_integrates_exactly() {
    let a = Vector3::new(0.5, -1.0, 2.0);
    let s = constant_samples(Vector3::zeros(), a, 201, 5_000_000);
    let pim = PreintegratedImu::integrate(&s, ImuBias::default(), NOISE).unwrap();
    let t = 1.0;
    assert!((pim.dt_total - t).abs() < 1e-12);
    assert!(close(&pim.dv, &(a * t), 1e-9));
    assert!(close(&pim.dp, &(a * (0.5 * t * t)), 1e-9));
    assert!(pim.dr.angle_to(&Rotation::identity()) < 1e-12);
}

#[test]
fn constant_rate_matches_the_exponential() {
    let w = Vector3::new(0.3, -0.7, 1.1);
    let s = constant_samples(w, Vector3::zeros(), 401, 5_000_000);
    let pim = PreintegratedImu::integrate(&s, ImuBias::default(), NOISE).unwrap();
    let expected = Rotation::identity().retract(&(w * 2.0));
    assert!(pim.dr.angle_to(&expected) < 1e-8);
}

#[test]
fn bias_is_subtracted_from_the_measurements() {
    let b = ImuBias::new(Vector3::new(0.1, 0.2, 0.3), Vector3::new(0.01, 0.0, -0.02));
    let s = constant_samples(b.gyro, b.accel, 101, 5_000_000);
    let pim = PreintegratedImu::integrate(&s, b, NOISE).unwrap();
    assert!(pim.dv.norm() < 1e-12);
    assert!(pim.dp.norm() < 1e-12);
    assert!(pim.dr.angle_to(&Rotation::identity()) < 1e-12);
}

#[test]
fn concatenation_matches_a_single_pass() {
    let s = wobbly_samples(161);
    let b = ImuBias::new(Vector3::new(0.05, 0.0, -0.1), Vector3::new(0.002, 0.001, 0.0));
    let whole = PreintegratedImu::integrate(&s, b, NOISE).unwrap();
    let first = PreintegratedImu::integrate(&s[..70], b, NOISE).unwrap();
    let second = PreintegratedImu::integrate(&s[69..], b, NOISE).unwrap();
    let joined = first.append(&second).unwrap();
    assert_eq!(joined.t_start_ns, whole.t_start_ns);
    assert_eq!(joined.t_end_ns, whole.t_end_ns);
    assert!(joined.dr.angle_to(&whole.dr) < 1e-8);
    assert!(close(&joined.dv, &whole.dv, 1e-8));
    assert!(close(&joined.dp, &whole.dp, 1e-8));
    assert!((joined.covariance - whole.covariance).amax() < 1e-8 * whole.covariance.amax());
    assert!((joined.j_bias - whole.j_bias).amax() < 1e-8);
    assert!(first.append(&first).is_err());
}

#[test]
fn bias_jacobians_match_reintegration() {
    let s = wobbly_samples(121);
    let b0 = ImuBias::default();
    let pim = PreintegratedImu::integrate(&s, b0, NOISE).unwrap();
    let h = 1e-6;
    for c in 0..6 {
        let mut plus = b0.to_array();
        let mut minus = b0.to_array();
        plus[c] += h;
        minus[c] -= h;
        let mk = |v: [f64; 6]| {
            ImuBias::new(Vector3::new(v[0], v[1], v[2]), Vector3::new(v[3], v[4], v[5]))
        };
        let p = PreintegratedImu::integrate(&s, mk(plus), NOISE).unwrap();
        let m = PreintegratedImu::integrate(&s, mk(minus), NOISE).unwrap();
        let dr = (pim.dr.matrix().transpose() * p.dr.matrix()).into();
        let dr = lie::log(&dr) - lie::log(&Matrix3::from(pim.dr.matrix().transpose() * m.dr.matrix()));
        let col = pim.j_bias.column(c);
        let fd = [dr / (2.0 * h), (p.dv - m.dv) / (2.0 * h), (p.dp - m.dp) / (2.0 * h)];
        for (blk, v) in fd.iter().enumerate() {
            for a in 0..3 {
                let j = col[3 * blk + a];
                assert!((j - v[a]).abs() < 1e-5 * (1.0 + v[a].abs()), "col {c} row {} {j} vs {}", 3 * blk + a, v[a]);
            }
        }
    }
}

#[test]
fn first_order_bias_correction_tracks_reintegration() {
    let s = wobbly_samples(121);
    let b0 = ImuBias::new(Vector3::new(0.02, -0.01, 0.03), Vector3::new(0.001, 0.0, -0.001));
    let pim = PreintegratedImu::integrate(&s, b0, NOISE).unwrap();
    let db = ImuBias::new(Vector3::new(1e-3, -1e-3, 5e-4), Vector3::new(-1e-3, 1e-3, 1e-3));
    let b1 = ImuBias::new(b0.accel + db.accel, b0.gyro + db.gyro);
    let direct = PreintegratedImu::integrate(&s, b1, NOISE).unwrap();
    let (r, v, p) = pim.corrected(&b1);
    assert!(r.angle_to(&direct.dr) < 1e-6);
    assert!(close(&v, &direct.dv, 1e-6));
    assert!(close(&p, &direct.dp, 1e-6));
    let (r0, v0, p0) = pim.corrected(&b0);
    assert!(r0.angle_to(&pim.dr) < 1e-15);
    assert_eq!((v0, p0), (pim.dv, pim.dp));
}

#[test]
fn covariance_is_symmetric_and_grows() {
    let s = wobbly_samples(101);
    let mut last_trace = 0.0;
    for n in [2, 10, 40, 101] {
        let pim = PreintegratedImu::integrate(&s[..n], ImuBias::default(), NOISE).unwrap();
        let c = pim.covariance;
        assert!((c - c.transpose()).amax() < 1e-18);
        let eig = c.symmetric_eigenvalues();
        assert!(eig.min() > -1e-15 * eig.max(), "{eig}");
        assert!(c.trace() > last_trace);
        last_trace = c.trace();
    }
    let pim = PreintegratedImu::integrate(&s, ImuBias::default(), NOISE).unwrap();
    assert!(pim.weight().is_ok());
    let sigma_v = NOISE.accel * 0.005 * (100.0f64).sqrt();
    assert!((pim.covariance[(3, 3)].sqrt() / sigma_v - 1.0).abs() < 0.5);
}

#[test]
fn invalid_inputs_are_rejected() {
    assert!(PreintegratedImu::integrate(&[], ImuBias::default(), NOISE).is_err());
    let mut s = wobbly_samples(10);
    s.swap(3, 4);
    assert!(matches!(
        PreintegratedImu::integrate(&s, ImuBias::default(), NOISE),
        Err(Error::Data(_))
    ));
    let s = wobbly_samples(10);
    assert!(slice_window(&s, 20_000_000, 10_000_000).is_err());
    assert!(matches!(slice_window(&s, 0, 50_000_000), Err(Error::Data(_))));
    assert!(slice_window(&[], 0, 1).is_err());
}

#[test]
fn window_slicing_interpolates_the_edges() {
    let s = wobbly_samples(10);
    let w = slice_window(&s, 7_500_000, 22_500_000).unwrap();
    let stamps: Vec<i64> = w.iter().map(|x| x.t_ns).collect();
    assert_eq!(stamps, vec![7_500_000, 10_000_000, 15_000_000, 20_000_000, 22_500_000]);
    assert!(close(&w[0].accel, &((s[1].accel + s[2].accel) * 0.5), 1e-12));
    let exact = slice_window(&s, 10_000_000, 20_000_000).unwrap();
    assert_eq!(exact, s[2..5].to_vec());
}

fn noiseless_dataset() -> SimDataset {
    let mut cfg = SimConfig {
        trajectory: TrajectoryParams {
            profile: Profile::Lemniscate,
            duration: 6.0,
            ..TrajectoryParams::default()
        },
        ..SimConfig::default()
    };
    cfg.noise = cfg.noise.noiseless();
    cfg.scene.landmarks = 20;
    simulate(&cfg).unwrap()
}

#[test]
fn residual_is_small_between_true_states() {
    let ds = noiseless_dataset();
    let traj = &ds.gt.trajectory;
    let t0 = ds.meas.imu[40].t_ns + 1_000_000;
    let t1 = t0 + 100_000_000;
    let pim = PreintegratedImu::integrate_window(&ds.meas.imu, t0, t1, ImuBias::default(), NOISE).unwrap();
    let (pi, ri) = traj.pose_ns(t0).unwrap();
    let (pj, rj) = traj.pose_ns(t1).unwrap();
    let vi = traj.position.sample_ns(t0, 1).unwrap();
    let vj = traj.position.sample_ns(t1, 1).unwrap();
    let mut out = [0.0; 9];
    preint_residual(
        &pim,
        &ds.gt.gravity,
        ri.matrix(),
        &pi,
        &vi,
        &[0.0; 6],
        rj.matrix(),
        &pj,
        &vj,
        &mut out,
    );
    let r = SVector::<f64, 9>::from_column_slice(&out);
    assert!(r.fixed_rows::<3>(0).norm() < 1e-5, "{r}");
    assert!(r.fixed_rows::<3>(3).norm() < 1e-3, "{r}");
    assert!(r.fixed_rows::<3>(6).norm() < 1e-4, "{r}");
}

fn random_states(pim: &PreintegratedImu, g: &Vector3<f64>) -> (Parameters, [BlockId; 7]) {
    let mut params = Parameters::new();
    let ri = Rotation::identity().retract(&Vector3::new(0.1, -0.2, 0.4));
    let pi = Vector3::new(1.0, 2.0, -0.5);
    let vi = Vector3::new(0.3, -0.4, 0.1);
    let t = pim.dt_total;
    let rj = Rotation::from_matrix_unchecked(ri.matrix() * pim.dr.matrix());
    let vj = vi - g * t + ri.matrix() * pim.dv;
    let pj = pi + vi * t - g * (0.5 * t * t) + ri.matrix() * pim.dp;
    let blocks = [
        params.add_rotation(ri, false),
        params.add_vec3(&pi, false),
        params.add_vec3(&vi, false),
        params.add_vector(&pim.bias_lin.to_array(), false),
        params.add_rotation(rj, false),
        params.add_vec3(&pj, false),
        params.add_vec3(&vj, false),
    ];
    (params, blocks)
}

#[test]
fn residual_vanishes_for_consistent_states_and_has_correct_jacobians() {
    let s = wobbly_samples(41);
    let g = Vector3::new(0.0, 0.0, 9.81);
    let pim = PreintegratedImu::integrate(&s, ImuBias::default(), NOISE).unwrap();
    let (mut params, blocks) = random_states(&pim, &g);
    let f = AutoDiff::new(
        "imu",
        PreintResidual {
            pim: pim.clone(),
            gravity: g,
            blocks,
        },
        pim.weight().unwrap(),
    );
    let ids = f.blocks(&params).unwrap();
    let r = f.evaluate(&params, &ids).unwrap();
    assert!(r.amax() < 1e-8, "{r}");
    params.set_vec3(blocks[2], &Vector3::new(0.5, 0.1, -0.3));
    params.block_mut(blocks[3]).retract(&[0.01, -0.02, 0.03, 0.001, 0.002, -0.001]);
    let check = check_jacobians(&f, &params, 1e-6);
    assert!(check.max_rel_error < 1e-5, "{check:?}");
}

#[test]
fn bias_walk_examples() {
    let a = ImuBias::default();
    let b = ImuBias::new(Vector3::new(0.02, 0.0, 0.0), Vector3::new(0.0, 0.0, -0.001));
    let r = bias_rw_residual_dt(&a, &b, 4.0, 0.01, 0.001).unwrap();
    let expected = SVector::<f64, 6>::from_column_slice(&[1.0, 0.0, 0.0, 0.0, 0.0, -0.5]);
    assert!((r - expected).amax() < 1e-12, "{r}");
    assert_eq!(bias_rw_residual_dt(&a, &a, 1.0, 0.01, 0.001).unwrap(), SVector::<f64, 6>::zeros());
    assert!(bias_rw_residual_dt(&a, &b, 0.0, 0.01, 0.001).is_err());
    assert!(bias_walk_weight(0.01, 0.001, -1.0).is_err());
}
