//! Browser front end: simulate a dataset, fit a spline to noisy poses, and
//! run either estimator on a short simulated sequence. Each operation returns
//! a JSON document with top-down (x, y) polylines for plotting.

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;
use wasm_bindgen::prelude::*;

use ctslam::estimators::{self, EstimationInput, Mode, PipelineOptions};
use ctslam::init::{self, FitOptions};
use ctslam::lie::Pose;
use ctslam::sim::{self, Profile, SimConfig};
use ctslam::spline::Trajectory;
use ctslam::{Error, Result};

const NS: i64 = 1_000_000_000;

type Xy = [f64; 2];

fn xy(p: &Vector3<f64>) -> Xy {
    [p.x, p.y]
}

/// Truth polyline sampled every 50 ms.
fn truth_path(traj: &Trajectory, t0_ns: i64, t1_ns: i64) -> Result<Vec<Xy>> {
    (t0_ns..=t1_ns)
        .step_by(50_000_000)
        .map(|t| traj.pose_ns(t).map(|(p, _)| xy(&p)))
        .collect()
}

/// Figure-eight with rocking tilt, fast enough for time offsets to matter.
pub fn demo_config(profile: Profile, seed: u64, duration: f64) -> SimConfig {
    let mut cfg = SimConfig::default();
    cfg.trajectory.profile = profile;
    cfg.trajectory.duration = duration;
    if profile == Profile::Lemniscate {
        cfg.trajectory.period = 12.0;
        cfg.trajectory.tilt_amp = 0.15;
        cfg.trajectory.tilt_period = 3.0;
    }
    cfg.scene.landmarks = 150;
    cfg.noise.seed = seed;
    cfg
}

#[derive(Debug, Serialize)]
pub struct SimulationView {
    pub truth: Vec<Xy>,
    pub gps: Vec<Xy>,
    pub landmarks: Vec<Xy>,
    pub imu_samples: usize,
    pub frames: usize,
    pub observations: usize,
    pub peak_rate_rad_s: f64,
}

pub fn simulate_view(profile: Profile, seed: u64, duration: f64) -> Result<SimulationView> {
    let d = sim::simulate(&demo_config(profile, seed, duration))?;
    let m = &d.meas;
    let (t0, t1) = (m.imu[0].t_ns, m.imu[m.imu.len() - 1].t_ns);
    Ok(SimulationView {
        truth: truth_path(&d.gt.trajectory, t0, t1)?,
        gps: m.gps.iter().map(|g| xy(&g.position)).collect(),
        landmarks: m.landmarks_true.values().map(xy).collect(),
        imu_samples: m.imu.len(),
        frames: m.frames.len(),
        observations: m.frames.iter().map(|f| f.observations.len()).sum(),
        peak_rate_rad_s: m.imu.iter().map(|s| s.gyro.norm()).fold(0.0, f64::max),
    })
}

#[derive(Debug, Serialize)]
pub struct FitView {
    pub truth: Vec<Xy>,
    pub samples: Vec<Xy>,
    pub fitted: Vec<Xy>,
    pub nodes: usize,
    pub iterations: usize,
    /// Error of the fitted spline against the truth at 50 ms spacing [m].
    pub rms_truth_m: f64,
}

/// Fits a spline of `order` at `node_hz` to 10 Hz poses of the demo
/// trajectory with Gaussian position noise of `noise_m`.
pub fn fit_view(order: usize, node_hz: f64, noise_m: f64, seed: u64) -> Result<FitView> {
    if !(noise_m >= 0.0) {
        return Err(Error::InvalidArgument("noise must be non-negative".into()));
    }
    let d = sim::simulate(&demo_config(Profile::Lemniscate, seed, 12.0))?;
    let traj = &d.gt.trajectory;
    let (t0, t1) = (d.meas.imu[0].t_ns, d.meas.imu[d.meas.imu.len() - 1].t_ns);
    let noise = Normal::new(0.0, noise_m).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::new();
    for t in (t0..=t1).step_by((NS / 10) as usize) {
        let (p, r) = traj.pose_ns(t)?;
        let jitter = Vector3::from_fn(|_, _| noise.sample(&mut rng));
        samples.push((t, Pose::new(r, p + jitter)));
    }
    let (fit, report) = init::fit_spline_to_poses(&samples, order, node_hz, &FitOptions::default())?;
    let (mut fitted, mut sq) = (Vec::new(), 0.0);
    for t in (samples[0].0..=samples[samples.len() - 1].0).step_by(50_000_000) {
        let (p, _) = fit.pose_ns(t)?;
        let (q, _) = traj.pose_ns(t)?;
        sq += (p - q).norm_squared();
        fitted.push(xy(&p));
    }
    Ok(FitView {
        truth: truth_path(traj, t0, t1)?,
        samples: samples.iter().map(|(_, p)| xy(&p.translation)).collect(),
        rms_truth_m: (sq / fitted.len() as f64).sqrt(),
        fitted,
        nodes: fit.position.grid().count,
        iterations: report.iterations,
    })
}

#[derive(Debug, Serialize)]
pub struct EstimateView {
    pub mode: Mode,
    pub truth: Vec<Xy>,
    pub estimate: Vec<Xy>,
    pub ate_p_m: Option<f64>,
    pub ate_r_deg: Option<f64>,
    pub t_cam_imu_true_ms: f64,
    pub t_cam_imu_ms: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Runs one estimator on a short figure-eight with the camera clock
/// shifted by `t_cam_imu_ms`.
pub fn estimate_view(mode: Mode, t_cam_imu_ms: f64, seed: u64, duration: f64) -> Result<EstimateView> {
    let mut cfg = demo_config(Profile::Lemniscate, seed, duration);
    cfg.rig.t_cam_imu = t_cam_imu_ms * 1e-3;
    let d = sim::simulate(&cfg)?;
    let input = EstimationInput {
        meas: &d.meas,
        sfm: &d.sfm,
        rig: &d.rig,
        noise: &d.noise,
        ground_truth: Some(&d.gt.trajectory),
    };
    let est = estimators::run(&input, mode, &PipelineOptions::default())?;
    let (t0, t1) = (d.meas.imu[0].t_ns, d.meas.imu[d.meas.imu.len() - 1].t_ns);
    Ok(EstimateView {
        mode,
        truth: truth_path(&d.gt.trajectory, t0, t1)?,
        estimate: est.poses.iter().map(|(_, p)| xy(&p.translation)).collect(),
        ate_p_m: est.report.ate_p_m,
        ate_r_deg: est.report.ate_r_deg,
        t_cam_imu_true_ms: t_cam_imu_ms,
        t_cam_imu_ms: est.report.t_cam_imu_ms,
        iterations: est.report.iterations,
        converged: est.report.converged,
    })
}

fn to_js<T: Serialize>(r: Result<T>) -> Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e.to_string()))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> Result<T, JsError> {
    s.parse().map_err(|e: Error| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
pub fn simulate(profile: &str, seed: u32, duration: f64) -> Result<String, JsError> {
    to_js(simulate_view(parse(profile)?, seed.into(), duration))
}

#[wasm_bindgen]
pub fn fit(order: usize, node_hz: f64, noise_m: f64, seed: u32) -> Result<String, JsError> {
    to_js(fit_view(order, node_hz, noise_m, seed.into()))
}

#[wasm_bindgen]
pub fn estimate(mode: &str, t_cam_imu_ms: f64, seed: u32, duration: f64) -> Result<String, JsError> {
    to_js(estimate_view(parse(mode)?, t_cam_imu_ms, seed.into(), duration))
}
