//! Synthetic ground truth and sensor streams.
//!
//! Conventions: world z is up, a resting accelerometer reads `Rᵀ g` with
//! `g = (0, 0, +9.81)`, body x points forward. Camera stamps are capture time
//! minus `t_cam_imu`; GPS stamps are fix time minus `t_gps_imu`.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init::{fit_trajectory, FitOptions, Sim3Transform};
use crate::lie::{Pose, Rotation};
use crate::spline::{KnotGrid, SplineR3, Trajectory};

pub const STANDARD_GRAVITY: f64 = 9.81;
pub const NS_PER_S: i64 = 1_000_000_000;

pub fn default_gravity() -> Vector3<f64> {
    Vector3::new(0.0, 0.0, STANDARD_GRAVITY)
}

pub(crate) fn secs_to_ns(s: f64) -> i64 {
    (s * NS_PER_S as f64).round() as i64
}

pub(crate) fn period_ns(hz: f64) -> i64 {
    secs_to_ns(1.0 / hz)
}

/// Pinhole camera looking along +z, x right, y down.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Default for CameraModel {
    fn default() -> Self {
        CameraModel {
            fx: 400.0,
            fy: 400.0,
            cx: 320.0,
            cy: 240.0,
            width: 640,
            height: 480,
        }
    }
}

impl CameraModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::invalid("focal lengths must be positive"));
        }
        if !(0.0..self.width as f64).contains(&self.cx)
            || !(0.0..self.height as f64).contains(&self.cy)
        {
            return Err(Error::invalid("principal point outside the image"));
        }
        Ok(())
    }

    pub fn in_image(&self, px: &Vector2<f64>) -> bool {
        px.x >= 0.0 && px.y >= 0.0 && px.x < self.width as f64 && px.y < self.height as f64
    }
}

/// Extrinsic and temporal calibration of the sensor suite.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorRig {
    /// Pose of the camera in the IMU (body) frame.
    pub t_cam_imu_pose: Pose,
    pub p_antenna_body: Vector3<f64>,
    /// Camera clock offset [s]: `t_imu = t_cam + t_cam_imu`.
    pub t_cam_imu: f64,
    /// GPS clock offset [s]: `t_imu = t_gps + t_gps_imu`.
    pub t_gps_imu: f64,
    pub camera: CameraModel,
}

/// Camera z along body x, camera x along −body y, camera y along −body z.
pub fn forward_camera_rotation() -> Rotation {
    let m = nalgebra::Matrix3::new(0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0);
    Rotation::from_matrix(m).expect("constant rotation")
}

impl Default for SensorRig {
    fn default() -> Self {
        SensorRig {
            t_cam_imu_pose: Pose::new(forward_camera_rotation(), Vector3::new(0.05, 0.02, -0.01)),
            p_antenna_body: Vector3::new(0.0, 0.0, 0.1),
            t_cam_imu: 0.0,
            t_gps_imu: 0.0,
            camera: CameraModel::default(),
        }
    }
}

impl SensorRig {
    pub fn validate(&self) -> Result<()> {
        self.camera.validate()?;
        let (orth, det) = self.t_cam_imu_pose.rotation.orthonormality_error();
        if orth > 1e-9 || det > 1e-9 {
            return Err(Error::invalid("camera extrinsic rotation is not orthonormal"));
        }
        for (name, v) in [("t_cam_imu", self.t_cam_imu), ("t_gps_imu", self.t_gps_imu)] {
            if !v.is_finite() || v.abs() >= 1.0 {
                return Err(Error::invalid(format!("{name} = {v} s is not a plausible offset")));
            }
        }
        if !self.t_cam_imu_pose.translation.iter().all(|v| v.is_finite())
            || !self.p_antenna_body.iter().all(|v| v.is_finite())
        {
            return Err(Error::invalid("rig lever arms must be finite"));
        }
        Ok(())
    }

    /// World pose of the camera given the body pose.
    pub fn camera_pose(&self, p_wb: &Vector3<f64>, r_wb: &Rotation) -> Pose {
        Pose::new(*r_wb, *p_wb).compose(&self.t_cam_imu_pose)
    }
}

/// Sensor noise and rates. IMU densities are discretized per sample as
/// `σ = density·√rate`; bias random walks as `σ_rw·√Δt`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSpec {
    pub pixel_sigma: f64,
    pub accel_sigma: f64,
    pub gyro_sigma: f64,
    pub accel_bias_rw: f64,
    pub gyro_bias_rw: f64,
    /// Standard deviation of the initial bias draw.
    pub accel_bias_init: f64,
    pub gyro_bias_init: f64,
    pub gps_sigma: f64,
    pub cam_hz: f64,
    pub imu_hz: f64,
    pub gps_hz: f64,
    pub seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            pixel_sigma: 1.0,
            accel_sigma: 2.0e-3,
            gyro_sigma: 1.7e-4,
            accel_bias_rw: 3.0e-3,
            gyro_bias_rw: 1.9e-5,
            accel_bias_init: 0.02,
            gyro_bias_init: 2.0e-3,
            gps_sigma: 0.1,
            cam_hz: 20.0,
            imu_hz: 200.0,
            gps_hz: 10.0,
            seed: 0,
        }
    }
}

impl NoiseSpec {
    /// Same rates and seed, every sigma zero.
    pub fn noiseless(&self) -> Self {
        NoiseSpec {
            pixel_sigma: 0.0,
            accel_sigma: 0.0,
            gyro_sigma: 0.0,
            accel_bias_rw: 0.0,
            gyro_bias_rw: 0.0,
            accel_bias_init: 0.0,
            gyro_bias_init: 0.0,
            gps_sigma: 0.0,
            ..*self
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sigmas = [
            self.pixel_sigma,
            self.accel_sigma,
            self.gyro_sigma,
            self.accel_bias_rw,
            self.gyro_bias_rw,
            self.accel_bias_init,
            self.gyro_bias_init,
            self.gps_sigma,
        ];
        if sigmas.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
            return Err(Error::invalid("noise sigmas must be finite and non-negative"));
        }
        for (name, r) in [("cam_hz", self.cam_hz), ("imu_hz", self.imu_hz), ("gps_hz", self.gps_hz)] {
            if !(r > 0.0) || !r.is_finite() {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        if self.imu_hz < self.cam_hz {
            return Err(Error::invalid("imu_hz must not be below cam_hz"));
        }
        Ok(())
    }

    pub fn accel_sample_sigma(&self) -> f64 {
        self.accel_sigma * self.imu_hz.sqrt()
    }

    pub fn gyro_sample_sigma(&self) -> f64 {
        self.gyro_sigma * self.imu_hz.sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImuSample {
    pub t_ns: i64,
    pub gyro: Vector3<f64>,
    pub accel: Vector3<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpsFix {
    pub t_ns: i64,
    pub position: Vector3<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub landmark: u64,
    pub pixel: Vector2<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub t_ns: i64,
    pub id: u64,
    pub observations: Vec<Observation>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeasurementSet {
    pub imu: Vec<ImuSample>,
    pub gps: Vec<GpsFix>,
    pub frames: Vec<Frame>,
    pub landmarks_true: BTreeMap<u64, Vector3<f64>>,
}

fn strictly_increasing(name: &str, stamps: impl Iterator<Item = i64>) -> Result<()> {
    let mut last = None;
    for (i, t) in stamps.enumerate() {
        if let Some(prev) = last {
            if t <= prev {
                return Err(Error::Data(format!(
                    "{name} timestamps not strictly increasing at entry {i} ({prev} -> {t})"
                )));
            }
        }
        last = Some(t);
    }
    Ok(())
}

impl MeasurementSet {
    pub fn validate(&self) -> Result<()> {
        strictly_increasing("imu", self.imu.iter().map(|s| s.t_ns))?;
        strictly_increasing("gps", self.gps.iter().map(|s| s.t_ns))?;
        strictly_increasing("frame", self.frames.iter().map(|f| f.t_ns))?;
        let mut counts: BTreeMap<u64, usize> = BTreeMap::new();
        for f in &self.frames {
            for o in &f.observations {
                if !self.landmarks_true.is_empty() && !self.landmarks_true.contains_key(&o.landmark) {
                    return Err(Error::Data(format!(
                        "frame {} observes unknown landmark {}",
                        f.id, o.landmark
                    )));
                }
                *counts.entry(o.landmark).or_default() += 1;
            }
        }
        if let Some((id, _)) = counts.iter().find(|(_, c)| **c < 2) {
            return Err(Error::Data(format!("landmark {id} is observed only once")));
        }
        Ok(())
    }

    pub fn observation_count(&self) -> usize {
        self.frames.iter().map(|f| f.observations.len()).sum()
    }

    /// First and last stamp over all streams.
    pub fn time_span_ns(&self) -> Option<(i64, i64)> {
        let stamps = self
            .imu
            .iter()
            .map(|s| s.t_ns)
            .chain(self.gps.iter().map(|g| g.t_ns))
            .chain(self.frames.iter().map(|f| f.t_ns));
        stamps.fold(None, |acc, t| match acc {
            None => Some((t, t)),
            Some((a, b)) => Some((a.min(t), b.max(t))),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Circle,
    Lemniscate,
    Line,
}

impl std::str::FromStr for Profile {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "circle" => Ok(Profile::Circle),
            "lemniscate" => Ok(Profile::Lemniscate),
            "line" => Ok(Profile::Line),
            other => Err(Error::invalid(format!("unknown profile '{other}'"))),
        }
    }
}

/// Shape of the ground-truth motion.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrajectoryParams {
    pub profile: Profile,
    /// Circle radius or lemniscate half-width [m].
    pub radius: f64,
    /// Time for one loop [s] (or for one vertical oscillation on a line).
    pub period: f64,
    /// Line speed [m/s].
    pub speed: f64,
    pub z_amp: f64,
    pub height: f64,
    /// Roll/pitch oscillation amplitude [rad].
    pub tilt_amp: f64,
    pub tilt_period: f64,
    pub yaw_follows_velocity: bool,
    /// Rest at the start of the measurement span [s].
    pub static_prefix: f64,
    /// Duration of the smooth speed-up after the rest [s].
    pub ramp: f64,
    /// Measurement span [s].
    pub duration: f64,
    pub order: usize,
    pub node_hz: f64,
    pub t0_ns: i64,
}

impl Default for TrajectoryParams {
    fn default() -> Self {
        TrajectoryParams {
            profile: Profile::Circle,
            radius: 5.0,
            period: 20.0,
            speed: 1.0,
            z_amp: 0.3,
            height: 1.5,
            tilt_amp: 0.05,
            tilt_period: 7.0,
            yaw_follows_velocity: true,
            static_prefix: 0.0,
            ramp: 1.0,
            duration: 20.0,
            order: 6,
            node_hz: 20.0,
            t0_ns: 0,
        }
    }
}

/// Padding of the ground-truth spline beyond the measurement span [s].
pub const GT_PAD: f64 = 0.5;

impl TrajectoryParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.duration >= 5.0) {
            return Err(Error::invalid("duration must be at least 5 s"));
        }
        if !(self.node_hz > 0.0) || self.node_hz * self.duration < self.order as f64 {
            return Err(Error::invalid("too few spline nodes for the requested duration"));
        }
        if !(self.period > 0.0) || !(self.tilt_period > 0.0) || !(self.ramp > 0.0) {
            return Err(Error::invalid("periods and ramp must be positive"));
        }
        if self.radius < 0.0 || self.static_prefix < 0.0 {
            return Err(Error::invalid("radius and static prefix must be non-negative"));
        }
        if self.static_prefix + 3.0 > self.duration {
            return Err(Error::invalid("static prefix leaves less than 3 s of motion"));
        }
        Ok(())
    }

    /// Start of the measurement span.
    pub fn start_ns(&self) -> i64 {
        self.t0_ns + secs_to_ns(GT_PAD)
    }

    pub fn end_ns(&self) -> i64 {
        self.start_ns() + secs_to_ns(self.duration)
    }

    /// Warped time: zero during the rest, then a C²-smooth speed-up.
    fn warp(&self, t_rel: f64) -> f64 {
        if self.static_prefix <= 0.0 {
            return t_rel;
        }
        let x = (t_rel - self.static_prefix) / self.ramp;
        if x <= 0.0 {
            0.0
        } else if x < 1.0 {
            // Integral of the smootherstep 6x⁵ − 15x⁴ + 10x³.
            self.ramp * x.powi(4) * (x * x - 3.0 * x + 2.5)
        } else {
            self.ramp * 0.5 + (t_rel - self.static_prefix - self.ramp)
        }
    }

    /// Position and the horizontal direction of travel at warped time `tau`.
    fn shape(&self, tau: f64) -> (Vector3<f64>, Vector2<f64>) {
        let w = 2.0 * PI / self.period;
        let th = w * tau;
        let (p, dir) = match self.profile {
            Profile::Circle => (
                Vector3::new(
                    self.radius * th.cos(),
                    self.radius * th.sin(),
                    self.z_amp * (2.0 * th).sin(),
                ),
                Vector2::new(-th.sin(), th.cos()),
            ),
            Profile::Lemniscate => (
                Vector3::new(
                    self.radius * th.sin(),
                    self.radius * th.sin() * th.cos(),
                    self.z_amp * th.sin(),
                ),
                Vector2::new(th.cos(), (2.0 * th).cos()),
            ),
            Profile::Line => (
                Vector3::new(self.speed * tau, 0.0, self.z_amp * th.sin()),
                Vector2::new(1.0, 0.0),
            ),
        };
        (p + Vector3::new(0.0, 0.0, self.height), dir)
    }

    /// Analytic pose at absolute time `t_ns`; `prev_yaw` unwraps the heading.
    fn analytic_pose(&self, t_ns: i64, prev_yaw: Option<f64>) -> (Vector3<f64>, f64, Rotation) {
        let t_rel = (t_ns - self.start_ns()) as f64 / NS_PER_S as f64;
        let tau = self.warp(t_rel);
        let (p, dir) = self.shape(tau);
        let mut yaw = if self.yaw_follows_velocity {
            dir.y.atan2(dir.x)
        } else {
            0.0
        };
        if let Some(prev) = prev_yaw {
            yaw += (2.0 * PI) * ((prev - yaw) / (2.0 * PI)).round();
        }
        let roll = self.tilt_amp * (2.0 * PI * tau / self.tilt_period).sin();
        let pitch = self.tilt_amp * (2.0 * PI * tau / (1.3 * self.tilt_period) + 0.5).sin()
            - self.tilt_amp * 0.5f64.sin();
        let r = Rotation::rz(yaw) * Rotation::ry(pitch) * Rotation::rx(roll);
        (p, yaw, r)
    }
}

/// Fits an order-`k` spline at `node_hz` to the analytic profile. The returned
/// trajectory covers the measurement span plus [`GT_PAD`] on both sides.
pub fn make_ground_truth(params: &TrajectoryParams) -> Result<Trajectory> {
    params.validate()?;
    let dt_ns = period_ns(params.node_hz);
    let end_ns = params.end_ns() + secs_to_ns(GT_PAD);
    let grid = KnotGrid::covering(params.t0_ns, end_ns, dt_ns, params.order)?;
    let step = (dt_ns / 4).max(1);
    let (_, dom_end) = grid.domain();
    let last_ns = params.t0_ns + secs_to_ns(dom_end - grid.t0()) - 1;
    let mut samples = Vec::new();
    let mut yaw = None;
    let mut t = params.t0_ns;
    while t <= last_ns {
        let (p, y, r) = params.analytic_pose(t, yaw);
        yaw = Some(y);
        samples.push((t, Pose::new(r, p)));
        t += step;
    }
    let (traj, report) = fit_trajectory(
        grid,
        &samples,
        &FitOptions {
            max_iter: 30,
            ..FitOptions::default()
        },
    )?;
    log::debug!(
        "ground truth fit: {} iterations, cost {:.3e}",
        report.iterations,
        report.final_cost
    );
    if params.static_prefix <= 0.0 {
        return Ok(traj);
    }
    // Nodes anchored inside the rest are pinned so the rest is exactly still.
    let (p_rest, _, r_rest) = params.analytic_pose(params.start_ns(), None);
    let rest_end = grid.offset_of(params.start_ns() + secs_to_ns(params.static_prefix)) + grid.t0();
    let mut traj = traj;
    for m in 0..grid.count {
        if grid.anchor_time(m) <= rest_end {
            traj.position.nodes_mut()[m] = p_rest;
            traj.rotation.nodes_mut()[m] = r_rest;
        }
    }
    Ok(traj)
}

/// Landmark cloud and visibility limits.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub landmarks: usize,
    /// Horizontal growth of the trajectory bounding box [m].
    pub margin_xy: f64,
    /// Vertical extent of the box around the mean height [m].
    pub margin_z: f64,
    /// Landmarks closer than this to the path are redrawn [m].
    pub clearance: f64,
    pub max_features: usize,
    pub min_depth: f64,
    pub max_depth: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            landmarks: 300,
            margin_xy: 6.0,
            margin_z: 3.0,
            clearance: 1.0,
            max_features: 40,
            min_depth: 0.5,
            max_depth: 30.0,
        }
    }
}

/// Stand-in for a structure-from-motion reconstruction: camera poses and
/// landmarks in an arbitrary similarity frame `G`, with noise.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SfmConfig {
    /// Metric units per `G` unit.
    pub scale: f64,
    pub position_sigma: f64,
    pub rotation_sigma: f64,
    pub landmark_sigma: f64,
}

impl Default for SfmConfig {
    fn default() -> Self {
        SfmConfig {
            scale: 2.0,
            position_sigma: 0.02,
            rotation_sigma: 0.005,
            landmark_sigma: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SfmReconstruction {
    /// Camera poses in `G`, stamped with camera-clock frame times.
    pub poses: Vec<(i64, Pose)>,
    pub landmarks: BTreeMap<u64, Vector3<f64>>,
}

/// Everything `simulate` needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub trajectory: TrajectoryParams,
    pub rig: SensorRig,
    pub noise: NoiseSpec,
    pub scene: SceneConfig,
    pub sfm: SfmConfig,
    pub gravity: Vector3<f64>,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            trajectory: TrajectoryParams::default(),
            rig: SensorRig::default(),
            noise: NoiseSpec::default(),
            scene: SceneConfig::default(),
            sfm: SfmConfig::default(),
            gravity: default_gravity(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub trajectory: Trajectory,
    pub bias_accel: SplineR3,
    pub bias_gyro: SplineR3,
    pub gravity: Vector3<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimDataset {
    pub meas: MeasurementSet,
    pub gt: GroundTruth,
    pub rig: SensorRig,
    pub noise: NoiseSpec,
    pub sfm: SfmReconstruction,
    /// True transform from `G` to world.
    pub world_from_sfm: Sim3Transform,
}

fn gauss(rng: &mut impl Rng, sigma: f64) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    sigma * z
}

fn gauss3(rng: &mut impl Rng, sigma: f64) -> Vector3<f64> {
    Vector3::new(gauss(rng, sigma), gauss(rng, sigma), gauss(rng, sigma))
}

/// Order-4 bias curve following a random walk at one node per second.
fn bias_spline(
    rng: &mut impl Rng,
    start_ns: i64,
    end_ns: i64,
    init_sigma: f64,
    rw: f64,
) -> Result<SplineR3> {
    let grid = KnotGrid::covering(start_ns, end_ns, NS_PER_S, 4)?;
    let mut b = gauss3(rng, init_sigma);
    let nodes = (0..grid.count)
        .map(|_| {
            let v = b;
            b += gauss3(rng, rw);
            v
        })
        .collect();
    SplineR3::new(grid, nodes)
}

/// Uniform landmarks in a box around the path, kept away from the path.
pub fn make_scene(
    traj: &Trajectory,
    cfg: &SceneConfig,
    rng: &mut impl Rng,
) -> Result<BTreeMap<u64, Vector3<f64>>> {
    let (start, end) = traj.grid().domain();
    let n = ((end - start) * 10.0) as usize + 1;
    let path: Vec<Vector3<f64>> = (0..n)
        .map(|i| traj.position.sample(start + (end - start) * i as f64 / n as f64, 0))
        .collect::<Result<_>>()?;
    let mut lo = path[0];
    let mut hi = path[0];
    for p in &path {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    let zc = 0.5 * (lo.z + hi.z);
    let lo = Vector3::new(lo.x - cfg.margin_xy, lo.y - cfg.margin_xy, zc - cfg.margin_z);
    let hi = Vector3::new(hi.x + cfg.margin_xy, hi.y + cfg.margin_xy, zc + cfg.margin_z);
    let mut out = BTreeMap::new();
    let mut attempts = 0;
    while out.len() < cfg.landmarks {
        attempts += 1;
        if attempts > 1000 * cfg.landmarks.max(1) {
            return Err(Error::invalid("could not place landmarks with the requested clearance"));
        }
        let l = Vector3::new(
            rng.random_range(lo.x..hi.x),
            rng.random_range(lo.y..hi.y),
            rng.random_range(lo.z..hi.z),
        );
        if path.iter().all(|p| (p - l).norm() >= cfg.clearance) {
            out.insert(out.len() as u64, l);
        }
    }
    Ok(out)
}

/// Pixel of world point `l` seen from camera pose `cam`, if visible.
pub fn observe(
    camera: &CameraModel,
    cam: &Pose,
    l: &Vector3<f64>,
    min_depth: f64,
    max_depth: f64,
) -> Option<Vector2<f64>> {
    let pc = cam.rotation.matrix().transpose() * (l - cam.translation);
    if pc.z < min_depth || pc.z > max_depth {
        return None;
    }
    let px = Vector2::new(
        camera.fx * pc.x / pc.z + camera.cx,
        camera.fy * pc.y / pc.z + camera.cy,
    );
    camera.in_image(&px).then_some(px)
}

/// Stamps with period `period` in `[start + lead, end − lead)`.
fn stamp_grid(start: i64, end: i64, period: i64, lead: i64) -> Vec<i64> {
    let mut out = Vec::new();
    let mut t = start + lead;
    while t < end - lead {
        out.push(t);
        t += period;
    }
    out
}

/// Generates ground truth, scene and all sensor streams from `cfg`.
pub fn simulate(cfg: &SimConfig) -> Result<SimDataset> {
    let traj = make_ground_truth(&cfg.trajectory)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.noise.seed);
    let landmarks = make_scene(&traj, &cfg.scene, &mut rng)?;
    synthesize_with_rng(traj, &cfg.rig, &cfg.noise, &landmarks, cfg, &mut rng)
}

/// Generates sensor streams for a given trajectory and landmark cloud.
pub fn synthesize(
    traj: Trajectory,
    landmarks: &BTreeMap<u64, Vector3<f64>>,
    cfg: &SimConfig,
) -> Result<SimDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.noise.seed ^ 0x5eed);
    synthesize_with_rng(traj, &cfg.rig, &cfg.noise, landmarks, cfg, &mut rng)
}

fn synthesize_with_rng(
    traj: Trajectory,
    rig: &SensorRig,
    noise: &NoiseSpec,
    landmarks: &BTreeMap<u64, Vector3<f64>>,
    cfg: &SimConfig,
    rng: &mut ChaCha8Rng,
) -> Result<SimDataset> {
    rig.validate()?;
    noise.validate()?;
    let start = cfg.trajectory.start_ns();
    let end = cfg.trajectory.end_ns();
    let (dom_lo, dom_hi) = traj.grid().domain();
    let span_lo = (start - traj.grid().t0_ns) as f64 / NS_PER_S as f64 + traj.grid().t0();
    let span_hi = (end - traj.grid().t0_ns) as f64 / NS_PER_S as f64 + traj.grid().t0();
    if span_lo - 0.2 < dom_lo || span_hi + 0.2 >= dom_hi {
        return Err(Error::invalid("ground truth does not cover the measurement span"));
    }
    let grid = *traj.grid();
    let rel = |t_ns: i64| grid.offset_of(t_ns) + grid.t0();

    let bias_accel = bias_spline(
        rng,
        grid.t0_ns,
        grid.t0_ns + secs_to_ns(dom_hi - dom_lo),
        noise.accel_bias_init,
        noise.accel_bias_rw,
    )?;
    let bias_gyro = bias_spline(
        rng,
        grid.t0_ns,
        grid.t0_ns + secs_to_ns(dom_hi - dom_lo),
        noise.gyro_bias_init,
        noise.gyro_bias_rw,
    )?;

    // IMU on its own clock.
    let sa = noise.accel_sample_sigma();
    let sg = noise.gyro_sample_sigma();
    let mut imu = Vec::new();
    for t_ns in stamp_grid(start, end, period_ns(noise.imu_hz), 0) {
        let t = rel(t_ns);
        let (r, w) = traj.rotation.sample_with_rate(t)?;
        let acc = traj.position.sample(t, 2)?;
        let ba = bias_accel.sample_ns(t_ns, 0)?;
        let bg = bias_gyro.sample_ns(t_ns, 0)?;
        let accel = r.matrix().transpose() * (acc + cfg.gravity) + ba + gauss3(rng, sa);
        let gyro = w + bg + gauss3(rng, sg);
        imu.push(ImuSample { t_ns, gyro, accel });
    }

    // GPS stamps on the GPS clock; fixes taken at stamp + t_gps_imu.
    let mut gps = Vec::new();
    for t_ns in stamp_grid(start, end, period_ns(noise.gps_hz), 0) {
        let t = rel(t_ns) + rig.t_gps_imu;
        let (p, r) = traj.pose(t)?;
        let position = p + r.matrix() * rig.p_antenna_body + gauss3(rng, noise.gps_sigma);
        gps.push(GpsFix { t_ns, position });
    }

    // Camera: capture at stamp + t_cam_imu; tracks persist through a fixed
    // per-landmark priority. Frames keep clear of the span ends so that
    // shifted capture times stay inside the IMU coverage.
    let lead = secs_to_ns(0.1);
    let priority: BTreeMap<u64, u64> = landmarks.keys().map(|id| (*id, rng.random())).collect();
    let mut frames = Vec::new();
    let mut cam_poses = Vec::new();
    for (k, t_ns) in stamp_grid(start, end, period_ns(noise.cam_hz), lead)
        .into_iter()
        .enumerate()
    {
        let t = rel(t_ns) + rig.t_cam_imu;
        let (p, r) = traj.pose(t)?;
        let cam = rig.camera_pose(&p, &r);
        let mut visible: Vec<(u64, Vector2<f64>)> = landmarks
            .iter()
            .filter_map(|(id, l)| {
                observe(&rig.camera, &cam, l, cfg.scene.min_depth, cfg.scene.max_depth)
                    .map(|px| (*id, px))
            })
            .collect();
        visible.sort_by_key(|(id, _)| priority[id]);
        visible.truncate(cfg.scene.max_features);
        visible.sort_by_key(|(id, _)| *id);
        let observations = visible
            .into_iter()
            .map(|(landmark, px)| Observation {
                landmark,
                pixel: px
                    + Vector2::new(gauss(rng, noise.pixel_sigma), gauss(rng, noise.pixel_sigma)),
            })
            .collect();
        frames.push(Frame {
            t_ns,
            id: k as u64,
            observations,
        });
        cam_poses.push((t_ns, cam));
    }

    // Drop single observations, then empty frames.
    let mut counts: BTreeMap<u64, usize> = BTreeMap::new();
    for f in &frames {
        for o in &f.observations {
            *counts.entry(o.landmark).or_default() += 1;
        }
    }
    for f in &mut frames {
        f.observations.retain(|o| counts[&o.landmark] >= 2);
    }
    let kept: Vec<bool> = frames.iter().map(|f| !f.observations.is_empty()).collect();
    let frames: Vec<Frame> = frames.into_iter().filter(|f| !f.observations.is_empty()).collect();
    let cam_poses: Vec<(i64, Pose)> = cam_poses
        .into_iter()
        .zip(&kept)
        .filter_map(|(p, k)| k.then_some(p))
        .collect();
    let observed: BTreeMap<u64, Vector3<f64>> = landmarks
        .iter()
        .filter(|(id, _)| counts.get(id).is_some_and(|c| *c >= 2))
        .map(|(id, l)| (*id, *l))
        .collect();

    let (sfm, world_from_sfm) = make_sfm(&cam_poses, &observed, &cfg.sfm, rng)?;

    let meas = MeasurementSet {
        imu,
        gps,
        frames,
        landmarks_true: observed,
    };
    meas.validate()?;
    Ok(SimDataset {
        meas,
        gt: GroundTruth {
            trajectory: traj,
            bias_accel,
            bias_gyro,
            gravity: cfg.gravity,
        },
        rig: *rig,
        noise: *noise,
        sfm,
        world_from_sfm,
    })
}

/// Expresses noisy camera poses and landmarks in a frame `G` anchored at the
/// first camera and scaled by `1/scale`.
fn make_sfm(
    cam_poses: &[(i64, Pose)],
    landmarks: &BTreeMap<u64, Vector3<f64>>,
    cfg: &SfmConfig,
    rng: &mut impl Rng,
) -> Result<(SfmReconstruction, Sim3Transform)> {
    if !(cfg.scale > 0.0) {
        return Err(Error::invalid("sfm scale must be positive"));
    }
    let first = cam_poses
        .first()
        .ok_or_else(|| Error::Data("no camera frames".into()))?
        .1;
    let world_from_g = Sim3Transform::new(cfg.scale, first.rotation, first.translation)?;
    let g_from_world = world_from_g.inverse();
    let poses = cam_poses
        .iter()
        .map(|(t, pose)| {
            let noisy = Pose::new(
                pose.rotation.retract(&gauss3(rng, cfg.rotation_sigma)),
                pose.translation + gauss3(rng, cfg.position_sigma),
            );
            (*t, g_from_world.transform_pose(&noisy))
        })
        .collect();
    let landmarks = landmarks
        .iter()
        .map(|(id, l)| (*id, g_from_world.apply(&(l + gauss3(rng, cfg.landmark_sigma)))))
        .collect();
    Ok((SfmReconstruction { poses, landmarks }, world_from_g))
}

#[cfg(test)]
mod tests;
