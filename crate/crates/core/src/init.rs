//! Initialization: spline fitting to discrete poses, similarity alignment to
//! the GPS world frame, and the IMU scale bootstrap used without GPS.

use std::sync::Arc;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jet::Real;
use crate::lie::{self, Pose, Rotation};
use crate::sim::{GpsFix, ImuSample, NS_PER_S};
use crate::solver::{
    solve, AutoDiff, BlockId, FactorWeight, Input, Parameters, Problem, ResidualFn, SolveReport,
    SolverOptions,
};
use crate::spline::{KnotGrid, SplineR3, SplineSO3, Trajectory};

/// Similarity `y = s·R·x + t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sim3Transform {
    pub s: f64,
    pub r: Rotation,
    pub t: Vector3<f64>,
}

impl Default for Sim3Transform {
    fn default() -> Self {
        Sim3Transform {
            s: 1.0,
            r: Rotation::identity(),
            t: Vector3::zeros(),
        }
    }
}

impl Sim3Transform {
    pub fn new(s: f64, r: Rotation, t: Vector3<f64>) -> Result<Self> {
        if !(s > 0.0) || !s.is_finite() {
            return Err(Error::invalid(format!("similarity scale {s} must be positive")));
        }
        Ok(Sim3Transform { s, r, t })
    }

    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.r.matrix() * x * self.s + self.t
    }

    pub fn inverse(&self) -> Sim3Transform {
        let ri = self.r.inverse();
        Sim3Transform {
            s: 1.0 / self.s,
            r: ri,
            t: -(ri.matrix() * self.t) / self.s,
        }
    }

    /// `self ∘ other`.
    pub fn compose(&self, other: &Sim3Transform) -> Sim3Transform {
        Sim3Transform {
            s: self.s * other.s,
            r: self.r * other.r,
            t: self.apply(&other.t),
        }
    }

    /// Maps a pose expressed in the source frame into the target frame.
    pub fn transform_pose(&self, p: &Pose) -> Pose {
        Pose::new(self.r * p.rotation, self.apply(&p.translation))
    }
}

/// Closed-form similarity minimizing `Σ‖target − (s·R·source + t)‖²`.
pub fn umeyama(source: &[Vector3<f64>], target: &[Vector3<f64>]) -> Result<Sim3Transform> {
    if source.len() != target.len() {
        return Err(Error::invalid("umeyama needs equally many source and target points"));
    }
    let n = source.len();
    if n < 3 {
        return Err(Error::Degenerate(format!("{n} correspondences, need at least 3")));
    }
    let nf = n as f64;
    let mu_s = source.iter().sum::<Vector3<f64>>() / nf;
    let mu_t = target.iter().sum::<Vector3<f64>>() / nf;
    let mut cov = Matrix3::zeros();
    let mut var_s = 0.0;
    for (a, b) in source.iter().zip(target) {
        let da = a - mu_s;
        let db = b - mu_t;
        cov += db * da.transpose();
        var_s += da.norm_squared();
    }
    cov /= nf;
    var_s /= nf;
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut sv = svd.singular_values;
    // nalgebra does not sort singular values.
    let mut order = [0usize, 1, 2];
    order.sort_by(|a, b| sv[*b].partial_cmp(&sv[*a]).unwrap());
    if !(sv[order[0]] > 0.0) || sv[order[1]] <= 1e-10 * sv[order[0]] {
        return Err(Error::Degenerate(
            "point correspondences are collinear or coincident".into(),
        ));
    }
    let mut d = Matrix3::identity();
    if (u.determinant() * vt.determinant()) < 0.0 {
        d[(order[2], order[2])] = -1.0;
        sv[order[2]] = -sv[order[2]];
    }
    let r = u * d * vt;
    let s = sv.sum() / var_s;
    let t = mu_t - r * mu_s * s;
    Sim3Transform::new(s, Rotation::renormalized(r), t)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    pub max_iter: usize,
    /// Extra pose samples interpolated inside each input interval.
    pub densify: usize,
    pub position_sigma: f64,
    pub rotation_sigma: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            max_iter: 50,
            densify: 0,
            position_sigma: 1.0,
            rotation_sigma: 1.0,
        }
    }
}

/// Node block ids of a trajectory held in a [`Parameters`] set.
#[derive(Clone, Debug)]
pub struct SplineBlocks {
    pub grid: KnotGrid,
    pub position: Vec<BlockId>,
    pub rotation: Vec<BlockId>,
}

impl SplineBlocks {
    /// Adds nodes in interleaved `p, R` order (a banded normal matrix).
    pub fn add(params: &mut Parameters, traj: &Trajectory) -> Self {
        let mut position = Vec::new();
        let mut rotation = Vec::new();
        for (p, r) in traj.position.nodes().iter().zip(traj.rotation.nodes()) {
            position.push(params.add_vec3(p, false));
            rotation.push(params.add_rotation(*r, false));
        }
        SplineBlocks {
            grid: *traj.grid(),
            position,
            rotation,
        }
    }

    pub fn read(&self, params: &Parameters) -> Result<Trajectory> {
        let p = self.position.iter().map(|b| params.vec3(*b)).collect();
        let r = self.rotation.iter().map(|b| *params.rotation(*b)).collect();
        Trajectory::new(SplineR3::new(self.grid, p)?, SplineSO3::new(self.grid, r)?)
    }
}

/// `p(t) − p̄` on fixed sample time.
struct FitPosition {
    grid: KnotGrid,
    segment: usize,
    u: f64,
    target: Vector3<f64>,
    nodes: Arc<[BlockId]>,
}

impl ResidualFn for FitPosition {
    fn dim(&self) -> usize {
        3
    }
    fn blocks(&self, _: &Parameters) -> Option<Vec<BlockId>> {
        Some(self.nodes[self.segment..self.segment + self.grid.order].to_vec())
    }
    fn eval<T: Real>(&self, inputs: &[Input<T>], out: &mut [T]) -> bool {
        let mut nodes = [Vector3::zeros(); crate::spline::MAX_ORDER];
        for (n, i) in nodes.iter_mut().zip(inputs) {
            *n = i.vec3();
        }
        let k = self.grid.order;
        let p = crate::spline::eval_r3(&nodes[..k], T::from_f64(self.u), 1.0 / self.grid.dt(), 0);
        for a in 0..3 {
            out[a] = p[a] - self.target[a];
        }
        true
    }
}

/// `Log(R̄ᵀ R(t))`.
struct FitRotation {
    grid: KnotGrid,
    segment: usize,
    u: f64,
    target_t: Matrix3<f64>,
    nodes: Arc<[BlockId]>,
}

impl ResidualFn for FitRotation {
    fn dim(&self) -> usize {
        3
    }
    fn blocks(&self, _: &Parameters) -> Option<Vec<BlockId>> {
        Some(self.nodes[self.segment..self.segment + self.grid.order].to_vec())
    }
    fn eval<T: Real>(&self, inputs: &[Input<T>], out: &mut [T]) -> bool {
        let mut nodes = [Matrix3::zeros(); crate::spline::MAX_ORDER];
        for (n, i) in nodes.iter_mut().zip(inputs) {
            *n = i.rot();
        }
        let k = self.grid.order;
        let (r, _) =
            crate::spline::eval_so3(&nodes[..k], T::from_f64(self.u), 1.0 / self.grid.dt(), false);
        let e = lie::log(&(self.target_t.map(T::from_f64) * r));
        out.copy_from_slice(e.as_slice());
        true
    }
}

/// Linear / SLERP interpolation of stamped poses at `t_ns`, clamped to the
/// first and last pose.
pub fn interpolate_pose(poses: &[(i64, Pose)], t_ns: i64) -> Pose {
    if t_ns <= poses[0].0 {
        return poses[0].1;
    }
    let last = poses.len() - 1;
    if t_ns >= poses[last].0 {
        return poses[last].1;
    }
    let j = poses.partition_point(|(t, _)| *t <= t_ns);
    let (ta, a) = poses[j - 1];
    let (tb, b) = poses[j];
    let u = (t_ns - ta) as f64 / (tb - ta) as f64;
    Pose::new(
        lie::slerp(&a.rotation, &b.rotation, u).expect("fraction in [0, 1]"),
        a.translation + (b.translation - a.translation) * u,
    )
}

/// Minimizes position and rotation fitting residuals over the nodes of a
/// spline on `grid`. Nodes start from interpolated poses at their anchor times.
pub fn fit_trajectory(
    grid: KnotGrid,
    samples: &[(i64, Pose)],
    opts: &FitOptions,
) -> Result<(Trajectory, SolveReport)> {
    if samples.len() < 2 {
        return Err(Error::invalid("fitting needs at least two poses"));
    }
    if samples.windows(2).any(|w| w[1].0 <= w[0].0) {
        return Err(Error::Data("pose timestamps not strictly increasing".into()));
    }
    let mut dense = Vec::with_capacity(samples.len() * (opts.densify + 1));
    for w in samples.windows(2) {
        dense.push(w[0]);
        for j in 1..=opts.densify {
            let t = w[0].0 + (w[1].0 - w[0].0) * j as i64 / (opts.densify as i64 + 1);
            dense.push((t, interpolate_pose(samples, t)));
        }
    }
    dense.push(*samples.last().unwrap());

    let anchor_ns = |m: usize| {
        grid.t0_ns + ((2 * m as i64 + 2 - grid.order as i64) * grid.dt_ns) / 2
    };
    let init: Vec<Pose> = (0..grid.count)
        .map(|m| interpolate_pose(samples, anchor_ns(m)))
        .collect();
    let traj = Trajectory::new(
        SplineR3::new(grid, init.iter().map(|p| p.translation).collect())?,
        SplineSO3::new(grid, init.iter().map(|p| p.rotation).collect())?,
    )?;

    let mut params = Parameters::new();
    let blocks = SplineBlocks::add(&mut params, &traj);
    let mut problem = Problem::new(params);
    let pos_nodes: Arc<[BlockId]> = blocks.position.clone().into();
    let rot_nodes: Arc<[BlockId]> = blocks.rotation.clone().into();
    for (t_ns, pose) in &dense {
        let (segment, u) = grid.locate_offset(grid.offset_of(*t_ns)).map_err(|_| {
            Error::invalid(format!("pose at {t_ns} ns lies outside the fitting grid"))
        })?;
        problem.add(AutoDiff::new(
            "fit_position",
            FitPosition {
                grid,
                segment,
                u,
                target: pose.translation,
                nodes: pos_nodes.clone(),
            },
            FactorWeight::isotropic(3, opts.position_sigma),
        ));
        problem.add(AutoDiff::new(
            "fit_rotation",
            FitRotation {
                grid,
                segment,
                u,
                target_t: pose.rotation.matrix().transpose(),
                nodes: rot_nodes.clone(),
            },
            FactorWeight::isotropic(3, opts.rotation_sigma),
        ));
    }
    let report = solve(
        &mut problem,
        &SolverOptions {
            max_iter: opts.max_iter,
            ..SolverOptions::default()
        },
    )?;
    Ok((blocks.read(&problem.params)?, report))
}

/// Fits an order-`order` spline with nodes at `node_hz` to stamped poses.
pub fn fit_spline_to_poses(
    poses: &[(i64, Pose)],
    order: usize,
    node_hz: f64,
    opts: &FitOptions,
) -> Result<(Trajectory, SolveReport)> {
    if poses.len() < order.max(2) {
        return Err(Error::invalid(format!(
            "{} poses are too few for an order-{order} spline",
            poses.len()
        )));
    }
    if !(node_hz > 0.0) {
        return Err(Error::invalid("node frequency must be positive"));
    }
    let dt_ns = (NS_PER_S as f64 / node_hz).round() as i64;
    let (first, last) = (poses[0].0, poses[poses.len() - 1].0);
    if order > 2 && (last - first) < (order as i64 - 1) * dt_ns / 2 {
        return Err(Error::invalid("pose time span is too short for the node spacing"));
    }
    let grid = KnotGrid::covering(first, last, dt_ns, order)?;
    fit_trajectory(grid, poses, opts)
}

/// Appends constant-velocity pseudo poses every `step_ns` for `margin_ns`
/// before the first and after the last pose.
pub fn extrapolate_poses(poses: &[(i64, Pose)], margin_ns: i64, step_ns: i64) -> Vec<(i64, Pose)> {
    let n = poses.len();
    if n < 2 || margin_ns <= 0 {
        return poses.to_vec();
    }
    // `b` is the boundary pose, `a` its neighbour; `sign` points outward.
    let extend = |(ta, a): (i64, Pose), (tb, b): (i64, Pose), sign: i64| {
        let span = (ta - tb) as f64;
        let v = (a.translation - b.translation) / span;
        let w = (b.rotation.inverse() * a.rotation).log().0 / span;
        let mut out = Vec::new();
        let mut k = 1;
        while (k - 1) * step_ns < margin_ns {
            let t = tb + sign * k * step_ns;
            let h = (t - tb) as f64;
            out.push((
                t,
                Pose::new(
                    b.rotation * Rotation::from_matrix_unchecked(lie::exp(&(w * h))),
                    b.translation + v * h,
                ),
            ));
            k += 1;
        }
        out
    };
    let mut before = extend(poses[1], poses[0], -1);
    before.reverse();
    let after = extend(poses[n - 2], poses[n - 1], 1);
    before.into_iter().chain(poses.iter().copied()).chain(after).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignOptions {
    pub gps_sigma: f64,
    /// Lever arm used as the starting value, or kept when not estimated.
    pub antenna: Vector3<f64>,
    pub estimate_antenna: bool,
    pub estimate_time_offset: bool,
    pub max_iter: usize,
}

impl Default for AlignOptions {
    fn default() -> Self {
        AlignOptions {
            gps_sigma: 0.1,
            antenna: Vector3::zeros(),
            estimate_antenna: true,
            estimate_time_offset: true,
            max_iter: 50,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AlignResult {
    pub world_from_g: Sim3Transform,
    pub p_antenna: Vector3<f64>,
    pub t_gps_imu: f64,
    pub report: SolveReport,
    /// Whitened Fisher information of the GPS time offset after
    /// marginalizing the other variables [1/s²]; zero if not estimated.
    pub t_gps_information: f64,
    /// The data cannot resolve the GPS time offset to [`OFFSET_PRECISION`].
    pub low_information: bool,
}

/// Bound on estimated time offsets [s].
pub const OFFSET_BOUND: f64 = 0.1;

/// Marginal standard deviation above which a time offset counts as
/// unresolved [s].
pub const OFFSET_PRECISION: f64 = 0.01;

struct AlignGps {
    traj: Trajectory,
    since_t0: f64,
    measured: Vector3<f64>,
    blocks: [BlockId; 5],
}

impl ResidualFn for AlignGps {
    fn dim(&self) -> usize {
        3
    }
    fn blocks(&self, params: &Parameters) -> Option<Vec<BlockId>> {
        let t = self.since_t0 + params.scalar(self.blocks[4]);
        self.traj.grid().locate_offset(t).ok()?;
        Some(self.blocks.to_vec())
    }
    fn eval<T: Real>(&self, inputs: &[Input<T>], out: &mut [T]) -> bool {
        let s = inputs[0].scalar();
        let r = inputs[1].rot();
        let t = inputs[2].vec3();
        let ant = inputs[3].vec3();
        let time = inputs[4].scalar() + self.since_t0;
        let (Ok(p), Ok(rb)) = (
            self.traj.position.sample_real(time, 0),
            self.traj.rotation.sample_real(time),
        ) else {
            return false;
        };
        let pred = (r * p).map(|v| v * s) + t + r * (rb * ant);
        for a in 0..3 {
            out[a] = pred[a] - self.measured[a];
        }
        true
    }
}

/// Refines `T_g^w`, `s`, the antenna lever arm and the GPS time offset with
/// the body trajectory (expressed in `G`) held fixed.
pub fn align_to_world(
    traj_g: &Trajectory,
    gps: &[GpsFix],
    init: &Sim3Transform,
    opts: &AlignOptions,
) -> Result<AlignResult> {
    if gps.len() < 10 {
        return Err(Error::invalid(format!("{} GPS fixes, need at least 10", gps.len())));
    }
    if gps[gps.len() - 1].t_ns - gps[0].t_ns < 2 * NS_PER_S {
        return Err(Error::invalid("GPS fixes span less than 2 s"));
    }
    let mut params = Parameters::new();
    let bs = params.add_scalar(init.s, false, Some((1e-9, f64::INFINITY)));
    let br = params.add_rotation(init.r, false);
    let bt = params.add_vec3(&init.t, false);
    let ba = params.add_vec3(&opts.antenna, !opts.estimate_antenna);
    let bo = params.add_scalar(
        0.0,
        !opts.estimate_time_offset,
        Some((-OFFSET_BOUND, OFFSET_BOUND)),
    );
    let mut problem = Problem::new(params);
    let grid = traj_g.grid();
    for fix in gps {
        problem.add(AutoDiff::new(
            "gps_align",
            AlignGps {
                traj: traj_g.clone(),
                since_t0: grid.offset_of(fix.t_ns),
                measured: fix.position,
                blocks: [bs, br, bt, ba, bo],
            },
            FactorWeight::isotropic(3, opts.gps_sigma),
        ));
    }
    let report = solve(
        &mut problem,
        &SolverOptions {
            max_iter: opts.max_iter,
            ..SolverOptions::default()
        },
    )
    .map_err(|e| e.in_stage("gps alignment"))?;
    let p = &problem.params;
    let (h, _, offsets) = problem.normal_equations();
    let info = match offsets[bo] {
        Some(i) => h
            .try_inverse()
            .map(|cov| cov[(i, i)])
            .filter(|v| v.is_finite() && *v > 0.0)
            .map_or(0.0, |v| 1.0 / v),
        None => 0.0,
    };
    Ok(AlignResult {
        world_from_g: Sim3Transform::new(p.scalar(bs), *p.rotation(br), p.vec3(bt))?,
        p_antenna: p.vec3(ba),
        t_gps_imu: p.scalar(bo),
        report,
        t_gps_information: info,
        low_information: info * OFFSET_PRECISION * OFFSET_PRECISION < 1.0,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BootstrapOptions {
    /// Length of the rest period at the start [s].
    pub static_window: f64,
    /// Dead-reckoned segment after the rest [s].
    pub segment: f64,
    /// Per-sample accelerometer noise [m/s²], for the rest test.
    pub accel_sample_sigma: f64,
    pub gravity: f64,
}

impl Default for BootstrapOptions {
    fn default() -> Self {
        BootstrapOptions {
            static_window: 1.0,
            segment: 3.0,
            accel_sample_sigma: 0.03,
            gravity: crate::sim::STANDARD_GRAVITY,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Bootstrap {
    pub world_from_g: Sim3Transform,
    /// Gravity direction in the body frame at rest (unit, pointing up).
    pub up_body: Vector3<f64>,
}

/// Scale and gravity-aligned frame from a rest period followed by a short
/// dead-reckoned IMU segment.
pub fn imu_scale_bootstrap(
    traj_g: &Trajectory,
    imu: &[ImuSample],
    opts: &BootstrapOptions,
) -> Result<Bootstrap> {
    let unavailable = |m: String| Error::BootstrapUnavailable(m);
    let Some(first) = imu.first() else {
        return Err(unavailable("no IMU samples".into()));
    };
    let rest_end = first.t_ns + (opts.static_window * NS_PER_S as f64) as i64;
    let seg_end = rest_end + (opts.segment * NS_PER_S as f64) as i64;
    if imu.last().unwrap().t_ns < seg_end {
        return Err(unavailable("IMU data shorter than rest plus motion segment".into()));
    }
    let rest: Vec<&ImuSample> = imu.iter().take_while(|s| s.t_ns < rest_end).collect();
    if rest.len() < 2 {
        return Err(unavailable("too few samples in the rest window".into()));
    }
    let n = rest.len() as f64;
    let mean = rest.iter().map(|s| s.accel).sum::<Vector3<f64>>() / n;
    let var = rest
        .iter()
        .map(|s| (s.accel - mean).component_mul(&(s.accel - mean)))
        .sum::<Vector3<f64>>()
        / n;
    let gyro_mean = rest.iter().map(|s| s.gyro.norm()).sum::<f64>() / n;
    let threshold = (3.0 * opts.accel_sample_sigma).max(1e-3).powi(2);
    if var.max() > threshold || gyro_mean > 0.05 {
        return Err(unavailable(format!(
            "no rest detected (accelerometer variance {:.3e} above {threshold:.3e})",
            var.max()
        )));
    }
    let up_body = mean.normalize();
    // Rotation taking the body up direction onto world +z.
    let z = Vector3::z();
    let axis = up_body.cross(&z);
    let angle = up_body.dot(&z).clamp(-1.0, 1.0).acos();
    let r_wb0 = if axis.norm() < 1e-12 {
        if angle > 1.0 {
            Rotation::rx(std::f64::consts::PI)
        } else {
            Rotation::identity()
        }
    } else {
        Rotation::from_axis_angle(&axis, angle)
    };

    // Strapdown integration from rest; biases unknown and ignored.
    let g = Vector3::new(0.0, 0.0, opts.gravity);
    let mut r = *r_wb0.matrix();
    let mut v = Vector3::zeros();
    let mut p = Vector3::zeros();
    let mut src = Vec::new();
    let mut dst = Vec::new();
    let grid = traj_g.grid();
    let p_g0 = traj_g
        .position
        .sample_offset(grid.offset_of(rest_end), 0)
        .map_err(|_| unavailable("scaleless trajectory does not cover the rest end".into()))?;
    for w in imu.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        if a.t_ns < rest_end || a.t_ns >= seg_end {
            continue;
        }
        let dt = (b.t_ns - a.t_ns) as f64 / NS_PER_S as f64;
        let r_next = r * lie::exp(&(0.5 * (a.gyro + b.gyro) * dt));
        let acc = 0.5 * (r * a.accel + r_next * b.accel) - g;
        p += v * dt + 0.5 * acc * dt * dt;
        v += acc * dt;
        r = r_next;
        if let Ok(pg) = traj_g.position.sample_offset(grid.offset_of(b.t_ns), 0) {
            src.push(pg - p_g0);
            dst.push(p);
        }
    }
    let travelled = dst.iter().map(|p| p.norm()).fold(0.0, f64::max);
    let extent = src.iter().map(|p| p.norm()).fold(0.0, f64::max);
    if travelled < 0.05 || extent < 1e-9 {
        return Err(unavailable("no motion after the rest period".into()));
    }
    let mut sim = umeyama(&src, &dst).map_err(|e| unavailable(format!("alignment failed: {e}")))?;
    // Positions were taken relative to the rest position.
    sim.t -= sim.r.matrix() * p_g0 * sim.s;
    Ok(Bootstrap {
        world_from_g: sim,
        up_body,
    })
}
