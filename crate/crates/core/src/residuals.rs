//! Error terms of the continuous- and discrete-time batch problems, except
//! IMU preintegration.
//!
//! Every residual is written generically over [`Real`] and reads its
//! parameter blocks in the order returned by `blocks`. Measurement residuals
//! are `measured − predicted`.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::{Matrix3, Vector2, Vector3};

use crate::error::{Error, Result};
use crate::jet::Real;
use crate::lie::{self, Pose};
use crate::sim::CameraModel;
use crate::solver::{BlockId, Input, Parameters, ResidualFn};
use crate::spline::{eval_r3, eval_so3, KnotGrid, SplineR3, Trajectory, MAX_ORDER};

/// Points closer to the image plane than this are treated as behind the camera.
pub const MIN_DEPTH: f64 = 1e-6;

/// Pinhole projection of a point in camera coordinates.
pub fn project<T: Real>(cam: &CameraModel, p: &Vector3<T>) -> Result<Vector2<T>> {
    if !(p.z.value() > MIN_DEPTH) {
        return Err(Error::BehindCamera { z: p.z.value() });
    }
    let inv_z = T::one() / p.z;
    Ok(Vector2::new(
        p.x * inv_z * cam.fx + cam.cx,
        p.y * inv_z * cam.fy + cam.cy,
    ))
}

/// Landmark `l` in camera coordinates given the body pose and the camera
/// pose in the body frame.
#[inline]
pub fn camera_point<T: Real>(
    r_wb: &Matrix3<T>,
    p_wb: &Vector3<T>,
    r_bc: &Matrix3<T>,
    p_bc: &Vector3<T>,
    l: &Vector3<T>,
) -> Vector3<T> {
    r_bc.transpose() * (r_wb.transpose() * (l - p_wb) - p_bc)
}

/// Reprojection residual `z̄ − π(·)`; zero with zero derivatives behind the
/// camera.
fn reprojection<T: Real>(cam: &CameraModel, pc: &Vector3<T>, measured: &Vector2<T>, out: &mut [T]) {
    match project(cam, pc) {
        Ok(px) => {
            out[0] = measured.x - px.x;
            out[1] = measured.y - px.y;
        }
        Err(_) => {
            out[0] = T::zero();
            out[1] = T::zero();
        }
    }
}

fn lift3<T: Real>(v: &Vector3<f64>) -> Vector3<T> {
    v.map(T::from_f64)
}

/// Block ids of the control nodes of a pose spline.
#[derive(Clone, Debug)]
pub struct SplineNodes {
    pub grid: KnotGrid,
    pub position: Arc<[BlockId]>,
    pub rotation: Arc<[BlockId]>,
}

impl SplineNodes {
    fn push_position(&self, segment: usize, out: &mut Vec<BlockId>) {
        out.extend_from_slice(&self.position[segment..segment + self.grid.order]);
    }

    fn push_rotation(&self, segment: usize, out: &mut Vec<BlockId>) {
        out.extend_from_slice(&self.rotation[segment..segment + self.grid.order]);
    }
}

/// Block ids of the control nodes of an ℝ³ spline.
#[derive(Clone, Debug)]
pub struct VectorNodes {
    pub grid: KnotGrid,
    pub nodes: Arc<[BlockId]>,
}

fn gather_vec3<T: Real>(inputs: &[Input<T>]) -> [Vector3<T>; MAX_ORDER] {
    let mut out = [Vector3::zeros(); MAX_ORDER];
    for (dst, src) in out.iter_mut().zip(inputs) {
        *dst = src.vec3();
    }
    out
}

fn gather_rot<T: Real>(inputs: &[Input<T>]) -> [Matrix3<T>; MAX_ORDER] {
    let mut out = [Matrix3::zeros(); MAX_ORDER];
    for (dst, src) in out.iter_mut().zip(inputs) {
        *dst = src.rot();
    }
    out
}

/// Splits a time relative to `t0` into segment and normalized time.
fn locate<T: Real>(grid: &KnotGrid, since_t0: T) -> Option<(usize, T)> {
    grid.locate_real(since_t0).ok()
}

/// Continuous-time reprojection at the frame time shifted by `t_cam_imu`.
///
/// Blocks: `k` position nodes, `k` rotation nodes, landmark, `t_cam_imu`,
/// camera rotation and translation in the body frame.
#[derive(Clone)]
pub struct CtReprojection {
    pub spline: SplineNodes,
    /// Frame stamp relative to the spline's `t0` [s].
    pub since_t0: f64,
    pub measured: Vector2<f64>,
    pub camera: CameraModel,
    pub landmark: BlockId,
    pub t_cam_imu: BlockId,
    pub extrinsic_rotation: BlockId,
    pub extrinsic_translation: BlockId,
}

impl ResidualFn for CtReprojection {
    fn dim(&self) -> usize {
        2
    }

    fn blocks(&self, params: &Parameters) -> Option<Vec<BlockId>> {
        let t = self.since_t0 + params.scalar(self.t_cam_imu);
        let (i, _) = self.spline.grid.locate_offset(t).ok()?;
        let mut b = Vec::with_capacity(2 * self.spline.grid.order + 4);
        self.spline.push_position(i, &mut b);
        self.spline.push_rotation(i, &mut b);
        b.extend([
            self.landmark,
            self.t_cam_imu,
            self.extrinsic_rotation,
            self.extrinsic_translation,
        ]);
        Some(b)
    }

    fn eval<T: Real>(&self, inputs: &[Input<T>], out: &mut [T]) -> bool {
        let k = self.spline.grid.order;
        let t_ic = inputs[2 * k + 1].scalar();
        let Some((_, u)) = locate(&self.spline.grid, t_ic + self.since_t0) else {
            return false;
        };
        let inv_dt = 1.0 / self.spline.grid.dt();
        let pos = gather_vec3(&inputs[..k]);
        let rot = gather_rot(&inputs[k..2 * k]);
        let p_wb = eval_r3(&pos[..k], u, inv_dt, 0);
        let (r_wb, _) = eval_so3(&rot[..k], u, inv_dt, false);
        let pc = camera_point(
            &r_wb,
            &p_wb,
            &inputs[2 * k + 2].rot(),
            &inputs[2 * k + 3].vec3(),
            &inputs[2 * k].vec3(),
        );
        reprojection(&self.camera, &pc, &self.measured.map(T::from_f64), out);
        true
    }
}

/// Accelerometer residual `Rᵀ(p̈ + g) − ā + b_a`.
///
/// Blocks: `k` position nodes, `k` rotation nodes, gravity, 4 bias nodes.
pub struct CtAccel {
    pub spline: SplineNodes,
    pub segment: usize,
    pub u: f64,
    pub bias: VectorNodes,
    pub bias_segment: usize,
    pub bias_u: f64,
    pub measured: Vector3<f64>,
    pub gravity: BlockId,
}

impl CtAccel {
    /// Locates the sample at `t_ns` in both splines.
    pub fn new(
        spline: SplineNodes,
        bias: VectorNodes,
        t_ns: i64,
        measured: Vector3<f64>,
        gravity: BlockId,
    ) -> Result<Self> {
        let (segment, u) = spline.grid.locate_offset(spline.grid.offset_of(t_ns))?;
        let (bias_segment, bias_u) = bias.grid.locate_offset(bias.grid.offset_of(t_ns))?;
        Ok(CtAccel {
            spline,
            segment,
            u,
            bias,
            bias_segment,
            bias_u,
            measured,
            gravity,
        })
    }
}

impl ResidualFn for CtAccel {
    fn dim(&self) -> usize {
        3
    }

    fn blocks(&self, _: &Parameters) -> Option<Vec<BlockId>> {
        let k = self.spline.grid.order;
        let mut b = Vec::with_capacity(2 * k + 1 + self.bias.grid.order);
        self.spline.push_position(self.segment, &mut b);
        self.spline.push_rotation(self.segment, &mut b);
        b.push(self.gravity);
        let kb = self.bias.grid.order;
        b.extend_from_slice(&self.bias.nodes[self.bias_segment..self.bias_segment + kb]);
        Some(b)
    }

    fn eval<T: Real>(&self, inputs: &[Input<T>], out: &mut [T]) -> bool {
        let k = self.spline.grid.order;
        let kb = self.bias.grid.order;
        let inv_dt = 1.0 / self.spline.grid.dt();
        let pos = gather_vec3(&inputs[..k]);
        let rot = gather_rot(&inputs[k..2 * k]);
        let u = T::from_f64(self.u);
        let acc = eval_r3(&pos[..k], u, inv_dt, 2);
        let (r, _) = eval_so3(&rot[..k], u, inv_dt, false);
        let g = inputs[2 * k].vec3();
        let bias_nodes = gather_vec3(&inputs[2 * k + 1..2 * k + 1 + kb]);
        let b = eval_r3(
            &bias_nodes[..kb],
            T::from_f64(self.bias_u),
            1.0 / self.bias.grid.dt(),
            0,
        );
        let e = r.transpose() * (acc + g) - lift3::<T>(&self.measured) + b;
        out.copy_from_slice(e.as_slice());
        true
    }
}

/// Gyroscope residual `ω − ω̄ + b_ω`.
///
/// Blocks: `k` rotation nodes, 4 bias nodes.
pub struct CtGyro {
    pub spline: SplineNodes,
    pub segment: usize,
    pub u: f64,
    pub bias: VectorNodes,
    pub bias_segment: usize,
    pub bias_u: f64,
    pub measured: Vector3<f64>,
}

impl CtGyro {
    pub fn new(
        spline: SplineNodes,
        bias: VectorNodes,
        t_ns: i64,
        measured: Vector3<f64>,
    ) -> Result<Self> {
        let (segment, u) = spline.grid.locate_offset(spline.grid.offset_of(t_ns))?;
        let (bias_segment, bias_u) = bias.grid.locate_offset(bias.grid.offset_of(t_ns))?;
        Ok(CtGyro {
            spline,
            segment,
            u,
            bias,
            bias_segment,
            bias_u,
            measured,
        })
    }
}

impl ResidualFn for CtGyro {
    fn dim(&self) -> usize {
        3
    }

    fn blocks(&self, _: &Parameters) -> Option<Vec<BlockId>> {
        let kb = self.bias.grid.order;
        let mut b = Vec::with_capacity(self.spline.grid.order + kb);
        self.spline.push_rotation(self.segment, &mut b);
        b.extend_from_slice(&self.bias.nodes[self.bias_segment..self.bias_segment + kb]);
        Some(b)
    }

    fn eval<T: Real>(&self, inputs: &[Input<T>], out: &mut [T]) -> bool {
        let k = self.spline.grid.order;
        let kb = self.bias.grid.order;
        let rot = gather_rot(&inputs[..k]);
        let (_, w) = eval_so3(&rot[..k], T::from_f64(self.u), 1.0 / self.spline.grid.dt(), true);
        let bias_nodes = gather_vec3(&inputs[k..k + kb]);
        let b = eval_r3(
            &bias_nodes[..kb],
            T::from_f64(self.bias_u),
            1.0 / self.bias.grid.dt(),
            0,
        );
        let e = w - lift3::<T>(&self.measured) + b;
        out.copy_from_slice(e.as_slice());
        true
    }
}

/// Rate of a bias spline, `ḃ(t)`. Blocks: the segment's nodes.
pub struct BiasRate {
    pub bias: VectorNodes,
    pub segment: usize,
    pub u: f64,
}

impl BiasRate {
    /// Rate residual at `since_t0` seconds after the bias grid's `t0`.
    pub fn new(bias: VectorNodes, since_t0: f64) -> Result<Self> {
        let (segment, u) = bias.grid.locate_offset(since_t0)?;
        Ok(BiasRate { bias, segment, u })
    }

    /// Times (relative to `t0`) and spacing of the `count − 1` rate
    /// residuals of a bias grid, spread uniformly over its domain.
    pub fn schedule(grid: &KnotGrid) -> (Vec<f64>, f64) {
        let f = grid.count - 1;
        let len = grid.segments() as f64 * grid.dt();
        let h = len / f as f64;
        ((0..f).map(|i| (i as f64 + 0.5) * h).collect(), h)
    }
}

impl ResidualFn for BiasRate {
    fn dim(&self) -> usize {
        3
    }

    fn blocks(&self, _: &Parameters) -> Option<Vec<BlockId>> {
        let k = self.bias.grid.order;
        Some(self.bias.nodes[self.segment..self.segment + k].to_vec())
    }

    fn eval<T: Real>(&self, inputs: &[Input<T>], out: &mut [T]) -> bool {
        let k = self.bias.grid.order;
        let nodes = gather_vec3(&inputs[..k]);
        let e = eval_r3(&nodes[..k], T::from_f64(self.u), 1.0 / self.bias.grid.dt(), 1);
        out.copy_from_slice(e.as_slice());
        true
    }
}

/// Continuous-time GPS residual `p̄ − (p + R·p_ant)` at the fix time shifted
/// by `t_gps_imu`.
///
/// Blocks: `k` position nodes, `k` rotation nodes, `t_gps_imu`, antenna.
pub struct CtGps {
    pub spline: SplineNodes,
    pub since_t0: f64,
    pub measured: Vector3<f64>,
    pub t_gps_imu: BlockId,
    pub antenna: BlockId,
}

impl ResidualFn for CtGps {
    fn dim(&self) -> usize {
        3
    }

    fn blocks(&self, params: &Parameters) -> Option<Vec<BlockId>> {
        let t = self.since_t0 + params.scalar(self.t_gps_imu);
        let (i, _) = self.spline.grid.locate_offset(t).ok()?;
        let mut b = Vec::with_capacity(2 * self.spline.grid.order + 2);
        self.spline.push_position(i, &mut b);
        self.spline.push_rotation(i, &mut b);
        b.extend([self.t_gps_imu, self.antenna]);
        Some(b)
    }

    fn eval<T: Real>(&self, inputs: &[Input<T>], out: &mut [T]) -> bool {
        let k = self.spline.grid.order;
        let t_ig = inputs[2 * k].scalar();
        let Some((_, u)) = locate(&self.spline.grid, t_ig + self.since_t0) else {
            return false;
        };
        let inv_dt = 1.0 / self.spline.grid.dt();
        let pos = gather_vec3(&inputs[..k]);
        let rot = gather_rot(&inputs[k..2 * k]);
        let p = eval_r3(&pos[..k], u, inv_dt, 0);
        let (r, _) = eval_so3(&rot[..k], u, inv_dt, false);
        let e = lift3::<T>(&self.measured) - (p + r * inputs[2 * k + 1].vec3());
        out.copy_from_slice(e.as_slice());
        true
    }
}

/// Discrete-time reprojection of a feature shifted along its image velocity:
/// `z̄ − t_cam_imu·v − π(·)`.
///
/// Blocks: body rotation, body position, landmark, camera rotation and
/// translation, and `t_cam_imu` when the feature velocity is known.
pub struct DtReprojection {
    pub measured: Vector2<f64>,
    pub velocity: Option<Vector2<f64>>,
    pub camera: CameraModel,
    pub rotation: BlockId,
    pub position: BlockId,
    pub landmark: BlockId,
    pub extrinsic_rotation: BlockId,
    pub extrinsic_translation: BlockId,
    pub t_cam_imu: BlockId,
}

/// Moves a feature observed at the capture time to the frame stamp,
/// assuming constant image velocity over the offset.
pub fn shift_feature<T: Real>(z: &Vector2<T>, velocity: &Vector2<T>, t_offset: T) -> Vector2<T> {
    z + velocity * t_offset
}

impl ResidualFn for DtReprojection {
    fn dim(&self) -> usize {
        2
    }

    fn blocks(&self, _: &Parameters) -> Option<Vec<BlockId>> {
        let mut b = vec![
            self.rotation,
            self.position,
            self.landmark,
            self.extrinsic_rotation,
            self.extrinsic_translation,
        ];
        if self.velocity.is_some() {
            b.push(self.t_cam_imu);
        }
        Some(b)
    }

    fn eval<T: Real>(&self, inputs: &[Input<T>], out: &mut [T]) -> bool {
        let mut z = self.measured.map(T::from_f64);
        if let Some(v) = &self.velocity {
            // The pose is at the stamp; the feature was seen t_cam_imu later.
            z = shift_feature(&z, &v.map(T::from_f64), -inputs[5].scalar());
        }
        let pc = camera_point(
            &inputs[0].rot(),
            &inputs[1].vec3(),
            &inputs[3].rot(),
            &inputs[4].vec3(),
            &inputs[2].vec3(),
        );
        reprojection(&self.camera, &pc, &z, out);
        true
    }
}

/// Discrete-time GPS residual with the body pose interpolated (linear
/// position, slerp rotation) between the states bracketing the shifted fix.
///
/// Blocks: rotation and position of state `k`, then of `k + 1`,
/// `t_gps_imu`, antenna.
pub struct DtGps {
    pub stamps: Arc<[i64]>,
    pub rotations: Arc<[BlockId]>,
    pub positions: Arc<[BlockId]>,
    pub t_ns: i64,
    pub measured: Vector3<f64>,
    pub t_gps_imu: BlockId,
    pub antenna: BlockId,
}

impl DtGps {
    /// Bracketing state `k` and the fraction `α` for a shifted fix time.
    fn bracket(&self, t_ig: f64) -> Option<usize> {
        let n = self.stamps.len();
        if n < 2 {
            return None;
        }
        let first = self.stamps[0];
        let rel = |i: usize| (self.stamps[i] - first) as f64 * 1e-9;
        let t = (self.t_ns - first) as f64 * 1e-9 + t_ig;
        if t < 0.0 || t > rel(n - 1) {
            return None;
        }
        let k = self.stamps.partition_point(|s| (s - first) as f64 * 1e-9 <= t);
        Some(k.clamp(1, n - 1) - 1)
    }

    fn alpha<T: Real>(&self, k: usize, t_ig: T) -> T {
        let span = (self.stamps[k + 1] - self.stamps[k]) as f64 * 1e-9;
        (t_ig + (self.t_ns - self.stamps[k]) as f64 * 1e-9) / span
    }
}

impl ResidualFn for DtGps {
    fn dim(&self) -> usize {
        3
    }

    fn blocks(&self, params: &Parameters) -> Option<Vec<BlockId>> {
        let k = self.bracket(params.scalar(self.t_gps_imu))?;
        Some(vec![
            self.rotations[k],
            self.positions[k],
            self.rotations[k + 1],
            self.positions[k + 1],
            self.t_gps_imu,
            self.antenna,
        ])
    }

    fn eval<T: Real>(&self, inputs: &[Input<T>], out: &mut [T]) -> bool {
        let t_ig = inputs[4].scalar();
        let Some(k) = self.bracket(t_ig.value()) else {
            return false;
        };
        let a = self.alpha(k, t_ig);
        let (ra, pa) = (inputs[0].rot(), inputs[1].vec3());
        let (rb, pb) = (inputs[2].rot(), inputs[3].vec3());
        let r = ra * lie::exp(&(lie::log(&(ra.transpose() * rb)) * a));
        let p = pa + (pb - pa) * a;
        let e = lift3::<T>(&self.measured) - (p + r * inputs[5].vec3());
        out.copy_from_slice(e.as_slice());
        true
    }
}

/// Continuous-time state: pose spline, landmarks, calibration, gravity and
/// bias splines.
#[derive(Clone, Debug, PartialEq)]
pub struct CtState {
    pub trajectory: Trajectory,
    pub landmarks: BTreeMap<u64, Vector3<f64>>,
    pub t_cam_imu: f64,
    /// Camera pose in the body frame.
    pub cam_in_body: Pose,
    pub t_gps_imu: f64,
    pub p_antenna_body: Vector3<f64>,
    pub gravity: Vector3<f64>,
    pub bias_accel: SplineR3,
    pub bias_gyro: SplineR3,
}

/// One discrete-time state per camera frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DtFrameState {
    pub t_ns: i64,
    pub pose: Pose,
    pub velocity: Vector3<f64>,
    pub bias_accel: Vector3<f64>,
    pub bias_gyro: Vector3<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DtState {
    pub frames: Vec<DtFrameState>,
    pub landmarks: BTreeMap<u64, Vector3<f64>>,
    pub t_cam_imu: f64,
    pub cam_in_body: Pose,
    pub t_gps_imu: f64,
    pub p_antenna_body: Vector3<f64>,
}

impl DtState {
    pub fn validate(&self) -> Result<()> {
        if self.frames.windows(2).any(|w| w[1].t_ns <= w[0].t_ns) {
            return Err(Error::Data("discrete states are not strictly increasing in time".into()));
        }
        Ok(())
    }

    /// Body pose at `t_ns` by linear/slerp interpolation, clamped at the ends.
    pub fn pose_at(&self, t_ns: i64) -> Option<Pose> {
        let poses: Vec<(i64, Pose)> = self.frames.iter().map(|f| (f.t_ns, f.pose)).collect();
        if poses.is_empty() {
            return None;
        }
        Some(crate::init::interpolate_pose(&poses, t_ns))
    }
}
