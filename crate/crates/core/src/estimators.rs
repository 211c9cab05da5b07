//! Full-batch estimation in continuous time (pose splines) and discrete time
//! (one state per camera frame), from initialization to the final solve.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init::{
    align_to_world, extrapolate_poses, fit_spline_to_poses, fit_trajectory, imu_scale_bootstrap,
    umeyama, AlignOptions, BootstrapOptions, FitOptions, Sim3Transform, OFFSET_BOUND,
};
use crate::lie::Pose;
use crate::metrics::{evaluate, pair_with_trajectory, Alignment, Metrics};
use crate::preint::{bias_walk_weight, BiasWalk, ImuBias, ImuNoise, PreintResidual, PreintegratedImu};
use crate::residuals::{
    BiasRate, CtAccel, CtGps, CtGyro, CtReprojection, CtState, DtFrameState, DtGps, DtReprojection,
    DtState, SplineNodes, VectorNodes,
};
use crate::sim::{
    default_gravity, CameraModel, Frame, MeasurementSet, NoiseSpec, SensorRig, SfmReconstruction,
    NS_PER_S,
};
use crate::solver::{solve, AutoDiff, BlockId, FactorWeight, Parameters, Problem, SolveReport, SolverOptions};
use crate::spline::{KnotGrid, SplineR3, SplineSO3, Trajectory, MAX_ORDER};

/// Which sensor streams enter the cost.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Sensors {
    pub vision: bool,
    pub imu: bool,
    pub gps: bool,
}

impl Default for Sensors {
    fn default() -> Self {
        Sensors {
            vision: true,
            imu: true,
            gps: true,
        }
    }
}

impl Sensors {
    pub fn validate(&self) -> Result<()> {
        if (self.vision as u8 + self.imu as u8 + self.gps as u8) < 2 {
            return Err(Error::invalid(format!(
                "sensor set {self} uses fewer than two modalities"
            )));
        }
        Ok(())
    }
}

impl fmt::Display for Sensors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = [(self.vision, "V"), (self.imu, "I"), (self.gps, "G")]
            .into_iter()
            .filter_map(|(on, n)| on.then_some(n))
            .collect();
        write!(f, "{}", if names.is_empty() { "-".to_string() } else { names.join("+") })
    }
}

/// Parses `V+I+G`, `vig`, `v,g` and similar.
impl FromStr for Sensors {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut out = Sensors {
            vision: false,
            imu: false,
            gps: false,
        };
        for c in s.chars().filter(|c| !matches!(c, '+' | ',' | ' ')) {
            match c.to_ascii_lowercase() {
                'v' => out.vision = true,
                'i' => out.imu = true,
                'g' => out.gps = true,
                _ => return Err(Error::invalid(format!("unknown sensor '{c}' in '{s}'"))),
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CtConfig {
    pub spline_order: usize,
    pub node_hz: f64,
    pub bias_node_hz: f64,
    pub estimate_t_cam_imu: bool,
    pub estimate_t_gps_imu: bool,
    pub estimate_antenna: bool,
    pub estimate_extrinsics: bool,
    pub estimate_gravity: bool,
    /// Set from the run configuration, not serialized with the mode options.
    #[serde(skip)]
    pub sensors: Sensors,
    /// Spline coverage beyond the first and last measurement [s].
    pub margin: f64,
    /// Huber threshold on whitened reprojection residuals.
    pub huber: Option<f64>,
    pub max_iter: usize,
}

impl Default for CtConfig {
    fn default() -> Self {
        CtConfig {
            spline_order: 6,
            node_hz: 10.0,
            bias_node_hz: 1.0,
            estimate_t_cam_imu: true,
            estimate_t_gps_imu: true,
            estimate_antenna: false,
            estimate_extrinsics: false,
            estimate_gravity: true,
            sensors: Sensors::default(),
            margin: 0.05,
            huber: None,
            max_iter: 50,
        }
    }
}

impl CtConfig {
    pub fn validate(&self) -> Result<()> {
        self.sensors.validate()?;
        let k = self.spline_order;
        if !(2..=MAX_ORDER).contains(&k) {
            return Err(Error::invalid(format!("spline order {k} outside 2..={MAX_ORDER}")));
        }
        if self.sensors.imu && k < 4 {
            return Err(Error::invalid(format!(
                "spline order {k} has no continuous acceleration; IMU residuals need order 4 or more"
            )));
        }
        if !(self.node_hz > 0.0) || !(self.bias_node_hz > 0.0) {
            return Err(Error::invalid("node frequencies must be positive"));
        }
        if !(self.margin >= 0.0) || self.max_iter == 0 {
            return Err(Error::invalid("margin must be non-negative and max_iter positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DtConfig {
    pub estimate_t_cam_imu: bool,
    pub estimate_t_gps_imu: bool,
    pub estimate_antenna: bool,
    pub estimate_extrinsics: bool,
    #[serde(skip)]
    pub sensors: Sensors,
    pub gravity: Vector3<f64>,
    /// Bias change that triggers re-preintegration [m/s², rad/s].
    pub reintegrate_accel: f64,
    pub reintegrate_gyro: f64,
    pub max_reintegrations: usize,
    pub huber: Option<f64>,
    pub max_iter: usize,
}

impl Default for DtConfig {
    fn default() -> Self {
        DtConfig {
            estimate_t_cam_imu: true,
            estimate_t_gps_imu: true,
            estimate_antenna: false,
            estimate_extrinsics: false,
            sensors: Sensors::default(),
            gravity: default_gravity(),
            reintegrate_accel: 0.05,
            reintegrate_gyro: 5e-3,
            max_reintegrations: 3,
            huber: None,
            max_iter: 50,
        }
    }
}

impl DtConfig {
    pub fn validate(&self) -> Result<()> {
        self.sensors.validate()?;
        if !(self.reintegrate_accel > 0.0) || !(self.reintegrate_gyro > 0.0) {
            return Err(Error::invalid("re-preintegration thresholds must be positive"));
        }
        if self.max_iter == 0 {
            return Err(Error::invalid("max_iter must be positive"));
        }
        Ok(())
    }
}

fn secs_to_ns(s: f64) -> i64 {
    (s * NS_PER_S as f64).round() as i64
}

fn offset_block(params: &mut Parameters, v: f64, fixed: bool) -> BlockId {
    params.add_scalar(v, fixed, Some((-OFFSET_BOUND, OFFSET_BOUND)))
}

/// Fixes free blocks that no factor touches, so the normal matrix has no
/// empty rows.
fn fix_unreferenced(problem: &mut Problem) {
    let used: BTreeSet<BlockId> = problem
        .factors()
        .iter()
        .filter_map(|f| f.blocks(&problem.params))
        .flatten()
        .collect();
    for id in 0..problem.params.len() {
        if !used.contains(&id) {
            problem.params.set_fixed(id, true);
        }
    }
}

/// Last observation time of every landmark.
fn last_seen(frames: &[Frame]) -> BTreeMap<u64, i64> {
    let mut out = BTreeMap::new();
    for f in frames {
        for o in &f.observations {
            out.insert(o.landmark, f.t_ns);
        }
    }
    out
}

/// Image velocity of every observation from its own track: backward
/// difference to the previous observation, forward difference for the first,
/// `None` for single observations.
pub fn feature_velocities(frames: &[Frame]) -> Vec<Vec<Option<Vector2<f64>>>> {
    let mut tracks: BTreeMap<u64, Vec<(usize, usize)>> = BTreeMap::new();
    for (k, f) in frames.iter().enumerate() {
        for (j, o) in f.observations.iter().enumerate() {
            tracks.entry(o.landmark).or_default().push((k, j));
        }
    }
    let mut out: Vec<Vec<Option<Vector2<f64>>>> =
        frames.iter().map(|f| vec![None; f.observations.len()]).collect();
    let obs = |(k, j): (usize, usize)| (frames[k].t_ns, frames[k].observations[j].pixel);
    for track in tracks.values() {
        for (i, &(k, j)) in track.iter().enumerate() {
            let (a, b) = match i {
                0 if track.len() > 1 => (track[0], track[1]),
                0 => continue,
                _ => (track[i - 1], track[i]),
            };
            let (ta, za) = obs(a);
            let (tb, zb) = obs(b);
            out[k][j] = Some((zb - za) / ((tb - ta) as f64 / NS_PER_S as f64));
        }
    }
    out
}

/// Rejects IMU streams with a gap longer than the camera frame interval or
/// that do not cover the frames.
pub fn check_imu_coverage(meas: &MeasurementSet) -> Result<()> {
    if meas.imu.len() < 2 {
        return Err(Error::data("fewer than two IMU samples"));
    }
    let mut intervals: Vec<i64> = meas.frames.windows(2).map(|w| w[1].t_ns - w[0].t_ns).collect();
    intervals.sort_unstable();
    if let Some(&frame_dt) = intervals.get(intervals.len() / 2) {
        for w in meas.imu.windows(2) {
            let gap = w[1].t_ns - w[0].t_ns;
            if gap > frame_dt {
                return Err(Error::Data(format!(
                    "IMU gap of {:.3} s between {} ns and {} ns exceeds the frame interval {:.3} s",
                    gap as f64 * 1e-9,
                    w[0].t_ns,
                    w[1].t_ns,
                    frame_dt as f64 * 1e-9
                )));
            }
        }
    }
    if let (Some(first), Some(last)) = (meas.frames.first(), meas.frames.last()) {
        let (a, b) = (meas.imu[0].t_ns, meas.imu[meas.imu.len() - 1].t_ns);
        if first.t_ns < a || last.t_ns > b {
            return Err(Error::Data(format!(
                "IMU data [{a}, {b}] ns does not cover the frames [{}, {}] ns",
                first.t_ns, last.t_ns
            )));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Continuous time

/// Block ids of a continuous-time problem.
#[derive(Clone, Debug)]
pub struct CtBlocks {
    pub spline: SplineNodes,
    pub bias_accel: VectorNodes,
    pub bias_gyro: VectorNodes,
    pub landmarks: BTreeMap<u64, BlockId>,
    pub t_cam_imu: BlockId,
    pub t_gps_imu: BlockId,
    pub extrinsic_rotation: BlockId,
    pub extrinsic_translation: BlockId,
    pub antenna: BlockId,
    pub gravity: BlockId,
}

pub struct CtProblem {
    pub problem: Problem,
    pub blocks: CtBlocks,
}

impl CtBlocks {
    pub fn read(&self, params: &Parameters) -> Result<CtState> {
        let grid = self.spline.grid;
        let position = self.spline.position.iter().map(|b| params.vec3(*b)).collect();
        let rotation = self.spline.rotation.iter().map(|b| *params.rotation(*b)).collect();
        let read_bias = |n: &VectorNodes| SplineR3::new(n.grid, n.nodes.iter().map(|b| params.vec3(*b)).collect());
        Ok(CtState {
            trajectory: Trajectory::new(SplineR3::new(grid, position)?, SplineSO3::new(grid, rotation)?)?,
            landmarks: self.landmarks.iter().map(|(id, b)| (*id, params.vec3(*b))).collect(),
            t_cam_imu: params.scalar(self.t_cam_imu),
            cam_in_body: Pose::new(
                *params.rotation(self.extrinsic_rotation),
                params.vec3(self.extrinsic_translation),
            ),
            t_gps_imu: params.scalar(self.t_gps_imu),
            p_antenna_body: params.vec3(self.antenna),
            gravity: params.vec3(self.gravity),
            bias_accel: read_bias(&self.bias_accel)?,
            bias_gyro: read_bias(&self.bias_gyro)?,
        })
    }
}

fn anchor_ns(grid: &KnotGrid, m: usize) -> i64 {
    grid.t0_ns + ((2 * m as i64 + 2 - grid.order as i64) * grid.dt_ns) / 2
}

/// Measurement span `[first, last]` on the IMU clock of the enabled streams.
fn measurement_span(meas: &MeasurementSet, sensors: &Sensors, t_cam_imu: f64, t_gps_imu: f64) -> Option<(f64, f64)> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let mut take = |first: i64, last: i64, shift: f64| {
        lo = lo.min(first as f64 * 1e-9 + shift);
        hi = hi.max(last as f64 * 1e-9 + shift);
    };
    if sensors.imu {
        if let (Some(a), Some(b)) = (meas.imu.first(), meas.imu.last()) {
            take(a.t_ns, b.t_ns, 0.0);
        }
    }
    if sensors.gps {
        if let (Some(a), Some(b)) = (meas.gps.first(), meas.gps.last()) {
            take(a.t_ns, b.t_ns, t_gps_imu);
        }
    }
    if sensors.vision {
        if let (Some(a), Some(b)) = (meas.frames.first(), meas.frames.last()) {
            take(a.t_ns, b.t_ns, t_cam_imu);
        }
    }
    (lo <= hi).then_some((lo, hi))
}

/// Assembles the continuous-time cost: reprojection, accelerometer,
/// gyroscope, GPS and bias-rate residuals over the state `init`, whose
/// splines define the knot grids.
pub fn build_ct_problem(
    meas: &MeasurementSet,
    camera: &CameraModel,
    noise: &NoiseSpec,
    init: &CtState,
    cfg: &CtConfig,
) -> Result<CtProblem> {
    cfg.validate()?;
    noise.validate()?;
    let s = cfg.sensors;
    if s.imu {
        check_imu_coverage(meas)?;
    }
    let grid = *init.trajectory.grid();
    let k = grid.order;
    if s.imu && k < 4 {
        return Err(Error::invalid(format!("order-{k} spline cannot carry IMU residuals")));
    }
    let (span_lo, span_hi) = measurement_span(meas, &s, init.t_cam_imu, init.t_gps_imu)
        .ok_or_else(|| Error::data("no measurements in the enabled streams"))?;
    let (dom_lo, dom_hi) = grid.domain();
    if span_lo - cfg.margin < dom_lo - 1e-9 || span_hi + cfg.margin >= dom_hi {
        return Err(Error::invalid(format!(
            "spline domain [{dom_lo:.3}, {dom_hi:.3}) s does not cover the measurements \
             [{span_lo:.3}, {span_hi:.3}] s with a {:.3} s margin (short by {:.3} s at the start, {:.3} s at the end)",
            cfg.margin,
            (dom_lo - (span_lo - cfg.margin)).max(0.0),
            ((span_hi + cfg.margin) - dom_hi).max(0.0),
        )));
    }
    if s.imu {
        for b in [&init.bias_accel, &init.bias_gyro] {
            let (lo, hi) = b.grid().domain();
            let (a, z) = (meas.imu[0].t_ns as f64 * 1e-9, meas.imu[meas.imu.len() - 1].t_ns as f64 * 1e-9);
            if a < lo || z >= hi {
                return Err(Error::invalid("bias spline does not cover the IMU samples"));
            }
        }
    }

    // Blocks ordered by time so that the normal matrix stays banded:
    // spline and bias nodes at their anchor times, each landmark right after
    // the last node its observations touch, global blocks last.
    enum Slot {
        Node(usize),
        BiasNode(usize),
        Landmark(u64),
    }
    let mut slots: Vec<(i64, u8, Slot)> = (0..grid.count).map(|m| (anchor_ns(&grid, m), 0, Slot::Node(m))).collect();
    let bias_grid = *init.bias_accel.grid();
    if *init.bias_gyro.grid() != bias_grid {
        return Err(Error::invalid("accelerometer and gyroscope bias splines must share a grid"));
    }
    for m in 0..bias_grid.count {
        slots.push((anchor_ns(&bias_grid, m), 1, Slot::BiasNode(m)));
    }
    let t_ic_ns = secs_to_ns(init.t_cam_imu);
    if s.vision {
        for (id, t) in last_seen(&meas.frames) {
            if init.landmarks.contains_key(&id) {
                slots.push((t + t_ic_ns + (k as i64 / 2 + 1) * grid.dt_ns, 2, Slot::Landmark(id)));
            }
        }
    }
    slots.sort_by_key(|(t, tie, _)| (*t, *tie));

    let mut params = Parameters::new();
    let mut pos = vec![0; grid.count];
    let mut rot = vec![0; grid.count];
    let mut ba = vec![0; bias_grid.count];
    let mut bg = vec![0; bias_grid.count];
    let mut landmarks = BTreeMap::new();
    let p_nodes = init.trajectory.position.nodes();
    let r_nodes = init.trajectory.rotation.nodes();
    for (_, _, slot) in &slots {
        match *slot {
            Slot::Node(m) => {
                pos[m] = params.add_vec3(&p_nodes[m], false);
                rot[m] = params.add_rotation(r_nodes[m], false);
            }
            Slot::BiasNode(m) => {
                ba[m] = params.add_vec3(&init.bias_accel.nodes()[m], !s.imu);
                bg[m] = params.add_vec3(&init.bias_gyro.nodes()[m], !s.imu);
            }
            Slot::Landmark(id) => {
                landmarks.insert(id, params.add_vec3(&init.landmarks[&id], false));
            }
        }
    }
    let t_cam_imu = offset_block(&mut params, init.t_cam_imu, !(s.vision && cfg.estimate_t_cam_imu));
    let t_gps_imu = offset_block(&mut params, init.t_gps_imu, !(s.gps && cfg.estimate_t_gps_imu));
    let fixed_ext = !(s.vision && cfg.estimate_extrinsics);
    let extrinsic_rotation = params.add_rotation(init.cam_in_body.rotation, fixed_ext);
    let extrinsic_translation = params.add_vec3(&init.cam_in_body.translation, fixed_ext);
    let antenna = params.add_vec3(&init.p_antenna_body, !(s.gps && cfg.estimate_antenna));
    let gravity = params.add_vec3(&init.gravity, !(s.imu && cfg.estimate_gravity));

    let spline = SplineNodes {
        grid,
        position: pos.into(),
        rotation: rot.into(),
    };
    let bias_accel = VectorNodes {
        grid: bias_grid,
        nodes: ba.into(),
    };
    let bias_gyro = VectorNodes {
        grid: bias_grid,
        nodes: bg.into(),
    };
    let mut problem = Problem::new(params);

    if s.vision {
        let w = FactorWeight::isotropic(2, noise.pixel_sigma);
        for f in &meas.frames {
            let since_t0 = grid.offset_of(f.t_ns);
            for o in &f.observations {
                let Some(&landmark) = landmarks.get(&o.landmark) else {
                    continue;
                };
                problem.add(
                    AutoDiff::new(
                        "reprojection",
                        CtReprojection {
                            spline: spline.clone(),
                            since_t0,
                            measured: o.pixel,
                            camera: *camera,
                            landmark,
                            t_cam_imu,
                            extrinsic_rotation,
                            extrinsic_translation,
                        },
                        w.clone(),
                    )
                    .with_huber(cfg.huber),
                );
            }
        }
    }
    if s.imu {
        let wa = FactorWeight::isotropic(3, noise.accel_sample_sigma());
        let wg = FactorWeight::isotropic(3, noise.gyro_sample_sigma());
        for sample in &meas.imu {
            problem.add(AutoDiff::new(
                "accel",
                CtAccel::new(spline.clone(), bias_accel.clone(), sample.t_ns, sample.accel, gravity)?,
                wa.clone(),
            ));
            problem.add(AutoDiff::new(
                "gyro",
                CtGyro::new(spline.clone(), bias_gyro.clone(), sample.t_ns, sample.gyro)?,
                wg.clone(),
            ));
        }
        let (times, h) = BiasRate::schedule(&bias_grid);
        for (family, nodes, rw) in [
            ("accel_bias", &bias_accel, noise.accel_bias_rw),
            ("gyro_bias", &bias_gyro, noise.gyro_bias_rw),
        ] {
            let w = FactorWeight::isotropic(3, rw / h.sqrt());
            for t in &times {
                problem.add(AutoDiff::new(family, BiasRate::new(nodes.clone(), *t)?, w.clone()));
            }
        }
    }
    if s.gps {
        let w = FactorWeight::isotropic(3, noise.gps_sigma);
        for fix in &meas.gps {
            problem.add(AutoDiff::new(
                "gps",
                CtGps {
                    spline: spline.clone(),
                    since_t0: grid.offset_of(fix.t_ns),
                    measured: fix.position,
                    t_gps_imu,
                    antenna,
                },
                w.clone(),
            ));
        }
    }
    fix_unreferenced(&mut problem);
    if !s.gps {
        // Without GPS the world frame is free: pin position and orientation
        // at the first observed node.
        let first = first_measured_time(meas, &s, &grid, init.t_cam_imu);
        let (seg, _) = grid.locate_offset(first)?;
        problem.params.set_fixed(spline.position[seg], true);
        problem.params.set_fixed(spline.rotation[seg], true);
    }
    Ok(CtProblem {
        problem,
        blocks: CtBlocks {
            spline,
            bias_accel,
            bias_gyro,
            landmarks,
            t_cam_imu,
            t_gps_imu,
            extrinsic_rotation,
            extrinsic_translation,
            antenna,
            gravity,
        },
    })
}

fn first_measured_time(meas: &MeasurementSet, s: &Sensors, grid: &KnotGrid, t_ic: f64) -> f64 {
    let mut t = f64::INFINITY;
    if s.vision {
        if let Some(f) = meas.frames.first() {
            t = t.min(grid.offset_of(f.t_ns) + t_ic);
        }
    }
    if s.imu {
        if let Some(x) = meas.imu.first() {
            t = t.min(grid.offset_of(x.t_ns));
        }
    }
    t
}

// ---------------------------------------------------------------------------
// Discrete time

/// Block ids of a discrete-time problem; velocity and bias blocks exist only
/// when the IMU is used.
#[derive(Clone, Debug)]
pub struct DtBlocks {
    pub stamps: Arc<[i64]>,
    pub rotations: Arc<[BlockId]>,
    pub positions: Arc<[BlockId]>,
    pub velocities: Vec<Option<BlockId>>,
    pub biases: Vec<Option<BlockId>>,
    pub landmarks: BTreeMap<u64, BlockId>,
    pub t_cam_imu: BlockId,
    pub t_gps_imu: BlockId,
    pub extrinsic_rotation: BlockId,
    pub extrinsic_translation: BlockId,
    pub antenna: BlockId,
}

pub struct DtProblem {
    pub problem: Problem,
    pub blocks: DtBlocks,
}

impl DtBlocks {
    /// Reads the state back; `init` supplies velocity and bias where the
    /// problem carries none.
    pub fn read(&self, params: &Parameters, init: &DtState) -> DtState {
        let frames = init
            .frames
            .iter()
            .enumerate()
            .map(|(k, f)| {
                let bias = self.biases[k].map(|b| params.vector(b).clone());
                DtFrameState {
                    t_ns: f.t_ns,
                    pose: Pose::new(*params.rotation(self.rotations[k]), params.vec3(self.positions[k])),
                    velocity: self.velocities[k].map_or(f.velocity, |b| params.vec3(b)),
                    bias_accel: bias.as_ref().map_or(f.bias_accel, |b| Vector3::new(b[0], b[1], b[2])),
                    bias_gyro: bias.as_ref().map_or(f.bias_gyro, |b| Vector3::new(b[3], b[4], b[5])),
                }
            })
            .collect();
        DtState {
            frames,
            landmarks: self.landmarks.iter().map(|(id, b)| (*id, params.vec3(*b))).collect(),
            t_cam_imu: params.scalar(self.t_cam_imu),
            cam_in_body: Pose::new(
                *params.rotation(self.extrinsic_rotation),
                params.vec3(self.extrinsic_translation),
            ),
            t_gps_imu: params.scalar(self.t_gps_imu),
            p_antenna_body: params.vec3(self.antenna),
        }
    }
}

/// Assembles the discrete-time cost: shifted-feature reprojection,
/// preintegrated IMU and bias random walk between consecutive frames, and
/// interpolated GPS.
pub fn build_dt_problem(
    meas: &MeasurementSet,
    camera: &CameraModel,
    noise: &NoiseSpec,
    init: &DtState,
    cfg: &DtConfig,
) -> Result<DtProblem> {
    cfg.validate()?;
    noise.validate()?;
    init.validate()?;
    let s = cfg.sensors;
    let n = init.frames.len();
    if n < 2 {
        return Err(Error::invalid("discrete-time estimation needs at least two states"));
    }
    if meas.frames.len() != n || meas.frames.iter().zip(&init.frames).any(|(f, x)| f.t_ns != x.t_ns) {
        return Err(Error::invalid("states must match the camera frames one to one"));
    }
    if s.imu {
        check_imu_coverage(meas)?;
    }

    // Per-frame blocks in time order; each landmark after the frame of its
    // last observation; global blocks last.
    let mut ending: BTreeMap<i64, Vec<u64>> = BTreeMap::new();
    if s.vision {
        for (id, t) in last_seen(&meas.frames) {
            if init.landmarks.contains_key(&id) {
                ending.entry(t).or_default().push(id);
            }
        }
    }
    let mut params = Parameters::new();
    let mut rotations = Vec::with_capacity(n);
    let mut positions = Vec::with_capacity(n);
    let mut velocities = Vec::with_capacity(n);
    let mut biases = Vec::with_capacity(n);
    let mut landmarks = BTreeMap::new();
    for f in &init.frames {
        rotations.push(params.add_rotation(f.pose.rotation, false));
        positions.push(params.add_vec3(&f.pose.translation, false));
        if s.imu {
            velocities.push(Some(params.add_vec3(&f.velocity, false)));
            let b = ImuBias::new(f.bias_accel, f.bias_gyro).to_array();
            biases.push(Some(params.add_vector(&b, false)));
        } else {
            velocities.push(None);
            biases.push(None);
        }
        for id in ending.get(&f.t_ns).into_iter().flatten() {
            landmarks.insert(*id, params.add_vec3(&init.landmarks[id], false));
        }
    }
    let t_cam_imu = offset_block(&mut params, init.t_cam_imu, !(s.vision && cfg.estimate_t_cam_imu));
    let t_gps_imu = offset_block(&mut params, init.t_gps_imu, !(s.gps && cfg.estimate_t_gps_imu));
    let fixed_ext = !(s.vision && cfg.estimate_extrinsics);
    let extrinsic_rotation = params.add_rotation(init.cam_in_body.rotation, fixed_ext);
    let extrinsic_translation = params.add_vec3(&init.cam_in_body.translation, fixed_ext);
    let antenna = params.add_vec3(&init.p_antenna_body, !(s.gps && cfg.estimate_antenna));
    let mut problem = Problem::new(params);

    if s.vision {
        let w = FactorWeight::isotropic(2, noise.pixel_sigma);
        let velocity = feature_velocities(&meas.frames);
        for (k, f) in meas.frames.iter().enumerate() {
            for (j, o) in f.observations.iter().enumerate() {
                let Some(&landmark) = landmarks.get(&o.landmark) else {
                    continue;
                };
                problem.add(
                    AutoDiff::new(
                        "reprojection",
                        DtReprojection {
                            measured: o.pixel,
                            velocity: velocity[k][j],
                            camera: *camera,
                            rotation: rotations[k],
                            position: positions[k],
                            landmark,
                            extrinsic_rotation,
                            extrinsic_translation,
                            t_cam_imu,
                        },
                        w.clone(),
                    )
                    .with_huber(cfg.huber),
                );
            }
        }
    }
    if s.imu {
        let imu_noise = ImuNoise::from_spec(noise);
        for k in 0..n - 1 {
            let (a, b) = (&init.frames[k], &init.frames[k + 1]);
            let bias = ImuBias::new(a.bias_accel, a.bias_gyro);
            let pim = PreintegratedImu::integrate_window(&meas.imu, a.t_ns, b.t_ns, bias, imu_noise)?;
            let weight = pim.weight()?;
            let dt = pim.dt_total;
            problem.add(AutoDiff::new(
                "imu",
                PreintResidual {
                    pim,
                    gravity: cfg.gravity,
                    blocks: [
                        rotations[k],
                        positions[k],
                        velocities[k].unwrap(),
                        biases[k].unwrap(),
                        rotations[k + 1],
                        positions[k + 1],
                        velocities[k + 1].unwrap(),
                    ],
                },
                weight,
            ));
            problem.add(AutoDiff::new(
                "bias_walk",
                BiasWalk {
                    blocks: [biases[k].unwrap(), biases[k + 1].unwrap()],
                },
                bias_walk_weight(noise.accel_bias_rw, noise.gyro_bias_rw, dt)?,
            ));
        }
    }
    let stamps: Arc<[i64]> = init.frames.iter().map(|f| f.t_ns).collect();
    let rotations: Arc<[BlockId]> = rotations.into();
    let positions: Arc<[BlockId]> = positions.into();
    if s.gps {
        let w = FactorWeight::isotropic(3, noise.gps_sigma);
        for fix in &meas.gps {
            let f = DtGps {
                stamps: stamps.clone(),
                rotations: rotations.clone(),
                positions: positions.clone(),
                t_ns: fix.t_ns,
                measured: fix.position,
                t_gps_imu,
                antenna,
            };
            // Fixes outside the frame span have no bracketing states.
            if crate::solver::ResidualFn::blocks(&f, &problem.params).is_some() {
                problem.add(AutoDiff::new("gps", f, w.clone()));
            }
        }
    }
    fix_unreferenced(&mut problem);
    if !s.gps {
        problem.params.set_fixed(rotations[0], true);
        problem.params.set_fixed(positions[0], true);
    }
    Ok(DtProblem {
        problem,
        blocks: DtBlocks {
            stamps,
            rotations,
            positions,
            velocities,
            biases,
            landmarks,
            t_cam_imu,
            t_gps_imu,
            extrinsic_rotation,
            extrinsic_translation,
            antenna,
        },
    })
}

// ---------------------------------------------------------------------------
// Pipeline

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Ct,
    Dt,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Ct => "ct",
            Mode::Dt => "dt",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ct" => Ok(Mode::Ct),
            "dt" => Ok(Mode::Dt),
            _ => Err(Error::invalid(format!("unknown mode '{s}' (ct, dt)"))),
        }
    }
}

/// What the estimators consume. The time offsets in `rig` are ignored; the
/// camera model, extrinsics and antenna lever arm are starting values, held
/// fixed unless the configuration asks to estimate them.
#[derive(Clone, Copy)]
pub struct EstimationInput<'a> {
    pub meas: &'a MeasurementSet,
    pub sfm: &'a SfmReconstruction,
    pub rig: &'a SensorRig,
    pub noise: &'a NoiseSpec,
    pub ground_truth: Option<&'a Trajectory>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineOptions {
    pub ct: CtConfig,
    pub dt: DtConfig,
    /// Alignment applied before computing trajectory errors.
    pub alignment: Alignment,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimationReport {
    pub mode: Mode,
    pub ate_p_m: Option<f64>,
    pub ate_r_deg: Option<f64>,
    pub t_cam_imu_ms: f64,
    pub t_gps_imu_ms: f64,
    pub iterations: usize,
    pub converged: bool,
    pub wall_ms: f64,
}

#[derive(Clone, Debug)]
pub enum EstimatedState {
    Ct(CtState),
    Dt(DtState),
}

#[derive(Clone, Debug)]
pub struct Estimate {
    pub state: EstimatedState,
    /// Report of the final solve.
    pub solve: SolveReport,
    pub report: EstimationReport,
    /// Body poses at the camera frame stamps.
    pub poses: Vec<(i64, Pose)>,
    pub metrics: Option<Metrics>,
    /// Cost per residual family at the solution.
    pub family_costs: BTreeMap<String, f64>,
}

/// Initial body poses at the frame stamps and landmarks, in the world frame.
#[derive(Clone, Debug)]
pub struct Initialization {
    pub poses: Vec<(i64, Pose)>,
    pub landmarks: BTreeMap<u64, Vector3<f64>>,
    pub world_from_sfm: Sim3Transform,
    pub t_gps_imu: f64,
    /// The GPS time offset is unresolved by the data and is held at zero.
    pub t_gps_unobservable: bool,
    pub p_antenna_body: Vector3<f64>,
}

const INIT_ORDER: usize = 6;
const INIT_NODE_HZ: f64 = 10.0;
const INIT_PAD_S: f64 = 0.3;

fn body_poses(cam: &[(i64, Pose)], cam_in_body: &Pose, scale: f64) -> Vec<(i64, Pose)> {
    let body_in_cam = cam_in_body.inverse();
    cam.iter()
        .map(|(t, p)| {
            let scaled = Pose::new(body_in_cam.rotation, body_in_cam.translation / scale);
            (*t, p.compose(&scaled))
        })
        .collect()
}

fn fit_g(poses: &[(i64, Pose)]) -> Result<Trajectory> {
    let padded = extrapolate_poses(poses, secs_to_ns(INIT_PAD_S), 50_000_000);
    Ok(fit_spline_to_poses(&padded, INIT_ORDER, INIT_NODE_HZ, &FitOptions::default())?.0)
}

fn lerp_gps(meas: &MeasurementSet, t_ns: i64) -> Option<Vector3<f64>> {
    let g = &meas.gps;
    let j = g.partition_point(|f| f.t_ns <= t_ns);
    if j == 0 || j == g.len() {
        return None;
    }
    let (a, b) = (&g[j - 1], &g[j]);
    let u = (t_ns - a.t_ns) as f64 / (b.t_ns - a.t_ns) as f64;
    Some(a.position + (b.position - a.position) * u)
}

/// Expresses the structure-from-motion reconstruction in the world frame:
/// Umeyama on camera positions against GPS followed by the refinement of the
/// similarity and GPS offset; without GPS, the IMU bootstrap. The antenna
/// lever arm stays at its rig value here: with heading-following, nearly
/// level motion it trades off against world yaw, scale and height.
pub fn initialize(input: &EstimationInput, sensors: &Sensors, estimate_t_gps: bool) -> Result<Initialization> {
    let cam = &input.sfm.poses;
    if cam.len() < INIT_ORDER {
        return Err(Error::data(format!("{} reconstructed camera poses are too few", cam.len())));
    }
    let cam_in_body = input.rig.t_cam_imu_pose;
    let (world_from_g, t_gps_imu, t_gps_unobservable, p_antenna_body) = if sensors.gps {
        let (src, dst): (Vec<_>, Vec<_>) = cam
            .iter()
            .filter_map(|(t, p)| lerp_gps(input.meas, *t).map(|g| (p.translation, g)))
            .unzip();
        let rough = umeyama(&src, &dst).map_err(|e| e.in_stage("umeyama alignment"))?;
        let traj_g = fit_g(&body_poses(cam, &cam_in_body, rough.s)).map_err(|e| e.in_stage("spline fit"))?;
        let aligned = align_to_world(
            &traj_g,
            &input.meas.gps,
            &rough,
            &AlignOptions {
                gps_sigma: input.noise.gps_sigma.max(1e-3),
                antenna: input.rig.p_antenna_body,
                estimate_antenna: false,
                estimate_time_offset: estimate_t_gps,
                max_iter: 50,
            },
        )?;
        if estimate_t_gps && aligned.low_information {
            log::warn!(
                "GPS time offset unresolved (information {:.3e} /s^2); holding it at zero",
                aligned.t_gps_information
            );
            let fixed = align_to_world(
                &traj_g,
                &input.meas.gps,
                &rough,
                &AlignOptions {
                    gps_sigma: input.noise.gps_sigma.max(1e-3),
                    antenna: input.rig.p_antenna_body,
                    estimate_antenna: false,
                    estimate_time_offset: false,
                    max_iter: 50,
                },
            )?;
            (fixed.world_from_g, 0.0, true, fixed.p_antenna)
        } else {
            (aligned.world_from_g, aligned.t_gps_imu, false, aligned.p_antenna)
        }
    } else {
        let traj_g = fit_g(&body_poses(cam, &cam_in_body, 1.0)).map_err(|e| e.in_stage("spline fit"))?;
        let boot = imu_scale_bootstrap(
            &traj_g,
            &input.meas.imu,
            &BootstrapOptions {
                accel_sample_sigma: input.noise.accel_sample_sigma().max(1e-3),
                ..BootstrapOptions::default()
            },
        )
        .map_err(|e| e.in_stage("imu bootstrap"))?;
        (boot.world_from_g, 0.0, false, input.rig.p_antenna_body)
    };
    let poses = body_poses(cam, &cam_in_body, world_from_g.s)
        .iter()
        .map(|(t, p)| (*t, world_from_g.transform_pose(p)))
        .collect();
    let landmarks = input
        .sfm
        .landmarks
        .iter()
        .map(|(id, l)| (*id, world_from_g.apply(l)))
        .collect();
    Ok(Initialization {
        poses,
        landmarks,
        world_from_sfm: world_from_g,
        t_gps_imu,
        t_gps_unobservable,
        p_antenna_body,
    })
}

/// Initial continuous-time state on the configured grids.
pub fn initial_ct_state(input: &EstimationInput, init: &Initialization, cfg: &CtConfig) -> Result<CtState> {
    let (lo, hi) = measurement_span(input.meas, &cfg.sensors, 0.0, init.t_gps_imu)
        .ok_or_else(|| Error::data("no measurements in the enabled streams"))?;
    let margin = cfg.margin.max(1e-3);
    let start = secs_to_ns(lo - margin);
    let end = secs_to_ns(hi + margin);
    let dt_ns = secs_to_ns(1.0 / cfg.node_hz);
    let span = (end - start) as f64 * 1e-9;
    if cfg.node_hz * span < cfg.spline_order as f64 {
        return Err(Error::invalid(format!(
            "{:.1} s at {} Hz gives fewer nodes than the order {}",
            span, cfg.node_hz, cfg.spline_order
        )));
    }
    let grid = KnotGrid::covering(start, end, dt_ns, cfg.spline_order)?;
    let (dlo, dhi) = grid.domain();
    let samples: Vec<(i64, Pose)> = extrapolate_poses(&init.poses, secs_to_ns(margin + 0.5), 50_000_000)
        .into_iter()
        .filter(|(t, _)| {
            let s = *t as f64 * 1e-9;
            s >= dlo && s < dhi
        })
        .collect();
    let frame_hz = {
        let n = init.poses.len() as f64;
        let dur = (init.poses[init.poses.len() - 1].0 - init.poses[0].0) as f64 * 1e-9;
        (n - 1.0) / dur.max(1e-9)
    };
    let densify = ((cfg.node_hz / frame_hz).ceil() as usize).min(4);
    let (trajectory, _) = fit_trajectory(
        grid,
        &samples,
        &FitOptions {
            densify,
            ..FitOptions::default()
        },
    )?;
    let bias_dt = secs_to_ns(1.0 / cfg.bias_node_hz);
    let bias_grid = KnotGrid::covering(
        grid.t0_ns,
        grid.t0_ns + grid.segments() as i64 * grid.dt_ns,
        bias_dt,
        4,
    )?;
    Ok(CtState {
        trajectory,
        landmarks: init.landmarks.clone(),
        t_cam_imu: 0.0,
        cam_in_body: input.rig.t_cam_imu_pose,
        t_gps_imu: init.t_gps_imu,
        p_antenna_body: init.p_antenna_body,
        gravity: default_gravity(),
        bias_accel: SplineR3::constant(bias_grid, Vector3::zeros()),
        bias_gyro: SplineR3::constant(bias_grid, Vector3::zeros()),
    })
}

/// Initial discrete-time state: poses at the frame stamps, central-difference
/// velocities, zero biases.
pub fn initial_dt_state(input: &EstimationInput, init: &Initialization) -> Result<DtState> {
    let poses = &init.poses;
    if poses.len() != input.meas.frames.len()
        || poses.iter().zip(&input.meas.frames).any(|((t, _), f)| *t != f.t_ns)
    {
        return Err(Error::data("reconstructed camera poses do not match the frame stamps"));
    }
    let n = poses.len();
    let velocity = |k: usize| {
        let (a, b) = (k.saturating_sub(1), (k + 1).min(n - 1));
        let dt = (poses[b].0 - poses[a].0) as f64 * 1e-9;
        (poses[b].1.translation - poses[a].1.translation) / dt
    };
    Ok(DtState {
        frames: (0..n)
            .map(|k| DtFrameState {
                t_ns: poses[k].0,
                pose: poses[k].1,
                velocity: velocity(k),
                bias_accel: Vector3::zeros(),
                bias_gyro: Vector3::zeros(),
            })
            .collect(),
        landmarks: init.landmarks.clone(),
        t_cam_imu: 0.0,
        cam_in_body: input.rig.t_cam_imu_pose,
        t_gps_imu: init.t_gps_imu,
        p_antenna_body: init.p_antenna_body,
    })
}

fn solver_options(max_iter: usize) -> SolverOptions {
    SolverOptions {
        max_iter,
        ..SolverOptions::default()
    }
}

/// Wall-clock timer; reads zero where the platform has no clock.
struct Stopwatch(#[cfg(not(target_arch = "wasm32"))] std::time::Instant);

impl Stopwatch {
    fn start() -> Self {
        Stopwatch(
            #[cfg(not(target_arch = "wasm32"))]
            std::time::Instant::now(),
        )
    }

    fn elapsed_ms(&self) -> f64 {
        #[cfg(not(target_arch = "wasm32"))]
        return self.0.elapsed().as_secs_f64() * 1e3;
        #[cfg(target_arch = "wasm32")]
        return 0.0;
    }
}

fn finish(
    input: &EstimationInput,
    mode: Mode,
    state: EstimatedState,
    solve: SolveReport,
    iterations: usize,
    poses: Vec<(i64, Pose)>,
    family_costs: BTreeMap<String, f64>,
    alignment: Alignment,
    started: Stopwatch,
) -> Result<Estimate> {
    let (t_ic, t_ig) = match &state {
        EstimatedState::Ct(s) => (s.t_cam_imu, s.t_gps_imu),
        EstimatedState::Dt(s) => (s.t_cam_imu, s.t_gps_imu),
    };
    let metrics = match input.ground_truth {
        Some(gt) => Some(evaluate(&pair_with_trajectory(&poses, gt), alignment).map_err(|e| e.in_stage("evaluation"))?),
        None => None,
    };
    let report = EstimationReport {
        mode,
        ate_p_m: metrics.map(|m| m.ate_p_m),
        ate_r_deg: metrics.map(|m| m.ate_r_deg),
        t_cam_imu_ms: t_ic * 1e3,
        t_gps_imu_ms: t_ig * 1e3,
        iterations,
        converged: solve.converged(),
        wall_ms: started.elapsed_ms(),
    };
    Ok(Estimate {
        state,
        solve,
        report,
        poses,
        metrics,
        family_costs,
    })
}

/// Continuous-time pipeline: initialization, spline fit, problem
/// construction and solve.
pub fn run_ct(input: &EstimationInput, cfg: &CtConfig, alignment: Alignment) -> Result<Estimate> {
    let started = Stopwatch::start();
    cfg.validate()?;
    input.meas.validate().map_err(|e| e.in_stage("input validation"))?;
    let init = initialize(input, &cfg.sensors, cfg.estimate_t_gps_imu)
        .map_err(|e| e.in_stage("initialization"))?;
    let cfg = &CtConfig {
        estimate_t_gps_imu: cfg.estimate_t_gps_imu && !init.t_gps_unobservable,
        ..*cfg
    };
    let state = initial_ct_state(input, &init, cfg).map_err(|e| e.in_stage("spline initialization"))?;
    let mut ct = build_ct_problem(input.meas, &input.rig.camera, input.noise, &state, cfg)
        .map_err(|e| e.in_stage("problem construction"))?;
    let solve_report = solve(&mut ct.problem, &solver_options(cfg.max_iter)).map_err(|e| e.in_stage("solve"))?;
    let state = ct.blocks.read(&ct.problem.params)?;
    let poses = input
        .meas
        .frames
        .iter()
        .filter_map(|f| {
            let (p, r) = state.trajectory.pose_ns(f.t_ns).ok()?;
            Some((f.t_ns, Pose::new(r, p)))
        })
        .collect();
    let costs = ct.problem.family_costs();
    let iterations = solve_report.iterations;
    finish(input, Mode::Ct, EstimatedState::Ct(state), solve_report, iterations, poses, costs, alignment, started)
}

fn bias_moved(a: &DtState, b: &DtState, cfg: &DtConfig) -> bool {
    a.frames.iter().zip(&b.frames).any(|(x, y)| {
        (x.bias_accel - y.bias_accel).amax() > cfg.reintegrate_accel
            || (x.bias_gyro - y.bias_gyro).amax() > cfg.reintegrate_gyro
    })
}

/// Discrete-time pipeline. The problem is rebuilt, and the IMU
/// re-preintegrated, while the biases move beyond the configured thresholds.
pub fn run_dt(input: &EstimationInput, cfg: &DtConfig, alignment: Alignment) -> Result<Estimate> {
    let started = Stopwatch::start();
    cfg.validate()?;
    input.meas.validate().map_err(|e| e.in_stage("input validation"))?;
    let init = initialize(input, &cfg.sensors, cfg.estimate_t_gps_imu)
        .map_err(|e| e.in_stage("initialization"))?;
    let cfg = &DtConfig {
        estimate_t_gps_imu: cfg.estimate_t_gps_imu && !init.t_gps_unobservable,
        ..*cfg
    };
    let mut state = initial_dt_state(input, &init).map_err(|e| e.in_stage("state initialization"))?;
    let mut iterations = 0;
    let mut round = 0;
    loop {
        let mut dt = build_dt_problem(input.meas, &input.rig.camera, input.noise, &state, cfg)
            .map_err(|e| e.in_stage("problem construction"))?;
        let report = solve(&mut dt.problem, &solver_options(cfg.max_iter)).map_err(|e| e.in_stage("solve"))?;
        iterations += report.iterations;
        let next = dt.blocks.read(&dt.problem.params, &state);
        let again = cfg.sensors.imu && round < cfg.max_reintegrations && bias_moved(&state, &next, cfg);
        state = next;
        round += 1;
        if !again {
            let poses = state.frames.iter().map(|f| (f.t_ns, f.pose)).collect();
            let costs = dt.problem.family_costs();
            return finish(input, Mode::Dt, EstimatedState::Dt(state), report, iterations, poses, costs, alignment, started);
        }
        log::debug!("biases moved beyond the linearization threshold, re-preintegrating");
    }
}

pub fn run(input: &EstimationInput, mode: Mode, opts: &PipelineOptions) -> Result<Estimate> {
    match mode {
        Mode::Ct => run_ct(input, &opts.ct, opts.alignment),
        Mode::Dt => run_dt(input, &opts.dt, opts.alignment),
    }
}
