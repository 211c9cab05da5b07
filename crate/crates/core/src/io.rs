//! Dataset files, run configuration and result files.
//!
//! A dataset directory holds `imu.csv`, `gps.csv`, `features.csv`, `gt.csv`,
//! `sfm_poses.csv`, `sfm_landmarks.csv` and `scene.json`. Timestamps are
//! integer nanoseconds throughout.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::path::{Path, PathBuf};

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{CtConfig, DtConfig, EstimationReport, Mode, PipelineOptions, Sensors};
use crate::init::Sim3Transform;
use crate::lie::{Pose, Rotation};
use crate::metrics::{Alignment, Metrics, PosePair};
use crate::sim::{
    Frame, GpsFix, ImuSample, MeasurementSet, NoiseSpec, Observation, SensorRig, SfmReconstruction, SimConfig,
    SimDataset,
};
use crate::spline::Trajectory;

pub const IMU_FILE: &str = "imu.csv";
pub const GPS_FILE: &str = "gps.csv";
pub const FEATURES_FILE: &str = "features.csv";
pub const GT_FILE: &str = "gt.csv";
pub const SFM_POSES_FILE: &str = "sfm_poses.csv";
pub const SFM_LANDMARKS_FILE: &str = "sfm_landmarks.csv";
pub const SCENE_FILE: &str = "scene.json";

const IMU_HEADER: [&str; 7] = ["t_ns", "wx", "wy", "wz", "ax", "ay", "az"];
const GPS_HEADER: [&str; 4] = ["t_ns", "x", "y", "z"];
const FEATURES_HEADER: [&str; 5] = ["t_ns", "frame_id", "landmark_id", "u_px", "v_px"];
const POSE_HEADER: [&str; 8] = ["t_ns", "x", "y", "z", "qw", "qx", "qy", "qz"];
const LANDMARK_HEADER: [&str; 4] = ["landmark_id", "x", "y", "z"];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub imu: usize,
    pub gps: usize,
    pub frames: usize,
    pub observations: usize,
}

impl Counts {
    pub fn of(meas: &MeasurementSet) -> Self {
        Counts {
            imu: meas.imu.len(),
            gps: meas.gps.len(),
            frames: meas.frames.len(),
            observations: meas.observation_count(),
        }
    }
}

/// Contents of `scene.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub rig: SensorRig,
    pub noise: NoiseSpec,
    pub seed: u64,
    pub gravity: Vector3<f64>,
    pub counts: Counts,
    /// True landmark positions, when known.
    #[serde(default)]
    pub landmarks: BTreeMap<u64, Vector3<f64>>,
    /// True transform from the reconstruction frame to the world, when known.
    #[serde(default)]
    pub world_from_sfm: Option<Sim3Transform>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub meas: MeasurementSet,
    pub sfm: SfmReconstruction,
    pub scene: Scene,
    pub ground_truth: Option<Vec<(i64, Pose)>>,
}

fn parse_err(path: &Path, line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Reads a headed CSV, checking the header, and hands each row with its line
/// number to `row`.
fn read_csv<const N: usize>(
    path: &Path,
    header: [&str; N],
    mut row: impl FnMut(u64, [&str; N]) -> Result<()>,
) -> Result<()> {
    let file = File::open(path).map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let found = reader.headers().map_err(|e| parse_err(path, 1, e.to_string()))?.clone();
    if found.len() != N || found.iter().zip(header).any(|(a, b)| a != b) {
        return Err(parse_err(
            path,
            1,
            format!("expected header '{}', found '{}'", header.join(","), found.iter().collect::<Vec<_>>().join(",")),
        ));
    }
    let mut record = csv::StringRecord::new();
    loop {
        let line = reader.position().line();
        match reader.read_record(&mut record) {
            Ok(false) => return Ok(()),
            Ok(true) => {}
            Err(e) => return Err(parse_err(path, line, e.to_string())),
        }
        let line = record.position().map_or(line, |p| p.line());
        if record.len() != N {
            return Err(parse_err(path, line, format!("expected {N} fields, found {}", record.len())));
        }
        let fields: [&str; N] = std::array::from_fn(|i| &record[i]);
        row(line, fields)?;
    }
}

fn int<T: std::str::FromStr>(path: &Path, line: u64, name: &str, s: &str) -> Result<T> {
    s.parse().map_err(|_| parse_err(path, line, format!("{name}: '{s}' is not an integer")))
}

fn float(path: &Path, line: u64, name: &str, s: &str) -> Result<f64> {
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(parse_err(path, line, format!("{name}: '{s}' is not a finite number"))),
    }
}

fn vec3(path: &Path, line: u64, names: [&str; 3], f: [&str; 3]) -> Result<Vector3<f64>> {
    Ok(Vector3::new(
        float(path, line, names[0], f[0])?,
        float(path, line, names[1], f[1])?,
        float(path, line, names[2], f[2])?,
    ))
}

pub fn read_imu(path: &Path) -> Result<Vec<ImuSample>> {
    let mut out = Vec::new();
    read_csv(path, IMU_HEADER, |line, f| {
        out.push(ImuSample {
            t_ns: int(path, line, "t_ns", f[0])?,
            gyro: vec3(path, line, ["wx", "wy", "wz"], [f[1], f[2], f[3]])?,
            accel: vec3(path, line, ["ax", "ay", "az"], [f[4], f[5], f[6]])?,
        });
        Ok(())
    })?;
    Ok(out)
}

pub fn read_gps(path: &Path) -> Result<Vec<GpsFix>> {
    let mut out = Vec::new();
    read_csv(path, GPS_HEADER, |line, f| {
        out.push(GpsFix {
            t_ns: int(path, line, "t_ns", f[0])?,
            position: vec3(path, line, ["x", "y", "z"], [f[1], f[2], f[3]])?,
        });
        Ok(())
    })?;
    Ok(out)
}

/// Features grouped into frames; rows of one frame must be contiguous.
pub fn read_features(path: &Path) -> Result<Vec<Frame>> {
    let mut frames: Vec<Frame> = Vec::new();
    read_csv(path, FEATURES_HEADER, |line, f| {
        let t_ns: i64 = int(path, line, "t_ns", f[0])?;
        let id: u64 = int(path, line, "frame_id", f[1])?;
        let obs = Observation {
            landmark: int(path, line, "landmark_id", f[2])?,
            pixel: Vector2::new(float(path, line, "u_px", f[3])?, float(path, line, "v_px", f[4])?),
        };
        match frames.last_mut() {
            Some(last) if last.id == id => {
                if last.t_ns != t_ns {
                    return Err(parse_err(path, line, format!("frame {id} has two timestamps")));
                }
                last.observations.push(obs);
            }
            _ => {
                if frames.iter().any(|fr| fr.id == id) {
                    return Err(parse_err(path, line, format!("rows of frame {id} are not contiguous")));
                }
                frames.push(Frame {
                    t_ns,
                    id,
                    observations: vec![obs],
                });
            }
        }
        Ok(())
    })?;
    Ok(frames)
}

pub fn read_poses(path: &Path) -> Result<Vec<(i64, Pose)>> {
    let mut out = Vec::new();
    read_csv(path, POSE_HEADER, |line, f| {
        let t: i64 = int(path, line, "t_ns", f[0])?;
        let p = vec3(path, line, ["x", "y", "z"], [f[1], f[2], f[3]])?;
        let mut q = [0.0; 4];
        for (i, name) in ["qw", "qx", "qy", "qz"].iter().enumerate() {
            q[i] = float(path, line, name, f[4 + i])?;
        }
        let r = Rotation::from_quaternion_wxyz(q).map_err(|e| parse_err(path, line, e.to_string()))?;
        out.push((t, Pose::new(r, p)));
        Ok(())
    })?;
    Ok(out)
}

pub fn read_landmarks(path: &Path) -> Result<BTreeMap<u64, Vector3<f64>>> {
    let mut out = BTreeMap::new();
    read_csv(path, LANDMARK_HEADER, |line, f| {
        let id: u64 = int(path, line, "landmark_id", f[0])?;
        if out.insert(id, vec3(path, line, ["x", "y", "z"], [f[1], f[2], f[3]])?).is_some() {
            return Err(parse_err(path, line, format!("landmark {id} listed twice")));
        }
        Ok(())
    })?;
    Ok(out)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| parse_err(path, e.line() as u64, e.to_string()))
}

fn required(dir: &Path, name: &str, why: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    if !path.is_file() {
        return Err(Error::Data(format!("{} is missing ({why})", path.display())));
    }
    Ok(path)
}

/// Reads and validates a dataset directory. Files of disabled sensors may be
/// absent.
pub fn read_dataset(dir: &Path, sensors: &Sensors) -> Result<Dataset> {
    let scene: Scene = read_json(&required(dir, SCENE_FILE, "always required")?)?;
    let imu = if sensors.imu || dir.join(IMU_FILE).is_file() {
        read_imu(&required(dir, IMU_FILE, "IMU enabled")?)?
    } else {
        Vec::new()
    };
    let gps = if sensors.gps || dir.join(GPS_FILE).is_file() {
        read_gps(&required(dir, GPS_FILE, "GPS enabled")?)?
    } else {
        Vec::new()
    };
    let frames = read_features(&required(dir, FEATURES_FILE, "needed for initialization")?)?;
    let sfm = SfmReconstruction {
        poses: read_poses(&required(dir, SFM_POSES_FILE, "needed for initialization")?)?,
        landmarks: read_landmarks(&required(dir, SFM_LANDMARKS_FILE, "needed for initialization")?)?,
    };
    let ground_truth = match dir.join(GT_FILE) {
        p if p.is_file() => Some(read_poses(&p)?),
        _ => None,
    };
    let meas = MeasurementSet {
        imu,
        gps,
        frames,
        landmarks_true: scene.landmarks.clone(),
    };
    meas.validate()?;
    if let Some(gt) = &ground_truth {
        if gt.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::Data(format!("{GT_FILE} timestamps are not strictly increasing")));
        }
    }
    let found = Counts::of(&meas);
    let expected = Counts {
        imu: if meas.imu.is_empty() { 0 } else { scene.counts.imu },
        gps: if meas.gps.is_empty() { 0 } else { scene.counts.gps },
        ..scene.counts
    };
    if found != expected {
        return Err(Error::Data(format!(
            "file contents {found:?} disagree with the counts in {SCENE_FILE} {expected:?}"
        )));
    }
    Ok(Dataset {
        meas,
        sfm,
        scene,
        ground_truth,
    })
}

fn create(path: &Path) -> Result<csv::Writer<File>> {
    Ok(csv::Writer::from_writer(File::create(path)?))
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

fn write_rows<const N: usize>(path: &Path, header: [&str; N], rows: impl Iterator<Item = [String; N]>) -> Result<()> {
    let mut w = create(path)?;
    w.write_record(header).map_err(csv_io)?;
    for r in rows {
        w.write_record(&r).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

fn pose_row(t: i64, p: &Pose) -> [String; 8] {
    let q = p.rotation.to_quaternion_wxyz();
    let x = p.translation;
    [
        t.to_string(),
        x.x.to_string(),
        x.y.to_string(),
        x.z.to_string(),
        q[0].to_string(),
        q[1].to_string(),
        q[2].to_string(),
        q[3].to_string(),
    ]
}

pub fn write_poses(path: &Path, poses: &[(i64, Pose)]) -> Result<()> {
    write_rows(path, POSE_HEADER, poses.iter().map(|(t, p)| pose_row(*t, p)))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

/// Ground truth sampled at the IMU and camera stamps.
pub fn ground_truth_samples(meas: &MeasurementSet, gt: &Trajectory) -> Result<Vec<(i64, Pose)>> {
    let mut stamps: Vec<i64> = meas.imu.iter().map(|s| s.t_ns).chain(meas.frames.iter().map(|f| f.t_ns)).collect();
    stamps.sort_unstable();
    stamps.dedup();
    stamps
        .into_iter()
        .map(|t| {
            let (p, r) = gt.pose_ns(t)?;
            Ok((t, Pose::new(r, p)))
        })
        .collect()
}

/// Writes a simulated dataset in the directory layout read by
/// [`read_dataset`].
pub fn write_dataset(dir: &Path, d: &SimDataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    let m = &d.meas;
    write_rows(
        &dir.join(IMU_FILE),
        IMU_HEADER,
        m.imu.iter().map(|s| {
            [
                s.t_ns.to_string(),
                s.gyro.x.to_string(),
                s.gyro.y.to_string(),
                s.gyro.z.to_string(),
                s.accel.x.to_string(),
                s.accel.y.to_string(),
                s.accel.z.to_string(),
            ]
        }),
    )?;
    write_rows(
        &dir.join(GPS_FILE),
        GPS_HEADER,
        m.gps.iter().map(|g| {
            [
                g.t_ns.to_string(),
                g.position.x.to_string(),
                g.position.y.to_string(),
                g.position.z.to_string(),
            ]
        }),
    )?;
    write_rows(
        &dir.join(FEATURES_FILE),
        FEATURES_HEADER,
        m.frames.iter().flat_map(|f| {
            f.observations.iter().map(|o| {
                [
                    f.t_ns.to_string(),
                    f.id.to_string(),
                    o.landmark.to_string(),
                    o.pixel.x.to_string(),
                    o.pixel.y.to_string(),
                ]
            })
        }),
    )?;
    write_poses(&dir.join(GT_FILE), &ground_truth_samples(m, &d.gt.trajectory)?)?;
    write_poses(&dir.join(SFM_POSES_FILE), &d.sfm.poses)?;
    write_rows(
        &dir.join(SFM_LANDMARKS_FILE),
        LANDMARK_HEADER,
        d.sfm.landmarks.iter().map(|(id, l)| [id.to_string(), l.x.to_string(), l.y.to_string(), l.z.to_string()]),
    )?;
    write_json(
        &dir.join(SCENE_FILE),
        &Scene {
            rig: d.rig,
            noise: d.noise,
            seed: d.noise.seed,
            gravity: d.gt.gravity,
            counts: Counts::of(m),
            landmarks: m.landmarks_true.clone(),
            world_from_sfm: Some(d.world_from_sfm),
        },
    )
}

pub fn write_traj_xy(path: &Path, pairs: &[PosePair]) -> Result<()> {
    write_rows(
        path,
        ["t", "est_x", "est_y", "gt_x", "gt_y"],
        pairs.iter().map(|p| {
            [
                p.t_ns.to_string(),
                p.est.translation.x.to_string(),
                p.est.translation.y.to_string(),
                p.gt.translation.x.to_string(),
                p.gt.translation.y.to_string(),
            ]
        }),
    )
}

pub fn read_report(path: &Path) -> Result<EstimationReport> {
    read_json(path)
}

pub fn read_metrics(path: &Path) -> Result<Metrics> {
    read_json(path)
}

/// One row of the offset comparison table.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub offset_true_ms: f64,
    pub mode: Mode,
    pub ate_p_m: Option<f64>,
    pub ate_r_deg: Option<f64>,
    pub offset_est_ms: f64,
}

pub fn write_compare(path: &Path, rows: &[CompareRow]) -> Result<()> {
    let mut w = create(path)?;
    for r in rows {
        w.serialize(r).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_compare(path: &Path) -> Result<Vec<CompareRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    reader
        .deserialize()
        .map(|r| {
            r.map_err(|e: csv::Error| {
                let line = e.position().map_or(0, |p| p.line());
                parse_err(path, line, e.to_string())
            })
        })
        .collect()
}

/// Contents of a run configuration file (TOML).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    /// Dataset directory to read.
    pub dataset: Option<PathBuf>,
    /// Output directory.
    pub out: Option<PathBuf>,
    /// Overrides the simulation seed.
    pub seed: Option<u64>,
    /// Sensor streams used by either estimator.
    pub sensors: Sensors,
    /// Alignment before trajectory errors.
    pub alignment: Alignment,
    /// Injected camera offsets of `compare` [ms].
    pub offsets_ms: Vec<f64>,
    pub ct: CtConfig,
    pub dt: DtConfig,
    pub sim: SimConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mode: Mode::Ct,
            dataset: None,
            out: None,
            seed: None,
            sensors: Sensors::default(),
            alignment: Alignment::None,
            offsets_ms: vec![0.0, 10.0, 20.0],
            ct: CtConfig::default(),
            dt: DtConfig::default(),
            sim: SimConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let line = e.span().map_or(0, |s| text[..s.start.min(text.len())].lines().count().max(1));
            parse_err(path, line as u64, e.message().to_string())
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
        let cfg = Self::from_toml(&text, path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::invalid(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let opts = self.pipeline();
        opts.ct.validate()?;
        opts.dt.validate()?;
        if let Some(dir) = &self.dataset {
            if !dir.is_dir() {
                return Err(Error::Data(format!("dataset directory {} does not exist", dir.display())));
            }
        }
        if let Some(o) = self.offsets_ms.iter().find(|o| !o.is_finite() || o.abs() >= 1e3 * crate::init::OFFSET_BOUND) {
            return Err(Error::invalid(format!("injected offset {o} ms is outside the estimable range")));
        }
        Ok(())
    }

    /// Estimator options with the sensor set applied to both modes.
    pub fn pipeline(&self) -> PipelineOptions {
        PipelineOptions {
            ct: CtConfig {
                sensors: self.sensors,
                ..self.ct
            },
            dt: DtConfig {
                sensors: self.sensors,
                ..self.dt
            },
            alignment: self.alignment,
        }
    }

    /// Simulation settings with the seed override applied.
    pub fn sim_config(&self) -> SimConfig {
        let mut sim = self.sim.clone();
        if let Some(seed) = self.seed {
            sim.noise.seed = seed;
        }
        sim
    }
}
