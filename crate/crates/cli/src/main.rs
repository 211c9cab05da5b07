use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use ctslam::estimators::{self, EstimationInput, EstimationReport, Estimate, Mode, Sensors};
use ctslam::init::{self, FitOptions};
use ctslam::io::{self, CompareRow, RunConfig};
use ctslam::lie::Pose;
use ctslam::metrics::{self, Alignment, PosePair, ASSOCIATION_TOL_NS};
use ctslam::sim::{self, Profile};
use ctslam::Error;

#[derive(Parser)]
#[command(name = "ctslam", version, about = "Continuous- and discrete-time visual-inertial-GPS estimation")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Simulation seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a dataset and write it to the output directory.
    Simulate {
        #[arg(long)]
        profile: Option<Profile>,
        /// Camera-to-IMU clock offset [ms].
        #[arg(long, allow_hyphen_values = true)]
        t_cam_imu_ms: Option<f64>,
        /// GPS-to-IMU clock offset [ms].
        #[arg(long, allow_hyphen_values = true)]
        t_gps_imu_ms: Option<f64>,
        /// Trajectory length [s].
        #[arg(long)]
        duration: Option<f64>,
    },
    /// Fit a spline to a pose CSV and resample it at the input stamps.
    Fit {
        #[arg(long)]
        poses: PathBuf,
        #[arg(long)]
        order: Option<usize>,
        #[arg(long)]
        node_hz: Option<f64>,
    },
    /// Continuous-time estimation on a dataset directory.
    EstimateCt(EstimateArgs),
    /// Discrete-time estimation on a dataset directory.
    EstimateDt(EstimateArgs),
    /// Trajectory errors of an estimate against ground truth.
    Evaluate {
        #[arg(long)]
        estimate: PathBuf,
        #[arg(long)]
        ground_truth: PathBuf,
        #[arg(long)]
        alignment: Option<Alignment>,
    },
    /// Run both estimators on simulated datasets with injected camera offsets.
    Compare {
        /// Injected camera offsets [ms], comma separated.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        offsets: Option<Vec<f64>>,
    },
}

#[derive(Args)]
struct EstimateArgs {
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Sensor streams, e.g. V+I+G or V+G.
    #[arg(long)]
    sensors: Option<Sensors>,
    #[arg(long)]
    alignment: Option<Alignment>,
}

enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

type Outcome<T = ()> = Result<T, Failure>;

fn exit_code(e: &Error) -> u8 {
    match e.root() {
        Error::Data(_) | Error::Parse { .. } | Error::Io(_) | Error::Json(_) => 2,
        _ => 3,
    }
}

fn load_config(g: &Global) -> Outcome<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::read(p).map_err(|e| match e {
            Error::InvalidArgument(m) => Failure::Usage(format!("{}: {m}", p.display())),
            other => Failure::Run(other),
        })?,
        None => RunConfig::default(),
    };
    if g.seed.is_some() {
        cfg.seed = g.seed;
    }
    if g.out.is_some() {
        cfg.out = g.out.clone();
    }
    Ok(cfg)
}

fn out_dir(cfg: &RunConfig) -> Outcome<PathBuf> {
    let dir = cfg.out.clone().ok_or_else(|| Failure::Usage("no output directory (--out)".into()))?;
    std::fs::create_dir_all(&dir).map_err(Error::from)?;
    Ok(dir)
}

fn simulate(
    mut cfg: RunConfig,
    profile: Option<Profile>,
    t_cam_imu_ms: Option<f64>,
    t_gps_imu_ms: Option<f64>,
    duration: Option<f64>,
) -> Outcome {
    if let Some(p) = profile {
        cfg.sim.trajectory.profile = p;
    }
    if let Some(ms) = t_cam_imu_ms {
        cfg.sim.rig.t_cam_imu = ms * 1e-3;
    }
    if let Some(ms) = t_gps_imu_ms {
        cfg.sim.rig.t_gps_imu = ms * 1e-3;
    }
    if let Some(d) = duration {
        cfg.sim.trajectory.duration = d;
    }
    let dir = out_dir(&cfg)?;
    let d = sim::simulate(&cfg.sim_config())?;
    io::write_dataset(&dir, &d)?;
    println!(
        "wrote {}: {} imu, {} gps, {} frames",
        dir.display(),
        d.meas.imu.len(),
        d.meas.gps.len(),
        d.meas.frames.len()
    );
    Ok(())
}

#[derive(Serialize)]
struct FitReport {
    order: usize,
    node_hz: f64,
    nodes: usize,
    iterations: usize,
    converged: bool,
    final_cost: f64,
    rms_position_m: f64,
    rms_rotation_deg: f64,
}

fn fit(cfg: RunConfig, poses: &Path, order: Option<usize>, node_hz: Option<f64>) -> Outcome {
    let dir = out_dir(&cfg)?;
    let samples = io::read_poses(poses)?;
    let order = order.unwrap_or(cfg.ct.spline_order);
    let node_hz = node_hz.unwrap_or(cfg.ct.node_hz);
    let (traj, solve) = init::fit_spline_to_poses(&samples, order, node_hz, &FitOptions::default())?;
    let mut fitted = Vec::with_capacity(samples.len());
    let (mut sp, mut sr) = (0.0, 0.0);
    for (t, pose) in &samples {
        let (p, r) = traj.pose_ns(*t)?;
        sp += (p - pose.translation).norm_squared();
        sr += r.angle_to(&pose.rotation).powi(2);
        fitted.push((*t, Pose::new(r, p)));
    }
    let n = samples.len() as f64;
    let report = FitReport {
        order,
        node_hz,
        nodes: traj.position.grid().count,
        iterations: solve.iterations,
        converged: solve.converged(),
        final_cost: solve.final_cost,
        rms_position_m: (sp / n).sqrt(),
        rms_rotation_deg: (sr / n).sqrt().to_degrees(),
    };
    io::write_poses(&dir.join("estimate.csv"), &fitted)?;
    io::write_json(&dir.join("fit.json"), &report)?;
    solve.write_log_csv(&dir.join("solver_log.csv"))?;
    println!(
        "fit {} nodes in {} iterations: rms {:.3e} m, {:.3e} deg",
        report.nodes, report.iterations, report.rms_position_m, report.rms_rotation_deg
    );
    Ok(())
}

fn write_evaluation(dir: &Path, pairs: &[PosePair], how: Alignment) -> Outcome<metrics::Metrics> {
    let m = metrics::evaluate(pairs, how)?;
    io::write_json(&dir.join("metrics.json"), &m)?;
    io::write_traj_xy(&dir.join("traj_xy.csv"), &metrics::align(pairs, how)?)?;
    Ok(m)
}

fn estimate(mut cfg: RunConfig, mode: Mode, args: EstimateArgs) -> Outcome {
    if let Some(s) = args.sensors {
        s.validate().map_err(|e| Failure::Usage(e.to_string()))?;
        cfg.sensors = s;
    }
    if let Some(a) = args.alignment {
        cfg.alignment = a;
    }
    let dataset = args
        .dataset
        .or_else(|| cfg.dataset.clone())
        .ok_or_else(|| Failure::Usage("no dataset directory (--dataset)".into()))?;
    let dir = out_dir(&cfg)?;
    let data = io::read_dataset(&dataset, &cfg.sensors)?;
    let input = EstimationInput {
        meas: &data.meas,
        sfm: &data.sfm,
        rig: &data.scene.rig,
        noise: &data.scene.noise,
        ground_truth: None,
    };
    let Estimate { solve, mut report, poses, .. } = estimators::run(&input, mode, &cfg.pipeline())?;
    io::write_poses(&dir.join("estimate.csv"), &poses)?;
    solve.write_log_csv(&dir.join("solver_log.csv"))?;
    if let Some(gt) = &data.ground_truth {
        let pairs = metrics::associate(&poses, gt, ASSOCIATION_TOL_NS)?;
        let m = write_evaluation(&dir, &pairs, cfg.alignment)?;
        report.ate_p_m = Some(m.ate_p_m);
        report.ate_r_deg = Some(m.ate_r_deg);
    }
    io::write_json(&dir.join("report.json"), &report)?;
    print_report(&report);
    if !report.converged {
        eprintln!("warning: solver stopped without converging ({:?})", solve.termination);
    }
    Ok(())
}

fn print_report(r: &EstimationReport) {
    let ate = match (r.ate_p_m, r.ate_r_deg) {
        (Some(p), Some(d)) => format!("ATE {p:.4} m / {d:.3} deg, "),
        _ => String::new(),
    };
    println!(
        "{}: {ate}t_cam_imu {:.3} ms, t_gps_imu {:.3} ms, {} iterations, converged {}",
        r.mode, r.t_cam_imu_ms, r.t_gps_imu_ms, r.iterations, r.converged
    );
}

fn evaluate(mut cfg: RunConfig, est: &Path, gt: &Path, alignment: Option<Alignment>) -> Outcome {
    if let Some(a) = alignment {
        cfg.alignment = a;
    }
    let dir = out_dir(&cfg)?;
    let pairs = metrics::associate(&io::read_poses(est)?, &io::read_poses(gt)?, ASSOCIATION_TOL_NS)?;
    let m = write_evaluation(&dir, &pairs, cfg.alignment)?;
    println!("ATE {:.4} m / {:.3} deg over {} poses", m.ate_p_m, m.ate_r_deg, m.n_pairs);
    Ok(())
}

fn compare(mut cfg: RunConfig, offsets: Option<Vec<f64>>) -> Outcome {
    if let Some(o) = offsets {
        cfg.offsets_ms = o;
        cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    }
    let dir = out_dir(&cfg)?;
    let opts = cfg.pipeline();
    let mut rows = Vec::new();
    for &offset in &cfg.offsets_ms {
        let mut sc = cfg.sim_config();
        sc.rig.t_cam_imu = offset * 1e-3;
        let d = sim::simulate(&sc)?;
        let input = EstimationInput {
            meas: &d.meas,
            sfm: &d.sfm,
            rig: &d.rig,
            noise: &d.noise,
            ground_truth: Some(&d.gt.trajectory),
        };
        for mode in [Mode::Ct, Mode::Dt] {
            let r = estimators::run(&input, mode, &opts)?.report;
            println!("offset {offset} ms, {mode}: estimated {:.3} ms", r.t_cam_imu_ms);
            rows.push(CompareRow {
                offset_true_ms: offset,
                mode,
                ate_p_m: r.ate_p_m,
                ate_r_deg: r.ate_r_deg,
                offset_est_ms: r.t_cam_imu_ms,
            });
        }
    }
    io::write_compare(&dir.join("compare.csv"), &rows)?;
    Ok(())
}

fn dispatch(cli: Cli) -> Outcome {
    let cfg = load_config(&cli.global)?;
    match cli.command {
        Command::Simulate {
            profile,
            t_cam_imu_ms,
            t_gps_imu_ms,
            duration,
        } => simulate(cfg, profile, t_cam_imu_ms, t_gps_imu_ms, duration),
        Command::Fit { poses, order, node_hz } => fit(cfg, &poses, order, node_hz),
        Command::EstimateCt(a) => estimate(cfg, Mode::Ct, a),
        Command::EstimateDt(a) => estimate(cfg, Mode::Dt, a),
        Command::Evaluate {
            estimate,
            ground_truth,
            alignment,
        } => evaluate(cfg, &estimate, &ground_truth, alignment),
        Command::Compare { offsets } => compare(cfg, offsets),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
