//! Absolute trajectory error after timestamp association.

use std::str::FromStr;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init::umeyama;
use crate::lie::Pose;
use crate::spline::Trajectory;

/// Largest timestamp difference accepted when matching poses.
pub const ASSOCIATION_TOL_NS: i64 = 1_000_000;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PosePair {
    pub t_ns: i64,
    pub est: Pose,
    pub gt: Pose,
}

/// Matches each estimate to the nearest unused ground-truth pose within
/// `tol_ns`. Both inputs must be sorted by time.
pub fn associate(est: &[(i64, Pose)], gt: &[(i64, Pose)], tol_ns: i64) -> Result<Vec<PosePair>> {
    for (name, s) in [("estimate", est), ("ground truth", gt)] {
        if s.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::Data(format!("{name} timestamps are not strictly increasing")));
        }
    }
    let mut pairs = Vec::new();
    let mut next_free = 0;
    for &(t, pose) in est {
        let j = gt.partition_point(|(tg, _)| *tg < t);
        let best = [j.checked_sub(1), Some(j)]
            .into_iter()
            .flatten()
            .filter(|&i| i >= next_free && i < gt.len())
            .min_by_key(|&i| (gt[i].0 - t).abs());
        if let Some(i) = best {
            if (gt[i].0 - t).abs() <= tol_ns {
                pairs.push(PosePair {
                    t_ns: t,
                    est: pose,
                    gt: gt[i].1,
                });
                next_free = i + 1;
            }
        }
    }
    Ok(pairs)
}

/// Pairs each estimate with the ground-truth spline sampled at its stamp.
/// Stamps outside the spline are skipped.
pub fn pair_with_trajectory(est: &[(i64, Pose)], gt: &Trajectory) -> Vec<PosePair> {
    est.iter()
        .filter_map(|&(t_ns, pose)| {
            let (p, r) = gt.pose_ns(t_ns).ok()?;
            Some(PosePair {
                t_ns,
                est: pose,
                gt: Pose::new(r, p),
            })
        })
        .collect()
}

fn nonempty(pairs: &[PosePair]) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::invalid("no associated poses"));
    }
    Ok(())
}

/// Positional RMSE [m].
pub fn ate_p(pairs: &[PosePair]) -> Result<f64> {
    nonempty(pairs)?;
    let sq: f64 = pairs
        .iter()
        .map(|p| (p.est.translation - p.gt.translation).norm_squared())
        .sum();
    Ok((sq / pairs.len() as f64).sqrt())
}

/// Rotational RMSE [deg].
pub fn ate_r(pairs: &[PosePair]) -> Result<f64> {
    nonempty(pairs)?;
    let sq: f64 = pairs
        .iter()
        .map(|p| (p.est.rotation.inverse() * p.gt.rotation).log().0.norm_squared())
        .sum();
    Ok((sq / pairs.len() as f64).sqrt().to_degrees())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Alignment {
    #[default]
    None,
    Se3,
    Sim3,
}

impl FromStr for Alignment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Alignment::None),
            "se3" => Ok(Alignment::Se3),
            "sim3" => Ok(Alignment::Sim3),
            _ => Err(Error::invalid(format!("unknown alignment '{s}' (none, se3, sim3)"))),
        }
    }
}

/// Applies the estimate-to-ground-truth transform that best aligns the
/// positions.
pub fn align(pairs: &[PosePair], how: Alignment) -> Result<Vec<PosePair>> {
    if how == Alignment::None {
        return Ok(pairs.to_vec());
    }
    let src: Vec<Vector3<f64>> = pairs.iter().map(|p| p.est.translation).collect();
    let dst: Vec<Vector3<f64>> = pairs.iter().map(|p| p.gt.translation).collect();
    let mut sim = umeyama(&src, &dst)?;
    if how == Alignment::Se3 {
        let n = pairs.len() as f64;
        let mu_src = src.iter().sum::<Vector3<f64>>() / n;
        let mu_dst = dst.iter().sum::<Vector3<f64>>() / n;
        sim.s = 1.0;
        sim.t = mu_dst - sim.r.matrix() * mu_src;
    }
    Ok(pairs
        .iter()
        .map(|p| PosePair {
            est: sim.transform_pose(&p.est),
            ..*p
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub ate_p_m: f64,
    pub ate_r_deg: f64,
    pub n_pairs: usize,
}

pub fn evaluate(pairs: &[PosePair], how: Alignment) -> Result<Metrics> {
    let aligned = align(pairs, how)?;
    Ok(Metrics {
        ate_p_m: ate_p(&aligned)?,
        ate_r_deg: ate_r(&aligned)?,
        n_pairs: aligned.len(),
    })
}
