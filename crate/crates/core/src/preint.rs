//! IMU preintegration between consecutive frames and the discrete-time
//! inertial residuals.

use nalgebra::{DMatrix, Matrix3, SMatrix, SVector, Vector3};

use crate::error::{Error, Result};
use crate::jet::Real;
use crate::lie::{self, Rotation};
use crate::sim::{ImuSample, NoiseSpec, NS_PER_S};
use crate::solver::{BlockId, FactorWeight, Input, Parameters, ResidualFn};

pub type Matrix9 = SMatrix<f64, 9, 9>;
pub type Matrix9x6 = SMatrix<f64, 9, 6>;

/// Accelerometer and gyroscope bias.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ImuBias {
    pub accel: Vector3<f64>,
    pub gyro: Vector3<f64>,
}

impl ImuBias {
    pub fn new(accel: Vector3<f64>, gyro: Vector3<f64>) -> Self {
        ImuBias { accel, gyro }
    }

    pub fn to_array(&self) -> [f64; 6] {
        let (a, g) = (self.accel, self.gyro);
        [a.x, a.y, a.z, g.x, g.y, g.z]
    }
}

/// Relative motion `ΔR, Δv, Δp` over `[t_start, t_end]`, with covariance
/// (order `δφ, δv, δp`) and first-order bias Jacobians (columns `b_a, b_ω`).
#[derive(Clone, Debug, PartialEq)]
pub struct PreintegratedImu {
    pub t_start_ns: i64,
    pub t_end_ns: i64,
    pub dr: Rotation,
    pub dv: Vector3<f64>,
    pub dp: Vector3<f64>,
    pub dt_total: f64,
    pub covariance: Matrix9,
    pub j_bias: Matrix9x6,
    pub bias_lin: ImuBias,
}

/// Per-sample noise standard deviations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImuNoise {
    pub accel: f64,
    pub gyro: f64,
}

impl ImuNoise {
    pub fn from_spec(spec: &NoiseSpec) -> Self {
        ImuNoise {
            accel: spec.accel_sample_sigma(),
            gyro: spec.gyro_sample_sigma(),
        }
    }
}

fn lerp_sample(a: &ImuSample, b: &ImuSample, t_ns: i64) -> ImuSample {
    let u = (t_ns - a.t_ns) as f64 / (b.t_ns - a.t_ns) as f64;
    ImuSample {
        t_ns,
        gyro: a.gyro + (b.gyro - a.gyro) * u,
        accel: a.accel + (b.accel - a.accel) * u,
    }
}

/// Samples covering exactly `[t0, t1]`: interior samples plus interpolated
/// samples at both ends.
pub fn slice_window(imu: &[ImuSample], t0_ns: i64, t1_ns: i64) -> Result<Vec<ImuSample>> {
    if t1_ns < t0_ns {
        return Err(Error::invalid("preintegration window is reversed"));
    }
    if imu.windows(2).any(|w| w[1].t_ns <= w[0].t_ns) {
        return Err(Error::Data("IMU timestamps not strictly increasing".into()));
    }
    let (Some(first), Some(last)) = (imu.first(), imu.last()) else {
        return Err(Error::invalid("no IMU samples"));
    };
    if t0_ns < first.t_ns || t1_ns > last.t_ns {
        return Err(Error::Data(format!(
            "IMU data [{}, {}] ns does not cover [{t0_ns}, {t1_ns}] ns",
            first.t_ns, last.t_ns
        )));
    }
    let at = |t: i64| {
        let j = imu.partition_point(|s| s.t_ns <= t);
        if j > 0 && imu[j - 1].t_ns == t {
            imu[j - 1]
        } else {
            lerp_sample(&imu[j - 1], &imu[j], t)
        }
    };
    let mut out = vec![at(t0_ns)];
    out.extend(imu.iter().filter(|s| s.t_ns > t0_ns && s.t_ns < t1_ns).copied());
    if t1_ns > t0_ns {
        out.push(at(t1_ns));
    }
    Ok(out)
}

/// Right Jacobian of SO(3).
pub fn right_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let th = phi.norm();
    let k = lie::hat(phi);
    if th < 1e-5 {
        return Matrix3::identity() - k * 0.5 + k * k / 6.0;
    }
    let th2 = th * th;
    Matrix3::identity() - k * ((1.0 - th.cos()) / th2) + k * k * ((th - th.sin()) / (th2 * th))
}

impl PreintegratedImu {
    pub fn identity(t_ns: i64, bias_lin: ImuBias) -> Self {
        PreintegratedImu {
            t_start_ns: t_ns,
            t_end_ns: t_ns,
            dr: Rotation::identity(),
            dv: Vector3::zeros(),
            dp: Vector3::zeros(),
            dt_total: 0.0,
            covariance: Matrix9::zeros(),
            j_bias: Matrix9x6::zeros(),
            bias_lin,
        }
    }

    /// Midpoint integration of `samples` (sorted, first and last at the
    /// window edges) with measurements corrected by `bias_lin`.
    pub fn integrate(samples: &[ImuSample], bias_lin: ImuBias, noise: ImuNoise) -> Result<Self> {
        let Some(first) = samples.first() else {
            return Err(Error::invalid("preintegration needs at least one sample"));
        };
        if samples.windows(2).any(|w| w[1].t_ns <= w[0].t_ns) {
            return Err(Error::Data("IMU timestamps not strictly increasing".into()));
        }
        let mut pim = PreintegratedImu::identity(first.t_ns, bias_lin);
        for w in samples.windows(2) {
            pim.step(&w[0], &w[1], noise);
        }
        Ok(pim)
    }

    /// Integrates `imu` over `[t0, t1]`, interpolating at the edges.
    pub fn integrate_window(
        imu: &[ImuSample],
        t0_ns: i64,
        t1_ns: i64,
        bias_lin: ImuBias,
        noise: ImuNoise,
    ) -> Result<Self> {
        Self::integrate(&slice_window(imu, t0_ns, t1_ns)?, bias_lin, noise)
    }

    fn step(&mut self, a: &ImuSample, b: &ImuSample, noise: ImuNoise) {
        let dt = (b.t_ns - a.t_ns) as f64 / NS_PER_S as f64;
        let bias = self.bias_lin;
        let w = 0.5 * (a.gyro + b.gyro) - bias.gyro;
        let phi = w * dt;
        let d = lie::exp(&phi);
        let jr = right_jacobian(&phi);
        let r0 = *self.dr.matrix();
        let r1 = r0 * d;
        let fa = a.accel - bias.accel;
        let fb = b.accel - bias.accel;
        let acc = 0.5 * (r0 * fa + r1 * fb);

        // Bias Jacobians of the discrete scheme.
        let jrg0: Matrix3<f64> = self.j_bias.fixed_view::<3, 3>(0, 3).into();
        let jrg1 = d.transpose() * jrg0 - jr * dt;
        let dacc_dba = -(r0 + r1) * 0.5;
        let dacc_dbg = -(r0 * lie::hat(&fa) * jrg0 + r1 * lie::hat(&fb) * jrg1) * 0.5;
        let jva: Matrix3<f64> = self.j_bias.fixed_view::<3, 3>(3, 0).into();
        let jvg: Matrix3<f64> = self.j_bias.fixed_view::<3, 3>(3, 3).into();
        let jpa: Matrix3<f64> = self.j_bias.fixed_view::<3, 3>(6, 0).into();
        let jpg: Matrix3<f64> = self.j_bias.fixed_view::<3, 3>(6, 3).into();
        self.j_bias.fixed_view_mut::<3, 3>(0, 3).copy_from(&jrg1);
        self.j_bias
            .fixed_view_mut::<3, 3>(3, 0)
            .copy_from(&(jva + dacc_dba * dt));
        self.j_bias
            .fixed_view_mut::<3, 3>(3, 3)
            .copy_from(&(jvg + dacc_dbg * dt));
        self.j_bias
            .fixed_view_mut::<3, 3>(6, 0)
            .copy_from(&(jpa + jva * dt + dacc_dba * (0.5 * dt * dt)));
        self.j_bias
            .fixed_view_mut::<3, 3>(6, 3)
            .copy_from(&(jpg + jvg * dt + dacc_dbg * (0.5 * dt * dt)));

        // Error-state propagation, order (δφ, δv, δp).
        let f_mid = 0.5 * (fa + d * fb);
        let mut aa = Matrix9::identity();
        aa.fixed_view_mut::<3, 3>(0, 0).copy_from(&d.transpose());
        let skew = r0 * lie::hat(&f_mid);
        aa.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-skew * dt));
        aa.fixed_view_mut::<3, 3>(6, 0)
            .copy_from(&(-skew * (0.5 * dt * dt)));
        aa.fixed_view_mut::<3, 3>(6, 3)
            .copy_from(&(Matrix3::identity() * dt));
        let mut bb = SMatrix::<f64, 9, 6>::zeros();
        bb.fixed_view_mut::<3, 3>(0, 3).copy_from(&(jr * dt));
        bb.fixed_view_mut::<3, 3>(3, 0).copy_from(&(r0 * dt));
        bb.fixed_view_mut::<3, 3>(6, 0)
            .copy_from(&(r0 * (0.5 * dt * dt)));
        let q = SVector::<f64, 6>::new(
            noise.accel.powi(2),
            noise.accel.powi(2),
            noise.accel.powi(2),
            noise.gyro.powi(2),
            noise.gyro.powi(2),
            noise.gyro.powi(2),
        );
        let cov = aa * self.covariance * aa.transpose()
            + bb * SMatrix::<f64, 6, 6>::from_diagonal(&q) * bb.transpose();
        self.covariance = (cov + cov.transpose()) * 0.5;

        self.dp += self.dv * dt + acc * (0.5 * dt * dt);
        self.dv += acc * dt;
        self.dr = Rotation::from_matrix_unchecked(r1);
        self.dt_total += dt;
        self.t_end_ns = b.t_ns;
    }

    /// Composition with a window that starts where this one ends.
    pub fn append(&self, next: &PreintegratedImu) -> Result<Self> {
        if next.t_start_ns != self.t_end_ns {
            return Err(Error::invalid("preintegration windows are not adjacent"));
        }
        let r = *self.dr.matrix();
        let mut out = self.clone();
        out.dp = self.dp + self.dv * next.dt_total + r * next.dp;
        out.dv = self.dv + r * next.dv;
        out.dr = Rotation::from_matrix_unchecked(r * next.dr.matrix());
        out.dt_total = self.dt_total + next.dt_total;
        out.t_end_ns = next.t_end_ns;
        // Covariance and bias Jacobians of the concatenation.
        let mut a = Matrix9::identity();
        a.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&next.dr.matrix().transpose());
        a.fixed_view_mut::<3, 3>(3, 0)
            .copy_from(&(-r * lie::hat(&next.dv)));
        a.fixed_view_mut::<3, 3>(6, 0)
            .copy_from(&(-r * lie::hat(&next.dp)));
        a.fixed_view_mut::<3, 3>(6, 3)
            .copy_from(&(Matrix3::identity() * next.dt_total));
        let mut b = Matrix9::zeros();
        b.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
        b.fixed_view_mut::<3, 3>(3, 3).copy_from(&r);
        b.fixed_view_mut::<3, 3>(6, 6).copy_from(&r);
        out.covariance = a * self.covariance * a.transpose() + b * next.covariance * b.transpose();
        out.j_bias = a * self.j_bias + b * next.j_bias;
        Ok(out)
    }

    /// `(ΔR, Δv, Δp)` corrected to first order for a bias `bias`.
    pub fn corrected(&self, bias: &ImuBias) -> (Rotation, Vector3<f64>, Vector3<f64>) {
        let dba = bias.accel - self.bias_lin.accel;
        let dbg = bias.gyro - self.bias_lin.gyro;
        let j = &self.j_bias;
        let jrg: Matrix3<f64> = j.fixed_view::<3, 3>(0, 3).into();
        let jva: Matrix3<f64> = j.fixed_view::<3, 3>(3, 0).into();
        let jvg: Matrix3<f64> = j.fixed_view::<3, 3>(3, 3).into();
        let jpa: Matrix3<f64> = j.fixed_view::<3, 3>(6, 0).into();
        let jpg: Matrix3<f64> = j.fixed_view::<3, 3>(6, 3).into();
        (
            self.dr.retract(&(jrg * dbg)),
            self.dv + jva * dba + jvg * dbg,
            self.dp + jpa * dba + jpg * dbg,
        )
    }

    /// Square-root information of the covariance.
    pub fn weight(&self) -> Result<FactorWeight> {
        FactorWeight::from_covariance(&DMatrix::from_column_slice(9, 9, self.covariance.as_slice()))
    }
}

/// Nine-dimensional inertial residual (rotation, velocity, position) between
/// states `i` and `j` with gravity `g` (world, pointing up, as sensed at rest).
///
/// Blocks: `R_i, p_i, v_i, b_i` (6-vector `b_a, b_ω`), `R_j, p_j, v_j`.
pub struct PreintResidual {
    pub pim: PreintegratedImu,
    pub gravity: Vector3<f64>,
    pub blocks: [BlockId; 7],
}

impl ResidualFn for PreintResidual {
    fn dim(&self) -> usize {
        9
    }

    fn blocks(&self, _: &Parameters) -> Option<Vec<BlockId>> {
        Some(self.blocks.to_vec())
    }

    fn eval<T: Real>(&self, inputs: &[Input<T>], out: &mut [T]) -> bool {
        let ri = inputs[0].rot();
        let pi = inputs[1].vec3();
        let vi = inputs[2].vec3();
        let b = inputs[3].vector();
        let rj = inputs[4].rot();
        let pj = inputs[5].vec3();
        let vj = inputs[6].vec3();
        preint_residual(&self.pim, &self.gravity, &ri, &pi, &vi, &b, &rj, &pj, &vj, out);
        true
    }
}

/// Writes the unwhitened residual `(r_R, r_v, r_p)`.
#[allow(clippy::too_many_arguments)]
pub fn preint_residual<T: Real>(
    pim: &PreintegratedImu,
    gravity: &Vector3<f64>,
    ri: &Matrix3<T>,
    pi: &Vector3<T>,
    vi: &Vector3<T>,
    bias: &[T],
    rj: &Matrix3<T>,
    pj: &Vector3<T>,
    vj: &Vector3<T>,
    out: &mut [T],
) {
    let lin = pim.bias_lin;
    let dba = Vector3::new(bias[0] - lin.accel.x, bias[1] - lin.accel.y, bias[2] - lin.accel.z);
    let dbg = Vector3::new(bias[3] - lin.gyro.x, bias[4] - lin.gyro.y, bias[5] - lin.gyro.z);
    let j = pim.j_bias.map(T::from_f64);
    let jrg: Matrix3<T> = j.fixed_view::<3, 3>(0, 3).into();
    let jva: Matrix3<T> = j.fixed_view::<3, 3>(3, 0).into();
    let jvg: Matrix3<T> = j.fixed_view::<3, 3>(3, 3).into();
    let jpa: Matrix3<T> = j.fixed_view::<3, 3>(6, 0).into();
    let jpg: Matrix3<T> = j.fixed_view::<3, 3>(6, 3).into();
    let dt = pim.dt_total;
    let g = gravity.map(T::from_f64);
    let dr = pim.dr.matrix().map(T::from_f64) * lie::exp(&(jrg * dbg));
    let dv = pim.dv.map(T::from_f64) + jva * dba + jvg * dbg;
    let dp = pim.dp.map(T::from_f64) + jpa * dba + jpg * dbg;
    let rit = ri.transpose();
    let er = lie::log(&(dr.transpose() * rit * rj));
    let ev = rit * (vj - vi + g.map(|x| x * dt)) - dv;
    let ep = rit * (pj - pi - vi.map(|x| x * dt) + g.map(|x| x * (0.5 * dt * dt))) - dp;
    out[..3].copy_from_slice(er.as_slice());
    out[3..6].copy_from_slice(ev.as_slice());
    out[6..].copy_from_slice(ep.as_slice());
}

/// Difference of consecutive per-frame biases. Blocks: `b_{k−1}`, `b_k`.
pub struct BiasWalk {
    pub blocks: [BlockId; 2],
}

impl ResidualFn for BiasWalk {
    fn dim(&self) -> usize {
        6
    }

    fn blocks(&self, _: &Parameters) -> Option<Vec<BlockId>> {
        Some(self.blocks.to_vec())
    }

    fn eval<T: Real>(&self, inputs: &[Input<T>], out: &mut [T]) -> bool {
        let a = inputs[0].vector();
        let b = inputs[1].vector();
        for i in 0..6 {
            out[i] = b[i] - a[i];
        }
        true
    }
}

/// Weight of [`BiasWalk`] for random-walk densities over `dt` seconds.
pub fn bias_walk_weight(accel_rw: f64, gyro_rw: f64, dt: f64) -> Result<FactorWeight> {
    if !(dt > 0.0) {
        return Err(Error::invalid(format!("bias walk interval {dt} s must be positive")));
    }
    let (sa, sg) = (accel_rw * dt.sqrt(), gyro_rw * dt.sqrt());
    Ok(FactorWeight::from_sigmas(&[sa, sa, sa, sg, sg, sg]))
}

/// Whitened bias random-walk residual between consecutive frames.
pub fn bias_rw_residual_dt(
    prev: &ImuBias,
    next: &ImuBias,
    dt: f64,
    accel_rw: f64,
    gyro_rw: f64,
) -> Result<SVector<f64, 6>> {
    let w = bias_walk_weight(accel_rw, gyro_rw, dt)?;
    let d = nalgebra::DVector::from_iterator(
        6,
        next.to_array().iter().zip(prev.to_array()).map(|(b, a)| b - a),
    );
    Ok(SVector::<f64, 6>::from_iterator(w.apply(&d).iter().copied()))
}

#[cfg(test)]
mod tests;
