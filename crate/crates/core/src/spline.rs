//! Uniform cumulative B-splines over ℝ³ and SO(3).
//!
//! Segment `i` of an order-`k` spline covers `[t0 + i·Δt, t0 + (i+1)·Δt)` and
//! blends control nodes `i ..= i+k-1`:
//!
//! ```text
//! x(u) = x_i + Σ_{j=1}^{k-1} λ_j(u) · (x_{i+j} − x_{i+j-1})
//! R(u) = R_i · Π_{j=1}^{k-1} Exp(λ_j(u) · Log(R_{i+j-1}ᵀ R_{i+j}))
//! ```
//!
//! with `λ_j` the cumulative uniform blending polynomials. The valid time
//! domain is the half-open interval `[t0, t0 + (count − k + 1)·Δt)`.
//!
//! Time derivatives reuse the difference vectors of the sample itself, so
//! velocity, acceleration and angular velocity cost `O(k)` Exp/Log calls.

use std::sync::OnceLock;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jet::Real;
use crate::lie::{self, Rotation};

pub const MIN_ORDER: usize = 2;
pub const MAX_ORDER: usize = 8;

const NS_PER_S: f64 = 1e9;

fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

fn factorial(n: usize) -> f64 {
    (1..=n).fold(1.0, |acc, i| acc * i as f64)
}

/// Cumulative blending matrix `M̃` of a uniform spline: row `j` holds the
/// polynomial coefficients (ascending powers of `u`) of `λ_j`.
fn compute_cumulative_matrix(k: usize) -> Vec<Vec<f64>> {
    let mut basis = vec![vec![0.0; k]; k];
    for (s, row) in basis.iter_mut().enumerate() {
        for (n, entry) in row.iter_mut().enumerate() {
            let mut sum = 0.0;
            for l in s..k {
                let sign = if (l - s) % 2 == 0 { 1.0 } else { -1.0 };
                sum += sign * binomial(k, l - s) * ((k - 1 - l) as f64).powi((k - 1 - n) as i32);
            }
            *entry = binomial(k - 1, n) / factorial(k - 1) * sum;
        }
    }
    let mut cumulative = vec![vec![0.0; k]; k];
    for j in 0..k {
        for n in 0..k {
            cumulative[j][n] = (j..k).map(|s| basis[s][n]).sum();
        }
    }
    cumulative
}

fn cumulative_matrix(k: usize) -> &'static [Vec<f64>] {
    static TABLE: OnceLock<Vec<Vec<Vec<f64>>>> = OnceLock::new();
    let table = TABLE.get_or_init(|| {
        (0..=MAX_ORDER)
            .map(|k| {
                if k < MIN_ORDER {
                    Vec::new()
                } else {
                    compute_cumulative_matrix(k)
                }
            })
            .collect()
    });
    &table[k]
}

fn check_order(order: usize) -> Result<()> {
    if !(MIN_ORDER..=MAX_ORDER).contains(&order) {
        return Err(Error::invalid(format!(
            "spline order {order} unsupported (expected {MIN_ORDER}..={MAX_ORDER})"
        )));
    }
    Ok(())
}

/// Writes `d^derivative λ_j / du^derivative` for `j = 1..k` into `out[j-1]`.
#[inline]
pub(crate) fn lambdas<T: Real>(order: usize, u: T, derivative: usize, out: &mut [T]) {
    let m = cumulative_matrix(order);
    let mut powers = [T::zero(); MAX_ORDER];
    powers[0] = T::one();
    for n in 1..order {
        powers[n] = powers[n - 1] * u;
    }
    for j in 1..order {
        let mut acc = T::zero();
        for n in derivative..order {
            let c = m[j][n];
            if c == 0.0 {
                continue;
            }
            let falling = ((n - derivative + 1)..=n).fold(1.0, |a, f| a * f as f64);
            acc += powers[n - derivative] * (c * falling);
        }
        out[j - 1] = acc;
    }
}

/// Blending coefficients at one normalized time.
///
/// `dlambda` and `ddlambda` are derivatives with respect to `u`; samplers
/// divide them by `Δt` and `Δt²`.
#[derive(Clone, Debug, PartialEq)]
pub struct BlendingCoefficients {
    pub lambda: Vec<f64>,
    pub dlambda: Vec<f64>,
    pub ddlambda: Vec<f64>,
}

pub fn blending(order: usize, u: f64) -> Result<BlendingCoefficients> {
    check_order(order)?;
    if !(0.0..1.0).contains(&u) {
        return Err(Error::invalid(format!("normalized time {u} outside [0, 1)")));
    }
    let mut out = [[0.0; MAX_ORDER]; 3];
    for (d, row) in out.iter_mut().enumerate() {
        lambdas(order, u, d, row);
    }
    let take = |row: &[f64; MAX_ORDER]| row[..order - 1].to_vec();
    Ok(BlendingCoefficients {
        lambda: take(&out[0]),
        dlambda: take(&out[1]),
        ddlambda: take(&out[2]),
    })
}

/// Uniform knot grid. Times are kept in integer nanoseconds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnotGrid {
    pub t0_ns: i64,
    pub dt_ns: i64,
    pub count: usize,
    pub order: usize,
}

impl KnotGrid {
    pub fn new(t0_ns: i64, dt_ns: i64, count: usize, order: usize) -> Result<Self> {
        check_order(order)?;
        if dt_ns <= 0 {
            return Err(Error::invalid(format!("knot spacing {dt_ns} ns must be positive")));
        }
        if count < order {
            return Err(Error::invalid(format!(
                "{count} control nodes are fewer than the order {order}"
            )));
        }
        Ok(KnotGrid {
            t0_ns,
            dt_ns,
            count,
            order,
        })
    }

    /// Smallest grid whose domain contains `[start_ns, end_ns]`.
    pub fn covering(start_ns: i64, end_ns: i64, dt_ns: i64, order: usize) -> Result<Self> {
        if end_ns < start_ns {
            return Err(Error::invalid("covering interval is reversed"));
        }
        if dt_ns <= 0 {
            return Err(Error::invalid(format!("knot spacing {dt_ns} ns must be positive")));
        }
        let segments = ((end_ns - start_ns) / dt_ns) as usize + 1;
        KnotGrid::new(start_ns, dt_ns, segments + order - 1, order)
    }

    pub fn t0(&self) -> f64 {
        self.t0_ns as f64 / NS_PER_S
    }

    pub fn dt(&self) -> f64 {
        self.dt_ns as f64 / NS_PER_S
    }

    pub fn segments(&self) -> usize {
        self.count + 1 - self.order
    }

    /// Valid sampling interval `[start, end)` in seconds.
    pub fn domain(&self) -> (f64, f64) {
        let end_ns = self.t0_ns + self.segments() as i64 * self.dt_ns;
        (self.t0(), end_ns as f64 / NS_PER_S)
    }

    pub fn contains(&self, t: f64) -> bool {
        self.locate(t).is_ok()
    }

    /// Segment index and normalized time for absolute time `t` in seconds.
    pub fn locate(&self, t: f64) -> Result<(usize, f64)> {
        self.locate_offset(t - self.t0())
    }

    /// Like [`locate`](Self::locate) for a time already relative to `t0`.
    pub fn locate_offset(&self, since_t0: f64) -> Result<(usize, f64)> {
        let mut h = since_t0 / self.dt();
        // Times that are knots up to rounding belong to the segment they start.
        let nearest = h.round();
        if (h - nearest).abs() < 1e-13 * nearest.abs().max(1.0) {
            h = nearest;
        }
        let segment = h.floor();
        if !h.is_finite() || segment < 0.0 || segment >= self.segments() as f64 {
            let (start, end) = self.domain();
            return Err(Error::OutOfDomain {
                t: self.t0() + since_t0,
                start,
                end,
            });
        }
        Ok((segment as usize, h - segment))
    }

    /// Segment and normalized time for a possibly differentiated time value.
    /// The segment is chosen from the real part.
    pub fn locate_real<T: Real>(&self, since_t0: T) -> Result<(usize, T)> {
        let (i, _) = self.locate_offset(since_t0.value())?;
        Ok((i, since_t0 * (1.0 / self.dt()) - i as f64))
    }

    /// Time at which node `m` has its largest influence (centre of its support).
    pub fn anchor_time(&self, m: usize) -> f64 {
        self.t0() + (m as f64 + 1.0 - self.order as f64 / 2.0) * self.dt()
    }

    /// Time in seconds of `t_ns` relative to `t0`, without precision loss for
    /// large absolute stamps.
    pub fn offset_of(&self, t_ns: i64) -> f64 {
        (t_ns - self.t0_ns) as f64 / NS_PER_S
    }
}

/// Free-function form of [`KnotGrid::locate`].
pub fn normalized_time(grid: &KnotGrid, t: f64) -> Result<(usize, f64)> {
    grid.locate(t)
}

/// Evaluates an ℝ³ segment from its `k` nodes. `derivative` ∈ {0, 1, 2}.
#[inline]
pub fn eval_r3<T: Real>(nodes: &[Vector3<T>], u: T, inv_dt: f64, derivative: usize) -> Vector3<T> {
    let k = nodes.len();
    let mut lam = [T::zero(); MAX_ORDER];
    lambdas(k, u, derivative, &mut lam);
    let mut out = if derivative == 0 {
        nodes[0]
    } else {
        Vector3::zeros()
    };
    for j in 1..k {
        out += (nodes[j] - nodes[j - 1]) * lam[j - 1];
    }
    match derivative {
        0 => out,
        1 => out.map(|x| x * inv_dt),
        _ => out.map(|x| x * (inv_dt * inv_dt)),
    }
}

/// Evaluates an SO(3) segment from its `k` nodes, returning the rotation and
/// the body-frame angular velocity (`Ṙ = R·[ω]ₓ`; zero unless `with_rate`).
///
/// Uses `k−1` Log and `k−1` Exp evaluations regardless of `with_rate`.
#[inline]
pub fn eval_so3<T: Real>(
    nodes: &[Matrix3<T>],
    u: T,
    inv_dt: f64,
    with_rate: bool,
) -> (Matrix3<T>, Vector3<T>) {
    let k = nodes.len();
    let mut lam = [T::zero(); MAX_ORDER];
    let mut dlam = [T::zero(); MAX_ORDER];
    lambdas(k, u, 0, &mut lam);
    if with_rate {
        lambdas(k, u, 1, &mut dlam);
    }
    let mut rot = nodes[0];
    let mut omega = Vector3::zeros();
    for j in 1..k {
        let d = lie::log(&(nodes[j - 1].transpose() * nodes[j]));
        let step = lie::exp(&(d * lam[j - 1]));
        rot *= step;
        if with_rate {
            omega = step.transpose() * omega + d * (dlam[j - 1] * inv_dt);
        }
    }
    (rot, omega)
}

fn check_finite_nodes(nodes: &[Vector3<f64>]) -> Result<()> {
    if nodes.iter().all(|n| n.iter().all(|c| c.is_finite())) {
        Ok(())
    } else {
        Err(Error::invalid("spline node has non-finite components"))
    }
}

/// Cumulative B-spline over ℝ³.
#[derive(Clone, Debug, PartialEq)]
pub struct SplineR3 {
    grid: KnotGrid,
    nodes: Vec<Vector3<f64>>,
}

impl SplineR3 {
    pub fn new(grid: KnotGrid, nodes: Vec<Vector3<f64>>) -> Result<Self> {
        if nodes.len() != grid.count {
            return Err(Error::invalid(format!(
                "{} nodes for a grid of {}",
                nodes.len(),
                grid.count
            )));
        }
        check_finite_nodes(&nodes)?;
        Ok(SplineR3 { grid, nodes })
    }

    pub fn constant(grid: KnotGrid, value: Vector3<f64>) -> Self {
        SplineR3 {
            grid,
            nodes: vec![value; grid.count],
        }
    }

    pub fn grid(&self) -> &KnotGrid {
        &self.grid
    }

    pub fn nodes(&self) -> &[Vector3<f64>] {
        &self.nodes
    }

    pub fn nodes_mut(&mut self) -> &mut [Vector3<f64>] {
        &mut self.nodes
    }

    /// Position (0), velocity (1) or acceleration (2) at absolute time `t` [s].
    pub fn sample(&self, t: f64, derivative: usize) -> Result<Vector3<f64>> {
        self.sample_offset(t - self.grid.t0(), derivative)
    }

    pub fn sample_ns(&self, t_ns: i64, derivative: usize) -> Result<Vector3<f64>> {
        self.sample_offset(self.grid.offset_of(t_ns), derivative)
    }

    /// Like [`sample`](Self::sample) with time measured from the grid origin.
    pub fn sample_offset(&self, since_t0: f64, derivative: usize) -> Result<Vector3<f64>> {
        if derivative > 2 {
            return Err(Error::invalid(format!("derivative {derivative} not supported")));
        }
        let (i, u) = self.grid.locate_offset(since_t0)?;
        let k = self.grid.order;
        Ok(eval_r3(
            &self.nodes[i..i + k],
            u,
            1.0 / self.grid.dt(),
            derivative,
        ))
    }
}

impl SplineR3 {
    /// Samples with fixed nodes at a differentiated time.
    pub fn sample_real<T: Real>(&self, since_t0: T, derivative: usize) -> Result<Vector3<T>> {
        let (i, u) = self.grid.locate_real(since_t0)?;
        let k = self.grid.order;
        let mut nodes = [Vector3::zeros(); MAX_ORDER];
        for (dst, src) in nodes.iter_mut().zip(&self.nodes[i..i + k]) {
            *dst = src.map(T::from_f64);
        }
        Ok(eval_r3(&nodes[..k], u, 1.0 / self.grid.dt(), derivative))
    }
}

/// Samples an ℝ³ spline; see [`SplineR3::sample`].
pub fn sample_r3(s: &SplineR3, t: f64, derivative: usize) -> Result<Vector3<f64>> {
    s.sample(t, derivative)
}

/// Cumulative B-spline over SO(3).
#[derive(Clone, Debug, PartialEq)]
pub struct SplineSO3 {
    grid: KnotGrid,
    nodes: Vec<Rotation>,
}

impl SplineSO3 {
    pub fn new(grid: KnotGrid, nodes: Vec<Rotation>) -> Result<Self> {
        if nodes.len() != grid.count {
            return Err(Error::invalid(format!(
                "{} nodes for a grid of {}",
                nodes.len(),
                grid.count
            )));
        }
        for n in &nodes {
            Rotation::from_matrix(*n.matrix())?;
        }
        Ok(SplineSO3 { grid, nodes })
    }

    pub fn constant(grid: KnotGrid, value: Rotation) -> Self {
        SplineSO3 {
            grid,
            nodes: vec![value; grid.count],
        }
    }

    pub fn grid(&self) -> &KnotGrid {
        &self.grid
    }

    pub fn nodes(&self) -> &[Rotation] {
        &self.nodes
    }

    pub fn nodes_mut(&mut self) -> &mut [Rotation] {
        &mut self.nodes
    }

    fn window(&self, since_t0: f64, with_rate: bool) -> Result<(Matrix3<f64>, Vector3<f64>)> {
        let (i, u) = self.grid.locate_offset(since_t0)?;
        let k = self.grid.order;
        let mut mats = [Matrix3::zeros(); MAX_ORDER];
        for (dst, src) in mats.iter_mut().zip(&self.nodes[i..i + k]) {
            *dst = *src.matrix();
        }
        Ok(eval_so3(&mats[..k], u, 1.0 / self.grid.dt(), with_rate))
    }

    pub fn sample(&self, t: f64) -> Result<Rotation> {
        self.sample_offset(t - self.grid.t0())
    }

    pub fn sample_ns(&self, t_ns: i64) -> Result<Rotation> {
        self.sample_offset(self.grid.offset_of(t_ns))
    }

    /// Like [`sample`](Self::sample) with time measured from the grid origin.
    pub fn sample_offset(&self, since_t0: f64) -> Result<Rotation> {
        let (r, _) = self.window(since_t0, false)?;
        Ok(Rotation::from_matrix_unchecked(r))
    }

    /// Body-frame angular velocity [rad/s]. Requires order ≥ 3.
    pub fn angular_velocity(&self, t: f64) -> Result<Vector3<f64>> {
        Ok(self.sample_with_rate(t)?.1)
    }

    /// Rotation and body-frame angular velocity from one pass over the window.
    pub fn sample_with_rate(&self, t: f64) -> Result<(Rotation, Vector3<f64>)> {
        if self.grid.order < 3 {
            return Err(Error::invalid("angular velocity needs spline order ≥ 3"));
        }
        let (r, w) = self.window(t - self.grid.t0(), true)?;
        Ok((Rotation::from_matrix_unchecked(r), w))
    }
}

impl SplineSO3 {
    /// Samples with fixed nodes at a differentiated time.
    pub fn sample_real<T: Real>(&self, since_t0: T) -> Result<Matrix3<T>> {
        let (i, u) = self.grid.locate_real(since_t0)?;
        let k = self.grid.order;
        let mut mats = [Matrix3::zeros(); MAX_ORDER];
        for (dst, src) in mats.iter_mut().zip(&self.nodes[i..i + k]) {
            *dst = src.matrix().map(T::from_f64);
        }
        Ok(eval_so3(&mats[..k], u, 1.0 / self.grid.dt(), false).0)
    }
}

pub fn sample_so3(s: &SplineSO3, t: f64) -> Result<Rotation> {
    s.sample(t)
}

pub fn angular_velocity(s: &SplineSO3, t: f64) -> Result<Vector3<f64>> {
    s.angular_velocity(t)
}

/// Position and orientation splines sharing one knot grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub position: SplineR3,
    pub rotation: SplineSO3,
}

impl Trajectory {
    pub fn new(position: SplineR3, rotation: SplineSO3) -> Result<Self> {
        if position.grid() != rotation.grid() {
            return Err(Error::invalid("position and rotation splines use different grids"));
        }
        Ok(Trajectory { position, rotation })
    }

    pub fn grid(&self) -> &KnotGrid {
        self.position.grid()
    }

    pub fn pose(&self, t: f64) -> Result<(Vector3<f64>, Rotation)> {
        Ok((self.position.sample(t, 0)?, self.rotation.sample(t)?))
    }

    pub fn pose_ns(&self, t_ns: i64) -> Result<(Vector3<f64>, Rotation)> {
        Ok((
            self.position.sample_ns(t_ns, 0)?,
            self.rotation.sample_ns(t_ns)?,
        ))
    }

    pub fn to_json(&self) -> SplineJson {
        let g = self.grid();
        SplineJson {
            order: g.order,
            t0_ns: g.t0_ns,
            dt_ns: g.dt_ns,
            positions: self.position.nodes().iter().map(|p| [p.x, p.y, p.z]).collect(),
            rotations: self
                .rotation
                .nodes()
                .iter()
                .map(|r| r.to_quaternion_wxyz())
                .collect(),
        }
    }

    pub fn from_json(json: &SplineJson) -> Result<Self> {
        let grid = KnotGrid::new(json.t0_ns, json.dt_ns, json.positions.len(), json.order)?;
        let positions = json
            .positions
            .iter()
            .map(|p| Vector3::new(p[0], p[1], p[2]))
            .collect();
        let rotations = json
            .rotations
            .iter()
            .map(|q| Rotation::from_quaternion_wxyz(*q))
            .collect::<Result<Vec<_>>>()?;
        Trajectory::new(
            SplineR3::new(grid, positions)?,
            SplineSO3::new(grid, rotations)?,
        )
    }
}

/// Checkpoint format of a trajectory spline pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplineJson {
    pub order: usize,
    pub t0_ns: i64,
    pub dt_ns: i64,
    pub positions: Vec<[f64; 3]>,
    /// Unit quaternions, `[w, x, y, z]`.
    pub rotations: Vec<[f64; 4]>,
}
