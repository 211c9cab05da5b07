use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

use super::params::{BlockId, BlockValue, Parameters};
use crate::error::{Error, Result};
use crate::jet::{Jet, Real};
use crate::lie;

/// Value of one parameter block as seen by a residual function.
///
/// Free blocks carry jets seeded at their tangent coordinates; rotations are
/// presented as `R·(I + [δ]ₓ)`.
#[derive(Clone, Debug)]
pub enum Input<T> {
    Scalar(T),
    Vec3(Vector3<T>),
    Rotation(Matrix3<T>),
    Vector(Vec<T>),
}

impl<T: Real> Input<T> {
    pub fn scalar(&self) -> T {
        match self {
            Input::Scalar(s) => *s,
            Input::Vector(v) if v.len() == 1 => v[0],
            _ => panic!("input is not a scalar"),
        }
    }

    pub fn vec3(&self) -> Vector3<T> {
        match self {
            Input::Vec3(v) => *v,
            Input::Vector(v) if v.len() == 3 => Vector3::new(v[0], v[1], v[2]),
            _ => panic!("input is not a 3-vector"),
        }
    }

    pub fn rot(&self) -> Matrix3<T> {
        match self {
            Input::Rotation(r) => *r,
            _ => panic!("input is not a rotation"),
        }
    }

    pub fn vector(&self) -> Vec<T> {
        match self {
            Input::Scalar(s) => vec![*s],
            Input::Vec3(v) => v.iter().copied().collect(),
            Input::Vector(v) => v.clone(),
            Input::Rotation(_) => panic!("input is a rotation"),
        }
    }
}

/// A residual written once, generic over the scalar type.
pub trait ResidualFn: Send + Sync {
    fn dim(&self) -> usize;

    /// Blocks the residual depends on at the current parameter values, or
    /// `None` if the factor cannot be evaluated there (e.g. a sample time
    /// left the spline domain).
    fn blocks(&self, params: &Parameters) -> Option<Vec<BlockId>>;

    /// Writes the unweighted residual; returns `false` when the residual is
    /// not evaluable (the factor then contributes nothing this pass).
    fn eval<T: Real>(&self, inputs: &[Input<T>], out: &mut [T]) -> bool;
}

/// Square-root information matrix `L` with `W = LᵀL`.
#[derive(Clone, Debug, PartialEq)]
pub enum FactorWeight {
    Isotropic { dim: usize, scale: f64 },
    Diagonal(DVector<f64>),
    Full(DMatrix<f64>),
}

/// Lower bound applied to standard deviations so that noiseless configurations
/// still produce finite weights.
pub const MIN_SIGMA: f64 = 1e-9;

impl FactorWeight {
    pub fn isotropic(dim: usize, sigma: f64) -> Self {
        FactorWeight::Isotropic {
            dim,
            scale: 1.0 / sigma.max(MIN_SIGMA),
        }
    }

    pub fn from_sigmas(sigmas: &[f64]) -> Self {
        FactorWeight::Diagonal(DVector::from_iterator(
            sigmas.len(),
            sigmas.iter().map(|s| 1.0 / s.max(MIN_SIGMA)),
        ))
    }

    pub fn identity(dim: usize) -> Self {
        FactorWeight::Isotropic { dim, scale: 1.0 }
    }

    /// `L = Uᵀ` where `Σ⁻¹ = U·Uᵀ` (Cholesky).
    pub fn from_covariance(cov: &DMatrix<f64>) -> Result<Self> {
        let n = cov.nrows();
        let regularized = cov + DMatrix::identity(n, n) * (MIN_SIGMA * MIN_SIGMA);
        let inv = regularized
            .clone()
            .cholesky()
            .ok_or_else(|| Error::NumericalFailure("covariance is not positive definite".into()))?
            .inverse();
        let inv = (&inv + inv.transpose()) * 0.5;
        let u = inv
            .cholesky()
            .ok_or_else(|| Error::NumericalFailure("information is not positive definite".into()))?
            .l();
        Ok(FactorWeight::Full(u.transpose()))
    }

    pub fn dim(&self) -> usize {
        match self {
            FactorWeight::Isotropic { dim, .. } => *dim,
            FactorWeight::Diagonal(d) => d.len(),
            FactorWeight::Full(m) => m.nrows(),
        }
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        match self {
            FactorWeight::Isotropic { dim, scale } => DMatrix::identity(*dim, *dim) * *scale,
            FactorWeight::Diagonal(d) => DMatrix::from_diagonal(d),
            FactorWeight::Full(m) => m.clone(),
        }
    }

    pub fn apply(&self, r: &DVector<f64>) -> DVector<f64> {
        match self {
            FactorWeight::Isotropic { scale, .. } => r * *scale,
            FactorWeight::Diagonal(d) => r.component_mul(d),
            FactorWeight::Full(m) => m * r,
        }
    }

    pub fn apply_mat(&self, j: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            FactorWeight::Isotropic { scale, .. } => j * *scale,
            FactorWeight::Diagonal(d) => {
                let mut out = j.clone();
                for (r, s) in d.iter().enumerate() {
                    out.row_mut(r).scale_mut(*s);
                }
                out
            }
            FactorWeight::Full(m) => m * j,
        }
    }
}

/// Residual vector and per-block Jacobians (`None` for fixed blocks), both
/// whitened.
#[derive(Clone, Debug)]
pub struct Linearization {
    pub residual: DVector<f64>,
    pub jacobians: Vec<Option<DMatrix<f64>>>,
}

/// Object-safe factor interface used by the solver.
pub trait Factor: Send + Sync {
    fn dim(&self) -> usize;
    fn family(&self) -> &'static str;
    fn blocks(&self, params: &Parameters) -> Option<Vec<BlockId>>;
    /// Whitened residual.
    fn evaluate(&self, params: &Parameters, blocks: &[BlockId]) -> Option<DVector<f64>>;
    fn linearize(&self, params: &Parameters, blocks: &[BlockId]) -> Option<Linearization>;
}

/// Adapts a [`ResidualFn`] to [`Factor`] with forward-mode Jacobians.
pub struct AutoDiff<R> {
    pub residual: R,
    pub weight: FactorWeight,
    pub huber: Option<f64>,
    pub family: &'static str,
}

impl<R: ResidualFn> AutoDiff<R> {
    pub fn new(family: &'static str, residual: R, weight: FactorWeight) -> Self {
        debug_assert_eq!(residual.dim(), weight.dim());
        AutoDiff {
            residual,
            weight,
            huber: None,
            family,
        }
    }

    pub fn with_huber(mut self, delta: Option<f64>) -> Self {
        self.huber = delta;
        self
    }

    fn huber_scale(&self, r: &DVector<f64>) -> f64 {
        match self.huber {
            Some(delta) => {
                let norm = r.norm();
                if norm <= delta {
                    1.0
                } else {
                    (delta / norm).sqrt()
                }
            }
            None => 1.0,
        }
    }

    fn linearize_with<const N: usize>(
        &self,
        params: &Parameters,
        blocks: &[BlockId],
    ) -> Option<Linearization> {
        let mut inputs = Vec::with_capacity(blocks.len());
        let mut offsets = Vec::with_capacity(blocks.len());
        let mut next = 0;
        for &id in blocks {
            let block = params.block(id);
            let free = !block.fixed;
            offsets.push(if free { Some(next) } else { None });
            let seed = |i: usize, v: f64| {
                if free {
                    Jet::<N>::variable(v, next + i)
                } else {
                    Jet::<N>::constant(v)
                }
            };
            let input = match &block.value {
                BlockValue::Vector(v) => match v.len() {
                    1 => Input::Scalar(seed(0, v[0])),
                    3 => Input::Vec3(Vector3::new(seed(0, v[0]), seed(1, v[1]), seed(2, v[2]))),
                    _ => Input::Vector(v.iter().enumerate().map(|(i, x)| seed(i, *x)).collect()),
                },
                BlockValue::Rotation(r) => {
                    let delta = Vector3::new(seed(0, 0.0), seed(1, 0.0), seed(2, 0.0));
                    Input::Rotation(lie::perturb_right(r.matrix(), &delta))
                }
            };
            if free {
                next += block.tangent_dim();
            }
            inputs.push(input);
        }

        let m = self.residual.dim();
        let mut out = vec![Jet::<N>::constant(0.0); m];
        if !self.residual.eval(&inputs, &mut out) {
            return None;
        }
        if !out.iter().all(|v| v.is_finite()) {
            return None;
        }
        let raw = DVector::from_iterator(m, out.iter().map(|v| v.re));
        let scale = self.huber_scale(&self.weight.apply(&raw));
        let residual = self.weight.apply(&raw) * scale;
        let jacobians = blocks
            .iter()
            .zip(&offsets)
            .map(|(&id, off)| {
                off.map(|o| {
                    let dim = params.block(id).tangent_dim();
                    let j = DMatrix::from_fn(m, dim, |r, c| out[r].eps[o + c]);
                    self.weight.apply_mat(&j) * scale
                })
            })
            .collect();
        Some(Linearization {
            residual,
            jacobians,
        })
    }
}

fn f64_inputs(params: &Parameters, blocks: &[BlockId]) -> Vec<Input<f64>> {
    blocks
        .iter()
        .map(|&id| match &params.block(id).value {
            BlockValue::Vector(v) => match v.len() {
                1 => Input::Scalar(v[0]),
                3 => Input::Vec3(Vector3::new(v[0], v[1], v[2])),
                _ => Input::Vector(v.iter().copied().collect()),
            },
            BlockValue::Rotation(r) => Input::Rotation(*r.matrix()),
        })
        .collect()
}

/// Evaluates a residual function with plain `f64` at the current values.
/// Non-finite outputs are passed through so that the solver can reject the
/// step that produced them.
pub fn eval_f64<R: ResidualFn>(
    residual: &R,
    params: &Parameters,
    blocks: &[BlockId],
) -> Option<DVector<f64>> {
    let inputs = f64_inputs(params, blocks);
    let mut out = vec![0.0; residual.dim()];
    if !residual.eval(&inputs, &mut out) {
        return None;
    }
    Some(DVector::from_vec(out))
}

impl<R: ResidualFn> Factor for AutoDiff<R> {
    fn dim(&self) -> usize {
        self.residual.dim()
    }

    fn family(&self) -> &'static str {
        self.family
    }

    fn blocks(&self, params: &Parameters) -> Option<Vec<BlockId>> {
        self.residual.blocks(params)
    }

    fn evaluate(&self, params: &Parameters, blocks: &[BlockId]) -> Option<DVector<f64>> {
        let raw = eval_f64(&self.residual, params, blocks)?;
        let w = self.weight.apply(&raw);
        let scale = self.huber_scale(&w);
        Some(w * scale)
    }

    fn linearize(&self, params: &Parameters, blocks: &[BlockId]) -> Option<Linearization> {
        let free: usize = blocks
            .iter()
            .filter(|&&id| !params.is_fixed(id))
            .map(|&id| params.block(id).tangent_dim())
            .sum();
        match free {
            0..=4 => self.linearize_with::<4>(params, blocks),
            5..=8 => self.linearize_with::<8>(params, blocks),
            9..=16 => self.linearize_with::<16>(params, blocks),
            17..=32 => self.linearize_with::<32>(params, blocks),
            33..=64 => self.linearize_with::<64>(params, blocks),
            65..=128 => self.linearize_with::<128>(params, blocks),
            _ => panic!("factor has {free} free tangent dimensions (max 128)"),
        }
    }
}

/// Worst disagreement between a factor's Jacobians and central finite
/// differences taken in the tangent space of each free block.
#[derive(Clone, Copy, Debug)]
pub struct JacobianCheck {
    pub max_abs_error: f64,
    /// Error relative to `max(‖J‖_max, 1e-3)`.
    pub max_rel_error: f64,
}

pub fn check_jacobians(factor: &dyn Factor, params: &Parameters, step: f64) -> JacobianCheck {
    let blocks = factor.blocks(params).expect("factor not evaluable");
    let lin = factor.linearize(params, &blocks).expect("factor not evaluable");
    let mut max_abs: f64 = 0.0;
    let mut max_rel: f64 = 0.0;
    for (bi, &id) in blocks.iter().enumerate() {
        let Some(jac) = &lin.jacobians[bi] else {
            continue;
        };
        let dim = params.block(id).tangent_dim();
        let scale = jac.amax().max(1e-3);
        for c in 0..dim {
            let mut delta = vec![0.0; dim];
            let mut plus = params.clone();
            delta[c] = step;
            plus.block_mut(id).retract(&delta);
            let mut minus = params.clone();
            delta[c] = -step;
            minus.block_mut(id).retract(&delta);
            let rp = factor.evaluate(&plus, &blocks).expect("plus not evaluable");
            let rm = factor.evaluate(&minus, &blocks).expect("minus not evaluable");
            let fd = (rp - rm) / (2.0 * step);
            for r in 0..fd.len() {
                let err = (fd[r] - jac[(r, c)]).abs();
                max_abs = max_abs.max(err);
                max_rel = max_rel.max(err / scale);
            }
        }
    }
    JacobianCheck {
        max_abs_error: max_abs,
        max_rel_error: max_rel,
    }
}
