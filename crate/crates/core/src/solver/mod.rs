//! Levenberg–Marquardt over heterogeneous parameter blocks.

mod factor;
mod linalg;
mod params;

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

pub use factor::{
    check_jacobians, eval_f64, AutoDiff, Factor, FactorWeight, Input, JacobianCheck,
    Linearization, ResidualFn, MIN_SIGMA,
};
pub use linalg::{solve_spd, Envelope, EnvelopeCholesky};
pub use params::{BlockId, BlockValue, Manifold, ParameterBlock, Parameters};

use crate::error::{Error, Result};

pub const DENSE_THRESHOLD: usize = 256;

const DIAG_MIN: f64 = 1e-6;
const DIAG_MAX: f64 = 1e32;
const LAMBDA_MIN: f64 = 1e-15;
const LAMBDA_MAX: f64 = 1e32;

#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    pub max_iter: usize,
    pub lm_lambda0: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
    /// Systems with fewer free parameters are factored densely.
    pub dense_threshold: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            max_iter: 50,
            lm_lambda0: 1e-4,
            rel_tol: 1e-8,
            abs_tol: 1e-12,
            dense_threshold: DENSE_THRESHOLD,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Converged,
    MaxIter,
    Stalled,
}

#[derive(Clone, Debug, Serialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub cost: f64,
    pub candidate_cost: f64,
    pub lambda: f64,
    pub step_norm: f64,
    pub gradient_norm: f64,
    pub accepted: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct SolveReport {
    /// Number of linearizations that produced an accepted step.
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub termination: Termination,
    /// Cost before the first step and after every accepted step.
    pub cost_history: Vec<f64>,
    pub log: Vec<IterationRecord>,
    pub free_parameters: usize,
}

impl SolveReport {
    pub fn converged(&self) -> bool {
        self.termination == Termination::Converged
    }

    /// True if every accepted step lowered the cost.
    pub fn monotone(&self) -> bool {
        self.cost_history.windows(2).all(|w| w[1] < w[0] || w[0] == 0.0)
    }

    pub fn write_log_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(
            f,
            "iteration,cost,candidate_cost,lambda,step_norm,gradient_norm,accepted"
        )?;
        for r in &self.log {
            writeln!(
                f,
                "{},{:.17e},{:.17e},{:.3e},{:.6e},{:.6e},{}",
                r.iteration,
                r.cost,
                r.candidate_cost,
                r.lambda,
                r.step_norm,
                r.gradient_norm,
                r.accepted as u8
            )?;
        }
        Ok(())
    }
}

#[derive(Default)]
pub struct Problem {
    pub params: Parameters,
    factors: Vec<Box<dyn Factor>>,
}

type Linearized = Option<(Vec<BlockId>, Linearization)>;

#[cfg(feature = "parallel")]
fn par_map<T: Sync, U: Send>(items: &[T], f: impl Fn(&T) -> U + Sync + Send) -> Vec<U> {
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn par_map<T: Sync, U: Send>(items: &[T], f: impl Fn(&T) -> U + Sync + Send) -> Vec<U> {
    items.iter().map(f).collect()
}

impl Problem {
    pub fn new(params: Parameters) -> Self {
        Problem {
            params,
            factors: Vec::new(),
        }
    }

    pub fn add_factor(&mut self, factor: Box<dyn Factor>) {
        self.factors.push(factor);
    }

    pub fn add<F: Factor + 'static>(&mut self, factor: F) {
        self.factors.push(Box::new(factor));
    }

    pub fn factors(&self) -> &[Box<dyn Factor>] {
        &self.factors
    }

    pub fn num_factors(&self) -> usize {
        self.factors.len()
    }

    /// Checks block references and dimensions at the current state.
    pub fn validate(&self) -> Result<()> {
        for f in &self.factors {
            if let Some(blocks) = f.blocks(&self.params) {
                for &b in &blocks {
                    self.params.check_id(b)?;
                }
                if let Some(r) = f.evaluate(&self.params, &blocks) {
                    if r.len() != f.dim() {
                        return Err(Error::invalid(format!(
                            "{} factor returned {} residuals, declared {}",
                            f.family(),
                            r.len(),
                            f.dim()
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    fn tangent_offsets(&self) -> (Vec<Option<usize>>, usize) {
        let mut next = 0;
        let offsets = self
            .params
            .blocks()
            .iter()
            .map(|b| {
                if b.fixed {
                    None
                } else {
                    let o = next;
                    next += b.tangent_dim();
                    Some(o)
                }
            })
            .collect();
        (offsets, next)
    }

    fn linearize_all(&self) -> Vec<Linearized> {
        par_map(&self.factors, |f| {
            let blocks = f.blocks(&self.params)?;
            let lin = f.linearize(&self.params, &blocks)?;
            Some((blocks, lin))
        })
    }

    fn cost_at(&self, params: &Parameters) -> f64 {
        let parts = par_map(&self.factors, |f| {
            f.blocks(params)
                .and_then(|b| f.evaluate(params, &b))
                .map_or(0.0, |r| r.norm_squared())
        });
        0.5 * parts.iter().sum::<f64>()
    }

    pub fn cost(&self) -> f64 {
        self.cost_at(&self.params)
    }

    /// Cost split by factor family.
    pub fn family_costs(&self) -> BTreeMap<String, f64> {
        let mut out = BTreeMap::new();
        for f in &self.factors {
            let c = f
                .blocks(&self.params)
                .and_then(|b| f.evaluate(&self.params, &b))
                .map_or(0.0, |r| 0.5 * r.norm_squared());
            *out.entry(f.family().to_string()).or_insert(0.0) += c;
        }
        out
    }

    /// Largest absolute whitened residual entry per family.
    pub fn family_max_residual(&self) -> BTreeMap<String, f64> {
        let mut out = BTreeMap::new();
        for f in &self.factors {
            if let Some(r) = f
                .blocks(&self.params)
                .and_then(|b| f.evaluate(&self.params, &b))
            {
                let e = out.entry(f.family().to_string()).or_insert(0.0f64);
                *e = e.max(r.amax());
            }
        }
        out
    }

    /// Pairs of blocks (`a ≤ b`) that share at least one factor at the
    /// current state.
    pub fn coupled_blocks(&self) -> BTreeSet<(BlockId, BlockId)> {
        let mut out = BTreeSet::new();
        for f in &self.factors {
            if let Some(blocks) = f.blocks(&self.params) {
                for &a in &blocks {
                    for &b in &blocks {
                        if a <= b {
                            out.insert((a, b));
                        }
                    }
                }
            }
        }
        out
    }

    /// Dense `JᵀJ` and `Jᵀr` over the free tangent coordinates, with the
    /// offset of every block.
    pub fn normal_equations(&self) -> (DMatrix<f64>, DVector<f64>, Vec<Option<usize>>) {
        let (offsets, n) = self.tangent_offsets();
        let lins = self.linearize_all();
        let env = self.assemble(&lins, &offsets, n);
        (env.0.to_dense(), env.1, offsets)
    }

    /// Sum of squared whitened Jacobian entries for one block: a scalar
    /// measure of how strongly the data constrain it.
    pub fn block_information(&self, id: BlockId) -> f64 {
        let mut total = 0.0;
        for (blocks, lin) in self.linearize_all().into_iter().flatten() {
            for (b, j) in blocks.iter().zip(&lin.jacobians) {
                if *b == id {
                    if let Some(j) = j {
                        total += j.norm_squared();
                    }
                }
            }
        }
        total
    }

    fn assemble(
        &self,
        lins: &[Linearized],
        offsets: &[Option<usize>],
        n: usize,
    ) -> (Envelope, DVector<f64>) {
        let mut first: Vec<usize> = (0..n).collect();
        for (blocks, _) in lins.iter().flatten() {
            let Some(lo) = blocks.iter().filter_map(|b| offsets[*b]).min() else {
                continue;
            };
            for &b in blocks {
                if let Some(o) = offsets[b] {
                    for row in o..o + self.params.block(b).tangent_dim() {
                        first[row] = first[row].min(lo);
                    }
                }
            }
        }
        let mut h = Envelope::new(first);
        let mut g = DVector::zeros(n);
        for (blocks, lin) in lins.iter().flatten() {
            for (a, ja) in blocks.iter().zip(&lin.jacobians) {
                let (Some(ja), Some(oa)) = (ja, offsets[*a]) else {
                    continue;
                };
                let ga = ja.transpose() * &lin.residual;
                for (i, v) in ga.iter().enumerate() {
                    g[oa + i] += v;
                }
                for (b, jb) in blocks.iter().zip(&lin.jacobians) {
                    let (Some(jb), Some(ob)) = (jb, offsets[*b]) else {
                        continue;
                    };
                    if ob > oa {
                        continue;
                    }
                    let hab = ja.transpose() * jb;
                    for r in 0..hab.nrows() {
                        for c in 0..hab.ncols() {
                            if ob + c <= oa + r {
                                h.add(oa + r, ob + c, hab[(r, c)]);
                            }
                        }
                    }
                }
            }
        }
        (h, g)
    }

    fn apply_step(&self, step: &DVector<f64>, offsets: &[Option<usize>]) -> Parameters {
        let mut p = self.params.clone();
        for (id, off) in offsets.iter().enumerate() {
            if let Some(o) = off {
                let dim = p.block(id).tangent_dim();
                p.block_mut(id).retract(&step.as_slice()[*o..*o + dim]);
            }
        }
        p
    }
}

/// Minimizes `½ Σ ‖r‖²` over the free blocks of `problem`.
pub fn solve(problem: &mut Problem, opts: &SolverOptions) -> Result<SolveReport> {
    problem.validate()?;
    let (offsets, n) = problem.tangent_offsets();
    if n == 0 {
        return Err(Error::invalid("problem has no free parameter blocks"));
    }
    let mut cost = problem.cost();
    if !cost.is_finite() {
        return Err(Error::NumericalFailure(format!(
            "initial cost is not finite ({cost})"
        )));
    }
    let initial_cost = cost;
    let mut lambda = opts.lm_lambda0;
    let mut history = vec![cost];
    let mut log = Vec::new();
    let mut iterations = 0;
    let mut termination = Termination::MaxIter;
    let mut any_factorized = false;

    'outer: while iterations < opts.max_iter {
        if cost == 0.0 {
            termination = Termination::Converged;
            break;
        }
        let lins = problem.linearize_all();
        let (h, g) = problem.assemble(&lins, &offsets, n);
        let gradient_norm = g.amax();
        if gradient_norm < opts.abs_tol {
            termination = Termination::Converged;
            break;
        }
        let diag = h
            .diagonal()
            .map(|d| d.clamp(DIAG_MIN, DIAG_MAX));
        let rhs = -&g;
        loop {
            let mut damped = h.clone();
            damped.add_diagonal(&(&diag * lambda));
            let Some(step) = solve_spd(damped, &rhs, opts.dense_threshold) else {
                log::debug!("factorization failed at lambda {lambda:.1e}");
                lambda *= 10.0;
                if lambda > LAMBDA_MAX {
                    if any_factorized {
                        termination = Termination::Stalled;
                        break 'outer;
                    }
                    return Err(Error::NumericalFailure(format!(
                        "normal equations singular at every damping level \
                         ({n} free parameters, {} factors, gradient {gradient_norm:.3e})",
                        problem.num_factors()
                    )));
                }
                continue;
            };
            any_factorized = true;
            let candidate = problem.apply_step(&step, &offsets);
            let new_cost = problem.cost_at(&candidate);
            let accepted = new_cost.is_finite() && new_cost < cost;
            log.push(IterationRecord {
                iteration: iterations,
                cost,
                candidate_cost: new_cost,
                lambda,
                step_norm: step.norm(),
                gradient_norm,
                accepted,
            });
            if accepted {
                problem.params = candidate;
                let change = cost - new_cost;
                let old = cost;
                cost = new_cost;
                history.push(cost);
                lambda = (lambda / 10.0).max(LAMBDA_MIN);
                iterations += 1;
                if change < opts.rel_tol * old || cost == 0.0 {
                    termination = Termination::Converged;
                    break 'outer;
                }
                break;
            }
            // Decrease predicted by the damped quadratic model.
            let predicted = 0.5 * step.dot(&(step.component_mul(&diag) * lambda - &g));
            if predicted.is_finite() && predicted < opts.rel_tol * cost {
                termination = Termination::Converged;
                break 'outer;
            }
            lambda *= 10.0;
            if lambda > LAMBDA_MAX {
                // No descent direction left at any damping: the current point
                // is a minimum to working precision.
                termination = Termination::Stalled;
                break 'outer;
            }
        }
    }

    Ok(SolveReport {
        iterations,
        initial_cost,
        final_cost: cost,
        termination,
        cost_history: history,
        log,
        free_parameters: n,
    })
}

#[cfg(test)]
mod tests;
