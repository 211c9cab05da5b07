use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::jet::Real;
use crate::lie::{self, Rotation};

struct Linear {
    a: DMatrix<f64>,
    b: DVector<f64>,
    block: BlockId,
}

impl ResidualFn for Linear {
    fn dim(&self) -> usize {
        self.a.nrows()
    }
    fn blocks(&self, _: &Parameters) -> Option<Vec<BlockId>> {
        Some(vec![self.block])
    }
    fn eval<T: Real>(&self, inputs: &[Input<T>], out: &mut [T]) -> bool {
        let x = inputs[0].vector();
        for (r, o) in out.iter_mut().enumerate() {
            let mut s = T::from_f64(-self.b[r]);
            for (c, xc) in x.iter().enumerate() {
                s += *xc * self.a[(r, c)];
            }
            *o = s;
        }
        true
    }
}

struct RotationPrior {
    target: Matrix3<f64>,
    block: BlockId,
}

impl ResidualFn for RotationPrior {
    fn dim(&self) -> usize {
        3
    }
    fn blocks(&self, _: &Parameters) -> Option<Vec<BlockId>> {
        Some(vec![self.block])
    }
    fn eval<T: Real>(&self, inputs: &[Input<T>], out: &mut [T]) -> bool {
        let r = inputs[0].rot();
        let e = lie::log(&(r.transpose() * self.target.map(T::from_f64)));
        out.copy_from_slice(e.as_slice());
        true
    }
}

/// r = (10 (y − x²), 1 − x), minimum at (1, 1).
struct Rosenbrock {
    x: BlockId,
    y: BlockId,
}

impl ResidualFn for Rosenbrock {
    fn dim(&self) -> usize {
        2
    }
    fn blocks(&self, _: &Parameters) -> Option<Vec<BlockId>> {
        Some(vec![self.x, self.y])
    }
    fn eval<T: Real>(&self, inputs: &[Input<T>], out: &mut [T]) -> bool {
        let x = inputs[0].scalar();
        let y = inputs[1].scalar();
        out[0] = (y - x * x) * 10.0;
        out[1] = -x + 1.0;
        true
    }
}

/// Difference between consecutive scalar blocks.
struct Chain {
    a: BlockId,
    b: BlockId,
    target: f64,
}

impl ResidualFn for Chain {
    fn dim(&self) -> usize {
        1
    }
    fn blocks(&self, _: &Parameters) -> Option<Vec<BlockId>> {
        Some(vec![self.a, self.b])
    }
    fn eval<T: Real>(&self, inputs: &[Input<T>], out: &mut [T]) -> bool {
        let d = inputs[1].scalar() - inputs[0].scalar();
        out[0] = d * d * 0.1 + d - self.target;
        true
    }
}

fn random_linear(rng: &mut impl Rng, m: usize, n: usize) -> (DMatrix<f64>, DVector<f64>) {
    let a = DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
    let b = DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0));
    (a, b)
}

#[test]
fn linear_least_squares_reaches_normal_equation_solution() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (a, b) = random_linear(&mut rng, 12, 5);
    let expected = (a.transpose() * &a)
        .cholesky()
        .unwrap()
        .solve(&(a.transpose() * &b));

    let mut params = Parameters::new();
    let x = params.add_vector(&[0.0; 5], false);
    let mut problem = Problem::new(params);
    problem.add(AutoDiff::new(
        "linear",
        Linear { a: a.clone(), b: b.clone(), block: x },
        FactorWeight::identity(12),
    ));
    // Without the cost-change criterion (which stops at parameter accuracy
    // of about sqrt(rel_tol)) the solver runs until no step improves the
    // cost in floating point.
    let opts = SolverOptions {
        rel_tol: 0.0,
        ..Default::default()
    };
    let report = solve(&mut problem, &opts).unwrap();
    assert_ne!(report.termination, Termination::MaxIter);
    assert!(report.iterations <= 5, "{}", report.iterations);
    let err = (problem.params.vector(x) - &expected).amax();
    assert!(err < 1e-10, "{err:e} {:?}", report.cost_history);
    // One damped step already lands within the damping level of the optimum.
    let mut params = Parameters::new();
    let x1 = params.add_vector(&[0.0; 5], false);
    let mut one = Problem::new(params);
    one.add(AutoDiff::new(
        "linear",
        Linear { a, b, block: x1 },
        FactorWeight::identity(12),
    ));
    let opts = SolverOptions {
        max_iter: 1,
        ..Default::default()
    };
    let r1 = solve(&mut one, &opts).unwrap();
    assert_eq!(r1.cost_history.len(), 2);
    assert!((one.params.vector(x1) - &expected).amax() < 1e-3 * expected.amax());
}

#[test]
fn linear_factor_jacobian_is_the_matrix() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (a, b) = random_linear(&mut rng, 4, 3);
    let mut params = Parameters::new();
    let x = params.add_vector(&[0.3, -0.2, 0.9], false);
    let f = AutoDiff::new("linear", Linear { a: a.clone(), b, block: x }, FactorWeight::identity(4));
    let lin = f.linearize(&params, &[x]).unwrap();
    assert!((lin.jacobians[0].as_ref().unwrap() - &a).amax() < 1e-15);
}

#[test]
fn rotation_block_converges_to_target() {
    let target = Rotation::from_axis_angle(&Vector3::new(0.2, -1.0, 0.4), 2.2);
    let mut params = Parameters::new();
    let r = params.add_rotation(Rotation::rx(0.3), false);
    let mut problem = Problem::new(params);
    problem.add(AutoDiff::new(
        "prior",
        RotationPrior { target: *target.matrix(), block: r },
        FactorWeight::identity(3),
    ));
    let report = solve(&mut problem, &SolverOptions::default()).unwrap();
    assert!(report.converged());
    assert!(problem.params.rotation(r).angle_to(&target) < 1e-10);
    let (orth, det) = problem.params.rotation(r).orthonormality_error();
    assert!(orth < 1e-12 && det < 1e-12);
}

#[test]
fn rotation_residual_jacobian_at_target_is_minus_identity() {
    let target = Rotation::from_axis_angle(&Vector3::new(1.0, 2.0, -0.5), 0.9);
    let mut params = Parameters::new();
    let r = params.add_rotation(target, false);
    let f = AutoDiff::new(
        "prior",
        RotationPrior { target: *target.matrix(), block: r },
        FactorWeight::identity(3),
    );
    let j = f.linearize(&params, &[r]).unwrap().jacobians[0].clone().unwrap();
    assert!((j + DMatrix::identity(3, 3)).amax() < 1e-12);

    // Away from the target the tangent-space finite differences agree.
    params.set_rotation(r, Rotation::ry(0.7) * target);
    let check = check_jacobians(&f, &params, 1e-6);
    assert!(check.max_rel_error < 1e-4, "{check:?}");
}

#[test]
fn rosenbrock_reaches_analytic_optimum() {
    let mut params = Parameters::new();
    let x = params.add_scalar(-1.2, false, None);
    let y = params.add_scalar(1.0, false, None);
    let mut problem = Problem::new(params);
    problem.add(AutoDiff::new("rosenbrock", Rosenbrock { x, y }, FactorWeight::identity(2)));
    let opts = SolverOptions {
        max_iter: 200,
        ..Default::default()
    };
    let report = solve(&mut problem, &opts).unwrap();
    assert_ne!(report.termination, Termination::MaxIter);
    assert!((problem.params.scalar(x) - 1.0).abs() < 1e-6);
    assert!((problem.params.scalar(y) - 1.0).abs() < 1e-6);
    assert!(report.monotone());
}

fn chain_problem(n: usize, seed: u64) -> Problem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Parameters::new();
    let ids: Vec<_> = (0..n)
        .map(|i| params.add_scalar(rng.random_range(-1.0..1.0), i == 0, None))
        .collect();
    let mut problem = Problem::new(params);
    for w in ids.windows(2) {
        problem.add(AutoDiff::new(
            "chain",
            Chain {
                a: w[0],
                b: w[1],
                target: rng.random_range(-0.5..0.5),
            },
            FactorWeight::isotropic(1, 0.1),
        ));
    }
    for w in ids.windows(3).step_by(7) {
        problem.add(AutoDiff::new(
            "skip",
            Chain {
                a: w[0],
                b: w[2],
                target: rng.random_range(-0.5..0.5),
            },
            FactorWeight::isotropic(1, 0.5),
        ));
    }
    problem
}

#[test]
fn normal_matrix_is_nonzero_only_between_coupled_blocks() {
    let problem = chain_problem(30, 4);
    let (h, _, offsets) = problem.normal_equations();
    let coupled = problem.coupled_blocks();
    for a in 0..problem.params.len() {
        for b in a..problem.params.len() {
            let (Some(oa), Some(ob)) = (offsets[a], offsets[b]) else {
                continue;
            };
            if h[(oa, ob)] != 0.0 {
                assert!(coupled.contains(&(a, b)), "({a},{b})");
            }
        }
    }
}

#[test]
fn sparse_and_dense_paths_agree() {
    let mut sparse = chain_problem(120, 5);
    let mut dense = chain_problem(120, 5);
    let rs = solve(
        &mut sparse,
        &SolverOptions {
            dense_threshold: 0,
            ..Default::default()
        },
    )
    .unwrap();
    let rd = solve(
        &mut dense,
        &SolverOptions {
            dense_threshold: usize::MAX,
            ..Default::default()
        },
    )
    .unwrap();
    assert!(rs.converged() && rd.converged());
    assert!(rs.monotone() && rd.monotone());
    for i in 0..sparse.params.len() {
        assert!((sparse.params.scalar(i) - dense.params.scalar(i)).abs() < 1e-9);
    }
}

#[test]
fn solves_are_deterministic() {
    let mut a = chain_problem(300, 6);
    let mut b = chain_problem(300, 6);
    let ra = solve(&mut a, &SolverOptions::default()).unwrap();
    let rb = solve(&mut b, &SolverOptions::default()).unwrap();
    assert_eq!(ra.cost_history, rb.cost_history);
    for i in 0..a.params.len() {
        assert_eq!(a.params.block(i), b.params.block(i));
    }
}

#[test]
fn bounds_are_respected() {
    let mut params = Parameters::new();
    let x = params.add_scalar(0.0, false, Some((-0.1, 0.1)));
    let mut problem = Problem::new(params);
    problem.add(AutoDiff::new(
        "linear",
        Linear {
            a: DMatrix::identity(1, 1),
            b: DVector::from_element(1, 3.0),
            block: x,
        },
        FactorWeight::identity(1),
    ));
    solve(&mut problem, &SolverOptions::default()).unwrap();
    assert_eq!(problem.params.scalar(x), 0.1);
}

#[test]
fn overflowing_system_is_a_numerical_failure() {
    let mut params = Parameters::new();
    let x = params.add_scalar(1.0, false, None);
    let mut problem = Problem::new(params);
    problem.add(AutoDiff::new(
        "huge",
        Linear {
            a: DMatrix::from_element(1, 1, 1e200),
            b: DVector::from_element(1, 0.0),
            block: x,
        },
        FactorWeight::identity(1),
    ));
    assert!(matches!(
        solve(&mut problem, &SolverOptions::default()),
        Err(Error::NumericalFailure(_))
    ));
}

#[test]
fn no_free_blocks_is_rejected() {
    let mut params = Parameters::new();
    let x = params.add_scalar(1.0, true, None);
    let mut problem = Problem::new(params);
    problem.add(AutoDiff::new("linear", Linear {
        a: DMatrix::identity(1, 1),
        b: DVector::zeros(1),
        block: x,
    }, FactorWeight::identity(1)));
    assert!(solve(&mut problem, &SolverOptions::default()).is_err());
}

#[test]
fn covariance_weight_whitens() {
    let cov = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 2.0]);
    let w = FactorWeight::from_covariance(&cov).unwrap().matrix();
    let info = w.transpose() * &w;
    assert!((info * &cov - DMatrix::identity(2, 2)).amax() < 1e-8);
}

#[test]
fn huber_downweights_outliers() {
    let mut params = Parameters::new();
    let x = params.add_scalar(0.0, false, None);
    let f = AutoDiff::new(
        "linear",
        Linear {
            a: DMatrix::identity(1, 1),
            b: DVector::from_element(1, 10.0),
            block: x,
        },
        FactorWeight::identity(1),
    )
    .with_huber(Some(1.0));
    let r = f.evaluate(&params, &[x]).unwrap();
    assert!((r[0].abs() - 10f64.sqrt()).abs() < 1e-12);
}
