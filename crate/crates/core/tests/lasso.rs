mod common;

use common::{kkt_violation, lambda_max, random_instance, sign_pattern_oracle};
use epfbench::lasso::{cross_validate_lambda, lambda_grid, lasso_fit, GramProblem, LassoConfig};
use ndarray::{Array1, Array2};
use proptest::prelude::*;

const TOL: f64 = 1e-6;

fn config(lambda: f64) -> LassoConfig<f64> {
    LassoConfig { lambda, ..LassoConfig::default() }
}

#[test]
fn matches_sign_pattern_oracle() {
    let mut worst: f64 = 0.0;
    for seed in 0..200 {
        let inst = random_instance(seed, 50, 6);
        let fit = lasso_fit(inst.x.view(), inst.y.view(), None, &config(inst.lambda)).unwrap();
        let oracle = sign_pattern_oracle(&inst.x, &inst.y, inst.lambda);
        for (a, b) in fit.coefficients.iter().zip(&oracle) {
            worst = worst.max((a - b).abs());
        }
        let support: Vec<usize> = (0..oracle.len()).filter(|&j| oracle[j] != 0.0).collect();
        assert_eq!(fit.active_set, support, "seed {seed}");
    }
    assert!(worst < 1e-6, "largest deviation {worst:e}");
}

#[test]
fn kkt_conditions_hold_along_paths() {
    for seed in 0..50 {
        let inst = random_instance(1000 + seed, 60, 12);
        let problem = GramProblem::from_data(inst.x.view(), inst.y.view(), None).unwrap();
        let grid = lambda_grid(problem.lambda_max(&config(0.0)), 15, 1e-3).unwrap();
        let fits = problem.fit_path(&grid, &config(0.0)).unwrap();
        let penalized = vec![true; inst.x.ncols()];
        for fit in fits {
            assert!(fit.converged);
            let v = kkt_violation(&inst.x, &inst.y, fit.coefficients.as_slice().unwrap(), fit.lambda, &penalized);
            assert!(v <= 10.0 * TOL, "seed {seed} lambda {} violation {v:e}", fit.lambda);
        }
    }
}

#[test]
fn unpenalized_columns_have_zero_gradient() {
    let inst = random_instance(77, 50, 6);
    let p = inst.x.ncols();
    let penalized: Vec<bool> = (0..p).map(|j| j != 0).collect();
    let fit = lasso_fit(inst.x.view(), inst.y.view(), Some(&penalized), &config(10.0 * inst.lambda)).unwrap();
    assert!(fit.coefficients[0] != 0.0);
    let v = kkt_violation(&inst.x, &inst.y, fit.coefficients.as_slice().unwrap(), 10.0 * inst.lambda, &penalized);
    assert!(v <= 10.0 * TOL, "{v:e}");
}

#[test]
fn lambda_max_gives_exact_zero() {
    for seed in 0..100 {
        let inst = random_instance(5000 + seed, 50, 8);
        let lmax = lambda_max(&inst.x, &inst.y);
        for scale in [1.0, 1.0 + 1e-9, 2.0] {
            let fit = lasso_fit(inst.x.view(), inst.y.view(), None, &config(lmax * scale)).unwrap();
            assert!(fit.coefficients.iter().all(|b| *b == 0.0), "seed {seed} scale {scale}");
            let mean = inst.y.mean().unwrap();
            assert!((fit.intercept - mean).abs() < 1e-12);
        }
    }
}

#[test]
fn f32_solver_agrees_with_f64() {
    let inst = random_instance(9, 40, 5);
    let x32 = inst.x.mapv(|v| v as f32);
    let y32 = inst.y.mapv(|v| v as f32);
    let cfg32 = LassoConfig { lambda: inst.lambda as f32, tol: 1e-5, max_iters: 10_000 };
    let fit32 = lasso_fit(x32.view(), y32.view(), None, &cfg32).unwrap();
    let fit64 = lasso_fit(inst.x.view(), inst.y.view(), None, &config(inst.lambda)).unwrap();
    for (a, b) in fit32.coefficients.iter().zip(fit64.coefficients.iter()) {
        assert!((*a as f64 - b).abs() < 1e-3, "{a} vs {b}");
    }
}

#[test]
fn cross_validation_prefers_larger_penalty_on_ties() {
    // pure noise target: every penalty at or above lambda_max predicts the mean
    let x = Array2::from_shape_fn((40, 3), |(i, j)| ((i * 7 + j * 3) % 11) as f64);
    let y = Array1::from_elem(40, 2.5);
    let res = cross_validate_lambda(x.view(), y.view(), None, Some(&[3.0, 2.0, 1.0]), 4, 3, 0.1, &config(0.0)).unwrap();
    assert_eq!(res.chosen_index, 0);
    assert_eq!(res.chosen_lambda, 3.0);
}

#[test]
fn wide_designs_converge_to_kkt_points() {
    for seed in 0..40 {
        let inst = random_instance(7000 + seed, 20, 80);
        let (n, p) = inst.x.dim();
        let problem = GramProblem::from_data(inst.x.view(), inst.y.view(), None).unwrap();
        let grid = lambda_grid(problem.lambda_max(&config(0.0)), 20, 1e-3).unwrap();
        let penalized = vec![true; p];
        for fit in problem.fit_path(&grid, &config(0.0)).unwrap() {
            let v = kkt_violation(&inst.x, &inst.y, fit.coefficients.as_slice().unwrap(), fit.lambda, &penalized);
            assert!(v <= 10.0 * TOL, "seed {seed} n {n} p {p} lambda {} violation {v:e}", fit.lambda);
        }
        let cold = lasso_fit(inst.x.view(), inst.y.view(), None, &config(grid[19])).unwrap();
        assert!(cold.active_set.len() <= n, "seed {seed}: {} nonzeros with {n} rows", cold.active_set.len());
    }
}

#[test]
fn exact_unpenalized_fit_has_zero_lambda_max() {
    // column 0 explains y exactly; column 1 is an unrelated penalized feature
    let x = Array2::from_shape_fn((30, 2), |(i, j)| if j == 0 { (i % 7) as f64 } else { ((i * 5) % 11) as f64 });
    let y = x.column(0).mapv(|v| 3.0 * v + 1.0);
    let penalized = [false, true];
    let problem = GramProblem::from_data(x.view(), y.view(), Some(&penalized)).unwrap();
    assert_eq!(problem.lambda_max(&config(0.0)), 0.0);
    let fit = problem.solve(&config(0.0), None).unwrap();
    assert_eq!(fit.coefficients[1], 0.0);
    assert!((fit.coefficients[0] - 3.0).abs() < 1e-9);
}

fn instance_strategy() -> impl Strategy<Value = u64> {
    0u64..1_000_000
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn solutions_satisfy_kkt(seed in instance_strategy()) {
        let inst = random_instance(seed, 30, 10);
        let fit = lasso_fit(inst.x.view(), inst.y.view(), None, &config(inst.lambda)).unwrap();
        let penalized = vec![true; inst.x.ncols()];
        let v = kkt_violation(&inst.x, &inst.y, fit.coefficients.as_slice().unwrap(), inst.lambda, &penalized);
        prop_assert!(v <= 10.0 * TOL, "violation {:e}", v);
    }

    #[test]
    fn l1_norm_shrinks_with_penalty(seed in instance_strategy()) {
        let inst = random_instance(seed, 30, 8);
        let problem = GramProblem::from_data(inst.x.view(), inst.y.view(), None).unwrap();
        let grid = lambda_grid(problem.lambda_max(&config(0.0)), 12, 1e-2).unwrap();
        let fits = problem.fit_path(&grid, &config(0.0)).unwrap();
        for w in fits.windows(2) {
            prop_assert!(w[1].l1_norm() >= w[0].l1_norm() - 1e-6);
        }
    }

    #[test]
    fn objective_not_beaten_by_perturbation(seed in instance_strategy(), bump in -0.1f64..0.1, coord in 0usize..10) {
        let inst = random_instance(seed, 30, 10);
        let problem = GramProblem::from_data(inst.x.view(), inst.y.view(), None).unwrap();
        let fit = problem.solve(&config(inst.lambda), None).unwrap();
        let mut other = fit.coefficients.clone();
        let j = coord % other.len();
        other[j] += bump;
        let f0 = problem.objective(fit.coefficients.view(), inst.lambda);
        let f1 = problem.objective(other.view(), inst.lambda);
        prop_assert!(f0 <= f1 + 1e-9);
    }

    #[test]
    fn row_duplication_leaves_solution_unchanged(seed in instance_strategy()) {
        let inst = random_instance(seed, 25, 5);
        let n = inst.x.nrows();
        let x2 = ndarray::concatenate![ndarray::Axis(0), inst.x, inst.x];
        let y2 = ndarray::concatenate![ndarray::Axis(0), inst.y, inst.y];
        prop_assert_eq!(x2.nrows(), 2 * n);
        let a = lasso_fit(inst.x.view(), inst.y.view(), None, &config(inst.lambda)).unwrap();
        let b = lasso_fit(x2.view(), y2.view(), None, &config(inst.lambda)).unwrap();
        for (u, v) in a.coefficients.iter().zip(b.coefficients.iter()) {
            prop_assert!((u - v).abs() < 1e-6);
        }
    }
}

