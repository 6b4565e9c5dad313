use cttmle_core::hal::{
    enumerate_basis, fit_hal, fit_hal_cv, lambda_path, Family, HalModel, HalOptions, Problem, Solution,
};
use cttmle_core::nuisance::{compress, Design};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;
use common::{dense_eta, expit, proximal_oracle};

fn solve_checked(p: &Problem, lambda: f64) -> Solution {
    let s = p.solve(lambda, None, 1e-10, 10_000).unwrap();
    let v = p.kkt_violation(lambda, &s);
    assert!(v < 1e-5, "KKT violation {v} at lambda {lambda}");
    s
}

fn step_design(n: usize, seed: u64) -> (Design, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<Vec<f64>> = (0..n).map(|_| vec![(rng.gen_range(0.0..1.0f64) * 20.0).floor() / 20.0]).collect();
    let y = rows.iter().map(|r| f64::from(rng.gen::<f64>() < if r[0] >= 0.5 { 0.8 } else { 0.25 })).collect();
    (Design::from_rows(&rows), y)
}

#[test]
fn matches_proximal_oracle_on_step_outcome() {
    let (x, y) = step_design(80, 11);
    let w = vec![1.0; y.len()];
    let cv = fit_hal_cv(&x, &y, &w, Family::Binomial, &HalOptions::default()).unwrap();
    let (cx, cy, cw) = compress(&x, &y, &w);
    let opts = HalOptions::default();
    let basis = enumerate_basis(&cx, opts.max_order, opts.max_knots, opts.seed);
    let problem = Problem { columns: &basis.columns, y: &cy, w: &cw, offset: None, family: Family::Binomial };
    let s = solve_checked(&problem, cv.lambda);
    let dense = basis.dense(cy.len());
    let (o0, ob) = proximal_oracle(&dense, &cy, &cw, cv.lambda);
    let ours = dense_eta(&dense, s.intercept, &s.beta);
    let oracle = dense_eta(&dense, o0, &ob);
    for (a, b) in ours.iter().zip(&oracle) {
        assert!((expit(*a) - expit(*b)).abs() < 1e-4, "{a} vs {b}");
    }
    // The CV fit reproduces the same fitted values on the raw rows.
    for i in 0..x.nrow() {
        let j = (0..cx.nrow()).find(|&j| cx.row(j) == x.row(i)).unwrap();
        assert!((expit(cv.linear_predictor(x.row(i))) - expit(oracle[j])).abs() < 1e-4);
    }
}

#[test]
fn matches_proximal_oracle_on_fixed_designs() {
    let designs: Vec<(Vec<Vec<f64>>, Vec<f64>)> = vec![
        (
            vec![vec![0.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0], vec![1.0, 1.0], vec![0.5, 0.5], vec![0.5, 1.0]],
            vec![0.0, 1.0, 0.0, 1.0, 1.0, 0.0],
        ),
        ((0..12).map(|i| vec![f64::from(i)]).collect(), vec![0., 0., 1., 0., 0., 1., 1., 0., 1., 1., 1., 1.]),
        (
            (0..16).map(|i| vec![f64::from(i % 4), f64::from(i / 4)]).collect(),
            (0..16).map(|i| f64::from((i % 4 + i / 4) % 3 == 0)).collect(),
        ),
    ];
    for (rows, y) in designs {
        let x = Design::from_rows(&rows);
        let w = vec![1.0; y.len()];
        let basis = enumerate_basis(&x, 2, 200, 0);
        let problem = Problem { columns: &basis.columns, y: &y, w: &w, offset: None, family: Family::Binomial };
        let dense = basis.dense(y.len());
        for frac in [0.5, 0.1, 0.02] {
            let lambda = frac * problem.lambda_max();
            let s = solve_checked(&problem, lambda);
            let (o0, ob) = proximal_oracle(&dense, &y, &w, lambda);
            let ours = dense_eta(&dense, s.intercept, &s.beta);
            let oracle = dense_eta(&dense, o0, &ob);
            for (a, b) in ours.iter().zip(&oracle) {
                assert!((expit(*a) - expit(*b)).abs() < 1e-4, "lambda {lambda}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn kkt_holds_along_path() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..60).map(|_| vec![rng.gen_range(0.0..1.0), f64::from(rng.gen_bool(0.5))]).collect();
        let y: Vec<f64> = rows.iter().map(|r| f64::from(rng.gen::<f64>() < expit(2.0 * r[0] - r[1]))).collect();
        let x = Design::from_rows(&rows);
        let basis = enumerate_basis(&x, 2, 30, seed);
        let w = vec![1.0; 60];
        let problem = Problem { columns: &basis.columns, y: &y, w: &w, offset: None, family: Family::Binomial };
        let mut warm: Option<Solution> = None;
        for lambda in lambda_path(problem.lambda_max(), 10, 1e-2) {
            let s = problem.solve(lambda, warm.as_ref(), 1e-10, 10_000).unwrap();
            assert!(problem.kkt_violation(lambda, &s) < 1e-5);
            warm = Some(s);
        }
    }
}

#[test]
fn pure_noise_gives_intercept_only() {
    let mut hits = 0;
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let rows: Vec<Vec<f64>> = (0..100).map(|_| vec![rng.gen_range(0.0..1.0)]).collect();
        let y: Vec<f64> = (0..100).map(|_| f64::from(rng.gen_bool(0.4))).collect();
        let opts = HalOptions { seed, max_knots: 50, one_se: true, ..HalOptions::default() };
        let m = fit_hal_cv(&Design::from_rows(&rows), &y, &[1.0; 100], Family::Binomial, &opts).unwrap();
        hits += usize::from(m.is_intercept_only());
    }
    assert!(hits >= 45, "intercept-only in {hits} of 50");
}

#[test]
fn constant_outcome_is_intercept_only() {
    let x = Design::from_rows(&(0..20).map(|i| vec![f64::from(i % 5), f64::from(i % 2)]).collect::<Vec<_>>());
    for lambda in [1e-6, 1e-3, 1.0] {
        let m = fit_hal(&x, &[1.0; 20], &[1.0; 20], Family::Binomial, lambda, &HalOptions::default()).unwrap();
        assert!(m.is_intercept_only());
    }
}

fn mse_at(n: usize, seed: u64) -> f64 {
    let truth = |x: f64| if x >= 0.3 { if x >= 0.7 { 0.8 } else { 0.5 } } else { 0.2 };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.gen_range(0.0..1.0)]).collect();
    let y: Vec<f64> = rows.iter().map(|r| f64::from(rng.gen::<f64>() < truth(r[0]))).collect();
    let opts = HalOptions { seed, max_knots: 60, n_lambda: 20, ..HalOptions::default() };
    let m = fit_hal_cv(&Design::from_rows(&rows), &y, &vec![1.0; n], Family::Binomial, &opts).unwrap();
    let grid = 200;
    (0..grid)
        .map(|k| {
            let x = (k as f64 + 0.5) / grid as f64;
            (expit(m.linear_predictor(&[x])) - truth(x)).powi(2)
        })
        .sum::<f64>()
        / grid as f64
}

#[test]
fn error_shrinks_with_sample_size() {
    let small: f64 = (0..20).map(|s| mse_at(200, s)).sum::<f64>() / 20.0;
    let large: f64 = (0..20).map(|s| mse_at(800, 100 + s)).sum::<f64>() / 20.0;
    assert!(large < small, "mse {large} at 800 vs {small} at 200");
}

#[test]
fn model_round_trips_through_json() {
    let (x, y) = step_design(40, 3);
    let m = fit_hal(&x, &y, &[1.0; 40], Family::Binomial, 0.01, &HalOptions::default()).unwrap();
    let back: HalModel = serde_json::from_str(&serde_json::to_string(&m).unwrap()).unwrap();
    assert_eq!(back, m);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn kkt_and_norm_on_random_designs(
        seed in 0u64..10_000,
        n in 8usize..40,
        frac in 0.01f64..0.9,
        poisson in any::<bool>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| vec![f64::from(rng.gen_range(0..6)), f64::from(rng.gen_range(0..3))]).collect();
        let family = if poisson { Family::Poisson } else { Family::Binomial };
        let y: Vec<f64> = (0..n)
            .map(|_| if poisson { f64::from(rng.gen_range(0..4)) } else { f64::from(rng.gen_bool(0.5)) })
            .collect();
        let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..2.0)).collect();
        let x = Design::from_rows(&rows);
        let basis = enumerate_basis(&x, 2, 200, seed);
        let problem = Problem { columns: &basis.columns, y: &y, w: &w, offset: None, family };
        let lambda = frac * problem.lambda_max();
        prop_assume!(lambda > 0.0);
        let s = problem.solve(lambda, None, 1e-10, 10_000).unwrap();
        prop_assert!(problem.kkt_violation(lambda, &s) < 1e-5);
        let m = cttmle_core::hal::to_model(&basis, family, lambda, &s);
        let norm = m.intercept.abs() + m.terms.iter().map(|(_, b)| b.abs()).sum::<f64>();
        prop_assert_eq!(m.norm, norm);
    }
}
