//! Targeting: logistic fluctuations of the covariate-branch regression and
//! of the three outcome-side hazards along their clever covariates, with a
//! re-sweep after every round, until the empirical mean of the influence
//! curve drops below `sigma / (sqrt(n) log n)`.

use serde::{Deserialize, Serialize};

use crate::gcomp::{backward_sweep, eic, mean, variance, Arm, Obs, SweepState, A, D, L};
use crate::simulate::expit;

/// One row of a one-dimensional logistic fluctuation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlucRow {
    pub y: f64,
    pub offset: f64,
    pub h: f64,
}

/// Mean quasi-binomial loss along the fluctuation.
pub fn fluctuation_loss(rows: &[FlucRow], eps: f64) -> f64 {
    let total: f64 = rows.iter().map(|r| crate::nuisance::binomial_loss(r.y, r.offset + eps * r.h)).sum();
    total / rows.len().max(1) as f64
}

/// Minus the derivative of [`fluctuation_loss`] times the row count.
pub fn fluctuation_score(rows: &[FlucRow], eps: f64) -> f64 {
    rows.iter().map(|r| r.h * (r.y - expit(r.offset + eps * r.h))).sum()
}

fn fluctuation_info(rows: &[FlucRow], eps: f64) -> f64 {
    rows.iter()
        .map(|r| {
            let p = expit(r.offset + eps * r.h);
            r.h * r.h * p * (1.0 - p)
        })
        .sum()
}

pub const EPS_BOUND: f64 = 10.0;

/// Root of the fluctuation score on `[-EPS_BOUND, EPS_BOUND]` by Newton
/// steps safeguarded with bisection. Returns the bound when the root lies
/// outside.
pub fn solve_epsilon(rows: &[FlucRow], tol: f64) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    let (mut lo, mut hi) = (-EPS_BOUND, EPS_BOUND);
    if fluctuation_score(rows, hi) >= 0.0 {
        return hi;
    }
    if fluctuation_score(rows, lo) <= 0.0 {
        return lo;
    }
    let mut eps = 0.0;
    for _ in 0..200 {
        let s = fluctuation_score(rows, eps);
        if s.abs() < tol {
            break;
        }
        // Score is decreasing in eps.
        if s > 0.0 {
            lo = eps;
        } else {
            hi = eps;
        }
        let info = fluctuation_info(rows, eps);
        let newton = if info > 0.0 { eps + s / info } else { f64::NAN };
        eps = if newton.is_finite() && newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
        if hi - lo < 1e-14 {
            break;
        }
    }
    eps
}

/// Fluctuation rows of the covariate-branch regression.
pub fn zl_rows(arm: &Arm, state: &SweepState) -> Vec<FlucRow> {
    arm.rows
        .iter()
        .zip(&state.rows)
        .filter(|(row, _)| row.obs == Obs::Cov && row.h_obs > 0.0)
        .map(|(row, v)| FlucRow { y: v.z, offset: row.base[1] + arm.eps_l * row.h_mod, h: row.h_mod })
        .collect()
}

/// Fluctuation rows of hazard `k` (one of [`L`], [`A`], [`D`]).
pub fn hazard_rows(arm: &Arm, state: &SweepState, k: usize) -> Vec<FlucRow> {
    arm.rows
        .iter()
        .zip(&state.rows)
        .filter_map(|(row, v)| {
            let hk = [v.h_l, v.h_a, v.h_d][k];
            (row.at_risk(k) && row.h_obs * hk != 0.0).then(|| FlucRow {
                y: f64::from(u8::from(row.obs.jumped(k))),
                offset: row.lam_logit[k],
                h: row.h_obs * hk,
            })
        })
        .collect()
}

/// Moves the covariate-branch regression by `eps` along `h_mod`.
pub fn fluctuate_zl(arm: &mut Arm, eps: f64) {
    arm.eps_l += eps;
}

/// Moves hazard `k` by `eps` along `h_mod * h_k` on every row.
pub fn fluctuate_hazard(arm: &mut Arm, state: &SweepState, k: usize, eps: f64) {
    for (row, v) in arm.rows.iter_mut().zip(&state.rows) {
        if row.allows(k) {
            let hk = [v.h_l, v.h_a, v.h_d][k];
            row.lam_logit[k] += eps * row.h_mod * hk;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TmleOptions {
    pub max_iter: usize,
    pub eps_tol: f64,
    /// Keep the influence-curve scale of the initial estimate in the
    /// stopping rule.
    pub freeze_sigma: bool,
}

impl Default for TmleOptions {
    fn default() -> Self {
        TmleOptions { max_iter: 50, eps_tol: 1e-10, freeze_sigma: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TmleResult {
    pub intervention: String,
    pub psi: f64,
    pub psi_initial: f64,
    pub se: f64,
    /// Standard error of the initial estimator from its own influence curve.
    pub se_initial: f64,
    pub eic: Vec<f64>,
    /// Influence curve at the initial fit.
    #[serde(skip)]
    pub eic_initial: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// |P_n D*| at the returned iterate.
    pub mean_eic: f64,
    pub stop_threshold: f64,
    /// P_n D* before each iteration and at the end.
    pub eic_mean_trace: Vec<f64>,
    /// Per-iteration fluctuation parameters `[eps_l_branch, eps_l, eps_a, eps_d]`.
    pub epsilons: Vec<[f64; 4]>,
}

/// Plug-in estimate, influence curve and standard error of an arm.
pub fn eic_evaluate(arm: &Arm) -> (f64, Vec<f64>, f64) {
    let state = backward_sweep(arm);
    let psi = state.psi();
    let d = eic(arm, &state, psi);
    let se = (variance(&d) / d.len().max(1) as f64).sqrt();
    (psi, d, se)
}

pub fn stop_threshold(sigma: f64, n: usize) -> f64 {
    let n = n.max(1) as f64;
    sigma / (n.sqrt() * n.ln().max(1.0))
}

/// Targets the arm in place and returns the estimate. On
/// non-convergence the iterate with the smallest |P_n D*| is kept.
pub fn run_tmle(arm: &mut Arm, opts: TmleOptions) -> TmleResult {
    let n = arm.subjects.len();
    let mut state = backward_sweep(arm);
    let psi_initial = state.psi();
    let mut d = eic(arm, &state, psi_initial);
    let sigma0 = variance(&d).sqrt();
    let eic_initial = d.clone();
    let mut best: (f64, Vec<[f64; 3]>, f64) = (f64::INFINITY, Vec::new(), 0.0);
    let mut epsilons = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    let mut trace = Vec::new();
    loop {
        trace.push(mean(&d));
        let pn = mean(&d).abs();
        let sigma = if opts.freeze_sigma { sigma0 } else { variance(&d).sqrt() };
        if pn < best.0 {
            best = (pn, arm.rows.iter().map(|r| r.lam_logit).collect(), arm.eps_l);
        }
        if pn <= stop_threshold(sigma, n) {
            converged = true;
            break;
        }
        if iterations >= opts.max_iter {
            break;
        }
        iterations += 1;
        let e_l = solve_epsilon(&zl_rows(arm, &state), opts.eps_tol);
        let mut eps = [e_l, 0.0, 0.0, 0.0];
        for (j, k) in [L, A, D].into_iter().enumerate() {
            eps[j + 1] = solve_epsilon(&hazard_rows(arm, &state, k), opts.eps_tol);
        }
        fluctuate_zl(arm, e_l);
        for (j, k) in [L, A, D].into_iter().enumerate() {
            fluctuate_hazard(arm, &state, k, eps[j + 1]);
        }
        epsilons.push(eps);
        state = backward_sweep(arm);
        d = eic(arm, &state, state.psi());
    }
    if !converged {
        for (row, lam) in arm.rows.iter_mut().zip(best.1) {
            row.lam_logit = lam;
        }
        arm.eps_l = best.2;
        state = backward_sweep(arm);
        d = eic(arm, &state, state.psi());
    }
    let psi = state.psi();
    let sigma = variance(&d).sqrt();
    TmleResult {
        intervention: arm.intervention.clone(),
        psi,
        psi_initial,
        se: sigma / (n.max(1) as f64).sqrt(),
        se_initial: sigma0 / (n.max(1) as f64).sqrt(),
        mean_eic: mean(&d).abs(),
        stop_threshold: stop_threshold(if opts.freeze_sigma { sigma0 } else { sigma }, n),
        eic: d,
        eic_initial,
        eic_mean_trace: trace,
        iterations,
        converged,
        epsilons,
    }
}
