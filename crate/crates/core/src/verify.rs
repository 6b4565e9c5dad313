//! Named numerical checks on randomly drawn enumerable models: the backward
//! sweep against exact g-computation, the first-order expansion of the
//! target parameter, and the fluctuation scores against the influence
//! curve.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::events::{Branch, HistorySnapshot, Intervention, ObservedPath, Process};
use crate::gcomp::enumerate::{enumerate_eic_mean, ExactQ, TinyModel, MAX_DECISION_POINTS};
use crate::gcomp::{backward_sweep, build_arm, eic_terms, ArmOptions, QModel, A, D, L};
use crate::simulate::expit;
use crate::target::{fluctuation_loss, hazard_rows, zl_rows, FlucRow};

pub const CHECKS: [&str; 4] = ["enumeration_oracle", "von_mises_identity", "double_robust_zero_remainder", "score_identities"];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Random models per check (score identities use this many per
    /// fluctuation).
    pub cases: usize,
    /// Shift added to the death-hazard logit seen by the sweep; nonzero
    /// values must make the oracle check fail.
    pub wrong_hazard_shift: f64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions { seed: 20240501, cases: 100, wrong_hazard_shift: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub cases: usize,
    pub max_error: f64,
    pub tolerance: f64,
}

const PROCESS_NAMES: [&str; 4] = ["cov", "trt", "censor", "death"];

fn coef(rng: &mut ChaCha8Rng, intercept: (f64, f64)) -> [f64; 6] {
    let mut c = [0.0; 6];
    c[0] = rng.gen_range(intercept.0..intercept.1);
    for v in c.iter_mut().skip(1) {
        *v = rng.gen_range(-0.8..0.8);
    }
    // Time enters through tick index 1..=k; keep its slope small.
    c[5] *= 0.3;
    c
}

/// A random enumerable model with at most `max_points` decision points.
pub fn random_tiny(rng: &mut ChaCha8Rng, max_points: usize) -> TinyModel {
    loop {
        let k = rng.gen_range(1..=4);
        let ticks: Vec<Vec<String>> = (0..k)
            .map(|_| {
                let mut t: Vec<String> =
                    PROCESS_NAMES.iter().filter(|_| rng.gen_bool(0.55)).map(|s| s.to_string()).collect();
                if t.is_empty() {
                    t.push("death".into());
                }
                t
            })
            .collect();
        let m = TinyModel {
            ticks,
            p_l0: rng.gen_range(0.2..0.8),
            pi0: [rng.gen_range(-0.8..0.8), rng.gen_range(-0.8..0.8)],
            hazard_d: coef(rng, (-1.8, -0.2)),
            hazard_a: coef(rng, (-1.2, 0.4)),
            hazard_l: coef(rng, (-1.2, 0.4)),
            hazard_c: coef(rng, (-2.5, -1.0)),
            mu: coef(rng, (-0.8, 0.8)),
            pi: coef(rng, (-0.8, 0.8)),
        };
        if m.decision_points().is_ok_and(|n| n <= max_points && n >= 3) {
            return m;
        }
    }
}

/// The same model with every component moved.
pub fn perturb(rng: &mut ChaCha8Rng, m: &TinyModel, q: bool, g: bool) -> TinyModel {
    let mut p = m.clone();
    let mut jiggle = |c: &mut [f64]| {
        for v in c.iter_mut() {
            *v += rng.gen_range(-0.5..0.5);
        }
    };
    if q {
        jiggle(&mut p.hazard_d);
        jiggle(&mut p.hazard_a);
        jiggle(&mut p.hazard_l);
        jiggle(&mut p.mu);
        let mut l = [p.p_l0];
        jiggle(&mut l);
        p.p_l0 = l[0].clamp(0.05, 0.95);
    }
    if g {
        jiggle(&mut p.hazard_c);
        jiggle(&mut p.pi);
        jiggle(&mut p.pi0);
    }
    p
}

fn rules(rng: &mut ChaCha8Rng) -> Intervention {
    match rng.gen_range(0..3) {
        0 => Intervention::static_rule(0),
        1 => Intervention::static_rule(1),
        _ => Intervention::parse("start_when_l").expect("registered rule"),
    }
}

struct Shifted<'a> {
    inner: ExactQ<'a>,
    shift: f64,
}

impl QModel for Shifted<'_> {
    fn hazard_logit(&self, p: Process, s: &HistorySnapshot) -> f64 {
        let v = self.inner.hazard_logit(p, s);
        if p == Process::Death {
            v + self.shift
        } else {
            v
        }
    }

    fn branch_logit(&self, s: &HistorySnapshot, b: Branch) -> f64 {
        self.inner.branch_logit(s, b)
    }
}

/// Largest |sweep psi - exact psi| over random models.
pub fn check_enumeration(opts: &VerifyOptions) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut worst: f64 = 0.0;
    for _ in 0..opts.cases {
        let m = random_tiny(&mut rng, MAX_DECISION_POINTS);
        let rule = rules(&mut rng);
        let exact = m.enumerate_gcomp(&rule)?;
        let paths = m.enumerate_paths()?;
        let obs: Vec<ObservedPath> = paths.iter().map(|(p, _)| p.clone()).collect();
        let q = Shifted { inner: ExactQ::new(&m, &rule)?, shift: opts.wrong_hazard_shift };
        let arm = build_arm(&obs, &m.schedule()?, &rule, &q, &m, ArmOptions::default())?;
        let state = backward_sweep(&arm);
        let swept: f64 = paths.iter().zip(&state.z0).map(|((_, pr), z)| pr * z).sum();
        worst = worst.max((swept - exact).abs());
    }
    Ok(CheckResult {
        name: "enumeration_oracle".into(),
        passed: worst <= 1e-10,
        cases: opts.cases,
        max_error: worst,
        tolerance: 1e-10,
    })
}

/// `psi(P) - psi(P0) + P0 D*(P) - R2(P, P0)` over random pairs.
pub fn check_von_mises(opts: &VerifyOptions) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x766d);
    let mut worst: f64 = 0.0;
    for _ in 0..opts.cases {
        let m0 = random_tiny(&mut rng, MAX_DECISION_POINTS);
        let m = perturb(&mut rng, &m0, true, true);
        let rule = rules(&mut rng);
        worst = worst.max(enumerate_eic_mean(&m0, &m, &rule)?.residual().abs());
    }
    Ok(CheckResult {
        name: "von_mises_identity".into(),
        passed: worst <= 1e-8,
        cases: opts.cases,
        max_error: worst,
        tolerance: 1e-8,
    })
}

/// Largest |R2| when only one of the outcome side and the treatment side
/// is wrong.
pub fn check_double_robust(opts: &VerifyOptions) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x6472);
    let mut worst: f64 = 0.0;
    for i in 0..opts.cases {
        let m0 = random_tiny(&mut rng, MAX_DECISION_POINTS);
        let (q, g) = if i % 2 == 0 { (true, false) } else { (false, true) };
        let m = perturb(&mut rng, &m0, q, g);
        let rule = rules(&mut rng);
        worst = worst.max(enumerate_eic_mean(&m0, &m, &rule)?.r2.abs());
    }
    Ok(CheckResult {
        name: "double_robust_zero_remainder".into(),
        passed: worst <= 1e-12,
        cases: opts.cases,
        max_error: worst,
        tolerance: 1e-12,
    })
}

fn loss_total(rows: &[FlucRow], eps: f64) -> f64 {
    fluctuation_loss(rows, eps) * rows.len() as f64
}

/// `loss_total(rows, d) - loss_total(rows, -d)` summed row by row, with
/// `softplus(a) - softplus(b) = log1p(expm1(a - b) * expit(b))` so that no
/// precision is lost to cancellation.
fn loss_gap(rows: &[FlucRow], d: f64) -> f64 {
    rows.iter()
        .map(|r| {
            let delta = d * r.h;
            let b = r.offset - delta;
            let sp = if r.y * delta == 0.0 && b == f64::NEG_INFINITY {
                0.0
            } else {
                ((2.0 * delta).exp_m1() * expit(b)).ln_1p()
            };
            sp - 2.0 * r.y * delta
        })
        .sum()
}

/// Finite-difference derivative of each fluctuation loss at zero against
/// the summed influence-curve component; relative error.
pub fn check_scores(opts: &VerifyOptions) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x7363);
    let mut worst: f64 = 0.0;
    let mut done = 0;
    while done < opts.cases {
        let m0 = random_tiny(&mut rng, 9);
        let m = perturb(&mut rng, &m0, true, false);
        let rule = rules(&mut rng);
        let obs: Vec<ObservedPath> = m0.enumerate_paths()?.into_iter().map(|(p, _)| p).collect();
        let q = ExactQ::new(&m, &rule)?;
        let arm = build_arm(&obs, &m0.schedule()?, &rule, &q, &m0, ArmOptions::default())?;
        let state = backward_sweep(&arm);
        let terms = eic_terms(&arm, &state);
        let sets = [zl_rows(&arm, &state), hazard_rows(&arm, &state, L), hazard_rows(&arm, &state, A), hazard_rows(&arm, &state, D)];
        if sets.iter().any(|r| r.is_empty()) {
            continue;
        }
        for (j, rows) in sets.iter().enumerate() {
            // Central differences at steps 1e-5 and 2e-5, combined to cancel
            // the third-derivative term.
            let h = 1e-5;
            let fd = -(8.0 * loss_gap(rows, h) - loss_gap(rows, 2.0 * h)) / (12.0 * h);
            let analytic: f64 = terms.iter().map(|t| t[j]).sum();
            let scale = analytic.abs().max(1e-3);
            worst = worst.max((fd - analytic).abs() / scale);
            // The row-wise gap must agree with the loss itself.
            let direct = loss_total(rows, h) - loss_total(rows, -h);
            if (direct - loss_gap(rows, h)).abs() > 1e-10 * rows.len() as f64 {
                worst = f64::INFINITY;
            }
        }
        done += 1;
    }
    Ok(CheckResult { name: "score_identities".into(), passed: worst < 1e-6, cases: done, max_error: worst, tolerance: 1e-6 })
}

pub fn run_check(name: &str, opts: &VerifyOptions) -> Result<CheckResult> {
    match name {
        "enumeration_oracle" => check_enumeration(opts),
        "von_mises_identity" => check_von_mises(opts),
        "double_robust_zero_remainder" => check_double_robust(opts),
        "score_identities" => check_scores(opts),
        _ => Err(crate::Error::Input(format!("unknown check `{name}`"))),
    }
}

pub fn run_all(opts: &VerifyOptions) -> Result<Vec<CheckResult>> {
    CHECKS.iter().map(|c| run_check(c, opts)).collect()
}
