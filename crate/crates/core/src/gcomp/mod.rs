//! Iterated-expectation engine.
//!
//! For one intervention every subject is replayed on the modified history
//! (baseline and monitored treatment values replaced by the rule, censoring
//! removed) and laid out as one [`Row`] per at-risk tick. A backward sweep
//! over the rows mixes out death, treatment monitoring and covariate
//! monitoring at each tick:
//!
//! ```text
//! B = lam_l * V_l + (1 - lam_l) * V_none
//! A = lam_a * V_a + (1 - lam_a) * B
//! D = lam_d       + (1 - lam_d) * A
//! ```
//!
//! `V_none` and `V_a` are the running value when the observed increment is
//! the one in question and come from the pooled regression otherwise; `V_l`
//! always comes from the regression, which integrates out the new covariate
//! value.

pub mod enumerate;

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{
    baseline_snapshot, Branch, FeatureSpec, HistorySnapshot, Intervention, Label, Mark, ObservedPath, Process,
    Replay, TickSchedule,
};
use crate::hal::{self, HalOptions};
use crate::nuisance::{self, fit_binary, Design, GFit, GlmOptions, HazardModel, Predictor};
use crate::simulate::expit;

/// Lower bound for inverse-probability denominators.
pub const MIN_DENOMINATOR: f64 = 1e-12;

pub const L: usize = 0;
pub const A: usize = 1;
pub const D: usize = 2;
const Q_PROCESSES: [Process; 3] = [Process::Cov, Process::Trt, Process::Death];

const B_NONE: usize = 0;
const B_L: usize = 1;
const B_A: usize = 2;
const BRANCHES: [Branch; 3] = [Branch::None, Branch::Cov, Branch::Trt];

/// Outcome-side components evaluated on modified histories.
pub trait QModel: Sync {
    /// Logit of the per-tick hazard of covariate monitoring, treatment
    /// monitoring or death.
    fn hazard_logit(&self, p: Process, s: &HistorySnapshot) -> f64;
    /// Logit of the value after the tick's increments given `b`.
    fn branch_logit(&self, s: &HistorySnapshot, b: Branch) -> f64;
}

/// Treatment and censoring mechanism.
pub trait GModel: Sync {
    fn pi0(&self, s: &HistorySnapshot) -> f64;
    fn pi(&self, s: &HistorySnapshot) -> f64;
    fn censor(&self, s: &HistorySnapshot) -> f64;
}

impl GModel for GFit {
    fn pi0(&self, s: &HistorySnapshot) -> f64 {
        self.pi0.predict(s, self.tau)
    }

    fn pi(&self, s: &HistorySnapshot) -> f64 {
        self.pi.predict(s, self.tau)
    }

    fn censor(&self, s: &HistorySnapshot) -> f64 {
        self.censor.predict(s, self.tau)
    }
}

/// Fitted hazards for covariate monitoring, treatment monitoring and death,
/// plus the pooled iterated regression once fitted.
#[derive(Clone, Debug)]
pub struct FittedQ {
    pub tau: f64,
    pub hazards: [Option<HazardModel>; 3],
    pub z: Option<Predictor>,
}

impl QModel for FittedQ {
    fn hazard_logit(&self, p: Process, s: &HistorySnapshot) -> f64 {
        let k = match p {
            Process::Cov => L,
            Process::Trt => A,
            Process::Death => D,
            Process::Censor => unreachable!("censoring is not an outcome-side process"),
        };
        match &self.hazards[k] {
            Some(h) => crate::simulate::logit(h.predict(s, self.tau)),
            None => f64::NEG_INFINITY,
        }
    }

    fn branch_logit(&self, s: &HistorySnapshot, b: Branch) -> f64 {
        self.z.as_ref().map_or(0.0, |z| z.logit(s, self.tau, b))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Obs {
    None,
    Cov,
    Trt { consistent: bool },
    Censor,
    Death,
}

impl Obs {
    pub fn jumped(&self, k: usize) -> bool {
        matches!((self, k), (Obs::Cov, L) | (Obs::Trt { .. }, A) | (Obs::Death, D))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Row {
    pub time: f64,
    pub mask: u8,
    pub obs: Obs,
    /// Hazard logits for l, a, d; fluctuations are added in place.
    pub lam_logit: [f64; 3],
    /// Regression logits for the none, covariate and treatment branches.
    pub base: [f64; 3],
    /// Clever weight of the observed history (zero after deviation or censoring).
    pub h_obs: f64,
    /// Clever weight of the modified history.
    pub h_mod: f64,
    /// Observed history agrees with the modified history before this tick.
    pub follows: bool,
}

impl Row {
    pub fn allows(&self, k: usize) -> bool {
        self.mask & Q_PROCESSES[k].bit() != 0
    }

    /// Membership in the observed nested risk set.
    pub fn at_risk(&self, k: usize) -> bool {
        self.allows(k)
            && match k {
                D => true,
                A => self.obs != Obs::Death,
                _ => !matches!(self.obs, Obs::Death | Obs::Trt { .. }),
            }
    }

    pub fn lam(&self, k: usize) -> f64 {
        if self.allows(k) {
            expit(self.lam_logit[k])
        } else {
            0.0
        }
    }

    /// Row enters the pooled iterated regression.
    pub fn fits_z(&self) -> bool {
        self.follows && matches!(self.obs, Obs::None | Obs::Cov | Obs::Trt { consistent: true })
    }

    fn fit_branch(&self) -> usize {
        match self.obs {
            Obs::Cov => B_L,
            Obs::Trt { .. } => B_A,
            _ => B_NONE,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectSpan {
    pub start: usize,
    pub end: usize,
    pub y: f64,
    pub follows_baseline: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WeightDiagnostics {
    pub max_weight: f64,
    pub cap_activations: usize,
    /// Subjects whose weight ends at zero (deviation or censoring).
    pub zero_weight_subjects: usize,
    /// Subjects consistent with the rule through the end of follow-up.
    pub consistent_subjects: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ArmOptions {
    pub weight_cap: Option<f64>,
}

/// Row table of one intervention.
#[derive(Clone, Debug)]
pub struct Arm {
    pub tau: f64,
    pub intervention: String,
    pub subjects: Vec<SubjectSpan>,
    pub rows: Vec<Row>,
    pub snaps: Vec<HistorySnapshot>,
    /// Cumulative fluctuation of the covariate branch.
    pub eps_l: f64,
    pub diagnostics: WeightDiagnostics,
    /// Full-horizon weight of each subject.
    pub final_weight: Vec<f64>,
}

pub(crate) fn rule_prob(p1: f64, a: Label) -> f64 {
    if a == 1 {
        p1
    } else {
        1.0 - p1
    }
}

pub fn build_arm(
    paths: &[ObservedPath],
    schedule: &TickSchedule,
    g_star: &Intervention,
    q: &dyn QModel,
    g: &dyn GModel,
    opts: ArmOptions,
) -> Result<Arm> {
    let tau = paths.first().map_or(1.0, |p| p.tau);
    let mut arm = Arm {
        tau,
        intervention: g_star.name.clone(),
        subjects: Vec::with_capacity(paths.len()),
        rows: Vec::new(),
        snaps: Vec::new(),
        eps_l: 0.0,
        diagnostics: WeightDiagnostics::default(),
        final_weight: Vec::with_capacity(paths.len()),
    };
    let cap = |h: f64, d: &mut WeightDiagnostics| -> f64 {
        match opts.weight_cap {
            Some(c) if h > c => {
                d.cap_activations += 1;
                c
            }
            _ => h,
        }
    };
    for path in paths {
        let base = baseline_snapshot(path);
        let a0 = g_star.apply(&base);
        let p0 = rule_prob(g.pi0(&base), a0);
        let follows0 = path.a0 == a0;
        if follows0 && p0 < MIN_DENOMINATOR {
            return Err(Error::ZeroDenominator(format!("subject {}: baseline treatment", path.subject_id)));
        }
        let mut h_mod = cap(1.0 / p0.max(MIN_DENOMINATOR), &mut arm.diagnostics);
        let mut h_obs = if follows0 { h_mod } else { 0.0 };
        let mut follows = follows0;
        let mut replay = Replay::with_a0(path, a0);
        let start = arm.rows.len();
        let mut ev = 0;
        for tick in schedule.ticks_until(path.end_time()) {
            let s = replay.snapshot(path, tick.time);
            let event = path.events.get(ev).filter(|e| TickSchedule::matches(e.time, tick.time));
            let mut override_a = None;
            let obs = match event.map(|e| &e.mark) {
                None => Obs::None,
                Some(Mark::Cov(_)) => Obs::Cov,
                Some(Mark::Trt(a)) => {
                    let r = g_star.apply(&s);
                    override_a = Some(r);
                    Obs::Trt { consistent: *a == r }
                }
                Some(Mark::Censor) => Obs::Censor,
                Some(Mark::Death) => Obs::Death,
            };
            let mut lam_logit = [0.0; 3];
            let mut base = [0.0; 3];
            for (k, p) in Q_PROCESSES.iter().enumerate() {
                if tick.allows(*p) {
                    lam_logit[k] = q.hazard_logit(*p, &s);
                }
            }
            for (k, b) in BRANCHES.iter().enumerate() {
                base[k] = q.branch_logit(&s, *b);
            }
            arm.rows.push(Row { time: tick.time, mask: tick.mask, obs, lam_logit, base, h_obs, h_mod, follows });
            // Treatment decision at this tick.
            if let Obs::Trt { consistent } = obs {
                let pr = rule_prob(g.pi(&s), override_a.unwrap());
                if follows && consistent && pr < MIN_DENOMINATOR {
                    return Err(Error::ZeroDenominator(format!(
                        "subject {}: treatment at {}",
                        path.subject_id, tick.time
                    )));
                }
                h_mod = cap(h_mod / pr.max(MIN_DENOMINATOR), &mut arm.diagnostics);
                h_obs = if consistent { cap(h_obs / pr.max(MIN_DENOMINATOR), &mut arm.diagnostics) } else { 0.0 };
                follows &= consistent;
            }
            // Censoring decision, after the outcome-side increments.
            let c_at_risk = tick.allows(Process::Censor) && matches!(obs, Obs::None | Obs::Censor);
            if c_at_risk {
                let surv = 1.0 - g.censor(&s);
                if follows && surv < MIN_DENOMINATOR {
                    return Err(Error::ZeroDenominator(format!(
                        "subject {}: censoring at {}",
                        path.subject_id, tick.time
                    )));
                }
                h_mod = cap(h_mod / surv.max(MIN_DENOMINATOR), &mut arm.diagnostics);
                if obs == Obs::Censor {
                    h_obs = 0.0;
                    follows = false;
                } else {
                    h_obs = cap(h_obs / surv.max(MIN_DENOMINATOR), &mut arm.diagnostics);
                }
            }
            arm.snaps.push(s);
            if let Some(e) = event {
                if !matches!(e.mark, Mark::Censor) {
                    replay.apply(e, override_a);
                }
                ev += 1;
            }
        }
        if ev != path.events.len() {
            return Err(Error::Input(format!("subject {}: events off the tick schedule", path.subject_id)));
        }
        arm.diagnostics.max_weight = arm.diagnostics.max_weight.max(h_obs);
        if h_obs > 0.0 {
            arm.diagnostics.consistent_subjects += 1;
        } else {
            arm.diagnostics.zero_weight_subjects += 1;
        }
        arm.final_weight.push(h_obs);
        arm.subjects.push(SubjectSpan { start, end: arm.rows.len(), y: path.outcome(), follows_baseline: follows0 });
    }
    Ok(arm)
}

/// Per-row values of one sweep.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RowValues {
    /// Value of the observed increment at this tick.
    pub z: f64,
    pub v_none: f64,
    pub v_l: f64,
    pub v_a: f64,
    /// Covariate monitoring mixed out.
    pub mix_l: f64,
    /// Treatment monitoring mixed out.
    pub mix_a: f64,
    /// Death mixed out; equals the value at the start of the tick.
    pub mix_d: f64,
    pub h_l: f64,
    pub h_a: f64,
    pub h_d: f64,
    pub lam: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepState {
    pub rows: Vec<RowValues>,
    /// Value at time zero per subject.
    pub z0: Vec<f64>,
}

impl SweepState {
    pub fn psi(&self) -> f64 {
        self.z0.iter().sum::<f64>() / self.z0.len().max(1) as f64
    }
}

fn row_values(row: &Row, eps_l: f64, v_next: f64) -> RowValues {
    let lam = [row.lam(L), row.lam(A), row.lam(D)];
    let p_none = expit(row.base[B_NONE]);
    let v_l = expit(row.base[B_L] + eps_l * row.h_mod);
    let v_none = if row.obs == Obs::None { v_next } else { p_none };
    let v_a = if matches!(row.obs, Obs::Trt { .. }) { v_next } else { expit(row.base[B_A]) };
    let mix_l = lam[L] * v_l + (1.0 - lam[L]) * v_none;
    let mix_a = lam[A] * v_a + (1.0 - lam[A]) * mix_l;
    let mix_d = lam[D] + (1.0 - lam[D]) * mix_a;
    let z = match row.obs {
        Obs::None | Obs::Cov | Obs::Trt { .. } => v_next,
        Obs::Death => 1.0,
        Obs::Censor => p_none,
    };
    RowValues { z, v_none, v_l, v_a, mix_l, mix_a, mix_d, h_l: v_l - v_none, h_a: v_a - mix_l, h_d: 1.0 - mix_a, lam }
}

/// Backward sweep over every subject.
pub fn backward_sweep(arm: &Arm) -> SweepState {
    let mut rows = vec![RowValues::default(); arm.rows.len()];
    let mut z0 = Vec::with_capacity(arm.subjects.len());
    for s in &arm.subjects {
        let mut v = s.y;
        for r in (s.start..s.end).rev() {
            let rv = row_values(&arm.rows[r], arm.eps_l, v);
            debug_assert!((rv.mix_l - (rv.lam[L] * rv.v_l + (1.0 - rv.lam[L]) * rv.v_none)).abs() < 1e-15);
            v = rv.mix_d;
            rows[r] = rv;
        }
        z0.push(v);
    }
    SweepState { rows, z0 }
}

/// Per-subject components of the influence curve: the covariate-branch
/// residual and the three hazard martingale terms, each with its clever
/// weight.
pub fn eic_terms(arm: &Arm, state: &SweepState) -> Vec<[f64; 4]> {
    arm.subjects
        .iter()
        .map(|s| {
            let mut t = [0.0; 4];
            for r in s.start..s.end {
                let row = &arm.rows[r];
                if row.h_obs == 0.0 {
                    continue;
                }
                let v = &state.rows[r];
                if row.obs == Obs::Cov {
                    t[0] += row.h_obs * (v.z - v.v_l);
                }
                for (k, h) in [(L, v.h_l), (A, v.h_a), (D, v.h_d)] {
                    if row.at_risk(k) {
                        t[k + 1] += row.h_obs * h * (f64::from(u8::from(row.obs.jumped(k))) - v.lam[k]);
                    }
                }
            }
            t
        })
        .collect()
}

/// Per-subject efficient influence curve at `psi`.
pub fn eic(arm: &Arm, state: &SweepState, psi: f64) -> Vec<f64> {
    eic_terms(arm, state).iter().zip(&state.z0).map(|(t, z0)| z0 - psi + t.iter().sum::<f64>()).collect()
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len().max(1) as f64
}

/// Writes one line per row: subject, tick, z, z_L, z_Nl, z_Na, z_Nd.
pub fn dump_sweep<W: Write>(arm: &Arm, state: &SweepState, w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["subject", "tick", "z", "z_L", "z_Nl", "z_Na", "z_Nd"])?;
    for (i, s) in arm.subjects.iter().enumerate() {
        for r in s.start..s.end {
            let v = &state.rows[r];
            let z_l = if arm.rows[r].obs == Obs::Cov { v.v_l } else { v.z };
            wtr.write_record([
                i.to_string(),
                arm.rows[r].time.to_string(),
                v.z.to_string(),
                z_l.to_string(),
                v.mix_l.to_string(),
                v.mix_a.to_string(),
                v.mix_d.to_string(),
            ])?;
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Design of the pooled iterated regression: for every row, the feature
/// vectors of the three branches.
pub struct ZDesign {
    pub p: usize,
    pub x: Vec<f64>,
}

impl ZDesign {
    pub fn new(arm: &Arm, spec: &FeatureSpec) -> Self {
        let p = spec.len();
        let mut x = Vec::with_capacity(arm.rows.len() * 3 * p);
        for s in &arm.snaps {
            for b in BRANCHES {
                spec.eval_into(s, arm.tau, b, &mut x);
            }
        }
        ZDesign { p, x }
    }

    fn at(&self, r: usize, b: usize) -> &[f64] {
        let o = (r * 3 + b) * self.p;
        &self.x[o..o + self.p]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZFitInfo {
    pub iterations: usize,
    pub converged: bool,
    pub max_score: f64,
    pub rows: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ZFitOptions {
    pub ridge: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for ZFitOptions {
    fn default() -> Self {
        ZFitOptions { ridge: 1e-6, tol: 1e-9, max_iter: 50 }
    }
}

fn set_base(arm: &mut Arm, zx: &ZDesign, beta: &[f64]) {
    for (r, row) in arm.rows.iter_mut().enumerate() {
        for b in 0..3 {
            let e = nuisance::dot(zx.at(r, b), beta);
            row.base[b] = if e.is_infinite() { e } else { e.clamp(-nuisance::ETA_CLAMP, nuisance::ETA_CLAMP) };
        }
    }
}

/// Score of the pooled regression and, if requested, its Jacobian, with
/// outcomes given by a sweep at the current coefficients.
fn z_score(arm: &Arm, zx: &ZDesign, beta: &[f64], ridge: f64, jac: bool) -> (Vec<f64>, Option<DMatrix<f64>>) {
    let p = zx.p;
    let mut u = vec![0.0; p];
    let mut j = if jac { Some(DMatrix::<f64>::zeros(p, p)) } else { None };
    let mut dv = vec![0.0; p];
    let mut tmp = [vec![0.0; p], vec![0.0; p], vec![0.0; p]];
    for s in &arm.subjects {
        let mut v = s.y;
        dv.iter_mut().for_each(|x| *x = 0.0);
        for r in (s.start..s.end).rev() {
            let row = &arm.rows[r];
            let rv = row_values(row, arm.eps_l, v);
            if let Some(jm) = j.as_mut() {
                let pn = expit(row.base[B_NONE]);
                let pl = rv.v_l;
                let pa = expit(row.base[B_A]);
                let (xn, xl, xa) = (zx.at(r, B_NONE), zx.at(r, B_L), zx.at(r, B_A));
                // tmp[0] = dV_none, tmp[1] = dV_l, tmp[2] = dV_a
                for k in 0..p {
                    tmp[0][k] = if row.obs == Obs::None { dv[k] } else { pn * (1.0 - pn) * xn[k] };
                    tmp[1][k] = pl * (1.0 - pl) * xl[k];
                    tmp[2][k] = if matches!(row.obs, Obs::Trt { .. }) { dv[k] } else { pa * (1.0 - pa) * xa[k] };
                }
                if row.fits_z() {
                    // dz = dv_next on fit rows.
                    let b = row.fit_branch();
                    let x = zx.at(r, b);
                    let mu = expit(row.base[b]);
                    let w = mu * (1.0 - mu);
                    for a in 0..p {
                        if x[a] == 0.0 {
                            continue;
                        }
                        for c in 0..p {
                            jm[(a, c)] += x[a] * (dv[c] - w * x[c]);
                        }
                    }
                }
                let (ll, la, ld) = (rv.lam[L], rv.lam[A], rv.lam[D]);
                for k in 0..p {
                    let db = ll * tmp[1][k] + (1.0 - ll) * tmp[0][k];
                    let da = la * tmp[2][k] + (1.0 - la) * db;
                    dv[k] = (1.0 - ld) * da;
                }
            }
            if row.fits_z() {
                let b = row.fit_branch();
                let x = zx.at(r, b);
                let res = rv.z - expit(row.base[b]);
                for a in 0..p {
                    u[a] += x[a] * res;
                }
            }
            v = rv.mix_d;
        }
    }
    for a in 0..p {
        u[a] -= ridge * beta[a];
        if let Some(jm) = j.as_mut() {
            jm[(a, a)] -= ridge;
        }
    }
    (u, j)
}

/// Fits the pooled iterated regression as a fixed point: outcomes are
/// sweep values, which depend on the regression through the counterfactual
/// branches. Solved by Newton's method on the score with the exact
/// Jacobian of the sweep. Sets the arm's branch logits and returns the
/// coefficients.
pub fn fit_z_glm(arm: &mut Arm, spec: &FeatureSpec, opts: ZFitOptions) -> Result<(Predictor, ZFitInfo)> {
    let nfit = arm.rows.iter().filter(|r| r.fits_z()).count();
    if nfit == 0 {
        return Err(Error::EmptyRiskSet("iterated regression has no rows".into()));
    }
    let zx = ZDesign::new(arm, spec);
    let p = zx.p;
    // Without deaths and a death hazard that is identically zero, every
    // value is exactly zero.
    let no_death = arm.subjects.iter().all(|s| s.y == 0.0) && arm.rows.iter().all(|r| r.lam(D) == 0.0);
    if let (true, Some(j)) = (no_death, spec.columns().iter().position(|c| c == "1")) {
        let mut beta = vec![0.0; p];
        beta[j] = f64::NEG_INFINITY;
        set_base(arm, &zx, &beta);
        let info = ZFitInfo { iterations: 0, converged: true, max_score: 0.0, rows: nfit };
        return Ok((Predictor::known(spec.clone(), beta), info));
    }
    // Start: a few plain refits.
    let mut beta = vec![0.0; p];
    set_base(arm, &zx, &beta);
    for _ in 0..3 {
        let state = backward_sweep(arm);
        let mut x = Design::new(p);
        let mut y = Vec::with_capacity(nfit);
        for (r, row) in arm.rows.iter().enumerate() {
            if row.fits_z() {
                x.push(zx.at(r, row.fit_branch()));
                y.push(state.rows[r].z);
            }
        }
        let fit = fit_binary(&x, &y, &vec![1.0; y.len()], None, GlmOptions { ridge: opts.ridge, ..GlmOptions::default() })?;
        beta = fit.coefficients;
        set_base(arm, &zx, &beta);
    }
    let norm = |u: &[f64]| u.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let mut iterations = 0;
    let mut converged = false;
    let (mut u, _) = z_score(arm, &zx, &beta, opts.ridge, false);
    for it in 0..opts.max_iter {
        iterations = it + 1;
        if norm(&u) < opts.tol {
            converged = true;
            break;
        }
        let (_, jac) = z_score(arm, &zx, &beta, opts.ridge, true);
        let jac = jac.unwrap();
        let step = match jac.clone().lu().solve(&DVector::from_column_slice(&u)) {
            Some(s) => s,
            None => return Err(Error::DegenerateDesign("iterated-regression Jacobian is singular".into())),
        };
        let mut t = 1.0;
        let base_norm = norm(&u);
        loop {
            let cand: Vec<f64> = beta.iter().zip(step.iter()).map(|(b, s)| b - t * s).collect();
            set_base(arm, &zx, &cand);
            let (cu, _) = z_score(arm, &zx, &cand, opts.ridge, false);
            if norm(&cu) < base_norm || t < 1e-4 {
                beta = cand;
                u = cu;
                break;
            }
            t *= 0.5;
        }
    }
    set_base(arm, &zx, &beta);
    let info = ZFitInfo { iterations, converged, max_score: norm(&u), rows: nfit };
    Ok((Predictor::known(spec.clone(), beta), info))
}

/// Same fixed point with a HAL learner, by plain refitting until the
/// fitted values stop moving.
pub fn fit_z_hal(arm: &mut Arm, spec: &FeatureSpec, opts: &HalOptions, max_iter: usize) -> Result<(Predictor, ZFitInfo)> {
    let nfit = arm.rows.iter().filter(|r| r.fits_z()).count();
    if nfit == 0 {
        return Err(Error::EmptyRiskSet("iterated regression has no rows".into()));
    }
    let zx = ZDesign::new(arm, spec);
    let p = zx.p;
    let mut model: Option<hal::HalModel> = None;
    let mut iterations = 0;
    let mut converged = false;
    let mut change = f64::INFINITY;
    for it in 0..max_iter {
        iterations = it + 1;
        let state = backward_sweep(arm);
        let mut x = Design::new(p);
        let mut y = Vec::with_capacity(nfit);
        for (r, row) in arm.rows.iter().enumerate() {
            if row.fits_z() {
                x.push(zx.at(r, row.fit_branch()));
                y.push(state.rows[r].z);
            }
        }
        let m = hal::fit_hal_cv(&x, &y, &vec![1.0; y.len()], hal::Family::Binomial, opts)?;
        change = 0.0;
        for (r, row) in arm.rows.iter_mut().enumerate() {
            for b in 0..3 {
                let new = m.linear_predictor(zx.at(r, b)).clamp(-nuisance::ETA_CLAMP, nuisance::ETA_CLAMP);
                change = f64::max(change, (expit(new) - expit(row.base[b])).abs());
                row.base[b] = new;
            }
        }
        model = Some(m);
        if change < 1e-6 {
            converged = true;
            break;
        }
    }
    let info = ZFitInfo { iterations, converged, max_score: change, rows: nfit };
    Ok((Predictor::Hal { spec: spec.clone(), model: model.unwrap() }, info))
}

/// Plug-in estimate from an arm whose branch logits are set.
pub fn psi_hat(arm: &Arm) -> f64 {
    backward_sweep(arm).psi()
}
