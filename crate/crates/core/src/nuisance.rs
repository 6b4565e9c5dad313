//! Initial estimators of the likelihood components.
//!
//! Intensities are per-tick discrete hazards fitted by pooled logistic
//! regression on stacked risk-set rows. Within a tick the processes are
//! nested: death first, then treatment monitoring given no death, then
//! covariate monitoring given neither, and censoring last given no event of
//! the other three.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{
    baseline_snapshot, Branch, FeatureSpec, HistorySnapshot, Mark, ObservedPath, Process, Replay, Tick,
    TickSchedule,
};
use crate::hal::{self, HalModel, HalOptions};
use crate::simulate::expit;

/// Linear predictors are clamped to this magnitude, and so are coefficients.
pub const ETA_CLAMP: f64 = 30.0;
/// Upper clamp of per-tick hazards is `1 - HAZARD_DELTA`.
pub const HAZARD_DELTA: f64 = 1e-8;

/// Dense row-major design matrix.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Design {
    pub ncol: usize,
    pub data: Vec<f64>,
}

impl Design {
    pub fn new(ncol: usize) -> Self {
        Design { ncol, data: Vec::new() }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let ncol = rows.first().map_or(0, Vec::len);
        Design { ncol, data: rows.iter().flatten().copied().collect() }
    }

    pub fn nrow(&self) -> usize {
        if self.ncol == 0 {
            0
        } else {
            self.data.len() / self.ncol
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.ncol..(i + 1) * self.ncol]
    }

    pub fn push(&mut self, row: &[f64]) {
        debug_assert_eq!(row.len(), self.ncol);
        self.data.extend_from_slice(row);
    }

    pub fn select(&self, idx: &[usize]) -> Design {
        let mut d = Design::new(self.ncol);
        for &i in idx {
            d.push(self.row(i));
        }
        d
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum FitWarning {
    /// Coefficient hit the clamp and was frozen there.
    Separation { column: usize, value: f64 },
    /// Column is a linear combination of earlier columns; coefficient fixed at 0.
    Aliased { column: usize },
    NotConverged { iterations: usize },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GlmOptions {
    pub ridge: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for GlmOptions {
    fn default() -> Self {
        GlmOptions { ridge: 0.0, max_iter: 100, tol: 1e-9 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlmFit {
    pub coefficients: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub warnings: Vec<FitWarning>,
}

impl GlmFit {
    pub fn separated(&self) -> bool {
        self.warnings.iter().any(|w| matches!(w, FitWarning::Separation { .. }))
    }
}

fn clamp_eta(e: f64) -> f64 {
    e.clamp(-ETA_CLAMP, ETA_CLAMP)
}

/// Negative log-likelihood term for outcome `y` in [0, 1] at linear predictor `eta`.
pub fn binomial_loss(y: f64, eta: f64) -> f64 {
    // log(1 + e^eta) - y*eta, stable for both signs.
    let sp = if eta > 0.0 { eta + (-eta).exp().ln_1p() } else { eta.exp().ln_1p() };
    sp - y * eta
}

/// Columns that are (numerically) linear combinations of earlier columns.
fn aliased_columns(x: &Design, w: &[f64]) -> Vec<bool> {
    let p = x.ncol;
    let mut g = DMatrix::<f64>::zeros(p, p);
    for i in 0..x.nrow() {
        let r = x.row(i);
        for a in 0..p {
            if r[a] == 0.0 {
                continue;
            }
            let wa = w[i] * r[a];
            for b in a..p {
                g[(a, b)] += wa * r[b];
            }
        }
    }
    // Incremental Cholesky; a column whose pivot collapses is aliased.
    let mut l = DMatrix::<f64>::zeros(p, p);
    let mut aliased = vec![false; p];
    for j in 0..p {
        let mut d = g[(j, j)];
        for k in 0..j {
            if !aliased[k] {
                d -= l[(j, k)] * l[(j, k)];
            }
        }
        if d <= 1e-10 * g[(j, j)].max(1e-300) || g[(j, j)] <= 0.0 {
            aliased[j] = true;
            continue;
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in j + 1..p {
            let mut s = g[(j.min(i), j.max(i))];
            for k in 0..j {
                if !aliased[k] {
                    s -= l[(i, k)] * l[(j, k)];
                }
            }
            l[(i, j)] = s / d;
        }
    }
    aliased
}

/// Weighted quasi-binomial maximum likelihood by damped Newton iteration.
///
/// Converged when the largest score component is below `tol` and the Newton
/// step has stopped moving. Coefficients leaving [-30, 30] are clamped and
/// frozen with a [`FitWarning::Separation`].
pub fn fit_binary(
    x: &Design,
    y: &[f64],
    w: &[f64],
    offset: Option<&[f64]>,
    opts: GlmOptions,
) -> Result<GlmFit> {
    let n = x.nrow();
    let p = x.ncol;
    if n == 0 || p == 0 {
        return Err(Error::DegenerateDesign("no rows or no columns".into()));
    }
    if y.len() != n || w.len() != n || offset.is_some_and(|o| o.len() != n) {
        return Err(Error::DegenerateDesign("length mismatch".into()));
    }
    if x.data.iter().chain(y).chain(w).any(|v| !v.is_finite()) {
        return Err(Error::DegenerateDesign("non-finite input".into()));
    }
    let mut warnings = Vec::new();
    let aliased = if opts.ridge > 0.0 { vec![false; p] } else { aliased_columns(x, w) };
    for (j, &a) in aliased.iter().enumerate() {
        if a {
            warnings.push(FitWarning::Aliased { column: j });
        }
    }
    if aliased.iter().all(|&a| a) {
        return Err(Error::DegenerateDesign("every column is zero or aliased".into()));
    }
    let mut frozen = aliased.clone();
    let mut beta = vec![0.0; p];
    let off = |i: usize| offset.map_or(0.0, |o| o[i]);
    let objective = |beta: &[f64]| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            if w[i] != 0.0 {
                s += w[i] * binomial_loss(y[i], clamp_eta(dot(x.row(i), beta) + off(i)));
            }
        }
        s + 0.5 * opts.ridge * beta.iter().map(|b| b * b).sum::<f64>()
    };
    let mut converged = false;
    let mut iterations = 0;
    let mut hess = DMatrix::<f64>::zeros(p, p);
    for it in 0..opts.max_iter {
        iterations = it + 1;
        let mut g = vec![0.0; p];
        hess.fill(0.0);
        for i in 0..n {
            if w[i] == 0.0 {
                continue;
            }
            let r = x.row(i);
            let mu = expit(clamp_eta(dot(r, &beta) + off(i)));
            let res = w[i] * (y[i] - mu);
            let v = w[i] * mu * (1.0 - mu);
            for a in 0..p {
                if r[a] == 0.0 {
                    continue;
                }
                g[a] += res * r[a];
                let va = v * r[a];
                for b in a..p {
                    hess[(a, b)] += va * r[b];
                }
            }
        }
        for a in 0..p {
            g[a] -= opts.ridge * beta[a];
            hess[(a, a)] += opts.ridge;
            for b in 0..a {
                hess[(a, b)] = hess[(b, a)];
            }
        }
        let free: Vec<usize> = (0..p).filter(|&j| !frozen[j]).collect();
        if free.is_empty() {
            converged = true;
            break;
        }
        let hf = DMatrix::from_fn(free.len(), free.len(), |a, b| hess[(free[a], free[b])]);
        let gf = DVector::from_iterator(free.len(), free.iter().map(|&j| g[j]));
        let max_score = gf.amax();
        let chol = match hf.clone().cholesky() {
            Some(c) => c,
            None => {
                let jitter = 1e-12 * hf.diagonal().amax().max(1e-300);
                (hf + DMatrix::identity(free.len(), free.len()) * jitter)
                    .cholesky()
                    .ok_or_else(|| Error::DegenerateDesign("information matrix not positive definite".into()))?
            }
        };
        let step = chol.solve(&gf);
        if max_score < opts.tol && step.amax() < 1e-6 {
            converged = true;
            break;
        }
        let f0 = objective(&beta);
        let mut s = 1.0;
        let mut cand = beta.clone();
        for _ in 0..60 {
            for (k, &j) in free.iter().enumerate() {
                cand[j] = beta[j] + s * step[k];
            }
            if objective(&cand) <= f0 + 1e-12 * f0.abs().max(1.0) {
                break;
            }
            s *= 0.5;
        }
        beta = cand;
        for j in 0..p {
            if !frozen[j] && beta[j].abs() > ETA_CLAMP {
                beta[j] = beta[j].signum() * ETA_CLAMP;
                frozen[j] = true;
                warnings.push(FitWarning::Separation { column: j, value: beta[j] });
            }
        }
    }
    if !converged {
        warnings.push(FitWarning::NotConverged { iterations });
    }
    let free: Vec<usize> = (0..p).filter(|&j| !frozen[j]).collect();
    let mut std_errors = vec![f64::NAN; p];
    if !free.is_empty() {
        let hf = DMatrix::from_fn(free.len(), free.len(), |a, b| hess[(free[a], free[b])]);
        if let Some(inv) = hf.try_inverse() {
            for (k, &j) in free.iter().enumerate() {
                std_errors[j] = inv[(k, k)].max(0.0).sqrt();
            }
        }
    }
    Ok(GlmFit { coefficients: beta, std_errors, iterations, converged, warnings })
}

/// Collapses rows with identical features into one row carrying the summed
/// weight and the weighted mean outcome. The binomial likelihood is linear
/// in the outcome, so the fit is unchanged.
pub fn compress(x: &Design, y: &[f64], w: &[f64]) -> (Design, Vec<f64>, Vec<f64>) {
    let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut cx = Design::new(x.ncol);
    let mut sy = Vec::new();
    let mut sw: Vec<f64> = Vec::new();
    for i in 0..x.nrow() {
        let key: Vec<u64> = x.row(i).iter().map(|v| v.to_bits()).collect();
        let k = *index.entry(key).or_insert_with(|| {
            cx.push(x.row(i));
            sy.push(0.0);
            sw.push(0.0);
            sw.len() - 1
        });
        sy[k] += w[i] * y[i];
        sw[k] += w[i];
    }
    let my = sy.iter().zip(&sw).map(|(s, w)| if *w > 0.0 { s / w } else { 0.0 }).collect();
    (cx, my, sw)
}

/// A fitted model of a binary event on history features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Predictor {
    Glm { spec: FeatureSpec, coefficients: Vec<f64>, warnings: Vec<FitWarning> },
    Hal { spec: FeatureSpec, model: HalModel },
}

impl Predictor {
    /// Fixed coefficients, e.g. the generating mechanism.
    pub fn known(spec: FeatureSpec, coefficients: Vec<f64>) -> Self {
        assert_eq!(spec.len(), coefficients.len());
        Predictor::Glm { spec, coefficients, warnings: Vec::new() }
    }

    pub fn spec(&self) -> &FeatureSpec {
        match self {
            Predictor::Glm { spec, .. } | Predictor::Hal { spec, .. } => spec,
        }
    }

    pub fn logit_x(&self, x: &[f64]) -> f64 {
        match self {
            Predictor::Glm { coefficients, .. } => {
                let e = dot(x, coefficients);
                // Infinite intercepts mark risk sets without any event.
                if e.is_infinite() {
                    e
                } else {
                    clamp_eta(e)
                }
            }
            Predictor::Hal { model, .. } => clamp_eta(model.linear_predictor(x)),
        }
    }

    pub fn logit(&self, s: &HistorySnapshot, tau: f64, b: Branch) -> f64 {
        let mut x = Vec::with_capacity(self.spec().len());
        self.spec().eval_into(s, tau, b, &mut x);
        self.logit_x(&x)
    }

    pub fn predict(&self, s: &HistorySnapshot, tau: f64) -> f64 {
        expit(self.logit(s, tau, Branch::None))
    }

    pub fn warnings(&self) -> &[FitWarning] {
        match self {
            Predictor::Glm { warnings, .. } => warnings,
            Predictor::Hal { .. } => &[],
        }
    }

    pub fn coefficients(&self) -> Option<&[f64]> {
        match self {
            Predictor::Glm { coefficients, .. } => Some(coefficients),
            Predictor::Hal { .. } => None,
        }
    }
}

/// Per-tick conditional probability of a jump of one counting process.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HazardModel {
    pub process: Process,
    pub predictor: Predictor,
}

impl HazardModel {
    pub fn clamp(p: f64) -> f64 {
        p.clamp(0.0, 1.0 - HAZARD_DELTA)
    }

    pub fn predict(&self, s: &HistorySnapshot, tau: f64) -> f64 {
        HazardModel::clamp(self.predictor.predict(s, tau))
    }

    pub fn logit(&self, s: &HistorySnapshot, tau: f64) -> f64 {
        self.predictor.logit(s, tau, Branch::None)
    }
}

/// Treatment and censoring mechanism.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GFit {
    /// P(A_0 = 1 | l0).
    pub pi0: Predictor,
    /// P(A(t) = 1 | F_{t-}) at treatment-monitoring events.
    pub pi: Predictor,
    pub censor: HazardModel,
    pub tau: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Learner {
    Glm,
    Hal(HalOptions),
    /// Discrete super learner over the listed candidates.
    SuperLearner { candidates: Vec<Candidate>, folds: usize, seed: u64 },
}

#[derive(Clone, Debug, PartialEq)]
pub enum Candidate {
    Glm(FeatureSpec),
    InterceptOnly,
    Hal(FeatureSpec, HalOptions),
}

impl Candidate {
    pub fn name(&self) -> String {
        match self {
            Candidate::Glm(s) => format!("glm:{}", s.name),
            Candidate::InterceptOnly => "intercept".into(),
            Candidate::Hal(s, _) => format!("hal:{}", s.name),
        }
    }
}

/// Stacked rows for one regression: snapshots, outcomes, weights and the
/// owning subject of each row (folds are formed by subject).
#[derive(Clone, Debug, Default)]
pub struct RiskRows {
    pub tau: f64,
    pub snaps: Vec<HistorySnapshot>,
    pub y: Vec<f64>,
    pub w: Vec<f64>,
    pub subject: Vec<usize>,
}

impl RiskRows {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    fn push(&mut self, s: HistorySnapshot, y: f64, subject: usize) {
        self.snaps.push(s);
        self.y.push(y);
        self.w.push(1.0);
        self.subject.push(subject);
    }

    pub fn design(&self, spec: &FeatureSpec, idx: Option<&[usize]>) -> Design {
        let mut d = Design::new(spec.len());
        let mut buf = Vec::with_capacity(spec.len());
        let mut add = |i: usize| {
            buf.clear();
            spec.eval_into(&self.snaps[i], self.tau, Branch::None, &mut buf);
            d.push(&buf);
        };
        match idx {
            Some(ix) => ix.iter().for_each(|&i| add(i)),
            None => (0..self.len()).for_each(&mut add),
        }
        d
    }

    fn subset(&self, idx: &[usize]) -> (Vec<f64>, Vec<f64>) {
        (idx.iter().map(|&i| self.y[i]).collect(), idx.iter().map(|&i| self.w[i]).collect())
    }
}

/// Event recorded exactly at `tick`, if any.
pub(crate) fn event_at<'a>(path: &'a ObservedPath, idx: &mut usize, tick: &Tick) -> Option<&'a Mark> {
    while *idx < path.events.len() && path.events[*idx].time < tick.time - 1e-9 {
        *idx += 1;
    }
    path.events.get(*idx).filter(|e| TickSchedule::matches(e.time, tick.time)).map(|e| &e.mark)
}

/// Whether a row of `process` belongs to the nested risk set given the
/// event observed at this tick.
pub fn in_risk_set(process: Process, tick: &Tick, obs: Option<&Mark>) -> bool {
    if !tick.allows(process) {
        return false;
    }
    let blocked = |m: &Mark| match process {
        Process::Death => false,
        Process::Trt => matches!(m, Mark::Death),
        Process::Cov => matches!(m, Mark::Death | Mark::Trt(_)),
        Process::Censor => matches!(m, Mark::Death | Mark::Trt(_) | Mark::Cov(_)),
    };
    !obs.is_some_and(blocked)
}

fn mark_process(m: &Mark) -> Process {
    match m {
        Mark::Trt(_) => Process::Trt,
        Mark::Cov(_) => Process::Cov,
        Mark::Censor => Process::Censor,
        Mark::Death => Process::Death,
    }
}

/// Risk-set rows for the hazard of `process`: one row per subject per tick
/// at which the subject is at risk.
pub fn hazard_rows(paths: &[ObservedPath], schedule: &TickSchedule, process: Process) -> Result<RiskRows> {
    let mut rows = RiskRows { tau: paths.first().map_or(1.0, |p| p.tau), ..RiskRows::default() };
    for (i, path) in paths.iter().enumerate() {
        let mut replay = Replay::new(path);
        let mut idx = 0;
        let mut applied = 0;
        let mut matched = 0;
        for tick in schedule.ticks_until(path.end_time()) {
            while applied < path.events.len() && path.events[applied].time < tick.time - 1e-9 {
                replay.apply(&path.events[applied], None);
                applied += 1;
            }
            let obs = event_at(path, &mut idx, &tick);
            matched += usize::from(obs.is_some());
            if in_risk_set(process, &tick, obs) {
                let y = f64::from(obs.is_some_and(|m| mark_process(m) == process));
                rows.push(replay.snapshot(path, tick.time), y, i);
            }
        }
        if matched != path.events.len() {
            return Err(Error::Input(format!("subject {}: events off the tick schedule", path.subject_id)));
        }
    }
    Ok(rows)
}

/// Rows for the treatment mechanism: trt-monitoring events only.
pub fn treatment_rows(paths: &[ObservedPath]) -> RiskRows {
    let mut rows = RiskRows { tau: paths.first().map_or(1.0, |p| p.tau), ..RiskRows::default() };
    for (i, path) in paths.iter().enumerate() {
        let mut replay = Replay::new(path);
        for e in &path.events {
            if let Mark::Trt(a) = e.mark {
                rows.push(replay.snapshot(path, e.time), f64::from(a), i);
            }
            replay.apply(e, None);
        }
    }
    rows
}

pub fn baseline_rows(paths: &[ObservedPath]) -> RiskRows {
    let mut rows = RiskRows { tau: paths.first().map_or(1.0, |p| p.tau), ..RiskRows::default() };
    for (i, path) in paths.iter().enumerate() {
        rows.push(baseline_snapshot(path), f64::from(path.a0), i);
    }
    rows
}

fn fit_candidate(c: &Candidate, rows: &RiskRows, idx: &[usize]) -> Result<Predictor> {
    match c {
        Candidate::Glm(spec) => fit_glm_rows(spec, rows, idx),
        Candidate::InterceptOnly => fit_glm_rows(&FeatureSpec::intercept(), rows, idx),
        Candidate::Hal(spec, opts) => fit_hal_rows(spec, opts, rows, idx),
    }
}

fn fit_glm_rows(spec: &FeatureSpec, rows: &RiskRows, idx: &[usize]) -> Result<Predictor> {
    let x = rows.design(spec, Some(idx));
    let (y, w) = rows.subset(idx);
    let (cx, cy, cw) = compress(&x, &y, &w);
    let constant = cy.iter().zip(&cw).filter(|(_, w)| **w > 0.0).map(|(y, _)| *y).try_fold(None, |acc, y| match acc {
        Some(v) if v != y => Err(()),
        _ => Ok(Some(y)),
    });
    if let (Ok(Some(v @ (0.0 | 1.0))), Some(j)) = (constant, spec.columns().iter().position(|c| c == "1")) {
        let mut coefficients = vec![0.0; spec.len()];
        coefficients[j] = if v == 0.0 { f64::NEG_INFINITY } else { f64::INFINITY };
        return Ok(Predictor::Glm { spec: spec.clone(), coefficients, warnings: Vec::new() });
    }
    let fit = fit_binary(&cx, &cy, &cw, None, GlmOptions::default())?;
    Ok(Predictor::Glm { spec: spec.clone(), coefficients: fit.coefficients, warnings: fit.warnings })
}

fn fit_hal_rows(spec: &FeatureSpec, opts: &HalOptions, rows: &RiskRows, idx: &[usize]) -> Result<Predictor> {
    let x = rows.design(spec, Some(idx));
    let (y, w) = rows.subset(idx);
    let subjects: Vec<usize> = idx.iter().map(|&i| rows.subject[i]).collect();
    let fold = subject_folds(&subjects, opts.folds, opts.seed);
    let model = hal::fit_hal_cv_folds(&x, &y, &w, hal::Family::Binomial, &fold, opts)?;
    Ok(Predictor::Hal { spec: spec.clone(), model })
}

fn fit_rows(rows: &RiskRows, spec: &FeatureSpec, learner: &Learner, what: &str) -> Result<Predictor> {
    if rows.is_empty() {
        return Err(Error::EmptyRiskSet(what.to_string()));
    }
    let all: Vec<usize> = (0..rows.len()).collect();
    match learner {
        Learner::Glm => fit_glm_rows(spec, rows, &all),
        Learner::Hal(opts) => fit_hal_rows(spec, opts, rows, &all),
        Learner::SuperLearner { candidates, folds, seed } => {
            let sel = cv_select(candidates, rows, *folds, *seed)?;
            fit_candidate(&candidates[sel.chosen], rows, &all)
        }
    }
}

pub fn fit_hazard(
    paths: &[ObservedPath],
    schedule: &TickSchedule,
    process: Process,
    spec: &FeatureSpec,
    learner: &Learner,
) -> Result<HazardModel> {
    let rows = hazard_rows(paths, schedule, process)?;
    let predictor = fit_rows(&rows, spec, learner, process.name())?;
    Ok(HazardModel { process, predictor })
}

pub fn fit_treatment_mechanism(paths: &[ObservedPath], spec: &FeatureSpec, learner: &Learner) -> Result<Predictor> {
    fit_rows(&treatment_rows(paths), spec, learner, "treatment mechanism")
}

pub fn fit_baseline_treatment(paths: &[ObservedPath], spec: &FeatureSpec, learner: &Learner) -> Result<Predictor> {
    fit_rows(&baseline_rows(paths), spec, learner, "baseline treatment")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvSelection {
    pub chosen: usize,
    pub names: Vec<String>,
    pub risks: Vec<f64>,
}

/// Fold label per row; subjects are shuffled by `seed` and dealt round-robin.
pub fn subject_folds(subject: &[usize], v: usize, seed: u64) -> Vec<usize> {
    let mut ids: Vec<usize> = subject.to_vec();
    ids.sort_unstable();
    ids.dedup();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let fold: HashMap<usize, usize> = ids.iter().enumerate().map(|(k, &s)| (s, k % v)).collect();
    subject.iter().map(|s| fold[s]).collect()
}

/// V-fold cross-validated binomial log-loss for each candidate; the
/// earliest candidate wins ties.
pub fn cv_select(candidates: &[Candidate], rows: &RiskRows, v: usize, seed: u64) -> Result<CvSelection> {
    if candidates.is_empty() {
        return Err(Error::Config("no candidate learners".into()));
    }
    if v < 2 {
        return Err(Error::Config("need at least two folds".into()));
    }
    let fold = subject_folds(&rows.subject, v, seed);
    let mut risks = vec![0.0; candidates.len()];
    for f in 0..v {
        let train: Vec<usize> = (0..rows.len()).filter(|&i| fold[i] != f).collect();
        let valid: Vec<usize> = (0..rows.len()).filter(|&i| fold[i] == f).collect();
        if train.is_empty() || valid.is_empty() {
            return Err(Error::FoldTooSmall(format!("fold {f} of {v} is empty")));
        }
        let wsum: f64 = valid.iter().map(|&i| rows.w[i]).sum();
        for (c, risk) in candidates.iter().zip(risks.iter_mut()) {
            let model = fit_candidate(c, rows, &train)?;
            let mut x = Vec::new();
            let mut loss = 0.0;
            for &i in &valid {
                x.clear();
                model.spec().eval_into(&rows.snaps[i], rows.tau, Branch::None, &mut x);
                loss += rows.w[i] * binomial_loss(rows.y[i], model.logit_x(&x));
            }
            *risk += loss / wsum / v as f64;
        }
    }
    let mut chosen = 0;
    for (k, r) in risks.iter().enumerate() {
        if *r < risks[chosen] {
            chosen = k;
        }
    }
    Ok(CvSelection { chosen, names: candidates.iter().map(Candidate::name).collect(), risks })
}
