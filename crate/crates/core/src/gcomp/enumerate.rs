//! Exact computations for small discrete models by enumeration.
//!
//! A [`TinyModel`] has a binary baseline covariate `l0`, a binary
//! time-varying covariate and a fixed list of ticks at times `1, 2, ..., K`,
//! each allowing a subset of processes. Every conditional probability is
//! logistic in `[1, l0, a0, a_current, l_current, t]`. Within a tick at most
//! one event happens, in the order death, treatment monitoring, covariate
//! monitoring, censoring.
//!
//! Dynamic rules used here may only read `l0`, `a0`, `a_current`,
//! `l_current` and `t` from the snapshot.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{
    Branch, EventRecord, FeatureSpec, HistorySnapshot, Intervention, Label, Mark, ObservedPath, Process, Tick,
    TickSchedule,
};
use crate::gcomp::{GModel, QModel};
use crate::nuisance::{GFit, HazardModel, Predictor};
use crate::simulate::{expit, logit};

pub const MAX_DECISION_POINTS: usize = 12;
pub const MAX_PATHS: usize = 1 << 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TinyModel {
    /// Process names allowed at each tick.
    pub ticks: Vec<Vec<String>>,
    pub p_l0: f64,
    /// Baseline treatment on `[1, l0]`.
    pub pi0: [f64; 2],
    pub hazard_d: [f64; 6],
    pub hazard_a: [f64; 6],
    pub hazard_l: [f64; 6],
    pub hazard_c: [f64; 6],
    /// P(new covariate value = 1) at a covariate monitoring time.
    pub mu: [f64; 6],
    /// P(A = 1) at a treatment monitoring time.
    pub pi: [f64; 6],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
struct St {
    l0: Label,
    a0: Label,
    a: Label,
    l: Label,
}

impl St {
    fn index(self) -> usize {
        usize::from(self.l0) + 2 * usize::from(self.a0) + 4 * usize::from(self.a) + 8 * usize::from(self.l)
    }

    fn from_index(i: usize) -> St {
        St { l0: (i & 1) as Label, a0: (i >> 1 & 1) as Label, a: (i >> 2 & 1) as Label, l: (i >> 3 & 1) as Label }
    }

    fn from_snapshot(s: &HistorySnapshot) -> St {
        let bit = |x: f64| Label::from(x >= 0.5);
        St {
            l0: bit(s.l0.first().copied().unwrap_or(0.0)),
            a0: s.a0,
            a: s.a_current,
            l: bit(s.l_current.first().copied().unwrap_or(0.0)),
        }
    }

    fn snapshot(self, t: f64) -> HistorySnapshot {
        HistorySnapshot {
            t,
            l0: vec![f64::from(self.l0)],
            a0: self.a0,
            a_current: self.a,
            l_current: vec![f64::from(self.l)],
            n_a: 0,
            n_l: 0,
            time_since_last_trt: 0.0,
            time_since_last_cov: 0.0,
            alive: true,
            uncensored: true,
        }
    }
}

fn prob(coef: &[f64; 6], st: St, t: f64) -> f64 {
    let x = [1.0, f64::from(st.l0), f64::from(st.a0), f64::from(st.a), f64::from(st.l), t];
    expit(coef.iter().zip(x).map(|(b, x)| b * x).sum())
}

fn bern(p: f64, x: Label) -> f64 {
    if x == 1 {
        p
    } else {
        1.0 - p
    }
}

/// Values at the within-tick positions of the outcome-side recursion.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TickValues {
    pub lam: [f64; 3],
    pub v_none: f64,
    pub v_l: f64,
    pub v_a: f64,
    pub mix_l: f64,
    pub mix_a: f64,
    pub mix_d: f64,
}

impl TinyModel {
    pub fn from_json(text: &str) -> Result<Self> {
        let m: TinyModel = serde_json::from_str(text)?;
        m.masks()?;
        if !(0.0..=1.0).contains(&m.p_l0) {
            return Err(Error::Config("p_l0 must be a probability".into()));
        }
        Ok(m)
    }

    pub fn k(&self) -> usize {
        self.ticks.len()
    }

    pub fn tau(&self) -> f64 {
        self.k() as f64
    }

    pub fn masks(&self) -> Result<Vec<u8>> {
        self.ticks
            .iter()
            .map(|names| {
                names.iter().try_fold(0u8, |m, n| {
                    Process::parse(n).map(|p| m | p.bit()).ok_or_else(|| Error::Config(format!("unknown process `{n}`")))
                })
            })
            .collect()
    }

    pub fn schedule(&self) -> Result<TickSchedule> {
        let ticks = self.masks()?.into_iter().enumerate().map(|(r, mask)| Tick { time: (r + 1) as f64, mask }).collect();
        Ok(TickSchedule::Explicit { ticks })
    }

    /// Baseline decision plus, per tick, one per eligible outcome-side
    /// process and one for the covariate value.
    pub fn decision_points(&self) -> Result<usize> {
        let mut n = 1;
        for m in self.masks()? {
            for p in [Process::Cov, Process::Trt, Process::Death] {
                if m & p.bit() != 0 {
                    n += 1;
                }
            }
            if m & Process::Cov.bit() != 0 {
                n += 1;
            }
        }
        Ok(n)
    }

    fn check_size(&self) -> Result<Vec<u8>> {
        let n = self.decision_points()?;
        if n > MAX_DECISION_POINTS {
            return Err(Error::TooLarge(format!("{n} decision points, limit {MAX_DECISION_POINTS}")));
        }
        self.masks()
    }

    pub fn feature_spec() -> FeatureSpec {
        FeatureSpec::new("tiny", &["1", "l0", "a0", "a_current", "l_current", "t"]).unwrap()
    }

    /// The treatment and censoring mechanism as fitted-model objects.
    pub fn g_fit(&self) -> GFit {
        let spec = TinyModel::feature_spec();
        GFit {
            pi0: Predictor::known(FeatureSpec::new("tiny_pi0", &["1", "l0"]).unwrap(), self.pi0.to_vec()),
            pi: Predictor::known(spec.clone(), self.pi.to_vec()),
            censor: HazardModel { process: Process::Censor, predictor: Predictor::known(spec, self.hazard_c.to_vec()) },
            tau: self.tau(),
        }
    }

    /// Exact value function under `rule`.
    pub fn value(&self, rule: &Intervention) -> Result<ValueFunction> {
        let masks = self.check_size()?;
        let k = masks.len();
        let mut w = vec![[0.0; 16]; k + 1];
        let mut pieces = vec![[TickValues::default(); 16]; k];
        for r in (0..k).rev() {
            let t = (r + 1) as f64;
            for i in 0..16 {
                let st = St::from_index(i);
                let allows = |p: Process| masks[r] & p.bit() != 0;
                let lam = [
                    if allows(Process::Cov) { prob(&self.hazard_l, st, t) } else { 0.0 },
                    if allows(Process::Trt) { prob(&self.hazard_a, st, t) } else { 0.0 },
                    if allows(Process::Death) { prob(&self.hazard_d, st, t) } else { 0.0 },
                ];
                let v_none = w[r + 1][i];
                let mu = prob(&self.mu, st, t);
                let v_l = mu * w[r + 1][St { l: 1, ..st }.index()] + (1.0 - mu) * w[r + 1][St { l: 0, ..st }.index()];
                let a_star = rule.apply(&st.snapshot(t));
                let v_a = w[r + 1][St { a: a_star, ..st }.index()];
                let mix_l = lam[0] * v_l + (1.0 - lam[0]) * v_none;
                let mix_a = lam[1] * v_a + (1.0 - lam[1]) * mix_l;
                let mix_d = lam[2] + (1.0 - lam[2]) * mix_a;
                pieces[r][i] = TickValues { lam, v_none, v_l, v_a, mix_l, mix_a, mix_d };
                w[r][i] = mix_d;
            }
        }
        let mut psi = 0.0;
        for l0 in [0, 1] {
            let a0 = self.rule_a0(rule, l0);
            psi += bern(self.p_l0, l0) * w[0][St { l0, a0, a: a0, l: l0 }.index()];
        }
        Ok(ValueFunction { w, pieces, psi, rule: rule.clone() })
    }

    fn rule_a0(&self, rule: &Intervention, l0: Label) -> Label {
        rule.apply(&St { l0, a0: 0, a: 0, l: l0 }.snapshot(0.0))
    }

    /// All observed paths with their probabilities.
    pub fn enumerate_paths(&self) -> Result<Vec<(ObservedPath, f64)>> {
        let masks = self.masks()?;
        let mut out = Vec::new();
        for l0 in [0, 1] {
            for a0 in [0, 1] {
                let p = bern(self.p_l0, l0) * bern(expit(self.pi0[0] + self.pi0[1] * f64::from(l0)), a0);
                let path = ObservedPath {
                    subject_id: 0,
                    l0: vec![f64::from(l0)],
                    a0,
                    l_init: vec![f64::from(l0)],
                    tau: self.tau(),
                    events: Vec::new(),
                };
                self.extend_paths(&masks, 0, St { l0, a0, a: a0, l: l0 }, path, p, &mut out)?;
            }
        }
        for (i, (p, _)) in out.iter_mut().enumerate() {
            p.subject_id = i as u64;
        }
        Ok(out)
    }

    fn extend_paths(
        &self,
        masks: &[u8],
        r: usize,
        st: St,
        path: ObservedPath,
        p: f64,
        out: &mut Vec<(ObservedPath, f64)>,
    ) -> Result<()> {
        if r == masks.len() {
            if out.len() >= MAX_PATHS {
                return Err(Error::TooLarge(format!("more than {MAX_PATHS} observed paths")));
            }
            out.push((path, p));
            return Ok(());
        }
        let t = (r + 1) as f64;
        let allows = |q: Process| masks[r] & q.bit() != 0;
        let with = |mark: Mark| {
            let mut q = path.clone();
            q.events.push(EventRecord { time: t, mark });
            q
        };
        let mut rest = p;
        if allows(Process::Death) {
            let ld = prob(&self.hazard_d, st, t);
            self.extend_paths(masks, masks.len(), st, with(Mark::Death), rest * ld, out)?;
            rest *= 1.0 - ld;
        }
        if allows(Process::Trt) {
            let la = prob(&self.hazard_a, st, t);
            let pa = prob(&self.pi, st, t);
            for a in [0, 1] {
                self.extend_paths(masks, r + 1, St { a, ..st }, with(Mark::Trt(a)), rest * la * bern(pa, a), out)?;
            }
            rest *= 1.0 - la;
        }
        if allows(Process::Cov) {
            let ll = prob(&self.hazard_l, st, t);
            let mu = prob(&self.mu, st, t);
            for l in [0, 1] {
                let q = with(Mark::Cov(vec![f64::from(l)]));
                self.extend_paths(masks, r + 1, St { l, ..st }, q, rest * ll * bern(mu, l), out)?;
            }
            rest *= 1.0 - ll;
        }
        if allows(Process::Censor) {
            let lc = prob(&self.hazard_c, st, t);
            self.extend_paths(masks, masks.len(), st, with(Mark::Censor), rest * lc, out)?;
            rest *= 1.0 - lc;
        }
        self.extend_paths(masks, r + 1, st, path, rest, out)
    }

    /// Mean outcome under `rule` by summing over every intervened path.
    pub fn enumerate_gcomp(&self, rule: &Intervention) -> Result<f64> {
        let masks = self.check_size()?;
        let mut total = 0.0;
        for l0 in [0, 1] {
            let a0 = self.rule_a0(rule, l0);
            total += bern(self.p_l0, l0) * self.forward(&masks, rule, 0, St { l0, a0, a: a0, l: l0 });
        }
        Ok(total)
    }

    fn forward(&self, masks: &[u8], rule: &Intervention, r: usize, st: St) -> f64 {
        if r == masks.len() {
            return 0.0;
        }
        let t = (r + 1) as f64;
        let allows = |q: Process| masks[r] & q.bit() != 0;
        let mut total = 0.0;
        let mut rest = 1.0;
        if allows(Process::Death) {
            let ld = prob(&self.hazard_d, st, t);
            total += ld;
            rest = 1.0 - ld;
        }
        if allows(Process::Trt) {
            let la = prob(&self.hazard_a, st, t);
            let a = rule.apply(&st.snapshot(t));
            total += rest * la * self.forward(masks, rule, r + 1, St { a, ..st });
            rest *= 1.0 - la;
        }
        if allows(Process::Cov) {
            let ll = prob(&self.hazard_l, st, t);
            let mu = prob(&self.mu, st, t);
            for l in [0, 1] {
                total += rest * ll * bern(mu, l) * self.forward(masks, rule, r + 1, St { l, ..st });
            }
            rest *= 1.0 - ll;
        }
        total + rest * self.forward(masks, rule, r + 1, st)
    }

    /// Efficient influence curve of `self` at one observed path, written as
    /// a sum over outcome-side factors of the clever weight times the change
    /// of the value function across the factor.
    pub fn eic_at(&self, v: &ValueFunction, path: &ObservedPath) -> Result<f64> {
        let masks = self.masks()?;
        let l0 = Label::from(path.l0[0] >= 0.5);
        let a0 = self.rule_a0(&v.rule, l0);
        let mut st = St { l0, a0, a: a0, l: l0 };
        let mut d = v.w[0][st.index()] - v.psi;
        if path.a0 != a0 {
            return Ok(d);
        }
        let mut h = 1.0 / bern(expit(self.pi0[0] + self.pi0[1] * f64::from(l0)), a0);
        let mut events = path.events.iter().peekable();
        for (r, &mask) in masks.iter().enumerate() {
            let t = (r + 1) as f64;
            let pc = v.pieces[r][st.index()];
            let ev = events.next_if(|e| (e.time - t).abs() < 1e-9).map(|e| e.mark.clone());
            if let Some(Mark::Death) = ev {
                d += h * (1.0 - pc.mix_d);
                break;
            }
            d += h * (pc.mix_a - pc.mix_d);
            if let Some(Mark::Trt(a)) = ev {
                d += h * (pc.v_a - pc.mix_a);
                let a_star = v.rule.apply(&st.snapshot(t));
                if a != a_star {
                    break;
                }
                h /= bern(prob(&self.pi, st, t), a_star);
                st.a = a_star;
                continue;
            }
            d += h * (pc.mix_l - pc.mix_a);
            if let Some(Mark::Cov(l)) = &ev {
                let l = Label::from(l[0] >= 0.5);
                d += h * (pc.v_l - pc.mix_l);
                st.l = l;
                d += h * (v.w[r + 1][st.index()] - pc.v_l);
                continue;
            }
            d += h * (pc.v_none - pc.mix_l);
            if mask & Process::Censor.bit() != 0 {
                if let Some(Mark::Censor) = ev {
                    break;
                }
                h /= 1.0 - prob(&self.hazard_c, st, t);
            }
        }
        Ok(d)
    }
}

/// Exact value function of a [`TinyModel`] under one rule; doubles as the
/// true outcome-side model in the sweep.
#[derive(Clone, Debug)]
pub struct ValueFunction {
    /// Value at the start of tick `r` by state.
    w: Vec<[f64; 16]>,
    pieces: Vec<[TickValues; 16]>,
    pub psi: f64,
    rule: Intervention,
}

impl ValueFunction {
    pub fn tick_values(&self, s: &HistorySnapshot) -> TickValues {
        self.pieces[tick_index(s)][St::from_snapshot(s).index()]
    }
}

fn tick_index(s: &HistorySnapshot) -> usize {
    (s.t.round() as usize).saturating_sub(1)
}

/// Outcome-side model of a [`TinyModel`] under one rule.
pub struct ExactQ<'a> {
    pub model: &'a TinyModel,
    pub value: ValueFunction,
}

impl<'a> ExactQ<'a> {
    pub fn new(model: &'a TinyModel, rule: &Intervention) -> Result<Self> {
        Ok(ExactQ { model, value: model.value(rule)? })
    }
}

impl QModel for ExactQ<'_> {
    fn hazard_logit(&self, p: Process, s: &HistorySnapshot) -> f64 {
        let coef = match p {
            Process::Cov => &self.model.hazard_l,
            Process::Trt => &self.model.hazard_a,
            Process::Death => &self.model.hazard_d,
            Process::Censor => &self.model.hazard_c,
        };
        logit(prob(coef, St::from_snapshot(s), s.t))
    }

    fn branch_logit(&self, s: &HistorySnapshot, b: Branch) -> f64 {
        let v = self.value.tick_values(s);
        logit(match b {
            Branch::None => v.v_none,
            Branch::Cov => v.v_l,
            Branch::Trt => v.v_a,
        })
    }
}

impl GModel for TinyModel {
    fn pi0(&self, s: &HistorySnapshot) -> f64 {
        expit(self.pi0[0] + self.pi0[1] * s.l0[0])
    }

    fn pi(&self, s: &HistorySnapshot) -> f64 {
        prob(&self.pi, St::from_snapshot(s), s.t)
    }

    fn censor(&self, s: &HistorySnapshot) -> f64 {
        prob(&self.hazard_c, St::from_snapshot(s), s.t)
    }
}

/// Terms of the exact expansion `psi(P) - psi(P0) = -P0 D*(P) + R2(P, P0)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EicExpansion {
    pub psi0: f64,
    pub psi: f64,
    /// Mean of the influence curve of `P` under `P0`.
    pub p0_dstar: f64,
    pub r2: f64,
}

impl EicExpansion {
    pub fn residual(&self) -> f64 {
        (self.psi - self.psi0) + self.p0_dstar - self.r2
    }
}

struct FactorTerm {
    q0: f64,
    q: f64,
    /// Ratio of the true to the model treatment-and-censoring probability
    /// accumulated before the factor.
    g_ratio: f64,
}

/// `P0 D*(P)` by summing the influence curve over the observed paths of
/// `p0`, and the second-order remainder by summing over intervened paths.
pub fn enumerate_eic_mean(p0: &TinyModel, p: &TinyModel, rule: &Intervention) -> Result<EicExpansion> {
    if p0.ticks != p.ticks {
        return Err(Error::Config("models must share the tick list".into()));
    }
    let v0 = p0.value(rule)?;
    let v = p.value(rule)?;
    let mut p0_dstar = 0.0;
    for (path, pr) in p0.enumerate_paths()? {
        p0_dstar += pr * p.eic_at(&v, &path)?;
    }
    let masks = p.masks()?;
    let mut r2 = 0.0;
    for l0 in [0, 1] {
        let a0 = p.rule_a0(rule, l0);
        let f = FactorTerm { q0: bern(p0.p_l0, l0), q: bern(p.p_l0, l0), g_ratio: 1.0 };
        let g0 = bern(GModel::pi0(p0, &St { l0, a0, a: 0, l: l0 }.snapshot(0.0)), a0);
        let g = bern(GModel::pi0(p, &St { l0, a0, a: 0, l: l0 }.snapshot(0.0)), a0);
        let mut factors = vec![f];
        r2 += remainder_paths(p0, p, rule, &masks, 0, St { l0, a0, a: a0, l: l0 }, g0 / g, &mut factors);
    }
    Ok(EicExpansion { psi0: v0.psi, psi: v.psi, p0_dstar, r2 })
}

fn remainder_of(factors: &[FactorTerm]) -> f64 {
    let n = factors.len();
    let mut suffix = vec![1.0; n + 1];
    for j in (0..n).rev() {
        suffix[j] = suffix[j + 1] * factors[j].q;
    }
    let mut prefix = 1.0;
    let mut total = 0.0;
    for (k, f) in factors.iter().enumerate() {
        total += (f.g_ratio - 1.0) * prefix * (f.q0 - f.q) * suffix[k + 1];
        prefix *= f.q0;
    }
    total
}

#[allow(clippy::too_many_arguments)]
fn remainder_paths(
    p0: &TinyModel,
    p: &TinyModel,
    rule: &Intervention,
    masks: &[u8],
    r: usize,
    st: St,
    g_ratio: f64,
    factors: &mut Vec<FactorTerm>,
) -> f64 {
    if r == masks.len() {
        return 0.0;
    }
    let t = (r + 1) as f64;
    let allows = |q: Process| masks[r] & q.bit() != 0;
    let base = factors.len();
    let mut total = 0.0;
    let push = |factors: &mut Vec<FactorTerm>, q0: f64, q: f64, g_ratio: f64| {
        factors.push(FactorTerm { q0, q, g_ratio });
    };
    if allows(Process::Death) {
        let (d0, d) = (prob(&p0.hazard_d, st, t), prob(&p.hazard_d, st, t));
        push(factors, d0, d, g_ratio);
        total += remainder_of(factors);
        factors.pop();
        push(factors, 1.0 - d0, 1.0 - d, g_ratio);
    }
    if allows(Process::Trt) {
        let (a0, a) = (prob(&p0.hazard_a, st, t), prob(&p.hazard_a, st, t));
        let astar = rule.apply(&st.snapshot(t));
        let gr = g_ratio * bern(prob(&p0.pi, st, t), astar) / bern(prob(&p.pi, st, t), astar);
        push(factors, a0, a, g_ratio);
        total += remainder_paths(p0, p, rule, masks, r + 1, St { a: astar, ..st }, gr, factors);
        factors.pop();
        push(factors, 1.0 - a0, 1.0 - a, g_ratio);
    }
    if allows(Process::Cov) {
        let (l0, l) = (prob(&p0.hazard_l, st, t), prob(&p.hazard_l, st, t));
        let (m0, m) = (prob(&p0.mu, st, t), prob(&p.mu, st, t));
        push(factors, l0, l, g_ratio);
        for v in [0, 1] {
            push(factors, bern(m0, v), bern(m, v), g_ratio);
            total += remainder_paths(p0, p, rule, masks, r + 1, St { l: v, ..st }, g_ratio, factors);
            factors.pop();
        }
        factors.pop();
        push(factors, 1.0 - l0, 1.0 - l, g_ratio);
    }
    let gr = if allows(Process::Censor) {
        g_ratio * (1.0 - prob(&p0.hazard_c, st, t)) / (1.0 - prob(&p.hazard_c, st, t))
    } else {
        g_ratio
    };
    total += remainder_paths(p0, p, rule, masks, r + 1, st, gr, factors);
    factors.truncate(base);
    total
}
