//! Reference estimators: inverse probability weighting with full-horizon
//! weights, and a discrete-time sequential-regression LTMLE on the day grid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{
    baseline_snapshot, features, FeatureSpec, HistorySnapshot, Intervention, Label, Mark, ObservedPath, Replay, Rule,
    TickSchedule,
};
use crate::gcomp::{build_arm, mean, rule_prob, variance, ArmOptions, FittedQ, GModel, MIN_DENOMINATOR};
use crate::nuisance::{compress, fit_baseline_treatment, fit_binary, Design, GlmOptions, Learner};
use crate::simulate::expit;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WeightSummary {
    pub max: f64,
    pub mean: f64,
    pub nonzero: usize,
}

impl WeightSummary {
    fn of(w: &[f64]) -> Self {
        WeightSummary {
            max: w.iter().copied().fold(0.0, f64::max),
            mean: mean(w),
            nonzero: w.iter().filter(|v| **v > 0.0).count(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IpwResult {
    pub intervention: String,
    pub psi: f64,
    pub sigma2: f64,
    pub se: f64,
    /// Per-subject influence curve `W * Y - psi`.
    pub ic: Vec<f64>,
    pub weights: WeightSummary,
    pub warnings: Vec<String>,
}

/// Weighted mean of the outcome with weights `prod dG*/dG` over the whole
/// follow-up: zero after a deviation from the rule or after censoring.
pub fn ipw_estimate(
    paths: &[ObservedPath],
    schedule: &TickSchedule,
    g: &dyn GModel,
    g_star: &Intervention,
    opts: ArmOptions,
) -> Result<IpwResult> {
    if paths.is_empty() {
        return Err(Error::Input("empty cohort".into()));
    }
    let no_q = FittedQ { tau: paths[0].tau, hazards: [None, None, None], z: None };
    let arm = build_arm(paths, schedule, g_star, &no_q, g, opts)?;
    let wy: Vec<f64> = arm.final_weight.iter().zip(&arm.subjects).map(|(w, s)| w * s.y).collect();
    let psi = mean(&wy);
    let ic: Vec<f64> = wy.iter().map(|v| v - psi).collect();
    let sigma2 = variance(&wy);
    let mut warnings = Vec::new();
    if arm.final_weight.iter().all(|w| *w == 0.0) {
        warnings.push(format!("every subject deviates from {}", g_star.name));
    }
    Ok(IpwResult {
        intervention: g_star.name.clone(),
        psi,
        sigma2,
        se: (sigma2 / paths.len() as f64).sqrt(),
        ic,
        weights: WeightSummary::of(&arm.final_weight),
        warnings,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LtmleOptions {
    /// Outcome regression on the history at the end of day `k` treatment.
    pub q_spec: FeatureSpec,
    /// Outcome regression on baseline history.
    pub baseline_spec: FeatureSpec,
    /// Per-day treatment regression within a previous-treatment stratum.
    pub trt_spec: FeatureSpec,
    pub censor_spec: FeatureSpec,
    pub pi0_spec: FeatureSpec,
    /// Fewest events a per-day treatment or censoring regression needs when
    /// the process occurs anywhere in the data. With 0 a day without events
    /// gets probability 0.
    pub min_events: usize,
    pub eps_tol: f64,
}

impl Default for LtmleOptions {
    fn default() -> Self {
        LtmleOptions {
            q_spec: FeatureSpec::hazard_correct(),
            baseline_spec: FeatureSpec::new("ltmle_baseline", &["1", "l0", "a0"]).expect("static names"),
            trt_spec: FeatureSpec::new("ltmle_trt", &["1", "l_current"]).expect("static names"),
            censor_spec: FeatureSpec::new("ltmle_censor", &["1", "a0", "l_current"]).expect("static names"),
            pi0_spec: FeatureSpec::pi0_correct(),
            min_events: 0,
            eps_tol: 1e-12,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LtmleResult {
    pub intervention: String,
    pub psi: f64,
    pub sigma2: f64,
    pub se: f64,
    pub ic: Vec<f64>,
    /// Fluctuation of each day, then of the baseline step.
    pub epsilons: Vec<f64>,
    /// Largest |weighted score| / n after each fluctuation.
    pub max_score: f64,
    pub max_weight: f64,
}

/// One subject on one day.
struct Day {
    /// State before the day's treatment tick.
    pre: HistorySnapshot,
    /// State after the day's treatment tick.
    post: HistorySnapshot,
    a_after: Label,
    censored: bool,
    died: bool,
    /// Treatment agrees with the rule from baseline through this day.
    follows: bool,
}

fn collapse(path: &ObservedPath, a_star: Label, days: usize) -> Vec<Day> {
    let mut out = Vec::new();
    let mut replay = Replay::new(path);
    let mut follows = path.a0 == a_star;
    let mut ev = path.events.iter().peekable();
    for k in 0..days {
        let day = k as f64;
        let mut apply_until = |replay: &mut Replay, t: f64, follows: &mut bool| {
            while let Some(e) = ev.next_if(|e| e.time < t) {
                if let Mark::Trt(a) = e.mark {
                    *follows &= a == a_star;
                }
                replay.apply(e, None);
            }
        };
        apply_until(&mut replay, day + 0.3, &mut follows);
        let pre = replay.snapshot(path, day + 0.3);
        apply_until(&mut replay, day + 0.5, &mut follows);
        let post = replay.snapshot(path, day + 0.5);
        let a_after = post.a_current;
        let censored = ev.next_if(|e| e.time < day + 0.7 && e.mark == Mark::Censor).is_some();
        let died = !censored && ev.next_if(|e| e.time < day + 1.0 && e.mark == Mark::Death).is_some();
        out.push(Day { pre, post, a_after, censored, died, follows });
        if censored || died {
            break;
        }
    }
    out
}

fn with_rule(s: &HistorySnapshot, a: Label) -> HistorySnapshot {
    let mut s = s.clone();
    s.a0 = a;
    s.a_current = a;
    s
}

/// Quasi-binomial fit with exact handling of constant outcomes. Returns the
/// fitted logit of each requested row.
fn fit_predict(spec: &FeatureSpec, tau: f64, fit: &[(&HistorySnapshot, f64)], at: &[&HistorySnapshot]) -> Result<Vec<f64>> {
    let first = fit[0].1;
    if fit.iter().all(|(_, y)| *y == first) && (first == 0.0 || first == 1.0) {
        let v = if first == 0.0 { f64::NEG_INFINITY } else { f64::INFINITY };
        return Ok(vec![v; at.len()]);
    }
    let mut x = Design::new(spec.len());
    for (s, _) in fit {
        x.push(&features(s, spec, tau));
    }
    let y: Vec<f64> = fit.iter().map(|(_, y)| *y).collect();
    let (cx, cy, cw) = compress(&x, &y, &vec![1.0; y.len()]);
    let glm = fit_binary(&cx, &cy, &cw, None, GlmOptions::default())?;
    Ok(at.iter().map(|s| crate::nuisance::dot(&features(s, spec, tau), &glm.coefficients)).collect())
}

/// Weighted intercept fluctuation: root of `sum w (y - expit(o + eps))`.
fn solve_intercept(rows: &[(f64, f64, f64)], tol: f64) -> f64 {
    let score = |e: f64| rows.iter().map(|(y, o, w)| w * (y - expit(o + e))).sum::<f64>();
    let info = |e: f64| {
        rows.iter()
            .map(|(_, o, w)| {
                let p = expit(o + e);
                w * p * (1.0 - p)
            })
            .sum::<f64>()
    };
    let (mut lo, mut hi) = (-30.0, 30.0);
    if rows.is_empty() || score(0.0).abs() <= tol {
        return 0.0;
    }
    let mut e = 0.0;
    for _ in 0..300 {
        let s = score(e);
        if s.abs() <= tol {
            break;
        }
        if s > 0.0 {
            lo = e;
        } else {
            hi = e;
        }
        let i = info(e);
        let step = if i > 0.0 { e + s / i } else { f64::NAN };
        e = if step.is_finite() && step > lo && step < hi { step } else { 0.5 * (lo + hi) };
        if hi - lo < 1e-15 {
            break;
        }
    }
    e
}

fn shift(logit_q: f64, eps: f64) -> f64 {
    if logit_q.is_finite() {
        expit(logit_q + eps)
    } else if logit_q > 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Per-day probability that a subject stays in its previous treatment
/// stratum or switches, from stratum-specific regressions.
#[allow(clippy::too_many_arguments)]
fn day_probability(
    k: usize,
    what: &str,
    spec: &FeatureSpec,
    tau: f64,
    rows: &[(&HistorySnapshot, bool)],
    occurs: bool,
    min_events: usize,
) -> Result<Vec<f64>> {
    if rows.is_empty() {
        return Ok(Vec::new());
    }
    let events = rows.iter().filter(|(_, e)| *e).count();
    if events == 0 && !occurs {
        return Ok(vec![0.0; rows.len()]);
    }
    if events < min_events {
        return Err(Error::SparseTimePoint(format!("day {k}: {events} {what} events among {} at risk", rows.len())));
    }
    let fit: Vec<(&HistorySnapshot, f64)> = rows.iter().map(|(s, e)| (*s, f64::from(u8::from(*e)))).collect();
    let at: Vec<&HistorySnapshot> = rows.iter().map(|(s, _)| *s).collect();
    Ok(fit_predict(spec, tau, &fit, &at)?.into_iter().map(|v| shift(v, 0.0)).collect())
}

/// Discrete-time LTMLE of the mean outcome under a static rule: backward
/// per-day outcome regressions pooled over treatment histories, each
/// followed by a weighted intercept fluctuation with the cumulative inverse
/// probability of following the rule and staying uncensored.
pub fn ltmle_discrete(paths: &[ObservedPath], g_star: &Intervention, opts: &LtmleOptions) -> Result<LtmleResult> {
    let a_star = match g_star.rule {
        Rule::Static(a) => a,
        Rule::Dynamic(_) => return Err(Error::Input("discrete LTMLE supports static rules only".into())),
    };
    let n = paths.len();
    if n == 0 {
        return Err(Error::Input("empty cohort".into()));
    }
    let days = match TickSchedule::infer(paths) {
        TickSchedule::DaySubticks { days } => days as usize,
        _ => return Err(Error::Input("data are not on the day grid".into())),
    };
    let tau = paths[0].tau;
    let recs: Vec<Vec<Day>> = paths.iter().map(|p| collapse(p, a_star, days)).collect();

    // Treatment and censoring mechanisms.
    let pi0 = fit_baseline_treatment(paths, &opts.pi0_spec, &Learner::Glm)?;
    let base: Vec<HistorySnapshot> = paths.iter().map(baseline_snapshot).collect();
    let g0: Vec<f64> = base.iter().map(|s| rule_prob(pi0.predict(s, tau), a_star)).collect();
    let switch_occurs = |from: Label| recs.iter().flatten().any(|d| d.pre.a_current == from && d.a_after != from);
    let occurs = [switch_occurs(0), switch_occurs(1)];
    let censor_occurs = recs.iter().flatten().any(|d| d.censored);
    // g[i][k]: probability of the observed day-k treatment and of staying uncensored.
    let mut g: Vec<Vec<f64>> = recs.iter().map(|r| vec![1.0; r.len()]).collect();
    for k in 0..days {
        let at: Vec<usize> = (0..n).filter(|&i| recs[i].len() > k).collect();
        for from in [0, 1] {
            let idx: Vec<usize> = at.iter().copied().filter(|&i| recs[i][k].pre.a_current == from).collect();
            let rows: Vec<(&HistorySnapshot, bool)> =
                idx.iter().map(|&i| (&recs[i][k].pre, recs[i][k].a_after != from)).collect();
            let p = day_probability(k, "treatment switch", &opts.trt_spec, tau, &rows, occurs[from as usize], opts.min_events)?;
            for (&i, p) in idx.iter().zip(p) {
                g[i][k] *= if recs[i][k].a_after != from { p } else { 1.0 - p };
            }
        }
        let rows: Vec<(&HistorySnapshot, bool)> = at.iter().map(|&i| (&recs[i][k].post, recs[i][k].censored)).collect();
        let p = day_probability(k, "censoring", &opts.censor_spec, tau, &rows, censor_occurs, opts.min_events)?;
        for (&i, p) in at.iter().zip(p) {
            g[i][k] *= 1.0 - p;
        }
    }
    // Cumulative clever weights of followers.
    let mut h: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut max_weight: f64 = 0.0;
    for i in 0..n {
        let mut cum = g0[i];
        let mut hi = Vec::with_capacity(recs[i].len());
        for (k, d) in recs[i].iter().enumerate() {
            cum *= g[i][k];
            let w = if d.follows && !d.censored {
                if cum < MIN_DENOMINATOR {
                    return Err(Error::ZeroDenominator(format!("subject {}: day {k}", paths[i].subject_id)));
                }
                1.0 / cum
            } else {
                0.0
            };
            max_weight = max_weight.max(w);
            hi.push(w);
        }
        h.push(hi);
    }

    // Backward sequential regressions. `next[i]` is the targeted value of
    // day k + 1 at the rule, defined when subject i reaches that day.
    let mut next = vec![f64::NAN; n];
    let mut ic = vec![0.0; n];
    let mut epsilons = vec![0.0; days + 1];
    let mut max_score: f64 = 0.0;
    for k in (0..days).rev() {
        let at: Vec<usize> = (0..n).filter(|&i| recs[i].len() > k).collect();
        let fit_idx: Vec<usize> = at.iter().copied().filter(|&i| !recs[i][k].censored).collect();
        if fit_idx.is_empty() {
            return Err(Error::SparseTimePoint(format!("day {k}: no uncensored subjects at risk")));
        }
        let outcome = |i: usize| {
            let d = &recs[i][k];
            if d.died {
                1.0
            } else if k + 1 == days {
                0.0
            } else {
                next[i]
            }
        };
        let fit: Vec<(&HistorySnapshot, f64)> = fit_idx.iter().map(|&i| (&recs[i][k].post, outcome(i))).collect();
        let rule_snaps: Vec<HistorySnapshot> = at.iter().map(|&i| with_rule(&recs[i][k].post, a_star)).collect();
        let targets: Vec<&HistorySnapshot> = rule_snaps.iter().collect();
        let q = fit_predict(&opts.q_spec, tau, &fit, &targets)?;
        let pos: std::collections::HashMap<usize, usize> = at.iter().enumerate().map(|(j, &i)| (i, j)).collect();
        let flu: Vec<(f64, f64, f64)> = fit_idx
            .iter()
            .filter(|&&i| h[i][k] > 0.0 && q[pos[&i]].is_finite())
            .map(|&i| (outcome(i), q[pos[&i]], h[i][k]))
            .collect();
        let eps = solve_intercept(&flu, opts.eps_tol * n as f64);
        epsilons[k] = eps;
        let score: f64 = flu.iter().map(|(y, o, w)| w * (y - expit(o + eps))).sum();
        max_score = max_score.max(score.abs() / n as f64);
        let mut updated = vec![f64::NAN; n];
        for (j, &i) in at.iter().enumerate() {
            updated[i] = shift(q[j], eps);
        }
        for &i in &fit_idx {
            if h[i][k] > 0.0 {
                ic[i] += h[i][k] * (outcome(i) - updated[i]);
            }
        }
        next = updated;
    }
    // Baseline step.
    let fit: Vec<(&HistorySnapshot, f64)> = (0..n).map(|i| (&base[i], next[i])).collect();
    let rule_base: Vec<HistorySnapshot> = base.iter().map(|s| with_rule(s, a_star)).collect();
    let targets: Vec<&HistorySnapshot> = rule_base.iter().collect();
    let q = fit_predict(&opts.baseline_spec, tau, &fit, &targets)?;
    let h0: Vec<f64> = (0..n).map(|i| if paths[i].a0 == a_star { 1.0 / g0[i].max(MIN_DENOMINATOR) } else { 0.0 }).collect();
    let flu: Vec<(f64, f64, f64)> =
        (0..n).filter(|&i| h0[i] > 0.0 && q[i].is_finite()).map(|i| (next[i], q[i], h0[i])).collect();
    let eps = solve_intercept(&flu, opts.eps_tol * n as f64);
    epsilons[days] = eps;
    let score: f64 = flu.iter().map(|(y, o, w)| w * (y - expit(o + eps))).sum();
    max_score = max_score.max(score.abs() / n as f64);
    let q0: Vec<f64> = q.iter().map(|v| shift(*v, eps)).collect();
    let psi = mean(&q0);
    for i in 0..n {
        ic[i] += h0[i] * (next[i] - q0[i]) + q0[i] - psi;
    }
    let sigma2 = variance(&ic);
    Ok(LtmleResult {
        intervention: g_star.name.clone(),
        psi,
        sigma2,
        se: (sigma2 / n as f64).sqrt(),
        ic,
        epsilons,
        max_score,
        max_weight,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::{EventRecord, Process};
    use crate::nuisance::{GFit, HazardModel, Predictor};

    /// (w, a0, y) on a one-day horizon with no monitoring and no censoring.
    fn toy() -> Vec<ObservedPath> {
        let rows = [(0.0, 1, 1.0), (0.0, 1, 0.0), (0.0, 0, 0.0), (1.0, 1, 1.0), (1.0, 0, 1.0), (1.0, 0, 0.0)];
        rows.iter()
            .enumerate()
            .map(|(i, &(w, a, y))| {
                let events = if y == 1.0 { vec![EventRecord { time: 0.8, mark: Mark::Death }] } else { vec![] };
                ObservedPath::new(i as u64, vec![w], a, vec![w], 1.0, events).unwrap()
            })
            .collect()
    }

    fn toy_g(paths: &[ObservedPath]) -> GFit {
        GFit {
            pi0: fit_baseline_treatment(paths, &FeatureSpec::pi0_correct(), &Learner::Glm).unwrap(),
            pi: Predictor::known(FeatureSpec::intercept(), vec![0.0]),
            censor: HazardModel {
                process: Process::Censor,
                predictor: Predictor::known(FeatureSpec::intercept(), vec![-30.0]),
            },
            tau: 1.0,
        }
    }

    #[test]
    fn ltmle_reduces_to_aipw_on_point_treatment() {
        // Cell means E[Y | a=1, w=0] = 1/2, E[Y | a=1, w=1] = 1; the
        // augmentation vanishes for a saturated outcome model, so
        // AIPW = (3 * 0.5 + 3 * 1) / 6.
        let paths = toy();
        let r = ltmle_discrete(&paths, &Intervention::static_rule(1), &LtmleOptions::default()).unwrap();
        assert!((r.psi - 0.75).abs() < 1e-8, "{}", r.psi);
        // Under a* = 0: E[Y | a=0, w=0] = 0, E[Y | a=0, w=1] = 1/2.
        let r0 = ltmle_discrete(&paths, &Intervention::static_rule(0), &LtmleOptions::default()).unwrap();
        assert!((r0.psi - 0.25).abs() < 1e-8, "{}", r0.psi);
        assert!(r.max_score < 1e-8);
    }

    #[test]
    fn ipw_matches_hand_weights_on_toy() {
        // pi0(1 | w=0) = 2/3, pi0(1 | w=1) = 1/3: (1 * 3/2 + 1 * 3) / 6.
        let paths = toy();
        let sched = TickSchedule::infer(&paths);
        let r = ipw_estimate(&paths, &sched, &toy_g(&paths), &Intervention::static_rule(1), ArmOptions::default())
            .unwrap();
        assert!((r.psi - 0.75).abs() < 1e-9, "{}", r.psi);
        assert!(mean(&r.ic).abs() < 1e-12);
    }

    struct Unit;

    impl GModel for Unit {
        fn pi0(&self, s: &HistorySnapshot) -> f64 {
            f64::from(s.a0)
        }
        fn pi(&self, _: &HistorySnapshot) -> f64 {
            1.0
        }
        fn censor(&self, _: &HistorySnapshot) -> f64 {
            0.0
        }
    }

    #[test]
    fn unit_weights_give_sample_mean() {
        let paths: Vec<ObservedPath> = toy().into_iter().filter(|p| p.a0 == 1).collect();
        let sched = TickSchedule::infer(&paths);
        let r = ipw_estimate(&paths, &sched, &Unit, &Intervention::static_rule(1), ArmOptions::default()).unwrap();
        assert_eq!(r.psi, 2.0 / 3.0);
    }

    #[test]
    fn all_deviating_gives_zero_with_warning() {
        let paths: Vec<ObservedPath> = toy().into_iter().filter(|p| p.a0 == 0).collect();
        let sched = TickSchedule::infer(&paths);
        let r = ipw_estimate(&paths, &sched, &toy_g(&toy()), &Intervention::static_rule(1), ArmOptions::default())
            .unwrap();
        assert_eq!(r.psi, 0.0);
        assert_eq!(r.warnings.len(), 1);
    }

    #[test]
    fn all_zero_outcome_gives_zero() {
        let paths: Vec<ObservedPath> = toy()
            .into_iter()
            .map(|mut p| {
                p.events.clear();
                p
            })
            .collect();
        let r = ltmle_discrete(&paths, &Intervention::static_rule(1), &LtmleOptions::default()).unwrap();
        assert_eq!(r.psi, 0.0);
    }

    #[test]
    fn dynamic_rules_are_rejected() {
        let rule = Intervention::dynamic("always", |_| 1);
        assert!(matches!(ltmle_discrete(&toy(), &rule, &LtmleOptions::default()), Err(Error::Input(_))));
    }
}
