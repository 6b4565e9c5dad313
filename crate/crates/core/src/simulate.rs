//! Day-grid cohort simulator and Monte Carlo oracle.
//!
//! Each day `k` runs, in order, covariate monitoring (`k + 0.2`), treatment
//! monitoring (`k + 0.4`), censoring (`k + 0.6`) and death (`k + 0.8`).
//! Treatment is absorbing: a treatment monitor can start treatment but a
//! treated subject stays treated. Every per-day probability of a monitored
//! process is `monitoring_scale * expit(eta)`, capped at `prob_cap`.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{EventRecord, Intervention, Label, Mark, ObservedPath, Replay};

pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DgpConfig {
    pub n: usize,
    pub tau: u32,
    pub seed: u64,
    /// Defaults to `30 / tau`.
    pub monitoring_scale: Option<f64>,
    pub prob_cap: f64,
    /// `[intercept, slope on (L0 - 3.5)]`.
    pub a0_coef: [f64; 2],
    pub cov_monitor_coef: f64,
    /// `[intercept, A_current]` for the new value of L.
    pub new_l_coef: [f64; 2],
    /// `[intercept, 1{L=1}*1{A=0}]`.
    pub trt_monitor_coef: [f64; 2],
    /// `[intercept, 1{L=1}, A0]`.
    pub switch_on_coef: [f64; 3],
    /// `[intercept, A0, 1{L=1}]`.
    pub censor_coef: [f64; 3],
    /// `[intercept, A0, A_current, 1{L=1}, A0*1{L=1}]`.
    pub death_coef: [f64; 5],
}

impl Default for DgpConfig {
    fn default() -> Self {
        DgpConfig {
            n: 1000,
            tau: 30,
            seed: 1,
            monitoring_scale: None,
            prob_cap: 0.95,
            a0_coef: [-0.8, 0.4],
            cov_monitor_coef: -2.0,
            new_l_coef: [-0.5, 0.8],
            trt_monitor_coef: [-2.2, 0.6],
            switch_on_coef: [-0.4, 0.9, -0.8],
            censor_coef: [-5.5, 0.4, 0.5],
            death_coef: [-4.3, -0.7, -0.9, 1.1, 0.35],
        }
    }
}

fn parse_vec<const N: usize>(key: &str, v: &str) -> Result<[f64; N]> {
    let xs: Vec<f64> = v
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("{key}: expected {N} numbers")))?;
    xs.try_into().map_err(|_| Error::Config(format!("{key}: expected {N} numbers")))
}

fn fmt_vec(xs: &[f64]) -> String {
    xs.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(",")
}

impl DgpConfig {
    pub fn with_tau(tau: u32) -> Self {
        DgpConfig { tau, ..DgpConfig::default() }
    }

    pub fn scale(&self) -> f64 {
        self.monitoring_scale.unwrap_or(30.0 / f64::from(self.tau))
    }

    pub fn validate(&self) -> Result<()> {
        if self.tau == 0 {
            return Err(Error::Config("tau must be a positive number of days".into()));
        }
        let m = self.scale();
        if !(m > 0.0 && m.is_finite()) {
            return Err(Error::Config(format!("monitoring_scale must be positive, got {m}")));
        }
        if !(self.prob_cap > 0.0 && self.prob_cap < 1.0) {
            return Err(Error::Config(format!("prob_cap must lie in (0, 1), got {}", self.prob_cap)));
        }
        let all = self
            .a0_coef
            .iter()
            .chain([&self.cov_monitor_coef])
            .chain(&self.new_l_coef)
            .chain(&self.trt_monitor_coef)
            .chain(&self.switch_on_coef)
            .chain(&self.censor_coef)
            .chain(&self.death_coef);
        for c in all {
            if c.is_nan() {
                return Err(Error::Config("coefficient is NaN".into()));
            }
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment. Vector values are
    /// comma separated. Unknown keys are an error.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = DgpConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let num = |v: &str| v.parse::<f64>().map_err(|_| Error::Config(format!("{key}: bad number `{v}`")));
        let int = |v: &str| v.parse::<u64>().map_err(|_| Error::Config(format!("{key}: bad integer `{v}`")));
        match key {
            "n" => self.n = int(v)? as usize,
            "tau" => self.tau = int(v)? as u32,
            "seed" => self.seed = int(v)?,
            "monitoring_scale" => self.monitoring_scale = Some(num(v)?),
            "prob_cap" => self.prob_cap = num(v)?,
            "a0_coef" => self.a0_coef = parse_vec(key, v)?,
            "cov_monitor_coef" => self.cov_monitor_coef = num(v)?,
            "new_l_coef" => self.new_l_coef = parse_vec(key, v)?,
            "trt_monitor_coef" => self.trt_monitor_coef = parse_vec(key, v)?,
            "switch_on_coef" => self.switch_on_coef = parse_vec(key, v)?,
            "censor_coef" => self.censor_coef = parse_vec(key, v)?,
            "death_coef" => self.death_coef = parse_vec(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("n = {}\ntau = {}\nseed = {}\n", self.n, self.tau, self.seed);
        if let Some(m) = self.monitoring_scale {
            s += &format!("monitoring_scale = {m}\n");
        }
        s += &format!("prob_cap = {}\n", self.prob_cap);
        s += &format!("a0_coef = {}\n", fmt_vec(&self.a0_coef));
        s += &format!("cov_monitor_coef = {}\n", self.cov_monitor_coef);
        s += &format!("new_l_coef = {}\n", fmt_vec(&self.new_l_coef));
        s += &format!("trt_monitor_coef = {}\n", fmt_vec(&self.trt_monitor_coef));
        s += &format!("switch_on_coef = {}\n", fmt_vec(&self.switch_on_coef));
        s += &format!("censor_coef = {}\n", fmt_vec(&self.censor_coef));
        s += &format!("death_coef = {}\n", fmt_vec(&self.death_coef));
        s
    }

    fn scaled(&self, eta: f64) -> f64 {
        (self.scale() * expit(eta)).min(self.prob_cap)
    }

    pub fn p_a0(&self, l0: f64) -> f64 {
        expit(self.a0_coef[0] + self.a0_coef[1] * (l0 - 3.5))
    }

    pub fn p_cov_monitor(&self) -> f64 {
        self.scaled(self.cov_monitor_coef)
    }

    pub fn p_new_l(&self, a: Label) -> f64 {
        expit(self.new_l_coef[0] + self.new_l_coef[1] * f64::from(a))
    }

    pub fn p_trt_monitor(&self, l: f64, a: Label) -> f64 {
        let x = if l >= 0.5 && a == 0 { 1.0 } else { 0.0 };
        self.scaled(self.trt_monitor_coef[0] + self.trt_monitor_coef[1] * x)
    }

    pub fn p_switch_on(&self, l: f64, a0: Label) -> f64 {
        let c = &self.switch_on_coef;
        expit(c[0] + c[1] * l + c[2] * f64::from(a0))
    }

    pub fn p_censor(&self, l: f64, a0: Label) -> f64 {
        let c = &self.censor_coef;
        self.scaled(c[0] + c[1] * f64::from(a0) + c[2] * l)
    }

    pub fn p_death(&self, l: f64, a0: Label, a: Label) -> f64 {
        let c = &self.death_coef;
        let a0 = f64::from(a0);
        self.scaled(c[0] + c[1] * a0 + c[2] * f64::from(a) + c[3] * l + c[4] * a0 * l)
    }
}

/// Monte Carlo estimate of the interventional mean outcome.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OraclePsi {
    pub psi: f64,
    pub mc_se: f64,
    pub n_mc: usize,
    pub intervention: String,
}

fn subject_rng(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

/// Simulates one subject. The uniform draws consumed per day do not depend
/// on the intervention, so observational and interventional runs with the
/// same seed are coupled.
pub fn simulate_subject(cfg: &DgpConfig, id: u64, g_star: Option<&Intervention>) -> ObservedPath {
    let mut rng = subject_rng(cfg.seed, id);
    let tau = f64::from(cfg.tau);
    let l0 = f64::from(rng.gen_range(1u8..=6));
    let u_a0: f64 = rng.gen();
    let l_init = vec![if l0 >= 4.0 { 1.0 } else { 0.0 }];
    let mut path = ObservedPath { subject_id: id, l0: vec![l0], a0: 0, l_init, tau, events: Vec::new() };
    let a0 = match g_star {
        Some(g) => g.apply(&crate::events::baseline_snapshot(&path)),
        None => Label::from(u_a0 < cfg.p_a0(l0)),
    };
    path.a0 = a0;
    let mut replay = Replay::new(&path);
    let mut l = path.l_init[0];
    let mut a = a0;
    let p_cm = cfg.p_cov_monitor();
    let push = |path: &mut ObservedPath, replay: &mut Replay, time: f64, mark: Mark| {
        let e = EventRecord { time, mark };
        replay.apply(&e, None);
        path.events.push(e);
    };
    for k in 0..cfg.tau {
        let day = f64::from(k);
        let u: [f64; 6] = rng.gen();
        if u[0] < p_cm {
            l = if u[1] < cfg.p_new_l(a) { 1.0 } else { 0.0 };
            push(&mut path, &mut replay, day + 0.2, Mark::Cov(vec![l]));
        }
        if u[2] < cfg.p_trt_monitor(l, a) {
            let time = day + 0.4;
            a = match g_star {
                Some(g) => g.apply(&replay.snapshot(&path, time)),
                None if a == 1 => 1,
                None => Label::from(u[3] < cfg.p_switch_on(l, a0)),
            };
            push(&mut path, &mut replay, time, Mark::Trt(a));
        }
        if g_star.is_none() && u[4] < cfg.p_censor(l, a0) {
            push(&mut path, &mut replay, day + 0.6, Mark::Censor);
            break;
        }
        if u[5] < cfg.p_death(l, a0, a) {
            push(&mut path, &mut replay, day + 0.8, Mark::Death);
            break;
        }
    }
    path
}

pub fn simulate_cohort(cfg: &DgpConfig) -> Result<Vec<ObservedPath>> {
    cfg.validate()?;
    Ok((0..cfg.n as u64).into_par_iter().map(|i| simulate_subject(cfg, i, None)).collect())
}

/// Samples from the interventional distribution: treatment at every
/// monitor (and at baseline) follows `g_star`, censoring never happens.
pub fn simulate_under_intervention(cfg: &DgpConfig, g_star: &Intervention) -> Result<Vec<ObservedPath>> {
    cfg.validate()?;
    Ok((0..cfg.n as u64).into_par_iter().map(|i| simulate_subject(cfg, i, Some(g_star))).collect())
}

pub fn true_psi(cfg: &DgpConfig, g_star: &Intervention, n_mc: usize, seed: u64) -> Result<OraclePsi> {
    if n_mc < 10_000 {
        return Err(Error::Config(format!("n_mc must be at least 10^4, got {n_mc}")));
    }
    cfg.validate()?;
    let c = DgpConfig { seed, ..cfg.clone() };
    let deaths: usize = (0..n_mc as u64)
        .into_par_iter()
        .map(|i| simulate_subject(&c, i, Some(g_star)).outcome() as usize)
        .sum();
    let psi = deaths as f64 / n_mc as f64;
    Ok(OraclePsi {
        psi,
        mc_se: (psi * (1.0 - psi) / n_mc as f64).sqrt(),
        n_mc,
        intervention: g_star.name.clone(),
    })
}

/// Monitoring counts per subject, averaged over the cohort.
pub fn mean_monitoring_count(paths: &[ObservedPath]) -> f64 {
    let total: usize = paths
        .iter()
        .map(|p| p.events.iter().filter(|e| matches!(e.mark, Mark::Trt(_) | Mark::Cov(_))).count())
        .sum();
    total as f64 / paths.len().max(1) as f64
}

/// Empirical frequency of baseline treatment by baseline level.
pub fn a0_rate_by_l0(paths: &[ObservedPath]) -> HashMap<u8, f64> {
    let mut acc: HashMap<u8, (usize, usize)> = HashMap::new();
    for p in paths {
        let e = acc.entry(p.l0[0] as u8).or_default();
        e.0 += usize::from(p.a0);
        e.1 += 1;
    }
    acc.into_iter().map(|(k, (a, n))| (k, a as f64 / n as f64)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::write_csv;

    #[test]
    fn empty_and_deterministic() {
        let cfg = DgpConfig { n: 0, ..DgpConfig::default() };
        assert!(simulate_cohort(&cfg).unwrap().is_empty());
        let cfg = DgpConfig { n: 200, tau: 10, seed: 9, ..DgpConfig::default() };
        let mut a = Vec::new();
        let mut b = Vec::new();
        write_csv(&simulate_cohort(&cfg).unwrap(), &mut a).unwrap();
        write_csv(&simulate_cohort(&cfg).unwrap(), &mut b).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn no_death_no_censor() {
        let cfg = DgpConfig {
            n: 300,
            censor_coef: [f64::NEG_INFINITY, 0.0, 0.0],
            death_coef: [f64::NEG_INFINITY, 0.0, 0.0, 0.0, 0.0],
            ..DgpConfig::default()
        };
        let paths = simulate_cohort(&cfg).unwrap();
        assert!(paths.iter().all(|p| p.terminal().is_none() && p.outcome() == 0.0));
        let psi = true_psi(&cfg, &Intervention::static_rule(1), 10_000, 3).unwrap();
        assert_eq!(psi.psi, 0.0);
    }

    #[test]
    fn static_rule_sets_every_monitor() {
        let cfg = DgpConfig { n: 300, tau: 30, ..DgpConfig::default() };
        let paths = simulate_under_intervention(&cfg, &Intervention::static_rule(1)).unwrap();
        for p in &paths {
            assert_eq!(p.a0, 1);
            assert!(!p.is_censored());
            for e in &p.events {
                if let Mark::Trt(a) = e.mark {
                    assert_eq!(a, 1);
                }
            }
        }
    }

    #[test]
    fn treatment_free_death_gives_null_contrast() {
        // L responds to treatment, so it is made inert as well.
        let cfg = DgpConfig {
            death_coef: [-4.3, 0.0, 0.0, 1.1, 0.0],
            new_l_coef: [-0.5, 0.0],
            ..DgpConfig::default()
        };
        let q1 = true_psi(&cfg, &Intervention::static_rule(1), 20_000, 5).unwrap();
        let q0 = true_psi(&cfg, &Intervention::static_rule(0), 20_000, 5).unwrap();
        assert!((q1.psi - q0.psi).abs() <= 3.0 * (q1.mc_se.powi(2) + q0.mc_se.powi(2)).sqrt());
    }

    #[test]
    fn mc_se_matches_binomial() {
        let o = true_psi(&DgpConfig::with_tau(5), &Intervention::static_rule(0), 10_000, 2).unwrap();
        assert!((o.mc_se - (o.psi * (1.0 - o.psi) / 1e4).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn config_round_trip_and_errors() {
        let cfg = DgpConfig { n: 17, tau: 5, seed: 4, monitoring_scale: Some(2.5), ..DgpConfig::default() };
        assert_eq!(DgpConfig::parse(&cfg.to_text()).unwrap(), cfg);
        assert!(matches!(DgpConfig::parse("bogus = 1"), Err(Error::Config(_))));
        assert!(matches!(DgpConfig::parse("monitoring_scale = -1"), Err(Error::Config(_))));
        assert!(matches!(DgpConfig::parse("tau = 0"), Err(Error::Config(_))));
        let c = DgpConfig::parse("death_coef = -inf,0,0,0,0\n# comment\n").unwrap();
        assert_eq!(c.death_coef[0], f64::NEG_INFINITY);
    }
}
