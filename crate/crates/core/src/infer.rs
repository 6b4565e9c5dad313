//! Wald intervals, contrasts of two interventions, and the Monte Carlo
//! study harness.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::baselines::{ipw_estimate, ltmle_discrete, IpwResult, LtmleOptions, LtmleResult};
use crate::error::{Error, Result};
use crate::events::Intervention;
use crate::gcomp::{mean, variance, ArmOptions};
use crate::pipeline::{estimate_arm, fit_nuisance, EstimateOptions, NuisanceMode};
use crate::simulate::{simulate_cohort, true_psi, DgpConfig};
use crate::target::{TmleOptions, TmleResult};

/// Standard normal quantile.
pub fn normal_quantile(p: f64) -> f64 {
    Normal::new(0.0, 1.0).expect("unit normal").inverse_cdf(p)
}

/// `psi +- z_{(1+level)/2} sqrt(sigma2 / n)`.
pub fn confidence_interval(psi: f64, sigma2: f64, n: usize, level: f64) -> (f64, f64) {
    let half = normal_quantile(0.5 * (1.0 + level)) * (sigma2.max(0.0) / n.max(1) as f64).sqrt();
    (psi - half, psi + half)
}

/// An estimate with its per-subject influence curve, in the form shared by
/// every estimator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub estimator: String,
    pub intervention: String,
    pub psi: f64,
    pub sigma2: f64,
    pub se: f64,
    #[serde(skip)]
    pub ic: Vec<f64>,
}

impl Estimate {
    pub fn new(estimator: &str, intervention: &str, psi: f64, ic: Vec<f64>) -> Self {
        let sigma2 = variance(&ic);
        let se = (sigma2 / ic.len().max(1) as f64).sqrt();
        Estimate { estimator: estimator.into(), intervention: intervention.into(), psi, sigma2, se, ic }
    }

    pub fn tmle(r: &TmleResult) -> Self {
        Estimate::new("tmle", &r.intervention, r.psi, r.eic.clone())
    }

    /// Untargeted plug-in of the same fit.
    pub fn initial(r: &TmleResult) -> Self {
        Estimate::new("initial", &r.intervention, r.psi_initial, r.eic_initial.clone())
    }

    pub fn ipw(r: &IpwResult) -> Self {
        Estimate::new("ipw", &r.intervention, r.psi, r.ic.clone())
    }

    pub fn ltmle(r: &LtmleResult) -> Self {
        Estimate::new("ltmle", &r.intervention, r.psi, r.ic.clone())
    }

    pub fn interval(&self, level: f64) -> (f64, f64) {
        confidence_interval(self.psi, self.sigma2, self.ic.len(), level)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastResult {
    pub psi1: f64,
    pub psi0: f64,
    pub diff: f64,
    /// Empirical variance of the per-subject influence-curve difference.
    pub sigma2_diff: f64,
    pub se: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub level: f64,
}

/// Difference `first - second` of two estimates on the same cohort.
pub fn contrast(first: &Estimate, second: &Estimate, level: f64) -> Result<ContrastResult> {
    if first.ic.len() != second.ic.len() || first.ic.is_empty() {
        return Err(Error::MisalignedCohorts(format!(
            "influence curves of length {} and {}",
            first.ic.len(),
            second.ic.len()
        )));
    }
    let d: Vec<f64> = first.ic.iter().zip(&second.ic).map(|(a, b)| a - b).collect();
    let sigma2_diff = variance(&d);
    let diff = first.psi - second.psi;
    let (ci_lower, ci_upper) = confidence_interval(diff, sigma2_diff, d.len(), level);
    Ok(ContrastResult {
        psi1: first.psi,
        psi0: second.psi,
        diff,
        sigma2_diff,
        se: (sigma2_diff / d.len() as f64).sqrt(),
        ci_lower,
        ci_upper,
        level,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    Tmle,
    Initial,
    Ipw,
    Ltmle,
}

impl EstimatorKind {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "tmle" => EstimatorKind::Tmle,
            "initial" => EstimatorKind::Initial,
            "ipw" => EstimatorKind::Ipw,
            "ltmle" => EstimatorKind::Ltmle,
            _ => return Err(Error::Input(format!("unknown estimator `{s}`"))),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::Tmle => "tmle",
            EstimatorKind::Initial => "initial",
            EstimatorKind::Ipw => "ipw",
            EstimatorKind::Ltmle => "ltmle",
        }
    }
}

/// The parameter a study reports on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    /// `psi(static_1) - psi(static_0)`.
    Contrast,
    Static0,
    Static1,
}

impl Target {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "contrast" | "diff" => Target::Contrast,
            "static_0" => Target::Static0,
            "static_1" => Target::Static1,
            _ => return Err(Error::Input(format!("unknown target `{s}`"))),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Target::Contrast => "contrast",
            Target::Static0 => "static_0",
            Target::Static1 => "static_1",
        }
    }

    fn arms(self) -> Vec<Intervention> {
        match self {
            Target::Contrast => vec![Intervention::static_rule(1), Intervention::static_rule(0)],
            Target::Static0 => vec![Intervention::static_rule(0)],
            Target::Static1 => vec![Intervention::static_rule(1)],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub dgp: DgpConfig,
    pub reps: usize,
    pub seed: u64,
    pub mode: NuisanceMode,
    pub estimators: Vec<EstimatorKind>,
    pub target: Target,
    pub level: f64,
    /// Oracle value of the target; computed by Monte Carlo when absent.
    pub psi0: Option<f64>,
    pub n_mc: usize,
    pub weight_cap: Option<f64>,
    pub tmle: TmleOptions,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            dgp: DgpConfig::default(),
            reps: 100,
            seed: 1,
            mode: NuisanceMode::Correct,
            estimators: vec![EstimatorKind::Tmle, EstimatorKind::Initial],
            target: Target::Contrast,
            level: 0.95,
            psi0: None,
            n_mc: 1_000_000,
            weight_cap: None,
            tmle: TmleOptions::default(),
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of repetition `rep`: a fixed 64-bit mix of the master seed and the
/// index, stable across platforms and toolchains.
pub fn rep_seed(master: u64, rep: usize) -> u64 {
    splitmix64(splitmix64(master) ^ rep as u64)
}

/// Outcome of one estimator in one repetition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepOutcome {
    pub rep: usize,
    pub seed: u64,
    pub estimator: EstimatorKind,
    pub estimate: Option<f64>,
    pub se: Option<f64>,
    pub covered: Option<bool>,
    pub iterations: Option<usize>,
    pub converged: Option<bool>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub estimator: String,
    pub tau: u32,
    pub n: usize,
    #[serde(rename = "M")]
    pub m: usize,
    pub psi0: f64,
    pub mean_est: f64,
    pub bias: f64,
    pub coverage: f64,
    pub sqrt_mse: f64,
    pub mean_sigma: f64,
    pub failures: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudySummary {
    pub row: StudyRow,
    /// Standard deviation of the estimates across repetitions.
    pub emp_sd: f64,
    /// Monte Carlo standard error of `mean_est`.
    pub mc_se: f64,
    /// Fraction of targeting runs meeting the stopping rule.
    pub converged: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub target: Target,
    pub mode: NuisanceMode,
    pub seed: u64,
    pub summaries: Vec<StudySummary>,
    pub reps: Vec<RepOutcome>,
}

impl StudyReport {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        for s in &self.summaries {
            wtr.serialize(&s.row)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn summary(&self, e: EstimatorKind) -> Option<&StudySummary> {
        self.summaries.iter().find(|s| s.row.estimator == e.name())
    }
}

/// Oracle value of a target by Monte Carlo.
pub fn oracle_target(dgp: &DgpConfig, target: Target, n_mc: usize, seed: u64) -> Result<f64> {
    let mut v = Vec::new();
    for arm in target.arms() {
        v.push(true_psi(dgp, &arm, n_mc, seed)?.psi);
    }
    Ok(if v.len() == 2 { v[0] - v[1] } else { v[0] })
}

fn combine(target: Target, ests: &[Estimate], level: f64) -> Result<(f64, f64, (f64, f64))> {
    if target == Target::Contrast {
        let c = contrast(&ests[0], &ests[1], level)?;
        Ok((c.diff, c.se, (c.ci_lower, c.ci_upper)))
    } else {
        Ok((ests[0].psi, ests[0].se, ests[0].interval(level)))
    }
}

/// Runs every estimator on one simulated cohort.
pub fn run_rep(cfg: &StudyConfig, rep: usize, psi0: f64) -> Vec<RepOutcome> {
    let seed = rep_seed(cfg.seed, rep);
    let blank = |e: EstimatorKind| RepOutcome {
        rep,
        seed,
        estimator: e,
        estimate: None,
        se: None,
        covered: None,
        iterations: None,
        converged: None,
        error: None,
    };
    let fail = |e: EstimatorKind, err: &Error| RepOutcome { error: Some(err.to_string()), ..blank(e) };
    let dgp = DgpConfig { seed, ..cfg.dgp.clone() };
    let paths = match simulate_cohort(&dgp) {
        Ok(p) => p,
        Err(err) => return cfg.estimators.iter().map(|&e| fail(e, &err)).collect(),
    };
    let arms = cfg.target.arms();
    let needs_fit = cfg.estimators.iter().any(|e| *e != EstimatorKind::Ltmle);
    let nuisance = if needs_fit { Some(fit_nuisance(&paths, cfg.mode)) } else { None };
    let mut tmle_runs: Option<Result<Vec<TmleResult>>> = None;
    let opts = EstimateOptions { arm: ArmOptions { weight_cap: cfg.weight_cap }, tmle: cfg.tmle };
    let mut out = Vec::new();
    for &e in &cfg.estimators {
        let ests: Result<(Vec<Estimate>, Option<(usize, bool)>)> = match e {
            EstimatorKind::Tmle | EstimatorKind::Initial => {
                let runs = tmle_runs.get_or_insert_with(|| {
                    let nu = match nuisance.as_ref().expect("fitted") {
                        Ok(nu) => nu,
                        Err(err) => return Err(Error::NoConvergence(format!("nuisance fit: {err}"))),
                    };
                    arms.iter().map(|g| estimate_arm(&paths, nu, g, opts).map(|(_, r)| r.tmle)).collect()
                });
                match runs {
                    Ok(rs) => {
                        let it = rs.iter().map(|r| r.iterations).max().unwrap_or(0);
                        let conv = rs.iter().all(|r| r.converged);
                        let f = if e == EstimatorKind::Tmle { Estimate::tmle } else { Estimate::initial };
                        Ok((rs.iter().map(f).collect(), (e == EstimatorKind::Tmle).then_some((it, conv))))
                    }
                    Err(err) => Err(Error::NoConvergence(err.to_string())),
                }
            }
            EstimatorKind::Ipw => match nuisance.as_ref().expect("fitted") {
                Ok(nu) => arms
                    .iter()
                    .map(|g| ipw_estimate(&paths, &nu.schedule, &nu.g, g, opts.arm).map(|r| Estimate::ipw(&r)))
                    .collect::<Result<Vec<_>>>()
                    .map(|v| (v, None)),
                Err(err) => Err(Error::NoConvergence(format!("nuisance fit: {err}"))),
            },
            EstimatorKind::Ltmle => arms
                .iter()
                .map(|g| ltmle_discrete(&paths, g, &LtmleOptions::default()).map(|r| Estimate::ltmle(&r)))
                .collect::<Result<Vec<_>>>()
                .map(|v| (v, None)),
        };
        let outcome = ests.and_then(|(v, it)| combine(cfg.target, &v, cfg.level).map(|c| (c, it)));
        out.push(match outcome {
            Ok(((est, se, (lo, hi)), it)) => RepOutcome {
                estimate: Some(est),
                se: Some(se),
                covered: Some(lo <= psi0 && psi0 <= hi),
                iterations: it.map(|x| x.0),
                converged: it.map(|x| x.1),
                ..blank(e)
            },
            Err(err) => {
                log::warn!("rep {rep} {}: {err}", e.name());
                fail(e, &err)
            }
        });
    }
    out
}

/// Aggregates repetitions of one estimator.
pub fn summarize(cfg: &StudyConfig, psi0: f64, e: EstimatorKind, reps: &[RepOutcome]) -> StudySummary {
    let mut ok: Vec<&RepOutcome> = reps.iter().filter(|r| r.estimator == e && r.estimate.is_some()).collect();
    // Sums run in repetition order whatever order the outcomes arrive in.
    ok.sort_by_key(|r| r.rep);
    let failures = reps.iter().filter(|r| r.estimator == e && r.estimate.is_none()).count();
    let est: Vec<f64> = ok.iter().map(|r| r.estimate.unwrap()).collect();
    let m = est.len();
    let nan_if_empty = |v: f64| if m == 0 { f64::NAN } else { v };
    let mean_est = nan_if_empty(mean(&est));
    let sd = if m > 1 { (variance(&est) * m as f64 / (m - 1) as f64).sqrt() } else { f64::NAN };
    let conv: Vec<bool> = ok.iter().filter_map(|r| r.converged).collect();
    StudySummary {
        row: StudyRow {
            estimator: e.name().to_string(),
            tau: cfg.dgp.tau,
            n: cfg.dgp.n,
            m,
            psi0,
            mean_est,
            bias: mean_est - psi0,
            coverage: nan_if_empty(ok.iter().filter(|r| r.covered == Some(true)).count() as f64 / m.max(1) as f64),
            sqrt_mse: nan_if_empty((est.iter().map(|x| (x - psi0).powi(2)).sum::<f64>() / m.max(1) as f64).sqrt()),
            mean_sigma: nan_if_empty(mean(&ok.iter().map(|r| r.se.unwrap()).collect::<Vec<_>>())),
            failures,
        },
        emp_sd: sd,
        mc_se: sd / (m as f64).sqrt(),
        converged: (!conv.is_empty()).then(|| conv.iter().filter(|c| **c).count() as f64 / conv.len() as f64),
    }
}

/// `reps` seeded repetitions of simulate, fit, estimate and interval.
/// Repetitions run on the current rayon pool; results do not depend on
/// its size.
pub fn run_study(cfg: &StudyConfig) -> Result<StudyReport> {
    if cfg.reps == 0 {
        return Err(Error::Input("a study needs at least one repetition".into()));
    }
    if cfg.estimators.is_empty() {
        return Err(Error::Input("no estimators requested".into()));
    }
    let psi0 = match cfg.psi0 {
        Some(v) => v,
        None => oracle_target(&cfg.dgp, cfg.target, cfg.n_mc, cfg.seed ^ 0x6f72_6163_6c65)?,
    };
    let reps: Vec<RepOutcome> = (0..cfg.reps).into_par_iter().flat_map_iter(|r| run_rep(cfg, r, psi0)).collect();
    let summaries = cfg.estimators.iter().map(|&e| summarize(cfg, psi0, e, &reps)).collect();
    Ok(StudyReport { target: cfg.target, mode: cfg.mode, seed: cfg.seed, summaries, reps })
}
