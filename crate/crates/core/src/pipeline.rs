//! Nuisance fitting and per-intervention estimation on one cohort.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{FeatureSpec, Intervention, ObservedPath, Process, TickSchedule};
use crate::gcomp::{build_arm, fit_z_glm, fit_z_hal, Arm, ArmOptions, FittedQ, WeightDiagnostics, ZFitInfo, ZFitOptions};
use crate::hal::HalOptions;
use crate::nuisance::{fit_baseline_treatment, fit_hazard, fit_treatment_mechanism, Candidate, GFit, Learner};
use crate::target::{run_tmle, TmleOptions, TmleResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NuisanceMode {
    /// Parametric models containing the generating mechanism.
    Correct,
    /// As `Correct`, but the iterated regressions ignore every time-varying
    /// subject variable.
    Misspecified,
    Hal,
    SuperLearner,
}

impl NuisanceMode {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "correct" => NuisanceMode::Correct,
            "misspecified" => NuisanceMode::Misspecified,
            "hal" => NuisanceMode::Hal,
            "superlearner" => NuisanceMode::SuperLearner,
            _ => return Err(Error::Input(format!("unknown learner mode `{s}`"))),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            NuisanceMode::Correct => "correct",
            NuisanceMode::Misspecified => "misspecified",
            NuisanceMode::Hal => "hal",
            NuisanceMode::SuperLearner => "superlearner",
        }
    }
}

fn hal_opts() -> HalOptions {
    HalOptions { max_knots: 40, n_lambda: 20, folds: 5, ..HalOptions::default() }
}

fn hal_hazard_spec() -> FeatureSpec {
    FeatureSpec::new("hal_hazard", &["a0", "a_current", "l_current", "t/tau"]).expect("static names")
}

fn hal_z_spec() -> FeatureSpec {
    FeatureSpec::new("hal_z", &["a0", "a_current", "l_current", "t/tau", "d_l", "d_a"]).expect("static names")
}

/// Fitted outcome-side hazards and treatment/censoring mechanism.
#[derive(Clone, Debug)]
pub struct Nuisance {
    pub mode: NuisanceMode,
    pub schedule: TickSchedule,
    pub q: FittedQ,
    pub g: GFit,
}

pub fn fit_nuisance(paths: &[ObservedPath], mode: NuisanceMode) -> Result<Nuisance> {
    let first = paths.first().ok_or_else(|| Error::Input("empty cohort".into()))?;
    let tau = first.tau;
    let schedule = TickSchedule::infer(paths);
    let (spec, learner) = match mode {
        NuisanceMode::Correct | NuisanceMode::Misspecified => (FeatureSpec::hazard_correct(), Learner::Glm),
        NuisanceMode::Hal => (hal_hazard_spec(), Learner::Hal(hal_opts())),
        NuisanceMode::SuperLearner => (
            FeatureSpec::hazard_correct(),
            Learner::SuperLearner {
                candidates: vec![
                    Candidate::Glm(FeatureSpec::hazard_correct()),
                    Candidate::InterceptOnly,
                    Candidate::Glm(FeatureSpec::new("hazard_time", &["1", "a0", "a_current", "l_current", "t/tau"])?),
                ],
                folds: 5,
                seed: 1,
            },
        ),
    };
    let hazard = |p: Process| fit_hazard(paths, &schedule, p, &spec, &learner);
    let hazards = [Some(hazard(Process::Cov)?), Some(hazard(Process::Trt)?), Some(hazard(Process::Death)?)];
    let g = GFit {
        pi0: fit_baseline_treatment(paths, &FeatureSpec::pi0_correct(), &Learner::Glm)?,
        pi: fit_treatment_mechanism(paths, &FeatureSpec::pi_correct(), &Learner::Glm)?,
        censor: hazard(Process::Censor)?,
        tau,
    };
    Ok(Nuisance { mode, schedule, q: FittedQ { tau, hazards, z: None }, g })
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EstimateOptions {
    pub arm: ArmOptions,
    pub tmle: TmleOptions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmEstimate {
    pub tmle: TmleResult,
    pub z_fit: ZFitInfo,
    pub weights: WeightDiagnostics,
}

/// Builds the arm of `g_star`, fits its iterated regression and targets it.
pub fn estimate_arm(
    paths: &[ObservedPath],
    nuisance: &Nuisance,
    g_star: &Intervention,
    opts: EstimateOptions,
) -> Result<(Arm, ArmEstimate)> {
    let mut arm = build_arm(paths, &nuisance.schedule, g_star, &nuisance.q, &nuisance.g, opts.arm)?;
    let (_, z_fit) = match nuisance.mode {
        NuisanceMode::Correct | NuisanceMode::SuperLearner => {
            fit_z_glm(&mut arm, &FeatureSpec::z_correct(), ZFitOptions::default())?
        }
        NuisanceMode::Misspecified => fit_z_glm(&mut arm, &FeatureSpec::z_misspecified(), ZFitOptions::default())?,
        NuisanceMode::Hal => fit_z_hal(&mut arm, &hal_z_spec(), &hal_opts(), 20)?,
    };
    let weights = arm.diagnostics.clone();
    let tmle = run_tmle(&mut arm, opts.tmle);
    Ok((arm, ArmEstimate { tmle, z_fit, weights }))
}
