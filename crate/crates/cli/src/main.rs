use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use cttmle_core::baselines::{ipw_estimate, ltmle_discrete, LtmleOptions};
use cttmle_core::events::{read_csv, write_csv, Intervention, ObservedPath};
use cttmle_core::gcomp::ArmOptions;
use cttmle_core::infer::{contrast, run_study, Estimate, EstimatorKind, StudyConfig, Target};
use cttmle_core::pipeline::{estimate_arm, fit_nuisance, EstimateOptions, NuisanceMode};
use cttmle_core::simulate::{simulate_cohort, true_psi, DgpConfig};
use cttmle_core::target::TmleOptions;
use cttmle_core::verify::{run_check, VerifyOptions, CHECKS};
use cttmle_core::Error;

#[derive(Parser)]
#[command(name = "cttmle", version, about = "Continuous-time TMLE for longitudinal event streams")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate a cohort and write it as long-format CSV.
    Simulate(SimulateArgs),
    /// Monte Carlo value of the mean outcome under an intervention.
    Oracle(OracleArgs),
    /// Estimate on a data file.
    Estimate(EstimateArgs),
    /// Repeated simulate-and-estimate study.
    Study(StudyArgs),
    /// Numerical identity checks on enumerable models.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct DgpArgs {
    /// File of `key = value` lines; flags below take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    tau: Option<u32>,
    /// Master seed; CTTMLE_SEED is used when the flag is absent.
    #[arg(long, env = "CTTMLE_SEED")]
    seed: Option<u64>,
}

impl DgpArgs {
    fn load(&self) -> Result<DgpConfig, Error> {
        let mut cfg = match &self.config {
            Some(p) => DgpConfig::parse(&read_text(p)?)?,
            None => DgpConfig::default(),
        };
        if let Some(n) = self.n {
            cfg.n = n;
        }
        if let Some(t) = self.tau {
            cfg.tau = t;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    dgp: DgpArgs,
    /// Output file; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct OracleArgs {
    #[command(flatten)]
    dgp: DgpArgs,
    /// `static_0`, `static_1` or `start_when_l`.
    #[arg(long, default_value = "static_1")]
    intervention: String,
    #[arg(long, default_value_t = 1_000_000)]
    n_mc: usize,
}

#[derive(Args)]
struct EstimateArgs {
    /// Long-format cohort CSV.
    #[arg(long)]
    data: PathBuf,
    /// Follow-up horizon of the cohort in days.
    #[arg(long)]
    tau: f64,
    /// An intervention name, or `contrast` for static_1 minus static_0.
    #[arg(long, default_value = "contrast")]
    intervention: String,
    /// tmle, initial, ipw or ltmle.
    #[arg(long, default_value = "tmle")]
    estimator: String,
    /// correct, misspecified, hal or superlearner.
    #[arg(long, default_value = "correct")]
    learner: String,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    #[arg(long)]
    weight_cap: Option<f64>,
    #[arg(long, default_value_t = 50)]
    max_iter: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct StudyArgs {
    #[command(flatten)]
    dgp: DgpArgs,
    /// Number of repetitions.
    #[arg(long = "reps", short = 'M', default_value_t = 100)]
    reps: usize,
    /// Comma-separated estimators.
    #[arg(long, default_value = "tmle,initial")]
    estimators: String,
    #[arg(long, default_value = "correct")]
    learner: String,
    /// contrast, static_0 or static_1.
    #[arg(long, default_value = "contrast")]
    target: String,
    /// Oracle value of the target; computed by Monte Carlo when absent.
    #[arg(long, allow_negative_numbers = true)]
    psi0: Option<f64>,
    #[arg(long, default_value_t = 1_000_000)]
    n_mc: usize,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    #[arg(long)]
    weight_cap: Option<f64>,
    /// Worker threads for repetitions.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// CSV summary; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Full JSON report with per-repetition outcomes.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Print the check names and exit.
    #[arg(long)]
    list: bool,
    /// Run only these checks.
    #[arg(long)]
    check: Vec<String>,
    #[arg(long, default_value_t = 100)]
    cases: usize,
    #[arg(long, env = "CTTMLE_SEED", default_value_t = VerifyOptions::default().seed)]
    seed: u64,
    /// Shift the death-hazard logit used by the sweep.
    #[arg(long, num_args = 0..=1, default_missing_value = "0.5")]
    inject_wrong_hazard: Option<f64>,
}

enum Failure {
    Input(Error),
    Estimation(Error),
    Verification,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Tie { .. }
            | Error::Unordered { .. }
            | Error::PostTerminalEvent { .. }
            | Error::OutOfRange { .. }
            | Error::UnknownFeature(_)
            | Error::Config(_)
            | Error::Input(_)
            | Error::Io(_)
            | Error::Csv(_)
            | Error::Json(_) => Failure::Input(e),
            _ => Failure::Estimation(e),
        }
    }
}

fn read_text(p: &Path) -> Result<String, Error> {
    std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
}

fn output(path: &Option<PathBuf>) -> Result<Box<dyn Write>, Error> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(io::stdout().lock()),
    })
}

fn write_json(path: &Option<PathBuf>, v: &serde_json::Value) -> Result<(), Error> {
    let mut w = output(path)?;
    serde_json::to_writer_pretty(&mut w, v)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn simulate(a: SimulateArgs) -> Result<(), Failure> {
    let cfg = a.dgp.load()?;
    let paths = simulate_cohort(&cfg)?;
    let mut w = output(&a.out)?;
    write_csv(&paths, &mut w)?;
    w.flush().map_err(Error::from)?;
    Ok(())
}

fn oracle(a: OracleArgs) -> Result<(), Failure> {
    let cfg = a.dgp.load()?;
    let rule = Intervention::parse(&a.intervention)?;
    let o = true_psi(&cfg, &rule, a.n_mc, cfg.seed)?;
    write_json(&None, &serde_json::to_value(&o).map_err(Error::from)?)?;
    Ok(())
}

fn estimate_one(
    paths: &[ObservedPath],
    kind: EstimatorKind,
    mode: NuisanceMode,
    rule: &Intervention,
    opts: EstimateOptions,
) -> Result<(Estimate, serde_json::Value), Error> {
    match kind {
        EstimatorKind::Tmle | EstimatorKind::Initial => {
            let nu = fit_nuisance(paths, mode)?;
            let (_, r) = estimate_arm(paths, &nu, rule, opts)?;
            let e = if kind == EstimatorKind::Tmle { Estimate::tmle(&r.tmle) } else { Estimate::initial(&r.tmle) };
            let diag = json!({
                "iterations": r.tmle.iterations,
                "converged": r.tmle.converged,
                "mean_eic": r.tmle.mean_eic,
                "stop_threshold": r.tmle.stop_threshold,
                "eic_mean_trace": r.tmle.eic_mean_trace,
                "psi_initial": r.tmle.psi_initial,
                "weights": r.weights,
                "z_fit": r.z_fit,
            });
            Ok((e, diag))
        }
        EstimatorKind::Ipw => {
            let nu = fit_nuisance(paths, mode)?;
            let r = ipw_estimate(paths, &nu.schedule, &nu.g, rule, opts.arm)?;
            for w in &r.warnings {
                log::warn!("{w}");
            }
            Ok((Estimate::ipw(&r), json!({ "weights": r.weights, "warnings": r.warnings })))
        }
        EstimatorKind::Ltmle => {
            let r = ltmle_discrete(paths, rule, &LtmleOptions::default())?;
            Ok((Estimate::ltmle(&r), json!({ "epsilons": r.epsilons, "max_score": r.max_score, "max_weight": r.max_weight })))
        }
    }
}

fn estimate(a: EstimateArgs) -> Result<(), Failure> {
    let file = File::open(&a.data).map_err(|e| Error::Input(format!("{}: {e}", a.data.display())))?;
    let paths = read_csv(BufReader::new(file), a.tau)?;
    if paths.is_empty() {
        return Err(Error::Input("data file has no subjects".into()).into());
    }
    let kind = EstimatorKind::parse(&a.estimator)?;
    let mode = NuisanceMode::parse(&a.learner)?;
    let opts = EstimateOptions {
        arm: ArmOptions { weight_cap: a.weight_cap },
        tmle: TmleOptions { max_iter: a.max_iter, ..TmleOptions::default() },
    };
    let run = |rule: &Intervention| estimate_one(&paths, kind, mode, rule, opts).map_err(Failure::from);
    let arm_json = |e: &Estimate, diag: serde_json::Value| {
        let (lo, hi) = e.interval(a.level);
        json!({
            "intervention": e.intervention,
            "psi": e.psi,
            "sigma2": e.sigma2,
            "se": e.se,
            "ci_lower": lo,
            "ci_upper": hi,
            "diagnostics": diag,
        })
    };
    let n = paths.len();
    let out = if a.intervention == "contrast" {
        let (e1, d1) = run(&Intervention::static_rule(1))?;
        let (e0, d0) = run(&Intervention::static_rule(0))?;
        let c = contrast(&e1, &e0, a.level)?;
        json!({
            "estimator": kind.name(),
            "learner": mode.name(),
            "n": n,
            "level": a.level,
            "contrast": c,
            "arms": [arm_json(&e1, d1), arm_json(&e0, d0)],
        })
    } else {
        let rule = Intervention::parse(&a.intervention)?;
        let (e, d) = run(&rule)?;
        json!({
            "estimator": kind.name(),
            "learner": mode.name(),
            "n": n,
            "level": a.level,
            "arms": [arm_json(&e, d)],
        })
    };
    write_json(&a.out, &out)?;
    Ok(())
}

fn study(a: StudyArgs) -> Result<(), Failure> {
    let dgp = a.dgp.load()?;
    let estimators =
        a.estimators.split(',').map(|s| EstimatorKind::parse(s.trim())).collect::<Result<Vec<_>, _>>()?;
    let cfg = StudyConfig {
        seed: dgp.seed,
        dgp,
        reps: a.reps,
        mode: NuisanceMode::parse(&a.learner)?,
        estimators,
        target: Target::parse(&a.target)?,
        level: a.level,
        psi0: a.psi0,
        n_mc: a.n_mc,
        weight_cap: a.weight_cap,
        tmle: TmleOptions::default(),
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(a.jobs.max(1))
        .build()
        .map_err(|e| Error::Input(format!("thread pool: {e}")))?;
    let report = pool.install(|| run_study(&cfg))?;
    let mut w = output(&a.out)?;
    report.write_csv(&mut w)?;
    w.flush().map_err(Error::from)?;
    if let Some(p) = &a.json {
        write_json(&Some(p.clone()), &serde_json::to_value(&report).map_err(Error::from)?)?;
    }
    Ok(())
}

fn verify(a: VerifyArgs) -> Result<(), Failure> {
    if a.list {
        for c in CHECKS {
            println!("{c}");
        }
        return Ok(());
    }
    let opts = VerifyOptions { seed: a.seed, cases: a.cases, wrong_hazard_shift: a.inject_wrong_hazard.unwrap_or(0.0) };
    let names: Vec<String> = if a.check.is_empty() { CHECKS.iter().map(|s| s.to_string()).collect() } else { a.check };
    let mut results = Vec::new();
    for name in &names {
        let r = run_check(name, &opts).map_err(Failure::from)?;
        log::info!("{} {} (max error {:.3e}, tolerance {:.0e})", if r.passed { "PASS" } else { "FAIL" }, r.name, r.max_error, r.tolerance);
        results.push(r);
    }
    let all = results.iter().all(|r| r.passed);
    write_json(&None, &json!({ "passed": all, "checks": results }))?;
    if all {
        Ok(())
    } else {
        Err(Failure::Verification)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).target(env_logger::Target::Stderr).init();
    let cli = Cli::parse();
    let res = match cli.cmd {
        Cmd::Simulate(a) => simulate(a),
        Cmd::Oracle(a) => oracle(a),
        Cmd::Estimate(a) => estimate(a),
        Cmd::Study(a) => study(a),
        Cmd::Verify(a) => verify(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Verification) => ExitCode::from(1),
        Err(Failure::Input(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(Failure::Estimation(e)) => {
            eprintln!("estimation failed: {e}");
            ExitCode::from(3)
        }
    }
}
