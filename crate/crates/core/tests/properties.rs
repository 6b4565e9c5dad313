use cttmle_core::baselines::{ipw_estimate, ltmle_discrete, LtmleOptions};
use cttmle_core::events::{merge_time_grid, state_at, Intervention, Mark, ObservedPath, TickSchedule};
use cttmle_core::gcomp::{build_arm, ArmOptions};
use cttmle_core::infer::{run_study, summarize, EstimatorKind, StudyConfig};
use cttmle_core::nuisance::{fit_binary, Design, GlmOptions};
use cttmle_core::pipeline::{estimate_arm, fit_nuisance, EstimateOptions, NuisanceMode};
use cttmle_core::simulate::{a0_rate_by_l0, expit, mean_monitoring_count, simulate_cohort, DgpConfig};
use cttmle_core::target::TmleOptions;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cohort(n: usize, tau: u32, seed: u64) -> Vec<ObservedPath> {
    simulate_cohort(&DgpConfig { n, tau, seed, ..DgpConfig::default() }).unwrap()
}

fn in_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(f)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn replay_is_deterministic(seed in 0u64..1_000_000, tau in 3u32..20, frac in 0.0f64..1.0) {
        let paths = cohort(5, tau, seed);
        for p in &paths {
            let t = (frac * f64::from(tau)).max(1e-3);
            prop_assert_eq!(state_at(p, t), state_at(p, t));
        }
    }

    #[test]
    fn grid_is_the_union_of_event_times(seed in 0u64..1_000_000, n in 0usize..12, tau in 2u32..15) {
        let paths = cohort(n, tau, seed);
        let grid = merge_time_grid(&paths);
        let total: usize = paths.iter().map(|p| p.events.len()).sum();
        prop_assert!(grid.times.len() <= total);
        prop_assert!(grid.times.windows(2).all(|w| w[0] < w[1]));
        for (i, p) in paths.iter().enumerate() {
            for e in &p.events {
                let hits: Vec<usize> = grid.times.iter().enumerate().filter(|(_, t)| **t == e.time).map(|(k, _)| k).collect();
                prop_assert_eq!(hits.len(), 1);
                prop_assert!(grid.subjects[hits[0]].contains(&i));
            }
        }
    }

    #[test]
    fn snapshots_are_left_limits(seed in 0u64..1_000_000, tau in 2u32..15) {
        for p in &cohort(4, tau, seed) {
            for (k, e) in p.events.iter().enumerate() {
                let before = state_at(p, e.time);
                let after = state_at(p, e.time + 1e-9);
                let count = |s: &cttmle_core::events::HistorySnapshot| s.n_a + s.n_l;
                let prior = p.events[..k].iter().filter(|r| matches!(r.mark, Mark::Trt(_) | Mark::Cov(_))).count() as u32;
                prop_assert_eq!(count(&before), prior);
                match &e.mark {
                    Mark::Trt(a) => {
                        prop_assert_eq!(after.n_a, before.n_a + 1);
                        prop_assert_eq!(after.a_current, *a);
                    }
                    Mark::Cov(l) => {
                        prop_assert_eq!(after.n_l, before.n_l + 1);
                        prop_assert_eq!(&after.l_current, l);
                    }
                    Mark::Censor => {
                        prop_assert!(before.uncensored);
                        prop_assert!(!after.uncensored);
                    }
                    Mark::Death => {
                        prop_assert!(before.alive);
                        prop_assert!(!after.alive);
                    }
                }
            }
        }
    }

    #[test]
    fn glm_solves_its_score_equation(seed in 0u64..1_000_000, n in 40usize..200) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| vec![1.0, rng.gen_range(-1.0..1.0), f64::from(rng.gen_bool(0.5))]).collect();
        let y: Vec<f64> = rows.iter().map(|r| f64::from(rng.gen::<f64>() < expit(0.3 + r[1] - 0.8 * r[2]))).collect();
        let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.2..3.0)).collect();
        let x = Design::from_rows(&rows);
        let fit = fit_binary(&x, &y, &w, None, GlmOptions::default()).unwrap();
        prop_assume!(!fit.separated());
        for j in 0..3 {
            let score: f64 = (0..n)
                .map(|i| {
                    let eta: f64 = rows[i].iter().zip(&fit.coefficients).map(|(a, b)| a * b).sum();
                    w[i] * rows[i][j] * (y[i] - expit(eta))
                })
                .sum();
            prop_assert!(score.abs() < 1e-6, "score {} on column {}", score, j);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn weights_account_for_every_subject(seed in 0u64..1_000_000, a in 0u8..2) {
        let paths = cohort(150, 5, seed);
        let nuis = fit_nuisance(&paths, NuisanceMode::Correct).unwrap();
        let g_star = Intervention::static_rule(a);
        let (_, est) = estimate_arm(&paths, &nuis, &g_star, EstimateOptions::default()).unwrap();
        prop_assert_eq!(est.weights.zero_weight_subjects + est.weights.consistent_subjects, paths.len());
    }

    #[test]
    fn convergence_flag_matches_trace(seed in 0u64..1_000_000, max_iter in 0usize..4) {
        let paths = cohort(150, 5, seed);
        let nuis = fit_nuisance(&paths, NuisanceMode::Correct).unwrap();
        let opts = EstimateOptions { tmle: TmleOptions { max_iter, ..TmleOptions::default() }, ..EstimateOptions::default() };
        let (_, est) = estimate_arm(&paths, &nuis, &Intervention::static_rule(0), opts).unwrap();
        let r = est.tmle;
        let last = r.eic_mean_trace.last().unwrap().abs();
        prop_assert_eq!(r.eic_mean_trace.len(), r.iterations + 1);
        if r.converged {
            prop_assert!(last <= r.stop_threshold);
            prop_assert_eq!(r.mean_eic, last);
        } else {
            prop_assert_eq!(r.iterations, max_iter);
            let best = r.eic_mean_trace.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
            prop_assert!((r.mean_eic - best).abs() <= 1e-12 * (1.0 + best));
        }
    }

    #[test]
    fn ipw_is_a_weighted_mean(seed in 0u64..1_000_000, a in 0u8..2) {
        let paths = cohort(200, 5, seed);
        let nuis = fit_nuisance(&paths, NuisanceMode::Correct).unwrap();
        let g_star = Intervention::static_rule(a);
        let r = ipw_estimate(&paths, &nuis.schedule, &nuis.g, &g_star, ArmOptions::default()).unwrap();
        let again = ipw_estimate(&paths, &nuis.schedule, &nuis.g, &g_star, ArmOptions::default()).unwrap();
        prop_assert_eq!(&r, &again);
        let arm = build_arm(&paths, &nuis.schedule, &g_star, &nuis.q, &nuis.g, ArmOptions::default()).unwrap();
        let wy: Vec<f64> = arm.final_weight.iter().zip(&paths).map(|(w, p)| w * p.outcome()).collect();
        let mean_wy = wy.iter().sum::<f64>() / wy.len() as f64;
        prop_assert_eq!(mean_wy - r.psi, 0.0);
        prop_assert!(r.ic.iter().sum::<f64>().abs() < 1e-10);
    }

    #[test]
    fn ltmle_solves_each_day_score(seed in 0u64..1_000_000, a in 0u8..2) {
        let paths = cohort(300, 5, seed);
        let r = ltmle_discrete(&paths, &Intervention::static_rule(a), &LtmleOptions::default()).unwrap();
        prop_assert!(r.max_score < 1e-8, "per-day score {}", r.max_score);
        prop_assert!((0.0..=1.0).contains(&r.psi));
    }

    #[test]
    fn no_events_after_absorption(seed in 0u64..1_000_000, tau in 2u32..40) {
        for p in cohort(50, tau, seed) {
            if let Some(k) = p.events.iter().position(|e| e.is_terminal()) {
                prop_assert_eq!(k + 1, p.events.len());
            }
            prop_assert!(p.events.iter().all(|e| e.time > 0.0 && e.time <= p.tau));
        }
    }
}

fn study_config(reps: usize) -> StudyConfig {
    StudyConfig {
        dgp: DgpConfig { n: 120, tau: 5, ..DgpConfig::default() },
        reps,
        seed: 77,
        psi0: Some(-0.3),
        estimators: vec![EstimatorKind::Tmle, EstimatorKind::Initial, EstimatorKind::Ipw],
        ..StudyConfig::default()
    }
}

#[test]
fn study_is_invariant_to_order_and_threads() {
    let cfg = study_config(4);
    let one = in_pool(1, || run_study(&cfg).unwrap());
    let three = in_pool(3, || run_study(&cfg).unwrap());
    assert_eq!(one.summaries, three.summaries);
    let mut shuffled = one.reps.clone();
    shuffled.reverse();
    shuffled.swap(0, 5);
    for (e, s) in cfg.estimators.iter().zip(&one.summaries) {
        assert_eq!(&summarize(&cfg, -0.3, *e, &shuffled), s);
    }
}

#[test]
fn simulation_ignores_thread_count() {
    let cfg = DgpConfig { n: 300, tau: 10, seed: 5, ..DgpConfig::default() };
    let a = in_pool(1, || simulate_cohort(&cfg).unwrap());
    let b = in_pool(4, || simulate_cohort(&cfg).unwrap());
    assert_eq!(a, b);
}

#[test]
fn monitoring_count_is_stable_in_tau() {
    let counts: Vec<f64> = [5, 30, 50, 100].iter().map(|&tau| mean_monitoring_count(&cohort(10_000, tau, 21))).collect();
    let reference = counts[1];
    for c in &counts {
        assert!((c / reference - 1.0).abs() <= 0.10, "monitoring counts {counts:?}");
    }
}

#[test]
fn effect_directions_on_default_config() {
    let paths = cohort(100_000, 30, 13);
    let rates = a0_rate_by_l0(&paths);
    assert!(rates[&6] > rates[&1], "{rates:?}");

    // New covariate value by current treatment, and deaths per at-risk day
    // by current treatment.
    let mut new_l = [[0.0f64; 2]; 2];
    let mut deaths = [[0.0f64; 2]; 2];
    let schedule = TickSchedule::infer(&paths);
    for p in &paths {
        for e in &p.events {
            if let Mark::Cov(l) = &e.mark {
                let a = state_at(p, e.time).a_current as usize;
                new_l[a][0] += l[0];
                new_l[a][1] += 1.0;
            }
        }
        for tick in schedule.ticks_until(p.end_time()) {
            if !tick.allows(cttmle_core::events::Process::Death) {
                continue;
            }
            let s = state_at(p, tick.time);
            if !s.alive || !s.uncensored {
                continue;
            }
            let a = s.a_current as usize;
            deaths[a][1] += 1.0;
            deaths[a][0] += f64::from(p.events.iter().any(|e| e.time == tick.time && e.mark == Mark::Death));
        }
    }
    let rate = |c: [f64; 2]| c[0] / c[1];
    assert!(rate(new_l[1]) > rate(new_l[0]), "{new_l:?}");
    assert!(rate(deaths[1]) < rate(deaths[0]), "{deaths:?}");
}
