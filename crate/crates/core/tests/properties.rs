use proptest::prelude::*;
use statrs::function::gamma::ln_gamma;

use richmon::adjustable::{build_sequential_binary, AdjustableProblem};
use richmon::contracts::{build_binary_test, check_ic_ir, lenient_thresholds, LinearKind};
use richmon::experiments::{run_experiment, ExperimentConfig};
use richmon::model::{figure_one, Model};
use richmon::Error;
use richmon::monitoring::{chernoff, cramer_rate, kl, mean_score, score_terms, MonitoringTechnology};
use richmon::numeric::log_sum_exp;
use richmon::preferences::{first_best_cost, CostFunction, Regime, UtilitySpec};
use richmon::rates::{fit_exponential_rate, FitOptions, GapPoint};
use richmon::score_dist::{enumerate_types, tail_prob, Event, PassRule, DEFAULT_TYPE_CAP};
use richmon::solvers::{solve_linear, solve_second_best, SecondBestOptions};

fn dist(k: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.05f64..1.0, k).prop_map(|v| {
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    })
}

fn technology(max_signals: usize) -> impl Strategy<Value = MonitoringTechnology> {
    (2..=max_signals)
        .prop_flat_map(|k| (dist(k), dist(k)))
        .prop_filter_map("identified", |(a, b)| MonitoringTechnology::from_dists(vec![a, b], 1).ok())
}

fn prefs() -> impl Strategy<Value = UtilitySpec> {
    prop_oneof![
        (0.05f64..2.0).prop_map(UtilitySpec::log),
        (0.2f64..0.9, 0.05f64..2.0).prop_map(|(s, w)| UtilitySpec::crra(s, w)),
        (1.2f64..3.0, 0.05f64..2.0).prop_map(|(s, w)| UtilitySpec::crra(s, w)),
        (0.1f64..2.0, 0.05f64..2.0).prop_map(|(a, w)| UtilitySpec::cara(a, w)),
    ]
}

fn model(mt: MonitoringTechnology) -> Option<Model> {
    Model::new(mt, UtilitySpec::log(0.1), CostFunction::new(vec![0.0, 2.0], 1).unwrap(), Regime::Baseline).ok()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn inverse_utility_round_trip(p in prefs(), frac in 0.0f64..1.0) {
        let w = p.wage_floor + 100.0 * frac;
        let back = p.h(p.u(w));
        prop_assert!((back - w).abs() <= 1e-10 * w.abs().max(1.0), "{back} vs {w}");
    }

    #[test]
    fn derivatives_match_finite_differences(p in prefs(), frac in 0.0f64..1.0) {
        let w = p.wage_floor * 1.01 + 20.0 * frac;
        let e = 1e-5 * w.max(1.0);
        let fd = (p.u(w + e) - p.u(w - e)) / (2.0 * e);
        prop_assert!((fd - p.u_prime(w)).abs() <= 1e-6 * p.u_prime(w).abs());
        let v = p.u(w);
        // A wage-sized step in utility units keeps CARA away from its supremum.
        let ev = 1e-5 * p.u_prime(w) * w.max(1.0);
        let fd2 = (p.h_prime(v + ev) - p.h_prime(v - ev)) / (2.0 * ev);
        prop_assert!((fd2 - p.h_second(v)).abs() <= 1e-6 * p.h_second(v).abs(), "{fd2} vs {}", p.h_second(v));
    }

    #[test]
    fn first_best_cost_increases_with_target_cost(c1 in 0.05f64..0.8, dc in 0.01f64..0.1) {
        for p in [UtilitySpec::log(0.1), UtilitySpec::crra(2.0, 0.5)] {
            let fb = |c: f64| first_best_cost(&p, &CostFunction::new(vec![0.0, c], 1).unwrap(), Regime::Baseline).unwrap();
            prop_assert!(fb(c1 + dc) > fb(c1));
        }
    }

    #[test]
    fn kl_and_chernoff(mt in technology(4)) {
        let (p, q) = (mt.dist(0), mt.dist(1));
        let (kpq, kqp) = (kl(p, q).unwrap(), kl(q, p).unwrap());
        prop_assert!(kpq > 0.0 && kqp > 0.0);
        prop_assert_eq!(kl(p, p).unwrap(), 0.0);
        let (c1, c2) = (chernoff(p, q).unwrap(), chernoff(q, p).unwrap());
        prop_assert!((c1 - c2).abs() <= 1e-9);
        prop_assert!(c1 <= kpq.min(kqp) + 1e-12);
    }

    #[test]
    fn cramer_identities(mt in technology(4)) {
        let star = cramer_rate(&mt, 1, 0).unwrap();
        let dev = cramer_rate(&mt, 0, 0).unwrap();
        let k = kl(mt.dist(0), mt.dist(1)).unwrap();
        prop_assert!((star.eval(mean_score(&mt, 0, 0).unwrap()) - k).abs() <= 1e-6);
        prop_assert!(star.eval(star.mean).abs() <= 1e-9 && dev.eval(dev.mean).abs() <= 1e-9);
        for i in 1..20 {
            let l = star.min_term + (star.max_term - star.min_term) * i as f64 / 20.0;
            let (a, b) = (star.eval(l), dev.eval(l));
            prop_assert!(a >= 0.0 && b >= 0.0);
            prop_assert!((a - b + l).abs() <= 1e-6, "ℓ = {l}: {a} − {b}");
        }
    }

    #[test]
    fn type_classes_are_consistent(mt in technology(3), n in 1usize..25) {
        let sd = enumerate_types(&mt, n, DEFAULT_TYPE_CAP).unwrap();
        let terms = score_terms(&mt, 0).unwrap();
        for ty in &sd.types {
            prop_assert_eq!(ty.counts.iter().sum::<u32>() as usize, n);
            let mult = ln_gamma(n as f64 + 1.0) - ty.counts.iter().map(|&c| ln_gamma(c as f64 + 1.0)).sum::<f64>();
            prop_assert!((mult - ty.log_multiplicity).abs() <= 1e-9);
            let s = ty.counts.iter().zip(&terms).map(|(&c, t)| c as f64 * t).sum::<f64>() / n as f64;
            prop_assert!((s - ty.scores[0]).abs() <= 1e-12 * (1.0 + s.abs()));
        }
        for a in 0..2 {
            prop_assert!(log_sum_exp(&sd.log_probs[a]).abs() <= 1e-9);
        }
    }

    #[test]
    fn pass_probability_monotone_in_threshold(mt in technology(3), n in 1usize..40, g1 in -1.0f64..1.0, dg in 0.0f64..0.5) {
        let sd = enumerate_types(&mt, n, DEFAULT_TYPE_CAP).unwrap();
        let scale = n as f64;
        for a in 0..2 {
            let lo = tail_prob(&sd, a, &PassRule::single(0, g1 * scale), Event::Pass);
            let hi = tail_prob(&sd, a, &PassRule::single(0, (g1 + dg) * scale), Event::Pass);
            prop_assert!(hi <= lo + 1e-12);
        }
    }

    #[test]
    fn fitted_rate_is_scale_equivariant(rate in 0.05f64..1.0, noise in prop::collection::vec(-0.05f64..0.05, 40), k in -20.0f64..20.0) {
        let pts = |shift: f64| -> Vec<GapPoint> {
            noise.iter().enumerate().map(|(i, e)| {
                let n = 5 * (i + 1);
                GapPoint::from_log(n, -rate * n as f64 + e + shift)
            }).collect()
        };
        let opts = FitOptions::default();
        let a = fit_exponential_rate(&pts(0.0), 1.0, Some(rate), &opts).unwrap();
        let b = fit_exponential_rate(&pts(k), 1.0, Some(rate), &opts).unwrap();
        prop_assert!((a.fitted_rate - b.fitted_rate).abs() <= 1e-9);
        prop_assert_eq!(a.verdict, b.verdict);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn lenient_binary_contracts(mt in technology(3), n in 5usize..80) {
        let Some(m) = model(mt) else { return Ok(()) };
        let sd = enumerate_types(&m.mt, n, DEFAULT_TYPE_CAP).unwrap();
        let Ok(bt) = build_binary_test(&m, &sd, &lenient_thresholds(&m, 0.4, n).unwrap()) else { return Ok(()) };
        prop_assert!(bt.v_plus > bt.v_minus);
        let slack = check_ic_ir(&bt.to_contract(&sd), &m, &sd).unwrap();
        prop_assert!(slack.ir.abs() <= 1e-9 && slack.min_ic() >= -1e-9);
        // The gap can sit below f64 resolution of the cost itself.
        prop_assert!(bt.log_cost_gap(&m.prefs).is_finite());
        prop_assert!(bt.cost(&m.prefs) >= m.first_best_cost() * (1.0 - 1e-12));
    }

    #[test]
    fn second_best_dominates_binary(mt in technology(3), n in 2usize..30) {
        let Some(m) = model(mt) else { return Ok(()) };
        let sd = enumerate_types(&m.mt, n, DEFAULT_TYPE_CAP).unwrap();
        // Weakly informative draws can need wages beyond the cap.
        let sb = match solve_second_best(&m, &sd, &SecondBestOptions::default()) {
            Ok(sb) => sb,
            Err(Error::Infeasible(_)) => return Ok(()),
            Err(e) => return Err(TestCaseError::fail(e.to_string())),
        };
        prop_assert!(sb.kkt_residual < 1e-6 && sb.complementarity < 1e-6, "{} {}", sb.kkt_residual, sb.complementarity);
        prop_assert!(sb.lambda >= 0.0 && sb.kappa.iter().all(|k| k.1 >= 0.0));
        prop_assert!(sb.contract.utilities.iter().all(|&v| v >= m.floor() - 1e-9 && v < m.prefs.utility_sup()));
        prop_assert!(sb.cost >= m.first_best_cost() * (1.0 - 1e-9));
        if let Ok(bt) = build_binary_test(&m, &sd, &lenient_thresholds(&m, 0.4, n).unwrap()) {
            prop_assert!(sb.cost <= bt.cost(&m.prefs) * (1.0 + 1e-9));
        }
    }

    #[test]
    // Under the utility cap no wage-linear schedule is incentive compatible from n = 8 on.
    fn wage_linear_respects_floor(n in 1usize..=7) {
        let m = figure_one();
        let sd = enumerate_types(&m.mt, n, DEFAULT_TYPE_CAP).unwrap();
        let s = solve_linear(&m, &sd, LinearKind::WageLinear).unwrap();
        prop_assert!(s.schedule.coefficients.iter().all(|&b| b >= m.prefs.wage_floor));
    }

    #[test]
    fn sequential_blocks(periods in 1usize..=3, blocks in 2usize..40) {
        let ap = AdjustableProblem::new(figure_one(), periods, vec![0.0, 12.0]).unwrap();
        let n = periods * blocks;
        let Ok(sb) = build_sequential_binary(&ap, n, &lenient_thresholds(&ap.model, 0.4, blocks).unwrap()) else { return Ok(()) };
        prop_assert!(sb.v_plus > sb.v_minus);
        prop_assert!(sb.log_gap.is_finite());
        // ℙ[all blocks pass] by summing over block outcomes, not by powering.
        let sd = enumerate_types(&ap.model.mt, blocks, DEFAULT_TYPE_CAP).unwrap();
        let rule = PassRule::new(sb.thresholds.clone());
        let pass: f64 = (0..sd.len()).filter(|&t| rule.passes(&sd, t)).map(|t| sd.prob(1, t)).sum();
        let mut all = 1.0;
        for _ in 0..periods {
            all *= pass;
        }
        prop_assert!((all - sb.all_pass_prob()).abs() <= 1e-12);
        prop_assert!(sb.on_path_payoff().abs() <= 1e-9);
    }
}

#[test]
fn experiment_outputs_are_deterministic() {
    let cfg = ExperimentConfig::from_json(include_str!("../../../configs/second_best.json")).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let read = |sub: &str| -> Vec<Vec<u8>> {
        let out = dir.path().join(sub);
        run_experiment(&cfg, Some(&out)).unwrap();
        ["second_best.csv", "shape.csv", "contract_n400.csv"].iter().map(|f| std::fs::read(out.join(f)).unwrap()).collect()
    };
    assert_eq!(read("a"), read("b"));
}
