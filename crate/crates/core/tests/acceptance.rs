//! One test per acceptance criterion. Each prints a single
//! `criterion N: PASS|FAIL` line straight to stdout (bypassing capture)
//! before asserting, and checks its own wall-clock budget.

use std::io::Write;
use std::time::{Duration, Instant};

use richmon::adjustable::{verify_adjustable_rate, AdjustableProblem};
use richmon::contracts::lenient_thresholds;
use richmon::experiments::{figure1_rows, figure1_verdicts, Cutoffs};
use richmon::model::{figure_one, Model};
use richmon::monitoring::{chernoff, kl, rank_monitoring, MonitoringTechnology, Preference};
use richmon::oracle::divergence_property_suite;
use richmon::preferences::{Regime, UtilitySpec};
use richmon::rates::{verify_rate, ContractFamily, FitOptions};
use richmon::score_dist::{enumerate_types, raw_sequences, tail_prob, Event, PassRule, DEFAULT_TYPE_CAP};
use richmon::solvers::{limit_shape, solve_second_best, SecondBestOptions};

const KL01: f64 = 0.338_919_144_154_881_5;

// `println!` would be captured by the harness.
#[allow(clippy::explicit_write)]
fn report(id: u32, pass: bool, detail: String, started: Instant, budget: Duration) {
    let elapsed = started.elapsed();
    let pass_all = pass && elapsed < budget;
    writeln!(
        std::io::stdout(),
        "criterion {id}: {} ({detail}; {:.2}s of {}s)",
        if pass_all { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        budget.as_secs()
    )
    .unwrap();
    assert!(pass, "criterion {id}: {detail}");
    assert!(elapsed < budget, "criterion {id} took {elapsed:?}");
}

fn lenient() -> ContractFamily {
    ContractFamily::LenientBinary { epsilon: 0.4 }
}

fn limited_liability() -> Model {
    figure_one().with_regime(Regime::LimitedLiability, UtilitySpec::log(1.0)).unwrap()
}

#[test]
fn criterion_01_example_indices() {
    let t = Instant::now();
    let a = MonitoringTechnology::from_dists(vec![vec![0.8, 0.2], vec![0.01, 0.99]], 1).unwrap();
    let b = MonitoringTechnology::from_dists(vec![vec![0.99, 0.01], vec![0.2, 0.8]], 1).unwrap();
    let r = rank_monitoring(&a, &b, &[0]).unwrap();
    let pass = (r.index_first - 3.19).abs() <= 0.05 && (r.index_second - 1.54).abs() <= 0.05 && r.preferred == Preference::First;
    report(1, pass, format!("indices {:.4} vs {:.4}", r.index_first, r.index_second), t, Duration::from_secs(1));
}

#[test]
fn criterion_02_figure1_ordering() {
    let t = Instant::now();
    let m = figure_one();
    let grid: Vec<usize> = (1..=40).map(|k| 5 * k).collect();
    let rows = figure1_rows(&m, Cutoffs::default(), &grid).unwrap();
    let verdicts = figure1_verdicts(&rows);
    let last = rows.last().unwrap();
    let gap = |c: &richmon::Result<f64>| c.as_ref().map(|v| v - last.first_best).unwrap_or(f64::INFINITY);
    let fastest = gap(&last.lenient) < gap(&last.strict) && gap(&last.lenient) < gap(&last.utility_linear);
    let fb_ok = (last.first_best - 2f64.exp()).abs() < 1e-12;
    let pass = verdicts.iter().all(|v| v.pass) && fastest && fb_ok;
    let detail = verdicts.iter().map(|v| format!("{}: {}", v.name, v.detail)).collect::<Vec<_>>().join("; ");
    report(2, pass, detail, t, Duration::from_secs(120));
}

#[test]
fn criterion_03_lenient_rate() {
    let t = Instant::now();
    let grid: Vec<usize> = (1..=400).collect();
    let opts = FitOptions { slope_span: 200, slope_stride: 20, tail_points: 10, ..FitOptions::default() };
    let run = verify_rate(&figure_one(), lenient(), &grid, &opts).unwrap();
    let r = &run.report;
    let pass = r.verdict && (r.tail_value - KL01).abs() <= 0.15 * KL01 && r.inversions <= 1;
    report(3, pass, format!("tail slope {:.4} vs {KL01:.5}, {} inversions", r.tail_value, r.inversions), t, Duration::from_secs(120));
}

#[test]
fn criterion_04_stein() {
    let t = Instant::now();
    let m = figure_one();
    let n = 400;
    let sd = enumerate_types(&m.mt, n, DEFAULT_TYPE_CAP).unwrap();
    let rule = PassRule::new(lenient_thresholds(&m, 0.4, n).unwrap());
    let rate = -tail_prob(&sd, 1, &rule, Event::Fail) / n as f64;
    report(4, (rate - KL01).abs() <= 0.15 * KL01, format!("−(1/n) ln P₁[fail] = {rate:.4}"), t, Duration::from_secs(30));
}

#[test]
fn criterion_05_utility_linear_scaling() {
    let t = Instant::now();
    let grid: Vec<usize> = (1..=40).map(|k| 5 * k).collect();
    let opts = FitOptions { tail_points: 5, tolerance: 0.1, ..FitOptions::default() };
    let run = verify_rate(&figure_one(), ContractFamily::UtilityLinear, &grid, &opts).unwrap();
    let tail: Vec<f64> = run.report.scaled_gaps.iter().rev().take(5).map(|p| p.1).collect();
    let ratios: Vec<f64> = tail.windows(2).map(|w| w[0] / w[1]).collect();
    let pass = run.report.verdict && tail.iter().all(|v| *v > 0.0) && ratios.iter().all(|r| (0.9..=1.1).contains(r));
    report(5, pass, format!("n·gap tail {tail:.4?}"), t, Duration::from_secs(120));
}

#[test]
fn criterion_06_limited_liability_slower() {
    let t = Instant::now();
    let grid: Vec<usize> = (1..=400).collect();
    let opts = FitOptions::default();
    let ll = limited_liability();
    let thresholds = lenient_thresholds(&ll, 0.4, 10).unwrap();
    let symmetric = thresholds == vec![(0, 0.0)];
    let ll_run = verify_rate(&ll, lenient(), &grid, &opts).unwrap();
    let base_run = verify_rate(&figure_one(), lenient(), &grid, &opts).unwrap();
    let m = figure_one();
    let ch = chernoff(m.mt.dist(0), m.mt.dist(1)).unwrap();
    let k = kl(m.mt.dist(0), m.mt.dist(1)).unwrap();
    let pass = symmetric
        && ll_run.report.fitted_rate < base_run.report.fitted_rate
        && (ch - 0.0872).abs() < 1e-4
        && (k - 0.3389).abs() < 1e-4
        && ch < k;
    let detail = format!("fitted {:.4} < {:.4}; Ch {ch:.5} < KL {k:.5}", ll_run.report.fitted_rate, base_run.report.fitted_rate);
    report(6, pass, detail, t, Duration::from_secs(120));
}

#[test]
fn criterion_07_second_best_soundness() {
    let t = Instant::now();
    let m = figure_one();
    let opts = SecondBestOptions::default();
    let mut worst_kkt = 0.0f64;
    let mut worst_cs = 0.0f64;
    for n in (1..=40).map(|k| 5 * k) {
        let s = solve_second_best(&m, &enumerate_types(&m.mt, n, DEFAULT_TYPE_CAP).unwrap(), &opts).unwrap();
        worst_kkt = worst_kkt.max(s.kkt_residual);
        worst_cs = worst_cs.max(s.complementarity);
    }
    let mut worst_rel = 0.0f64;
    for n in 1..=6 {
        let tc = solve_second_best(&m, &enumerate_types(&m.mt, n, DEFAULT_TYPE_CAP).unwrap(), &opts).unwrap();
        let raw = solve_second_best(&m, &raw_sequences(&m.mt, n, 1 << 12).unwrap(), &opts).unwrap();
        worst_rel = worst_rel.max((raw.cost - tc.cost).abs() / tc.cost);
    }
    let pass = worst_kkt < 1e-6 && worst_cs < 1e-6 && worst_rel <= 1e-8;
    report(7, pass, format!("KKT {worst_kkt:.2e}, complementarity {worst_cs:.2e}, raw vs type {worst_rel:.2e}"), t, Duration::from_secs(60));
}

#[test]
fn criterion_08_limit_shape() {
    let t = Instant::now();
    let m = figure_one();
    let sds: Vec<_> = [100, 200, 400].iter().map(|&n| enumerate_types(&m.mt, n, DEFAULT_TYPE_CAP).unwrap()).collect();
    let sols: Vec<_> = sds.iter().map(|sd| solve_second_best(&m, sd, &SecondBestOptions::default()).unwrap()).collect();
    let pairs: Vec<_> = sols.iter().zip(&sds).collect();
    let shape = limit_shape(&pairs, &m, 0.1).unwrap();
    let last = shape.rows.last().unwrap();
    let detail = format!("high error {:.2e}, low error {:.2e}, monotone {}", last.high_error.unwrap_or(f64::NAN), last.low_error.unwrap_or(f64::NAN), shape.monotone);
    report(8, shape.passes(0.2), detail, t, Duration::from_secs(180));
}

#[test]
fn criterion_09_adjustable_scaling() {
    let t = Instant::now();
    let grid: Vec<usize> = (1..=200).map(|k| 2 * k).collect();
    let opts = FitOptions { window: Some((200, 400)), ..FitOptions::default() };
    let run = |periods| {
        let ap = AdjustableProblem::new(figure_one(), periods, vec![0.0, 12.0]).unwrap();
        verify_adjustable_rate(&ap, 0.4, &grid, &opts).unwrap()
    };
    let (r1, r2) = (run(1), run(2));
    let ratio = r2.report.fitted_rate / r1.report.fitted_rate;
    let gain = r1.max_gain.max(r2.max_gain);
    let ir = r1.max_ir_violation.max(r2.max_ir_violation);
    let pass = (0.4..=0.6).contains(&ratio) && gain <= 1e-9 && ir <= 1e-9;
    report(9, pass, format!("rate ratio {ratio:.4}, max gain {gain:.1e}, max |IR| {ir:.1e}"), t, Duration::from_secs(180));
}

#[test]
fn criterion_10_divergence_properties() {
    let t = Instant::now();
    let suite = divergence_property_suite(200, 2024).unwrap();
    let failing: Vec<&str> = suite.properties.iter().filter(|p| p.failures > 0).map(|p| p.name.as_str()).collect();
    report(10, suite.passes() && suite.properties.iter().all(|p| p.checked == 200), format!("{} properties, failing {failing:?}", suite.properties.len()), t, Duration::from_secs(30));
}
