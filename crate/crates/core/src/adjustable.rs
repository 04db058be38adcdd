//! Adjustable actions: `T` periods of `n/T` signals each, a sequential binary
//! contract that pays `v⁺` only if every block passes, and its exact
//! one-shot deviation values.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::contracts::lenient_thresholds;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::monitoring::kl;
use crate::preferences::Regime;
use crate::rates::{fit_exponential_rate, FitOptions, GapPoint, RateReport};
use crate::score_dist::{enumerate_types, tail_prob, Event, PassRule, DEFAULT_TYPE_CAP};

/// Deviation gains at or below this certify one-shot incentive compatibility.
pub const GAIN_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct AdjustableProblem {
    pub model: Model,
    pub periods: usize,
    /// Principal's monetary payoff per action.
    pub payoffs: Vec<f64>,
}

impl AdjustableProblem {
    /// Requires the baseline regime and strict first-best optimality of
    /// playing `a*` throughout against every single-period substitution.
    pub fn new(model: Model, periods: usize, payoffs: Vec<f64>) -> Result<Self> {
        if periods == 0 {
            return Err(Error::Config("at least one period is required".into()));
        }
        if payoffs.len() != model.mt.num_actions() {
            return Err(Error::LengthMismatch(format!(
                "{} payoffs for {} actions",
                payoffs.len(),
                model.mt.num_actions()
            )));
        }
        if model.regime != Regime::Baseline {
            return Err(Error::Assumption("adjustable actions are supported in the baseline regime only".into()));
        }
        let ap = Self { model, periods, payoffs };
        let star = ap.first_best_value();
        for a in ap.model.costs.deviations() {
            let tf = periods as f64;
            let g = ((tf - 1.0) * ap.payoffs[ap.model.target()] + ap.payoffs[a]) / tf;
            let c = ((tf - 1.0) * ap.model.target_cost() + ap.model.cost(a)) / tf;
            let sub = g - ap.model.prefs.h(c);
            if !(star > sub) {
                return Err(Error::Assumption(format!(
                    "playing `{}` in one period yields first-best value {sub} ≥ {star}",
                    ap.model.mt.actions()[a]
                )));
            }
        }
        Ok(ap)
    }

    /// `G^FB = g(a*) − h(c(a*))`.
    pub fn first_best_value(&self) -> f64 {
        self.payoffs[self.model.target()] - self.model.prefs.h(self.model.target_cost())
    }

    pub fn block_length(&self, n: usize) -> Result<usize> {
        if n == 0 || !n.is_multiple_of(self.periods) {
            return Err(Error::Config(format!("n = {n} is not a positive multiple of T = {}", self.periods)));
        }
        Ok(n / self.periods)
    }
}

/// Sequential binary contract and the quantities it is built from.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SequentialBinary {
    pub n: usize,
    pub periods: usize,
    pub thresholds: Vec<(usize, f64)>,
    pub v_plus: f64,
    pub v_minus: f64,
    /// Per-block `ln P_a[pass]`.
    pub log_pass: Vec<f64>,
    /// Per-block `ln P_{a*}[fail]`.
    pub log_fail_target: f64,
    /// Largest per-block pass probability among cheaper actions.
    pub p_bar: f64,
    /// Expected average cost under the recommended strategy.
    pub beta_star: f64,
    /// Smallest expected average cost under a first-period deviation to a cheaper action.
    pub beta: f64,
    pub beta_action: usize,
    /// Cheapest action, played after any failed block.
    pub fallback: usize,
    /// `ln(G^FB − G)` for the principal.
    pub log_gap: f64,
}

impl SequentialBinary {
    fn pass(&self, a: usize) -> f64 {
        self.log_pass[a].exp()
    }

    fn p_star(&self) -> f64 {
        (-self.log_fail_target.exp()).ln_1p().exp()
    }

    /// `P_{α*}[all blocks pass] = p^T`.
    pub fn all_pass_prob(&self) -> f64 {
        self.p_star().powi(self.periods as i32)
    }

    /// Agent's expected payoff under the recommended strategy.
    pub fn on_path_payoff(&self) -> f64 {
        let pt = self.all_pass_prob();
        pt * self.v_plus + (1.0 - pt) * self.v_minus - self.beta_star
    }
}

/// `(1 − p^k)/(1 − p^T)` for `ln p = lp ≤ 0`, with the `lp → 0` limit `k/T`.
fn fail_ratio(k: usize, periods: usize, lp: f64) -> f64 {
    if lp == 0.0 {
        k as f64 / periods as f64
    } else {
        (k as f64 * lp).exp_m1() / (periods as f64 * lp).exp_m1()
    }
}

/// Builds the contract for block thresholds `thresholds` at total sample size `n`.
pub fn build_sequential_binary(ap: &AdjustableProblem, n: usize, thresholds: &[(usize, f64)]) -> Result<SequentialBinary> {
    let m = ap.block_length(n)?;
    let model = &ap.model;
    let prefs = &model.prefs;
    let t_n = ap.periods;
    let tf = t_n as f64;
    let target = model.target();
    let minus = model.costs.a_minus();
    if minus.iter().any(|a| !thresholds.iter().any(|t| t.0 == *a)) {
        return Err(Error::ThresholdOutsideBand("every cheaper action needs a threshold".into()));
    }
    let sd = enumerate_types(&model.mt, m, DEFAULT_TYPE_CAP)?;
    for &(a, g) in thresholds {
        let (lo, hi) = (sd.mean_score(a, a, &model.mt), sd.mean_score(target, a, &model.mt));
        if !(g > lo && g < hi) {
            return Err(Error::ThresholdOutsideBand(format!("γ({a}) = {g} not inside ({lo}, {hi})")));
        }
    }
    let rule = PassRule::new(thresholds.to_vec());
    let log_pass: Vec<f64> = (0..model.mt.num_actions()).map(|a| tail_prob(&sd, a, &rule, Event::Pass)).collect();
    let log_fail = tail_prob(&sd, target, &rule, Event::Fail);
    let q = log_fail.exp();
    let lp = (-q).ln_1p();
    let p = lp.exp();
    let fallback = model.costs.cheapest()?;
    let (cs, cmin) = (model.target_cost(), model.cost(fallback));

    let p_bar = minus.iter().map(|&a| log_pass[a].exp()).fold(0.0, f64::max);
    if !(p > p_bar) {
        return Err(Error::ThresholdOutsideBand(format!("block pass probability {p} under target does not exceed {p_bar}")));
    }
    // Period t plays a* iff the first t − 1 blocks passed.
    let s_over_q: f64 = (1..=t_n).map(|t| fail_ratio(t - 1, t_n, lp)).sum();
    let log_big_q = if lp == 0.0 { tf.ln() + log_fail } else { (-(tf * lp).exp_m1()).ln() };
    let big_q = log_big_q.exp();
    let beta_star = cs - (cs - cmin) / tf * s_over_q * big_q;
    let mut beta = f64::INFINITY;
    let mut beta_action = fallback;
    for &a in &minus {
        let pa = log_pass[a].exp();
        let later: f64 = (2..=t_n).map(|t| cmin + pa * p.powi(t as i32 - 2) * (cs - cmin)).sum();
        let b = (model.cost(a) + later) / tf;
        if b < beta - 1e-15 * b.abs().max(1.0) {
            beta = b;
            beta_action = a;
        } else if (b - beta).abs() <= 1e-15 * b.abs().max(1.0) {
            log::info!("β tie between `{}` and `{}`; keeping the cheaper", model.mt.actions()[beta_action], model.mt.actions()[a]);
            if model.cost(a) < model.cost(beta_action) {
                beta_action = a;
            }
        }
    }
    let big_p = p.powi(t_n as i32);
    let spread = (beta_star - beta) / (p.powi(t_n as i32 - 1) * (p - p_bar));
    let v_plus = beta_star + big_q * spread;
    let v_minus = beta_star - big_p * spread;
    if v_minus < model.floor() || !prefs.in_domain(v_minus) || !prefs.in_domain(v_plus) || v_plus >= model.cap() {
        return Err(Error::NTooSmall { n, detail: format!("wages ({v_minus}, {v_plus}) leave the utility range") });
    }

    // G^FB − G = (g* − ḡ)/T·S + h(β*) − h(c*) + E[B(β*, v − β*)], all O(Q).
    let g_term = (ap.payoffs[target] - ap.payoffs[fallback]) / tf * s_over_q;
    let d_over_q = -(cs - cmin) / tf * s_over_q;
    let d = d_over_q * big_q;
    let shift = if d != 0.0 { prefs.h_diff(cs, d) / d * d_over_q } else { prefs.h_prime(cs) * d_over_q };
    let risk = big_p * prefs.bregman_over(beta_star, spread, big_q) + prefs.bregman(beta_star, -big_p * spread);
    let total = g_term + shift + risk;
    if !(total > 0.0) {
        return Err(Error::Assumption(format!("principal payoff exceeds the first best at n = {n}")));
    }
    Ok(SequentialBinary {
        n,
        periods: t_n,
        thresholds: thresholds.to_vec(),
        v_plus,
        v_minus,
        log_pass,
        log_fail_target: log_fail,
        p_bar,
        beta_star,
        beta,
        beta_action,
        fallback,
        log_gap: log_big_q + total.ln(),
    })
}

/// Gain from a one-shot deviation at period `t`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeviationGain {
    pub t: usize,
    pub action: usize,
    /// Whether every earlier block passed.
    pub on_path: bool,
    pub gain: f64,
}

/// Exact gains `U_t(a) − U_t(α*)` at every period, for every `a ≠ a*` on
/// path and every non-fallback action after a failure.
pub fn one_shot_deviation_gains(sb: &SequentialBinary, ap: &AdjustableProblem) -> Vec<DeviationGain> {
    let model = &ap.model;
    let t_n = ap.periods;
    let tf = t_n as f64;
    let p = sb.p_star();
    let (cs, cmin) = (model.target_cost(), model.cost(sb.fallback));
    let pay = |pass: f64| pass * sb.v_plus + (1.0 - pass) * sb.v_minus;
    let mut out = Vec::new();
    for t in 1..=t_n {
        let rest = t_n - t;
        // Continuation costs from period t on, given that the block of period t passes w.p. `p_first`.
        let cont_cost = |first_cost: f64, p_first: f64| -> f64 {
            let later: f64 = (t + 1..=t_n).map(|s| cmin + p_first * p.powi((s - t - 1) as i32) * (cs - cmin)).sum();
            (first_cost + later) / tf
        };
        let on = pay(p.powi(rest as i32 + 1)) - cont_cost(cs, p);
        for a in 0..model.mt.num_actions() {
            if a == model.target() {
                continue;
            }
            let pa = sb.pass(a);
            let dev = pay(pa * p.powi(rest as i32)) - cont_cost(model.cost(a), pa);
            out.push(DeviationGain { t, action: a, on_path: true, gain: dev - on });
        }
        if t > 1 {
            // After a failure the wage is v⁻ whatever happens.
            for a in 0..model.mt.num_actions() {
                if a != sb.fallback {
                    out.push(DeviationGain { t, action: a, on_path: false, gain: (cmin - model.cost(a)) / tf });
                }
            }
        }
    }
    out
}

/// Rate verification over `n_grid` with lenient block thresholds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdjustableRun {
    pub periods: usize,
    pub report: RateReport,
    pub max_gain: f64,
    /// Largest `|on-path payoff|`.
    pub max_ir_violation: f64,
    pub contracts: Vec<SequentialBinary>,
    pub skipped: Vec<(usize, String)>,
}

impl AdjustableRun {
    pub fn certified(&self) -> bool {
        self.max_gain <= GAIN_TOL && self.max_ir_violation <= GAIN_TOL
    }
}

/// `(1/T)·min_{a∈A⁻} KL(μ_a, μ_{a*})`.
pub fn adjustable_rate(ap: &AdjustableProblem) -> Result<f64> {
    let mt = &ap.model.mt;
    let mut best = f64::INFINITY;
    for a in ap.model.costs.a_minus() {
        best = best.min(kl(mt.dist(a), mt.dist(mt.target()))?);
    }
    Ok(best / ap.periods as f64)
}

pub fn verify_adjustable_rate(ap: &AdjustableProblem, epsilon: f64, n_grid: &[usize], opts: &FitOptions) -> Result<AdjustableRun> {
    let cells: Vec<(usize, Result<(SequentialBinary, f64)>)> = n_grid
        .par_iter()
        .map(|&n| {
            let r = ap.block_length(n).and_then(|m| {
                let sb = build_sequential_binary(ap, n, &lenient_thresholds(&ap.model, epsilon, m)?)?;
                let g = one_shot_deviation_gains(&sb, ap).iter().map(|d| d.gain).fold(f64::NEG_INFINITY, f64::max);
                Ok((sb, g))
            });
            (n, r)
        })
        .collect();
    let mut contracts = Vec::new();
    let mut skipped = Vec::new();
    let mut max_gain = f64::NEG_INFINITY;
    let mut max_ir = 0.0f64;
    for (n, r) in cells {
        match r {
            Ok((sb, g)) => {
                max_gain = max_gain.max(g);
                max_ir = max_ir.max(sb.on_path_payoff().abs());
                contracts.push(sb);
            }
            Err(e @ (Error::NTooSmall { .. } | Error::ThresholdOutsideBand(_))) => {
                log::info!("n = {n} skipped: {e}");
                skipped.push((n, e.to_string()));
            }
            Err(e) => return Err(e),
        }
    }
    let points: Vec<GapPoint> = contracts.iter().map(|c| GapPoint::from_log(c.n, c.log_gap)).collect();
    let report = fit_exponential_rate(&points, ap.first_best_value(), Some(adjustable_rate(ap)?), opts)?;
    Ok(AdjustableRun { periods: ap.periods, report, max_gain, max_ir_violation: max_ir, contracts, skipped })
}

/// Columns `t, action, on_path, gain`.
pub fn write_gains_csv<W: Write>(gains: &[DeviationGain], ap: &AdjustableProblem, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["t", "action", "on_path", "gain"])?;
    for g in gains {
        w.write_record([g.t.to_string(), ap.model.mt.actions()[g.action].clone(), g.on_path.to_string(), g.gain.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Configuration block for adjustable runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdjustableSpec {
    pub periods: Vec<usize>,
    pub payoffs: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contracts::build_binary_test;
    use crate::model::figure_one;
    use crate::numeric::log_sum_exp;

    fn problem(t: usize) -> AdjustableProblem {
        AdjustableProblem::new(figure_one(), t, vec![0.0, 12.0]).unwrap()
    }

    #[test]
    fn rejects_non_first_best_payoffs() {
        assert!(matches!(AdjustableProblem::new(figure_one(), 2, vec![0.0, 3.0]), Err(Error::Assumption(_))));
    }

    #[test]
    fn one_period_is_the_binary_test() {
        let ap = problem(1);
        let n = 30;
        let th = lenient_thresholds(&ap.model, 0.4, n).unwrap();
        let sb = build_sequential_binary(&ap, n, &th).unwrap();
        let sd = enumerate_types(&ap.model.mt, n, DEFAULT_TYPE_CAP).unwrap();
        let bt = build_binary_test(&ap.model, &sd, &th).unwrap();
        assert!((sb.v_plus - bt.v_plus).abs() < 1e-12 && (sb.v_minus - bt.v_minus).abs() < 1e-12);
        assert!((sb.log_gap - bt.log_cost_gap(&ap.model.prefs)).abs() < 1e-10);
    }

    /// Two blocks of four signals, evaluated by summing over every pair of block types.
    #[test]
    fn two_blocks_exact_payoff() {
        let ap = problem(2);
        let m = 4;
        let th = lenient_thresholds(&ap.model, 0.4, m).unwrap();
        let sb = build_sequential_binary(&ap, 8, &th).unwrap();
        let sd = enumerate_types(&ap.model.mt, m, DEFAULT_TYPE_CAP).unwrap();
        let rule = PassRule::new(th.clone());
        let (work, shirk) = (1, 0);
        let mut pay = 0.0;
        let mut cost = 0.0;
        let mut all_pass = Vec::new();
        for t1 in 0..sd.len() {
            let pass1 = rule.passes(&sd, t1);
            let second = if pass1 { work } else { shirk };
            for t2 in 0..sd.len() {
                let lp = sd.log_probs[work][t1] + sd.log_probs[second][t2];
                let both = pass1 && rule.passes(&sd, t2);
                if both {
                    all_pass.push(lp);
                }
                pay += lp.exp() * if both { sb.v_plus } else { sb.v_minus };
                cost += lp.exp() * (ap.model.cost(work) + ap.model.cost(second)) / 2.0;
            }
        }
        assert!((pay - cost).abs() < 1e-9, "{}", pay - cost);
        assert!((log_sum_exp(&all_pass).exp() - sb.all_pass_prob()).abs() < 1e-12);
        assert!(sb.on_path_payoff().abs() < 1e-9);
    }

    #[test]
    fn gains_and_limits() {
        let ap = problem(2);
        for n in [40, 200, 400] {
            let th = lenient_thresholds(&ap.model, 0.4, n / 2).unwrap();
            let sb = build_sequential_binary(&ap, n, &th).unwrap();
            let gains = one_shot_deviation_gains(&sb, &ap);
            assert!(gains.iter().all(|g| g.gain <= GAIN_TOL), "{gains:?}");
            if n == 400 {
                assert!((sb.v_plus - 2.0).abs() < 1e-6);
                // On-path gains at t = 2 head towards −1.
                let g = gains.iter().find(|g| g.t == 2 && g.on_path).unwrap();
                assert!(g.gain < -0.5, "{}", g.gain);
            }
        }
    }

    #[test]
    fn n_must_divide() {
        let ap = problem(2);
        assert!(build_sequential_binary(&ap, 7, &[(0, 0.0)]).is_err());
    }

    #[test]
    fn halving_rate_with_two_periods() {
        let grid: Vec<usize> = (1..=200).map(|k| 2 * k).collect();
        let opts = FitOptions { window: Some((200, 400)), ..FitOptions::default() };
        let r1 = verify_adjustable_rate(&problem(1), 0.4, &grid, &opts).unwrap();
        let r2 = verify_adjustable_rate(&problem(2), 0.4, &grid, &opts).unwrap();
        let ratio = r2.report.fitted_rate / r1.report.fitted_rate;
        assert!((0.4..=0.6).contains(&ratio), "{ratio}");
        assert!(r1.certified() && r2.certified(), "{} {}", r2.max_gain, r2.max_ir_violation);
    }
}
