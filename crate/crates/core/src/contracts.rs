//! Contracts as utility payments per type class: binary test contracts,
//! linear schedules, and exact evaluation of cost, incentives and risk.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::monitoring::{score_terms, MonitoringTechnology};
use crate::numeric::{ln_one_minus_exp, log_sum_exp};
use crate::preferences::{Regime, UtilitySpec};
use crate::score_dist::{tail_prob, Event, PassRule, ScoreDistribution};

/// Slack tolerated when re-verifying incentive constraints.
pub const IC_TOL: f64 = 1e-9;

/// Utility payment for every type class of a score distribution.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Contract {
    pub n: usize,
    pub utilities: Vec<f64>,
}

impl Contract {
    pub fn constant(sd: &ScoreDistribution, v: f64) -> Self {
        Self { n: sd.n, utilities: vec![v; sd.len()] }
    }

    pub fn from_fn<F: Fn(usize) -> f64>(sd: &ScoreDistribution, f: F) -> Self {
        Self { n: sd.n, utilities: (0..sd.len()).map(f).collect() }
    }

    pub fn wages(&self, prefs: &UtilitySpec) -> Vec<f64> {
        self.utilities.iter().map(|&v| prefs.h(v)).collect()
    }

    fn check_shape(&self, sd: &ScoreDistribution) -> Result<()> {
        if self.n != sd.n || self.utilities.len() != sd.len() {
            return Err(Error::LengthMismatch(format!(
                "contract has n = {} with {} payments, distribution has n = {} with {} types",
                self.n,
                self.utilities.len(),
                sd.n,
                sd.len()
            )));
        }
        Ok(())
    }
}

/// Two-wage contract paying `v_plus` iff every score clears its threshold.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BinaryTest {
    pub n: usize,
    pub regime: Regime,
    pub rule: PassRule,
    pub v_plus: f64,
    pub v_minus: f64,
    /// First-best utility the wages straddle.
    pub reference: f64,
    /// `ln P_a[pass]` for every action.
    pub log_pass: Vec<f64>,
    /// `ln P_{a*}[fail]`.
    pub log_fail_target: f64,
    pub target: usize,
}

impl BinaryTest {
    /// Wages from exact pass probabilities.
    ///
    /// Baseline binds IR and IC against the worst cheaper deviation;
    /// limited liability pays the floor on failure and binds IC against the
    /// cheapest action. Every action is re-verified afterwards.
    pub fn from_probabilities(
        model: &Model,
        n: usize,
        rule: PassRule,
        log_pass: Vec<f64>,
        log_fail_target: f64,
    ) -> Result<Self> {
        let target = model.target();
        let p_star = log_pass[target].exp();
        let prefs = &model.prefs;
        let minus = model.costs.a_minus();
        let reference = model.first_best_utility();
        let (v_plus, v_minus, spread) = match model.regime {
            Regime::Baseline => {
                let p_bar = minus.iter().map(|&a| log_pass[a].exp()).fold(0.0, f64::max);
                let c_min = minus.iter().map(|&a| model.cost(a)).fold(f64::INFINITY, f64::min);
                if !(p_star > p_bar) {
                    return Err(Error::ThresholdOutsideBand(format!(
                        "pass probability under target {p_star} does not exceed {p_bar}"
                    )));
                }
                let x = (model.target_cost() - c_min) / (p_star - p_bar);
                let q = log_fail_target.exp();
                (reference + q * x, reference - p_star * x, x)
            }
            Regime::LimitedLiability => {
                let a_hat = model.costs.cheapest()?;
                let d = p_star - log_pass[a_hat].exp();
                if !(d > 0.0) {
                    return Err(Error::ThresholdOutsideBand(format!(
                        "pass probability under target {p_star} does not exceed that of the cheapest action"
                    )));
                }
                let spread = (model.target_cost() - model.cost(a_hat)) / d;
                (model.floor() + spread, model.floor(), spread)
            }
        };
        if v_minus < model.floor() - 1e-12 * model.floor().abs().max(1.0) {
            return Err(Error::NTooSmall { n, detail: format!("v⁻ = {v_minus} is below u(w̄) = {}", model.floor()) });
        }
        if !prefs.in_domain(v_plus) || !prefs.in_domain(v_minus) {
            return Err(Error::NTooSmall { n, detail: format!("v⁺ = {v_plus} lies outside the utility range") });
        }
        for a in model.costs.deviations() {
            let slack = (p_star - log_pass[a].exp()) * spread - (model.target_cost() - model.cost(a));
            if slack < -IC_TOL * (1.0 + spread.abs()) {
                return Err(Error::ContractInfeasible {
                    n,
                    detail: format!("IC against `{}` fails by {}", model.mt.actions()[a], -slack),
                });
            }
        }
        Ok(Self { n, regime: model.regime, rule, v_plus, v_minus, reference, log_pass, log_fail_target, target })
    }

    pub fn pass_prob(&self, a: usize) -> f64 {
        self.log_pass[a].exp()
    }

    pub fn to_contract(&self, sd: &ScoreDistribution) -> Contract {
        Contract::from_fn(sd, |t| if self.rule.passes(sd, t) { self.v_plus } else { self.v_minus })
    }

    /// Expected wage under the target action.
    pub fn cost(&self, prefs: &UtilitySpec) -> f64 {
        let q = self.log_fail_target.exp();
        (1.0 - q) * prefs.h(self.v_plus) + q * prefs.h(self.v_minus)
    }

    /// Spread `v⁺ − v⁻`.
    pub fn spread(&self) -> f64 {
        self.v_plus - self.v_minus
    }

    /// `ln(cost − first-best cost)` in a cancellation-free form.
    pub fn log_cost_gap(&self, prefs: &UtilitySpec) -> f64 {
        let q = self.log_fail_target.exp();
        let mean = match self.regime {
            // IR binds by construction.
            Regime::Baseline => self.reference,
            Regime::LimitedLiability => self.v_minus + (-q).ln_1p().exp() * self.spread(),
        };
        two_point_log_gap(prefs, self.reference, mean, self.spread(), self.log_fail_target)
    }
}

/// `ln(p* h(m + qΔ) + q h(m − p*Δ) − h(m_ref))` for a two-point payment with
/// mean `m ≥ m_ref`, spread `Δ` and failure probability `q = e^{log_q}`.
///
/// Uses `h(m) − h(m_ref) + q [p* B(m, qΔ)/q + B(m, −p*Δ)]`, every term nonnegative.
pub fn two_point_log_gap(prefs: &UtilitySpec, m_ref: f64, m: f64, spread: f64, log_q: f64) -> f64 {
    let q = log_q.exp();
    let p_star = (-q).ln_1p().exp();
    let shift = prefs.h_diff(m_ref, m - m_ref);
    let lead = if shift > 0.0 { shift.ln() } else { f64::NEG_INFINITY };
    if log_q == f64::NEG_INFINITY || spread <= 0.0 {
        return lead;
    }
    let inner = p_star * prefs.bregman_over(m, spread, q) + prefs.bregman(m, -p_star * spread);
    // Stays finite when q underflows: the first bracket term then vanishes.
    let risk = log_q + inner.ln();
    log_sum_exp(&[lead, risk])
}

/// Exact pass probabilities and wages for a threshold profile.
pub fn build_binary_test(model: &Model, sd: &ScoreDistribution, thresholds: &[(usize, f64)]) -> Result<BinaryTest> {
    let minus = model.costs.a_minus();
    for &(a, g) in thresholds {
        if a == model.target() || a >= model.mt.num_actions() {
            return Err(Error::DegenerateScore);
        }
        if model.regime == Regime::Baseline {
            let lo = sd.mean_score(a, a, &model.mt);
            let hi = sd.mean_score(model.target(), a, &model.mt);
            if !(g > lo && g < hi) {
                return Err(Error::ThresholdOutsideBand(format!("γ({a}) = {g} not inside ({lo}, {hi})")));
            }
        }
    }
    if model.regime == Regime::Baseline && minus.iter().any(|a| !thresholds.iter().any(|t| t.0 == *a)) {
        return Err(Error::ThresholdOutsideBand("every cheaper action needs a threshold".into()));
    }
    let rule = PassRule::new(thresholds.to_vec());
    let log_pass: Vec<f64> = (0..model.mt.num_actions()).map(|a| tail_prob(sd, a, &rule, Event::Pass)).collect();
    let log_fail = tail_prob(sd, model.target(), &rule, Event::Fail);
    BinaryTest::from_probabilities(model, sd.n, rule, log_pass, log_fail)
}

/// Score threshold equivalent to "fraction of `high` signals is at least `f`".
pub fn fraction_to_score_threshold(mt: &MonitoringTechnology, a_dev: usize, high: usize, f: f64) -> Result<f64> {
    if mt.num_signals() != 2 {
        return Err(Error::UnsupportedAlphabet(format!("{} signals; exactly two are required", mt.num_signals())));
    }
    if high > 1 {
        return Err(Error::UnknownLabel(format!("signal index {high}")));
    }
    let t = score_terms(mt, a_dev)?;
    Ok(f * t[high] + (1.0 - f) * t[1 - high])
}

/// `γ_n = E_a[L(a)] + ε n^{-1/3} (E_{a*}[L(a)] − E_a[L(a)])`.
pub fn lenient_threshold_sequence(mt: &MonitoringTechnology, a: usize, epsilon: f64, n: usize) -> Result<f64> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::Config(format!("leniency ε = {epsilon} must lie in (0, 1)")));
    }
    let t = score_terms(mt, a)?;
    let lo: f64 = mt.dist(a).iter().zip(&t).map(|(p, s)| p * s).sum();
    let hi: f64 = mt.dist(mt.target()).iter().zip(&t).map(|(p, s)| p * s).sum();
    Ok(lo + epsilon * (n as f64).powf(-1.0 / 3.0) * (hi - lo))
}

/// Lenient thresholds for every cheaper action.
///
/// Under limited liability the cheapest action is tested at `γ = 0`.
pub fn lenient_thresholds(model: &Model, epsilon: f64, n: usize) -> Result<Vec<(usize, f64)>> {
    let a_hat = match model.regime {
        Regime::LimitedLiability => Some(model.costs.cheapest()?),
        Regime::Baseline => None,
    };
    model
        .costs
        .a_minus()
        .into_iter()
        .map(|a| {
            if Some(a) == a_hat {
                Ok((a, 0.0))
            } else {
                lenient_threshold_sequence(&model.mt, a, epsilon, n).map(|g| (a, g))
            }
        })
        .collect()
}

/// IR slack and per-deviation IC slack in utility units.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IcIrSlack {
    pub ir: f64,
    pub ic: Vec<(usize, f64)>,
}

impl IcIrSlack {
    pub fn min_ic(&self) -> f64 {
        self.ic.iter().map(|p| p.1).fold(f64::INFINITY, f64::min)
    }
}

pub fn check_ic_ir(contract: &Contract, model: &Model, sd: &ScoreDistribution) -> Result<IcIrSlack> {
    contract.check_shape(sd)?;
    let v = &contract.utilities;
    let ev = |a: usize| sd.expect(a, |t| v[t]);
    let star = ev(model.target()) - model.target_cost();
    let ic = model.costs.deviations().into_iter().map(|a| (a, star - (ev(a) - model.cost(a)))).collect();
    Ok(IcIrSlack { ir: star, ic })
}

/// `E_{a*}[h(v)]`.
pub fn implementation_cost(contract: &Contract, prefs: &UtilitySpec, sd: &ScoreDistribution) -> Result<f64> {
    contract.check_shape(sd)?;
    let floor = prefs.utility_floor();
    if let Some(&v) = contract.utilities.iter().find(|&&v| !prefs.in_domain(v) || v < floor - 1e-12 * floor.abs().max(1.0)) {
        return Err(Error::OutsideUtilityRange { value: v });
    }
    Ok(sd.expect(sd.target, |t| prefs.h(contract.utilities[t])))
}

/// Variance of the payment and the Jensen gap it induces.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct JensenReport {
    pub variance: f64,
    pub jensen_gap: f64,
    /// `(inf h″ / 2) · Var` over the payment range.
    pub curvature_bound: f64,
    pub bound_holds: bool,
}

pub fn variance_and_jensen_gap(contract: &Contract, prefs: &UtilitySpec, sd: &ScoreDistribution, a: usize) -> Result<JensenReport> {
    contract.check_shape(sd)?;
    let v = &contract.utilities;
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        return Ok(JensenReport { variance: 0.0, jensen_gap: 0.0, curvature_bound: 0.0, bound_holds: true });
    }
    let mean = sd.expect(a, |t| v[t]);
    let variance = sd.expect(a, |t| (v[t] - mean) * (v[t] - mean));
    // E[h(v)] − h(E v) = E[h(v) − h(m) − h′(m)(v − m)] since E[v − m] = 0.
    let jensen_gap = sd.expect(a, |t| prefs.bregman(mean, v[t] - mean)).max(0.0);
    // h″ is monotone for every supported family, so its infimum sits at an endpoint.
    let inf_h2 = prefs.h_second(lo).min(prefs.h_second(hi));
    let curvature_bound = 0.5 * inf_h2 * variance;
    Ok(JensenReport {
        variance,
        jensen_gap,
        curvature_bound,
        bound_holds: jensen_gap >= curvature_bound * (1.0 - 1e-9) - 1e-300,
    })
}

/// False-negative and false-positive log-probabilities of a binary test.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FalseRates {
    pub false_negative_log: f64,
    pub false_positive_log: Vec<(usize, f64)>,
}

pub fn false_rates(bt: &BinaryTest, sd: &ScoreDistribution, a_minus: &[usize]) -> FalseRates {
    FalseRates {
        false_negative_log: tail_prob(sd, bt.target, &bt.rule, Event::Fail),
        false_positive_log: a_minus.iter().map(|&a| (a, tail_prob(sd, a, &bt.rule, Event::Pass))).collect(),
    }
}

/// Whether linear coefficients are wages or utilities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinearKind {
    WageLinear,
    UtilityLinear,
}

/// Payment `Σ_x ν(x) b(x)` in wages or in utility.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LinearSchedule {
    pub kind: LinearKind,
    pub coefficients: Vec<f64>,
}

impl LinearSchedule {
    pub fn to_contract(&self, prefs: &UtilitySpec, sd: &ScoreDistribution) -> Contract {
        Contract::from_fn(sd, |t| {
            let s: f64 = self.coefficients.iter().enumerate().map(|(x, b)| sd.freq(t, x) * b).sum();
            match self.kind {
                LinearKind::WageLinear => prefs.u(s),
                LinearKind::UtilityLinear => s,
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LinearEvaluation {
    pub cost: f64,
    pub slack: IcIrSlack,
}

pub fn linear_cost(ls: &LinearSchedule, model: &Model, sd: &ScoreDistribution) -> Result<LinearEvaluation> {
    if ls.coefficients.len() != model.mt.num_signals() {
        return Err(Error::LengthMismatch("one coefficient per signal is required".into()));
    }
    let contract = ls.to_contract(&model.prefs, sd);
    let cost = match ls.kind {
        LinearKind::WageLinear => {
            if let Some(b) = ls.coefficients.iter().find(|&&b| b < model.prefs.wage_floor) {
                return Err(Error::OutsideUtilityRange { value: model.prefs.u(*b) });
            }
            model.mt.dist(model.target()).iter().zip(&ls.coefficients).map(|(p, b)| p * b).sum()
        }
        LinearKind::UtilityLinear => implementation_cost(&contract, &model.prefs, sd)?,
    };
    Ok(LinearEvaluation { cost, slack: check_ic_ir(&contract, model, sd)? })
}

/// One row per type class: counts, scores, utility payment, wage.
pub fn write_contract_csv<W: Write>(
    contract: &Contract,
    model: &Model,
    sd: &ScoreDistribution,
    out: W,
) -> Result<()> {
    contract.check_shape(sd)?;
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["type".to_string()];
    header.extend(model.mt.signals().iter().map(|s| format!("count_{s}")));
    header.extend(sd.deviations.iter().map(|&a| format!("score_{}", model.mt.actions()[a])));
    header.extend(["prob_target_log".to_string(), "utility".into(), "wage".into()]);
    w.write_record(&header)?;
    for (t, ty) in sd.types.iter().enumerate() {
        let mut row = vec![t.to_string()];
        row.extend(ty.counts.iter().map(|c| c.to_string()));
        row.extend(ty.scores.iter().map(|s| s.to_string()));
        row.push(sd.log_probs[sd.target][t].to_string());
        row.push(contract.utilities[t].to_string());
        row.push(model.prefs.h(contract.utilities[t]).to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// `ln(1 − P)` given `ln P`.
pub fn log_complement(lp: f64) -> f64 {
    if lp >= 0.0 {
        f64::NEG_INFINITY
    } else {
        ln_one_minus_exp(lp)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::figure_one;
    use crate::preferences::UtilitySpec;
    use crate::score_dist::{enumerate_types, DEFAULT_TYPE_CAP};

    #[test]
    fn n_one_baseline_wages() {
        let m = figure_one();
        let sd = enumerate_types(&m.mt, 1, DEFAULT_TYPE_CAP).unwrap();
        let bt = build_binary_test(&m, &sd, &[(0, 0.0)]).unwrap();
        assert!((bt.v_plus - 3.5).abs() < 1e-12 && (bt.v_minus + 1.5).abs() < 1e-12);
        let c = bt.to_contract(&sd);
        let s = check_ic_ir(&c, &m, &sd).unwrap();
        assert!(s.ir.abs() < 1e-12 && s.min_ic().abs() < 1e-12);
        let cost = implementation_cost(&c, &m.prefs, &sd).unwrap();
        let direct = 0.7 * 3.5f64.exp() + 0.3 * (-1.5f64).exp();
        assert!((cost - direct).abs() < 1e-12 && (cost - 23.24).abs() < 0.01);
        assert!((bt.cost(&m.prefs) - direct).abs() < 1e-12);
        assert!((bt.log_cost_gap(&m.prefs) - (direct - 2f64.exp()).ln()).abs() < 1e-12);
        let j = variance_and_jensen_gap(&c, &m.prefs, &sd, 1).unwrap();
        assert!((j.variance - 5.25).abs() < 1e-12 && j.bound_holds);
    }

    #[test]
    fn n_one_limited_liability() {
        let m = figure_one().with_regime(Regime::LimitedLiability, UtilitySpec::log(1.0)).unwrap();
        let sd = enumerate_types(&m.mt, 1, DEFAULT_TYPE_CAP).unwrap();
        let bt = build_binary_test(&m, &sd, &[(0, 0.0)]).unwrap();
        assert!(bt.v_minus.abs() < 1e-15 && (bt.v_plus - 5.0).abs() < 1e-12);
        let s = check_ic_ir(&bt.to_contract(&sd), &m, &sd).unwrap();
        assert!(s.min_ic().abs() < 1e-9);
        let e_hat = 0.3 * 5.0;
        assert!((s.ir - (0.7 * 5.0 - 2.0)).abs() < 1e-12 && e_hat >= 0.0);
        let direct = 0.7 * 5f64.exp() + 0.3 - 2f64.exp();
        assert!((bt.log_cost_gap(&m.prefs) - direct.ln()).abs() < 1e-12);
    }

    #[test]
    fn gap_stays_finite_when_subtraction_underflows() {
        let m = figure_one();
        let n = 600;
        let sd = enumerate_types(&m.mt, n, DEFAULT_TYPE_CAP).unwrap();
        let g = lenient_thresholds(&m, 0.4, n).unwrap();
        let bt = build_binary_test(&m, &sd, &g).unwrap();
        let lg = bt.log_cost_gap(&m.prefs);
        assert!(lg.is_finite() && lg < -100.0, "{lg}");
        assert!(bt.cost(&m.prefs) - m.first_best_cost() < 1e-12);
    }

    #[test]
    fn fraction_mapping() {
        let m = figure_one();
        let k = 0.4 * (7.0f64 / 3.0).ln();
        assert!(fraction_to_score_threshold(&m.mt, 0, 1, 0.5).unwrap().abs() < 1e-15);
        assert!((fraction_to_score_threshold(&m.mt, 0, 1, 0.3).unwrap() + k).abs() < 1e-12);
        assert!((fraction_to_score_threshold(&m.mt, 0, 1, 0.7).unwrap() - k).abs() < 1e-12);
    }

    #[test]
    fn lenient_sequence_arithmetic() {
        let m = figure_one();
        let k = 0.4 * (7.0f64 / 3.0).ln();
        let g = lenient_threshold_sequence(&m.mt, 0, 0.5, 8).unwrap();
        assert!((g - (-k + 0.25 * 2.0 * k)).abs() < 1e-12);
        assert!(lenient_threshold_sequence(&m.mt, 0, 0.999_999, 1).unwrap() < k);
        assert!((lenient_threshold_sequence(&m.mt, 0, 0.5, 1 << 40).unwrap() + k).abs() < 1e-3);
    }

    #[test]
    fn constant_contract() {
        let m = figure_one();
        let sd = enumerate_types(&m.mt, 7, DEFAULT_TYPE_CAP).unwrap();
        let c = Contract::constant(&sd, 2.0);
        let s = check_ic_ir(&c, &m, &sd).unwrap();
        assert!(s.ir.abs() < 1e-12 && (s.ic[0].1 + 2.0).abs() < 1e-12);
        assert!((implementation_cost(&c, &m.prefs, &sd).unwrap() - 2f64.exp()).abs() < 1e-12);
        let j = variance_and_jensen_gap(&c, &m.prefs, &sd, 1).unwrap();
        assert_eq!((j.variance, j.jensen_gap), (0.0, 0.0));
    }

    #[test]
    fn false_rate_examples() {
        let m = figure_one();
        let sd = enumerate_types(&m.mt, 1, DEFAULT_TYPE_CAP).unwrap();
        let bt = build_binary_test(&m, &sd, &[(0, 0.0)]).unwrap();
        let f = false_rates(&bt, &sd, &[0]);
        assert!((f.false_negative_log - 0.3f64.ln()).abs() < 1e-14);
        assert!((f.false_positive_log[0].1 - 0.3f64.ln()).abs() < 1e-14);
        let mut everyone = bt.clone();
        everyone.rule = PassRule::single(0, -10.0);
        let f = false_rates(&everyone, &sd, &[0]);
        assert_eq!(f.false_negative_log, f64::NEG_INFINITY);
        assert!(f.false_positive_log[0].1.abs() < 1e-15);
    }

    #[test]
    fn linear_constant_first_best() {
        let m = figure_one();
        let sd = enumerate_types(&m.mt, 4, DEFAULT_TYPE_CAP).unwrap();
        let ls = LinearSchedule { kind: LinearKind::WageLinear, coefficients: vec![2f64.exp(); 2] };
        let e = linear_cost(&ls, &m, &sd).unwrap();
        assert!((e.cost - 2f64.exp()).abs() < 1e-12 && e.slack.ic[0].1 < 0.0);
    }

    #[test]
    fn utility_linear_matches_two_point_at_n_one() {
        let m = figure_one();
        let sd = enumerate_types(&m.mt, 1, DEFAULT_TYPE_CAP).unwrap();
        // v(ν) = α ν(high) + β with IR and IC binding: α·0.4 = 2, 0.7α + β = 2.
        let (alpha, beta) = (5.0, 2.0 - 3.5);
        let ls = LinearSchedule { kind: LinearKind::UtilityLinear, coefficients: vec![beta, alpha + beta] };
        let e = linear_cost(&ls, &m, &sd).unwrap();
        let bt = build_binary_test(&m, &sd, &[(0, 0.0)]).unwrap();
        assert!((e.cost - bt.cost(&m.prefs)).abs() < 1e-12);
    }
}
