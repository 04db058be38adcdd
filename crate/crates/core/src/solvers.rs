//! Optimal contracts: the second best by convex programming over type
//! classes, the cheapest binary contract, and optimal linear schedules.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::barrier::{dot, Hessian, Objective, Options, Problem, Row, TraceRow};
use crate::contracts::{check_ic_ir, implementation_cost, two_point_log_gap, Contract, IcIrSlack, LinearKind, LinearSchedule};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::monitoring::score_terms;
use crate::numeric::{golden_section, log_sum_exp};
use crate::preferences::UtilitySpec;
use crate::score_dist::{PassRule, ScoreDistribution};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SecondBestOptions {
    pub barrier: Options,
    /// Types whose mean log-probability across actions is below this are pinned to `u(w̄)`.
    pub drop_log_weight: f64,
}

impl Default for SecondBestOptions {
    fn default() -> Self {
        Self { barrier: Options::default(), drop_log_weight: -690.0 }
    }
}

/// Optimal contract with recovered multipliers and optimality diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SecondBestSolution {
    pub n: usize,
    pub contract: Contract,
    pub cost: f64,
    /// IR multiplier.
    pub lambda: f64,
    /// IC multiplier per deviation.
    pub kappa: Vec<(usize, f64)>,
    pub slack: IcIrSlack,
    /// Max normalized stationarity violation.
    pub stationarity: f64,
    /// Max of `|λ·IR|`, `|κ·IC|` and normalized box products.
    pub complementarity: f64,
    /// Max of stationarity, complementarity, dual and primal infeasibility.
    pub kkt_residual: f64,
    /// Max `|v − v*|` over types where the barrier does not blur the pointwise formula.
    pub v_star_deviation: f64,
    pub resolved_types: usize,
    pub active_types: usize,
    pub duality_gap: f64,
    pub cap_binding: bool,
    /// The active-set polish certified the barrier iterate.
    pub polished: bool,
    pub newton_steps: usize,
    pub trace: Vec<TraceRow>,
}

impl SecondBestSolution {
    pub fn multiplier_sum(&self) -> f64 {
        self.lambda + self.kappa.iter().map(|k| k.1).sum::<f64>()
    }

    /// Smallest resolvable log-gap. Type probabilities sum to one only up to
    /// about `1e-12`, which shifts IR-bound utilities by up to `1e-11·max(1, |c*|)`.
    pub fn log_gap_resolution(model: &Model) -> f64 {
        let cs = model.first_best_utility();
        let d = 1e-11 * cs.abs().max(1.0);
        (0.5 * model.prefs.h_second(cs) * d * d).ln()
    }

    /// `ln(cost − h(c*))` as `ln(E_{a*}[B(c*, v − c*)] + h'(c*)·IR slack)`,
    /// free of cancellation when IR binds. Baseline regime only.
    pub fn log_gap(&self, model: &Model, sd: &ScoreDistribution) -> f64 {
        let prefs = &model.prefs;
        let cs = model.first_best_utility();
        let target = model.target();
        let mut terms: Vec<f64> = (0..sd.len())
            .map(|t| sd.log_probs[target][t] + prefs.bregman(cs, self.contract.utilities[t] - cs).ln())
            .collect();
        // Slack at rounding level is dropped.
        if self.slack.ir > 1e-12 * cs.abs().max(1.0) {
            terms.push(prefs.h_prime(cs).ln() + self.slack.ir.ln());
        }
        log_sum_exp(&terms)
    }
}

struct Separable<'a> {
    weights: Vec<f64>,
    prefs: &'a UtilitySpec,
}

impl Objective for Separable<'_> {
    fn value(&self, x: &[f64]) -> f64 {
        self.weights.iter().zip(x).map(|(w, &v)| w * self.prefs.h(v)).sum()
    }
    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        self.weights.iter().zip(x).map(|(w, &v)| w * self.prefs.h_prime(v)).collect()
    }
    fn hessian(&self, x: &[f64]) -> Hessian {
        Hessian::Diagonal(self.weights.iter().zip(x).map(|(w, &v)| w * self.prefs.h_second(v)).collect())
    }
}

/// Cheapest two-point payment for given pass probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TwoPoint {
    pub v_plus: f64,
    pub v_minus: f64,
    pub mean: f64,
    pub spread: f64,
    pub cost: f64,
}

/// Optimal wages for a pass set with probabilities `p[a]`.
///
/// The spread is the smallest one deterring every cheaper action and the
/// mean the smallest one meeting IR and the floor. A positive `margin`
/// inflates both to obtain a strictly feasible point.
pub fn optimal_two_point(model: &Model, p: &[f64], margin: f64) -> Option<TwoPoint> {
    let t = model.target();
    let ps = p[t];
    let cs = model.target_cost();
    let mut lo = 0.0f64;
    let mut hi = f64::INFINITY;
    for a in model.costs.deviations() {
        let gain = cs - model.cost(a);
        let dp = ps - p[a];
        if gain > 0.0 {
            if !(dp > 0.0) {
                return None;
            }
            lo = lo.max(gain / dp);
        } else if dp < 0.0 {
            hi = hi.min(gain / dp);
        }
    }
    if lo > hi || (margin > 0.0 && lo >= hi) {
        return None;
    }
    let spread = if margin > 0.0 { (lo * (1.0 + margin)).min(0.5 * (lo + hi)) } else { lo };
    let lb = model.floor();
    let mean = cs.max(lb + ps * spread) + margin * (1.0 + spread);
    let v_minus = mean - ps * spread;
    let v_plus = v_minus + spread;
    if !model.prefs.in_domain(v_plus) || v_plus >= model.cap() || !model.prefs.in_domain(v_minus) {
        return None;
    }
    let cost = ps * model.prefs.h(v_plus) + (1.0 - ps) * model.prefs.h(v_minus);
    Some(TwoPoint { v_plus, v_minus, mean, spread, cost })
}

fn set_probs(sd: &ScoreDistribution, pass: &[bool], actions: usize) -> Vec<f64> {
    (0..actions)
        .map(|a| (0..sd.len()).filter(|&t| pass[t]).map(|t| sd.prob(a, t)).sum::<f64>())
        .collect()
}

fn band(model: &Model, sd: &ScoreDistribution, a: usize) -> (f64, f64) {
    (sd.mean_score(a, a, &model.mt), sd.mean_score(model.target(), a, &model.mt))
}

/// Candidate pass sets for a strictly feasible starting contract.
fn witness_candidates(model: &Model, sd: &ScoreDistribution) -> Vec<Vec<bool>> {
    let minus = model.costs.a_minus();
    let mut out = Vec::new();
    for eps in [0.05, 0.1, 0.2, 0.35, 0.5, 0.65, 0.8, 0.95] {
        let rule = PassRule::new(
            minus
                .iter()
                .map(|&a| {
                    let (lo, hi) = band(model, sd, a);
                    (a, lo + eps * (hi - lo))
                })
                .collect(),
        );
        out.push((0..sd.len()).map(|t| rule.passes(sd, t)).collect());
    }
    for &a in &minus {
        let mut s: Vec<f64> = (0..sd.len()).map(|t| sd.score(t, a)).collect();
        s.sort_by(|x, y| x.partial_cmp(y).expect("finite scores"));
        s.dedup_by(|x, y| (*x - *y).abs() <= 1e-12);
        let step = (s.len() / 200).max(1);
        for g in s.iter().step_by(step) {
            let rule = PassRule::single(a, *g);
            out.push((0..sd.len()).map(|t| rule.passes(sd, t)).collect());
        }
    }
    out
}

/// A strictly feasible contract built from the cheapest scaled binary candidate.
pub fn strict_witness(model: &Model, sd: &ScoreDistribution) -> Result<Vec<f64>> {
    let mut best: Option<(f64, Vec<bool>, TwoPoint)> = None;
    for pass in witness_candidates(model, sd) {
        let p = set_probs(sd, &pass, model.mt.num_actions());
        if let Some(tp) = optimal_two_point(model, &p, 1e-2) {
            if best.as_ref().is_none_or(|b| tp.cost < b.0) {
                best = Some((tp.cost, pass, tp));
            }
        }
    }
    let (_, pass, tp) = best.ok_or_else(|| Error::Infeasible(format!("no strictly feasible binary witness at n = {}", sd.n)))?;
    Ok(pass.iter().map(|&p| if p { tp.v_plus } else { tp.v_minus }).collect())
}

/// Minimize `E_{a*}[h(v)]` over per-type utilities subject to IR, every IC and the box.
pub fn solve_second_best(model: &Model, sd: &ScoreDistribution, opts: &SecondBestOptions) -> Result<SecondBestSolution> {
    let lb = model.floor();
    let ub = model.cap();
    let target = model.target();
    let na = model.mt.num_actions();
    let nt = sd.len();
    let log_pi: Vec<f64> = (0..nt)
        .map(|t| log_sum_exp(&(0..na).map(|a| sd.log_probs[a][t]).collect::<Vec<_>>()) - (na as f64).ln())
        .collect();
    let active: Vec<usize> = (0..nt).filter(|&t| log_pi[t] > opts.drop_log_weight).collect();
    let dropped: Vec<usize> = (0..nt).filter(|&t| log_pi[t] <= opts.drop_log_weight).collect();
    let pi: Vec<f64> = active.iter().map(|&t| log_pi[t].exp()).collect();
    let p_star: Vec<f64> = active.iter().map(|&t| sd.prob(target, t)).collect();

    let devs = model.costs.deviations();
    let mut rows = vec![Row {
        a: p_star.clone(),
        b: model.target_cost() - dropped.iter().map(|&t| sd.prob(target, t) * lb).sum::<f64>(),
        weight: 1.0,
    }];
    for &a in &devs {
        let coef: Vec<f64> = active.iter().map(|&t| sd.prob(target, t) - sd.prob(a, t)).collect();
        let shift: f64 = dropped.iter().map(|&t| (sd.prob(target, t) - sd.prob(a, t)) * lb).sum();
        rows.push(Row { a: coef, b: model.target_cost() - model.cost(a) - shift, weight: 1.0 });
    }

    let witness = strict_witness(model, sd)?;
    let x0: Vec<f64> = active.iter().map(|&t| witness[t]).collect();
    let objective = Separable { weights: p_star.clone(), prefs: &model.prefs };
    let problem = Problem {
        objective: &objective,
        rows,
        lower: vec![lb; active.len()],
        upper: vec![ub; active.len()],
        box_weights: pi.clone(),
    };
    let sol = problem.solve(&x0, &opts.barrier)?;

    let mut utilities = vec![lb; nt];
    for (j, &t) in active.iter().enumerate() {
        utilities[t] = sol.x[j];
    }
    let contract = Contract { n: sd.n, utilities };
    let cost = implementation_cost(&contract, &model.prefs, sd)?;
    let slack = check_ic_ir(&contract, model, sd)?;
    let lambda = sol.row_duals[0];
    let kappa: Vec<(usize, f64)> = devs.iter().enumerate().map(|(i, &a)| (a, sol.row_duals[i + 1])).collect();
    let msum = lambda + kappa.iter().map(|k| k.1).sum::<f64>();
    let prefs = &model.prefs;

    let mut stationarity = 0.0f64;
    let mut box_comp = 0.0f64;
    let mut v_star_deviation = 0.0f64;
    let mut resolved = 0usize;
    for (j, &t) in active.iter().enumerate() {
        let v = sol.x[j];
        let ps = p_star[j];
        let (zl, zu) = (sol.lower_duals[j], sol.upper_duals[j]);
        let mut r = ps * prefs.h_prime(v) - lambda * ps - zl + zu;
        let mut arg = lambda;
        for &(a, k) in &kappa {
            r -= k * (ps - sd.prob(a, t));
            // 1 − P_a/P* = 1 − e^{−n L(a)}.
            arg += k * -(sd.log_probs[a][t] - sd.log_probs[target][t]).exp_m1();
        }
        stationarity = stationarity.max(r.abs() / (pi[j] * (1.0 + msum)));
        box_comp = box_comp.max(zl * (v - lb) / pi[j]).max(zu * (ub - v) / pi[j]);
        let v_star = if arg > 0.0 { prefs.h_prime_inv(arg).max(lb) } else { lb };
        let interior = (zl + zu) <= 1e-7 * ps * prefs.h_prime(v);
        let floored = v_star == lb && arg < prefs.h_prime(lb) * (1.0 - 1e-3);
        if interior || floored {
            resolved += 1;
            v_star_deviation = v_star_deviation.max((v - v_star).abs());
        }
    }
    let mut complementarity = (lambda * slack.ir).abs();
    for (&(_, k), &(_, s)) in kappa.iter().zip(&slack.ic) {
        complementarity = complementarity.max((k * s).abs());
    }
    complementarity = complementarity.max(box_comp);
    let primal = (-slack.ir).max(-slack.min_ic()).max(0.0);
    let dual = kappa.iter().map(|k| -k.1).fold(-lambda, f64::max).max(0.0);
    let kkt_residual = stationarity.max(complementarity).max(primal).max(dual);
    let cap_binding = sol.x.iter().any(|&v| v > ub - 1e-6 * (ub - lb));

    Ok(SecondBestSolution {
        n: sd.n,
        contract,
        cost,
        lambda,
        kappa,
        slack,
        stationarity,
        complementarity,
        kkt_residual,
        v_star_deviation,
        resolved_types: resolved,
        active_types: active.len(),
        duality_gap: sol.duality_gap,
        cap_binding,
        polished: sol.polished,
        newton_steps: sol.newton_steps,
        trace: sol.trace,
    })
}

/// Mean payments on the high- and low-score regions at one `n`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ShapeRow {
    pub n: usize,
    pub high_mean: Option<f64>,
    pub low_mean: Option<f64>,
    pub high_error: Option<f64>,
    pub low_error: Option<f64>,
    pub multiplier_sum: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ShapeReport {
    pub rows: Vec<ShapeRow>,
    pub high_target: f64,
    pub low_target: f64,
    /// Both region errors are nonincreasing in `n`.
    pub monotone: bool,
}

impl ShapeReport {
    /// Largest-`n` errors below `tol` and a monotone trend.
    pub fn passes(&self, tol: f64) -> bool {
        let last = self.rows.last().expect("at least three rows");
        self.monotone && matches!((last.high_error, last.low_error), (Some(h), Some(l)) if h < tol && l < tol)
    }
}

/// Region means of optimal contracts across increasing `n`.
///
/// High region: `L(a) > E_a[L(a)] + δ_a` for every cheaper `a`; low region:
/// `L(a) < E_a[L(a)] − δ_a` for some cheaper `a`; `δ_a` is `delta_frac`
/// times the band width `E_{a*}[L(a)] − E_a[L(a)]`. Means are unweighted over types.
pub fn limit_shape(solutions: &[(&SecondBestSolution, &ScoreDistribution)], model: &Model, delta_frac: f64) -> Result<ShapeReport> {
    if solutions.len() < 3 {
        return Err(Error::InsufficientData("the trend needs solutions at three or more sample sizes".into()));
    }
    if solutions.windows(2).any(|w| w[0].0.n >= w[1].0.n) {
        return Err(Error::InsufficientData("sample sizes must increase".into()));
    }
    let minus = model.costs.a_minus();
    let high_target = model.first_best_utility();
    let low_target = model.floor();
    let mut rows = Vec::new();
    for (sol, sd) in solutions {
        let cuts: Vec<(usize, f64, f64)> = minus
            .iter()
            .map(|&a| {
                let (lo, hi) = band(model, sd, a);
                (a, lo, delta_frac * (hi - lo))
            })
            .collect();
        let (mut hs, mut hc, mut ls, mut lc) = (0.0, 0usize, 0.0, 0usize);
        for t in 0..sd.len() {
            let v = sol.contract.utilities[t];
            if cuts.iter().all(|&(a, g, d)| sd.score(t, a) > g + d) {
                hs += v;
                hc += 1;
            }
            if cuts.iter().any(|&(a, g, d)| sd.score(t, a) < g - d) {
                ls += v;
                lc += 1;
            }
        }
        let high_mean = (hc > 0).then(|| hs / hc as f64);
        let low_mean = (lc > 0).then(|| ls / lc as f64);
        rows.push(ShapeRow {
            n: sol.n,
            high_mean,
            low_mean,
            high_error: high_mean.map(|m| (m - high_target).abs()),
            low_error: low_mean.map(|m| (m - low_target).abs()),
            multiplier_sum: sol.multiplier_sum(),
        });
    }
    let nonincreasing = |f: &dyn Fn(&ShapeRow) -> Option<f64>| {
        rows.windows(2).all(|w| match (f(&w[0]), f(&w[1])) {
            (Some(a), Some(b)) => b <= a + 1e-9,
            _ => false,
        })
    };
    let monotone = nonincreasing(&|r| r.high_error) && nonincreasing(&|r| r.low_error);
    Ok(ShapeReport { rows, high_target, low_target, monotone })
}

/// How the best binary contract was found.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BinaryMethod {
    ThresholdSearch,
    UpperSetOracle,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BestBinary {
    pub n: usize,
    pub pass_set: Vec<bool>,
    /// Threshold profile when the optimum came from the threshold search.
    pub thresholds: Option<Vec<(usize, f64)>>,
    pub wages: TwoPoint,
    pub log_gap: f64,
    pub method: BinaryMethod,
    /// Whether the upper-set oracle ran to completion.
    pub oracle_complete: bool,
}

/// Upper-set oracle is attempted up to this many types.
pub const ORACLE_TYPE_CAP: usize = 5000;

/// Evaluate a pass set given per-type log-probabilities; returns log-gap and wages.
fn evaluate_pass_set(model: &Model, sd: &ScoreDistribution, pass: &[bool]) -> Option<(f64, TwoPoint)> {
    let na = model.mt.num_actions();
    let mut p = vec![0.0; na];
    for (a, pa) in p.iter_mut().enumerate() {
        *pa = log_sum_exp(&(0..sd.len()).filter(|&t| pass[t]).map(|t| sd.log_probs[a][t]).collect::<Vec<_>>()).exp();
    }
    let t = model.target();
    let log_q = log_sum_exp(&(0..sd.len()).filter(|&s| !pass[s]).map(|s| sd.log_probs[t][s]).collect::<Vec<_>>());
    p[t] = (-log_q.exp()).ln_1p().exp();
    let tp = optimal_two_point(model, &p, 0.0)?;
    let lg = two_point_log_gap(&model.prefs, model.first_best_utility(), tp.mean, tp.spread, log_q);
    Some((lg, tp))
}

/// Cheapest IC and IR binary contract at this `n`.
pub fn best_binary(model: &Model, sd: &ScoreDistribution) -> Result<BestBinary> {
    let minus = model.costs.a_minus();
    let bands: Vec<(usize, f64, f64)> = minus
        .iter()
        .map(|&a| {
            let (lo, hi) = band(model, sd, a);
            (a, lo, hi)
        })
        .collect();
    let eval_profile = |g: &[f64]| -> f64 {
        let rule = PassRule::new(bands.iter().zip(g).map(|(b, &x)| (b.0, x)).collect());
        let pass: Vec<bool> = (0..sd.len()).map(|t| rule.passes(sd, t)).collect();
        evaluate_pass_set(model, sd, &pass).map_or(f64::INFINITY, |r| r.0)
    };
    let mut best_g: Option<(f64, Vec<f64>)> = None;
    for eps in [0.1, 0.3, 0.5, 0.7, 0.9] {
        let mut g: Vec<f64> = bands.iter().map(|&(_, lo, hi)| lo + eps * (hi - lo)).collect();
        let mut val = eval_profile(&g);
        for _ in 0..10 {
            let before = val;
            for i in 0..g.len() {
                let (_, lo, hi) = bands[i];
                let mut trial = g.clone();
                let (x, fx) = golden_section(
                    |x| {
                        trial[i] = x;
                        eval_profile(&trial)
                    },
                    lo,
                    hi,
                    60,
                );
                if fx < val {
                    g[i] = x;
                    val = fx;
                }
            }
            if !(val < before) {
                break;
            }
        }
        if best_g.as_ref().is_none_or(|b| val < b.0) {
            best_g = Some((val, g));
        }
    }

    let mut best: Option<BestBinary> = None;
    if let Some((val, g)) = best_g.filter(|b| b.0.is_finite()) {
        let thresholds: Vec<(usize, f64)> = bands.iter().zip(&g).map(|(b, &x)| (b.0, x)).collect();
        let rule = PassRule::new(thresholds.clone());
        let pass: Vec<bool> = (0..sd.len()).map(|t| rule.passes(sd, t)).collect();
        let (_, wages) = evaluate_pass_set(model, sd, &pass).expect("feasible profile");
        best = Some(BestBinary {
            n: sd.n,
            pass_set: pass,
            thresholds: Some(thresholds),
            wages,
            log_gap: val,
            method: BinaryMethod::ThresholdSearch,
            oracle_complete: false,
        });
    }

    let mut oracle_complete = false;
    if sd.len() <= ORACLE_TYPE_CAP {
        if let Some((lg, pass, wages, complete)) = upper_set_oracle(model, sd, &minus) {
            oracle_complete = complete;
            if best.as_ref().is_none_or(|b| lg < b.log_gap) {
                best = Some(BestBinary {
                    n: sd.n,
                    pass_set: pass,
                    thresholds: None,
                    wages,
                    log_gap: lg,
                    method: BinaryMethod::UpperSetOracle,
                    oracle_complete: false,
                });
            }
        } else {
            oracle_complete = true;
        }
    }
    let mut b = best.ok_or_else(|| Error::Infeasible(format!("no feasible binary contract at n = {}", sd.n)))?;
    b.oracle_complete = oracle_complete;
    Ok(b)
}

type OracleBest = (f64, Vec<bool>, TwoPoint, bool);

/// Exhaustive search over upper sets of the dominance order on cheaper-action scores.
fn upper_set_oracle(model: &Model, sd: &ScoreDistribution, minus: &[usize]) -> Option<OracleBest> {
    let tol = 1e-12;
    // Collapse types with identical score vectors.
    let key = |t: usize| -> Vec<f64> { minus.iter().map(|&a| sd.score(t, a)).collect() };
    let mut order: Vec<usize> = (0..sd.len()).collect();
    order.sort_by(|&x, &y| {
        let (sx, sy): (f64, f64) = (key(x).iter().sum(), key(y).iter().sum());
        sy.partial_cmp(&sx).expect("finite").then_with(|| key(x).partial_cmp(&key(y)).expect("finite"))
    });
    let mut groups: Vec<(Vec<f64>, Vec<usize>)> = Vec::new();
    for t in order {
        let k = key(t);
        match groups.iter_mut().find(|g| g.0.iter().zip(&k).all(|(a, b)| (a - b).abs() <= tol)) {
            Some(g) => g.1.push(t),
            None => groups.push((k, vec![t])),
        }
    }
    let na = model.mt.num_actions();
    let target = model.target();
    let ng = groups.len();
    // Group log-probabilities per action.
    let glp: Vec<Vec<f64>> = (0..na)
        .map(|a| groups.iter().map(|g| log_sum_exp(&g.1.iter().map(|&t| sd.log_probs[a][t]).collect::<Vec<_>>())).collect())
        .collect();
    let fb = model.first_best_utility();
    let evaluate = |included: &[bool]| -> Option<(f64, TwoPoint)> {
        let mut p = vec![0.0; na];
        for (a, pa) in p.iter_mut().enumerate() {
            *pa = log_sum_exp(&(0..ng).filter(|&g| included[g]).map(|g| glp[a][g]).collect::<Vec<_>>()).exp();
        }
        let log_q = log_sum_exp(&(0..ng).filter(|&g| !included[g]).map(|g| glp[target][g]).collect::<Vec<_>>());
        p[target] = (-log_q.exp()).ln_1p().exp();
        let tp = optimal_two_point(model, &p, 0.0)?;
        Some((two_point_log_gap(&model.prefs, fb, tp.mean, tp.spread, log_q), tp))
    };
    let expand = |included: &[bool]| -> Vec<bool> {
        let mut pass = vec![false; sd.len()];
        for (g, grp) in groups.iter().enumerate() {
            if included[g] {
                grp.1.iter().for_each(|&t| pass[t] = true);
            }
        }
        pass
    };
    let mut best: Option<(f64, Vec<bool>, TwoPoint)> = None;
    let consider = |included: &[bool], best: &mut Option<(f64, Vec<bool>, TwoPoint)>| {
        if let Some((lg, tp)) = evaluate(included) {
            if best.as_ref().is_none_or(|b| lg < b.0) {
                *best = Some((lg, expand(included), tp));
            }
        }
    };
    if minus.len() == 1 {
        // Totally ordered: upper sets are prefixes.
        let mut inc = vec![false; ng];
        for g in 0..ng {
            inc[g] = true;
            consider(&inc, &mut best);
        }
        return best.map(|(a, b, c)| (a, b, c, true));
    }
    // dominators[g]: groups weakly above g in every coordinate.
    let dominators: Vec<Vec<usize>> = (0..ng)
        .map(|g| (0..g).filter(|&h| groups[h].0.iter().zip(&groups[g].0).all(|(a, b)| *a >= *b - tol)).collect())
        .collect();
    let budget = 50_000_000usize / ng.max(1);
    let mut visited = 0usize;
    let mut inc = vec![false; ng];
    fn recurse(
        g: usize,
        inc: &mut Vec<bool>,
        dominators: &[Vec<usize>],
        visited: &mut usize,
        budget: usize,
        consider: &mut dyn FnMut(&[bool]),
    ) -> bool {
        if *visited >= budget {
            return false;
        }
        if g == inc.len() {
            *visited += 1;
            consider(inc);
            return true;
        }
        let mut ok = true;
        if dominators[g].iter().all(|&h| inc[h]) {
            inc[g] = true;
            ok &= recurse(g + 1, inc, dominators, visited, budget, consider);
            inc[g] = false;
        }
        ok && recurse(g + 1, inc, dominators, visited, budget, consider)
    }
    let complete = recurse(0, &mut inc, &dominators, &mut visited, budget, &mut |s: &[bool]| consider(s, &mut best));
    best.map(|(a, b, c)| (a, b, c, complete))
}

/// Optimal linear schedule.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LinearSolution {
    pub n: usize,
    pub schedule: LinearSchedule,
    pub cost: f64,
    pub slack: IcIrSlack,
    /// The wage floor binds at the optimum.
    pub floor_active: bool,
    /// Only a local optimum is certified.
    pub local_optimum: bool,
    pub seeds: Vec<u64>,
}

struct UtilityLinearObjective<'a> {
    freqs: Vec<Vec<f64>>,
    weights: Vec<f64>,
    prefs: &'a UtilitySpec,
}

impl Objective for UtilityLinearObjective<'_> {
    fn value(&self, x: &[f64]) -> f64 {
        self.freqs.iter().zip(&self.weights).map(|(nu, w)| w * self.prefs.h(dot(nu, x))).sum()
    }
    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; x.len()];
        for (nu, w) in self.freqs.iter().zip(&self.weights) {
            let d = w * self.prefs.h_prime(dot(nu, x));
            for (gi, ni) in g.iter_mut().zip(nu) {
                *gi += d * ni;
            }
        }
        g
    }
    fn hessian(&self, x: &[f64]) -> Hessian {
        let k = x.len();
        let mut h = nalgebra::DMatrix::<f64>::zeros(k, k);
        for (nu, w) in self.freqs.iter().zip(&self.weights) {
            let d = w * self.prefs.h_second(dot(nu, x));
            for i in 0..k {
                for j in 0..k {
                    h[(i, j)] += d * nu[i] * nu[j];
                }
            }
        }
        Hessian::Dense(h)
    }
}

/// Base seed for the wage-linear multistart.
pub const LINEAR_SEED: u64 = 0x5eed;

/// Optimal linear schedule at sample size `sd.n`.
pub fn solve_linear(model: &Model, sd: &ScoreDistribution, kind: LinearKind) -> Result<LinearSolution> {
    if model.mt.num_signals() > 4 {
        return Err(Error::UnsupportedAlphabet("linear schedules support at most four signals".into()));
    }
    match kind {
        LinearKind::UtilityLinear => utility_linear(model, sd),
        LinearKind::WageLinear => wage_linear(model, sd),
    }
}

fn linear_rows(model: &Model) -> Vec<Row> {
    let star = model.mt.dist(model.target());
    let mut rows = vec![Row { a: star.to_vec(), b: model.target_cost(), weight: 1.0 }];
    for a in model.costs.deviations() {
        rows.push(Row {
            a: star.iter().zip(model.mt.dist(a)).map(|(s, p)| s - p).collect(),
            b: model.target_cost() - model.cost(a),
            weight: 1.0,
        });
    }
    rows
}

fn utility_linear(model: &Model, sd: &ScoreDistribution) -> Result<LinearSolution> {
    let k = model.mt.num_signals();
    let (lb, ub) = (model.floor(), model.cap());
    let rows = linear_rows(model);
    let star = model.mt.dist(model.target());
    // Witness: spread along a score direction, shifted to clear IR and the floor.
    let mut dirs: Vec<Vec<f64>> = model.costs.a_minus().iter().map(|&a| score_terms(&model.mt, a)).collect::<Result<_>>()?;
    let sum: Vec<f64> = (0..k).map(|x| dirs.iter().map(|d| d[x]).sum()).collect();
    dirs.push(sum);
    let objective = UtilityLinearObjective {
        freqs: (0..sd.len()).map(|t| (0..k).map(|x| sd.freq(t, x)).collect()).collect(),
        weights: (0..sd.len()).map(|t| sd.prob(model.target(), t)).collect(),
        prefs: &model.prefs,
    };
    let mut best: Option<(f64, Vec<f64>)> = None;
    for d in dirs {
        let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
        let mut ok = true;
        for r in &rows[1..] {
            let den = dot(&r.a, &d);
            if r.b > 0.0 {
                if den <= 0.0 {
                    ok = false;
                    break;
                }
                lo = lo.max(r.b / den);
            } else if den < 0.0 {
                hi = hi.min(r.b / den);
            }
        }
        if !ok || lo >= hi {
            continue;
        }
        let s = (lo * 1.01).min(0.5 * (lo + hi));
        let dmin = d.iter().copied().fold(f64::INFINITY, f64::min);
        let m = (model.target_cost() - s * dot(&d, star)).max(lb - s * dmin) + 1e-2 * (1.0 + s);
        let theta: Vec<f64> = d.iter().map(|v| m + s * v).collect();
        if theta.iter().any(|&v| v >= ub) || !rows.iter().all(|r| r.slack(&theta) > 0.0) {
            continue;
        }
        let c = objective.value(&theta);
        if best.as_ref().is_none_or(|b| c < b.0) {
            best = Some((c, theta));
        }
    }
    let (_, theta0) = best.ok_or_else(|| Error::Infeasible("no strictly feasible utility-linear schedule".into()))?;
    let problem = Problem { objective: &objective, rows, lower: vec![lb; k], upper: vec![ub; k], box_weights: vec![1.0 / k as f64; k] };
    let sol = problem.solve(&theta0, &Options { gap_tol: 1e-12, ..Options::default() })?;
    let schedule = LinearSchedule { kind: LinearKind::UtilityLinear, coefficients: sol.x.clone() };
    let contract = schedule.to_contract(&model.prefs, sd);
    let cost = implementation_cost(&contract, &model.prefs, sd)?;
    let slack = check_ic_ir(&contract, model, sd)?;
    let floor_active = sol.x.iter().any(|&v| v - lb < 1e-6 * (1.0 + lb.abs()));
    Ok(LinearSolution { n: sd.n, schedule, cost, slack, floor_active, local_optimum: false, seeds: vec![] })
}

fn wage_linear(model: &Model, sd: &ScoreDistribution) -> Result<LinearSolution> {
    let k = model.mt.num_signals();
    let prefs = &model.prefs;
    let wbar = prefs.wage_floor;
    let star = model.mt.dist(model.target()).to_vec();
    let devs = model.costs.deviations();
    let target = model.target();
    let freqs: Vec<Vec<f64>> = (0..sd.len()).map(|t| (0..k).map(|x| sd.freq(t, x)).collect()).collect();
    let probs: Vec<Vec<f64>> = (0..model.mt.num_actions()).map(|a| (0..sd.len()).map(|t| sd.prob(a, t)).collect()).collect();
    // Constraint values g_i(b) ≥ 0 with gradients.
    let constraints = |b: &[f64]| -> Vec<(f64, Vec<f64>)> {
        let eu = |a: usize| -> (f64, Vec<f64>) {
            let mut v = 0.0;
            let mut g = vec![0.0; k];
            for (nu, p) in freqs.iter().zip(&probs[a]) {
                let w = dot(nu, b);
                v += p * prefs.u(w);
                let d = p * prefs.u_prime(w);
                for x in 0..k {
                    g[x] += d * nu[x];
                }
            }
            (v, g)
        };
        let (vs, gs) = eu(target);
        let mut out = vec![(vs - model.target_cost(), gs.clone())];
        for &a in &devs {
            let (va, ga) = eu(a);
            out.push((vs - model.target_cost() - va + model.cost(a), gs.iter().zip(&ga).map(|(x, y)| x - y).collect()));
        }
        out
    };
    // Augmented Lagrangian for g_i ≥ 0: f + Σ (max(0, λ_i − ρ g_i)² − λ_i²) / 2ρ.
    let augmented = |b: &[f64], lam: &[f64], rho: f64| -> (f64, Vec<f64>) {
        let mut f = dot(&star, b);
        let mut g = star.clone();
        for ((c, gc), &l) in constraints(b).into_iter().zip(lam) {
            let m = (l - rho * c).max(0.0);
            f += (m * m - l * l) / (2.0 * rho);
            for x in 0..k {
                g[x] -= m * gc[x];
            }
        }
        (f, g)
    };
    let scale = prefs.h(model.target_cost()).abs().max(1.0);
    let seeds: Vec<u64> = (0..20).map(|s| LINEAR_SEED + s).collect();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for &seed in &seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b: Vec<f64> = (0..k).map(|_| wbar + rng.gen::<f64>() * 4.0 * scale).collect();
        let mut lam = vec![0.0; devs.len() + 1];
        let mut rho = 10.0;
        let mut prev = f64::INFINITY;
        let mut prev_cost = f64::INFINITY;
        let mut worst = f64::NEG_INFINITY;
        for _ in 0..60 {
            b = projected_bfgs(&|x: &[f64]| augmented(x, &lam, rho), b, wbar, 500);
            let cs = constraints(&b);
            worst = cs.iter().map(|c| c.0).fold(f64::INFINITY, f64::min);
            for (l, c) in lam.iter_mut().zip(&cs) {
                *l = (*l - rho * c.0).max(0.0);
            }
            let cost = dot(&star, &b);
            if worst >= -1e-10 && (cost - prev_cost).abs() <= 1e-12 * cost.abs() {
                break;
            }
            prev_cost = cost;
            if -worst > 0.25 * prev && rho < 1e8 {
                rho *= 5.0;
            }
            prev = -worst;
        }
        if worst >= -1e-9 {
            let c = dot(&star, &b);
            log::debug!("wage-linear seed {seed}: cost {c}");
            if best.as_ref().is_none_or(|bb| c < bb.0) {
                best = Some((c, b));
            }
        }
    }
    let (cost, b) = best.ok_or_else(|| Error::Infeasible("every wage-linear start ended infeasible".into()))?;
    let schedule = LinearSchedule { kind: LinearKind::WageLinear, coefficients: b.clone() };
    let slack = check_ic_ir(&schedule.to_contract(prefs, sd), model, sd)?;
    let floor_active = b.iter().any(|&x| x - wbar < 1e-6 * (1.0 + wbar.abs()));
    Ok(LinearSolution { n: sd.n, schedule, cost, slack, floor_active, local_optimum: true, seeds })
}

type ValueAndGradient<'a> = dyn Fn(&[f64]) -> (f64, Vec<f64>) + 'a;

/// Quasi-Newton descent with projection onto `x ≥ lower`.
fn projected_bfgs(f: &ValueAndGradient, x0: Vec<f64>, lower: f64, iters: usize) -> Vec<f64> {
    let k = x0.len();
    let mut x: Vec<f64> = x0.into_iter().map(|v| v.max(lower)).collect();
    let (mut fx, mut g) = f(&x);
    let mut hinv = nalgebra::DMatrix::<f64>::identity(k, k);
    for _ in 0..iters {
        // Freeze coordinates pinned at the bound with an outward gradient.
        let free: Vec<bool> = (0..k).map(|i| !(x[i] <= lower && g[i] > 0.0)).collect();
        let gv = nalgebra::DVector::from_iterator(k, (0..k).map(|i| if free[i] { g[i] } else { 0.0 }));
        if gv.norm() < 1e-12 * (1.0 + fx.abs()) {
            break;
        }
        let mut d: Vec<f64> = (-(&hinv * &gv)).iter().copied().collect();
        for i in 0..k {
            if !free[i] {
                d[i] = 0.0;
            }
        }
        if dot(&d, gv.as_slice()) >= 0.0 {
            d = gv.iter().map(|v| -v).collect();
            hinv = nalgebra::DMatrix::identity(k, k);
        }
        let mut alpha = 1.0;
        let mut moved = false;
        for _ in 0..60 {
            let xn: Vec<f64> = x.iter().zip(&d).map(|(a, b)| (a + alpha * b).max(lower)).collect();
            let (fn_, gn) = f(&xn);
            let step: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
            if fn_ <= fx + 1e-4 * dot(&g, &step) {
                let s = nalgebra::DVector::from_vec(step);
                let y = nalgebra::DVector::from_iterator(k, gn.iter().zip(&g).map(|(a, b)| a - b));
                let sy = s.dot(&y);
                if sy > 1e-14 {
                    let rho = 1.0 / sy;
                    let i = nalgebra::DMatrix::<f64>::identity(k, k);
                    let left = &i - rho * &s * y.transpose();
                    let right = &i - rho * &y * s.transpose();
                    hinv = &left * &hinv * &right + rho * &s * s.transpose();
                }
                x = xn;
                fx = fn_;
                g = gn;
                moved = true;
                break;
            }
            alpha *= 0.5;
        }
        if !moved {
            break;
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contracts::build_binary_test;
    use crate::model::figure_one;
    use crate::score_dist::{enumerate_types, DEFAULT_TYPE_CAP};

    #[test]
    fn n_one_second_best_is_two_point() {
        let m = figure_one();
        let sd = enumerate_types(&m.mt, 1, DEFAULT_TYPE_CAP).unwrap();
        let sb = solve_second_best(&m, &sd, &SecondBestOptions::default()).unwrap();
        let direct = 0.7 * 3.5f64.exp() + 0.3 * (-1.5f64).exp();
        assert!((sb.cost - direct).abs() < 1e-7 * direct, "{} vs {direct}", sb.cost);
        assert!(sb.kkt_residual < 1e-6, "{sb:?}");
    }

    #[test]
    fn second_best_below_binary_and_diagnostics() {
        let m = figure_one();
        for n in [5, 20, 60] {
            let sd = enumerate_types(&m.mt, n, DEFAULT_TYPE_CAP).unwrap();
            let sb = solve_second_best(&m, &sd, &SecondBestOptions::default()).unwrap();
            let bb = best_binary(&m, &sd).unwrap();
            assert!(sb.cost <= bb.wages.cost * (1.0 + 1e-9));
            assert!(sb.cost >= m.first_best_cost() * (1.0 - 1e-12));
            assert!(sb.kkt_residual < 1e-6, "n={n}: {} {} {}", sb.stationarity, sb.complementarity, sb.kkt_residual);
            assert!(sb.v_star_deviation < 1e-6, "n={n}: {}", sb.v_star_deviation);
            assert!(!sb.cap_binding);
        }
    }

    #[test]
    fn best_binary_n_one_matches_formula() {
        let m = figure_one();
        let sd = enumerate_types(&m.mt, 1, DEFAULT_TYPE_CAP).unwrap();
        let bb = best_binary(&m, &sd).unwrap();
        let bt = build_binary_test(&m, &sd, &[(0, 0.0)]).unwrap();
        assert!((bb.wages.cost - bt.cost(&m.prefs)).abs() < 1e-9);
        assert!(bb.oracle_complete);
    }

    #[test]
    fn utility_linear_n_one() {
        let m = figure_one();
        let sd = enumerate_types(&m.mt, 1, DEFAULT_TYPE_CAP).unwrap();
        let ls = solve_linear(&m, &sd, LinearKind::UtilityLinear).unwrap();
        let direct = 0.7 * 3.5f64.exp() + 0.3 * (-1.5f64).exp();
        assert!((ls.cost - direct).abs() < 1e-6 * direct, "{}", ls.cost);
    }

    #[test]
    fn utility_linear_closed_form() {
        // Both constraints bind: v = 5ν(high) − 1.5, cost e^{−1.5}(0.3 + 0.7e^{5/n})^n.
        let m = figure_one();
        for n in [5, 40] {
            let sd = enumerate_types(&m.mt, n, DEFAULT_TYPE_CAP).unwrap();
            let ls = solve_linear(&m, &sd, LinearKind::UtilityLinear).unwrap();
            let expect = (-1.5f64).exp() * (0.3 + 0.7 * (5.0 / n as f64).exp()).powi(n as i32);
            assert!((ls.cost - expect).abs() < 1e-7 * expect, "n={n}: {} vs {expect}", ls.cost);
            assert!(!ls.floor_active);
        }
    }

    #[test]
    fn wage_linear_is_feasible_and_above_second_best() {
        let m = figure_one();
        let sd = enumerate_types(&m.mt, 6, DEFAULT_TYPE_CAP).unwrap();
        let wl = solve_linear(&m, &sd, LinearKind::WageLinear).unwrap();
        let sb = solve_second_best(&m, &sd, &SecondBestOptions::default()).unwrap();
        assert!(wl.local_optimum && wl.seeds.len() == 20);
        assert!(wl.slack.ir > -1e-8 && wl.slack.min_ic() > -1e-8, "{:?} {}", wl.slack, wl.cost);
        assert!(wl.cost >= sb.cost * (1.0 - 1e-6));
    }

    #[test]
    fn raw_sequences_match_type_classes() {
        let m = figure_one();
        for n in 1..=6 {
            let sd = enumerate_types(&m.mt, n, DEFAULT_TYPE_CAP).unwrap();
            let raw = crate::score_dist::raw_sequences(&m.mt, n, DEFAULT_TYPE_CAP).unwrap();
            assert_eq!(raw.len(), 1 << n);
            let a = solve_second_best(&m, &sd, &SecondBestOptions::default()).unwrap();
            let b = solve_second_best(&m, &raw, &SecondBestOptions::default()).unwrap();
            assert!((a.cost - b.cost).abs() <= 1e-8 * a.cost, "n={n}: {} vs {}", a.cost, b.cost);
        }
    }

    #[test]
    fn large_n_is_polished() {
        let m = figure_one();
        let sd = enumerate_types(&m.mt, 400, DEFAULT_TYPE_CAP).unwrap();
        let sb = solve_second_best(&m, &sd, &SecondBestOptions::default()).unwrap();
        assert!(sb.polished && sb.kkt_residual < 1e-6, "{} {}", sb.stationarity, sb.complementarity);
        let bb = best_binary(&m, &sd).unwrap();
        assert!(sb.cost <= bb.wages.cost);
    }

    #[test]
    fn shape_needs_three_sizes() {
        let m = figure_one();
        let sd = enumerate_types(&m.mt, 3, DEFAULT_TYPE_CAP).unwrap();
        let sb = solve_second_best(&m, &sd, &SecondBestOptions::default()).unwrap();
        assert!(limit_shape(&[(&sb, &sd)], &m, 0.1).is_err());
    }
}
