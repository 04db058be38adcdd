//! Monitoring technologies and the divergences that govern how fast
//! contracts built on them approach the first best.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{bisect_increasing, log_sum_exp};
use crate::preferences::{CostFunction, Regime};

/// A finite signal alphabet with one strictly positive distribution per action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonitoringTechnology {
    signals: Vec<String>,
    actions: Vec<String>,
    dists: Vec<Vec<f64>>,
    target: usize,
}

impl MonitoringTechnology {
    pub fn new(signals: Vec<String>, actions: Vec<String>, dists: Vec<Vec<f64>>, target: usize) -> Result<Self> {
        if signals.len() < 2 {
            return Err(Error::UnsupportedAlphabet("at least two signals are required".into()));
        }
        if actions.len() != dists.len() {
            return Err(Error::LengthMismatch(format!("{} actions but {} distributions", actions.len(), dists.len())));
        }
        if actions.len() < 2 {
            return Err(Error::LengthMismatch("at least two actions are required".into()));
        }
        if target >= actions.len() {
            return Err(Error::LengthMismatch(format!("target index {target} out of range")));
        }
        for (a, d) in dists.iter().enumerate() {
            let bad = |reason: String| Error::InvalidDistribution { action: actions[a].clone(), reason };
            if d.len() != signals.len() {
                return Err(bad(format!("{} entries for {} signals", d.len(), signals.len())));
            }
            if let Some(x) = d.iter().position(|p| !(p.is_finite() && *p > 0.0)) {
                return Err(bad(format!("entry {x} = {} is not strictly positive", d[x])));
            }
            let s: f64 = d.iter().sum();
            if (s - 1.0).abs() > 1e-12 {
                return Err(bad(format!("sums to {s}")));
            }
        }
        for a in 0..dists.len() {
            for b in a + 1..dists.len() {
                let gap = dists[a].iter().zip(&dists[b]).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
                if gap <= 1e-12 {
                    return Err(Error::NotIdentified(actions[a].clone(), actions[b].clone()));
                }
            }
        }
        Ok(Self { signals, actions, dists, target })
    }

    /// Unlabeled constructor: signals `x0, x1, …`, actions `0, 1, …`.
    pub fn from_dists(dists: Vec<Vec<f64>>, target: usize) -> Result<Self> {
        let k = dists.first().map_or(0, |d| d.len());
        let signals = (0..k).map(|x| format!("x{x}")).collect();
        let actions = (0..dists.len()).map(|a| a.to_string()).collect();
        Self::new(signals, actions, dists, target)
    }

    pub fn signals(&self) -> &[String] {
        &self.signals
    }

    pub fn actions(&self) -> &[String] {
        &self.actions
    }

    pub fn target(&self) -> usize {
        self.target
    }

    pub fn num_signals(&self) -> usize {
        self.signals.len()
    }

    pub fn num_actions(&self) -> usize {
        self.actions.len()
    }

    pub fn dist(&self, a: usize) -> &[f64] {
        &self.dists[a]
    }

    pub fn action_index(&self, label: &str) -> Result<usize> {
        self.actions.iter().position(|s| s == label).ok_or_else(|| Error::UnknownLabel(label.into()))
    }

    pub fn signal_index(&self, label: &str) -> Result<usize> {
        self.signals.iter().position(|s| s == label).ok_or_else(|| Error::UnknownLabel(label.into()))
    }
}

/// Kullback–Leibler divergence `Σ p ln(p/q)` with `0 ln 0 = 0`.
pub fn kl(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::LengthMismatch(format!("{} vs {}", p.len(), q.len())));
    }
    let mut s = 0.0;
    for (x, (&a, &b)) in p.iter().zip(q).enumerate() {
        if a > 0.0 {
            if b <= 0.0 {
                return Err(Error::AbsoluteContinuity(x));
            }
            s += a * (a / b).ln();
        }
    }
    Ok(s.max(0.0))
}

fn check_mutual(p: &[f64], q: &[f64]) -> Result<()> {
    if p.len() != q.len() {
        return Err(Error::LengthMismatch(format!("{} vs {}", p.len(), q.len())));
    }
    for (x, (&a, &b)) in p.iter().zip(q).enumerate() {
        if (a > 0.0) != (b > 0.0) {
            return Err(Error::AbsoluteContinuity(x));
        }
    }
    Ok(())
}

/// Chernoff information with its minimizing exponent `λ*`.
pub fn chernoff_with_lambda(p: &[f64], q: &[f64]) -> Result<(f64, f64)> {
    check_mutual(p, q)?;
    let idx: Vec<usize> = (0..p.len()).filter(|&x| p[x] > 0.0).collect();
    let lp: Vec<f64> = idx.iter().map(|&x| p[x].ln()).collect();
    let lq: Vec<f64> = idx.iter().map(|&x| q[x].ln()).collect();
    let log_mix = |lam: f64| -> Vec<f64> { lp.iter().zip(&lq).map(|(a, b)| lam * a + (1.0 - lam) * b).collect() };
    let f = |lam: f64| log_sum_exp(&log_mix(lam));
    // F′(λ) = E_{w_λ}[ln p/q], nondecreasing.
    let fprime = |lam: f64| {
        let lw = log_mix(lam);
        let z = log_sum_exp(&lw);
        lw.iter().zip(lp.iter().zip(&lq)).map(|(w, (a, b))| (w - z).exp() * (a - b)).sum::<f64>()
    };
    let lam = if fprime(0.0) >= 0.0 {
        0.0
    } else if fprime(1.0) <= 0.0 {
        1.0
    } else {
        bisect_increasing(fprime, 0.0, 1.0, 1e-15)
    };
    Ok(((-f(lam)).max(0.0), lam))
}

/// Chernoff information `-min_{λ∈[0,1]} ln Σ p^λ q^{1-λ}`.
pub fn chernoff(p: &[f64], q: &[f64]) -> Result<f64> {
    chernoff_with_lambda(p, q).map(|r| r.0)
}

/// Per-signal log-likelihood terms `ln(μ*(x)/μ_{a′}(x))`.
pub fn score_terms(mt: &MonitoringTechnology, a_dev: usize) -> Result<Vec<f64>> {
    if a_dev == mt.target {
        return Err(Error::DegenerateScore);
    }
    let t = mt.dist(mt.target);
    Ok(t.iter().zip(mt.dist(a_dev)).map(|(s, d)| (s / d).ln()).collect())
}

/// `E_a[L(a′)]`: expected score against `a′` when `a` is played.
pub fn mean_score(mt: &MonitoringTechnology, a: usize, a_dev: usize) -> Result<f64> {
    let t = score_terms(mt, a_dev)?;
    Ok(mt.dist(a).iter().zip(&t).map(|(p, s)| p * s).sum())
}

/// Cramér rate function `I_{a,a′}` of the single-signal score against `a′` under `a`.
#[derive(Debug, Clone, PartialEq)]
pub struct RateFunction {
    pub action: usize,
    pub deviation: usize,
    terms: Vec<f64>,
    log_weights: Vec<f64>,
    /// `E_a[term]`.
    pub mean: f64,
    pub min_term: f64,
    pub max_term: f64,
    edge_min: f64,
    edge_max: f64,
}

const LAMBDA_BRACKET: f64 = 50.0;

impl RateFunction {
    fn log_mgf(&self, lam: f64) -> f64 {
        let v: Vec<f64> = self.log_weights.iter().zip(&self.terms).map(|(w, s)| w + lam * s).collect();
        log_sum_exp(&v)
    }

    fn mgf_slope(&self, lam: f64) -> f64 {
        let v: Vec<f64> = self.log_weights.iter().zip(&self.terms).map(|(w, s)| w + lam * s).collect();
        let z = log_sum_exp(&v);
        v.iter().zip(&self.terms).map(|(w, s)| (w - z).exp() * s).sum()
    }

    /// Maximizing `λ` for the Legendre transform at `ℓ`.
    pub fn argmax_lambda(&self, ell: f64) -> f64 {
        // Tilting by `λ·span = ±LAMBDA_BRACKET` puts all but e^-50 of the mass on an edge term.
        let span = self.max_term - self.min_term;
        let bracket = LAMBDA_BRACKET / span.max(f64::MIN_POSITIVE);
        bisect_increasing(|lam| self.mgf_slope(lam) - ell, -bracket, bracket, 1e-12 * span.max(1e-300))
    }

    /// `sup_λ (λℓ - ln E_a[e^{λ term}])`; `+inf` outside `[min term, max term]`.
    pub fn eval(&self, ell: f64) -> f64 {
        let tol = 1e-12 * (1.0 + self.max_term.abs().max(self.min_term.abs()));
        if ell > self.max_term + tol || ell < self.min_term - tol {
            return f64::INFINITY;
        }
        if (self.max_term - self.min_term).abs() <= tol {
            return 0.0;
        }
        if ell >= self.max_term - tol {
            return self.edge_max;
        }
        if ell <= self.min_term + tol {
            return self.edge_min;
        }
        let lam = self.argmax_lambda(ell);
        (lam * ell - self.log_mgf(lam)).max(0.0)
    }
}

/// Build `I_{a,a′}` for deviation `a′ ≠ a*`.
pub fn cramer_rate(mt: &MonitoringTechnology, a: usize, a_dev: usize) -> Result<RateFunction> {
    let terms = score_terms(mt, a_dev)?;
    let w = mt.dist(a);
    let log_weights: Vec<f64> = w.iter().map(|p| p.ln()).collect();
    let mean = w.iter().zip(&terms).map(|(p, s)| p * s).sum();
    let max_term = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min_term = terms.iter().copied().fold(f64::INFINITY, f64::min);
    let mass = |v: f64| -> f64 {
        terms.iter().zip(w).filter(|(s, _)| (**s - v).abs() <= 1e-13 * (1.0 + v.abs())).map(|(_, p)| p).sum()
    };
    let edge_max = -mass(max_term).ln();
    let edge_min = -mass(min_term).ln();
    Ok(RateFunction { action: a, deviation: a_dev, terms, log_weights, mean, min_term, max_term, edge_min, edge_max })
}

/// Theoretical exponential rate of convergence to the first best.
pub fn theoretical_rate(mt: &MonitoringTechnology, costs: &CostFunction, regime: Regime) -> Result<f64> {
    if costs.costs.len() != mt.num_actions() || costs.target != mt.target {
        return Err(Error::LengthMismatch("costs and technology disagree on actions or target".into()));
    }
    let star = mt.dist(mt.target);
    let minus = costs.a_minus();
    if minus.is_empty() {
        return Err(Error::Assumption("no action is cheaper than the target".into()));
    }
    match regime {
        Regime::Baseline => {
            let mut best = f64::INFINITY;
            for a in minus {
                best = best.min(kl(mt.dist(a), star)?);
            }
            Ok(best)
        }
        Regime::LimitedLiability => {
            let a_hat = costs.cheapest()?;
            let mut best = chernoff(mt.dist(a_hat), star)?;
            for a in minus.into_iter().filter(|&a| a != a_hat) {
                best = best.min(kl(mt.dist(a), star)?);
            }
            Ok(best)
        }
    }
}

/// Which of two technologies is more informative in the limit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Preference {
    First,
    Second,
    Tie,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Ranking {
    pub preferred: Preference,
    pub index_first: f64,
    pub index_second: f64,
}

/// Compare `min_{a∈A⁻} KL(μ_a, μ*)` across two technologies sharing actions.
pub fn rank_monitoring(mt1: &MonitoringTechnology, mt2: &MonitoringTechnology, a_minus: &[usize]) -> Result<Ranking> {
    if mt1.actions != mt2.actions || mt1.target != mt2.target {
        return Err(Error::LengthMismatch("technologies must share action labels and target".into()));
    }
    if a_minus.is_empty() || a_minus.iter().any(|&a| a >= mt1.num_actions() || a == mt1.target) {
        return Err(Error::Assumption("A⁻ must be a nonempty set of non-target actions".into()));
    }
    let index = |mt: &MonitoringTechnology| -> Result<f64> {
        let mut best = f64::INFINITY;
        for &a in a_minus {
            best = best.min(kl(mt.dist(a), mt.dist(mt.target))?);
        }
        Ok(best)
    };
    let (i1, i2) = (index(mt1)?, index(mt2)?);
    let preferred = if (i1 - i2).abs() <= 1e-12 {
        Preference::Tie
    } else {
        match i1.partial_cmp(&i2) {
            Some(Ordering::Greater) => Preference::First,
            _ => Preference::Second,
        }
    };
    Ok(Ranking { preferred, index_first: i1, index_second: i2 })
}

/// Rate for Gaussian signals `x = a + noise` in the vanishing-noise limit.
///
/// The score constraint is affine in `x`, so its unique solution `x*` fixes the value.
pub fn gaussian_rate(a: f64, a_dev: f64, a_star: f64, ell: f64) -> Result<f64> {
    if a_dev == a_star {
        return Err(Error::DegenerateScore);
    }
    let x = ell / (a_star - a_dev) + 0.5 * (a_dev + a_star);
    Ok(0.5 * (x - a) * (x - a))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fig1() -> MonitoringTechnology {
        MonitoringTechnology::from_dists(vec![vec![0.7, 0.3], vec![0.3, 0.7]], 1).unwrap()
    }

    #[test]
    fn kl_two_term_sum() {
        let direct = 0.7 * (0.7f64 / 0.3).ln() + 0.3 * (0.3f64 / 0.7).ln();
        let v = kl(&[0.7, 0.3], &[0.3, 0.7]).unwrap();
        assert!((v - direct).abs() < 1e-15);
        assert!((v - 0.4 * (7.0f64 / 3.0).ln()).abs() < 1e-15);
        assert_eq!(kl(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
    }

    #[test]
    fn kl_support_violation() {
        assert!(matches!(kl(&[0.5, 0.5], &[1.0, 0.0]), Err(Error::AbsoluteContinuity(1))));
        assert_eq!(kl(&[1.0, 0.0], &[0.5, 0.5]).unwrap(), 2f64.ln());
    }

    #[test]
    fn chernoff_symmetric_pair() {
        let (c, lam) = chernoff_with_lambda(&[0.7, 0.3], &[0.3, 0.7]).unwrap();
        // Dense λ grid oracle.
        let grid = (0..=100_000)
            .map(|k| {
                let l = k as f64 / 100_000.0;
                -(0.7f64.powf(l) * 0.3f64.powf(1.0 - l) + 0.3f64.powf(l) * 0.7f64.powf(1.0 - l)).ln()
            })
            .fold(f64::NEG_INFINITY, f64::max);
        assert!((c - grid).abs() < 1e-10);
        assert!((lam - 0.5).abs() < 1e-9);
        assert!((c + (2.0 * 0.21f64.sqrt()).ln()).abs() < 1e-14);
        assert!((c - 0.0872).abs() < 1e-4);
        assert_eq!(chernoff(&[0.2, 0.8], &[0.2, 0.8]).unwrap(), 0.0);
    }

    #[test]
    fn score_terms_and_means() {
        let mt = fig1();
        let t = score_terms(&mt, 0).unwrap();
        assert!((t[0] - (3.0f64 / 7.0).ln()).abs() < 1e-15);
        assert!((t[1] - (7.0f64 / 3.0).ln()).abs() < 1e-15);
        let k = kl(mt.dist(0), mt.dist(1)).unwrap();
        assert!((mean_score(&mt, 0, 0).unwrap() + k).abs() < 1e-12);
        assert!(matches!(score_terms(&mt, 1), Err(Error::DegenerateScore)));
    }

    #[test]
    fn cramer_identities_fig1() {
        let mt = fig1();
        let r = cramer_rate(&mt, 1, 0).unwrap();
        let kl01 = kl(mt.dist(0), mt.dist(1)).unwrap();
        assert!((r.eval(-kl01) - kl01).abs() < 1e-8);
        assert!((r.eval(0.0) - chernoff(mt.dist(0), mt.dist(1)).unwrap()).abs() < 1e-8);
        assert!(r.eval(r.mean).abs() < 1e-12);
        assert_eq!(r.eval(r.max_term + 1.0), f64::INFINITY);
        assert!((r.eval(r.max_term) + 0.7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn theoretical_rates() {
        let mt = fig1();
        let costs = CostFunction::new(vec![0.0, 2.0], 1).unwrap();
        let b = theoretical_rate(&mt, &costs, Regime::Baseline).unwrap();
        assert!((b - 0.4 * (7.0f64 / 3.0).ln()).abs() < 1e-12);
        let l = theoretical_rate(&mt, &costs, Regime::LimitedLiability).unwrap();
        assert!((l - chernoff(mt.dist(0), mt.dist(1)).unwrap()).abs() < 1e-15);
        let dup = CostFunction::new(vec![0.0, 2.0, 0.0], 1).unwrap();
        let mt3 = MonitoringTechnology::from_dists(vec![vec![0.7, 0.3], vec![0.3, 0.7], vec![0.6, 0.4]], 1).unwrap();
        assert!(matches!(theoretical_rate(&mt3, &dup, Regime::LimitedLiability), Err(Error::NonUniqueMinimizer)));
    }

    #[test]
    fn three_action_minimum() {
        // Build two deviations with prescribed KL to the target by bisection on p.
        let star = [0.5, 0.5];
        let find = |target: f64| {
            crate::numeric::bisect_increasing(|p| kl(&[p, 1.0 - p], &star).unwrap() - target, 0.5, 0.999_999, 1e-14)
        };
        let (p0, p2) = (find(0.3), find(0.5));
        let mt = MonitoringTechnology::from_dists(vec![vec![p0, 1.0 - p0], star.to_vec(), vec![p2, 1.0 - p2]], 1).unwrap();
        let costs = CostFunction::new(vec![0.0, 2.0, 1.0], 1).unwrap();
        assert!((theoretical_rate(&mt, &costs, Regime::Baseline).unwrap() - 0.3).abs() < 1e-10);
    }

    #[test]
    fn ranking_example_pair() {
        let mu = MonitoringTechnology::from_dists(vec![vec![0.8, 0.2], vec![0.01, 0.99]], 1).unwrap();
        let mu2 = MonitoringTechnology::from_dists(vec![vec![0.99, 0.01], vec![0.2, 0.8]], 1).unwrap();
        let r = rank_monitoring(&mu, &mu2, &[0]).unwrap();
        assert_eq!(r.preferred, Preference::First);
        assert!((r.index_first - 3.19).abs() < 0.05 && (r.index_second - 1.54).abs() < 0.05);
        let s = rank_monitoring(&mu2, &mu, &[0]).unwrap();
        assert_eq!(s.preferred, Preference::Second);
        assert_eq!(s.index_first, r.index_second);
        assert_eq!(rank_monitoring(&mu, &mu, &[0]).unwrap().preferred, Preference::Tie);
    }

    #[test]
    fn gaussian_closed_form() {
        // a = a* = 1, a′ = 0: x = 0 corresponds to ℓ = ((0-0)² - (0-1)²)/2 = -1/2.
        assert!((gaussian_rate(1.0, 0.0, 1.0, -0.5).unwrap() - 0.5).abs() < 1e-15);
        // ℓ placing x* at a.
        let (a, ad, ast) = (0.3, -1.0, 2.0);
        let ell = ((a - ad) * (a - ad) - (a - ast) * (a - ast)) / 2.0;
        assert!(gaussian_rate(a, ad, ast, ell).unwrap().abs() < 1e-15);
        let d = 4.2;
        let v1 = gaussian_rate(a, ad, ast, 0.7).unwrap();
        let v2 = gaussian_rate(a + d, ad + d, ast + d, 0.7).unwrap();
        assert!((v1 - v2).abs() < 1e-12);
        assert!(gaussian_rate(0.0, 1.0, 1.0, 0.0).is_err());
    }
}
