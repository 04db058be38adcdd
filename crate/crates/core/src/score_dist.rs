//! Exact finite-n distribution of the log-likelihood score vector over
//! multinomial type classes, held in log space.

use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::monitoring::{score_terms, MonitoringTechnology};
use crate::numeric::{composition_count, ln_factorials, log_sum_exp};

/// Default bound on the number of enumerated type classes.
pub const DEFAULT_TYPE_CAP: usize = 2_000_000;

/// Absolute slack granted to the weak inequality `L ≥ γ`.
pub const TIE_TOL: f64 = 1e-12;

/// Signal counts of one type class, with its scores.
#[derive(Debug, Clone, PartialEq)]
pub struct TypeClass {
    pub counts: Vec<u32>,
    /// `ln` of the multinomial coefficient.
    pub log_multiplicity: f64,
    /// `L(a′)` for each deviation, in `ScoreDistribution::deviations` order.
    pub scores: Vec<f64>,
}

/// All type classes at a fixed `n` with per-action log-probabilities.
#[derive(Debug, Clone)]
pub struct ScoreDistribution {
    pub n: usize,
    /// Non-target actions, ascending.
    pub deviations: Vec<usize>,
    pub target: usize,
    terms: Vec<Vec<f64>>,
    pub types: Vec<TypeClass>,
    /// `log_probs[a][t]`.
    pub log_probs: Vec<Vec<f64>>,
}

impl ScoreDistribution {
    pub fn len(&self) -> usize {
        self.types.len()
    }

    pub fn is_empty(&self) -> bool {
        self.types.is_empty()
    }

    /// Position of deviation `a` inside each type's score vector.
    pub fn slot(&self, a: usize) -> Result<usize> {
        self.deviations.iter().position(|&d| d == a).ok_or(Error::DegenerateScore)
    }

    /// Score `L(a)` of type `t`.
    pub fn score(&self, t: usize, a: usize) -> f64 {
        self.types[t].scores[self.slot(a).expect("deviation action")]
    }

    pub fn prob(&self, a: usize, t: usize) -> f64 {
        self.log_probs[a][t].exp()
    }

    /// Exact `E_a[f(type)]`.
    pub fn expect<F: Fn(usize) -> f64>(&self, a: usize, f: F) -> f64 {
        (0..self.len()).map(|t| self.prob(a, t) * f(t)).sum()
    }

    /// Empirical frequency of signal `x` in type `t`.
    pub fn freq(&self, t: usize, x: usize) -> f64 {
        self.types[t].counts[x] as f64 / self.n as f64
    }

    /// `E_a[L(a′)]` computed in closed form from single-signal terms.
    pub fn mean_score(&self, a: usize, a_dev: usize, mt: &MonitoringTechnology) -> f64 {
        let terms = &self.terms[self.slot(a_dev).expect("deviation action")];
        mt.dist(a).iter().zip(terms).map(|(p, s)| p * s).sum()
    }

    pub fn terms(&self, a_dev: usize) -> &[f64] {
        &self.terms[self.slot(a_dev).expect("deviation action")]
    }
}

fn compositions(n: usize, k: usize, prefix: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
    if prefix.len() + 1 == k {
        let used: u32 = prefix.iter().sum();
        let mut c = prefix.clone();
        c.push(n as u32 - used);
        out.push(c);
        return;
    }
    let used: u32 = prefix.iter().sum();
    for c in 0..=(n as u32 - used) {
        prefix.push(c);
        compositions(n, k, prefix, out);
        prefix.pop();
    }
}

/// Enumerate all type classes at sample size `n ≥ 1`.
pub fn enumerate_types(mt: &MonitoringTechnology, n: usize, cap: usize) -> Result<ScoreDistribution> {
    if n == 0 {
        return Err(Error::NTooSmall { n, detail: "at least one signal is required".into() });
    }
    let k = mt.num_signals();
    let count = composition_count(n, k);
    if count > cap as f64 {
        return Err(Error::EnumerationCap { types: count, cap });
    }
    let deviations: Vec<usize> = (0..mt.num_actions()).filter(|&a| a != mt.target()).collect();
    let terms: Vec<Vec<f64>> = deviations.iter().map(|&a| score_terms(mt, a)).collect::<Result<_>>()?;
    let lf = ln_factorials(n);
    let log_mu: Vec<Vec<f64>> = (0..mt.num_actions()).map(|a| mt.dist(a).iter().map(|p| p.ln()).collect()).collect();

    let mut all = Vec::with_capacity(count as usize);
    compositions(n, k, &mut Vec::with_capacity(k), &mut all);

    let nf = n as f64;
    let mut types = Vec::with_capacity(all.len());
    let mut log_probs = vec![Vec::with_capacity(all.len()); mt.num_actions()];
    for counts in all {
        let log_multiplicity = lf[n] - counts.iter().map(|&c| lf[c as usize]).sum::<f64>();
        let scores = terms
            .iter()
            .map(|t| counts.iter().zip(t).map(|(&c, s)| c as f64 * s).sum::<f64>() / nf)
            .collect();
        for (a, lm) in log_mu.iter().enumerate() {
            let lp = log_multiplicity + counts.iter().zip(lm).map(|(&c, l)| c as f64 * l).sum::<f64>();
            log_probs[a].push(lp);
        }
        types.push(TypeClass { counts, log_multiplicity, scores });
    }
    Ok(ScoreDistribution { n, deviations, target: mt.target(), terms, types, log_probs })
}

/// Every raw signal sequence as its own class of multiplicity one.
///
/// Exponential in `n`; intended for small brute-force checks.
pub fn raw_sequences(mt: &MonitoringTechnology, n: usize, cap: usize) -> Result<ScoreDistribution> {
    if n == 0 {
        return Err(Error::NTooSmall { n, detail: "at least one signal is required".into() });
    }
    let k = mt.num_signals();
    let total = (k as f64).powi(n as i32);
    if total > cap as f64 {
        return Err(Error::EnumerationCap { types: total, cap });
    }
    let deviations: Vec<usize> = (0..mt.num_actions()).filter(|&a| a != mt.target()).collect();
    let terms: Vec<Vec<f64>> = deviations.iter().map(|&a| score_terms(mt, a)).collect::<Result<_>>()?;
    let mut types = Vec::with_capacity(total as usize);
    let mut log_probs = vec![Vec::with_capacity(total as usize); mt.num_actions()];
    for code in 0..total as usize {
        let mut c = code;
        let mut seq = Vec::with_capacity(n);
        for _ in 0..n {
            seq.push(c % k);
            c /= k;
        }
        let mut counts = vec![0u32; k];
        seq.iter().for_each(|&x| counts[x] += 1);
        let scores = terms.iter().map(|t| seq.iter().map(|&x| t[x]).sum::<f64>() / n as f64).collect();
        for (a, lp) in log_probs.iter_mut().enumerate() {
            lp.push(seq.iter().map(|&x| mt.dist(a)[x].ln()).sum());
        }
        types.push(TypeClass { counts, log_multiplicity: 0.0, scores });
    }
    Ok(ScoreDistribution { n, deviations, target: mt.target(), terms, types, log_probs })
}

/// Pass rule `L(a′) ≥ γ(a′)` for every listed deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassRule {
    pub thresholds: Vec<(usize, f64)>,
}

impl PassRule {
    pub fn new(thresholds: Vec<(usize, f64)>) -> Self {
        Self { thresholds }
    }

    pub fn single(a: usize, gamma: f64) -> Self {
        Self { thresholds: vec![(a, gamma)] }
    }

    pub fn threshold(&self, a: usize) -> Option<f64> {
        self.thresholds.iter().find(|(d, _)| *d == a).map(|p| p.1)
    }

    fn tol(g: f64) -> f64 {
        TIE_TOL * g.abs().max(1.0)
    }

    pub fn passes(&self, sd: &ScoreDistribution, t: usize) -> bool {
        self.thresholds.iter().all(|&(a, g)| sd.score(t, a) >= g - Self::tol(g))
    }

    /// Evaluate on raw counts.
    pub fn passes_counts(&self, mt: &MonitoringTechnology, counts: &[u32]) -> bool {
        let n: u32 = counts.iter().sum();
        self.thresholds.iter().all(|&(a, g)| {
            let t = score_terms(mt, a).expect("deviation action");
            let s = counts.iter().zip(&t).map(|(&c, s)| c as f64 * s).sum::<f64>() / n as f64;
            s >= g - Self::tol(g)
        })
    }
}

/// Which side of a pass rule an event describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Event {
    Pass,
    Fail,
}

impl Event {
    pub fn holds(self, passed: bool) -> bool {
        match self {
            Event::Pass => passed,
            Event::Fail => !passed,
        }
    }
}

/// `ln P_a[event]`; `-inf` when no type matches.
pub fn tail_prob(sd: &ScoreDistribution, a: usize, rule: &PassRule, event: Event) -> f64 {
    let lp: Vec<f64> = (0..sd.len()).filter(|&t| event.holds(rule.passes(sd, t))).map(|t| sd.log_probs[a][t]).collect();
    log_sum_exp(&lp)
}

/// Monte Carlo frequency estimate with its binomial standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McEstimate {
    pub estimate: f64,
    pub stderr: f64,
    pub samples: usize,
}

/// Estimate `P_a[event]` by simulating `samples` draws of `n` signals.
pub fn mc_tail_prob(
    mt: &MonitoringTechnology,
    n: usize,
    a: usize,
    rule: &PassRule,
    event: Event,
    samples: usize,
    seed: u64,
) -> Result<McEstimate> {
    if samples == 0 || n == 0 {
        return Err(Error::InsufficientData("samples and n must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = WeightedIndex::new(mt.dist(a)).map_err(|e| Error::InvalidDistribution {
        action: mt.actions()[a].clone(),
        reason: e.to_string(),
    })?;
    let terms: Vec<(usize, f64, Vec<f64>)> =
        rule.thresholds.iter().map(|&(d, g)| Ok((d, g, score_terms(mt, d)?))).collect::<Result<_>>()?;
    let mut hits = 0usize;
    let mut counts = vec![0u32; mt.num_signals()];
    for _ in 0..samples {
        counts.iter_mut().for_each(|c| *c = 0);
        for _ in 0..n {
            counts[dist.sample(&mut rng)] += 1;
        }
        let passed = terms.iter().all(|(_, g, t)| {
            let s = counts.iter().zip(t).map(|(&c, s)| c as f64 * s).sum::<f64>() / n as f64;
            s >= g - PassRule::tol(*g)
        });
        if event.holds(passed) {
            hits += 1;
        }
    }
    let p = hits as f64 / samples as f64;
    Ok(McEstimate { estimate: p, stderr: (p * (1.0 - p) / samples as f64).sqrt(), samples })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fig1() -> MonitoringTechnology {
        MonitoringTechnology::from_dists(vec![vec![0.7, 0.3], vec![0.3, 0.7]], 1).unwrap()
    }

    #[test]
    fn binary_support() {
        let sd = enumerate_types(&fig1(), 3, DEFAULT_TYPE_CAP).unwrap();
        let c: Vec<Vec<u32>> = sd.types.iter().map(|t| t.counts.clone()).collect();
        assert_eq!(c, vec![vec![0, 3], vec![1, 2], vec![2, 1], vec![3, 0]]);
    }

    #[test]
    fn ternary_count() {
        let mt = MonitoringTechnology::from_dists(vec![vec![0.2, 0.3, 0.5], vec![0.5, 0.3, 0.2]], 1).unwrap();
        assert_eq!(enumerate_types(&mt, 2, DEFAULT_TYPE_CAP).unwrap().len(), 6);
    }

    #[test]
    fn single_type_log_prob() {
        let sd = enumerate_types(&fig1(), 2, DEFAULT_TYPE_CAP).unwrap();
        let t = sd.types.iter().position(|t| t.counts == vec![0, 2]).unwrap();
        assert!((sd.log_probs[1][t] - 0.49f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn normalization() {
        let mt = MonitoringTechnology::from_dists(vec![vec![0.2, 0.3, 0.5], vec![0.5, 0.3, 0.2], vec![0.1, 0.1, 0.8]], 1).unwrap();
        let sd = enumerate_types(&mt, 40, DEFAULT_TYPE_CAP).unwrap();
        for a in 0..3 {
            assert!(log_sum_exp(&sd.log_probs[a]).abs() < 1e-9);
        }
    }

    #[test]
    fn cap_exceeded() {
        assert!(matches!(enumerate_types(&fig1(), 10, 5), Err(Error::EnumerationCap { .. })));
    }

    #[test]
    fn tail_examples() {
        let mt = fig1();
        let r = PassRule::single(0, 0.0);
        let sd1 = enumerate_types(&mt, 1, DEFAULT_TYPE_CAP).unwrap();
        assert!((tail_prob(&sd1, 1, &r, Event::Pass) - 0.7f64.ln()).abs() < 1e-14);
        assert!((tail_prob(&sd1, 0, &r, Event::Pass) - 0.3f64.ln()).abs() < 1e-14);
        let sd2 = enumerate_types(&mt, 2, DEFAULT_TYPE_CAP).unwrap();
        assert!((tail_prob(&sd2, 1, &r, Event::Pass) - 0.91f64.ln()).abs() < 1e-14);
        let never = PassRule::single(0, 10.0);
        assert_eq!(tail_prob(&sd2, 1, &never, Event::Pass), f64::NEG_INFINITY);
    }

    #[test]
    fn monte_carlo_single_signal() {
        let mt = fig1();
        let r = PassRule::single(0, 0.0);
        let m = mc_tail_prob(&mt, 1, 1, &r, Event::Pass, 1_000_000, 7).unwrap();
        assert!((m.estimate - 0.7).abs() < 4.0 * m.stderr);
        let all = PassRule::single(0, -10.0);
        let m = mc_tail_prob(&mt, 5, 1, &all, Event::Pass, 1000, 7).unwrap();
        assert_eq!((m.estimate, m.stderr), (1.0, 0.0));
        let again = mc_tail_prob(&mt, 1, 1, &r, Event::Pass, 1000, 11).unwrap();
        assert_eq!(again, mc_tail_prob(&mt, 1, 1, &r, Event::Pass, 1000, 11).unwrap());
    }
}
