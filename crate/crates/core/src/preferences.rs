//! Agent preferences: utility families with closed-form inverse, costs,
//! payoff regimes, assumption checks and first-best benchmarks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Closed-form utility family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum UtilityFamily {
    /// `u(w) = ln w`.
    Log,
    /// `u(w) = (w^(1-σ) - 1)/(1-σ)`.
    Crra { sigma: f64 },
    /// `u(w) = -exp(-α w)`.
    Cara { alpha: f64 },
}

/// Utility family together with the wage floor `w̄`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UtilitySpec {
    #[serde(flatten)]
    pub family: UtilityFamily,
    pub wage_floor: f64,
}

/// Payoff regime.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    #[default]
    Baseline,
    LimitedLiability,
}

/// Per-action effort cost in utility units, with the target action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostFunction {
    pub costs: Vec<f64>,
    pub target: usize,
}

impl UtilitySpec {
    pub fn log(wage_floor: f64) -> Self {
        Self { family: UtilityFamily::Log, wage_floor }
    }

    pub fn crra(sigma: f64, wage_floor: f64) -> Self {
        Self { family: UtilityFamily::Crra { sigma }, wage_floor }
    }

    pub fn cara(alpha: f64, wage_floor: f64) -> Self {
        Self { family: UtilityFamily::Cara { alpha }, wage_floor }
    }

    /// Parameter sanity: `σ > 0, σ ≠ 1`, `α > 0`, and `w̄` inside the domain of `u`.
    pub fn check_parameters(&self) -> std::result::Result<(), String> {
        if !self.wage_floor.is_finite() {
            return Err(format!("wage floor {} is not finite", self.wage_floor));
        }
        match self.family {
            UtilityFamily::Log => {
                if self.wage_floor <= 0.0 {
                    return Err(format!("log utility needs w̄ > 0, got {}", self.wage_floor));
                }
            }
            UtilityFamily::Crra { sigma } => {
                if !(sigma > 0.0) || (sigma - 1.0).abs() < 1e-12 || !sigma.is_finite() {
                    return Err(format!("CRRA needs σ > 0 and σ ≠ 1, got {sigma}"));
                }
                if self.wage_floor <= 0.0 {
                    return Err(format!("CRRA utility needs w̄ > 0, got {}", self.wage_floor));
                }
            }
            UtilityFamily::Cara { alpha } => {
                if !(alpha > 0.0) || !alpha.is_finite() {
                    return Err(format!("CARA needs α > 0, got {alpha}"));
                }
            }
        }
        Ok(())
    }

    pub fn u(&self, w: f64) -> f64 {
        match self.family {
            UtilityFamily::Log => w.ln(),
            UtilityFamily::Crra { sigma } => {
                let r = 1.0 - sigma;
                (r * w.ln()).exp_m1() / r
            }
            UtilityFamily::Cara { alpha } => -(-alpha * w).exp(),
        }
    }

    pub fn u_prime(&self, w: f64) -> f64 {
        match self.family {
            UtilityFamily::Log => 1.0 / w,
            UtilityFamily::Crra { sigma } => w.powf(-sigma),
            UtilityFamily::Cara { alpha } => alpha * (-alpha * w).exp(),
        }
    }

    pub fn u_second(&self, w: f64) -> f64 {
        match self.family {
            UtilityFamily::Log => -1.0 / (w * w),
            UtilityFamily::Crra { sigma } => -sigma * w.powf(-sigma - 1.0),
            UtilityFamily::Cara { alpha } => -alpha * alpha * (-alpha * w).exp(),
        }
    }

    /// Utility of the wage floor, `u(w̄)`.
    pub fn utility_floor(&self) -> f64 {
        self.u(self.wage_floor)
    }

    /// `sup u`; `+inf` when utility is unbounded above.
    pub fn utility_sup(&self) -> f64 {
        match self.family {
            UtilityFamily::Log => f64::INFINITY,
            UtilityFamily::Crra { sigma } if sigma < 1.0 => f64::INFINITY,
            UtilityFamily::Crra { sigma } => 1.0 / (sigma - 1.0),
            UtilityFamily::Cara { .. } => 0.0,
        }
    }

    /// Infimum of `u` over all wages in the domain (ignoring the floor).
    pub fn utility_inf(&self) -> f64 {
        match self.family {
            UtilityFamily::Log => f64::NEG_INFINITY,
            UtilityFamily::Crra { sigma } if sigma < 1.0 => -1.0 / (1.0 - sigma),
            UtilityFamily::Crra { .. } => f64::NEG_INFINITY,
            UtilityFamily::Cara { .. } => f64::NEG_INFINITY,
        }
    }

    /// True iff `v` is a utility value reachable by a finite wage.
    pub fn in_domain(&self, v: f64) -> bool {
        v.is_finite() && v < self.utility_sup() && v > self.utility_inf()
    }

    /// `h = u⁻¹`.
    pub fn h(&self, v: f64) -> f64 {
        match self.family {
            UtilityFamily::Log => v.exp(),
            UtilityFamily::Crra { sigma } => {
                let r = 1.0 - sigma;
                ((r * v).ln_1p() / r).exp()
            }
            UtilityFamily::Cara { alpha } => -(-v).ln() / alpha,
        }
    }

    /// `k`-th derivative of `h` for `k ≤ 4`.
    pub fn h_deriv(&self, v: f64, k: u32) -> f64 {
        if k == 0 {
            return self.h(v);
        }
        match self.family {
            UtilityFamily::Log => v.exp(),
            UtilityFamily::Crra { sigma } => {
                let r = 1.0 - sigma;
                let e = 1.0 / r;
                let mut coef = 1.0;
                for j in 0..k {
                    coef *= (e - j as f64) * r;
                }
                coef * ((e - k as f64) * (r * v).ln_1p()).exp()
            }
            UtilityFamily::Cara { alpha } => {
                let fact: f64 = (1..k).map(|j| j as f64).product();
                let sign = if k % 2 == 1 { -1.0 } else { 1.0 };
                sign * fact / (alpha * v.powi(k as i32))
            }
        }
    }

    pub fn h_prime(&self, v: f64) -> f64 {
        self.h_deriv(v, 1)
    }

    pub fn h_second(&self, v: f64) -> f64 {
        self.h_deriv(v, 2)
    }

    /// `(h′)⁻¹(y)` for `y > 0`.
    pub fn h_prime_inv(&self, y: f64) -> f64 {
        match self.family {
            UtilityFamily::Log => y.ln(),
            UtilityFamily::Crra { sigma } => self.u(y.powf(1.0 / sigma)),
            UtilityFamily::Cara { alpha } => -1.0 / (alpha * y),
        }
    }

    /// `h(c + d) - h(c)` without cancellation.
    pub fn h_diff(&self, c: f64, d: f64) -> f64 {
        match self.family {
            UtilityFamily::Log => c.exp() * d.exp_m1(),
            UtilityFamily::Crra { sigma } => {
                let r = 1.0 - sigma;
                let base = 1.0 + r * c;
                self.h(c) * ((r * d / base).ln_1p() / r).exp_m1()
            }
            UtilityFamily::Cara { alpha } => -(d / c).ln_1p() / alpha,
        }
    }

    /// Local length scale `|h″/h‴|` used to pick between series and direct forms.
    fn local_scale(&self, c: f64) -> f64 {
        let h3 = self.h_deriv(c, 3);
        if h3 == 0.0 {
            return f64::INFINITY;
        }
        (self.h_second(c) / h3).abs()
    }

    /// Bregman remainder `h(c+d) - h(c) - h′(c) d`, accurate for tiny `d`.
    pub fn bregman(&self, c: f64, d: f64) -> f64 {
        if d == 0.0 {
            return 0.0;
        }
        if d.abs() < 1e-4 * self.local_scale(c) {
            let h2 = self.h_deriv(c, 2);
            let h3 = self.h_deriv(c, 3);
            let h4 = self.h_deriv(c, 4);
            d * d * (h2 / 2.0 + d * (h3 / 6.0 + d * h4 / 24.0))
        } else {
            self.h_diff(c, d) - self.h_prime(c) * d
        }
    }

    /// `bregman(c, q x) / q`, finite as `q → 0`.
    pub fn bregman_over(&self, c: f64, x: f64, q: f64) -> f64 {
        let d = q * x;
        if d.abs() < 1e-4 * self.local_scale(c) {
            let h2 = self.h_deriv(c, 2);
            let h3 = self.h_deriv(c, 3);
            let h4 = self.h_deriv(c, 4);
            x * d * (h2 / 2.0 + d * (h3 / 6.0 + d * h4 / 24.0))
        } else {
            self.bregman(c, d) / q
        }
    }

    /// Numerical wage cap `10⁶ · h(c_ref)` expressed as a utility bound.
    ///
    /// Falls back to `w̄ + 10⁶` when `h(c_ref) ≤ 0`.
    pub fn utility_cap(&self, c_ref: f64) -> f64 {
        let base = self.h(c_ref);
        let w = if base > 0.0 { base * 1e6 } else { self.wage_floor + 1e6 };
        let w = w.max(self.wage_floor + 1.0);
        let v = self.u(w);
        let sup = self.utility_sup();
        if v >= sup {
            // Bounded-above families: stay strictly inside the range.
            sup - (sup - c_ref).abs().max(1e-300) * 1e-9
        } else {
            v
        }
    }
}

impl CostFunction {
    pub fn new(costs: Vec<f64>, target: usize) -> Result<Self> {
        if target >= costs.len() {
            return Err(Error::LengthMismatch(format!(
                "target index {target} out of {} actions",
                costs.len()
            )));
        }
        if costs.iter().any(|c| !c.is_finite()) {
            return Err(Error::Assumption("costs must be finite".into()));
        }
        Ok(Self { costs, target })
    }

    pub fn target_cost(&self) -> f64 {
        self.costs[self.target]
    }

    /// Actions strictly cheaper than the target.
    pub fn a_minus(&self) -> Vec<usize> {
        let c = self.target_cost();
        (0..self.costs.len()).filter(|&a| self.costs[a] < c).collect()
    }

    /// Actions strictly costlier than the target.
    pub fn a_plus(&self) -> Vec<usize> {
        let c = self.target_cost();
        (0..self.costs.len()).filter(|&a| self.costs[a] > c).collect()
    }

    /// All actions other than the target.
    pub fn deviations(&self) -> Vec<usize> {
        (0..self.costs.len()).filter(|&a| a != self.target).collect()
    }

    pub fn min_cost(&self) -> f64 {
        self.costs.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Unique cost minimizer `â`.
    pub fn cheapest(&self) -> Result<usize> {
        let m = self.min_cost();
        let mins: Vec<usize> = (0..self.costs.len()).filter(|&a| self.costs[a] == m).collect();
        if mins.len() == 1 {
            Ok(mins[0])
        } else {
            Err(Error::NonUniqueMinimizer)
        }
    }
}

/// One clause of the assumption report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: &'static str,
    /// Whether the regime needs this clause.
    pub required: bool,
    pub passed: bool,
    pub witness: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub checks: Vec<Check>,
}

impl ValidationReport {
    /// All required clauses hold.
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed || !c.required)
    }

    pub fn get(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn failures(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| c.required && !c.passed).collect()
    }

    pub fn into_result(self) -> Result<()> {
        let msgs: Vec<String> = self
            .failures()
            .iter()
            .map(|c| format!("{}: {}", c.name, c.witness.clone().unwrap_or_default()))
            .collect();
        if msgs.is_empty() {
            Ok(())
        } else {
            Err(Error::Assumption(msgs.join("; ")))
        }
    }
}

/// Evaluate every assumption clause and the regime condition.
pub fn validate_assumptions(prefs: &UtilitySpec, costs: &CostFunction, regime: Regime) -> ValidationReport {
    let mut checks = Vec::new();

    let params = prefs.check_parameters();
    checks.push(Check {
        name: "utility_parameters",
        required: true,
        passed: params.is_ok(),
        witness: params.err(),
    });
    let params_ok = checks[0].passed;

    // Strict risk aversion on a wage grid above the floor.
    let mut ra_witness = None;
    if params_ok {
        for k in 0..=200 {
            let w = prefs.wage_floor + 0.5 * k as f64;
            let (d1, d2) = (prefs.u_prime(w), prefs.u_second(w));
            let underflow = d1 == 0.0 && d2 == 0.0;
            if !underflow && !(d1 > 0.0 && d2 < 0.0) {
                ra_witness = Some(format!("u'({w}) = {d1}, u''({w}) = {d2}"));
                break;
            }
        }
    }
    checks.push(Check {
        name: "risk_aversion",
        required: true,
        passed: params_ok && ra_witness.is_none(),
        witness: ra_witness,
    });

    let floor = if params_ok { prefs.utility_floor() } else { f64::NAN };
    let sup = prefs.utility_sup();

    let outside: Vec<String> = costs
        .costs
        .iter()
        .enumerate()
        .filter(|(_, &c)| !(c > floor && c < sup))
        .map(|(a, c)| format!("c({a}) = {c} outside ({floor}, {sup})"))
        .collect();
    checks.push(Check {
        name: "cost_range",
        required: regime == Regime::Baseline,
        passed: params_ok && outside.is_empty(),
        witness: if outside.is_empty() { None } else { Some(outside.join(", ")) },
    });

    let cstar = costs.target_cost();
    let mut tc = None;
    if !(cstar > costs.min_cost()) {
        tc = Some(format!("c(a*) = {cstar} is not above min c = {}", costs.min_cost()));
    } else if let Some(a) = (0..costs.costs.len()).find(|&a| a != costs.target && costs.costs[a] == cstar) {
        tc = Some(format!("c({a}) = c(a*) = {cstar}"));
    }
    checks.push(Check { name: "target_cost", required: true, passed: tc.is_none(), witness: tc });

    if regime == Regime::LimitedLiability {
        let mut ll = None;
        match costs.cheapest() {
            Err(_) => ll = Some("cost minimizer is not unique".to_string()),
            Ok(a_hat) => {
                let c_hat = costs.costs[a_hat];
                let top = floor + cstar - c_hat;
                if !(floor >= c_hat) {
                    ll = Some(format!("u(w̄) = {floor} < c(â) = {c_hat}"));
                } else if !(top < sup) {
                    ll = Some(format!("u(w̄) + c(a*) - c(â) = {top} not below sup u = {sup}"));
                }
            }
        }
        checks.push(Check {
            name: "limited_liability",
            required: true,
            passed: params_ok && ll.is_none(),
            witness: ll,
        });
    }

    ValidationReport { checks }
}

/// Utility level the agent receives at the first best.
pub fn first_best_utility(prefs: &UtilitySpec, costs: &CostFunction, regime: Regime) -> Result<f64> {
    let v = match regime {
        Regime::Baseline => costs.target_cost(),
        Regime::LimitedLiability => {
            let a_hat = costs.cheapest()?;
            prefs.utility_floor() + costs.target_cost() - costs.costs[a_hat]
        }
    };
    if !prefs.in_domain(v) || v < prefs.utility_floor() && regime == Regime::LimitedLiability {
        return Err(Error::OutsideUtilityRange { value: v });
    }
    Ok(v)
}

/// Money cost of implementing the target with full information.
pub fn first_best_cost(prefs: &UtilitySpec, costs: &CostFunction, regime: Regime) -> Result<f64> {
    let v = first_best_utility(prefs, costs, regime)?;
    if regime == Regime::Baseline && !(v > prefs.utility_floor()) {
        return Err(Error::OutsideUtilityRange { value: v });
    }
    Ok(prefs.h(v))
}
