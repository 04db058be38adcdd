//! A validated bundle of technology, preferences, costs and regime.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::monitoring::MonitoringTechnology;
use crate::preferences::{first_best_cost, first_best_utility, validate_assumptions, CostFunction, Regime, UtilitySpec};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Model {
    pub mt: MonitoringTechnology,
    pub prefs: UtilitySpec,
    pub costs: CostFunction,
    pub regime: Regime,
}

impl Model {
    /// Checks shapes and every assumption the regime requires.
    pub fn new(mt: MonitoringTechnology, prefs: UtilitySpec, costs: CostFunction, regime: Regime) -> Result<Self> {
        if costs.costs.len() != mt.num_actions() {
            return Err(Error::LengthMismatch(format!(
                "{} costs for {} actions",
                costs.costs.len(),
                mt.num_actions()
            )));
        }
        if costs.target != mt.target() {
            return Err(Error::LengthMismatch("cost target differs from technology target".into()));
        }
        validate_assumptions(&prefs, &costs, regime).into_result()?;
        Ok(Self { mt, prefs, costs, regime })
    }

    pub fn target(&self) -> usize {
        self.costs.target
    }

    pub fn cost(&self, a: usize) -> f64 {
        self.costs.costs[a]
    }

    pub fn target_cost(&self) -> f64 {
        self.costs.target_cost()
    }

    pub fn first_best_cost(&self) -> f64 {
        first_best_cost(&self.prefs, &self.costs, self.regime).expect("validated at construction")
    }

    /// Utility level paid at the first best.
    pub fn first_best_utility(&self) -> f64 {
        first_best_utility(&self.prefs, &self.costs, self.regime).expect("validated at construction")
    }

    /// Lower bound `u(w̄)` on utility payments.
    pub fn floor(&self) -> f64 {
        self.prefs.utility_floor()
    }

    /// Numerical cap on utility payments.
    pub fn cap(&self) -> f64 {
        self.prefs.utility_cap(self.first_best_utility())
    }

    pub fn with_regime(&self, regime: Regime, prefs: UtilitySpec) -> Result<Self> {
        Self::new(self.mt.clone(), prefs, self.costs.clone(), regime)
    }
}

/// The two-action, two-signal economy used throughout the examples.
pub fn figure_one() -> Model {
    let mt = MonitoringTechnology::new(
        vec!["low".into(), "high".into()],
        vec!["shirk".into(), "work".into()],
        vec![vec![0.7, 0.3], vec![0.3, 0.7]],
        1,
    )
    .expect("valid technology");
    let costs = CostFunction::new(vec![0.0, 2.0], 1).expect("valid costs");
    Model::new(mt, UtilitySpec::log(0.1), costs, Regime::Baseline).expect("valid model")
}
