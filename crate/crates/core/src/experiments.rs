//! Experiment orchestration: JSON configuration, per-kind runners, CSV
//! artifacts and a manifest with per-cell status.
//!
//! Every artifact except `manifest.json` is a pure function of the
//! configuration, so reruns produce identical bytes.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adjustable::{one_shot_deviation_gains, verify_adjustable_rate, write_gains_csv, AdjustableProblem, AdjustableRun};
use crate::contracts::{build_binary_test, fraction_to_score_threshold, write_contract_csv, LinearKind};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::monitoring::{chernoff, kl, rank_monitoring, score_terms, MonitoringTechnology, Preference};
use crate::oracle::{divergence_property_suite, run_oracle_suite, write_oracle_csv};
use crate::preferences::{CostFunction, Regime, UtilitySpec};
use crate::rates::{fit_inverse_n, verify_rate, write_rate_csv, ContractFamily, FitOptions, GapPoint};
use crate::score_dist::{enumerate_types, DEFAULT_TYPE_CAP};
use crate::solvers::{limit_shape, solve_linear, solve_second_best, SecondBestOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Figure1,
    Rates,
    SecondBest,
    Linear,
    Rank,
    LimitedLiability,
    Adjustable,
    OracleSuite,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Figure1 => "figure1",
            Self::Rates => "rates",
            Self::SecondBest => "second_best",
            Self::Linear => "linear",
            Self::Rank => "rank",
            Self::LimitedLiability => "limited_liability",
            Self::Adjustable => "adjustable",
            Self::OracleSuite => "oracle_suite",
        }
    }
}

/// A named probability table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TechnologyTable {
    pub signals: Vec<String>,
    pub actions: Vec<String>,
    pub target: String,
    /// Action label to distribution over `signals`.
    pub distributions: BTreeMap<String, Vec<f64>>,
}

impl TechnologyTable {
    pub fn build(&self) -> Result<MonitoringTechnology> {
        let dists = self
            .actions
            .iter()
            .map(|a| self.distributions.get(a).cloned().ok_or_else(|| Error::UnknownLabel(a.clone())))
            .collect::<Result<Vec<_>>>()?;
        if let Some(extra) = self.distributions.keys().find(|k| !self.actions.contains(k)) {
            return Err(Error::UnknownLabel(extra.clone()));
        }
        let target = self.actions.iter().position(|a| *a == self.target).ok_or_else(|| Error::UnknownLabel(self.target.clone()))?;
        MonitoringTechnology::new(self.signals.clone(), self.actions.clone(), dists, target)
    }
}

/// Either an explicit list or an inclusive arithmetic range.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NGrid {
    List(Vec<usize>),
    Range { start: usize, stop: usize, step: usize },
}

impl NGrid {
    pub fn values(&self) -> Result<Vec<usize>> {
        let v = match self {
            Self::List(v) => v.clone(),
            Self::Range { start, stop, step } => {
                if *step == 0 {
                    return Err(Error::Config("n_grid step must be positive".into()));
                }
                (*start..=*stop).step_by(*step).collect()
            }
        };
        if v.is_empty() || v.contains(&0) || v.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("n_grid must be a nonempty increasing list of positive sizes".into()));
        }
        Ok(v)
    }
}

/// Fraction-of-high-signal cutoffs for the two fixed binary contracts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cutoffs {
    pub lenient: f64,
    pub strict: f64,
}

impl Default for Cutoffs {
    fn default() -> Self {
        Self { lenient: 0.31, strict: 0.6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdjustableConfig {
    pub periods: Vec<usize>,
    /// Principal's payoff per action, keyed by label.
    pub payoffs: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    #[serde(default)]
    pub technologies: BTreeMap<String, TechnologyTable>,
    /// Key into `technologies` for the primary technology.
    #[serde(default)]
    pub technology: Option<String>,
    /// Second technology for `rank`.
    #[serde(default)]
    pub compare: Option<String>,
    #[serde(default)]
    pub preferences: Option<UtilitySpec>,
    /// Preferences for the baseline comparison in `limited_liability`.
    #[serde(default)]
    pub baseline_preferences: Option<UtilitySpec>,
    /// Action label to cost.
    #[serde(default)]
    pub costs: BTreeMap<String, f64>,
    #[serde(default)]
    pub regime: Regime,
    #[serde(default)]
    pub n_grid: Option<NGrid>,
    /// Leniency of the lenient threshold sequence.
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub cutoffs: Cutoffs,
    #[serde(default)]
    pub family: Option<ContractFamily>,
    #[serde(default)]
    pub linear_kind: Option<LinearKind>,
    #[serde(default)]
    pub fit: Option<FitOptions>,
    #[serde(default)]
    pub adjustable: Option<AdjustableConfig>,
    /// Region offset for the limit shape, as a fraction of the band width.
    #[serde(default = "default_shape_delta")]
    pub shape_delta: f64,
    #[serde(default = "default_property_count")]
    pub property_technologies: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub plot: bool,
}

fn default_epsilon() -> f64 {
    0.4
}

fn default_shape_delta() -> f64 {
    0.1
}

fn default_property_count() -> usize {
    200
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    /// SHA-256 of the canonical JSON echo.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(self)?)))
    }

    fn table(&self, key: Option<&String>, what: &str) -> Result<MonitoringTechnology> {
        let key = key.ok_or_else(|| Error::Config(format!("`{what}` is required for {}", self.kind.name())))?;
        self.technologies.get(key).ok_or_else(|| Error::UnknownLabel(key.clone()))?.build()
    }

    pub fn technology(&self) -> Result<MonitoringTechnology> {
        self.table(self.technology.as_ref(), "technology")
    }

    /// Validated model with the configured preferences.
    pub fn model(&self) -> Result<Model> {
        let prefs = self.preferences.ok_or_else(|| Error::Config("`preferences` is required".into()))?;
        self.model_with(prefs, self.regime)
    }

    fn model_with(&self, prefs: UtilitySpec, regime: Regime) -> Result<Model> {
        let mt = self.technology()?;
        let costs = mt
            .actions()
            .iter()
            .map(|a| self.costs.get(a).copied().ok_or_else(|| Error::Config(format!("no cost for action `{a}`"))))
            .collect::<Result<Vec<_>>>()?;
        if let Some(extra) = self.costs.keys().find(|k| !mt.actions().contains(k)) {
            return Err(Error::UnknownLabel(extra.clone()));
        }
        let target = mt.target();
        Model::new(mt, prefs, CostFunction::new(costs, target)?, regime)
    }

    pub fn grid(&self) -> Result<Vec<usize>> {
        self.n_grid.as_ref().ok_or_else(|| Error::Config(format!("`n_grid` is required for {}", self.kind.name())))?.values()
    }

    fn fit_options(&self) -> FitOptions {
        self.fit.unwrap_or_default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Ok,
    Infeasible,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellRecord {
    pub experiment: String,
    pub n: Option<usize>,
    pub status: CellStatus,
    pub detail: String,
}

impl CellRecord {
    fn from_result<T>(experiment: &str, n: usize, r: &Result<T>) -> Self {
        let (status, detail) = match r {
            Ok(_) => (CellStatus::Ok, String::new()),
            Err(e) if is_infeasible(e) => (CellStatus::Infeasible, e.to_string()),
            Err(e) => (CellStatus::Error, e.to_string()),
        };
        Self { experiment: experiment.into(), n: Some(n), status, detail }
    }
}

/// Errors meaning "no contract of this family at this n" rather than a failure.
pub fn is_infeasible(e: &Error) -> bool {
    matches!(
        e,
        Error::NTooSmall { .. }
            | Error::ThresholdOutsideBand(_)
            | Error::ContractInfeasible { .. }
            | Error::Infeasible(_)
            | Error::OutsideUtilityRange { .. }
    )
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Verdict {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl Verdict {
    fn new(name: &str, pass: bool, detail: impl Into<String>) -> Self {
        Self { name: name.into(), pass, detail: detail.into() }
    }
}

/// Everything a run produced besides the files themselves.
#[derive(Debug, Clone, PartialEq, Serialize, Default)]
pub struct RunOutcome {
    pub verdicts: Vec<Verdict>,
    pub cells: Vec<CellRecord>,
    /// File names relative to the output directory.
    pub artifacts: Vec<String>,
    /// Human-readable summary lines.
    pub summary: Vec<String>,
}

impl RunOutcome {
    pub fn all_pass(&self) -> bool {
        self.verdicts.iter().all(|v| v.pass)
    }
}

struct Sink<'a> {
    dir: &'a Path,
    outcome: RunOutcome,
}

impl Sink<'_> {
    fn create(&mut self, name: &str) -> Result<BufWriter<File>> {
        self.outcome.artifacts.push(name.into());
        Ok(BufWriter::new(File::create(self.dir.join(name))?))
    }

    fn write_string(&mut self, name: &str, text: &str) -> Result<()> {
        self.outcome.artifacts.push(name.into());
        fs::write(self.dir.join(name), text)?;
        Ok(())
    }
}

fn fmt_cell(r: &Result<f64>) -> String {
    match r {
        Ok(v) => v.to_string(),
        Err(e) if is_infeasible(e) => "infeasible".into(),
        Err(_) => "error".into(),
    }
}

/// One row of the Figure-1 table.
#[derive(Debug)]
pub struct Figure1Row {
    pub n: usize,
    pub lenient: Result<f64>,
    pub strict: Result<f64>,
    pub utility_linear: Result<f64>,
    pub second_best: Result<f64>,
    pub first_best: f64,
}

/// Costs of both fixed cutoffs, the best utility-linear and the optimal contract.
pub fn figure1_rows(model: &Model, cutoffs: Cutoffs, grid: &[usize]) -> Result<Vec<Figure1Row>> {
    let mt = &model.mt;
    if mt.num_actions() != 2 || mt.num_signals() != 2 {
        return Err(Error::Config(format!(
            "the Figure-1 table needs two actions and two signals, got {} and {}",
            mt.num_actions(),
            mt.num_signals()
        )));
    }
    if model.regime != Regime::Baseline {
        return Err(Error::Config("the Figure-1 table uses the baseline regime".into()));
    }
    let dev = model.costs.a_minus().first().copied().ok_or_else(|| Error::Config("the cheaper action is missing".into()))?;
    let terms = score_terms(mt, dev)?;
    let high = if terms[1] > terms[0] { 1 } else { 0 };
    let fb = model.first_best_cost();
    let binary = |f: f64, sd: &crate::score_dist::ScoreDistribution| -> Result<f64> {
        let g = fraction_to_score_threshold(mt, dev, high, f)?;
        Ok(build_binary_test(model, sd, &[(dev, g)])?.cost(&model.prefs))
    };
    Ok(grid
        .par_iter()
        .map(|&n| {
            let sd = enumerate_types(mt, n, DEFAULT_TYPE_CAP);
            let with_sd = |f: &dyn Fn(&crate::score_dist::ScoreDistribution) -> Result<f64>| match &sd {
                Ok(sd) => f(sd),
                Err(e) => Err(Error::Solver(e.to_string())),
            };
            Figure1Row {
                n,
                lenient: with_sd(&|sd| binary(cutoffs.lenient, sd)),
                strict: with_sd(&|sd| binary(cutoffs.strict, sd)),
                utility_linear: with_sd(&|sd| Ok(solve_linear(model, sd, LinearKind::UtilityLinear)?.cost)),
                second_best: with_sd(&|sd| Ok(solve_second_best(model, sd, &SecondBestOptions::default())?.cost)),
                first_best: fb,
            }
        })
        .collect())
}

/// Ordering and envelope checks on every row where all compared cells are feasible.
pub fn figure1_verdicts(rows: &[Figure1Row]) -> Vec<Verdict> {
    const REL: f64 = 1e-9;
    let mut checked = 0;
    let mut bad = Vec::new();
    for r in rows {
        if let (Ok(l), Ok(s), Ok(u), Ok(sb)) = (&r.lenient, &r.strict, &r.utility_linear, &r.second_best) {
            checked += 1;
            let ge = |a: f64, b: f64| a >= b * (1.0 - REL);
            if !(l < s && l < u && ge(*l, *sb) && ge(*s, *sb) && ge(*u, *sb) && ge(*sb, r.first_best)) {
                bad.push(r.n);
            }
        }
    }
    let errors: Vec<usize> = rows
        .iter()
        .filter(|r| [&r.lenient, &r.strict, &r.utility_linear, &r.second_best].iter().any(|c| matches!(c, Err(e) if !is_infeasible(e))))
        .map(|r| r.n)
        .collect();
    vec![
        Verdict::new("figure1_ordering", checked > 0 && bad.is_empty(), format!("{checked} feasible rows, violations at {bad:?}")),
        Verdict::new("figure1_no_solver_errors", errors.is_empty(), format!("errors at {errors:?}")),
    ]
}

fn write_figure1_csv(rows: &[Figure1Row], w: impl std::io::Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    w.write_record(["n", "cost_lenient", "cost_strict", "cost_utility_linear", "cost_second_best", "cost_first_best"])?;
    for r in rows {
        w.write_record([
            r.n.to_string(),
            fmt_cell(&r.lenient),
            fmt_cell(&r.strict),
            fmt_cell(&r.utility_linear),
            fmt_cell(&r.second_best),
            r.first_best.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Line plot of the feasible cells of every cost column.
pub fn figure1_svg(rows: &[Figure1Row]) -> Result<String> {
    use plotters::prelude::*;
    type Series<'a> = (&'a str, RGBColor, Vec<(f64, f64)>);
    let series: [Series; 5] = [
        ("lenient", BLUE, rows.iter().filter_map(|r| r.lenient.as_ref().ok().map(|c| (r.n as f64, *c))).collect()),
        ("strict", RED, rows.iter().filter_map(|r| r.strict.as_ref().ok().map(|c| (r.n as f64, *c))).collect()),
        ("utility-linear", RGBColor(200, 160, 0), rows.iter().filter_map(|r| r.utility_linear.as_ref().ok().map(|c| (r.n as f64, *c))).collect()),
        ("second best", BLACK, rows.iter().filter_map(|r| r.second_best.as_ref().ok().map(|c| (r.n as f64, *c))).collect()),
        ("first best", RGBColor(120, 120, 120), rows.iter().map(|r| (r.n as f64, r.first_best)).collect()),
    ];
    let xs = rows.iter().map(|r| r.n as f64);
    let (x0, x1) = (xs.clone().fold(f64::INFINITY, f64::min), xs.fold(f64::NEG_INFINITY, f64::max));
    let ys = series.iter().flat_map(|s| s.2.iter().map(|p| p.1));
    let (y0, y1) = (ys.clone().fold(f64::INFINITY, f64::min), ys.fold(f64::NEG_INFINITY, f64::max).min(40.0));
    let plot_err = |e: String| Error::Plot(e);
    let mut buf = String::new();
    {
        let root = SVGBackend::with_string(&mut buf, (800, 500)).into_drawing_area();
        root.fill(&WHITE).map_err(|e| plot_err(e.to_string()))?;
        let mut chart = ChartBuilder::on(&root)
            .margin(20)
            .x_label_area_size(40)
            .y_label_area_size(60)
            .build_cartesian_2d(x0..x1.max(x0 + 1.0), (y0 * 0.98)..(y1 * 1.02))
            .map_err(|e| plot_err(e.to_string()))?;
        chart.configure_mesh().x_desc("n").y_desc("implementation cost").draw().map_err(|e| plot_err(e.to_string()))?;
        for (label, color, pts) in series {
            chart
                .draw_series(LineSeries::new(pts, color.stroke_width(2)))
                .map_err(|e| plot_err(e.to_string()))?
                .label(label)
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2)));
        }
        chart
            .configure_series_labels()
            .background_style(WHITE)
            .border_style(BLACK)
            .draw()
            .map_err(|e| plot_err(e.to_string()))?;
        root.present().map_err(|e| plot_err(e.to_string()))?;
    }
    Ok(buf)
}

fn run_figure1(cfg: &ExperimentConfig, sink: &mut Sink) -> Result<()> {
    let model = cfg.model()?;
    let rows = figure1_rows(&model, cfg.cutoffs, &cfg.grid()?)?;
    for r in &rows {
        for (col, c) in [("lenient", &r.lenient), ("strict", &r.strict), ("utility_linear", &r.utility_linear), ("second_best", &r.second_best)] {
            let rec = CellRecord::from_result(&format!("figure1/{col}"), r.n, c);
            if rec.status != CellStatus::Ok {
                sink.outcome.cells.push(rec);
            }
        }
    }
    sink.outcome.cells.push(CellRecord { experiment: "figure1".into(), n: None, status: CellStatus::Ok, detail: format!("{} rows", rows.len()) });
    write_figure1_csv(&rows, sink.create("figure1.csv")?)?;
    if cfg.plot {
        let svg = figure1_svg(&rows)?;
        sink.write_string("figure1.svg", &svg)?;
    }
    sink.outcome.verdicts.extend(figure1_verdicts(&rows));
    Ok(())
}

fn record_skips(sink: &mut Sink, experiment: &str, skipped: &[(usize, String)]) {
    for (n, why) in skipped {
        sink.outcome.cells.push(CellRecord { experiment: experiment.into(), n: Some(*n), status: CellStatus::Infeasible, detail: why.clone() });
    }
}

fn run_rates(cfg: &ExperimentConfig, sink: &mut Sink) -> Result<()> {
    let model = cfg.model()?;
    let family = cfg.family.unwrap_or(ContractFamily::LenientBinary { epsilon: cfg.epsilon });
    let run = verify_rate(&model, family, &cfg.grid()?, &cfg.fit_options())?;
    record_skips(sink, "rates", &run.skipped);
    write_rate_csv(&run.report, sink.create("rates.csv")?)?;
    let r = &run.report;
    sink.outcome.summary.push(format!(
        "fitted rate {:.5}, theoretical {}, tail {:.5}, {} inversions",
        r.fitted_rate,
        r.theoretical_rate.map(|t| format!("{t:.5}")).unwrap_or_else(|| "n/a".into()),
        r.tail_value,
        r.inversions
    ));
    sink.outcome.verdicts.push(Verdict::new("rate", r.verdict, format!("tolerance {}", r.tolerance)));
    Ok(())
}

/// Solver diagnostics per `n`, the limit shape and the contract at the largest `n`.
fn run_second_best(cfg: &ExperimentConfig, sink: &mut Sink) -> Result<()> {
    const KKT_TOL: f64 = 1e-6;
    let model = cfg.model()?;
    let grid = cfg.grid()?;
    let cells: Vec<_> = grid
        .par_iter()
        .map(|&n| {
            let r = enumerate_types(&model.mt, n, DEFAULT_TYPE_CAP)
                .and_then(|sd| solve_second_best(&model, &sd, &SecondBestOptions::default()).map(|s| (s, sd)));
            (n, r)
        })
        .collect();
    let mut w = csv::Writer::from_writer(sink.create("second_best.csv")?);
    w.write_record(["n", "cost", "gap_log", "kkt_residual", "complementarity", "v_star_deviation", "polished", "cap_binding"])?;
    let mut solved = Vec::new();
    let mut worst = 0.0f64;
    for (n, r) in cells {
        sink.outcome.cells.push(CellRecord::from_result("second_best", n, &r));
        if let Ok((s, sd)) = r {
            let gap_log = if model.regime == Regime::Baseline { s.log_gap(&model, &sd) } else { (s.cost - model.first_best_cost()).ln() };
            w.write_record([
                n.to_string(),
                s.cost.to_string(),
                gap_log.to_string(),
                s.kkt_residual.to_string(),
                s.complementarity.to_string(),
                s.v_star_deviation.to_string(),
                s.polished.to_string(),
                s.cap_binding.to_string(),
            ])?;
            worst = worst.max(s.kkt_residual).max(s.complementarity);
            solved.push((s, sd));
        }
    }
    w.flush()?;
    drop(w);
    sink.outcome.verdicts.push(Verdict::new("second_best_kkt", !solved.is_empty() && worst < KKT_TOL, format!("largest residual {worst:e}")));
    if let Some((s, sd)) = solved.last() {
        write_contract_csv(&s.contract, &model, sd, sink.create(&format!("contract_n{}.csv", s.n))?)?;
    }
    if solved.len() >= 3 {
        let tail: Vec<_> = solved[solved.len() - 3..].iter().map(|(s, sd)| (s, sd)).collect();
        let shape = limit_shape(&tail, &model, cfg.shape_delta)?;
        let mut w = csv::Writer::from_writer(sink.create("shape.csv")?);
        w.write_record(["n", "high_mean", "low_mean", "high_error", "low_error", "multiplier_sum"])?;
        let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        for r in &shape.rows {
            w.write_record([r.n.to_string(), opt(r.high_mean), opt(r.low_mean), opt(r.high_error), opt(r.low_error), r.multiplier_sum.to_string()])?;
        }
        w.flush()?;
        sink.outcome.verdicts.push(Verdict::new("limit_shape", shape.passes(0.2), format!("monotone = {}", shape.monotone)));
    }
    Ok(())
}

fn run_linear(cfg: &ExperimentConfig, sink: &mut Sink) -> Result<()> {
    let model = cfg.model()?;
    let kind = cfg.linear_kind.unwrap_or(LinearKind::UtilityLinear);
    let grid = cfg.grid()?;
    let cells: Vec<_> = grid
        .par_iter()
        .map(|&n| (n, enumerate_types(&model.mt, n, DEFAULT_TYPE_CAP).and_then(|sd| solve_linear(&model, &sd, kind))))
        .collect();
    let fb = model.first_best_cost();
    let mut w = csv::Writer::from_writer(sink.create("linear.csv")?);
    let mut header = vec!["n".to_string(), "cost".into(), "gap".into(), "floor_active".into(), "local_optimum".into()];
    header.extend(model.mt.signals().iter().map(|s| format!("coef_{s}")));
    w.write_record(&header)?;
    let mut points = Vec::new();
    for (n, r) in cells {
        sink.outcome.cells.push(CellRecord::from_result("linear", n, &r));
        if let Ok(s) = r {
            let mut row = vec![n.to_string(), s.cost.to_string(), (s.cost - fb).to_string(), s.floor_active.to_string(), s.local_optimum.to_string()];
            row.extend(s.schedule.coefficients.iter().map(|c| c.to_string()));
            w.write_record(&row)?;
            points.push(GapPoint::from_difference(n, s.cost, fb));
        }
    }
    w.flush()?;
    drop(w);
    let report = fit_inverse_n(&points, fb, &cfg.fit_options())?;
    write_rate_csv(&report, sink.create("linear_rates.csv")?)?;
    sink.outcome.summary.push(format!("K = {:.5}, tail n·gap {:.5}", report.fitted_rate, report.tail_value));
    sink.outcome.verdicts.push(Verdict::new("inverse_n_scaling", report.verdict, format!("tolerance {}", report.tolerance)));
    Ok(())
}

fn run_rank(cfg: &ExperimentConfig, sink: &mut Sink) -> Result<()> {
    let first = cfg.technology()?;
    let second = cfg.table(cfg.compare.as_ref(), "compare")?;
    // Without costs every non-target action counts as a deviation.
    let minus: Vec<usize> = match cfg.preferences {
        Some(prefs) if !cfg.costs.is_empty() => cfg.model_with(prefs, Regime::Baseline)?.costs.a_minus(),
        _ => (0..first.num_actions()).filter(|&a| a != first.target()).collect(),
    };
    let r = rank_monitoring(&first, &second, &minus)?;
    let (a, b) = (cfg.technology.clone().unwrap_or_default(), cfg.compare.clone().unwrap_or_default());
    let line = match r.preferred {
        Preference::First => format!("{a} ≻ {b}, indices {:.2} vs {:.2}", r.index_first, r.index_second),
        Preference::Second => format!("{b} ≻ {a}, indices {:.2} vs {:.2}", r.index_second, r.index_first),
        Preference::Tie => format!("{a} ~ {b}, indices {:.2} vs {:.2}", r.index_first, r.index_second),
    };
    let mut w = csv::Writer::from_writer(sink.create("rank.csv")?);
    w.write_record(["technology", "index", "preferred"])?;
    w.write_record([a.clone(), r.index_first.to_string(), (r.preferred == Preference::First).to_string()])?;
    w.write_record([b, r.index_second.to_string(), (r.preferred == Preference::Second).to_string()])?;
    w.flush()?;
    drop(w);
    sink.write_string("rank.txt", &format!("{line}\n"))?;
    sink.outcome.summary.push(line);
    Ok(())
}

/// Lenient-binary rates under limited liability and in the baseline, with both theoretical rates.
fn run_limited_liability(cfg: &ExperimentConfig, sink: &mut Sink) -> Result<()> {
    if cfg.regime != Regime::LimitedLiability {
        return Err(Error::Config("limited_liability needs `regime: limited_liability`".into()));
    }
    let ll = cfg.model()?;
    let base = cfg.model_with(cfg.baseline_preferences.or(cfg.preferences).expect("checked by model()"), Regime::Baseline)?;
    let grid = cfg.grid()?;
    let family = ContractFamily::LenientBinary { epsilon: cfg.epsilon };
    let opts = cfg.fit_options();
    let ll_run = verify_rate(&ll, family, &grid, &opts)?;
    let base_run = verify_rate(&base, family, &grid, &opts)?;
    record_skips(sink, "limited_liability", &ll_run.skipped);
    record_skips(sink, "baseline", &base_run.skipped);
    write_rate_csv(&ll_run.report, sink.create("limited_liability_rates.csv")?)?;
    write_rate_csv(&base_run.report, sink.create("baseline_rates.csv")?)?;
    let mt = &ll.mt;
    let a_hat = ll.costs.cheapest()?;
    let ch = chernoff(mt.dist(a_hat), mt.dist(mt.target()))?;
    let k = ll.costs.a_minus().iter().map(|&a| kl(mt.dist(a), mt.dist(mt.target()))).collect::<Result<Vec<_>>>()?.into_iter().fold(f64::INFINITY, f64::min);
    let (fl, fb) = (ll_run.report.fitted_rate, base_run.report.fitted_rate);
    sink.outcome.summary.push(format!("fitted {fl:.5} (limited liability) vs {fb:.5} (baseline); Chernoff {ch:.5} vs KL {k:.5}"));
    sink.outcome.verdicts.push(Verdict::new("limited_liability_slower", fl < fb, format!("{fl} < {fb}")));
    sink.outcome.verdicts.push(Verdict::new("chernoff_below_kl", ch < k, format!("{ch} < {k}")));
    Ok(())
}

fn run_adjustable(cfg: &ExperimentConfig, sink: &mut Sink) -> Result<()> {
    let model = cfg.model()?;
    let ac = cfg.adjustable.as_ref().ok_or_else(|| Error::Config("`adjustable` block is required".into()))?;
    let payoffs = model
        .mt
        .actions()
        .iter()
        .map(|a| ac.payoffs.get(a).copied().ok_or_else(|| Error::Config(format!("no payoff for action `{a}`"))))
        .collect::<Result<Vec<_>>>()?;
    let grid = cfg.grid()?;
    let opts = cfg.fit_options();
    let mut runs: Vec<AdjustableRun> = Vec::new();
    for &t in &ac.periods {
        let ap = AdjustableProblem::new(model.clone(), t, payoffs.clone())?;
        let g: Vec<usize> = grid.iter().copied().filter(|n| n % t == 0).collect();
        let run = verify_adjustable_rate(&ap, cfg.epsilon, &g, &opts)?;
        record_skips(sink, &format!("adjustable/T{t}"), &run.skipped);
        write_rate_csv(&run.report, sink.create(&format!("adjustable_T{t}_rates.csv"))?)?;
        if let Some(last) = run.contracts.last() {
            write_gains_csv(&one_shot_deviation_gains(last, &ap), &ap, sink.create(&format!("adjustable_T{t}_gains.csv"))?)?;
        }
        sink.outcome.verdicts.push(Verdict::new(
            &format!("adjustable_T{t}_incentives"),
            run.certified(),
            format!("max gain {:e}, max |IR| {:e}", run.max_gain, run.max_ir_violation),
        ));
        sink.outcome.summary.push(format!("T = {t}: fitted rate {:.5}, theoretical {:.5}", run.report.fitted_rate, run.report.theoretical_rate.unwrap_or(f64::NAN)));
        runs.push(run);
    }
    if let Some(one) = runs.iter().find(|r| r.periods == 1) {
        for r in runs.iter().filter(|r| r.periods > 1) {
            let ratio = r.report.fitted_rate / one.report.fitted_rate;
            let t = r.periods as f64;
            sink.outcome.verdicts.push(Verdict::new(
                &format!("adjustable_T{}_rate_ratio", r.periods),
                ratio >= 0.8 / t && ratio <= 1.2 / t,
                format!("ratio {ratio:.4}, target {:.4}", 1.0 / t),
            ));
        }
    }
    Ok(())
}

fn run_oracles(cfg: &ExperimentConfig, sink: &mut Sink) -> Result<()> {
    let checks = run_oracle_suite();
    write_oracle_csv(&checks, sink.create("oracle.csv")?)?;
    let props = divergence_property_suite(cfg.property_technologies, cfg.seed)?;
    let mut w = csv::Writer::from_writer(sink.create("properties.csv")?);
    w.write_record(["property", "checked", "failures", "worst"])?;
    for p in &props.properties {
        w.write_record([p.name.clone(), p.checked.to_string(), p.failures.to_string(), p.worst.to_string()])?;
    }
    w.flush()?;
    let failed: Vec<&str> = checks.iter().filter(|c| !c.pass).map(|c| c.name.as_str()).collect();
    sink.outcome.summary.push(format!("{} of {} oracle checks pass", checks.len() - failed.len(), checks.len()));
    sink.outcome.verdicts.push(Verdict::new("oracles", failed.is_empty(), format!("failed: {failed:?}")));
    sink.outcome.verdicts.push(Verdict::new("divergence_properties", props.passes(), format!("{} technologies", props.technologies)));
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
struct Manifest<'a> {
    config: &'a ExperimentConfig,
    config_sha256: String,
    versions: BTreeMap<&'static str, &'static str>,
    started_unix: u64,
    wall_clock_seconds: f64,
    threads: usize,
    outcome: &'a RunOutcome,
    aborted: Option<String>,
}

/// Runs one experiment into `out_dir` (the configured directory when `None`).
///
/// A failure that aborts the experiment is recorded in the manifest and
/// also returned in the outcome as a failing verdict.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<RunOutcome> {
    let dir = out_dir.unwrap_or(&cfg.output_dir);
    fs::create_dir_all(dir)?;
    let started = Instant::now();
    let started_unix = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let mut sink = Sink { dir, outcome: RunOutcome::default() };
    let result = match cfg.kind {
        ExperimentKind::Figure1 => run_figure1(cfg, &mut sink),
        ExperimentKind::Rates => run_rates(cfg, &mut sink),
        ExperimentKind::SecondBest => run_second_best(cfg, &mut sink),
        ExperimentKind::Linear => run_linear(cfg, &mut sink),
        ExperimentKind::Rank => run_rank(cfg, &mut sink),
        ExperimentKind::LimitedLiability => run_limited_liability(cfg, &mut sink),
        ExperimentKind::Adjustable => run_adjustable(cfg, &mut sink),
        ExperimentKind::OracleSuite => run_oracles(cfg, &mut sink),
    };
    let aborted = result.as_ref().err().map(|e| e.to_string());
    if let Some(msg) = &aborted {
        log::error!("{} aborted: {msg}", cfg.kind.name());
        sink.outcome.cells.push(CellRecord { experiment: cfg.kind.name().into(), n: None, status: CellStatus::Error, detail: msg.clone() });
        sink.outcome.verdicts.push(Verdict::new(cfg.kind.name(), false, msg.clone()));
    }
    let outcome = sink.outcome;
    let manifest = Manifest {
        config: cfg,
        config_sha256: cfg.hash()?,
        versions: BTreeMap::from([("richmon", env!("CARGO_PKG_VERSION"))]),
        started_unix,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        threads: rayon::current_num_threads(),
        outcome: &outcome,
        aborted,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIGURE1: &str = r#"{
        "kind": "figure1",
        "technologies": {
            "fig1": {
                "signals": ["low", "high"],
                "actions": ["shirk", "work"],
                "target": "work",
                "distributions": {"shirk": [0.7, 0.3], "work": [0.3, 0.7]}
            }
        },
        "technology": "fig1",
        "preferences": {"family": "log", "wage_floor": 0.1},
        "costs": {"shirk": 0.0, "work": 2.0},
        "n_grid": {"start": 5, "stop": 30, "step": 5}
    }"#;

    #[test]
    fn parses_and_builds_the_reference_model() {
        let cfg = ExperimentConfig::from_json(FIGURE1).unwrap();
        assert_eq!(cfg.model().unwrap(), crate::model::figure_one());
        assert_eq!(cfg.grid().unwrap(), vec![5, 10, 15, 20, 25, 30]);
        assert_eq!(cfg.hash().unwrap().len(), 64);
    }

    #[test]
    fn rejects_unknown_fields_and_labels() {
        assert!(ExperimentConfig::from_json(&FIGURE1.replace("\"costs\"", "\"cost\"")).is_err());
        let cfg = ExperimentConfig::from_json(&FIGURE1.replace("\"target\": \"work\"", "\"target\": \"rest\"")).unwrap();
        assert!(matches!(cfg.model(), Err(Error::UnknownLabel(_))));
    }

    #[test]
    fn figure1_rejects_three_signals() {
        let mut cfg = ExperimentConfig::from_json(FIGURE1).unwrap();
        let t = cfg.technologies.get_mut("fig1").unwrap();
        t.signals.push("mid".into());
        t.distributions.insert("shirk".into(), vec![0.6, 0.3, 0.1]);
        t.distributions.insert("work".into(), vec![0.2, 0.7, 0.1]);
        let err = figure1_rows(&cfg.model().unwrap(), Cutoffs::default(), &[5]).unwrap_err();
        assert!(err.to_string().contains("two signals"), "{err}");
    }

    #[test]
    fn figure1_table_and_plot() {
        let cfg = ExperimentConfig::from_json(FIGURE1).unwrap();
        let rows = figure1_rows(&cfg.model().unwrap(), cfg.cutoffs, &cfg.grid().unwrap()).unwrap();
        let v = figure1_verdicts(&rows);
        assert!(v.iter().all(|v| v.pass), "{v:?}");
        let n5 = &rows[0];
        assert!((n5.lenient.as_ref().unwrap() - 8.11).abs() < 0.01);
        assert!((n5.strict.as_ref().unwrap() - 10.13).abs() < 0.01);
        let closed = (-1.5f64).exp() * (0.3 + 0.7 * 1f64.exp()).powi(5);
        assert!((n5.utility_linear.as_ref().unwrap() - closed).abs() < 1e-6 * closed);
        let svg = figure1_svg(&rows).unwrap();
        assert!(svg.starts_with("<svg") && svg.contains("polyline"));
    }

    #[test]
    fn grid_validation() {
        assert!(NGrid::List(vec![3, 2]).values().is_err());
        assert!(NGrid::Range { start: 1, stop: 5, step: 0 }.values().is_err());
        assert_eq!(NGrid::Range { start: 2, stop: 7, step: 2 }.values().unwrap(), vec![2, 4, 6]);
    }
}
