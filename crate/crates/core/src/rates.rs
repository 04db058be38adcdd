//! Empirical decay rates of cost gaps and their comparison with theory.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::contracts::{build_binary_test, lenient_thresholds, LinearKind};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::monitoring::theoretical_rate;
use crate::numeric::least_squares;
use crate::preferences::Regime;
use crate::score_dist::{enumerate_types, DEFAULT_TYPE_CAP};
use crate::solvers::{best_binary, solve_linear, solve_second_best, SecondBestOptions, SecondBestSolution};

/// Gaps computed by subtraction below this multiple of the first-best cost are noise.
pub const NOISE_FLOOR: f64 = 1e-14;
/// Relative tolerance on exponential rates.
pub const DEFAULT_TOLERANCE: f64 = 0.15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitMode {
    Exponential,
    OneOverN,
}

/// One cost gap `C_n − C_FB`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GapPoint {
    pub n: usize,
    pub gap: f64,
    pub log_gap: f64,
    /// The log-gap was computed without cancellation.
    pub exact: bool,
}

impl GapPoint {
    pub fn from_difference(n: usize, cost: f64, first_best: f64) -> Self {
        let gap = cost - first_best;
        Self { n, gap, log_gap: if gap > 0.0 { gap.ln() } else { f64::NAN }, exact: false }
    }

    pub fn from_log(n: usize, log_gap: f64) -> Self {
        Self { n, gap: log_gap.exp(), log_gap, exact: true }
    }

    /// Usable in a fit: finite and, when subtracted, above the noise floor.
    fn usable(&self, first_best: f64) -> bool {
        self.log_gap.is_finite() && (self.exact || self.gap > NOISE_FLOOR * first_best.abs())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    /// Inclusive `n` range used for the regression; `None` uses everything.
    pub window: Option<(usize, usize)>,
    /// Trailing window length for local slopes; `0` uses consecutive points.
    pub slope_span: usize,
    /// Report local slopes only at multiples of this `n`.
    pub slope_stride: usize,
    /// Number of trailing local values checked for trend or stability.
    pub tail_points: usize,
    pub tolerance: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { window: None, slope_span: 0, slope_stride: 1, tail_points: 10, tolerance: DEFAULT_TOLERANCE }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateReport {
    pub mode: FitMode,
    /// Exponential: least-squares slope of `−ln gap` on `n`. One-over-n: `K` in `gap ≈ K/n`.
    pub fitted_rate: f64,
    pub theoretical_rate: Option<f64>,
    pub fit_window: (usize, usize),
    /// Regression R².
    pub residual: f64,
    /// `(n, slope)` local slopes of `−ln gap`.
    pub local_slopes: Vec<(usize, f64)>,
    /// `(n, n·gap)`.
    pub scaled_gaps: Vec<(usize, f64)>,
    /// Last local slope (exponential) or last `n·gap` (one-over-n).
    pub tail_value: f64,
    /// Steps in the tail that move away from the theoretical rate.
    pub inversions: usize,
    pub tolerance: f64,
    pub verdict: bool,
    /// Points excluded from the fit.
    pub dropped: Vec<usize>,
    pub points: Vec<GapPoint>,
}

fn usable_points(points: &[GapPoint], first_best: f64) -> (Vec<GapPoint>, Vec<usize>) {
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for p in points {
        if p.usable(first_best) {
            kept.push(*p);
        } else {
            log::info!("gap at n = {} dropped: {:e}", p.n, p.gap);
            dropped.push(p.n);
        }
    }
    (kept, dropped)
}

fn in_window(p: &GapPoint, w: Option<(usize, usize)>) -> bool {
    w.is_none_or(|(lo, hi)| p.n >= lo && p.n <= hi)
}

/// Local slopes of `−ln gap`: consecutive differences when `span` is 0,
/// otherwise least squares over the trailing window `(n − span, n]`, kept
/// only once the window is full. With `stride > 1` only multiples of it are reported.
pub fn local_slopes(points: &[GapPoint], span: usize, stride: usize) -> Vec<(usize, f64)> {
    let mut out = Vec::new();
    for i in 1..points.len() {
        let n = points[i].n;
        if stride > 1 && !n.is_multiple_of(stride) {
            continue;
        }
        if span == 0 {
            let dn = (n - points[i - 1].n) as f64;
            out.push((n, -(points[i].log_gap - points[i - 1].log_gap) / dn));
            continue;
        }
        if n < points[0].n + span - 1 {
            continue;
        }
        let win: Vec<&GapPoint> = points[..=i].iter().filter(|p| p.n + span > n).collect();
        if win.len() >= 2 {
            let xs: Vec<f64> = win.iter().map(|p| p.n as f64).collect();
            let ys: Vec<f64> = win.iter().map(|p| -p.log_gap).collect();
            out.push((n, least_squares(&xs, &ys).0));
        }
    }
    out
}

/// Exponential decay rate of a gap sequence.
pub fn fit_exponential_rate(
    points: &[GapPoint],
    first_best: f64,
    theoretical: Option<f64>,
    opts: &FitOptions,
) -> Result<RateReport> {
    let mut sorted = points.to_vec();
    sorted.sort_by_key(|p| p.n);
    let (kept, dropped) = usable_points(&sorted, first_best);
    let fit: Vec<GapPoint> = kept.iter().copied().filter(|p| in_window(p, opts.window)).collect();
    if fit.len() < 4 {
        return Err(Error::InsufficientData(format!("{} usable gaps in the fit window; four are needed", fit.len())));
    }
    let xs: Vec<f64> = fit.iter().map(|p| p.n as f64).collect();
    let ys: Vec<f64> = fit.iter().map(|p| -p.log_gap).collect();
    let (slope, _, r2) = least_squares(&xs, &ys);
    let slopes = local_slopes(&kept, opts.slope_span, opts.slope_stride);
    let tail: Vec<f64> = slopes.iter().rev().take(opts.tail_points).rev().map(|s| s.1).collect();
    let tail_value = tail.last().copied().unwrap_or(slope);
    let (inversions, verdict) = match theoretical {
        Some(th) => {
            let dist: Vec<f64> = tail.iter().map(|s| (s - th).abs()).collect();
            let inv = dist.windows(2).filter(|w| w[1] > w[0] + 1e-12 * th.abs()).count();
            let close = (tail_value - th).abs() <= opts.tolerance * th.abs();
            (inv, close && inv <= 1 && !tail.is_empty())
        }
        None => (0, slope.is_finite() && slope > 0.0),
    };
    Ok(RateReport {
        mode: FitMode::Exponential,
        fitted_rate: slope,
        theoretical_rate: theoretical,
        fit_window: (fit[0].n, fit[fit.len() - 1].n),
        residual: r2,
        local_slopes: slopes,
        scaled_gaps: kept.iter().map(|p| (p.n, p.n as f64 * p.gap)).collect(),
        tail_value,
        inversions,
        tolerance: opts.tolerance,
        verdict,
        dropped,
        points: sorted,
    })
}

/// `K` in `gap ≈ K/n + O(1/n²)` by regression of `n·gap` on `1/n`, plus
/// stability of `n·gap` over the tail (consecutive ratios within `1 ± tolerance`).
pub fn fit_inverse_n(points: &[GapPoint], first_best: f64, opts: &FitOptions) -> Result<RateReport> {
    let mut sorted = points.to_vec();
    sorted.sort_by_key(|p| p.n);
    let (kept, dropped) = usable_points(&sorted, first_best);
    let fit: Vec<GapPoint> = kept.iter().copied().filter(|p| in_window(p, opts.window)).collect();
    if fit.len() < 4 {
        return Err(Error::InsufficientData(format!("{} usable gaps in the fit window; four are needed", fit.len())));
    }
    // n·gap = K + b/n + …, so K is the intercept of n·gap on 1/n.
    let inv: Vec<f64> = fit.iter().map(|p| 1.0 / p.n as f64).collect();
    let ng: Vec<f64> = fit.iter().map(|p| p.n as f64 * p.gap).collect();
    let (_, k, r2) = least_squares(&inv, &ng);
    let scaled: Vec<(usize, f64)> = kept.iter().map(|p| (p.n, p.n as f64 * p.gap)).collect();
    let tail: Vec<f64> = scaled.iter().rev().take(opts.tail_points).rev().map(|s| s.1).collect();
    let ratios_ok = tail.windows(2).all(|w| {
        let r = w[1] / w[0];
        r >= 1.0 - opts.tolerance && r <= 1.0 + opts.tolerance
    });
    let verdict = tail.len() >= 2 && tail.iter().all(|v| *v > 0.0) && ratios_ok;
    Ok(RateReport {
        mode: FitMode::OneOverN,
        fitted_rate: k,
        theoretical_rate: None,
        fit_window: (fit[0].n, fit[fit.len() - 1].n),
        residual: r2,
        local_slopes: local_slopes(&kept, opts.slope_span, opts.slope_stride),
        scaled_gaps: scaled,
        tail_value: tail.last().copied().unwrap_or(k),
        inversions: 0,
        tolerance: opts.tolerance,
        verdict,
        dropped,
        points: sorted,
    })
}

/// Contract family whose gap sequence is fitted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ContractFamily {
    /// Lenient thresholds `E_a[L] + ε n^{-1/3}(E_{a*}[L] − E_a[L])`.
    LenientBinary { epsilon: f64 },
    BestBinary,
    SecondBest,
    UtilityLinear,
    WageLinear,
}

impl ContractFamily {
    pub fn mode(&self) -> FitMode {
        match self {
            Self::UtilityLinear | Self::WageLinear => FitMode::OneOverN,
            _ => FitMode::Exponential,
        }
    }
}

/// Gap of one family at one `n`.
pub fn family_gap(model: &Model, family: ContractFamily, n: usize) -> Result<GapPoint> {
    let sd = enumerate_types(&model.mt, n, DEFAULT_TYPE_CAP)?;
    let fb = model.first_best_cost();
    Ok(match family {
        ContractFamily::LenientBinary { epsilon } => {
            let bt = build_binary_test(model, &sd, &lenient_thresholds(model, epsilon, n)?)?;
            GapPoint::from_log(n, bt.log_cost_gap(&model.prefs))
        }
        ContractFamily::BestBinary => GapPoint::from_log(n, best_binary(model, &sd)?.log_gap),
        ContractFamily::SecondBest => {
            let sb = solve_second_best(model, &sd, &SecondBestOptions::default())?;
            match model.regime {
                Regime::Baseline => {
                    let lg = sb.log_gap(model, &sd);
                    if lg > SecondBestSolution::log_gap_resolution(model) {
                        GapPoint::from_log(n, lg)
                    } else {
                        GapPoint { n, gap: lg.exp(), log_gap: lg, exact: false }
                    }
                }
                Regime::LimitedLiability => GapPoint::from_difference(n, sb.cost, fb),
            }
        }
        ContractFamily::UtilityLinear => GapPoint::from_difference(n, solve_linear(model, &sd, LinearKind::UtilityLinear)?.cost, fb),
        ContractFamily::WageLinear => GapPoint::from_difference(n, solve_linear(model, &sd, LinearKind::WageLinear)?.cost, fb),
    })
}

/// Result of a rate verification run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateRun {
    pub family: ContractFamily,
    pub report: RateReport,
    /// Cells where no contract of the family exists, with the reason.
    pub skipped: Vec<(usize, String)>,
}

/// Gap sequence of a family over `n_grid`, fitted against the theoretical rate.
///
/// Cells where the family has no valid contract (too small `n`) are skipped
/// and listed; other errors propagate.
pub fn verify_rate(model: &Model, family: ContractFamily, n_grid: &[usize], opts: &FitOptions) -> Result<RateRun> {
    let cells: Vec<(usize, Result<GapPoint>)> = n_grid.par_iter().map(|&n| (n, family_gap(model, family, n))).collect();
    let mut points = Vec::new();
    let mut skipped = Vec::new();
    for (n, r) in cells {
        match r {
            Ok(p) => points.push(p),
            Err(e @ (Error::NTooSmall { .. } | Error::ThresholdOutsideBand(_) | Error::ContractInfeasible { .. } | Error::Infeasible(_))) => {
                log::info!("n = {n} skipped: {e}");
                skipped.push((n, e.to_string()));
            }
            Err(e) => return Err(e),
        }
    }
    let fb = model.first_best_cost();
    let report = match family.mode() {
        FitMode::Exponential => {
            let th = theoretical_rate(&model.mt, &model.costs, model.regime)?;
            fit_exponential_rate(&points, fb, Some(th), opts)?
        }
        FitMode::OneOverN => fit_inverse_n(&points, fb, opts)?,
    };
    Ok(RateRun { family, report, skipped })
}

/// Rate table with columns `n, gap, log_gap, local_slope, fitted_rate, theoretical_rate, verdict`.
pub fn write_rate_csv<W: Write>(report: &RateReport, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["n", "gap", "log_gap", "local_slope", "fitted_rate", "theoretical_rate", "verdict"])?;
    for p in &report.points {
        let slope = report.local_slopes.iter().find(|s| s.0 == p.n).map(|s| s.1.to_string()).unwrap_or_default();
        w.write_record([
            p.n.to_string(),
            p.gap.to_string(),
            p.log_gap.to_string(),
            slope,
            report.fitted_rate.to_string(),
            report.theoretical_rate.map(|t| t.to_string()).unwrap_or_default(),
            if report.verdict { "pass" } else { "fail" }.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic(f: impl Fn(f64) -> f64) -> Vec<GapPoint> {
        (1..=40).map(|i| GapPoint::from_log(10 * i, f(10.0 * i as f64))).collect()
    }

    #[test]
    fn exact_exponential() {
        let pts = synthetic(|n| -0.3389 * n);
        let r = fit_exponential_rate(&pts, 1.0, Some(0.3389), &FitOptions::default()).unwrap();
        assert!((r.fitted_rate - 0.3389).abs() < 1e-6);
        assert!(r.verdict);
    }

    #[test]
    fn log_correction_approaches_from_below() {
        let pts = synthetic(|n| n.ln() - 0.3 * n);
        let r = fit_exponential_rate(&pts, 1.0, Some(0.3), &FitOptions::default()).unwrap();
        assert!(r.local_slopes.windows(2).all(|w| w[1].1 > w[0].1 && w[1].1 < 0.3));
        assert_eq!(r.inversions, 0);
    }

    #[test]
    fn scale_equivariance() {
        let a = synthetic(|n| n.ln() - 0.25 * n);
        let b: Vec<GapPoint> = a.iter().map(|p| GapPoint::from_log(p.n, p.log_gap + 7.0)).collect();
        let ra = fit_exponential_rate(&a, 1.0, Some(0.25), &FitOptions::default()).unwrap();
        let rb = fit_exponential_rate(&b, 1.0, Some(0.25), &FitOptions::default()).unwrap();
        assert!((ra.fitted_rate - rb.fitted_rate).abs() < 1e-10);
        assert_eq!(ra.verdict, rb.verdict);
    }

    #[test]
    fn inverse_n() {
        let pts: Vec<GapPoint> = (1..=30).map(|i| GapPoint::from_difference(10 * i, 1.0 + 3.0 / (10 * i) as f64, 1.0)).collect();
        let r = fit_inverse_n(&pts, 1.0, &FitOptions { tail_points: 5, tolerance: 0.1, ..Default::default() }).unwrap();
        assert!((r.fitted_rate - 3.0).abs() < 1e-9);
        assert!(r.verdict);
        let pts: Vec<GapPoint> =
            (1..=30).map(|i| GapPoint::from_difference(10 * i, 1.0 + 3.0 / (10 * i) as f64 + 5.0 / ((10 * i) as f64).powi(2), 1.0)).collect();
        let r = fit_inverse_n(&pts, 1.0, &FitOptions::default()).unwrap();
        assert!((r.fitted_rate - 3.0).abs() < 1e-9);
        let ng: Vec<f64> = r.scaled_gaps.iter().map(|p| p.1).collect();
        assert!(ng.windows(2).all(|w| w[1] < w[0] && w[1] > 3.0));
    }

    #[test]
    fn noise_floor_drops_points() {
        let mut pts = synthetic(|n| -0.1 * n);
        pts.push(GapPoint::from_difference(500, 1.0 + 1e-16, 1.0));
        pts.push(GapPoint::from_difference(510, 1.0, 1.0));
        let r = fit_exponential_rate(&pts, 1.0, None, &FitOptions::default()).unwrap();
        assert_eq!(r.dropped, vec![500, 510]);
        assert!((r.fitted_rate - 0.1).abs() < 1e-9);
    }

    #[test]
    fn too_few_points() {
        let pts = synthetic(|n| -n)[..3].to_vec();
        assert!(matches!(fit_exponential_rate(&pts, 1.0, None, &FitOptions::default()), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn csv_columns() {
        let pts = synthetic(|n| -0.2 * n);
        let r = fit_exponential_rate(&pts, 1.0, Some(0.2), &FitOptions::default()).unwrap();
        let mut buf = Vec::new();
        write_rate_csv(&r, &mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("n,gap,log_gap,local_slope,fitted_rate,theoretical_rate,verdict\n"));
        assert_eq!(s.lines().count(), 41);
    }
}
