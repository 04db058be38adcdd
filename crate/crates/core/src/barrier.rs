//! Log-barrier interior method for smooth convex objectives under
//! linear inequality rows and a weighted box.
//!
//! Minimizes `f(x) − μ Σ ω_i ln(a_i·x − b_i) − μ Σ π_t [ln(x_t − l_t) + ln(u_t − x_t)]`
//! by damped Newton steps for a geometrically decreasing `μ`. Duals are
//! recovered as `μ ω_i / s_i` and `μ π_t / (x_t − l_t)`, so the duality
//! gap of an exactly centred iterate is `μ (Σ ω + 2 Σ π)`.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};

/// Hessian of the objective.
pub enum Hessian {
    Diagonal(Vec<f64>),
    Dense(DMatrix<f64>),
}

pub trait Objective {
    fn value(&self, x: &[f64]) -> f64;
    fn gradient(&self, x: &[f64]) -> Vec<f64>;
    fn hessian(&self, x: &[f64]) -> Hessian;
}

/// Constraint `a·x ≥ b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub a: Vec<f64>,
    pub b: f64,
    pub weight: f64,
}

impl Row {
    pub fn slack(&self, x: &[f64]) -> f64 {
        dot(&self.a, x) - self.b
    }
}

pub struct Problem<'a, O: Objective> {
    pub objective: &'a O,
    pub rows: Vec<Row>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub box_weights: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Options {
    pub mu0: f64,
    pub shrink: f64,
    /// Stop once `μ (Σ ω + 2 Σ π)` falls below this.
    pub gap_tol: f64,
    pub max_newton: usize,
    pub max_outer: usize,
}

impl Default for Options {
    fn default() -> Self {
        Self { mu0: 1.0, shrink: 0.2, gap_tol: 1e-9, max_newton: 200, max_outer: 200 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRow {
    pub outer: usize,
    pub mu: f64,
    pub newton_steps: usize,
    pub barrier_value: f64,
    pub objective: f64,
    pub decrement: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub x: Vec<f64>,
    pub row_duals: Vec<f64>,
    pub lower_duals: Vec<f64>,
    pub upper_duals: Vec<f64>,
    pub mu: f64,
    pub duality_gap: f64,
    pub objective: f64,
    pub newton_steps: usize,
    pub trace: Vec<TraceRow>,
    /// Whether the active-set polish replaced the barrier iterate.
    pub polished: bool,
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl<'a, O: Objective> Problem<'a, O> {
    fn dim(&self) -> usize {
        self.lower.len()
    }

    fn strictly_feasible(&self, x: &[f64]) -> bool {
        x.iter().zip(self.lower.iter().zip(&self.upper)).all(|(v, (l, u))| v > l && v < u)
            && self.rows.iter().all(|r| r.slack(x) > 0.0)
    }

    fn barrier(&self, x: &[f64], mu: f64) -> f64 {
        if !self.strictly_feasible(x) {
            return f64::INFINITY;
        }
        let mut s = self.objective.value(x);
        for r in &self.rows {
            s -= mu * r.weight * r.slack(x).ln();
        }
        for (t, &w) in self.box_weights.iter().enumerate() {
            if w > 0.0 {
                s -= mu * w * ((x[t] - self.lower[t]).ln() + (self.upper[t] - x[t]).ln());
            }
        }
        s
    }

    /// Gradient of the barrier function.
    pub fn barrier_gradient(&self, x: &[f64], mu: f64) -> Vec<f64> {
        let mut g = self.objective.gradient(x);
        for r in &self.rows {
            let c = mu * r.weight / r.slack(x);
            for (gt, at) in g.iter_mut().zip(&r.a) {
                *gt -= c * at;
            }
        }
        for t in 0..self.dim() {
            let w = mu * self.box_weights[t];
            g[t] += -w / (x[t] - self.lower[t]) + w / (self.upper[t] - x[t]);
        }
        g
    }

    fn newton_direction(&self, x: &[f64], mu: f64, g: &[f64]) -> Result<Vec<f64>> {
        let n = self.dim();
        let box_curv: Vec<f64> = (0..n)
            .map(|t| {
                let w = mu * self.box_weights[t];
                let (dl, du) = (x[t] - self.lower[t], self.upper[t] - x[t]);
                w / (dl * dl) + w / (du * du)
            })
            .collect();
        // Columns u_i = sqrt(μ ω_i) a_i / s_i.
        let cols: Vec<Vec<f64>> = self
            .rows
            .iter()
            .map(|r| {
                let c = (mu * r.weight).sqrt() / r.slack(x);
                r.a.iter().map(|v| v * c).collect()
            })
            .collect();
        match self.objective.hessian(x) {
            Hessian::Diagonal(h) => {
                let d: Vec<f64> = h.iter().zip(&box_curv).map(|(a, b)| a + b).collect();
                if d.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
                    return Err(Error::Solver("non-positive diagonal curvature".into()));
                }
                let m = cols.len();
                let mut cap = DMatrix::<f64>::identity(m, m);
                for i in 0..m {
                    for j in 0..=i {
                        let v: f64 = (0..n).map(|t| cols[i][t] * cols[j][t] / d[t]).sum();
                        cap[(i, j)] += v;
                        if i != j {
                            cap[(j, i)] += v;
                        }
                    }
                }
                let chol = cap.cholesky().ok_or_else(|| Error::Solver("capacitance matrix not positive definite".into()))?;
                // Woodbury: H⁻¹ r = D⁻¹r − D⁻¹U (I + UᵀD⁻¹U)⁻¹ UᵀD⁻¹r.
                let solve = |r: &[f64]| -> Vec<f64> {
                    let dr: Vec<f64> = r.iter().zip(&d).map(|(a, b)| a / b).collect();
                    let ut = DVector::from_iterator(m, cols.iter().map(|c| dot(c, &dr)));
                    let y = chol.solve(&ut);
                    let mut out = dr;
                    for (i, c) in cols.iter().enumerate() {
                        for t in 0..n {
                            out[t] -= c[t] * y[i] / d[t];
                        }
                    }
                    out
                };
                let apply = |v: &[f64]| -> Vec<f64> {
                    let mut out: Vec<f64> = v.iter().zip(&d).map(|(a, b)| a * b).collect();
                    for c in &cols {
                        let s = dot(c, v);
                        for t in 0..n {
                            out[t] += c[t] * s;
                        }
                    }
                    out
                };
                let neg_g: Vec<f64> = g.iter().map(|v| -v).collect();
                let mut dx = solve(&neg_g);
                // One step of iterative refinement.
                let hd = apply(&dx);
                let res: Vec<f64> = neg_g.iter().zip(&hd).map(|(a, b)| a - b).collect();
                let corr = solve(&res);
                for (a, b) in dx.iter_mut().zip(corr) {
                    *a += b;
                }
                Ok(dx)
            }
            Hessian::Dense(mut h) => {
                for t in 0..n {
                    h[(t, t)] += box_curv[t];
                }
                for c in &cols {
                    for i in 0..n {
                        for j in 0..n {
                            h[(i, j)] += c[i] * c[j];
                        }
                    }
                }
                let rhs = DVector::from_iterator(n, g.iter().map(|v| -v));
                let sol = match h.clone().cholesky() {
                    Some(ch) => ch.solve(&rhs),
                    None => h.lu().solve(&rhs).ok_or_else(|| Error::Solver("singular Newton system".into()))?,
                };
                Ok(sol.iter().copied().collect())
            }
        }
    }

    fn max_step(&self, x: &[f64], dx: &[f64]) -> f64 {
        let mut a = f64::INFINITY;
        for t in 0..self.dim() {
            if dx[t] < 0.0 {
                a = a.min((x[t] - self.lower[t]) / -dx[t]);
            } else if dx[t] > 0.0 {
                a = a.min((self.upper[t] - x[t]) / dx[t]);
            }
        }
        for r in &self.rows {
            let d = dot(&r.a, dx);
            if d < 0.0 {
                a = a.min(r.slack(x) / -d);
            }
        }
        a
    }

    fn centre(&self, x: &mut Vec<f64>, mu: f64, max_newton: usize) -> Result<(usize, f64)> {
        let mut steps = 0;
        let mut dec = f64::INFINITY;
        let mut phi = self.barrier(x, mu);
        while steps < max_newton {
            let g = self.barrier_gradient(x, mu);
            let dx = self.newton_direction(x, mu, &g)?;
            dec = -dot(&g, &dx);
            if !dec.is_finite() {
                return Err(Error::Solver("Newton decrement is not finite".into()));
            }
            if dec < 1e-20 * mu {
                break;
            }
            steps += 1;
            let mut alpha = (0.99 * self.max_step(x, &dx)).min(1.0);
            let mut accepted = false;
            for _ in 0..80 {
                let trial: Vec<f64> = x.iter().zip(&dx).map(|(a, b)| a + alpha * b).collect();
                let v = self.barrier(&trial, mu);
                // Near the centre, rounding in φ swamps the Armijo test.
                let tiny = dec < 1e-8 * mu && alpha == 1.0 && self.strictly_feasible(&trial);
                if v <= phi - 1e-4 * alpha * dec || tiny {
                    *x = trial;
                    phi = v;
                    accepted = true;
                    break;
                }
                alpha *= 0.5;
            }
            if !accepted {
                break;
            }
            // Past this point the decrement is rounding noise from cancelled slacks.
            if dec < 1e-16 * mu || (steps >= 20 && dec < 1e-10 * mu) {
                break;
            }
        }
        Ok((steps, dec))
    }

    /// Solve from a strictly feasible starting point.
    ///
    /// Iterates internally on offsets `x − l`, so lower-box slacks and
    /// their duals carry full relative precision.
    pub fn solve(&self, x0: &[f64], opts: &Options) -> Result<Solution> {
        let dim = self.dim();
        if x0.len() != dim || self.upper.len() != dim || self.box_weights.len() != dim {
            return Err(Error::LengthMismatch("barrier problem dimensions disagree".into()));
        }
        if !self.strictly_feasible(x0) {
            return Err(Error::Infeasible("starting point is not strictly feasible".into()));
        }
        let shifted = Shifted { inner: self.objective, lower: &self.lower };
        let inner = Problem {
            objective: &shifted,
            rows: self
                .rows
                .iter()
                .map(|r| Row { a: r.a.clone(), b: r.b - dot(&r.a, &self.lower), weight: r.weight })
                .collect(),
            lower: vec![0.0; dim],
            upper: self.upper.iter().zip(&self.lower).map(|(u, l)| u - l).collect(),
            box_weights: self.box_weights.clone(),
        };
        let y0: Vec<f64> = x0.iter().zip(&self.lower).map(|(x, l)| x - l).collect();
        if !inner.strictly_feasible(&y0) {
            return Err(Error::Infeasible("starting point is too close to the lower bounds".into()));
        }
        let weight_sum: f64 =
            self.rows.iter().map(|r| r.weight).sum::<f64>() + 2.0 * self.box_weights.iter().sum::<f64>();
        let mut y = y0;
        let mut mu = opts.mu0;
        let mut trace = Vec::new();
        let mut total = 0;
        for outer in 0..opts.max_outer {
            let (steps, dec) = inner.centre(&mut y, mu, opts.max_newton)?;
            total += steps;
            trace.push(TraceRow {
                outer,
                mu,
                newton_steps: steps,
                barrier_value: inner.barrier(&y, mu),
                objective: shifted.value(&y),
                decrement: dec,
            });
            log::trace!("barrier outer {outer}: μ = {mu:e}, {steps} Newton steps, decrement {dec:e}");
            if mu * weight_sum < opts.gap_tol {
                break;
            }
            mu *= opts.shrink;
        }
        let lower_duals: Vec<f64> = (0..dim).map(|t| mu * self.box_weights[t] / y[t]).collect();
        let upper_duals: Vec<f64> = (0..dim).map(|t| mu * self.box_weights[t] / (inner.upper[t] - y[t])).collect();
        let row_duals = inner.recover_row_duals(&y, mu, &lower_duals, &upper_duals);
        let x: Vec<f64> = y.iter().zip(&self.lower).map(|(a, l)| a + l).collect();
        let sol = Solution {
            objective: self.objective.value(&x),
            x,
            row_duals,
            lower_duals,
            upper_duals,
            mu,
            duality_gap: mu * weight_sum,
            newton_steps: total,
            trace,
            polished: false,
        };
        Ok(match self.polish(&sol, &y, &inner) {
            Some(p) => p,
            None => {
                log::debug!("active-set polish rejected; keeping the barrier iterate");
                sol
            }
        })
    }

    /// Active-set Newton on the KKT equalities, started from the active set
    /// suggested by the barrier iterate (`s² < μ ω`). Coordinates that leave
    /// the box are pinned, pinned coordinates with wrong-signed multipliers
    /// are released, and rows with negative multipliers are dropped.
    /// Returns `None` if no consistent set is found.
    fn polish(&self, sol: &Solution, y: &[f64], inner: &Problem<'_, Shifted<'_, O>>) -> Option<Solution> {
        let n = self.dim();
        let mu = sol.mu;
        let mut act_rows: Vec<usize> = (0..self.rows.len())
            .filter(|&i| inner.rows[i].slack(y).powi(2) < mu * self.rows[i].weight)
            .collect();
        // 0 free, 1 at lower, 2 at upper.
        let mut state: Vec<u8> = (0..n)
            .map(|t| {
                let w = mu * self.box_weights[t].max(1e-300);
                let (dl, du) = (y[t], inner.upper[t] - y[t]);
                if dl * dl < w && dl < du {
                    1
                } else if du * du < w {
                    2
                } else {
                    0
                }
            })
            .collect();
        // Coordinates the barrier leaves blurred: a diagonal Newton step that
        // exits the box predicts the bound.
        let g0 = self.objective.gradient(&sol.x);
        let h0 = self.objective.hessian(&sol.x);
        for t in 0..n {
            if state[t] != 0 {
                continue;
            }
            let r = g0[t] - self.rows.iter().zip(&sol.row_duals).map(|(r, y)| y * r.a[t]).sum::<f64>();
            let htt = match &h0 {
                Hessian::Diagonal(d) => d[t],
                Hessian::Dense(m) => m[(t, t)],
            };
            if htt > 0.0 {
                let pred = sol.x[t] - r / htt;
                if pred <= self.lower[t] {
                    state[t] = 1;
                } else if pred >= self.upper[t] {
                    state[t] = 2;
                }
            }
        }
        let mut x: Vec<f64> = sol.x.clone();
        let mut row_duals = sol.row_duals.clone();
        for _round in 0..4 * n.max(8) {
            for t in 0..n {
                match state[t] {
                    1 => x[t] = self.lower[t],
                    2 => x[t] = self.upper[t],
                    _ => {}
                }
            }
            let free: Vec<usize> = (0..n).filter(|&t| state[t] == 0).collect();
            let mut dual: Vec<f64> = act_rows.iter().map(|&i| row_duals[i]).collect();
            match self.kkt_newton(&mut x, &mut dual, &free, &act_rows) {
                NewtonOutcome::Converged => {}
                NewtonOutcome::LeftBox(pinned) => {
                    for (t, side) in pinned {
                        state[t] = side;
                    }
                    continue;
                }
                NewtonOutcome::Failed => return None,
            }
            row_duals = vec![0.0; self.rows.len()];
            for (j, &i) in act_rows.iter().enumerate() {
                row_duals[i] = dual[j];
            }
            // Most negative row multiplier leaves the active set.
            if let Some((j, _)) = dual.iter().enumerate().filter(|d| *d.1 < 0.0).min_by(|a, b| a.1.total_cmp(b.1)) {
                act_rows.remove(j);
                continue;
            }
            // Most violated inactive row joins it.
            let violated = (0..self.rows.len())
                .filter(|i| !act_rows.contains(i))
                .map(|i| {
                    let r = &self.rows[i];
                    let scale = r.b.abs() + r.a.iter().zip(&x).map(|(a, v)| (a * v).abs()).sum::<f64>();
                    (i, r.slack(&x) / scale.max(1.0))
                })
                .filter(|v| v.1 < -1e-12)
                .min_by(|a, b| a.1.total_cmp(&b.1));
            if let Some((i, _)) = violated {
                act_rows.push(i);
                act_rows.sort_unstable();
                continue;
            }
            let g = self.objective.gradient(&x);
            let mut lower_duals = vec![0.0; n];
            let mut upper_duals = vec![0.0; n];
            let mut released = false;
            for t in 0..n {
                if state[t] == 0 {
                    continue;
                }
                let z = g[t] - self.rows.iter().zip(&row_duals).map(|(r, y)| y * r.a[t]).sum::<f64>();
                let signed = if state[t] == 1 { z } else { -z };
                if signed < -1e-12 * g[t].abs().max(1e-300) {
                    state[t] = 0;
                    released = true;
                } else if state[t] == 1 {
                    lower_duals[t] = z.max(0.0);
                } else {
                    upper_duals[t] = (-z).max(0.0);
                }
            }
            if released {
                continue;
            }
            return Some(Solution {
                objective: self.objective.value(&x),
                x,
                row_duals,
                lower_duals,
                upper_duals,
                mu: sol.mu,
                duality_gap: 0.0,
                newton_steps: sol.newton_steps,
                trace: sol.trace.clone(),
                polished: true,
            });
        }
        None
    }

    /// Newton on stationarity over `free` and equality of `rows`; steps that
    /// would leave the box are damped, and coordinates reaching it are reported.
    fn kkt_newton(&self, x: &mut [f64], dual: &mut [f64], free: &[usize], rows: &[usize]) -> NewtonOutcome {
        let k = rows.len();
        let nf = free.len();
        let af = DMatrix::<f64>::from_fn(k, nf, |j, f| self.rows[rows[j]].a[free[f]]);
        let mut polish_best: Option<(f64, Vec<f64>, Vec<f64>)> = None;
        let mut extra = 0;
        for _ in 0..300 {
            let g = self.objective.gradient(x);
            let mut r1: Vec<f64> = free.iter().map(|&t| g[t]).collect();
            // Per-coordinate magnitude, so tiny-weight coordinates are resolved too.
            let mut mag: Vec<f64> = r1.iter().map(|v| v.abs()).collect();
            for (j, &i) in rows.iter().enumerate() {
                for (f, &t) in free.iter().enumerate() {
                    r1[f] -= dual[j] * self.rows[i].a[t];
                    mag[f] += (dual[j] * self.rows[i].a[t]).abs();
                }
            }
            let r2: Vec<f64> = rows.iter().map(|&i| self.rows[i].slack(x)).collect();
            let bscale = rows.iter().map(|&i| self.rows[i].b.abs()).fold(1.0, f64::max);
            let res1 = r1.iter().zip(&mag).map(|(v, m)| v.abs() / m.max(1e-300)).fold(0.0, f64::max);
            let res2 = r2.iter().map(|v| v.abs()).fold(0.0, f64::max);
            let merit = res1.max(res2 / bscale);
            if let Some((best, ref bx, ref bd)) = polish_best {
                // Past tolerance: keep stepping only while rounding still improves.
                if merit >= 0.5 * best || extra >= 3 {
                    if merit > best {
                        x.copy_from_slice(bx);
                        dual.copy_from_slice(bd);
                    }
                    return NewtonOutcome::Converged;
                }
                extra += 1;
            }
            if merit <= 1e-12 && polish_best.as_ref().is_none_or(|b| merit < b.0) {
                polish_best = Some((merit, x.to_vec(), dual.to_vec()));
            }
            // [[H_FF, −A_Fᵀ], [A_F, 0]] (dx, dy) = −(r1, r2)
            let (dx, dy) = match self.objective.hessian(x) {
                Hessian::Diagonal(h) => {
                    let d: Vec<f64> = free.iter().map(|&t| h[t]).collect();
                    if d.iter().any(|v| !(*v > 0.0)) {
                        return NewtonOutcome::Failed;
                    }
                    let dinv_r1 = DVector::from_iterator(nf, r1.iter().zip(&d).map(|(a, b)| a / b));
                    let mut s = DMatrix::<f64>::zeros(k, k);
                    for p in 0..k {
                        for q in 0..k {
                            s[(p, q)] = (0..nf).map(|f| af[(p, f)] * af[(q, f)] / d[f]).sum();
                        }
                    }
                    let rhs = -DVector::from_vec(r2) + &af * &dinv_r1;
                    let dy = if k > 0 {
                        match s.lu().solve(&rhs) {
                            Some(v) => v,
                            None => return NewtonOutcome::Failed,
                        }
                    } else {
                        DVector::zeros(0)
                    };
                    let atdy = af.transpose() * &dy;
                    let dx: Vec<f64> = (0..nf).map(|f| (-r1[f] + atdy[f]) / d[f]).collect();
                    (dx, dy)
                }
                Hessian::Dense(h) => {
                    let m = nf + k;
                    let mut j = DMatrix::<f64>::zeros(m, m);
                    for (p, &tp) in free.iter().enumerate() {
                        for (q, &tq) in free.iter().enumerate() {
                            j[(p, q)] = h[(tp, tq)];
                        }
                    }
                    for r in 0..k {
                        for f in 0..nf {
                            j[(f, nf + r)] = -af[(r, f)];
                            j[(nf + r, f)] = af[(r, f)];
                        }
                    }
                    let rhs = DVector::from_iterator(m, r1.iter().chain(&r2).map(|v| -v));
                    let Some(sol) = j.lu().solve(&rhs) else {
                        return NewtonOutcome::Failed;
                    };
                    (sol.rows(0, nf).iter().copied().collect(), sol.rows(nf, k).into_owned())
                }
            };
            // A full step leaving the box is halved toward the boundary;
            // coordinates already at the boundary get pinned.
            let mut alpha = 1.0f64;
            let mut pinned = Vec::new();
            for (f, &t) in free.iter().enumerate() {
                let (room, side) = if dx[f] < 0.0 {
                    (x[t] - self.lower[t], 1u8)
                } else {
                    (self.upper[t] - x[t], 2u8)
                };
                if dx[f].abs() >= room {
                    let bound = if side == 1 { self.lower[t] } else { self.upper[t] };
                    if room <= 1e-9 * bound.abs().max(1.0) {
                        pinned.push((t, side));
                    } else {
                        alpha = alpha.min(0.5 * room / dx[f].abs());
                    }
                }
            }
            if !pinned.is_empty() {
                return NewtonOutcome::LeftBox(pinned);
            }
            for (f, &t) in free.iter().enumerate() {
                x[t] += alpha * dx[f];
            }
            for j in 0..k {
                dual[j] += alpha * dy[j];
            }
            if !self.objective.value(x).is_finite() {
                return NewtonOutcome::Failed;
            }
        }
        NewtonOutcome::Failed
    }

    /// Row duals: `μ ω / s` for slack rows, weighted least squares on
    /// stationarity for rows whose slack is lost to rounding.
    fn recover_row_duals(&self, x: &[f64], mu: f64, zl: &[f64], zu: &[f64]) -> Vec<f64> {
        let mut duals: Vec<f64> = self.rows.iter().map(|r| mu * r.weight / r.slack(x)).collect();
        let active: Vec<usize> = (0..self.rows.len())
            .filter(|&i| {
                let r = &self.rows[i];
                let scale = r.b.abs() + r.a.iter().zip(x).map(|(a, v)| (a * v).abs()).sum::<f64>();
                r.slack(x) < 1e-6 * scale.max(1e-300)
            })
            .collect();
        if active.is_empty() {
            return duals;
        }
        let g = self.objective.gradient(x);
        let n = self.dim();
        let mut rhs: Vec<f64> = (0..n).map(|t| g[t] - zl[t] + zu[t]).collect();
        for (i, r) in self.rows.iter().enumerate() {
            if !active.contains(&i) {
                for (v, a) in rhs.iter_mut().zip(&r.a) {
                    *v -= duals[i] * a;
                }
            }
        }
        let w: Vec<f64> = (0..n)
            .map(|t| {
                let s = self.box_weights[t];
                if s > 0.0 { 1.0 / (s * s) } else { 1.0 }
            })
            .collect();
        let k = active.len();
        let mut ata = DMatrix::<f64>::zeros(k, k);
        let mut atb = DVector::<f64>::zeros(k);
        for (p, &i) in active.iter().enumerate() {
            for (q, &j) in active.iter().enumerate() {
                ata[(p, q)] = (0..n).map(|t| w[t] * self.rows[i].a[t] * self.rows[j].a[t]).sum();
            }
            atb[p] = (0..n).map(|t| w[t] * self.rows[i].a[t] * rhs[t]).sum();
        }
        if let Some(sol) = ata.clone().cholesky().map(|c| c.solve(&atb)).or_else(|| ata.lu().solve(&atb)) {
            for (p, &i) in active.iter().enumerate() {
                duals[i] = sol[p].max(0.0);
            }
        }
        duals
    }
}

enum NewtonOutcome {
    Converged,
    /// Coordinates and the side (1 lower, 2 upper) each reached.
    LeftBox(Vec<(usize, u8)>),
    Failed,
}

/// Objective evaluated at `l + y`.
struct Shifted<'a, O: Objective> {
    inner: &'a O,
    lower: &'a [f64],
}

impl<'a, O: Objective> Shifted<'a, O> {
    fn lift(&self, y: &[f64]) -> Vec<f64> {
        y.iter().zip(self.lower).map(|(a, l)| a + l).collect()
    }
}

impl<'a, O: Objective> Objective for Shifted<'a, O> {
    fn value(&self, y: &[f64]) -> f64 {
        self.inner.value(&self.lift(y))
    }
    fn gradient(&self, y: &[f64]) -> Vec<f64> {
        self.inner.gradient(&self.lift(y))
    }
    fn hessian(&self, y: &[f64]) -> Hessian {
        self.inner.hessian(&self.lift(y))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Quad {
        c: Vec<f64>,
        dense: bool,
    }

    impl Objective for Quad {
        fn value(&self, x: &[f64]) -> f64 {
            x.iter().zip(&self.c).map(|(a, c)| 0.5 * (a - c) * (a - c)).sum()
        }
        fn gradient(&self, x: &[f64]) -> Vec<f64> {
            x.iter().zip(&self.c).map(|(a, c)| a - c).collect()
        }
        fn hessian(&self, x: &[f64]) -> Hessian {
            if self.dense {
                Hessian::Dense(DMatrix::identity(x.len(), x.len()))
            } else {
                Hessian::Diagonal(vec![1.0; x.len()])
            }
        }
    }

    #[test]
    fn projection_onto_halfspace() {
        // min ½|x − (0,0)|² s.t. x0 + x1 ≥ 2 → (1,1), dual 1.
        for dense in [false, true] {
            let q = Quad { c: vec![0.0, 0.0], dense };
            let p = Problem {
                objective: &q,
                rows: vec![Row { a: vec![1.0, 1.0], b: 2.0, weight: 1.0 }],
                lower: vec![-10.0; 2],
                upper: vec![10.0; 2],
                box_weights: vec![0.5; 2],
            };
            let s = p.solve(&[3.0, 3.0], &Options::default()).unwrap();
            assert!((s.x[0] - 1.0).abs() < 1e-8 && (s.x[1] - 1.0).abs() < 1e-8, "{:?}", s.x);
            assert!((s.row_duals[0] - 1.0).abs() < 1e-8, "{:?} {:?}", s.row_duals, s.trace);
            assert!(s.duality_gap < 1e-9);
        }
    }

    #[test]
    fn active_box() {
        let q = Quad { c: vec![-5.0, 0.5], dense: false };
        let p = Problem {
            objective: &q,
            rows: vec![],
            lower: vec![-1.0, -1.0],
            upper: vec![1.0, 1.0],
            box_weights: vec![1.0, 1.0],
        };
        let s = p.solve(&[0.0, 0.0], &Options::default()).unwrap();
        assert!((s.x[0] + 1.0).abs() < 1e-8 && (s.x[1] - 0.5).abs() < 1e-8);
        assert!((s.lower_duals[0] - 4.0).abs() < 1e-6, "{:?} {:?}", s.lower_duals, s.x);
    }

    #[test]
    fn rejects_infeasible_start() {
        let q = Quad { c: vec![0.0], dense: false };
        let p = Problem { objective: &q, rows: vec![], lower: vec![0.0], upper: vec![1.0], box_weights: vec![1.0] };
        assert!(p.solve(&[2.0], &Options::default()).is_err());
    }
}
