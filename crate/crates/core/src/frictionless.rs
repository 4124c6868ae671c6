//! Frictionless baseline on total wealth.
//!
//! Without transaction costs the state collapses to total wealth `w`, the
//! control is the stock proportion `π ∈ [0, 1]`, and `U_k` solves
//! `−U_t − min_π [(r + π(μ − r)) w U_w + ½σ²π²w² U_ww] = 0` on each segment,
//! with `U_k(T_k, w) = min_θ w_k(G_k − θ)⁺ + U_{k+1}(T_k, w − θ)`.
//! Each implicit step is solved by policy iteration over a discrete π set.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::goals::GoalSchedule;
use crate::grid::{build_time_segmentation, TimeSegmentation};
use crate::market::MarketParams;
use crate::solver::funding_candidates;

pub const DEFAULT_PI_POINTS: usize = 51;
const POLICY_TOL: f64 = 1e-13;
const MAX_POLICY_ITERS: usize = 100;

/// Uniform wealth grid `w_i = i·dw`, `i = 0..=n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WealthGrid {
    pub w_max: f64,
    pub n: usize,
    pub dw: f64,
}

impl WealthGrid {
    pub fn new(w_max: f64, n: usize) -> Result<Self> {
        if !(w_max.is_finite() && w_max > 0.0) {
            return Err(Error::InvalidParameter { name: "w_max", reason: format!("must be positive, got {w_max}") });
        }
        if n < 2 {
            return Err(Error::InvalidParameter { name: "n", reason: format!("need at least 2 cells, got {n}") });
        }
        Ok(Self { w_max, n, dw: w_max / n as f64 })
    }

    pub fn coord(&self, i: usize) -> f64 {
        if i == self.n {
            self.w_max
        } else {
            i as f64 * self.dw
        }
    }

    /// Linear interpolation; constant beyond `w_max`.
    pub fn interpolate(&self, values: &[f64], w: f64) -> f64 {
        if w <= 0.0 {
            return values[0];
        }
        let pos = w / self.dw;
        if pos >= self.n as f64 {
            return values[self.n];
        }
        let i = pos.floor() as usize;
        let f = pos - i as f64;
        if f < 1e-12 {
            values[i]
        } else {
            values[i] + f * (values[i + 1] - values[i])
        }
    }
}

/// Evenly spaced proportions `{0, 1/(m−1), …, 1}`.
pub fn pi_grid(points: usize) -> Result<Vec<f64>> {
    if points < 2 {
        return Err(Error::InvalidParameter { name: "pi_points", reason: format!("need at least 2, got {points}") });
    }
    Ok((0..points).map(|m| m as f64 / (points - 1) as f64).collect())
}

#[derive(Debug, Clone)]
pub struct FrictionlessResult {
    pub grid: WealthGrid,
    pub segmentation: TimeSegmentation,
    pub schedule: GoalSchedule,
    /// `values[k-1][level][i]`.
    pub values: Vec<Vec<Vec<f64>>>,
    /// `pi_star[k-1][level][i]`; the deadline level carries the control of
    /// the step just before it.
    pub pi_star: Vec<Vec<Vec<f64>>>,
    /// `theta_star[k-1][i]` for every goal; the last goal takes all wealth.
    pub theta_star: Vec<Vec<f64>>,
}

impl FrictionlessResult {
    /// `(k, level)` of a stored time; a deadline belongs to the segment it closes.
    pub fn locate(&self, t: f64) -> Result<(usize, usize)> {
        let k = self.schedule.segment_of(t).ok_or(Error::UnknownTimeLevel { t })?;
        let level = self.segmentation.segment(k).level_of(t, 1e-9).ok_or(Error::UnknownTimeLevel { t })?;
        Ok((k, level))
    }

    pub fn value(&self, t: f64, w: f64) -> Result<f64> {
        let (k, level) = self.locate(t)?;
        Ok(self.grid.interpolate(&self.values[k - 1][level], w))
    }

    /// Writes `w,value,pi_star` for one stored level.
    pub fn write_level_csv<W: Write>(&self, mut out: W, k: usize, level: usize) -> Result<()> {
        writeln!(out, "w,value,pi_star")?;
        for i in 0..=self.grid.n {
            writeln!(
                out,
                "{},{:.16e},{}",
                self.grid.coord(i),
                self.values[k - 1][level][i],
                self.pi_star[k - 1][level][i]
            )?;
        }
        Ok(())
    }

    /// Writes `w,theta_star` at deadline `T_k`.
    pub fn write_funding_csv<W: Write>(&self, mut out: W, k: usize) -> Result<()> {
        writeln!(out, "w,theta_star")?;
        for i in 0..=self.grid.n {
            writeln!(out, "{},{}", self.grid.coord(i), self.theta_star[k - 1][i])?;
        }
        Ok(())
    }
}

/// `(w, π*)` pairs at time `t`.
pub fn v_shape_profile(result: &FrictionlessResult, t: f64) -> Result<Vec<(f64, f64)>> {
    let (k, level) = result.locate(t)?;
    let pis = &result.pi_star[k - 1][level];
    Ok((0..=result.grid.n).map(|i| (result.grid.coord(i), pis[i])).collect())
}

struct Coeffs {
    up: f64,
    down: f64,
}

/// Upwind generator coefficients at node `i` for proportion `pi`, in units
/// of `1/dt`-free rates.
fn coeffs(m: &MarketParams, i: usize, pi: f64) -> Coeffs {
    let i = i as f64;
    let diff = 0.5 * m.sigma * m.sigma * pi * pi * i * i;
    let drift = (m.r + pi * (m.mu - m.r)) * i;
    Coeffs { up: diff + drift.max(0.0), down: diff + (-drift).max(0.0) }
}

/// `(L^π U)_i` on the grid, scaled by nothing (coefficients already carry `1/dw`).
fn generator(m: &MarketParams, u: &[f64], i: usize, pi: f64) -> f64 {
    let c = coeffs(m, i, pi);
    c.up * (u[i + 1] - u[i]) + c.down * (u[i - 1] - u[i])
}

/// One implicit step `U − dt·min_π L^π U = next` with Dirichlet ends.
fn implicit_step(m: &MarketParams, next: &[f64], pis: &[f64], dt: f64, left: f64, guess: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = next.len() - 1;
    let mut pi = guess.to_vec();
    let mut u = next.to_vec();
    for _ in 0..MAX_POLICY_ITERS {
        // linear solve for the current controls
        let mut lower = vec![0.0; n + 1];
        let mut diag = vec![1.0; n + 1];
        let mut upper = vec![0.0; n + 1];
        let mut rhs = next.to_vec();
        rhs[0] = left;
        rhs[n] = 0.0;
        for i in 1..n {
            let c = coeffs(m, i, pi[i]);
            lower[i] = -dt * c.down;
            upper[i] = -dt * c.up;
            diag[i] = 1.0 + dt * (c.up + c.down);
        }
        thomas(&lower, &mut diag, &upper, &mut rhs);
        u = rhs;
        // improve the controls; ties keep the smallest proportion
        let mut changed = false;
        #[allow(clippy::needless_range_loop)]
        for i in 1..n {
            let mut best = (generator(m, &u, i, pis[0]), pis[0]);
            for &p in &pis[1..] {
                let g = generator(m, &u, i, p);
                if g < best.0 - POLICY_TOL * (1.0 + best.0.abs()) {
                    best = (g, p);
                }
            }
            if best.1 != pi[i] {
                let cur = generator(m, &u, i, pi[i]);
                if best.0 < cur - POLICY_TOL * (1.0 + cur.abs()) {
                    pi[i] = best.1;
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    (u, pi)
}

fn thomas(lower: &[f64], diag: &mut [f64], upper: &[f64], rhs: &mut [f64]) {
    let n = rhs.len();
    for k in 1..n {
        let f = lower[k] / diag[k - 1];
        diag[k] -= f * upper[k - 1];
        rhs[k] -= f * rhs[k - 1];
    }
    rhs[n - 1] /= diag[n - 1];
    for k in (0..n - 1).rev() {
        rhs[k] = (rhs[k] - upper[k] * rhs[k + 1]) / diag[k];
    }
}

/// Backward solve over all segments.
pub fn solve_frictionless(
    market: &MarketParams,
    schedule: &GoalSchedule,
    grid: WealthGrid,
    pis: &[f64],
    dt: f64,
) -> Result<FrictionlessResult> {
    market.validate()?;
    if pis.is_empty() || pis[0] != 0.0 || *pis.last().unwrap() != 1.0 || pis.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidParameter {
            name: "pi_grid",
            reason: "must be increasing from 0 to 1".into(),
        });
    }
    if grid.w_max + 1e-12 < schedule.total_target() {
        return Err(Error::InvalidParameter {
            name: "w_max",
            reason: format!("must cover the total target {}", schedule.total_target()),
        });
    }
    let seg = build_time_segmentation(schedule, dt)?;
    let big_k = schedule.len();
    let nn = grid.n + 1;
    let mut values: Vec<Vec<Vec<f64>>> = vec![Vec::new(); big_k];
    let mut pi_star: Vec<Vec<Vec<f64>>> = vec![Vec::new(); big_k];
    let mut theta_star: Vec<Vec<f64>> = vec![Vec::new(); big_k];

    for k in (1..=big_k).rev() {
        let goal = *schedule.goal(k)?;
        let (top, theta) = if k == big_k {
            let u: Vec<f64> = (0..nn).map(|i| goal.weight * (goal.target - grid.coord(i)).max(0.0)).collect();
            (u, (0..nn).map(|i| grid.coord(i)).collect::<Vec<_>>())
        } else {
            let next = &values[k][0];
            let mut u = vec![0.0; nn];
            let mut th = vec![0.0; nn];
            for i in 0..nn {
                let w = grid.coord(i);
                let mut best = (f64::INFINITY, 0.0);
                for c in funding_candidates(w, goal.target, grid.dw) {
                    let v = goal.weight * (goal.target - c).max(0.0) + grid.interpolate(next, (w - c).max(0.0));
                    if v < best.0 {
                        best = (v, c);
                    }
                }
                u[i] = best.0;
                th[i] = best.1;
            }
            (u, th)
        };
        theta_star[k - 1] = theta;

        let s = seg.segment(k);
        let left = schedule.residual_weighted_targets(k)?;
        let mut lv = vec![Vec::new(); s.steps + 1];
        let mut lp = vec![Vec::new(); s.steps + 1];
        lv[s.steps] = top;
        let mut guess = vec![0.0; nn];
        for level in (0..s.steps).rev() {
            let (u, p) = implicit_step(market, &lv[level + 1], pis, s.dt(), left, &guess);
            guess = p.clone();
            lv[level] = u;
            lp[level] = p;
            if level + 1 == s.steps {
                lp[s.steps] = lp[level].clone();
            }
        }
        values[k - 1] = lv;
        pi_star[k - 1] = lp;
    }
    Ok(FrictionlessResult { grid, segmentation: seg, schedule: schedule.clone(), values, pi_star, theta_star })
}
