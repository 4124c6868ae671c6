//! Analytic lower bounds for the value function.
//!
//! `F^a_k(t, x) = Σ_{i≥k} w_i G_i − C_k (a + x0 + x1)^q e^{λ(T_k − t)}` with
//! `C_k = Σ_{i≥k} 2 w_i G_i^{1−q} e^{λ(T_i − T_k)}` is a subsolution of the
//! QVI system whenever `λ > q·max(r, μ, 0)`. Together with the trivial range
//! `0 ≤ V_k ≤ Σ_{i≥k} w_i G_i` it gives an oracle independent of the scheme.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::goals::GoalSchedule;
use crate::grid::{GridSpec, TimeSegmentation};
use crate::market::{MarketParams, PortfolioState};
use crate::solver::SolveResult;

pub const DEFAULT_Q: f64 = 0.5;
pub const DEFAULT_LAMBDA: f64 = 0.2;
/// Slack allowed in the subsolution comparison.
pub const SUBSOLUTION_TOL: f64 = 1e-6;
const CORNER_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsolutionParams {
    /// Shift inside the power, `0` or `1`.
    pub a: u8,
    pub q: f64,
    pub lambda: f64,
    /// `c[k-1] = C_k`.
    pub c: Vec<f64>,
}

impl SubsolutionParams {
    pub fn new(a: u8, q: f64, lambda: f64, market: &MarketParams, schedule: &GoalSchedule) -> Result<Self> {
        if a > 1 {
            return Err(Error::InvalidParameter { name: "a", reason: format!("must be 0 or 1, got {a}") });
        }
        if !(q > 0.0 && q < 1.0) {
            return Err(Error::InvalidParameter { name: "q", reason: format!("must lie in (0, 1), got {q}") });
        }
        let floor = q * market.r.max(market.mu).max(0.0);
        if !(lambda > floor) {
            return Err(Error::InvalidParameter {
                name: "lambda",
                reason: format!("must exceed q*max(r, mu, 0) = {floor}, got {lambda}"),
            });
        }
        let goals = schedule.goals();
        let c = (0..goals.len())
            .map(|k| {
                let tk = goals[k].deadline;
                goals[k..]
                    .iter()
                    .map(|g| 2.0 * g.weight * g.target.powf(1.0 - q) * (lambda * (g.deadline - tk)).exp())
                    .sum()
            })
            .collect();
        Ok(Self { a, q, lambda, c })
    }

    /// `a = 0`, `q = 0.5`, `λ = 0.2`.
    pub fn defaults(market: &MarketParams, schedule: &GoalSchedule) -> Result<Self> {
        Self::new(0, DEFAULT_Q, DEFAULT_LAMBDA, market, schedule)
    }
}

/// `F^a_k(t, x)`; rejects `t` outside `[T_{k-1}, T_k]`.
pub fn analytic_subsolution(p: &SubsolutionParams, s: &GoalSchedule, k: usize, t: f64, x: PortfolioState) -> Result<f64> {
    let start = s.segment_start(k)?;
    let end = s.deadline(k)?;
    if t < start - 1e-12 || t > end + 1e-12 {
        return Err(Error::TimeOutsideSegment { t, k, start, end });
    }
    Ok(subsolution_unchecked(p, s, k, t, x.total(), end))
}

fn subsolution_unchecked(p: &SubsolutionParams, s: &GoalSchedule, k: usize, t: f64, wealth: f64, tk: f64) -> f64 {
    let top = s.residual_weighted_targets(k).expect("k checked by caller");
    top - p.c[k - 1] * (p.a as f64 + wealth).powf(p.q) * (p.lambda * (tk - t)).exp()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundsReport {
    pub passed: bool,
    /// Largest `F⁰ − V` over all nodes and levels.
    pub worst_gap: f64,
    /// `[i, j, k, t]` of the largest gap.
    pub worst_node: (usize, usize, usize, f64),
    /// Nodes with `V < 0` or `V` above the residual weighted targets.
    pub range_violations: usize,
    /// Largest deviation of the corner value from the residual weighted targets.
    pub corner_error: f64,
}

impl BoundsReport {
    pub fn to_json(&self) -> serde_json::Value {
        let (i, j, k, t) = self.worst_node;
        serde_json::json!({
            "passed": self.passed,
            "worst_gap": self.worst_gap,
            "worst_node": [i, j, k, t],
            "range_violations": self.range_violations,
            "corner_error": self.corner_error,
        })
    }
}

struct LevelCheck {
    gap: f64,
    node: (usize, usize),
    range_violations: usize,
    corner_error: f64,
}

/// Checks a solved surface against the subsolution, the range bounds and the
/// corner condition.
pub fn check_bounds(result: &SolveResult, p: &SubsolutionParams) -> BoundsReport {
    check_surfaces(&result.surfaces.segments, &result.segmentation, &result.config.schedule, result.grid(), p)
}

/// [`check_bounds`] on raw per-segment, per-level node values.
pub fn check_surfaces(
    surfaces: &[Vec<Vec<f64>>],
    seg: &TimeSegmentation,
    schedule: &GoalSchedule,
    grid: &GridSpec,
    p: &SubsolutionParams,
) -> BoundsReport {
    let jobs: Vec<(usize, usize)> = (1..=surfaces.len())
        .flat_map(|k| (0..surfaces[k - 1].len()).map(move |l| (k, l)))
        .collect();
    let checks: Vec<(usize, f64, LevelCheck)> = jobs
        .par_iter()
        .map(|&(k, level)| {
            let s = seg.segment(k);
            let t = s.time(level);
            let slice = &surfaces[k - 1][level];
            let top = schedule.residual_weighted_targets(k).expect("k in range");
            let mut c = LevelCheck { gap: f64::NEG_INFINITY, node: (0, 0), range_violations: 0, corner_error: 0.0 };
            for (idx, i, j) in grid.nodes() {
                let v = slice[idx];
                let f = subsolution_unchecked(p, schedule, k, t, grid.coord(i) + grid.coord(j), s.end);
                if f - v > c.gap {
                    c.gap = f - v;
                    c.node = (i, j);
                }
                if !(v >= 0.0 && v <= top) {
                    c.range_violations += 1;
                }
            }
            c.corner_error = (slice[0] - top).abs();
            (k, t, c)
        })
        .collect();

    let mut report = BoundsReport {
        passed: true,
        worst_gap: f64::NEG_INFINITY,
        worst_node: (0, 0, 0, 0.0),
        range_violations: 0,
        corner_error: 0.0,
    };
    for (k, t, c) in checks {
        if c.gap > report.worst_gap {
            report.worst_gap = c.gap;
            report.worst_node = (c.node.0, c.node.1, k, t);
        }
        report.range_violations += c.range_violations;
        report.corner_error = report.corner_error.max(c.corner_error);
    }
    report.passed =
        report.worst_gap <= SUBSOLUTION_TOL && report.range_violations == 0 && report.corner_error <= CORNER_TOL;
    report
}
