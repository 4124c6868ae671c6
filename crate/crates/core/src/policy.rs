//! Trading regions, target points and the runtime policy.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridSpec, DOMAIN_TOL};
use crate::market::{feasible_interval, liquidation_value, rebalance, PortfolioState};
use crate::solver::{intervention_value, optimal_funding, Action, SolveResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Label {
    Continue,
    Buy,
    Sell,
}

impl Label {
    pub fn as_str(&self) -> &'static str {
        match self {
            Label::Continue => "continue",
            Label::Buy => "buy",
            Label::Sell => "sell",
        }
    }
}

/// Node labels, trades and post-trade states at one stored time level.
#[derive(Debug, Clone)]
pub struct RegionMap {
    pub t: f64,
    pub k: usize,
    pub level: usize,
    pub grid: GridSpec,
    pub labels: Vec<Label>,
    pub deltas: Vec<Option<f64>>,
    pub targets: Vec<Option<PortfolioState>>,
}

impl RegionMap {
    pub fn label_at(&self, i: usize, j: usize) -> Label {
        self.labels[self.grid.index(i, j)]
    }

    /// Writes `x0,x1,label,delta_star,target_x0,target_x1`; trade columns are
    /// empty on continuation nodes.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "x0,x1,label,delta_star,target_x0,target_x1")?;
        for (idx, i, j) in self.grid.nodes() {
            write!(w, "{},{},{},", self.grid.coord(i), self.grid.coord(j), self.labels[idx].as_str())?;
            match (self.deltas[idx], self.targets[idx]) {
                (Some(d), Some(y)) => writeln!(w, "{d},{},{}", y.x0, y.x1)?,
                _ => writeln!(w, ",,")?,
            }
        }
        Ok(())
    }
}

/// Labels every node from the solver's stored actions at time `t`.
pub fn classify_regions(result: &SolveResult, t: f64) -> Result<RegionMap> {
    let (k, level) = result.locate(t).ok_or(Error::UnknownTimeLevel { t })?;
    Ok(classify_level(result, k, level))
}

pub fn classify_level(result: &SolveResult, k: usize, level: usize) -> RegionMap {
    let grid = *result.grid();
    let cost = result.config.cost;
    let actions = result.actions(k, level);
    let n = grid.node_count();
    let mut labels = vec![Label::Continue; n];
    let mut deltas = vec![None; n];
    let mut targets = vec![None; n];
    for (idx, i, j) in grid.nodes() {
        if let Action::Trade(d) = actions[idx] {
            labels[idx] = if d > 0.0 { Label::Buy } else { Label::Sell };
            deltas[idx] = Some(d);
            targets[idx] = Some(snap(rebalance(grid.state(i, j), d, &cost), &grid));
        }
    }
    RegionMap { t: result.segmentation.segment(k).time(level), k, level, grid, labels, deltas, targets }
}

fn snap(x: PortfolioState, grid: &GridSpec) -> PortfolioState {
    let s = |v: f64| {
        let r = (v / grid.dx).round() * grid.dx;
        if (v - r).abs() <= DOMAIN_TOL {
            r
        } else {
            v
        }
    };
    PortfolioState::new(s(x.x0).max(0.0), s(x.x1).max(0.0))
}

/// Distinct post-trade states of all trading nodes, in first-seen order.
pub fn target_points(map: &RegionMap) -> Vec<PortfolioState> {
    let mut out: Vec<PortfolioState> = Vec::new();
    for y in map.targets.iter().flatten() {
        if !out.iter().any(|p| (p.x0 - y.x0).abs() <= DOMAIN_TOL && (p.x1 - y.x1).abs() <= DOMAIN_TOL) {
            out.push(*y);
        }
    }
    out
}

/// Best withdrawal for goal `k < K` at the continuous state `x`, against the
/// interpolated `V_{k+1}(T_k, ·)`.
pub fn funding_rule(result: &SolveResult, k: usize, x: PortfolioState) -> Result<f64> {
    let big_k = result.config.schedule.len();
    if k == 0 || k >= big_k {
        return Err(Error::GoalIndexOutOfRange { index: k, len: big_k - 1 });
    }
    let next = result.slice(k + 1, 0);
    Ok(optimal_funding(next, x, k, &result.config.schedule, result.grid())?.1)
}

/// Decision returned by [`Policy::action`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PolicyAction {
    Hold,
    Trade(f64),
    Fund(f64),
}

/// Read-only policy lookup for off-grid states.
///
/// Whether to trade is decided by the label of the nearest node; the trade
/// size is re-optimised at the continuous state.
#[derive(Debug, Clone, Copy)]
pub struct Policy<'a> {
    pub result: &'a SolveResult,
}

impl<'a> Policy<'a> {
    pub fn new(result: &'a SolveResult) -> Self {
        Self { result }
    }

    /// Stored level of segment `k` used at time `t`: the nearest level at or
    /// after `t`.
    pub fn level_at(&self, k: usize, t: f64) -> usize {
        let s = self.result.segmentation.segment(k);
        let pos = ((t - s.start) / s.dt() - 1e-9).ceil().max(0.0) as usize;
        pos.min(s.steps)
    }

    /// Trade prescribed at `x` by level `level` of segment `k`, if any.
    pub fn trade(&self, k: usize, level: usize, x: PortfolioState) -> Option<f64> {
        let grid = self.result.grid();
        let cost = &self.result.config.cost;
        if x.total() > grid.w_max + DOMAIN_TOL {
            // zero-value plateau: liquidate once, then hold
            let iv = feasible_interval(x, cost)?;
            return (x.x1 > 0.0 && iv.contains(-x.x1)).then_some(-x.x1);
        }
        let (i, j) = grid.nearest_node(x);
        if self.result.actions(k, level)[grid.index(i, j)] == Action::Hold {
            return None;
        }
        let best = intervention_value(self.result.slice(k, level), x, cost, grid);
        match best.delta {
            Some(d) if d.abs() > 1e-12 => Some(d),
            _ => None,
        }
    }

    /// Action at time `t`. At a deadline, trades are returned until the
    /// nearest node holds; then the withdrawal for that goal.
    pub fn action(&self, t: f64, x: PortfolioState) -> Result<PolicyAction> {
        if x.x0 < -DOMAIN_TOL || x.x1 < -DOMAIN_TOL {
            return Err(Error::OutOfDomain { x0: x.x0, x1: x.x1 });
        }
        let schedule = &self.result.config.schedule;
        let k = schedule.segment_of(t).ok_or(Error::UnknownTimeLevel { t })?;
        let level = self.level_at(k, t);
        if let Some(d) = self.trade(k, level, x) {
            return Ok(PolicyAction::Trade(d));
        }
        let seg = self.result.segmentation.segment(k);
        if (t - seg.end).abs() > 1e-9 {
            return Ok(PolicyAction::Hold);
        }
        if k == schedule.len() {
            Ok(PolicyAction::Fund(liquidation_value(x, &self.result.config.cost)))
        } else {
            Ok(PolicyAction::Fund(funding_rule(self.result, k, x)?))
        }
    }
}
