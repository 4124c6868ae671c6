//! The intervention operator `ℳ[V](x) = inf_{Δ ∈ D(x)} V(Γ(x, Δ))` on grid slices.
//!
//! The continuous infimum is replaced by a minimum over a candidate set:
//! both endpoints of the feasible interval, every trade whose post-trade
//! stock holding is a grid multiple of `dx`, and the zero trade.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{interpolate_clipped, GridSpec};
use crate::market::{feasible_interval, rebalance, CostModel, PortfolioState, BOUNDARY_TOL};

/// Outcome of one intervention search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intervention {
    /// `+∞` when no trade is feasible.
    pub value: f64,
    /// Minimising trade, `None` when no trade is feasible.
    pub delta: Option<f64>,
}

impl Intervention {
    pub const INFEASIBLE: Intervention = Intervention { value: f64::INFINITY, delta: None };
}

fn better(v: f64, d: f64, best_v: f64, best_d: f64) -> bool {
    v < best_v || (v == best_v && d.abs() < best_d.abs())
}

/// Best single trade from a continuous state `x` against a slice.
pub fn intervention_value(
    slice: &[f64],
    x: PortfolioState,
    cost: &CostModel,
    spec: &GridSpec,
) -> Intervention {
    let Some(iv) = feasible_interval(x, cost) else {
        return Intervention::INFEASIBLE;
    };
    let eval = |delta: f64| {
        let y = rebalance(x, delta, cost);
        interpolate_clipped(slice, PortfolioState::new(y.x0.max(0.0), y.x1.max(0.0)), spec)
    };
    let mut best_d = iv.lo;
    let mut best_v = eval(iv.lo);
    let mut consider = |d: f64| {
        let v = eval(d);
        if better(v, d, best_v, best_d) {
            best_v = v;
            best_d = d;
        }
    };
    if iv.contains(0.0) {
        consider(0.0);
    }
    consider(iv.hi);
    let j_lo = ((x.x1 + iv.lo) / spec.dx - 1e-9).ceil().max(0.0) as usize;
    let j_hi = ((x.x1 + iv.hi) / spec.dx + 1e-9).floor();
    if j_hi >= 0.0 {
        for jp in j_lo..=(j_hi as usize).min(spec.n) {
            let d = (spec.coord(jp) - x.x1).clamp(iv.lo, iv.hi);
            consider(d);
        }
    }
    Intervention { value: best_v, delta: Some(best_d) }
}

/// `ℳ` evaluated at every node of a slice.
///
/// Fixed costs use the fact that every post-trade state of a node lies on the
/// line `x0' + x1' = x0 + x1 - c_min`, so the candidate minimum depends only
/// on the node's anti-diagonal and is shared by all nodes on it.
pub fn intervention_sweep(slice: &[f64], cost: &CostModel, spec: &GridSpec, with_argmin: bool) -> Sweep {
    match *cost {
        CostModel::Fixed { c_min } => fixed_sweep(slice, c_min, spec, with_argmin),
        _ => general_sweep(slice, cost, spec),
    }
}

/// Values of `ℳ` per node plus, when requested, the minimising trade.
#[derive(Debug, Clone)]
pub struct Sweep {
    pub values: Vec<f64>,
    pub deltas: Option<Vec<Option<f64>>>,
}

fn general_sweep(slice: &[f64], cost: &CostModel, spec: &GridSpec) -> Sweep {
    let coords = spec.node_coords();
    let res: Vec<Intervention> = coords
        .par_iter()
        .map(|&(i, j)| intervention_value(slice, spec.state(i, j), cost, spec))
        .collect();
    Sweep {
        values: res.iter().map(|r| r.value).collect(),
        deltas: Some(res.iter().map(|r| r.delta).collect()),
    }
}

struct LineMin {
    value: f64,
    /// Grid positions (`x1' / dx`) of every candidate attaining `value`.
    ties: Vec<f64>,
}

fn fixed_sweep(slice: &[f64], c_min: f64, spec: &GridSpec, with_argmin: bool) -> Sweep {
    let n = spec.n;
    let lines: Vec<Option<LineMin>> = (0..=n)
        .into_par_iter()
        .map(|d| {
            let s = spec.coord(d) - c_min;
            if s < -BOUNDARY_TOL {
                return None;
            }
            let s = s.max(0.0);
            let top = s / spec.dx;
            let j_max = ((top + 1e-9).floor() as usize).min(n);
            let mut best = LineMin { value: f64::INFINITY, ties: Vec::new() };
            let mut push = |pos: f64, v: f64| {
                if v < best.value {
                    best.value = v;
                    best.ties.clear();
                    best.ties.push(pos);
                } else if v == best.value {
                    best.ties.push(pos);
                }
            };
            for jp in 0..=j_max {
                let x1 = spec.coord(jp);
                let v = interpolate_clipped(slice, PortfolioState::new((s - x1).max(0.0), x1), spec);
                push(jp as f64, v);
            }
            if top - j_max as f64 > 1e-9 {
                let v = interpolate_clipped(slice, PortfolioState::new(0.0, s), spec);
                push(top, v);
            }
            Some(best)
        })
        .collect();

    let mut values = vec![f64::INFINITY; spec.node_count()];
    let mut deltas = with_argmin.then(|| vec![None; spec.node_count()]);
    for (idx, i, j) in spec.nodes() {
        if let Some(line) = &lines[i + j] {
            values[idx] = line.value;
            if let Some(ds) = deltas.as_mut() {
                let jf = j as f64;
                let mut pick = line.ties[0];
                for &p in &line.ties[1..] {
                    if (p - jf).abs() < (pick - jf).abs() {
                        pick = p;
                    }
                }
                // snap the zero trade exactly
                let delta = if pick == jf { 0.0 } else { (pick - jf) * spec.dx };
                ds[idx] = Some(delta);
            }
        }
    }
    Sweep { values, deltas }
}

/// Iterates `V ← min(V, ℳ[V])` from `base` until no node moves by more than
/// `tol`. Returns the fixed point and the iteration count.
///
/// Each effective intervention burns at least `c_min` of wealth, so the
/// iteration count is capped at `ceil(w_max / c_min) + 1`.
pub fn intervention_fixed_point(
    base: Vec<f64>,
    cost: &CostModel,
    spec: &GridSpec,
    tol: f64,
) -> Result<(Vec<f64>, usize)> {
    let cap = (spec.w_max / cost.c_min()).ceil() as usize + 1;
    let mut v = base;
    for iter in 1..=cap {
        let m = intervention_sweep(&v, cost, spec, false).values;
        let mut change: f64 = 0.0;
        for (vi, mi) in v.iter_mut().zip(&m) {
            if *mi < *vi {
                change = change.max(*vi - *mi);
                *vi = *mi;
            }
        }
        if change <= tol {
            return Ok((v, iter));
        }
        if iter == cap {
            return Err(Error::NonConvergence { iters: iter, change });
        }
    }
    unreachable!("loop returns on its last iteration")
}
