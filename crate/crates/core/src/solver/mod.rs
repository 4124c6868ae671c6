//! Backward solution of the QVI system across goal segments.
//!
//! Terminal data at the last deadline, penalty-iterated time steps inside
//! each segment, and funding/trading fixed points at interior deadlines.

mod intervention;
mod pde;

pub use intervention::{intervention_fixed_point, intervention_sweep, intervention_value, Intervention, Sweep};
pub use pde::{Boundary, Penalty, PdeOperator};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::goals::GoalSchedule;
use crate::grid::{build_grid, build_time_segmentation, interpolate_clipped, GridSpec, TimeSegmentation, ValueSurface};
use crate::market::{liquidation_value, CostModel, MarketParams, PortfolioState};

pub const DEFAULT_PENALTY_RHO: f64 = 1e7;
pub const DEFAULT_PENALTY_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_PENALTY_ITERS: usize = 50;

/// Trading decision stored per node and time level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Action {
    Hold,
    Trade(f64),
}

impl Action {
    pub fn delta(&self) -> Option<f64> {
        match *self {
            Action::Hold => None,
            Action::Trade(d) => Some(d),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub market: MarketParams,
    pub cost: CostModel,
    pub schedule: GoalSchedule,
    pub grid: GridSpec,
    pub dt: f64,
    pub penalty_rho: f64,
    pub penalty_tol: f64,
    pub max_penalty_iters: usize,
}

impl SolverConfig {
    /// Default solver knobs; `w_max = Σ G_k + c_min`.
    pub fn new(market: MarketParams, cost: CostModel, schedule: GoalSchedule, n: usize, dt: f64) -> Result<Self> {
        let w_max = schedule.total_target() + cost.c_min();
        let cfg = Self {
            market,
            cost,
            schedule,
            grid: build_grid(w_max, n)?,
            dt,
            penalty_rho: DEFAULT_PENALTY_RHO,
            penalty_tol: DEFAULT_PENALTY_TOL,
            max_penalty_iters: DEFAULT_MAX_PENALTY_ITERS,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Two goals (3 at T=1 with weight 1, 6 at T=2 with weight 0.2),
    /// `r = 0, μ = 0.3, σ = 0.4`, fixed cost `c_min`, 200 steps, `dt = 0.01`.
    pub fn benchmark(c_min: f64) -> Self {
        Self::new(
            MarketParams { r: 0.0, mu: 0.3, sigma: 0.4 },
            CostModel::Fixed { c_min },
            GoalSchedule::benchmark(),
            200,
            0.01,
        )
        .expect("benchmark configuration is valid")
    }

    pub fn validate(&self) -> Result<()> {
        self.market.validate()?;
        self.cost.validate()?;
        crate::goals::validate(self.schedule.goals())?;
        let need = self.schedule.total_target() + self.cost.c_min();
        if self.grid.w_max < need - 1e-12 {
            return Err(Error::InvalidParameter {
                name: "w_max",
                reason: format!("must be at least sum of targets + c_min = {need}"),
            });
        }
        if !(self.penalty_rho > 0.0) {
            return Err(Error::InvalidParameter { name: "penalty_rho", reason: "must be positive".into() });
        }
        if !(self.penalty_tol > 0.0) {
            return Err(Error::InvalidParameter { name: "penalty_tol", reason: "must be positive".into() });
        }
        if self.max_penalty_iters == 0 {
            return Err(Error::InvalidParameter { name: "max_iters", reason: "must be at least 1".into() });
        }
        build_time_segmentation(&self.schedule, self.dt)?;
        PdeOperator::new(self.market, self.grid, self.dt)?;
        Ok(())
    }

    pub fn segmentation(&self) -> Result<TimeSegmentation> {
        build_time_segmentation(&self.schedule, self.dt)
    }

    /// Nodes with `x0 + x1 = w_max` and stock to sell are in the zero-value
    /// plateau; full liquidation reaches it.
    fn plateau_action(&self, i: usize, j: usize) -> Option<Action> {
        (i + j == self.grid.n && j > 0).then(|| Action::Trade(-self.grid.coord(j)))
    }
}

/// Per-level solver diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelDiagnostics {
    pub k: usize,
    pub level: usize,
    pub t: f64,
    pub penalty_iters: usize,
    pub projection_iters: usize,
    /// `max (V − ℳ[V])⁺` over nodes with a feasible trade.
    pub residual: f64,
    pub trades: usize,
    /// Trading nodes whose nearest target node is itself a trading node.
    pub targets_in_intervention: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub levels: Vec<LevelDiagnostics>,
}

impl Diagnostics {
    pub fn max_residual(&self) -> f64 {
        self.levels.iter().map(|l| l.residual).fold(0.0, f64::max)
    }

    /// `{residuals: [...], penalty_iters: [...]}` ordered by segment then level.
    pub fn report_json(&self) -> serde_json::Value {
        serde_json::json!({
            "residuals": self.levels.iter().map(|l| l.residual).collect::<Vec<_>>(),
            "penalty_iters": self.levels.iter().map(|l| l.penalty_iters).collect::<Vec<_>>(),
            "levels": self.levels,
        })
    }
}

/// Everything produced by [`solve`].
#[derive(Debug, Clone)]
pub struct SolveResult {
    pub config: SolverConfig,
    pub segmentation: TimeSegmentation,
    pub surfaces: ValueSurface,
    /// `trade_policy[k-1][level][node]`.
    pub trade_policy: Vec<Vec<Vec<Action>>>,
    /// `funding_policy[k-1][node]` for `k < K`.
    pub funding_policy: Vec<Vec<f64>>,
    pub diagnostics: Diagnostics,
}

impl SolveResult {
    pub fn grid(&self) -> &GridSpec {
        &self.config.grid
    }

    /// Segment and level for time `t`; a deadline maps to the segment it closes.
    pub fn locate(&self, t: f64) -> Option<(usize, usize)> {
        let k = self.config.schedule.segment_of(t)?;
        let level = self.segmentation.segment(k).level_of(t, 1e-9)?;
        Some((k, level))
    }

    pub fn slice(&self, k: usize, level: usize) -> &[f64] {
        self.surfaces.slice(k, level)
    }

    pub fn actions(&self, k: usize, level: usize) -> &[Action] {
        &self.trade_policy[k - 1][level]
    }

    pub fn value_at_node(&self, k: usize, level: usize, i: usize, j: usize) -> f64 {
        self.slice(k, level)[self.grid().index(i, j)]
    }

    /// Interpolated `V_k` at the level containing time `t`.
    pub fn value(&self, t: f64, x: PortfolioState) -> Result<f64> {
        let (k, level) = self.locate(t).ok_or(Error::UnknownTimeLevel { t })?;
        crate::grid::interpolate(self.slice(k, level), x, self.grid())
    }
}

/// Output of one penalised time step.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub values: Vec<f64>,
    pub actions: Vec<Action>,
    pub penalty_iters: usize,
    pub projection_iters: usize,
    pub residual: f64,
}

/// Unpenalised backward step of the generator for segment `k`.
pub fn pde_step(next: &[f64], k: usize, config: &SolverConfig) -> Result<Vec<f64>> {
    let op = PdeOperator::new(config.market, config.grid, config.dt)?;
    let corner = config.schedule.residual_weighted_targets(k)?;
    Ok(op.step(next, Boundary::Dirichlet { corner }))
}

/// Trade where the best intervention attains the value and strictly beats
/// holding (`hold`); ties between holding and trading resolve to holding.
fn extract_actions(config: &SolverConfig, values: &[f64], hold: &[f64]) -> (Vec<Action>, f64) {
    let tol = 10.0 * config.penalty_tol;
    let sweep = intervention_sweep(values, &config.cost, &config.grid, true);
    let deltas = sweep.deltas.expect("argmin requested");
    let mut residual: f64 = 0.0;
    let actions = config
        .grid
        .nodes()
        .map(|(idx, i, j)| {
            let m = sweep.values[idx];
            if m.is_finite() {
                residual = residual.max(values[idx] - m);
            }
            if let Some(a) = config.plateau_action(i, j) {
                return a;
            }
            let Some(delta) = deltas[idx] else { return Action::Hold };
            let trade = values[idx] >= m - tol && m < hold[idx] - tol;
            if trade && delta != 0.0 {
                Action::Trade(delta)
            } else {
                Action::Hold
            }
        })
        .collect();
    (actions, residual)
}

/// One backward step of the penalised QVI from `next` (level `t + dt`).
pub fn qvi_time_step(next: &[f64], t: f64, k: usize, config: &SolverConfig) -> Result<StepOutput> {
    let corner = config.schedule.residual_weighted_targets(k)?;
    qvi_time_step_with(next, t, config, Boundary::Dirichlet { corner })
}

/// [`qvi_time_step`] with explicit boundary handling.
pub fn qvi_time_step_with(next: &[f64], t: f64, config: &SolverConfig, boundary: Boundary) -> Result<StepOutput> {
    let op = PdeOperator::new(config.market, config.grid, config.dt)?;
    let grid = &config.grid;
    let tol = config.penalty_tol;

    let rhs = op.transport_x0(next);
    let mut v = op.implicit_x1(&rhs, boundary, None);
    let mut active = vec![false; grid.node_count()];
    let mut iters = 0;
    let mut converged = false;
    let mut change = f64::INFINITY;
    while iters < config.max_penalty_iters {
        iters += 1;
        let m = intervention_sweep(&v, &config.cost, grid, false).values;
        for ((a, vi), mi) in active.iter_mut().zip(&v).zip(&m) {
            *a = mi.is_finite() && vi > mi;
        }
        let penalty = Penalty { rho: config.penalty_rho, target: &m, active: &active };
        let next_v = op.implicit_x1(&rhs, boundary, Some(&penalty));
        change = next_v.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = next_v;
        if change < tol {
            converged = true;
            break;
        }
    }
    if !converged {
        let m = intervention_sweep(&v, &config.cost, grid, false).values;
        let residual = v.iter().zip(&m).filter(|(_, m)| m.is_finite()).map(|(a, b)| a - b).fold(0.0, f64::max);
        return Err(Error::PenaltyNonConvergence { t, change, residual });
    }

    // Remove the O(1/ρ) penalty overshoot so that V ≤ ℳ[V] holds exactly.
    let (v, projection_iters) = intervention_fixed_point(v, &config.cost, grid, tol)?;
    let hold = op.hold_values(&rhs, &v, boundary);
    let (actions, residual) = extract_actions(config, &v, &hold);
    Ok(StepOutput { values: v, actions, penalty_iters: iters, projection_iters, residual })
}

/// Value, funding choice and trading decision at a deadline.
#[derive(Debug, Clone)]
pub struct DeadlineOutput {
    pub values: Vec<f64>,
    pub actions: Vec<Action>,
    /// Optimal withdrawal per node (empty at the final deadline).
    pub theta: Vec<f64>,
    pub projection_iters: usize,
    pub residual: f64,
}

fn pin_boundary(config: &SolverConfig, k: usize, values: &mut [f64]) -> Result<()> {
    let g = &config.grid;
    for i in 0..=g.n {
        values[g.index(i, g.n - i)] = 0.0;
    }
    values[0] = config.schedule.residual_weighted_targets(k)?;
    Ok(())
}

fn close_deadline(config: &SolverConfig, k: usize, mut u: Vec<f64>, theta: Vec<f64>) -> Result<DeadlineOutput> {
    pin_boundary(config, k, &mut u)?;
    let (v, projection_iters) = intervention_fixed_point(u.clone(), &config.cost, &config.grid, config.penalty_tol)?;
    let (actions, residual) = extract_actions(config, &v, &u);
    Ok(DeadlineOutput { values: v, actions, theta, projection_iters, residual })
}

/// `V_K(T_K, ·) = min_n ℳⁿ[U]` with `U = w_K (G_K − L(x))⁺`.
pub fn terminal_condition(config: &SolverConfig) -> Result<DeadlineOutput> {
    let k = config.schedule.len();
    let g = &config.grid;
    let u: Vec<f64> = g
        .nodes()
        .map(|(_, i, j)| {
            let l = liquidation_value(g.state(i, j), &config.cost);
            config.schedule.shortfall_penalty(k, l).expect("k in range")
        })
        .collect();
    close_deadline(config, k, u, Vec::new())
}

/// Candidate withdrawals at a state: grid-aligned amounts, `0`, `min(G, x0)`
/// and `x0`, in increasing order.
pub fn funding_candidates(x0: f64, target: f64, dx: f64) -> Vec<f64> {
    let x0 = x0.max(0.0);
    let steps = (x0 / dx + 1e-9).floor() as usize;
    let mut c: Vec<f64> = (0..=steps).map(|m| (m as f64 * dx).min(x0)).collect();
    c.push(target.min(x0));
    c.push(x0);
    c.sort_by(f64::total_cmp);
    c.dedup();
    c
}

/// Best withdrawal for goal `k` at `x` against `V_{k+1}(T_k, ·)`.
/// Ties resolve to the smallest withdrawal.
pub fn optimal_funding(
    next: &[f64],
    x: PortfolioState,
    k: usize,
    schedule: &GoalSchedule,
    grid: &GridSpec,
) -> Result<(f64, f64)> {
    let mut best = (f64::INFINITY, 0.0);
    for theta in funding_candidates(x.x0, schedule.goal(k)?.target, grid.dx) {
        let rest = PortfolioState::new((x.x0 - theta).max(0.0), x.x1);
        let cont = if rest.total() > grid.w_max + crate::grid::DOMAIN_TOL {
            0.0
        } else {
            interpolate_clipped(next, rest, grid)
        };
        let v = schedule.shortfall_penalty(k, theta)? + cont;
        if v < best.0 {
            best = (v, theta);
        }
    }
    Ok(best)
}

/// `V_k(T_k, ·)` from `V_{k+1}(T_k, ·)`: optimal funding, then the trading
/// fixed point.
pub fn deadline_coupling(next: &[f64], k: usize, config: &SolverConfig) -> Result<DeadlineOutput> {
    if k >= config.schedule.len() {
        return Err(Error::GoalIndexOutOfRange { index: k, len: config.schedule.len() - 1 });
    }
    let g = &config.grid;
    let coords = g.node_coords();
    use rayon::prelude::*;
    let pairs: Vec<(f64, f64)> = coords
        .par_iter()
        .map(|&(i, j)| optimal_funding(next, g.state(i, j), k, &config.schedule, g))
        .collect::<Result<_>>()?;
    let (u, theta): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
    close_deadline(config, k, u, theta)
}

/// Solves all segments backward from the final deadline.
pub fn solve(config: &SolverConfig) -> Result<SolveResult> {
    config.validate()?;
    let seg = config.segmentation()?;
    let big_k = config.schedule.len();
    let mut surfaces: Vec<Vec<Vec<f64>>> = vec![Vec::new(); big_k];
    let mut policy: Vec<Vec<Vec<Action>>> = vec![Vec::new(); big_k];
    let mut funding: Vec<Vec<f64>> = vec![Vec::new(); big_k - 1];
    let mut diag_levels: Vec<Vec<LevelDiagnostics>> = vec![Vec::new(); big_k];

    for k in (1..=big_k).rev() {
        let s = seg.segment(k);
        let top = if k == big_k {
            terminal_condition(config)?
        } else {
            let out = deadline_coupling(&surfaces[k][0], k, config)?;
            funding[k - 1] = out.theta.clone();
            out
        };
        let mut values: Vec<Vec<f64>> = vec![Vec::new(); s.steps + 1];
        let mut actions: Vec<Vec<Action>> = vec![Vec::new(); s.steps + 1];
        let mut diags = Vec::with_capacity(s.steps + 1);
        diags.push(level_diag(config, k, s.steps, s.end, 0, top.projection_iters, top.residual, &top.actions));
        values[s.steps] = top.values;
        actions[s.steps] = top.actions;
        for level in (0..s.steps).rev() {
            let t = s.time(level);
            let out = qvi_time_step(&values[level + 1], t, k, config)?;
            diags.push(level_diag(config, k, level, t, out.penalty_iters, out.projection_iters, out.residual, &out.actions));
            values[level] = out.values;
            actions[level] = out.actions;
        }
        diags.reverse();
        surfaces[k - 1] = values;
        policy[k - 1] = actions;
        diag_levels[k - 1] = diags;
    }

    Ok(SolveResult {
        config: config.clone(),
        segmentation: seg,
        surfaces: ValueSurface { segments: surfaces },
        trade_policy: policy,
        funding_policy: funding,
        diagnostics: Diagnostics { levels: diag_levels.concat() },
    })
}

#[allow(clippy::too_many_arguments)]
fn level_diag(
    config: &SolverConfig,
    k: usize,
    level: usize,
    t: f64,
    penalty_iters: usize,
    projection_iters: usize,
    residual: f64,
    actions: &[Action],
) -> LevelDiagnostics {
    let g = &config.grid;
    let mut trades = 0;
    let mut inside = 0;
    for (idx, i, j) in g.nodes() {
        if let Action::Trade(d) = actions[idx] {
            trades += 1;
            let y = crate::market::rebalance(g.state(i, j), d, &config.cost);
            let (ti, tj) = g.nearest_node(y);
            if matches!(actions[g.index(ti, tj)], Action::Trade(_)) {
                inside += 1;
            }
        }
    }
    LevelDiagnostics {
        k,
        level,
        t,
        penalty_iters,
        projection_iters,
        residual,
        trades,
        targets_in_intervention: inside,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::goals::Goal;

    fn small(c_min: f64, n: usize) -> SolverConfig {
        SolverConfig::new(
            MarketParams { r: 0.0, mu: 0.3, sigma: 0.4 },
            CostModel::Fixed { c_min },
            GoalSchedule::benchmark(),
            n,
            0.05,
        )
        .unwrap()
    }

    #[test]
    fn rejects_small_domain() {
        let mut cfg = small(0.02, 20);
        cfg.grid = build_grid(8.0, 20).unwrap();
        assert!(matches!(cfg.validate(), Err(Error::InvalidParameter { name: "w_max", .. })));
    }

    #[test]
    fn terminal_examples() {
        let cfg = SolverConfig::benchmark(0.02);
        let out = terminal_condition(&cfg).unwrap();
        let g = &cfg.grid;
        // nearest nodes to (6, 0) and (0, 6.02) sit at or above the target
        let (i, _) = g.nearest_node(PortfolioState::new(6.0, 0.0));
        let i = if g.coord(i) < 6.0 { i + 1 } else { i };
        assert_eq!(out.values[g.index(i, 0)], 0.0);
        let j = (6.02 / g.dx).ceil() as usize;
        assert_eq!(out.values[g.index(0, j)], 0.0);
        assert!((out.values[0] - 1.2).abs() < 1e-15);
    }

    #[test]
    fn zero_next_slice_gives_zero_and_hold() {
        let cfg = small(0.02, 20);
        let z = vec![0.0; cfg.grid.node_count()];
        // free-boundary run: all-zero data, corner pinned separately
        let op = PdeOperator::new(cfg.market, cfg.grid, cfg.dt).unwrap();
        let v = op.step(&z, Boundary::Free);
        assert!(v.iter().all(|&x| x == 0.0));
        let out = qvi_time_step_with(&z, 0.95, &cfg, Boundary::Free).unwrap();
        assert!(out.values.iter().all(|&x| x == 0.0));
        for (idx, i, j) in cfg.grid.nodes() {
            if cfg.plateau_action(i, j).is_none() {
                assert_eq!(out.actions[idx], Action::Hold, "node ({i},{j})");
            }
        }
    }

    #[test]
    fn deadline_examples() {
        let cfg = small(0.02, 40);
        let zero = vec![0.0; cfg.grid.node_count()];
        let out = deadline_coupling(&zero, 1, &cfg).unwrap();
        for (idx, i, _) in cfg.grid.nodes() {
            let x0 = cfg.grid.coord(i);
            if x0 >= 3.0 {
                assert_eq!(out.theta[idx], 3.0);
            } else {
                assert_eq!(out.theta[idx], x0);
            }
            assert!(out.theta[idx] <= x0 + 1e-12);
        }
        // with a real V_2, the corner equals the residual sum
        let two = terminal_condition(&cfg).unwrap();
        let out = deadline_coupling(&two.values, 1, &cfg).unwrap();
        assert!((out.values[0] - 4.2).abs() < 1e-12);
        assert_eq!(out.theta[0], 0.0);
    }

    #[test]
    fn funding_candidate_set() {
        let c = funding_candidates(1.0, 0.3, 0.25);
        assert_eq!(c, vec![0.0, 0.25, 0.3, 0.5, 0.75, 1.0]);
        assert_eq!(funding_candidates(0.0, 3.0, 0.1), vec![0.0]);
    }

    #[test]
    fn small_solve_invariants() {
        let cfg = small(0.02, 30);
        let res = solve(&cfg).unwrap();
        let g = &cfg.grid;
        for k in 1..=2 {
            let top = cfg.schedule.residual_weighted_targets(k).unwrap();
            for (level, slice) in res.surfaces.levels(k).iter().enumerate() {
                assert!((slice[0] - top).abs() < 1e-10, "corner k={k} level={level}");
                for (idx, i, j) in g.nodes() {
                    let v = slice[idx];
                    assert!(v >= -1e-12 && v <= top + 1e-12);
                    if i + j == g.n {
                        assert!(v.abs() <= 1e-8);
                    }
                    if let Action::Trade(d) = res.actions(k, level)[idx] {
                        let iv = crate::market::feasible_interval(g.state(i, j), &cfg.cost).unwrap();
                        assert!(iv.contains(d));
                    }
                }
            }
        }
        assert!(res.diagnostics.max_residual() <= 10.0 * cfg.penalty_tol);
        for (idx, i, _) in g.nodes() {
            assert!(res.funding_policy[0][idx] <= g.coord(i) + 1e-12);
        }
    }

    #[test]
    fn single_goal_schedule_bounded() {
        let cfg = SolverConfig::new(
            MarketParams { r: 0.02, mu: 0.1, sigma: 0.3 },
            CostModel::FixedPlusProportional { c_min: 0.05, rate: 0.01 },
            GoalSchedule::new(vec![Goal::new(0.5, 1e-3, 1.0)]).unwrap(),
            12,
            0.1,
        )
        .unwrap();
        let res = solve(&cfg).unwrap();
        for slice in res.surfaces.levels(1) {
            assert!(slice.iter().all(|&v| (-1e-12..=1e-3 + 1e-12).contains(&v)));
        }
    }
}
