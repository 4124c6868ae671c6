//! Monte Carlo replay of the solved policy under geometric Brownian motion.
//!
//! Each path draws from its own ChaCha8 stream (`seed`, stream = path index),
//! so results do not depend on thread scheduling. The stock moves by exact
//! log-normal steps; the bank account grows at `e^{r dt}`.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market::{liquidation_value, rebalance, MarketParams, PortfolioState};
use crate::policy::{funding_rule, Policy};

const ALIGN_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n_paths: usize,
    pub dt_sim: f64,
    pub seed: u64,
    pub initial: PortfolioState,
    pub start_time: f64,
    /// Ignore every trade signal (funding still happens).
    #[serde(default)]
    pub never_trade: bool,
}

impl SimConfig {
    pub fn new(initial: PortfolioState, n_paths: usize, dt_sim: f64, seed: u64) -> Self {
        Self { n_paths, dt_sim, seed, initial, start_time: 0.0, never_trade: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub n_paths: usize,
    pub mean_objective: f64,
    pub std_error: f64,
    pub mean_trades: f64,
    pub mean_total_cost_paid: f64,
    pub per_goal_mean_shortfall: Vec<f64>,
    /// Largest number of trades on one path.
    pub max_trades: usize,
}

/// Exact GBM update of the stock holding.
pub fn gbm_step(x1: f64, dt: f64, z: f64, m: &MarketParams) -> f64 {
    x1 * ((m.mu - 0.5 * m.sigma * m.sigma) * dt + m.sigma * dt.sqrt() * z).exp()
}

/// One event on a traced path.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceEvent {
    pub t: f64,
    pub x0: f64,
    pub x1: f64,
    pub event: String,
}

pub fn write_trace_csv<W: Write>(mut w: W, trace: &[TraceEvent]) -> Result<()> {
    writeln!(w, "t,x0,x1,event")?;
    for e in trace {
        writeln!(w, "{},{},{},{}", e.t, e.x0, e.x1, e.event)?;
    }
    Ok(())
}

struct PathOutcome {
    objective: f64,
    shortfalls: Vec<f64>,
    trades: usize,
    cost_paid: f64,
}

struct Plan {
    /// Segments crossed by the simulation: `(k, first step, last step)`, steps
    /// counted from the segment start.
    legs: Vec<(usize, usize, usize)>,
    cap: usize,
}

fn plan(policy: &Policy<'_>, cfg: &SimConfig) -> Result<Plan> {
    let r = policy.result;
    let schedule = &r.config.schedule;
    if !(cfg.dt_sim > 0.0 && cfg.dt_sim.is_finite()) {
        return Err(Error::InvalidParameter { name: "dt_sim", reason: format!("must be positive, got {}", cfg.dt_sim) });
    }
    if cfg.n_paths == 0 {
        return Err(Error::InvalidParameter { name: "n_paths", reason: "must be at least 1".into() });
    }
    if !cfg.initial.is_admissible() {
        return Err(Error::OutOfDomain { x0: cfg.initial.x0, x1: cfg.initial.x1 });
    }
    let solver_dt = r.segmentation.dt;
    let ratio = if cfg.dt_sim <= solver_dt { solver_dt / cfg.dt_sim } else { cfg.dt_sim / solver_dt };
    if (ratio - ratio.round()).abs() > 1e-9 * ratio.max(1.0) {
        return Err(Error::IncompatiblePolicy(format!(
            "simulation step {} and solver step {solver_dt} are not integer multiples",
            cfg.dt_sim
        )));
    }
    let t0 = cfg.start_time;
    let horizon = schedule.horizon();
    if !(t0 >= 0.0 && t0 < horizon) {
        return Err(Error::IncompatiblePolicy(format!("start time {t0} outside [0, {horizon})")));
    }
    let mut legs = Vec::new();
    for s in &r.segmentation.segments {
        if s.end <= t0 + ALIGN_TOL {
            continue;
        }
        let len = s.end - s.start;
        let steps = (len / cfg.dt_sim).round();
        if (steps * cfg.dt_sim - len).abs() > 1e-9 || steps < 1.0 {
            return Err(Error::IncompatiblePolicy(format!(
                "simulation step {} does not divide segment {} of length {len}",
                cfg.dt_sim, s.k
            )));
        }
        let first = ((t0 - s.start).max(0.0) / cfg.dt_sim).round();
        if (s.start + first * cfg.dt_sim - t0.max(s.start)).abs() > 1e-9 {
            return Err(Error::IncompatiblePolicy(format!("start time {t0} is not on the simulation grid")));
        }
        legs.push((s.k, first as usize, steps as usize));
    }
    let cap = (r.grid().w_max / r.config.cost.c_min()).ceil() as usize + schedule.len();
    Ok(Plan { legs, cap })
}

struct PathState<'t> {
    path: u64,
    cap: usize,
    x: PortfolioState,
    out: PathOutcome,
    trace: Option<&'t mut Vec<TraceEvent>>,
}

impl PathState<'_> {
    fn log(&mut self, t: f64, event: impl FnOnce() -> String) {
        if let Some(tr) = self.trace.as_deref_mut() {
            tr.push(TraceEvent { t, x0: self.x.x0, x1: self.x.x1, event: event() });
        }
    }

    /// Executes the trade prescribed at `level` of segment `k`, if any.
    fn trade(&mut self, policy: &Policy<'_>, cfg: &SimConfig, k: usize, level: usize, t: f64) -> Result<bool> {
        if cfg.never_trade {
            return Ok(false);
        }
        let Some(d) = policy.trade(k, level, self.x) else {
            return Ok(false);
        };
        self.out.trades += 1;
        if self.out.trades > self.cap {
            return Err(Error::TradeCapExceeded { path: self.path, cap: self.cap });
        }
        let cost = &policy.result.config.cost;
        self.out.cost_paid += cost.cost(d);
        let y = rebalance(self.x, d, cost);
        self.x = PortfolioState::new(y.x0.max(0.0), y.x1.max(0.0));
        self.log(t, || format!("trade {d}"));
        Ok(true)
    }
}

fn run_path(policy: &Policy<'_>, cfg: &SimConfig, plan: &Plan, path: u64, trace: Option<&mut Vec<TraceEvent>>) -> Result<PathOutcome> {
    let r = policy.result;
    let market = &r.config.market;
    let schedule = &r.config.schedule;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(path);
    let growth = (market.r * cfg.dt_sim).exp();
    let mut st = PathState {
        path,
        cap: plan.cap,
        x: cfg.initial,
        out: PathOutcome { objective: 0.0, shortfalls: vec![0.0; schedule.len()], trades: 0, cost_paid: 0.0 },
        trace,
    };

    for &(k, first, steps) in &plan.legs {
        let seg = r.segmentation.segment(k);
        let time = |s: usize| if s == steps { seg.end } else { seg.start + s as f64 * cfg.dt_sim };
        // trading is allowed at the start of every leg
        let t = time(first);
        st.trade(policy, cfg, k, policy.level_at(k, t), t)?;
        for s in first + 1..=steps {
            let z: f64 = StandardNormal.sample(&mut rng);
            st.x.x0 *= growth;
            st.x.x1 = gbm_step(st.x.x1, cfg.dt_sim, z, market);
            let t = time(s);
            if s < steps {
                st.trade(policy, cfg, k, policy.level_at(k, t), t)?;
                continue;
            }
            // deadline: trade to the fixed point, then fund
            while st.trade(policy, cfg, k, seg.steps, t)? {}
            let goal = schedule.goal(k)?;
            let theta = if k == schedule.len() {
                liquidation_value(st.x, &r.config.cost)
            } else {
                funding_rule(r, k, st.x)?.clamp(0.0, st.x.x0.max(0.0))
            };
            if k < schedule.len() {
                st.x.x0 -= theta;
            }
            let shortfall = (goal.target - theta).max(0.0);
            st.out.shortfalls[k - 1] = shortfall;
            st.out.objective += goal.weight * shortfall;
            st.log(t, || format!("fund {theta}"));
        }
    }
    Ok(st.out)
}

/// Neumaier-compensated running sum.
#[derive(Default)]
struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Simulates `cfg.n_paths` paths of the policy and averages the objective.
pub fn simulate(policy: &Policy<'_>, cfg: &SimConfig) -> Result<SimResult> {
    let plan = plan(policy, cfg)?;
    let outcomes: Vec<PathOutcome> = (0..cfg.n_paths as u64)
        .into_par_iter()
        .map(|p| run_path(policy, cfg, &plan, p, None))
        .collect::<Result<_>>()?;

    let n = outcomes.len() as f64;
    let goals = policy.result.config.schedule.len();
    let (mut obj, mut trades, mut paid) = (KahanSum::default(), KahanSum::default(), KahanSum::default());
    let mut shortfall: Vec<KahanSum> = (0..goals).map(|_| KahanSum::default()).collect();
    for o in &outcomes {
        obj.add(o.objective);
        trades.add(o.trades as f64);
        paid.add(o.cost_paid);
        for (acc, s) in shortfall.iter_mut().zip(&o.shortfalls) {
            acc.add(*s);
        }
    }
    let mean = obj.value() / n;
    let mut sq = KahanSum::default();
    for o in &outcomes {
        sq.add((o.objective - mean) * (o.objective - mean));
    }
    let var = if outcomes.len() > 1 { sq.value() / (n - 1.0) } else { 0.0 };
    Ok(SimResult {
        n_paths: outcomes.len(),
        mean_objective: mean,
        std_error: (var / n).sqrt(),
        mean_trades: trades.value() / n,
        mean_total_cost_paid: paid.value() / n,
        per_goal_mean_shortfall: shortfall.iter().map(|s| s.value() / n).collect(),
        max_trades: outcomes.iter().map(|o| o.trades).max().unwrap_or(0),
    })
}

/// Events along one path, for debugging.
pub fn trace_path(policy: &Policy<'_>, cfg: &SimConfig, path: u64) -> Result<Vec<TraceEvent>> {
    let plan = plan(policy, cfg)?;
    let mut trace = vec![TraceEvent { t: cfg.start_time, x0: cfg.initial.x0, x1: cfg.initial.x1, event: "start".into() }];
    run_path(policy, cfg, &plan, path, Some(&mut trace))?;
    Ok(trace)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub pde_value: f64,
    pub mean_objective: f64,
    pub std_error: f64,
    pub gap: f64,
    /// `|gap| / std_error`; zero when both vanish.
    pub gap_over_se: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Passes when `|mean − pde| ≤ max(3·std_error, 0.05)`.
pub fn compare_to_value(sim: &SimResult, pde_value: f64) -> Comparison {
    let gap = sim.mean_objective - pde_value;
    let gap_over_se = if gap == 0.0 {
        0.0
    } else if sim.std_error == 0.0 {
        f64::INFINITY
    } else {
        gap.abs() / sim.std_error
    };
    let tolerance = (3.0 * sim.std_error).max(0.05);
    Comparison {
        pde_value,
        mean_objective: sim.mean_objective,
        std_error: sim.std_error,
        gap,
        gap_over_se,
        tolerance,
        passed: gap.abs() <= tolerance,
    }
}
