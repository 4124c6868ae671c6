//! JSON run configuration.
//!
//! ```json
//! {
//!   "market": {"r": 0.0, "mu": 0.3, "sigma": 0.4},
//!   "cost": {"kind": "fixed", "c_min": 0.02},
//!   "goals": [{"t": 1, "g": 3, "w": 1}, {"t": 2, "g": 6, "w": 0.2}],
//!   "grid": {"n": 200},
//!   "dt": 0.01,
//!   "solver": {"penalty_rho": 1e7, "penalty_tol": 1e-8, "max_iters": 50},
//!   "sim": {"paths": 100000, "dt": 0.001, "seed": 7}
//! }
//! ```
//!
//! `grid.w_max` defaults to `Σ G_k + c_min`; `solver` and `sim` may be omitted.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::goals::{Goal, GoalSchedule};
use crate::grid::build_grid;
use crate::market::{CostModel, MarketParams};
use crate::solver::{SolverConfig, DEFAULT_MAX_PENALTY_ITERS, DEFAULT_PENALTY_RHO, DEFAULT_PENALTY_TOL};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostKind {
    Fixed,
    FixedPlusProportional,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostSection {
    pub kind: CostKind,
    pub c_min: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w_max: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    #[serde(default = "default_rho")]
    pub penalty_rho: f64,
    #[serde(default = "default_tol")]
    pub penalty_tol: f64,
    #[serde(default = "default_iters")]
    pub max_iters: usize,
}

fn default_rho() -> f64 {
    DEFAULT_PENALTY_RHO
}
fn default_tol() -> f64 {
    DEFAULT_PENALTY_TOL
}
fn default_iters() -> usize {
    DEFAULT_MAX_PENALTY_ITERS
}

impl Default for SolverSection {
    fn default() -> Self {
        Self { penalty_rho: DEFAULT_PENALTY_RHO, penalty_tol: DEFAULT_PENALTY_TOL, max_iters: DEFAULT_MAX_PENALTY_ITERS }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    #[serde(default = "default_paths")]
    pub paths: usize,
    #[serde(default = "default_sim_dt")]
    pub dt: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_paths() -> usize {
    100_000
}
fn default_sim_dt() -> f64 {
    1e-3
}

impl Default for SimSection {
    fn default() -> Self {
        Self { paths: default_paths(), dt: default_sim_dt(), seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub market: MarketParams,
    pub cost: CostSection,
    pub goals: Vec<Goal>,
    pub grid: GridSection,
    pub dt: f64,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub sim: SimSection,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        cfg.solver_config()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// The benchmark parameter set with fixed cost `c_min`.
    pub fn benchmark(c_min: f64) -> Self {
        Self {
            market: MarketParams { r: 0.0, mu: 0.3, sigma: 0.4 },
            cost: CostSection { kind: CostKind::Fixed, c_min, rate: None },
            goals: GoalSchedule::benchmark().goals().to_vec(),
            grid: GridSection { n: 200, w_max: None },
            dt: 0.01,
            solver: SolverSection::default(),
            sim: SimSection { seed: 7, ..SimSection::default() },
        }
    }

    pub fn cost_model(&self) -> Result<CostModel> {
        match (self.cost.kind, self.cost.rate) {
            (CostKind::Fixed, None) => CostModel::fixed(self.cost.c_min),
            (CostKind::Fixed, Some(_)) => Err(Error::InvalidParameter {
                name: "cost.rate",
                reason: "only allowed with kind fixed_plus_proportional".into(),
            }),
            (CostKind::FixedPlusProportional, Some(rate)) => CostModel::fixed_plus_proportional(self.cost.c_min, rate),
            (CostKind::FixedPlusProportional, None) => {
                Err(Error::InvalidParameter { name: "cost.rate", reason: "required for fixed_plus_proportional".into() })
            }
        }
    }

    /// Validated solver configuration.
    pub fn solver_config(&self) -> Result<SolverConfig> {
        self.market.validate()?;
        let cost = self.cost_model()?;
        let schedule = GoalSchedule::new(self.goals.clone())?;
        let mut cfg = SolverConfig::new(self.market, cost, schedule, self.grid.n, self.dt)?;
        if let Some(w_max) = self.grid.w_max {
            cfg.grid = build_grid(w_max, self.grid.n)?;
        }
        cfg.penalty_rho = self.solver.penalty_rho;
        cfg.penalty_tol = self.solver.penalty_tol;
        cfg.max_penalty_iters = self.solver.max_iters;
        cfg.validate()?;
        cfg.segmentation()?;
        Ok(cfg)
    }
}
