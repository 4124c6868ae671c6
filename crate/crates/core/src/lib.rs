//! Goal-based portfolio selection with fixed transaction costs.
//!
//! The value of the goal-shortfall problem solves a system of
//! quasi-variational inequalities, one per goal segment, coupled at the
//! deadlines. This crate discretises that system on a triangular wealth
//! grid, extracts the impulse-trading and goal-funding policy, checks the
//! solution against analytic bounds, and replays the policy by Monte Carlo.

// Validation uses `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bounds;
pub mod config;
pub mod error;
pub mod frictionless;
pub mod goals;
pub mod grid;
pub mod market;
pub mod policy;
pub mod simulator;
pub mod solver;
pub mod store;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use goals::{Goal, GoalSchedule};
pub use grid::{build_grid, build_time_segmentation, interpolate, GridSpec, TimeSegmentation, ValueSurface};
pub use market::{CostModel, MarketParams, PortfolioState};
pub use solver::{solve, Action, SolveResult, SolverConfig};
pub use bounds::{analytic_subsolution, check_bounds, BoundsReport, SubsolutionParams};
pub use frictionless::{solve_frictionless, v_shape_profile, FrictionlessResult, WealthGrid};
pub use policy::{classify_regions, funding_rule, target_points, Label, Policy, PolicyAction, RegionMap};
pub use simulator::{compare_to_value, gbm_step, simulate, Comparison, SimConfig, SimResult};
