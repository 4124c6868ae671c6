//! Market primitives: portfolio states, transaction costs, rebalancing,
//! feasibility and liquidation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance used when classifying states on region boundaries.
pub const BOUNDARY_TOL: f64 = 1e-12;

const CHI_TOL: f64 = 1e-12;
const CHI_MAX_ITERS: usize = 200;

/// Money held in the bank account (`x0`) and in the stock (`x1`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PortfolioState {
    pub x0: f64,
    pub x1: f64,
}

impl PortfolioState {
    pub const ZERO: PortfolioState = PortfolioState { x0: 0.0, x1: 0.0 };

    pub fn new(x0: f64, x1: f64) -> Self {
        Self { x0, x1 }
    }

    /// Checked constructor for states in the closed quadrant.
    pub fn try_new(x0: f64, x1: f64) -> Result<Self> {
        if !(x0.is_finite() && x1.is_finite()) || x0 < 0.0 || x1 < 0.0 {
            return Err(Error::OutOfDomain { x0, x1 });
        }
        Ok(Self { x0, x1 })
    }

    pub fn total(&self) -> f64 {
        self.x0 + self.x1
    }

    pub fn is_admissible(&self) -> bool {
        self.x0 >= -BOUNDARY_TOL && self.x1 >= -BOUNDARY_TOL
    }
}

/// Risk-free rate, stock drift and stock volatility.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarketParams {
    pub r: f64,
    pub mu: f64,
    pub sigma: f64,
}

impl MarketParams {
    pub fn new(r: f64, mu: f64, sigma: f64) -> Result<Self> {
        let m = Self { r, mu, sigma };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.r.is_finite() && self.mu.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "market",
                reason: "r and mu must be finite".into(),
            });
        }
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(Error::InvalidParameter {
                name: "sigma",
                reason: format!("must be positive, got {}", self.sigma),
            });
        }
        Ok(())
    }
}

/// Transaction cost charged on a trade of size `Δ` (positive = buy stock).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum CostModel {
    /// `C(Δ) = c_min` for every trade.
    Fixed { c_min: f64 },
    /// `C(Δ) = c_min + rate·|Δ|`.
    FixedPlusProportional { c_min: f64, rate: f64 },
}

impl CostModel {
    pub fn fixed(c_min: f64) -> Result<Self> {
        let m = CostModel::Fixed { c_min };
        m.validate()?;
        Ok(m)
    }

    pub fn fixed_plus_proportional(c_min: f64, rate: f64) -> Result<Self> {
        let m = CostModel::FixedPlusProportional { c_min, rate };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.c_min();
        if !(c.is_finite() && c > 0.0) {
            return Err(Error::InvalidParameter {
                name: "c_min",
                reason: format!("must be positive, got {c}"),
            });
        }
        if let CostModel::FixedPlusProportional { rate, .. } = *self {
            // rate < 1 keeps Δ + C(Δ) strictly increasing on the sell side.
            if !(rate.is_finite() && (0.0..1.0).contains(&rate)) {
                return Err(Error::InvalidParameter {
                    name: "rate",
                    reason: format!("must lie in [0, 1), got {rate}"),
                });
            }
        }
        Ok(())
    }

    pub fn c_min(&self) -> f64 {
        match *self {
            CostModel::Fixed { c_min } | CostModel::FixedPlusProportional { c_min, .. } => c_min,
        }
    }

    pub fn is_fixed(&self) -> bool {
        matches!(self, CostModel::Fixed { .. })
    }

    /// `C(Δ)`.
    pub fn cost(&self, delta: f64) -> f64 {
        match *self {
            CostModel::Fixed { c_min } => c_min,
            CostModel::FixedPlusProportional { c_min, rate } => c_min + rate * delta.abs(),
        }
    }

    /// Inverse of `Δ ↦ Δ + C(Δ)` on `[0, ∞)`.
    pub fn chi(&self, y: f64) -> Result<f64> {
        if !(y >= 0.0) {
            return Err(Error::InvalidParameter {
                name: "y",
                reason: format!("chi is defined on [0, inf), got {y}"),
            });
        }
        match *self {
            CostModel::Fixed { c_min } => Ok(y - c_min),
            CostModel::FixedPlusProportional { c_min, .. } => {
                let f = |d: f64| d + self.cost(d) - y;
                // Δ + C(Δ) ≥ Δ + c_min, so the root is at most y - c_min.
                let mut hi = y - c_min;
                let mut lo = hi.min(0.0) - 1.0;
                while f(lo) > 0.0 {
                    lo *= 2.0;
                }
                if f(hi) <= 0.0 {
                    return Ok(hi);
                }
                for _ in 0..CHI_MAX_ITERS {
                    let mid = 0.5 * (lo + hi);
                    if f(mid) > 0.0 {
                        hi = mid;
                    } else {
                        lo = mid;
                    }
                    if hi - lo <= CHI_TOL {
                        break;
                    }
                }
                Ok(0.5 * (lo + hi))
            }
        }
    }
}

/// Closed interval of feasible trade sizes `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TradeInterval {
    pub lo: f64,
    pub hi: f64,
}

impl TradeInterval {
    pub fn contains(&self, delta: f64) -> bool {
        delta >= self.lo - BOUNDARY_TOL && delta <= self.hi + BOUNDARY_TOL
    }
}

/// Post-trade portfolio `(x0 - Δ - C(Δ), x1 + Δ)`.
///
/// The caller is responsible for checking `delta` against
/// [`feasible_interval`]; infeasible sizes produce states outside the quadrant.
pub fn rebalance(x: PortfolioState, delta: f64, model: &CostModel) -> PortfolioState {
    PortfolioState {
        x0: x.x0 - delta - model.cost(delta),
        x1: x.x1 + delta,
    }
}

/// States too poor to afford any trade.
pub fn in_no_trade_region(x: PortfolioState, model: &CostModel) -> bool {
    x.x0 + x.x1 < model.cost(-x.x1) - BOUNDARY_TOL
}

/// Trade sizes that keep both holdings nonnegative, or `None` when no trade
/// is affordable.
pub fn feasible_interval(x: PortfolioState, model: &CostModel) -> Option<TradeInterval> {
    if in_no_trade_region(x, model) {
        return None;
    }
    let lo = -x.x1;
    let hi = model.chi(x.x0.max(0.0)).ok()?;
    // Inside the tolerance band the interval collapses to full liquidation.
    Some(TradeInterval { lo, hi: hi.max(lo) })
}

/// `x0 + (x1 - C(-x1))⁺`: bank balance plus net stock proceeds if selling pays.
pub fn liquidation_value(x: PortfolioState, model: &CostModel) -> f64 {
    x.x0 + (x.x1 - model.cost(-x.x1)).max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn fixed() -> CostModel {
        CostModel::fixed(0.02).unwrap()
    }

    fn prop() -> CostModel {
        CostModel::fixed_plus_proportional(0.02, 0.01).unwrap()
    }

    #[test]
    fn cost_examples() {
        assert_eq!(fixed().cost(5.0), 0.02);
        assert_eq!(fixed().cost(0.0), 0.02);
        assert_abs_diff_eq!(prop().cost(-3.0), 0.05, epsilon = 1e-15);
    }

    #[test]
    fn rejects_bad_models() {
        assert!(CostModel::fixed(0.0).is_err());
        assert!(CostModel::fixed_plus_proportional(0.02, 1.0).is_err());
        assert!(MarketParams::new(0.0, 0.3, 0.0).is_err());
    }

    #[test]
    fn chi_closed_form() {
        assert_abs_diff_eq!(fixed().chi(1.0).unwrap(), 0.98, epsilon = 1e-15);
        assert_abs_diff_eq!(fixed().chi(0.0).unwrap(), -0.02, epsilon = 1e-15);
        assert!(fixed().chi(-0.1).is_err());
    }

    #[test]
    fn chi_round_trip() {
        for model in [fixed(), prop()] {
            for delta in [-1.0, 0.0, 2.5] {
                let y = delta + model.cost(delta);
                if y < 0.0 {
                    // Δ = -1 maps below the domain of chi
                    assert!(model.chi(y).is_err());
                    continue;
                }
                assert_abs_diff_eq!(model.chi(y).unwrap(), delta, epsilon = 1e-10);
            }
            let small = -0.5 * model.c_min();
            assert_abs_diff_eq!(model.chi(small + model.cost(small)).unwrap(), small, epsilon = 1e-10);
        }
    }

    #[test]
    fn rebalance_examples() {
        let m = fixed();
        let a = rebalance(PortfolioState::new(5.0, 0.0), 2.0, &m);
        assert_abs_diff_eq!(a.x0, 2.98, epsilon = 1e-14);
        assert_abs_diff_eq!(a.x1, 2.0, epsilon = 1e-14);
        let b = rebalance(PortfolioState::new(1.0, 4.0), -4.0, &m);
        assert_abs_diff_eq!(b.x0, 4.98, epsilon = 1e-14);
        assert_eq!(b.x1, 0.0);
        let c = rebalance(PortfolioState::new(3.0, 1.0), 0.0, &m);
        assert_abs_diff_eq!(c.x0, 2.98, epsilon = 1e-14);
        assert_eq!(c.x1, 1.0);
    }

    #[test]
    fn feasible_interval_examples() {
        let m = fixed();
        let d = feasible_interval(PortfolioState::new(1.0, 0.5), &m).unwrap();
        assert_eq!(d.lo, -0.5);
        assert_abs_diff_eq!(d.hi, 0.98, epsilon = 1e-15);
        assert!(feasible_interval(PortfolioState::new(0.01, 0.0), &m).is_none());
        assert!(feasible_interval(PortfolioState::ZERO, &m).is_none());
        // boundary of the no-trade region is feasible
        let e = feasible_interval(PortfolioState::new(0.02, 0.0), &m).unwrap();
        assert_abs_diff_eq!(e.hi, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn no_trade_region_examples() {
        let m = fixed();
        assert!(in_no_trade_region(PortfolioState::new(0.015, 0.0), &m));
        assert!(!in_no_trade_region(PortfolioState::new(0.02, 0.0), &m));
        assert!(!in_no_trade_region(PortfolioState::new(5.0, 3.0), &m));
    }

    #[test]
    fn liquidation_examples() {
        let m = fixed();
        assert_abs_diff_eq!(liquidation_value(PortfolioState::new(0.0, 5.0), &m), 4.98, epsilon = 1e-15);
        assert_eq!(liquidation_value(PortfolioState::new(2.0, 0.01), &m), 2.0);
        assert_eq!(liquidation_value(PortfolioState::ZERO, &m), 0.0);
        assert_eq!(liquidation_value(PortfolioState::ZERO, &prop()), 0.0);
    }

    fn any_model() -> impl Strategy<Value = CostModel> {
        prop_oneof![
            (0.001f64..1.0).prop_map(|c| CostModel::Fixed { c_min: c }),
            (0.001f64..1.0, 0.0f64..0.5)
                .prop_map(|(c, r)| CostModel::FixedPlusProportional { c_min: c, rate: r }),
        ]
    }

    proptest! {
        #[test]
        fn chi_inverts_cost(model in any_model(), delta in -50.0f64..50.0) {
            let y = delta + model.cost(delta);
            prop_assume!(y >= 0.0);
            prop_assert!((model.chi(y).unwrap() - delta).abs() <= 1e-10);
        }

        #[test]
        fn feasibility_agrees_with_no_trade_region(
            model in any_model(), x0 in 0.0f64..3.0, x1 in 0.0f64..3.0
        ) {
            let x = PortfolioState::new(x0, x1);
            prop_assert_eq!(feasible_interval(x, &model).is_none(), in_no_trade_region(x, &model));
        }

        #[test]
        fn feasible_endpoints_stay_in_quadrant(
            model in any_model(), x0 in 0.0f64..10.0, x1 in 0.0f64..10.0, s in 0.0f64..1.0
        ) {
            let x = PortfolioState::new(x0, x1);
            if let Some(d) = feasible_interval(x, &model) {
                for delta in [d.lo, d.hi, d.lo + s * (d.hi - d.lo)] {
                    let y = rebalance(x, delta, &model);
                    prop_assert!(y.x0 >= -1e-9 && y.x1 >= -1e-9);
                    // total wealth drops by exactly the cost
                    prop_assert!((y.total() - (x.total() - model.cost(delta))).abs() <= 1e-9);
                }
            }
        }

        #[test]
        fn liquidation_monotone(model in any_model(), x0 in 0.0f64..5.0, x1 in 0.0f64..5.0, h in 0.0f64..1.0) {
            let base = liquidation_value(PortfolioState::new(x0, x1), &model);
            prop_assert!(liquidation_value(PortfolioState::new(x0 + h, x1), &model) >= base);
            prop_assert!(liquidation_value(PortfolioState::new(x0, x1 + h), &model) >= base - 1e-15);
        }
    }
}
