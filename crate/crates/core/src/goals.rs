//! Goal schedule and the weighted shortfall objective.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One goal: target `target` due at `deadline`, weighted by `weight`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Goal {
    #[serde(rename = "t")]
    pub deadline: f64,
    #[serde(rename = "g")]
    pub target: f64,
    #[serde(rename = "w")]
    pub weight: f64,
}

impl Goal {
    pub fn new(deadline: f64, target: f64, weight: f64) -> Self {
        Self { deadline, target, weight }
    }
}

/// Goals ordered by deadline. Goal indices are 1-based in the public API.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Goal>", into = "Vec<Goal>")]
pub struct GoalSchedule {
    goals: Vec<Goal>,
}

impl TryFrom<Vec<Goal>> for GoalSchedule {
    type Error = Error;

    fn try_from(goals: Vec<Goal>) -> Result<Self> {
        GoalSchedule::new(goals)
    }
}

impl From<GoalSchedule> for Vec<Goal> {
    fn from(s: GoalSchedule) -> Self {
        s.goals
    }
}

impl GoalSchedule {
    pub fn new(goals: Vec<Goal>) -> Result<Self> {
        validate(&goals)?;
        Ok(Self { goals })
    }

    /// Two goals `(T, G, w)`: `(1, 3, 1)` and `(2, 6, 0.2)`.
    pub fn benchmark() -> Self {
        Self::new(vec![Goal::new(1.0, 3.0, 1.0), Goal::new(2.0, 6.0, 0.2)]).expect("valid benchmark")
    }

    pub fn len(&self) -> usize {
        self.goals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.goals.is_empty()
    }

    pub fn goals(&self) -> &[Goal] {
        &self.goals
    }

    /// Goal `k` (1-based).
    pub fn goal(&self, k: usize) -> Result<&Goal> {
        self.check_index(k)?;
        Ok(&self.goals[k - 1])
    }

    pub fn deadline(&self, k: usize) -> Result<f64> {
        Ok(self.goal(k)?.deadline)
    }

    /// Start of segment `k`: `T_{k-1}`, with `T_0 = 0`.
    pub fn segment_start(&self, k: usize) -> Result<f64> {
        self.check_index(k)?;
        Ok(if k == 1 { 0.0 } else { self.goals[k - 2].deadline })
    }

    pub fn horizon(&self) -> f64 {
        self.goals.last().map_or(0.0, |g| g.deadline)
    }

    pub fn total_target(&self) -> f64 {
        self.goals.iter().map(|g| g.target).sum()
    }

    /// Sum of targets of goals `k..=K`.
    pub fn residual_targets(&self, k: usize) -> Result<f64> {
        self.check_index(k)?;
        Ok(self.goals[k - 1..].iter().map(|g| g.target).sum())
    }

    /// `w_k · (G_k − θ)⁺`.
    pub fn shortfall_penalty(&self, k: usize, theta: f64) -> Result<f64> {
        let g = self.goal(k)?;
        Ok(g.weight * (g.target - theta).max(0.0))
    }

    /// `Σ_{i≥k} w_i G_i`: the value of an empty portfolio in segment `k`.
    pub fn residual_weighted_targets(&self, k: usize) -> Result<f64> {
        self.check_index(k)?;
        Ok(self.goals[k - 1..].iter().map(|g| g.weight * g.target).sum())
    }

    /// Segment containing `t`; a deadline belongs to the segment it closes.
    pub fn segment_of(&self, t: f64) -> Option<usize> {
        const EPS: f64 = 1e-9;
        if t < -EPS {
            return None;
        }
        self.goals.iter().position(|g| t <= g.deadline + EPS).map(|i| i + 1)
    }

    /// Copy of the schedule with goal `k`'s weight replaced.
    pub fn with_weight(&self, k: usize, weight: f64) -> Result<Self> {
        self.check_index(k)?;
        let mut goals = self.goals.clone();
        goals[k - 1].weight = weight;
        Self::new(goals)
    }

    fn check_index(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.goals.len() {
            return Err(Error::GoalIndexOutOfRange { index: k, len: self.goals.len() });
        }
        Ok(())
    }
}

/// Checks ordering and positivity of a goal list.
pub fn validate(goals: &[Goal]) -> Result<()> {
    if goals.is_empty() {
        return Err(Error::EmptySchedule);
    }
    let mut prev = 0.0;
    for (i, g) in goals.iter().enumerate() {
        let index = i + 1;
        if !(g.deadline.is_finite() && g.deadline > prev) {
            return Err(Error::NonIncreasingDeadlines { index, deadline: g.deadline });
        }
        if !(g.target.is_finite() && g.target > 0.0) {
            return Err(Error::NonPositiveTarget { index, target: g.target });
        }
        if !(g.weight.is_finite() && g.weight > 0.0) {
            return Err(Error::NonPositiveWeight { index, weight: g.weight });
        }
        prev = g.deadline;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn shortfall_examples() {
        let s = GoalSchedule::benchmark();
        assert_eq!(s.shortfall_penalty(1, 2.0).unwrap(), 1.0);
        assert_eq!(s.shortfall_penalty(2, 6.0).unwrap(), 0.0);
        assert_abs_diff_eq!(s.shortfall_penalty(2, 0.0).unwrap(), 1.2, epsilon = 1e-15);
        assert!(matches!(s.shortfall_penalty(3, 0.0), Err(Error::GoalIndexOutOfRange { .. })));
        assert!(s.shortfall_penalty(0, 0.0).is_err());
    }

    #[test]
    fn residual_examples() {
        let s = GoalSchedule::benchmark();
        assert_abs_diff_eq!(s.residual_weighted_targets(1).unwrap(), 4.2, epsilon = 1e-15);
        assert_abs_diff_eq!(s.residual_weighted_targets(2).unwrap(), 1.2, epsilon = 1e-15);
        let single = GoalSchedule::new(vec![Goal::new(1.0, 1.0, 1.0)]).unwrap();
        assert_eq!(single.residual_weighted_targets(1).unwrap(), 1.0);
        assert!(s.residual_weighted_targets(3).is_err());
    }

    #[test]
    fn validation_errors() {
        assert!(GoalSchedule::new(vec![Goal::new(1.0, 3.0, 1.0), Goal::new(2.0, 6.0, 0.2)]).is_ok());
        assert!(matches!(
            GoalSchedule::new(vec![Goal::new(2.0, 3.0, 1.0), Goal::new(1.0, 6.0, 0.2)]),
            Err(Error::NonIncreasingDeadlines { index: 2, .. })
        ));
        assert!(matches!(
            GoalSchedule::new(vec![Goal::new(1.0, 3.0, 0.0)]),
            Err(Error::NonPositiveWeight { index: 1, .. })
        ));
        assert!(matches!(
            GoalSchedule::new(vec![Goal::new(1.0, -1.0, 1.0)]),
            Err(Error::NonPositiveTarget { .. })
        ));
        assert!(matches!(GoalSchedule::new(vec![]), Err(Error::EmptySchedule)));
    }

    #[test]
    fn segment_lookup() {
        let s = GoalSchedule::benchmark();
        assert_eq!(s.segment_of(0.0), Some(1));
        assert_eq!(s.segment_of(1.0), Some(1));
        assert_eq!(s.segment_of(1.01), Some(2));
        assert_eq!(s.segment_of(2.0), Some(2));
        assert_eq!(s.segment_of(2.5), None);
        assert_eq!(s.segment_start(2).unwrap(), 1.0);
    }

    #[test]
    fn serde_round_trip_validates() {
        let s = GoalSchedule::benchmark();
        let json = serde_json::to_string(&s).unwrap();
        assert_eq!(json, r#"[{"t":1.0,"g":3.0,"w":1.0},{"t":2.0,"g":6.0,"w":0.2}]"#);
        let back: GoalSchedule = serde_json::from_str(&json).unwrap();
        assert_eq!(back, s);
        assert!(serde_json::from_str::<GoalSchedule>(r#"[{"t":1.0,"g":3.0,"w":0.0}]"#).is_err());
    }

    proptest! {
        #[test]
        fn shortfall_nonincreasing(g in 0.1f64..10.0, w in 0.1f64..5.0, a in 0.0f64..20.0, b in 0.0f64..20.0) {
            let s = GoalSchedule::new(vec![Goal::new(1.0, g, w)]).unwrap();
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(s.shortfall_penalty(1, hi).unwrap() <= s.shortfall_penalty(1, lo).unwrap());
            if hi >= g {
                prop_assert_eq!(s.shortfall_penalty(1, hi).unwrap(), 0.0);
            }
        }

        #[test]
        fn residual_telescopes(targets in proptest::collection::vec((0.1f64..10.0, 0.1f64..2.0), 1..5)) {
            let goals: Vec<Goal> = targets.iter().enumerate()
                .map(|(i, &(g, w))| Goal::new((i + 1) as f64, g, w)).collect();
            let s = GoalSchedule::new(goals).unwrap();
            let k_max = s.len();
            for k in 1..k_max {
                let lhs = s.residual_weighted_targets(k).unwrap();
                let rhs = s.shortfall_penalty(k, 0.0).unwrap() + s.residual_weighted_targets(k + 1).unwrap();
                prop_assert!((lhs - rhs).abs() <= 1e-12);
            }
            let last = s.goal(k_max).unwrap();
            prop_assert!((s.residual_weighted_targets(k_max).unwrap() - last.weight * last.target).abs() <= 1e-15);
        }
    }
}
