//! Triangular wealth grid, per-segment time ladders and value surfaces.
//!
//! Nodes are `(i, j)` with `i, j ≥ 0` and `i + j ≤ n`, located at
//! `(x0, x1) = (i·dx, j·dx)`. Storage is row-major in `i` (the bank index):
//! row `i` holds `j = 0..=n-i` contiguously, so every fixed-`x0` row is a
//! contiguous slice.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::goals::GoalSchedule;
use crate::market::PortfolioState;

/// States further than this outside the triangle are rejected by
/// [`interpolate`]; closer ones are clipped.
pub const DOMAIN_TOL: f64 = 1e-9;

const SNAP_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub w_max: f64,
    pub n: usize,
    pub dx: f64,
}

impl GridSpec {
    pub fn new(w_max: f64, n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidParameter { name: "n", reason: format!("need n >= 2, got {n}") });
        }
        if !(w_max.is_finite() && w_max > 0.0) {
            return Err(Error::InvalidParameter {
                name: "w_max",
                reason: format!("must be positive, got {w_max}"),
            });
        }
        Ok(Self { w_max, n, dx: w_max / n as f64 })
    }

    pub fn node_count(&self) -> usize {
        (self.n + 1) * (self.n + 2) / 2
    }

    /// Index of the first node of row `i`.
    pub fn row_offset(&self, i: usize) -> usize {
        i * (self.n + 1) - i * i.saturating_sub(1) / 2
    }

    pub fn row_len(&self, i: usize) -> usize {
        self.n - i + 1
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        debug_assert!(i + j <= self.n);
        self.row_offset(i) + j
    }

    /// Iterator over `(index, i, j)` in storage order.
    pub fn nodes(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        (0..=self.n)
            .flat_map(move |i| (0..=self.n - i).map(move |j| (i, j)))
            .enumerate()
            .map(|(idx, (i, j))| (idx, i, j))
    }

    /// `(i, j)` of every node in storage order.
    pub fn node_coords(&self) -> Vec<(usize, usize)> {
        self.nodes().map(|(_, i, j)| (i, j)).collect()
    }

    pub fn coord(&self, k: usize) -> f64 {
        k as f64 * self.dx
    }

    pub fn state(&self, i: usize, j: usize) -> PortfolioState {
        PortfolioState::new(self.coord(i), self.coord(j))
    }

    pub fn contains(&self, x: PortfolioState) -> bool {
        x.x0 >= -DOMAIN_TOL && x.x1 >= -DOMAIN_TOL && x.x0 + x.x1 <= self.w_max + DOMAIN_TOL
    }

    /// Node closest to `x`, projected into the triangle.
    pub fn nearest_node(&self, x: PortfolioState) -> (usize, usize) {
        let n = self.n as f64;
        let mut a = (x.x0 / self.dx).round().clamp(0.0, n);
        let mut b = (x.x1 / self.dx).round().clamp(0.0, n);
        while a + b > n {
            if a >= b {
                a -= 1.0;
            } else {
                b -= 1.0;
            }
        }
        (a as usize, b as usize)
    }
}

/// Builds the triangular grid on `{x0 + x1 ≤ w_max}` with `n` steps per axis.
pub fn build_grid(w_max: f64, n: usize) -> Result<GridSpec> {
    GridSpec::new(w_max, n)
}

fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < SNAP_TOL {
        r
    } else {
        v
    }
}

/// Evaluates a node-value slice at a continuous state.
///
/// Bilinear on interior unit cells; on cells cut by the hypotenuse the
/// upper-right corner is missing and the three remaining corners are used
/// barycentrically. Exact at nodes and for affine data.
pub fn interpolate(slice: &[f64], x: PortfolioState, spec: &GridSpec) -> Result<f64> {
    if !spec.contains(x) {
        return Err(Error::OutOfDomain { x0: x.x0, x1: x.x1 });
    }
    Ok(interpolate_clipped(slice, x, spec))
}

/// [`interpolate`] without the domain check; states are clipped into the triangle.
pub(crate) fn interpolate_clipped(slice: &[f64], x: PortfolioState, spec: &GridSpec) -> f64 {
    debug_assert_eq!(slice.len(), spec.node_count());
    let n = spec.n as f64;
    let mut a = snap((x.x0 / spec.dx).max(0.0));
    let mut b = snap((x.x1 / spec.dx).max(0.0));
    if a + b > n {
        let excess = a + b - n;
        if a >= excess {
            a -= excess;
        } else {
            b -= excess - a;
            a = 0.0;
        }
    }
    let mut i0 = (a.floor() as usize).min(spec.n);
    let mut j0 = (b.floor() as usize).min(spec.n);
    if i0 + j0 >= spec.n {
        // on the hypotenuse: move to the cell below/left of the point
        if i0 + j0 == spec.n && a == i0 as f64 && b == j0 as f64 {
            return slice[spec.index(i0, j0)];
        }
        while i0 + j0 >= spec.n {
            if i0 > 0 {
                i0 -= 1;
            } else {
                j0 -= 1;
            }
        }
    }
    let fx = (a - i0 as f64).clamp(0.0, 1.0);
    let fy = (b - j0 as f64).clamp(0.0, 1.0);
    let v00 = slice[spec.index(i0, j0)];
    if fx == 0.0 && fy == 0.0 {
        return v00;
    }
    let v10 = slice[spec.index(i0 + 1, j0)];
    let v01 = slice[spec.index(i0, j0 + 1)];
    if i0 + j0 + 2 <= spec.n {
        let v11 = slice[spec.index(i0 + 1, j0 + 1)];
        if fy == 0.0 {
            return v00 + fx * (v10 - v00);
        }
        if fx == 0.0 {
            return v00 + fy * (v01 - v00);
        }
        v00 + fx * (v10 - v00) + fy * (v01 - v00) + fx * fy * (v11 - v10 - v01 + v00)
    } else {
        let (fx, fy) = if fx + fy > 1.0 {
            let s = fx + fy;
            (fx / s, fy / s)
        } else {
            (fx, fy)
        };
        v00 + fx * (v10 - v00) + fy * (v01 - v00)
    }
}

/// One goal segment `[start, end]` split into `steps` uniform steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub k: usize,
    pub start: f64,
    pub end: f64,
    pub steps: usize,
}

impl Segment {
    pub fn dt(&self) -> f64 {
        (self.end - self.start) / self.steps as f64
    }

    /// Time of level `idx` (0 = segment start, `steps` = deadline).
    pub fn time(&self, idx: usize) -> f64 {
        if idx == self.steps {
            self.end
        } else {
            self.start + idx as f64 * self.dt()
        }
    }

    /// Level whose time equals `t` within `tol`.
    pub fn level_of(&self, t: f64, tol: f64) -> Option<usize> {
        let pos = (t - self.start) / self.dt();
        let idx = pos.round();
        if idx < 0.0 || idx > self.steps as f64 {
            return None;
        }
        let idx = idx as usize;
        ((self.time(idx) - t).abs() <= tol).then_some(idx)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSegmentation {
    pub dt: f64,
    pub segments: Vec<Segment>,
}

impl TimeSegmentation {
    pub fn segment(&self, k: usize) -> &Segment {
        &self.segments[k - 1]
    }

    pub fn total_levels(&self) -> usize {
        self.segments.iter().map(|s| s.steps + 1).sum()
    }
}

/// Uniform time ladders whose boundaries coincide with the deadlines.
pub fn build_time_segmentation(s: &GoalSchedule, dt: f64) -> Result<TimeSegmentation> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::InvalidParameter { name: "dt", reason: format!("must be positive, got {dt}") });
    }
    let mut segments = Vec::with_capacity(s.len());
    for k in 1..=s.len() {
        let start = s.segment_start(k)?;
        let end = s.deadline(k)?;
        let ratio = (end - start) / dt;
        let steps = ratio.round();
        if steps < 1.0 || (steps * dt - (end - start)).abs() > 1e-9 {
            return Err(Error::MisalignedStep { dt, start, end });
        }
        segments.push(Segment { k, start, end, steps: steps as usize });
    }
    Ok(TimeSegmentation { dt, segments })
}

/// Node values of every goal segment at every time level.
///
/// `levels(k)[idx]` is the slice at `segment(k).time(idx)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueSurface {
    pub segments: Vec<Vec<Vec<f64>>>,
}

impl ValueSurface {
    pub fn levels(&self, k: usize) -> &[Vec<f64>] {
        &self.segments[k - 1]
    }

    pub fn slice(&self, k: usize, idx: usize) -> &[f64] {
        &self.segments[k - 1][idx]
    }
}

/// Writes `x0,x1,value` for every node in storage order.
pub fn write_slice_csv<W: Write>(mut w: W, spec: &GridSpec, slice: &[f64]) -> Result<()> {
    writeln!(w, "x0,x1,value")?;
    for (idx, i, j) in spec.nodes() {
        writeln!(w, "{},{},{:.16e}", spec.coord(i), spec.coord(j), slice[idx])?;
    }
    Ok(())
}
