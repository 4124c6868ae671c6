//! One backward time step of the generator
//! `−V_t − r x0 V_x0 − μ x1 V_x1 − ½σ² x1² V_x1x1 = 0` on the triangle.
//!
//! Lie splitting: explicit upwind transport in `x0`, then an implicit
//! tridiagonal solve per fixed-`x0` row in `x1` (central diffusion, upwind
//! drift). The implicit stage optionally carries a penalty source
//! `ρ·(V − M)⁺` linearised on a frozen active set.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::market::MarketParams;

/// Boundary data for the triangle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Boundary {
    /// `V = 0` on the hypotenuse and `V = corner` at the origin.
    Dirichlet { corner: f64 },
    /// Boundary nodes carry the transported data unchanged.
    Free,
}

/// Frozen penalty term for one implicit solve.
pub struct Penalty<'a> {
    pub rho: f64,
    /// Intervention values `ℳ[V]` (lagged).
    pub target: &'a [f64],
    /// Nodes where the penalty is switched on.
    pub active: &'a [bool],
}

#[derive(Debug, Clone)]
pub struct PdeOperator {
    pub market: MarketParams,
    pub grid: GridSpec,
    pub dt: f64,
}

impl PdeOperator {
    pub fn new(market: MarketParams, grid: GridSpec, dt: f64) -> Result<Self> {
        let op = Self { market, grid, dt };
        op.check_cfl()?;
        Ok(op)
    }

    /// Stability limit of the explicit `x0` transport.
    pub fn cfl_limit(&self) -> f64 {
        if self.market.r == 0.0 {
            f64::INFINITY
        } else {
            self.grid.dx / (self.market.r.abs() * self.grid.w_max)
        }
    }

    fn check_cfl(&self) -> Result<()> {
        let limit = self.cfl_limit();
        if self.dt > limit {
            return Err(Error::CflViolation { dt: self.dt, limit });
        }
        Ok(())
    }

    /// Explicit upwind step for `r x0 V_x0`. Identity when `r = 0`.
    pub fn transport_x0(&self, next: &[f64]) -> Vec<f64> {
        let r = self.market.r;
        if r == 0.0 {
            return next.to_vec();
        }
        let g = &self.grid;
        let mut out = next.to_vec();
        for (idx, i, j) in g.nodes() {
            let courant = self.dt * r * i as f64;
            if r > 0.0 {
                if i + j < g.n {
                    out[idx] = next[idx] + courant * (next[g.index(i + 1, j)] - next[idx]);
                }
            } else if i > 0 {
                out[idx] = next[idx] - courant * (next[idx] - next[g.index(i - 1, j)]);
            }
        }
        out
    }

    /// Implicit `x1` solve of every row.
    pub fn implicit_x1(&self, rhs: &[f64], boundary: Boundary, penalty: Option<&Penalty<'_>>) -> Vec<f64> {
        let g = &self.grid;
        let rows: Vec<Vec<f64>> = (0..=g.n)
            .into_par_iter()
            .map(|i| self.solve_row(i, rhs, boundary, penalty))
            .collect();
        rows.concat()
    }

    fn solve_row(&self, i: usize, rhs: &[f64], boundary: Boundary, penalty: Option<&Penalty<'_>>) -> Vec<f64> {
        let g = &self.grid;
        let len = g.row_len(i);
        let off = g.row_offset(i);
        let half_s2 = 0.5 * self.market.sigma * self.market.sigma;
        let mu = self.market.mu;
        let dt = self.dt;

        let mut lower = vec![0.0; len];
        let mut diag = vec![1.0; len];
        let mut upper = vec![0.0; len];
        let mut b = rhs[off..off + len].to_vec();

        for j in 0..len {
            let idx = off + j;
            let on_hyp = j == len - 1;
            let at_corner = i == 0 && j == 0;
            if let Boundary::Dirichlet { corner } = boundary {
                if on_hyp {
                    b[j] = 0.0;
                    continue;
                }
                if at_corner {
                    b[j] = corner;
                    continue;
                }
            } else if on_hyp {
                continue;
            }
            let jf = j as f64;
            let diff = half_s2 * jf * jf;
            let up = diff + mu.max(0.0) * jf;
            let down = diff + (-mu).max(0.0) * jf;
            lower[j] = -dt * down;
            upper[j] = -dt * up;
            diag[j] = 1.0 + dt * (up + down);
            if let Some(p) = penalty {
                if p.active[idx] {
                    diag[j] += p.rho;
                    b[j] += p.rho * p.target[idx];
                }
            }
        }
        thomas(&lower, &mut diag, &upper, &mut b);
        b
    }

    /// Value of holding at each node for one step, given `values` at the
    /// neighbouring nodes: the row equation solved for the centre node only.
    pub fn hold_values(&self, rhs: &[f64], values: &[f64], boundary: Boundary) -> Vec<f64> {
        let g = &self.grid;
        let half_s2 = 0.5 * self.market.sigma * self.market.sigma;
        let mu = self.market.mu;
        g.nodes()
            .map(|(idx, i, j)| {
                let on_hyp = i + j == g.n;
                match boundary {
                    Boundary::Dirichlet { .. } if on_hyp || (i == 0 && j == 0) => return values[idx],
                    Boundary::Free if on_hyp => return rhs[idx],
                    _ => {}
                }
                let jf = j as f64;
                let diff = half_s2 * jf * jf;
                let up = diff + mu.max(0.0) * jf;
                let down = diff + (-mu).max(0.0) * jf;
                let mut acc = rhs[idx];
                if j > 0 {
                    acc += self.dt * down * values[idx - 1];
                }
                acc += self.dt * up * values[idx + 1];
                acc / (1.0 + self.dt * (up + down))
            })
            .collect()
    }

    /// Unpenalised step: transport, then implicit diffusion.
    pub fn step(&self, next: &[f64], boundary: Boundary) -> Vec<f64> {
        let transported = self.transport_x0(next);
        self.implicit_x1(&transported, boundary, None)
    }
}

/// Thomas algorithm; `diag` is overwritten, the solution is left in `rhs`.
/// The matrices assembled above are strictly diagonally dominant M-matrices.
fn thomas(lower: &[f64], diag: &mut [f64], upper: &[f64], rhs: &mut [f64]) {
    let n = rhs.len();
    for k in 1..n {
        let m = lower[k] / diag[k - 1];
        diag[k] -= m * upper[k - 1];
        rhs[k] -= m * rhs[k - 1];
    }
    rhs[n - 1] /= diag[n - 1];
    for k in (0..n - 1).rev() {
        rhs[k] = (rhs[k] - upper[k] * rhs[k + 1]) / diag[k];
    }
}
