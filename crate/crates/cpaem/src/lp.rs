//! A small dense linear-programming solver.
//!
//! Solves `maximize c·x subject to A x ≤ b` with `x` free, via the two-phase
//! primal simplex method on a dense tableau with Bland's anti-cycling rule.
//! The geometry module uses it for Chebyshev-center interior points and for
//! facet-redundancy tests; those problems have a handful of variables
//! (latent dimension ≤ 3, plus one margin variable) and at most a few hundred
//! rows, where a dense tableau is the simplest reliable choice.
//!
//! Free variables are split as `x = u − w` with `u, w ≥ 0`; rows get slack
//! variables, and rows whose right-hand side is negative after normalization
//! get phase-1 artificial variables. Bland's rule (always pick the
//! lowest-index eligible entering column, break ratio-test ties by the
//! lowest-index basic variable) guarantees termination.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Outcome of an LP solve.
#[derive(Debug, Clone)]
pub enum LpResult {
    /// A finite optimum was found.
    Optimal {
        /// Optimal point.
        x: DVector<f64>,
        /// Optimal objective value `c·x`.
        value: f64,
    },
    /// The constraint system `A x ≤ b` has no solution.
    Infeasible,
    /// The objective is unbounded above on the feasible set.
    Unbounded,
}

const PIVOT_TOL: f64 = 1e-9;
const COST_TOL: f64 = 1e-9;
const MAX_ITERS: usize = 50_000;

/// Maximize `c·x` subject to `A x ≤ b`, `x` free.
///
/// Errors only on internal breakdown (iteration cap, which Bland's rule
/// makes unreachable short of severe numerical trouble).
pub fn solve_max(c: &DVector<f64>, a: &DMatrix<f64>, b: &DVector<f64>) -> Result<LpResult> {
    let m = a.nrows();
    let n = a.ncols();
    assert_eq!(c.len(), n, "objective length mismatch");
    assert_eq!(b.len(), m, "rhs length mismatch");

    if m == 0 {
        // No constraints: optimum is 0 at the origin unless the objective is
        // nonzero in some coordinate, in which case it is unbounded.
        return Ok(if c.iter().all(|&ci| ci == 0.0) {
            LpResult::Optimal { x: DVector::zeros(n), value: 0.0 }
        } else {
            LpResult::Unbounded
        });
    }

    // Column layout: [u (n) | w (n) | slacks (m) | artificials (k)].
    let n_uw = 2 * n;
    let mut art_cols = Vec::new();
    let mut tab = DMatrix::zeros(m, n_uw + m);
    let mut rhs = DVector::zeros(m);
    for i in 0..m {
        let flip = if b[i] < 0.0 { -1.0 } else { 1.0 };
        for j in 0..n {
            tab[(i, j)] = flip * a[(i, j)];
            tab[(i, n + j)] = -flip * a[(i, j)];
        }
        tab[(i, n_uw + i)] = flip; // slack
        rhs[i] = flip * b[i];
        if flip < 0.0 {
            art_cols.push(i);
        }
    }
    // Append artificial columns for flipped rows.
    let n_art = art_cols.len();
    let n_total = n_uw + m + n_art;
    let mut full = DMatrix::zeros(m, n_total);
    full.view_mut((0, 0), (m, n_uw + m)).copy_from(&tab);
    let mut basis = vec![0usize; m];
    let mut next_art = 0;
    for i in 0..m {
        if b[i] < 0.0 {
            full[(i, n_uw + m + next_art)] = 1.0;
            basis[i] = n_uw + m + next_art;
            next_art += 1;
        } else {
            basis[i] = n_uw + i;
        }
    }

    let art_start = n_uw + m;

    // Phase 1: minimize the sum of artificials.
    if n_art > 0 {
        let mut cost = DVector::zeros(n_total);
        for j in art_start..n_total {
            cost[j] = 1.0;
        }
        let feasible_value =
            run_simplex(&mut full, &mut rhs, &mut basis, &cost, n_total, /*allow:*/ n_total)?;
        let phase1 = match feasible_value {
            SimplexOutcome::Optimal(v) => v,
            SimplexOutcome::Unbounded => {
                // Phase-1 objective is bounded below by 0 by construction.
                return Err(Error::Numerical("phase-1 simplex reported unbounded".into()));
            }
        };
        if phase1 > 1e-7 {
            return Ok(LpResult::Infeasible);
        }
        // Drive any leftover artificials out of the basis.
        for i in 0..m {
            if basis[i] >= art_start {
                let col = (0..art_start).find(|&j| full[(i, j)].abs() > PIVOT_TOL);
                match col {
                    Some(j) => pivot(&mut full, &mut rhs, &mut basis, i, j),
                    None => {
                        // Redundant row: every structural coefficient is ~0.
                        // Zero it so it can never constrain phase 2.
                        for j in 0..n_total {
                            full[(i, j)] = 0.0;
                        }
                        rhs[i] = 0.0;
                    }
                }
            }
        }
    }

    // Phase 2: minimize −c·(u − w); artificial columns are barred.
    let mut cost = DVector::zeros(n_total);
    for j in 0..n {
        cost[j] = -c[j];
        cost[n + j] = c[j];
    }
    let outcome = run_simplex(&mut full, &mut rhs, &mut basis, &cost, art_start, n_total)?;
    match outcome {
        SimplexOutcome::Unbounded => Ok(LpResult::Unbounded),
        SimplexOutcome::Optimal(_) => {
            let mut x = DVector::zeros(n);
            for (i, &bj) in basis.iter().enumerate() {
                if bj < n {
                    x[bj] += rhs[i];
                } else if bj < 2 * n {
                    x[bj - n] -= rhs[i];
                }
            }
            let value = c.dot(&x);
            Ok(LpResult::Optimal { x, value })
        }
    }
}

enum SimplexOutcome {
    Optimal(f64),
    Unbounded,
}

/// Run the simplex loop, minimizing `cost·y`. Columns `≥ col_limit` may not
/// enter the basis (used to bar artificials in phase 2). Returns the
/// minimized objective. The tableau is kept canonical w.r.t. `basis`.
fn run_simplex(
    tab: &mut DMatrix<f64>,
    rhs: &mut DVector<f64>,
    basis: &mut [usize],
    cost: &DVector<f64>,
    col_limit: usize,
    n_total: usize,
) -> Result<SimplexOutcome> {
    let m = tab.nrows();
    debug_assert_eq!(n_total, tab.ncols());
    for _ in 0..MAX_ITERS {
        // Reduced costs r_j = c_j − Σ_i c_{basis_i} T_{ij}.
        // Bland: enter the lowest-index column with r_j < −tol.
        let mut entering = None;
        for j in 0..col_limit {
            let mut r = cost[j];
            for i in 0..m {
                let cb = cost[basis[i]];
                if cb != 0.0 {
                    r -= cb * tab[(i, j)];
                }
            }
            if r < -COST_TOL {
                entering = Some(j);
                break;
            }
        }
        let Some(j) = entering else {
            let mut value = 0.0;
            for i in 0..m {
                value += cost[basis[i]] * rhs[i];
            }
            return Ok(SimplexOutcome::Optimal(value));
        };

        // Ratio test with Bland tie-breaking on the basic variable index.
        let mut leave: Option<(usize, f64)> = None;
        for i in 0..m {
            let t = tab[(i, j)];
            if t > PIVOT_TOL {
                let ratio = rhs[i] / t;
                match leave {
                    None => leave = Some((i, ratio)),
                    Some((li, lr)) => {
                        if ratio < lr - 1e-12
                            || (ratio < lr + 1e-12 && basis[i] < basis[li])
                        {
                            leave = Some((i, ratio));
                        }
                    }
                }
            }
        }
        let Some((i, _)) = leave else {
            return Ok(SimplexOutcome::Unbounded);
        };
        pivot(tab, rhs, basis, i, j);
    }
    Err(Error::Numerical("simplex iteration cap exceeded".into()))
}

/// Pivot the tableau on `(row, col)`: scale the row and eliminate the column
/// from all other rows, making `col` basic in `row`.
fn pivot(tab: &mut DMatrix<f64>, rhs: &mut DVector<f64>, basis: &mut [usize], row: usize, col: usize) {
    let m = tab.nrows();
    let n = tab.ncols();
    let p = tab[(row, col)];
    for j in 0..n {
        tab[(row, j)] /= p;
    }
    rhs[row] /= p;
    for i in 0..m {
        if i != row {
            let f = tab[(i, col)];
            if f != 0.0 {
                for j in 0..n {
                    tab[(i, j)] -= f * tab[(row, j)];
                }
                rhs[i] -= f * rhs[row];
            }
        }
    }
    basis[row] = col;
}
