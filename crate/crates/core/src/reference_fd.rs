//! Implicit finite-difference solver for a single stock, used as a
//! noise-free cross-check of the Monte Carlo scheme.

use std::sync::Arc;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::exec::Parallelism;
use crate::grid::{EdgeRule, GridSpec, ValueField};
use crate::market::{dual_utility_unchecked, MarketParams};
use crate::mc::{SchemeParams, StepDiagnostics};
use crate::solver::{self, SolveOptions, SolveResult};

/// Tridiagonal system `sub[i] x[i-1] + main[i] x[i] + sup[i] x[i+1] = rhs[i]`.
/// `sub[0]` and `sup[n-1]` are ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct Tridiag {
    pub sub: Vec<f64>,
    pub main: Vec<f64>,
    pub sup: Vec<f64>,
}

impl Tridiag {
    pub fn new(sub: Vec<f64>, main: Vec<f64>, sup: Vec<f64>) -> Result<Self> {
        if sub.len() != main.len() || sup.len() != main.len() {
            return Err(Error::Mismatch(format!(
                "tridiagonal bands of lengths {}, {}, {}",
                sub.len(),
                main.len(),
                sup.len()
            )));
        }
        Ok(Self { sub, main, sup })
    }

    pub fn len(&self) -> usize {
        self.main.len()
    }

    pub fn is_empty(&self) -> bool {
        self.main.is_empty()
    }

    /// Row-wise weak diagonal dominance.
    pub fn is_diagonally_dominant(&self) -> bool {
        let n = self.len();
        (0..n).all(|i| {
            let off = if i > 0 { self.sub[i].abs() } else { 0.0 }
                + if i + 1 < n { self.sup[i].abs() } else { 0.0 };
            self.main[i].abs() >= off
        })
    }

    /// Thomas algorithm.
    pub fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        let n = self.len();
        if rhs.len() != n {
            return Err(Error::Mismatch(format!(
                "right-hand side has length {}, system has {n}",
                rhs.len()
            )));
        }
        let mut c = vec![0.0; n];
        let mut d = vec![0.0; n];
        for i in 0..n {
            let (a, prev_c, prev_d) = if i > 0 {
                (self.sub[i], c[i - 1], d[i - 1])
            } else {
                (0.0, 0.0, 0.0)
            };
            let pivot = self.main[i] - a * prev_c;
            if pivot == 0.0 || !pivot.is_finite() {
                return Err(Error::LinearSolve(format!("zero pivot in row {i}")));
            }
            c[i] = if i + 1 < n { self.sup[i] / pivot } else { 0.0 };
            d[i] = (rhs[i] - a * prev_d) / pivot;
        }
        let mut x = d;
        for i in (0..n.saturating_sub(1)).rev() {
            x[i] -= c[i] * x[i + 1];
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::LinearSolve("non-finite solution".into()));
        }
        Ok(x)
    }

    /// `A x`, mainly for checking solutions.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let n = self.len();
        (0..n)
            .map(|i| {
                let mut v = self.main[i] * x[i];
                if i > 0 {
                    v += self.sub[i] * x[i - 1];
                }
                if i + 1 < n {
                    v += self.sup[i] * x[i + 1];
                }
                v
            })
            .collect()
    }
}

/// Options of the finite-difference step.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct FdOptions {
    /// One-sided drift differences against the flow instead of centered.
    pub upwind: bool,
}

/// Where a neighbor of an active node is read from.
enum Neighbor {
    Unknown,
    /// Phantom with a known value.
    Fixed(f64),
    /// Phantom replicating the centre node.
    Centre,
}

/// One implicit step: drift, diffusion and discounting at `t_k`, the
/// consumption term from the next slice.
pub fn fd_step(
    next: &ValueField,
    k: usize,
    sp: &SchemeParams,
    p: &MarketParams,
    opts: FdOptions,
) -> Result<(ValueField, StepDiagnostics)> {
    let start = Instant::now();
    let grid = Arc::clone(&next.grid);
    if grid.n_dim() != 1 {
        return Err(Error::Mismatch(
            "the finite-difference solver handles one stock only".into(),
        ));
    }
    let time = k as f64 * sp.h;
    let h = sp.h;
    let dy = grid.dy[0];
    let g = p.gamma();
    let active: Vec<usize> = (0..grid.n_nodes()).filter(|&j| grid.is_active(j)).collect();
    let neighbor = |j: isize| -> Neighbor {
        let inside = j >= 0 && (j as usize) < grid.n_nodes();
        if inside && grid.is_active(j as usize) {
            return Neighbor::Unknown;
        }
        match grid.edge {
            EdgeRule::Extension => Neighbor::Fixed(grid.extension),
            EdgeRule::Replicate => Neighbor::Centre,
        }
    };

    let m = active.len();
    let mut sub = vec![0.0; m];
    let mut main = vec![0.0; m];
    let mut sup = vec![0.0; m];
    let mut rhs = vec![0.0; m];
    let mut clamp_count = 0;
    for (r, &j) in active.iter().enumerate() {
        let y = grid.axis_coord(0, j);
        let eta = p.coeff_eta(&[y])[0];
        let b = p.coeff_b(&[y])[0];
        let theta = p.coeff_vartheta(&[y]);
        // Coefficients of φ_{j-1}, φ_j, φ_{j+1} in the generator.
        let diff = 0.5 * eta / (dy * dy);
        let (lo_drift, mid_drift, hi_drift) = if opts.upwind {
            if b >= 0.0 {
                (0.0, -b / dy, b / dy)
            } else {
                (-b / dy, b / dy, 0.0)
            }
        } else {
            (-0.5 * b / dy, 0.0, 0.5 * b / dy)
        };
        let lo = diff + lo_drift;
        let hi = diff + hi_drift;
        let mut centre = 1.0 + h * (2.0 * diff - mid_drift + theta);

        let psi = next.values[j];
        let bracket = g * psi - y * next.grad_at(j)[0];
        let clamped = !(bracket > sp.clamp_eps);
        clamp_count += clamped as usize;
        let cons = dual_utility_unchecked(g, if clamped { sp.clamp_eps } else { bracket });
        let mut b_r = psi + h * cons;

        for (coef, nb, slot) in [
            (lo, neighbor(j as isize - 1), &mut sub[r]),
            (hi, neighbor(j as isize + 1), &mut sup[r]),
        ] {
            match nb {
                Neighbor::Unknown => *slot = -h * coef,
                Neighbor::Fixed(v) => b_r += h * coef * v,
                Neighbor::Centre => centre -= h * coef,
            }
        }
        main[r] = centre;
        rhs[r] = b_r;
    }
    let system = Tridiag::new(sub, main, sup)?;
    if !system.is_diagonally_dominant() {
        log::warn!("implicit system at t={time} is not diagonally dominant");
    }
    let sol = system.solve(&rhs)?;
    let mut values = vec![grid.extension; grid.n_nodes()];
    for (r, &j) in active.iter().enumerate() {
        values[j] = sol[r];
    }
    let field = ValueField::new(grid, time, values, Parallelism::Sequential);
    let (min_value, max_value) = field.value_range();
    Ok((
        field,
        StepDiagnostics {
            time,
            clamp_count,
            monotonicity_ratio: 0.0,
            min_value,
            max_value,
            wall_seconds: start.elapsed().as_secs_f64(),
        },
    ))
}

/// Runs the finite-difference scheme backward from the terminal slice,
/// projecting every slice exactly as the Monte Carlo solver does. The
/// sample count and seed of `sp` are ignored.
pub fn solve_fd_1d(
    p: &MarketParams,
    sp: &SchemeParams,
    grid: Arc<GridSpec>,
    opts: &SolveOptions,
    fd: FdOptions,
) -> Result<SolveResult> {
    if p.n_assets() != 1 || grid.n_dim() != 1 {
        return Err(Error::Mismatch(
            "the finite-difference solver handles one stock only".into(),
        ));
    }
    let opts = SolveOptions {
        par: Parallelism::Sequential,
        ..opts.clone()
    };
    solver::backward_loop(p, sp, grid, &opts, |next, k| fd_step(next, k, sp, p, fd))
}

/// Agreement of two solutions at one retained time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SliceComparison {
    pub time: f64,
    /// Max over active nodes of `|a - b| / (1 + |a|)`.
    pub max_rel_diff: f64,
    /// One stock: largest buy/sell boundary offset. Several stocks: largest
    /// distance (max-norm) from a no-trade boundary node of either field to
    /// the nearest one of the other. In cells; infinite if only one side has
    /// boundary nodes.
    pub boundary_offset_cells: f64,
}

/// Slice-by-slice comparison of two results on the same grid and times.
pub fn compare_fields(a: &SolveResult, b: &SolveResult) -> Result<Vec<SliceComparison>> {
    if !a.grid.same_nodes(&b.grid) {
        return Err(Error::Mismatch("results live on different grids".into()));
    }
    if a.slices.len() != b.slices.len() {
        return Err(Error::Mismatch(format!(
            "{} versus {} retained slices",
            a.slices.len(),
            b.slices.len()
        )));
    }
    let g = &a.grid;
    let tol = 1e-9 * a.horizon.max(1.0);
    a.slices
        .iter()
        .zip(&b.slices)
        .map(|(sa, sb)| {
            if (sa.time() - sb.time()).abs() > tol {
                return Err(Error::Mismatch(format!(
                    "retained times {} and {} differ",
                    sa.time(),
                    sb.time()
                )));
            }
            let max_rel_diff = (0..g.n_nodes())
                .filter(|&k| g.is_active(k))
                .map(|k| {
                    let va = sa.field.values[k];
                    (va - sb.field.values[k]).abs() / (1.0 + va.abs())
                })
                .fold(0.0, f64::max);
            let boundary_offset_cells = if g.n_dim() == 1 {
                let ba = solver::extract_boundaries(&sa.labels, sa.time())?;
                let bb = solver::extract_boundaries(&sb.labels, sb.time())?;
                ((ba.buy - bb.buy).abs().max((ba.sell - bb.sell).abs())) / g.dy[0]
            } else {
                boundary_distance(
                    g,
                    &solver::no_trade_boundary_nodes(&sa.labels),
                    &solver::no_trade_boundary_nodes(&sb.labels),
                )
            };
            Ok(SliceComparison {
                time: sa.time(),
                max_rel_diff,
                boundary_offset_cells,
            })
        })
        .collect()
}

/// Symmetric Hausdorff distance between node sets in max-norm cells.
fn boundary_distance(g: &GridSpec, a: &[usize], b: &[usize]) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 0.0;
    }
    if a.is_empty() || b.is_empty() {
        return f64::INFINITY;
    }
    let cells = |k: usize| g.multi_index(k);
    let (ma, mb): (Vec<_>, Vec<_>) = (
        a.iter().map(|&k| cells(k)).collect(),
        b.iter().map(|&k| cells(k)).collect(),
    );
    let one_way = |from: &[Vec<usize>], to: &[Vec<usize>]| {
        from.iter()
            .map(|p| {
                to.iter()
                    .map(|q| {
                        p.iter()
                            .zip(q)
                            .map(|(x, y)| x.abs_diff(*y))
                            .max()
                            .unwrap_or(0)
                    })
                    .min()
                    .unwrap_or(0)
            })
            .max()
            .unwrap_or(0)
    };
    one_way(&ma, &mb).max(one_way(&mb, &ma)) as f64
}
