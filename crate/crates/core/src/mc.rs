//! Monte Carlo half of the backward scheme.
//!
//! The diagonal part of the second-order operator drives a one-step Euler
//! sample of the fraction process; everything else (cross terms, discounting,
//! consumption) is evaluated from conditional expectations of the next slice
//! and its cached derivatives.

use std::sync::Arc;
use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::exec::{self, Parallelism};
use crate::grid::{ValueField, MAX_DIM};
use crate::market::MarketParams;
use crate::rng::node_stream;

/// Numerical parameters of the backward scheme.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeParams {
    /// Time step `h = T / n_steps`.
    pub h: f64,
    pub n_steps: usize,
    /// Monte Carlo sample count per node.
    pub m_paths: usize,
    pub seed: u64,
    /// Floor applied to the consumption bracket `γφ - Σ y_i ∂_i φ`.
    pub clamp_eps: f64,
    /// Relative tolerance on the gradient constraints.
    pub adjust_tol: f64,
    pub max_sweeps: usize,
    /// Pair every draw `z` with `-z`. Cancels the odd-order sampling error,
    /// which otherwise dominates the difference quotients of the slice where
    /// the constraints are nearly flat.
    pub antithetic: bool,
    /// Share one normal sequence across all nodes of a time step.
    pub common_random_numbers: bool,
}

impl SchemeParams {
    /// Scheme with `n_steps` equal steps over `horizon` and default tolerances.
    pub fn new(horizon: f64, n_steps: usize, m_paths: usize, seed: u64) -> Self {
        Self {
            h: if n_steps == 0 {
                0.0
            } else {
                horizon / n_steps as f64
            },
            n_steps,
            m_paths,
            seed,
            clamp_eps: 1e-12,
            adjust_tol: 1e-6,
            max_sweeps: 50,
            common_random_numbers: false,
            antithetic: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_steps > 0 && !(self.h > 0.0) {
            return Err(invalid("scheme.dt", "time step must be positive"));
        }
        if self.m_paths == 0 {
            return Err(invalid(
                "scheme.paths",
                "at least one sample path is required",
            ));
        }
        if !(self.clamp_eps > 0.0) {
            return Err(invalid("scheme.clamp_eps", "must be positive"));
        }
        if !(self.adjust_tol >= 0.0) {
            return Err(invalid("scheme.adjust_tol", "must be non-negative"));
        }
        if self.max_sweeps == 0 {
            return Err(invalid("scheme.max_sweeps", "must be at least one"));
        }
        Ok(())
    }
}

/// Sample means of the next slice and its derivative caches.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalEstimates {
    pub d0: f64,
    pub d1: Vec<f64>,
    /// Off-diagonal second derivatives, `i < j` in row order.
    pub d2_cross: Vec<f64>,
}

/// Coefficients frozen at a node for one step.
#[derive(Debug, Clone, Copy)]
struct NodeDynamics {
    drift_step: [f64; MAX_DIM],
    vol_step: [f64; MAX_DIM],
}

impl NodeDynamics {
    fn new(y: &[f64], h: f64, p: &MarketParams) -> Result<Self> {
        let n = y.len();
        let mut b = [0.0; MAX_DIM];
        let mut eta = [0.0; MAX_DIM * MAX_DIM];
        p.coeff_b_into(y, &mut b[..n]);
        p.coeff_eta_into(y, &mut eta[..n * n]);
        let mut out = Self {
            drift_step: [0.0; MAX_DIM],
            vol_step: [0.0; MAX_DIM],
        };
        for i in 0..n {
            let xi = eta[i * n + i];
            if xi < 0.0 {
                // η_ii is a quadratic form times y_i², analytically >= 0.
                if xi < -1e-14 {
                    return Err(Error::NegativeDiffusion {
                        axis: i,
                        value: xi,
                        point: y.to_vec(),
                    });
                }
            }
            out.drift_step[i] = b[i] * h;
            out.vol_step[i] = (xi.max(0.0) * h).sqrt();
        }
        Ok(out)
    }

    #[inline]
    fn advance(&self, y: &[f64], z: &[f64], out: &mut [f64]) {
        for i in 0..y.len() {
            out[i] = y[i] + self.drift_step[i] + self.vol_step[i] * z[i];
        }
    }
}

/// One-step Euler sample `y + b(y) h + sqrt(diag η(y)) z sqrt(h)`.
pub fn euler_step(y: &[f64], h: f64, p: &MarketParams, z: &[f64]) -> Result<Vec<f64>> {
    check_dim(y, p)?;
    let dynamics = NodeDynamics::new(y, h, p)?;
    let mut out = vec![0.0; y.len()];
    dynamics.advance(y, z, &mut out);
    Ok(out)
}

fn check_dim(y: &[f64], p: &MarketParams) -> Result<()> {
    if y.len() != p.n_assets() || y.len() > MAX_DIM {
        return Err(invalid(
            "y",
            format!("expected {} coordinates (at most {MAX_DIM})", p.n_assets()),
        ));
    }
    Ok(())
}

/// Estimates the conditional expectations with normals produced by `draw`.
pub fn estimate_with<F>(
    next: &ValueField,
    y: &[f64],
    h: f64,
    m_paths: usize,
    p: &MarketParams,
    mut draw: F,
) -> Result<ConditionalEstimates>
where
    F: FnMut(&mut [f64]),
{
    check_dim(y, p)?;
    let n = y.len();
    let np = n * (n - 1) / 2;
    let dynamics = NodeDynamics::new(y, h, p)?;
    let mut z = [0.0; MAX_DIM];
    let mut pt = [0.0; MAX_DIM];
    let mut d0 = 0.0;
    let mut d1 = [0.0; MAX_DIM];
    let mut d2 = [0.0; MAX_DIM];
    for _ in 0..m_paths {
        draw(&mut z[..n]);
        dynamics.advance(y, &z[..n], &mut pt[..n]);
        let s = next.sample_at(&pt[..n]);
        d0 += s.value;
        for i in 0..n {
            d1[i] += s.grad[i];
        }
        for k in 0..np {
            d2[k] += s.cross[k];
        }
    }
    let m = m_paths.max(1) as f64;
    Ok(ConditionalEstimates {
        d0: d0 / m,
        d1: d1[..n].iter().map(|v| v / m).collect(),
        d2_cross: d2[..np].iter().map(|v| v / m).collect(),
    })
}

/// Estimates the conditional expectations with standard normal draws from `rng`.
pub fn estimate_conditional<R: Rng + ?Sized>(
    next: &ValueField,
    y: &[f64],
    h: f64,
    m_paths: usize,
    p: &MarketParams,
    rng: &mut R,
) -> Result<ConditionalEstimates> {
    estimate_with(next, y, h, m_paths, p, |z| {
        for v in z.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
    })
}

/// Like [`estimate_conditional`], drawing `z` and `-z` in turn.
pub fn estimate_antithetic<R: Rng + ?Sized>(
    next: &ValueField,
    y: &[f64],
    h: f64,
    m_paths: usize,
    p: &MarketParams,
    rng: &mut R,
) -> Result<ConditionalEstimates> {
    let mut last = [0.0; MAX_DIM];
    let mut flip = false;
    estimate_with(next, y, h, m_paths, p, |z| {
        if flip {
            for (v, l) in z.iter_mut().zip(&last) {
                *v = -l;
            }
        } else {
            for (v, l) in z.iter_mut().zip(last.iter_mut()) {
                *v = rng.sample(StandardNormal);
                *l = *v;
            }
        }
        flip = !flip;
    })
}

/// Nonlinear remainder of the generator evaluated on the estimates.
/// Returns the value and whether the consumption bracket hit its floor.
pub fn nonlinear_f(
    y: &[f64],
    est: &ConditionalEstimates,
    p: &MarketParams,
    clamp_eps: f64,
) -> (f64, bool) {
    let n = y.len();
    let g = p.gamma();
    let mut cross = 0.0;
    if n > 1 {
        let mut eta = [0.0; MAX_DIM * MAX_DIM];
        p.coeff_eta_into(y, &mut eta[..n * n]);
        let mut k = 0;
        for i in 0..n {
            for j in (i + 1)..n {
                // ½ Σ_{i≠j} counts each unordered pair twice.
                cross += eta[i * n + j] * est.d2_cross[k];
                k += 1;
            }
        }
    }
    let bracket = g * est.d0 - y.iter().zip(&est.d1).map(|(a, b)| a * b).sum::<f64>();
    let clamped = !(bracket > clamp_eps);
    let base = if clamped { clamp_eps } else { bracket };
    let consumption = crate::market::dual_utility_unchecked(g, base);
    (cross - p.coeff_vartheta(y) * est.d0 + consumption, clamped)
}

/// Per-slice diagnostics of the Monte Carlo step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepDiagnostics {
    pub time: f64,
    pub clamp_count: usize,
    /// Largest `Σ_{j≠i} |η_ij| / η_ii` over nodes with `η_ii > 0`.
    pub monotonicity_ratio: f64,
    pub min_value: f64,
    pub max_value: f64,
    pub wall_seconds: f64,
}

fn monotonicity_ratio(y: &[f64], p: &MarketParams) -> f64 {
    let n = y.len();
    if n < 2 {
        return 0.0;
    }
    let mut eta = [0.0; MAX_DIM * MAX_DIM];
    p.coeff_eta_into(y, &mut eta[..n * n]);
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let d = eta[i * n + i];
        if d > 1e-14 {
            let off: f64 = (0..n)
                .filter(|&j| j != i)
                .map(|j| eta[i * n + j].abs())
                .sum();
            worst = worst.max(off / d);
        }
    }
    worst
}

/// Computes the pre-adjustment slice at time index `k` from the completed
/// slice `next` at `k + 1`.
pub fn pde_step(
    next: &ValueField,
    k: usize,
    sp: &SchemeParams,
    p: &MarketParams,
    par: Parallelism,
) -> Result<(ValueField, StepDiagnostics)> {
    let start = Instant::now();
    let grid = Arc::clone(&next.grid);
    let n = grid.n_dim();
    let time = k as f64 * sp.h;
    let results = exec::map_indexed(par, grid.n_nodes(), |idx| -> Result<(f64, bool, f64)> {
        if !grid.is_active(idx) {
            return Ok((grid.extension, false, 0.0));
        }
        let mut y = [0.0; MAX_DIM];
        grid.coords_into(idx, &mut y);
        let y = &y[..n];
        let stream = if sp.common_random_numbers { 0 } else { idx };
        let mut rng = node_stream(sp.seed, k, stream);
        let est = if sp.antithetic {
            estimate_antithetic(next, y, sp.h, sp.m_paths, p, &mut rng)?
        } else {
            estimate_conditional(next, y, sp.h, sp.m_paths, p, &mut rng)?
        };
        let (f, clamped) = nonlinear_f(y, &est, p, sp.clamp_eps);
        Ok((est.d0 + sp.h * f, clamped, monotonicity_ratio(y, p)))
    });
    let mut values = Vec::with_capacity(results.len());
    let mut diag = StepDiagnostics {
        time,
        ..Default::default()
    };
    for (idx, r) in results.into_iter().enumerate() {
        let (v, clamped, ratio) = r?;
        if !v.is_finite() {
            return Err(Error::NonFinite {
                node: grid.coords(idx),
                time,
            });
        }
        diag.clamp_count += clamped as usize;
        diag.monotonicity_ratio = diag.monotonicity_ratio.max(ratio);
        values.push(v);
    }
    let field = ValueField::new(grid, time, values, par);
    let (lo, hi) = field.value_range();
    diag.min_value = lo;
    diag.max_value = hi;
    diag.wall_seconds = start.elapsed().as_secs_f64();
    Ok((field, diag))
}
