//! Backward time loop, boundary extraction and property checks.

use std::sync::Arc;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::exec::Parallelism;
use crate::grid::{GridSpec, ValueField, MAX_DIM};
use crate::market::MarketParams;
use crate::mc::{self, SchemeParams, StepDiagnostics};
use crate::obstacle::{self, AssetLabel, RegionLabels, SweepStats};

/// Run-time options that do not change the numerical method.
#[derive(Debug, Clone)]
pub struct SolveOptions {
    pub par: Parallelism,
    /// Extra times whose slices are kept (snapped to the nearest step).
    pub retain_times: Vec<f64>,
    /// Keep every k-th slice; `None` keeps about twenty.
    pub retain_every: Option<usize>,
    /// Skip the projection (debugging aid); labels are still computed.
    pub adjust: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            par: Parallelism::default(),
            retain_times: Vec::new(),
            retain_every: None,
            adjust: true,
        }
    }
}

/// A retained slice with its pre-projection labels.
#[derive(Debug, Clone)]
pub struct SliceRecord {
    pub step: usize,
    pub field: ValueField,
    pub labels: RegionLabels,
}

impl SliceRecord {
    pub fn time(&self) -> f64 {
        self.field.time
    }
}

/// Per-step diagnostics of the backward loop.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SliceDiagnostics {
    pub step: usize,
    pub time: f64,
    pub clamp_count: usize,
    pub monotonicity_ratio: f64,
    pub min_value: f64,
    pub max_value: f64,
    pub wall_seconds: f64,
    pub sweep: SweepStats,
}

/// Buy and sell boundaries of a single-stock slice.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryPoint {
    pub time: f64,
    pub buy: f64,
    pub sell: f64,
    /// No no-trade node at this slice.
    pub degenerate: bool,
}

/// Outcome of one property check. `margin` is the worst excess over the
/// allowed limit: non-positive when the property holds.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub property: String,
    pub pass: bool,
    pub margin: f64,
}

impl CheckResult {
    fn at_most(property: &str, margin: f64) -> Self {
        Self {
            property: property.to_string(),
            pass: margin <= 0.0,
            margin,
        }
    }

    fn below(property: &str, margin: f64) -> Self {
        Self {
            property: property.to_string(),
            pass: margin < 0.0,
            margin,
        }
    }
}

/// Boundaries of every step (one stock) or boundary nodes of retained
/// slices (several stocks), plus check results.
#[derive(Debug, Clone, Default)]
pub struct BoundaryReport {
    /// Ascending in time; empty for several stocks.
    pub one_d: Vec<BoundaryPoint>,
    /// `(time, nodes)` of no-trade nodes bordering a trade region.
    pub boundary_nodes: Vec<(f64, Vec<usize>)>,
    pub checks: Vec<CheckResult>,
}

#[derive(Debug, Clone)]
pub struct SolveResult {
    pub grid: Arc<GridSpec>,
    pub horizon: f64,
    pub h: f64,
    /// Ascending in time.
    pub slices: Vec<SliceRecord>,
    pub boundaries: BoundaryReport,
    /// Ascending in time.
    pub diagnostics: Vec<SliceDiagnostics>,
}

impl SolveResult {
    /// Retained slice closest to `t`.
    pub fn slice_near(&self, t: f64) -> Option<&SliceRecord> {
        self.slices.iter().min_by(|a, b| {
            (a.time() - t)
                .abs()
                .partial_cmp(&(b.time() - t).abs())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
    }

    pub fn initial(&self) -> Option<&SliceRecord> {
        self.slices.first()
    }
}

/// Steps kept in the result for `n` steps.
pub fn retained_steps(n: usize, h: f64, opts: &SolveOptions) -> Vec<usize> {
    let every = opts.retain_every.unwrap_or_else(|| n.div_ceil(20)).max(1);
    let mut keep: Vec<usize> = (0..=n).filter(|k| k % every == 0).collect();
    keep.push(n);
    for &t in &opts.retain_times {
        if h > 0.0 {
            keep.push(((t / h).round().max(0.0) as usize).min(n));
        }
    }
    keep.sort_unstable();
    keep.dedup();
    keep
}

fn project(
    f: ValueField,
    p: &MarketParams,
    sp: &SchemeParams,
    opts: &SolveOptions,
) -> Result<(ValueField, RegionLabels, SweepStats)> {
    if opts.adjust {
        let out = obstacle::sweep_adjust(f, p, sp.adjust_tol, sp.max_sweeps, opts.par)?;
        Ok((out.field, out.labels, out.stats))
    } else {
        let labels = obstacle::classify(&f, p, sp.adjust_tol, opts.par)?;
        let stats = SweepStats {
            worst_violation: obstacle::worst_relative_violation(&f, p, opts.par),
            ..Default::default()
        };
        Ok((f, labels, stats))
    }
}

/// Terminal slice shared by every solver.
pub fn terminal_slice(p: &MarketParams, grid: Arc<GridSpec>, par: Parallelism) -> ValueField {
    let ext = grid.extension;
    ValueField::from_fn(grid, p.horizon, par, |y| p.terminal_value(y).unwrap_or(ext))
}

/// Backward loop with a pluggable step: `step(next, k)` returns the
/// unprojected slice at `t_k` from the projected slice at `t_{k+1}`.
pub fn backward_loop<S>(
    p: &MarketParams,
    sp: &SchemeParams,
    grid: Arc<GridSpec>,
    opts: &SolveOptions,
    mut step: S,
) -> Result<SolveResult>
where
    S: FnMut(&ValueField, usize) -> Result<(ValueField, StepDiagnostics)>,
{
    p.validate()?;
    sp.validate()?;
    let n = sp.n_steps;
    let keep = retained_steps(n, sp.h, opts);
    let one_d = grid.n_dim() == 1;
    let mut slices = Vec::new();
    let mut diagnostics = Vec::new();
    let mut bounds = Vec::new();
    let mut warned_ratio = false;

    let start = Instant::now();
    let terminal = terminal_slice(p, Arc::clone(&grid), opts.par);
    let (lo, hi) = terminal.value_range();
    let mut terminal_diag = StepDiagnostics {
        time: p.horizon,
        min_value: lo,
        max_value: hi,
        ..Default::default()
    };
    let (mut current, labels, stats) = project(terminal, p, sp, opts)?;
    terminal_diag.wall_seconds = start.elapsed().as_secs_f64();

    let mut record = |k: usize,
                      field: &ValueField,
                      labels: RegionLabels,
                      d: StepDiagnostics,
                      stats: SweepStats| {
        if one_d {
            bounds.push(extract_1d(&labels, field.time));
        }
        if d.monotonicity_ratio > 1.0 && !warned_ratio {
            warned_ratio = true;
            log::warn!(
                "off-diagonal diffusion dominates the diagonal at t={} (ratio {:.3}); \
                 the scheme is not monotone there",
                d.time,
                d.monotonicity_ratio
            );
        }
        diagnostics.push(SliceDiagnostics {
            step: k,
            time: field.time,
            clamp_count: d.clamp_count,
            monotonicity_ratio: d.monotonicity_ratio,
            min_value: d.min_value,
            max_value: d.max_value,
            wall_seconds: d.wall_seconds,
            sweep: stats,
        });
        if keep.binary_search(&k).is_ok() {
            slices.push(SliceRecord {
                step: k,
                field: field.clone(),
                labels,
            });
        }
    };
    record(n, &current, labels, terminal_diag, stats);

    for k in (0..n).rev() {
        let (raw, mut d) = step(&current, k)?;
        let t0 = Instant::now();
        let (field, labels, stats) = project(raw, p, sp, opts)?;
        d.wall_seconds += t0.elapsed().as_secs_f64();
        log::debug!(
            "t={:.4} sweeps={} adjusted={} unresolved={}",
            field.time,
            stats.sweeps,
            stats.adjusted,
            stats.unresolved
        );
        record(k, &field, labels, d, stats);
        current = field;
    }

    slices.reverse();
    diagnostics.reverse();
    bounds.reverse();
    let boundary_nodes = if one_d {
        Vec::new()
    } else {
        slices
            .iter()
            .map(|s| (s.time(), no_trade_boundary_nodes(&s.labels)))
            .collect()
    };
    Ok(SolveResult {
        grid,
        horizon: p.horizon,
        h: sp.h,
        slices,
        boundaries: BoundaryReport {
            one_d: bounds,
            boundary_nodes,
            checks: Vec::new(),
        },
        diagnostics,
    })
}

/// Runs the Monte Carlo scheme backward from the terminal slice.
pub fn solve(
    p: &MarketParams,
    sp: &SchemeParams,
    grid: Arc<GridSpec>,
    opts: &SolveOptions,
) -> Result<SolveResult> {
    let par = opts.par;
    backward_loop(p, sp, grid, opts, |next, k| {
        mc::pde_step(next, k, sp, p, par)
    })
}

/// Buy boundary: last buy node plus half a cell, not below zero. Sell
/// boundary: first sell node minus half a cell, or the top of the box.
fn extract_1d(labels: &RegionLabels, time: f64) -> BoundaryPoint {
    let g = &labels.grid;
    let half = 0.5 * g.dy[0];
    let mut last_buy = f64::NEG_INFINITY;
    let mut first_sell = f64::INFINITY;
    let mut any_nt = false;
    for k in 0..g.n_nodes() {
        if !g.is_active(k) {
            continue;
        }
        let y = g.axis_coord(0, k);
        match labels.get(k, 0) {
            AssetLabel::Buy => last_buy = last_buy.max(y),
            AssetLabel::Sell => first_sell = first_sell.min(y),
            AssetLabel::NoTrade => any_nt = true,
        }
    }
    BoundaryPoint {
        time,
        buy: (last_buy + half).max(0.0),
        sell: if first_sell.is_finite() {
            first_sell - half
        } else {
            g.hi[0]
        },
        degenerate: !any_nt,
    }
}

/// Boundaries of a single-stock label field.
pub fn extract_boundaries(labels: &RegionLabels, time: f64) -> Result<BoundaryPoint> {
    if labels.grid.n_dim() != 1 {
        return Err(Error::Mismatch(
            "boundary curves need a single stock".into(),
        ));
    }
    Ok(extract_1d(labels, time))
}

/// No-trade nodes with a non-no-trade axis neighbour.
pub fn no_trade_boundary_nodes(labels: &RegionLabels) -> Vec<usize> {
    let g = &labels.grid;
    let n = g.n_dim();
    let mut m = [0usize; MAX_DIM];
    (0..g.n_nodes())
        .filter(|&k| labels.is_no_trade(k))
        .filter(|&k| {
            g.multi_index_into(k, &mut m);
            (0..n).any(|i| {
                let check = |mi: usize| {
                    let mut mm = m;
                    mm[i] = mi;
                    let j = g.linear(&mm[..n]);
                    g.is_active(j) && !labels.is_no_trade(j)
                };
                (m[i] > 0 && check(m[i] - 1)) || (m[i] + 1 < g.counts[i] && check(m[i] + 1))
            })
        })
        .collect()
}

/// Theoretical properties of the single-stock boundaries on `[0, T)`.
pub fn check_dai_yi(
    bounds: &[BoundaryPoint],
    p: &MarketParams,
    grid_tol: f64,
    time_tol: f64,
) -> Result<Vec<CheckResult>> {
    let d = p.dai_yi_bounds()?;
    let t_end = p.horizon;
    let pts: Vec<&BoundaryPoint> = bounds.iter().filter(|b| b.time < t_end - 1e-9).collect();
    let fold = |it: &mut dyn Iterator<Item = f64>| it.fold(f64::NEG_INFINITY, f64::max);

    let mut out = vec![
        CheckResult::below(
            "buy_below_sell",
            fold(&mut pts.iter().map(|b| b.buy - b.sell)),
        ),
        CheckResult::at_most(
            "sell_above_lower_bound",
            fold(&mut pts.iter().map(|b| d.sell_lower - grid_tol - b.sell)),
        ),
    ];
    let ind = d.leverage_indicator;
    out.push(if ind.abs() <= 1e-10 {
        CheckResult::at_most(
            "sell_equals_one",
            fold(&mut pts.iter().map(|b| (b.sell - 1.0).abs() - grid_tol)),
        )
    } else if ind > 0.0 {
        CheckResult::below(
            "sell_above_one",
            fold(&mut pts.iter().map(|b| 1.0 - b.sell)),
        )
    } else {
        CheckResult::below(
            "sell_below_one",
            fold(&mut pts.iter().map(|b| b.sell - 1.0)),
        )
    });
    let switch = t_end - d.tau;
    out.push(CheckResult::at_most(
        "buy_below_upper_bound",
        fold(
            &mut pts
                .iter()
                .filter(|b| b.time < switch)
                .map(|b| b.buy - d.buy_upper - grid_tol),
        ),
    ));
    out.push(CheckResult::at_most(
        "no_buying_near_maturity",
        fold(
            &mut pts
                .iter()
                .filter(|b| b.time >= switch + time_tol)
                .map(|b| b.buy),
        ),
    ));
    // Empty filters yield -inf, which passes vacuously; report 0 instead.
    for c in &mut out {
        if c.margin == f64::NEG_INFINITY {
            c.margin = 0.0;
            c.pass = true;
        }
    }
    Ok(out)
}

/// Whether the Merton point lies between the last buy node and the first
/// sell node of every asset, along the grid lines through the node nearest
/// to it. `margin` is the worst excess in cells.
pub fn check_merton_containment(
    labels: &RegionLabels,
    merton: &[f64],
    tol_cells: f64,
) -> Result<CheckResult> {
    let g = &labels.grid;
    let n = g.n_dim();
    if merton.len() != n {
        return Err(Error::Mismatch("Merton point dimension".into()));
    }
    let mut centre = [0usize; MAX_DIM];
    for i in 0..n {
        let s = ((merton[i] - g.lo[i]) / g.dy[i]).round();
        if s < 0.0 || s >= g.counts[i] as f64 {
            return Ok(CheckResult::at_most("merton_in_no_trade", f64::INFINITY));
        }
        centre[i] = s as usize;
    }
    let mut worst = f64::NEG_INFINITY;
    for i in 0..n {
        let mut last_buy = f64::NEG_INFINITY;
        let mut first_sell = f64::INFINITY;
        for j in 0..g.counts[i] {
            let mut m = centre;
            m[i] = j;
            let k = g.linear(&m[..n]);
            if !g.is_active(k) {
                continue;
            }
            let y = g.axis_coord(i, j);
            match labels.get(k, i) {
                AssetLabel::Buy => last_buy = last_buy.max(y),
                AssetLabel::Sell => first_sell = first_sell.min(y),
                AssetLabel::NoTrade => {}
            }
        }
        let below = (last_buy - merton[i]) / g.dy[i] - tol_cells;
        let above = (merton[i] - first_sell) / g.dy[i] - tol_cells;
        worst = worst.max(below).max(above);
    }
    Ok(CheckResult::at_most("merton_in_no_trade", worst))
}

/// Covariance of the coordinates of the no-trade nodes of a two-stock slice.
/// Positive means the region leans along the main diagonal.
pub fn correlation_elongation_sign(labels: &RegionLabels) -> Result<f64> {
    let g = &labels.grid;
    if g.n_dim() != 2 {
        return Err(Error::Mismatch("elongation needs two stocks".into()));
    }
    let pts: Vec<Vec<f64>> = (0..g.n_nodes())
        .filter(|&k| labels.is_no_trade(k))
        .map(|k| g.coords(k))
        .collect();
    if pts.len() < 10 {
        return Err(Error::Mismatch(format!(
            "need at least 10 no-trade nodes, found {}",
            pts.len()
        )));
    }
    let m = pts.len() as f64;
    let m0 = pts.iter().map(|p| p[0]).sum::<f64>() / m;
    let m1 = pts.iter().map(|p| p[1]).sum::<f64>() / m;
    Ok(pts.iter().map(|p| (p[0] - m0) * (p[1] - m1)).sum::<f64>() / m)
}

/// Number of buy-labeled nodes of any asset inside the box `[lo, hi]ᴺ`.
pub fn buy_nodes_in_box(labels: &RegionLabels, lo: f64, hi: f64) -> usize {
    let g = &labels.grid;
    let n = g.n_dim();
    (0..g.n_nodes())
        .filter(|&k| g.is_active(k))
        .filter(|&k| {
            g.coords(k)
                .iter()
                .all(|y| *y >= lo - 1e-12 && *y <= hi + 1e-12)
        })
        .map(|k| {
            (0..n)
                .filter(|&i| labels.get(k, i) == AssetLabel::Buy)
                .count()
        })
        .sum()
}

/// Number of distinct composite regions among active nodes.
pub fn region_count(labels: &RegionLabels) -> usize {
    labels.distinct_regions().len()
}
