//! Gradient constraints, region labels and the trade-curve projection.
//!
//! After every Monte Carlo step the slice is projected onto the set where
//! neither buying nor selling improves the value. Nodes violating a
//! constraint are moved along the trade curve (fractions renormalized by
//! post-cost wealth) until they reach the no-trade region, and take the value
//! found there scaled by the wealth lost to transaction costs.

use std::collections::BTreeSet;
use std::fmt;
use std::sync::Arc;

use crate::error::{invalid, Error, Result};
use crate::exec::{self, Parallelism};
use crate::grid::{GridSpec, ValueField, MAX_DIM};
use crate::market::MarketParams;

/// Region of one asset at one node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AssetLabel {
    Buy,
    Sell,
    NoTrade,
}

impl AssetLabel {
    fn letter(self) -> char {
        match self {
            AssetLabel::Buy => 'B',
            AssetLabel::Sell => 'S',
            AssetLabel::NoTrade => 'N',
        }
    }
}

/// Per-node, per-asset labels of a slice.
#[derive(Debug, Clone)]
pub struct RegionLabels {
    pub grid: Arc<GridSpec>,
    /// `n_nodes × N`, node-major. Inactive nodes are `NoTrade`.
    labels: Vec<AssetLabel>,
}

impl RegionLabels {
    pub fn from_labels(grid: Arc<GridSpec>, labels: Vec<AssetLabel>) -> Result<Self> {
        if labels.len() != grid.n_nodes() * grid.n_dim() {
            return Err(Error::Mismatch(format!(
                "expected {} labels, got {}",
                grid.n_nodes() * grid.n_dim(),
                labels.len()
            )));
        }
        Ok(Self { grid, labels })
    }

    #[inline]
    pub fn get(&self, node: usize, asset: usize) -> AssetLabel {
        self.labels[node * self.grid.n_dim() + asset]
    }

    pub fn node_labels(&self, node: usize) -> &[AssetLabel] {
        let n = self.grid.n_dim();
        &self.labels[node * n..(node + 1) * n]
    }

    /// True when the node is active and labeled no-trade for every asset.
    pub fn is_no_trade(&self, node: usize) -> bool {
        self.grid.is_active(node)
            && self
                .node_labels(node)
                .iter()
                .all(|l| *l == AssetLabel::NoTrade)
    }

    /// Composite region name such as `B1&S2` or `N1&N2`.
    pub fn composite(&self, node: usize) -> String {
        self.node_labels(node)
            .iter()
            .enumerate()
            .map(|(i, l)| format!("{}{}", l.letter(), i + 1))
            .collect::<Vec<_>>()
            .join("&")
    }

    /// Distinct composite regions among active nodes.
    pub fn distinct_regions(&self) -> BTreeSet<Vec<AssetLabel>> {
        (0..self.grid.n_nodes())
            .filter(|&k| self.grid.is_active(k))
            .map(|k| self.node_labels(k).to_vec())
            .collect()
    }

    /// Trade direction implied by the labels at `node`.
    pub fn direction(&self, node: usize) -> TradeDirection {
        let l = self.node_labels(node);
        TradeDirection {
            buy: l.iter().map(|x| *x == AssetLabel::Buy).collect(),
            sell: l.iter().map(|x| *x == AssetLabel::Sell).collect(),
        }
    }

    /// Takes over every trade label of `newer`; no-trade entries of `newer`
    /// leave the current label in place.
    pub fn absorb(&mut self, newer: &RegionLabels) {
        for (mine, theirs) in self.labels.iter_mut().zip(&newer.labels) {
            if *theirs != AssetLabel::NoTrade {
                *mine = *theirs;
            }
        }
    }

    pub fn count(&self, asset: usize, label: AssetLabel) -> usize {
        (0..self.grid.n_nodes())
            .filter(|&k| self.grid.is_active(k) && self.get(k, asset) == label)
            .count()
    }
}

/// Buy and sell flags for a simultaneous trade.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TradeDirection {
    pub buy: Vec<bool>,
    pub sell: Vec<bool>,
}

impl TradeDirection {
    pub fn new(buy: Vec<bool>, sell: Vec<bool>) -> Result<Self> {
        if buy.len() != sell.len() {
            return Err(Error::Mismatch(
                "buy and sell flags differ in length".into(),
            ));
        }
        if let Some(i) = (0..buy.len()).find(|&i| buy[i] && sell[i]) {
            return Err(invalid(
                "direction",
                format!("asset {} cannot be bought and sold at once", i + 1),
            ));
        }
        Ok(Self { buy, sell })
    }

    pub fn none(n: usize) -> Self {
        Self {
            buy: vec![false; n],
            sell: vec![false; n],
        }
    }

    pub fn buy_only(n: usize, i: usize) -> Self {
        let mut d = Self::none(n);
        d.buy[i] = true;
        d
    }

    pub fn sell_only(n: usize, i: usize) -> Self {
        let mut d = Self::none(n);
        d.sell[i] = true;
        d
    }

    pub fn is_empty(&self) -> bool {
        !self.buy.iter().chain(&self.sell).any(|x| *x)
    }

    fn is_flagged(&self, i: usize) -> bool {
        self.buy[i] || self.sell[i]
    }

    fn clear(&mut self, i: usize) {
        self.buy[i] = false;
        self.sell[i] = false;
    }
}

impl fmt::Display for TradeDirection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = (0..self.buy.len())
            .filter_map(|i| {
                if self.buy[i] {
                    Some(format!("buy{}", i + 1))
                } else if self.sell[i] {
                    Some(format!("sell{}", i + 1))
                } else {
                    None
                }
            })
            .collect();
        if parts.is_empty() {
            f.write_str("hold")
        } else {
            f.write_str(&parts.join("+"))
        }
    }
}

fn node_state(f: &ValueField, node: usize) -> ([f64; MAX_DIM], f64, f64) {
    let mut y = [0.0; MAX_DIM];
    f.grid.coords_into(node, &mut y);
    let grad = f.grad_at(node);
    let ydot: f64 = (0..f.grid.n_dim()).map(|k| y[k] * grad[k]).sum();
    (y, f.values[node], ydot)
}

/// Sell constraint `μ_i γ φ + ∂_i φ - μ_i Σ_k y_k ∂_k φ` at a node.
pub fn constraint_sell(f: &ValueField, node: usize, i: usize, p: &MarketParams) -> f64 {
    let (_, phi, ydot) = node_state(f, node);
    let mu = p.sell_cost[i];
    mu * p.gamma() * phi + f.grad_at(node)[i] - mu * ydot
}

/// Buy constraint `λ_i γ φ - ∂_i φ - λ_i Σ_k y_k ∂_k φ` at a node.
pub fn constraint_buy(f: &ValueField, node: usize, i: usize, p: &MarketParams) -> f64 {
    let (_, phi, ydot) = node_state(f, node);
    let lam = p.buy_cost[i];
    lam * p.gamma() * phi - f.grad_at(node)[i] - lam * ydot
}

/// Most negative constraint over active nodes, both directions and all assets.
pub fn min_constraint(f: &ValueField, p: &MarketParams, par: Parallelism) -> f64 {
    let n = f.grid.n_dim();
    exec::map_indexed(par, f.grid.n_nodes(), |k| {
        if !f.grid.is_active(k) {
            return f64::INFINITY;
        }
        (0..n)
            .map(|i| constraint_buy(f, k, i, p).min(constraint_sell(f, k, i, p)))
            .fold(f64::INFINITY, f64::min)
    })
    .into_iter()
    .fold(f64::INFINITY, f64::min)
}

/// Threshold below which a constraint counts as violated at value `phi`.
#[inline]
pub fn violation_threshold(tol: f64, phi: f64) -> f64 {
    -tol * phi.abs()
}

/// Labels every active node; exactly-zero constraints are no-trade.
pub fn classify(
    f: &ValueField,
    p: &MarketParams,
    tol: f64,
    par: Parallelism,
) -> Result<RegionLabels> {
    let grid = &f.grid;
    let n = grid.n_dim();
    let per_node = exec::map_indexed(par, grid.n_nodes(), |k| -> Result<[AssetLabel; MAX_DIM]> {
        let mut out = [AssetLabel::NoTrade; MAX_DIM];
        if !grid.is_active(k) {
            return Ok(out);
        }
        let thr = violation_threshold(tol, f.values[k]);
        for (i, slot) in out.iter_mut().enumerate().take(n) {
            let buy = constraint_buy(f, k, i, p) < thr;
            let sell = constraint_sell(f, k, i, p) < thr;
            *slot = match (buy, sell) {
                (true, true) => {
                    return Err(Error::InconsistentLabels {
                        node: grid.coords(k),
                        asset: i,
                    })
                }
                (true, false) => AssetLabel::Buy,
                (false, true) => AssetLabel::Sell,
                (false, false) => AssetLabel::NoTrade,
            };
        }
        Ok(out)
    });
    let mut labels = Vec::with_capacity(grid.n_nodes() * n);
    for r in per_node {
        labels.extend_from_slice(&r?[..n]);
    }
    RegionLabels::from_labels(Arc::clone(grid), labels)
}

/// Post-trade wealth after trading `delta` of every flagged asset, starting
/// from unit wealth.
fn post_trade_wealth(dir: &TradeDirection, delta: f64, p: &MarketParams) -> f64 {
    let cost: f64 = (0..dir.buy.len())
        .map(|i| {
            if dir.buy[i] {
                p.buy_cost[i]
            } else if dir.sell[i] {
                p.sell_cost[i]
            } else {
                0.0
            }
        })
        .sum();
    1.0 - delta * cost
}

/// Point reached from `y` by buying `delta` of every buy-flagged asset and
/// selling `delta` of every sell-flagged one, renormalized by the post-cost
/// wealth.
pub fn characteristic_point(
    y: &[f64],
    dir: &TradeDirection,
    delta: f64,
    p: &MarketParams,
) -> Result<Vec<f64>> {
    if !(delta >= 0.0) {
        return Err(invalid("delta", "trade size must be non-negative"));
    }
    let w = post_trade_wealth(dir, delta, p);
    if !(w > 0.0) {
        return Err(Error::Insolvent(w));
    }
    Ok(y.iter()
        .enumerate()
        .map(|(i, &yi)| {
            let shift = if dir.buy[i] {
                delta
            } else if dir.sell[i] {
                -delta
            } else {
                0.0
            };
            (yi + shift) / w
        })
        .collect())
}

/// `1 + Σ λ_i y_i υ_i - Σ μ_i y_i ϱ_i`; its ratio between two points of one
/// trade curve is the post-trade wealth.
fn wealth_index(y: &[f64], dir: &TradeDirection, p: &MarketParams) -> f64 {
    1.0 + (0..y.len())
        .map(|i| {
            if dir.buy[i] {
                p.buy_cost[i] * y[i]
            } else if dir.sell[i] {
                -p.sell_cost[i] * y[i]
            } else {
                0.0
            }
        })
        .sum::<f64>()
}

/// Value at `y_star` obtained by trading to `y_bar` and holding there.
pub fn adjust_value(
    y_star: &[f64],
    y_bar: &[f64],
    dir: &TradeDirection,
    f: &ValueField,
    p: &MarketParams,
) -> Result<f64> {
    let num = wealth_index(y_star, dir, p);
    let den = wealth_index(y_bar, dir, p);
    if !(num > 0.0) {
        return Err(Error::NonPositiveWealth(num));
    }
    if !(den > 0.0) {
        return Err(Error::NonPositiveWealth(den));
    }
    Ok(f.value_at(y_bar) * (num / den).powf(p.gamma()))
}

/// One straight piece of a traced path: `delta` units of `dir` from `start`.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceLeg {
    pub start: Vec<f64>,
    pub dir: TradeDirection,
    pub delta: f64,
}

/// Result of following a trade curve.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceOutcome {
    /// Where the path stops.
    pub point: Vec<f64>,
    /// False when the curve left the box or the solvency domain first.
    pub resolved: bool,
    /// Pieces of the path in order; a new leg starts whenever an asset
    /// leaves the trade.
    pub legs: Vec<TraceLeg>,
}

/// Bisection depth; resolves the exit point far below the cell size.
const BISECT_ITERS: usize = 52;

enum CurveState {
    /// Point usable; carries the flagged assets that have left their trade
    /// region there.
    Valid(Vec<usize>),
    Invalid,
}

fn in_box(grid: &GridSpec, y: &[f64]) -> bool {
    (0..y.len()).all(|i| y[i] >= grid.lo[i] - 1e-12 && y[i] <= grid.hi[i] + 1e-12)
}

/// Assets of `dir` whose trade label is absent from every supporting node of `y`.
fn cleared_assets(y: &[f64], dir: &TradeDirection, labels: &RegionLabels) -> Option<Vec<usize>> {
    let support = labels.grid.stencil(y)?;
    Some(
        (0..y.len())
            .filter(|&i| dir.is_flagged(i))
            .filter(|&i| {
                let bad = if dir.buy[i] {
                    AssetLabel::Buy
                } else {
                    AssetLabel::Sell
                };
                support.iter().all(|(node, _)| match node {
                    Some(k) => labels.get(*k, i) != bad,
                    None => false,
                })
            })
            .collect(),
    )
}

fn curve_state(
    start: &[f64],
    dir: &TradeDirection,
    delta: f64,
    labels: &RegionLabels,
    p: &MarketParams,
) -> (CurveState, Vec<f64>) {
    let pt = match characteristic_point(start, dir, delta, p) {
        Ok(pt) => pt,
        Err(_) => return (CurveState::Invalid, Vec::new()),
    };
    if !in_box(&labels.grid, &pt) || !p.in_domain(&pt) {
        return (CurveState::Invalid, pt);
    }
    match cleared_assets(&pt, dir, labels) {
        Some(c) => (CurveState::Valid(c), pt),
        None => (CurveState::Invalid, pt),
    }
}

/// Follows the joint trade curve of the flagged assets from `y_star` until
/// every flagged asset has left its trade region. Assets are dropped from the
/// trade as soon as they clear, so the curve bends toward the corner of the
/// no-trade region when several assets are traded.
pub fn trace_to_boundary(
    y_star: &[f64],
    dir: &TradeDirection,
    labels: &RegionLabels,
    p: &MarketParams,
) -> TraceOutcome {
    let grid = &labels.grid;
    let step = grid.dy.iter().cloned().fold(f64::INFINITY, f64::min) / 2.0;
    let extent: f64 = (0..grid.n_dim()).map(|i| grid.hi[i] - grid.lo[i]).sum();
    // Fractions grow by at most 1/W per unit trade; this bounds the march well
    // past any exit from the box.
    let max_steps = ((4.0 * extent + 4.0) / step).ceil() as usize;

    let mut cur = y_star.to_vec();
    let mut active = dir.clone();
    let mut legs = Vec::new();
    let finish = |point: Vec<f64>, resolved: bool, legs: Vec<TraceLeg>| TraceOutcome {
        point,
        resolved,
        legs,
    };
    loop {
        match cleared_assets(&cur, &active, labels) {
            Some(c) => c.into_iter().for_each(|i| active.clear(i)),
            None => return finish(cur, false, legs),
        }
        if active.is_empty() {
            return finish(cur, true, legs);
        }
        let mut lo = 0.0;
        let mut hi = None;
        for k in 1..=max_steps {
            let d = k as f64 * step;
            match curve_state(&cur, &active, d, labels, p).0 {
                CurveState::Valid(c) if c.is_empty() => lo = d,
                _ => {
                    hi = Some(d);
                    break;
                }
            }
        }
        let leg = |delta: f64| TraceLeg {
            start: cur.clone(),
            dir: active.clone(),
            delta,
        };
        let Some(mut hi) = hi else {
            let point = characteristic_point(&cur, &active, lo, p).unwrap_or_else(|_| cur.clone());
            legs.push(leg(lo));
            return finish(point, false, legs);
        };
        for _ in 0..BISECT_ITERS {
            let mid = 0.5 * (lo + hi);
            match curve_state(&cur, &active, mid, labels, p).0 {
                CurveState::Valid(c) if c.is_empty() => lo = mid,
                _ => hi = mid,
            }
        }
        match curve_state(&cur, &active, hi, labels, p) {
            (CurveState::Valid(c), pt) => {
                legs.push(leg(hi));
                c.into_iter().for_each(|i| active.clear(i));
                cur = pt;
            }
            (CurveState::Invalid, _) => {
                let point =
                    characteristic_point(&cur, &active, lo, p).unwrap_or_else(|_| cur.clone());
                legs.push(leg(lo));
                return finish(point, false, legs);
            }
        }
    }
}

/// Trade sizes in `(0, delta)` at which the leg crosses a grid plane. Along a
/// leg every coordinate moves monotonically:
/// `y_i(δ) = (y_i + s_i δ) / (1 - c δ)` with `dy_i/dδ ∝ s_i + c y_i`.
fn plane_crossings(leg: &TraceLeg, grid: &GridSpec, p: &MarketParams) -> Vec<f64> {
    let Ok(end) = characteristic_point(&leg.start, &leg.dir, leg.delta, p) else {
        return Vec::new();
    };
    let c = 1.0 - post_trade_wealth(&leg.dir, 1.0, p);
    let mut out = Vec::new();
    for i in 0..grid.n_dim() {
        let s = if leg.dir.buy[i] {
            1.0
        } else if leg.dir.sell[i] {
            -1.0
        } else {
            0.0
        };
        let (a, b) = if leg.start[i] <= end[i] {
            (leg.start[i], end[i])
        } else {
            (end[i], leg.start[i])
        };
        let first = ((a - grid.lo[i]) / grid.dy[i]).ceil().max(0.0) as usize;
        let last = (((b - grid.lo[i]) / grid.dy[i]).floor() as usize).min(grid.counts[i] - 1);
        if b < grid.lo[i] {
            continue;
        }
        for j in first..=last {
            let v = grid.axis_coord(i, j);
            let den = s + c * v;
            if den != 0.0 {
                let d = (v - leg.start[i]) / den;
                if d > 0.0 && d < leg.delta {
                    out.push(d);
                }
            }
        }
    }
    out
}

/// Best value reachable from `y_star` by trading any amount along the traced
/// path, holding afterwards: the supremum of `φ(ŷ) · ratio^γ` over the path,
/// including the untraded point itself. The multilinear interpolant is
/// piecewise smooth between grid-plane crossings, so it suffices to test the
/// leg ends and the crossings. With `include_start` false the untraded point
/// is skipped (its own value is not trusted).
pub fn best_on_path(
    y_star: &[f64],
    dir: &TradeDirection,
    trace: &TraceOutcome,
    f: &ValueField,
    p: &MarketParams,
    include_start: bool,
) -> Result<(Vec<f64>, f64)> {
    let mut best = (
        trace.point.clone(),
        adjust_value(y_star, &trace.point, dir, f, p)?,
    );
    if include_start {
        let v = adjust_value(y_star, y_star, dir, f, p)?;
        if v > best.1 {
            best = (y_star.to_vec(), v);
        }
    }
    let mut consider = |pt: Vec<f64>| -> Result<()> {
        let v = adjust_value(y_star, &pt, dir, f, p)?;
        if v > best.1 {
            best = (pt, v);
        }
        Ok(())
    };
    for leg in &trace.legs {
        for d in plane_crossings(leg, &f.grid, p) {
            consider(characteristic_point(&leg.start, &leg.dir, d, p)?)?;
        }
    }
    Ok(best)
}

/// Summary of one projection.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SweepStats {
    pub sweeps: usize,
    /// Nodes whose value was raised at least once.
    pub adjusted: usize,
    /// Nodes whose last trace left the box or the domain.
    pub unresolved: usize,
    pub converged: bool,
    /// Most negative constraint after the projection, relative to `|φ|`,
    /// over nodes whose stencils see no phantom neighbours.
    pub worst_violation: f64,
}

/// Projected slice with the labels found before projection.
#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub field: ValueField,
    pub labels: RegionLabels,
    pub stats: SweepStats,
}

/// Relative change below which a raised value counts as unchanged.
const STALL_REL: f64 = 1e-13;

/// Most negative relative constraint over nodes with a full stencil. Box-face
/// nodes read phantom values and their derivatives say nothing about the
/// solution.
pub fn worst_relative_violation(f: &ValueField, p: &MarketParams, par: Parallelism) -> f64 {
    let n = f.grid.n_dim();
    exec::map_indexed(par, f.grid.n_nodes(), |k| {
        if !f.grid.has_full_stencil(k) {
            return 0.0;
        }
        let scale = f.values[k].abs().max(f64::MIN_POSITIVE);
        (0..n)
            .map(|i| constraint_buy(f, k, i, p).min(constraint_sell(f, k, i, p)) / scale)
            .fold(0.0, f64::min)
    })
    .into_iter()
    .fold(0.0, f64::min)
}

/// Repeats classify / trace / adjust until no node changes. Every sweep
/// reads a frozen copy of the slice, so node order does not matter.
pub fn sweep_adjust(
    f: ValueField,
    p: &MarketParams,
    tol: f64,
    max_sweeps: usize,
    par: Parallelism,
) -> Result<SweepOutcome> {
    let first = classify(&f, p, tol, par)?;
    let grid = Arc::clone(&f.grid);
    let n = grid.n_dim();
    let mut current = f;
    let mut labels = first.clone();
    let mut touched = vec![false; grid.n_nodes()];
    let mut unresolved = vec![false; grid.n_nodes()];
    let mut stats = SweepStats::default();
    for sweep in 0..max_sweeps {
        if sweep > 0 {
            // Trade labels are sticky: a node projected earlier keeps being
            // re-traced even once its own constraint holds, so it follows
            // later increases of the values it was projected onto.
            labels.absorb(&classify(&current, p, tol, par)?);
        }
        stats.sweeps = sweep + 1;
        let frozen = &current;
        let lab = &labels;
        let updates = exec::map_indexed(par, grid.n_nodes(), |k| -> Result<Option<(f64, bool)>> {
            if !grid.is_active(k) {
                return Ok(None);
            }
            let dir = lab.direction(k);
            if dir.is_empty() {
                return Ok(None);
            }
            let mut y = [0.0; MAX_DIM];
            grid.coords_into(k, &mut y);
            let y = &y[..n];
            let trace = trace_to_boundary(y, &dir, lab, p);
            let v = best_on_path(y, &dir, &trace, frozen, p, grid.has_full_stencil(k))?.1;
            Ok(Some((v, trace.resolved)))
        });
        let mut values = current.values.clone();
        let mut raised = false;
        let mut any_violation = false;
        for (k, u) in updates.into_iter().enumerate() {
            let Some((v, resolved)) = u? else { continue };
            any_violation = true;
            unresolved[k] = !resolved;
            let slack = STALL_REL * values[k].abs();
            // Box-face nodes come out of the step with phantom-contaminated
            // values, so the trade value replaces them outright; elsewhere the
            // projection may only raise.
            let replace = if grid.has_full_stencil(k) {
                v > values[k] + slack
            } else {
                (v - values[k]).abs() > slack
            };
            if replace {
                values[k] = v;
                touched[k] = true;
                raised = true;
            }
        }
        if !any_violation || !raised {
            stats.converged = true;
            break;
        }
        current = ValueField::new(Arc::clone(&grid), current.time, values, par);
    }
    stats.adjusted = touched.iter().filter(|t| **t).count();
    stats.unresolved = unresolved.iter().filter(|t| **t).count();
    stats.worst_violation = worst_relative_violation(&current, p, par);
    if !stats.converged {
        log::warn!(
            "projection at t={} stopped after {max_sweeps} sweeps; worst relative violation {:.3e}",
            current.time,
            stats.worst_violation
        );
    }
    Ok(SweepOutcome {
        field: current,
        labels: first,
        stats,
    })
}
