//! Uniform tensor grid over a truncation box, one time slice of the reduced
//! value function, multilinear interpolation and centered difference stencils.

use std::sync::Arc;

use crate::error::{invalid, Error, Result};
use crate::exec::{self, Parallelism};
use crate::market::MarketParams;

/// Largest grid dimension supported by the tensor-grid solver.
pub const MAX_DIM: usize = 3;

/// Query points beyond the box by less than this are snapped onto the face.
const CLAMP_GUARD: f64 = 1e-12;

/// Default wealth floor used for the `γ < 0` liquidation value.
pub const DEFAULT_WEALTH_FLOOR: f64 = 1e-8;

/// How stencils and interpolation treat points off the box or outside the
/// solvency domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeRule {
    /// Phantom nodes carry the liquidation value (`γ > 0`).
    Extension,
    /// Phantom nodes replicate the nearest in-box value (`γ < 0`); only points
    /// outside the solvency domain take the liquidation floor.
    Replicate,
}

/// A uniform grid with active/inactive flags.
#[derive(Debug, Clone)]
pub struct GridSpec {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub dy: Vec<f64>,
    pub counts: Vec<usize>,
    strides: Vec<usize>,
    active: Vec<bool>,
    buy_cost: Vec<f64>,
    sell_cost: Vec<f64>,
    /// Value used at phantom or inactive nodes.
    pub extension: f64,
    pub edge: EdgeRule,
}

/// Builds the grid `lo + k dy` per axis and flags nodes outside `Θᴺ`.
///
/// `hi` is rounded to the nearest whole number of cells.
pub fn build_grid(p: &MarketParams, lo: &[f64], hi: &[f64], dy: &[f64]) -> Result<GridSpec> {
    build_grid_with_floor(p, lo, hi, dy, DEFAULT_WEALTH_FLOOR)
}

pub fn build_grid_with_floor(
    p: &MarketParams,
    lo: &[f64],
    hi: &[f64],
    dy: &[f64],
    wealth_floor: f64,
) -> Result<GridSpec> {
    let n = p.n_assets();
    if n > MAX_DIM {
        return Err(invalid(
            "grid",
            format!("tensor grids support at most {MAX_DIM} stocks, got {n}"),
        ));
    }
    if lo.len() != n || hi.len() != n || dy.len() != n {
        return Err(invalid("grid", format!("box and spacing need {n} entries")));
    }
    let mut counts = Vec::with_capacity(n);
    let mut hi_eff = Vec::with_capacity(n);
    for i in 0..n {
        if !(dy[i] > 0.0) {
            return Err(invalid("grid.dy", "spacing must be positive"));
        }
        if !(lo[i] < hi[i]) {
            return Err(invalid(
                "grid.lo",
                "lower corner must lie below the upper corner",
            ));
        }
        let cells = ((hi[i] - lo[i]) / dy[i]).round() as usize;
        if cells == 0 {
            return Err(invalid("grid.dy", "spacing exceeds the box width"));
        }
        counts.push(cells + 1);
        hi_eff.push(lo[i] + cells as f64 * dy[i]);
    }
    let mut strides = vec![1usize; n];
    for i in (0..n.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * counts[i + 1];
    }
    let total: usize = counts.iter().product();
    let mut grid = GridSpec {
        lo: lo.to_vec(),
        hi: hi_eff,
        dy: dy.to_vec(),
        counts,
        strides,
        active: Vec::new(),
        buy_cost: p.buy_cost.clone(),
        sell_cost: p.sell_cost.clone(),
        extension: p.extension_value(wealth_floor),
        edge: if p.gamma() > 0.0 {
            EdgeRule::Extension
        } else {
            EdgeRule::Replicate
        },
    };
    let mut y = [0.0; MAX_DIM];
    grid.active = (0..total)
        .map(|idx| {
            grid.coords_into(idx, &mut y);
            p.in_domain(&y[..n])
        })
        .collect();
    if !grid.active.iter().any(|a| *a) {
        return Err(Error::EmptyActiveSet);
    }
    Ok(grid)
}

impl GridSpec {
    #[inline]
    pub fn n_dim(&self) -> usize {
        self.counts.len()
    }

    #[inline]
    pub fn n_nodes(&self) -> usize {
        self.active.len()
    }

    #[inline]
    pub fn is_active(&self, idx: usize) -> bool {
        self.active[idx]
    }

    pub fn n_active(&self) -> usize {
        self.active.iter().filter(|a| **a).count()
    }

    /// Number of off-diagonal index pairs `i < j`.
    #[inline]
    pub fn n_pairs(&self) -> usize {
        let n = self.n_dim();
        n * (n - 1) / 2
    }

    /// Position of the pair `(i, j)`, `i < j`, in the cross-derivative cache.
    #[inline]
    pub fn pair_index(&self, i: usize, j: usize) -> usize {
        let (i, j) = if i < j { (i, j) } else { (j, i) };
        let n = self.n_dim();
        i * (2 * n - i - 1) / 2 + (j - i - 1)
    }

    #[inline]
    pub fn linear(&self, m: &[usize]) -> usize {
        m.iter().zip(&self.strides).map(|(a, s)| a * s).sum()
    }

    #[inline]
    pub fn multi_index_into(&self, idx: usize, m: &mut [usize]) {
        let mut rest = idx;
        for (i, s) in self.strides.iter().enumerate() {
            m[i] = rest / s;
            rest %= s;
        }
    }

    /// True when every node of the centered stencils around `idx` (the
    /// `3ᴺ` neighbourhood) lies in the box and is active, so no phantom rule
    /// enters its derivatives.
    pub fn has_full_stencil(&self, idx: usize) -> bool {
        let n = self.n_dim();
        let mut m = [0usize; MAX_DIM];
        self.multi_index_into(idx, &mut m);
        if (0..n).any(|i| m[i] == 0 || m[i] + 1 >= self.counts[i]) {
            return false;
        }
        let total = 3usize.pow(n as u32);
        (0..total).all(|code| {
            let mut c = code;
            let mut k = 0;
            for i in 0..n {
                let off = c % 3;
                c /= 3;
                k += (m[i] + off - 1) * self.strides[i];
            }
            self.active[k]
        })
    }

    pub fn multi_index(&self, idx: usize) -> Vec<usize> {
        let mut m = vec![0; self.n_dim()];
        self.multi_index_into(idx, &mut m);
        m
    }

    #[inline]
    pub fn coords_into(&self, idx: usize, y: &mut [f64]) {
        let mut rest = idx;
        for (i, s) in self.strides.iter().enumerate() {
            y[i] = self.lo[i] + (rest / s) as f64 * self.dy[i];
            rest %= s;
        }
    }

    pub fn coords(&self, idx: usize) -> Vec<f64> {
        let mut y = vec![0.0; self.n_dim()];
        self.coords_into(idx, &mut y);
        y
    }

    /// Node coordinate along one axis.
    #[inline]
    pub fn axis_coord(&self, axis: usize, k: usize) -> f64 {
        self.lo[axis] + k as f64 * self.dy[axis]
    }

    pub fn in_domain(&self, y: &[f64]) -> bool {
        let w: f64 = y
            .iter()
            .enumerate()
            .map(|(i, &yi)| (-self.sell_cost[i] * yi).min(self.buy_cost[i] * yi))
            .sum();
        1.0 + w >= 0.0
    }

    /// True when two grids describe the same nodes.
    pub fn same_nodes(&self, other: &GridSpec) -> bool {
        self.counts == other.counts
            && self
                .lo
                .iter()
                .zip(&other.lo)
                .chain(self.dy.iter().zip(&other.dy))
                .all(|(a, b)| (a - b).abs() <= 1e-12 * (1.0 + a.abs()))
    }

    /// Locates `y` for interpolation: lower cell corner and fractional offsets.
    /// `None` means the point takes the liquidation value.
    fn locate(&self, y: &[f64], base: &mut [usize], frac: &mut [f64]) -> Option<()> {
        if !self.in_domain(y) {
            return None;
        }
        for i in 0..self.n_dim() {
            let mut yi = y[i];
            if yi < self.lo[i] || yi > self.hi[i] {
                let over = if yi < self.lo[i] {
                    self.lo[i] - yi
                } else {
                    yi - self.hi[i]
                };
                if over > CLAMP_GUARD && self.edge == EdgeRule::Extension {
                    return None;
                }
                yi = yi.clamp(self.lo[i], self.hi[i]);
            }
            let s = (yi - self.lo[i]) / self.dy[i];
            let last = self.counts[i] - 2;
            let k = (s.floor().max(0.0) as usize).min(last);
            base[i] = k;
            frac[i] = (s - k as f64).clamp(0.0, 1.0);
        }
        Some(())
    }

    /// Interpolation stencil of `y`: up to `2ᴺ` (node, weight) pairs with
    /// positive weight; inactive corners are reported with `None`.
    pub fn stencil(&self, y: &[f64]) -> Option<Vec<(Option<usize>, f64)>> {
        let n = self.n_dim();
        let mut base = [0usize; MAX_DIM];
        let mut frac = [0.0; MAX_DIM];
        self.locate(y, &mut base, &mut frac)?;
        let mut out = Vec::with_capacity(1 << n);
        for corner in 0..(1usize << n) {
            let mut w = 1.0;
            let mut idx = 0;
            for i in 0..n {
                let up = (corner >> i) & 1 == 1;
                w *= if up { frac[i] } else { 1.0 - frac[i] };
                idx += (base[i] + up as usize) * self.strides[i];
            }
            if w > 0.0 {
                out.push((self.active[idx].then_some(idx), w));
            }
        }
        Some(out)
    }
}

/// Interpolated value together with interpolated derivative caches.
#[derive(Debug, Clone, Copy, Default)]
pub struct FieldSample {
    pub value: f64,
    pub grad: [f64; MAX_DIM],
    pub cross: [f64; MAX_DIM],
}

/// One time slice of the reduced value function with cached derivatives.
#[derive(Debug, Clone)]
pub struct ValueField {
    pub grid: Arc<GridSpec>,
    pub time: f64,
    pub values: Vec<f64>,
    /// `∂_i φ` per node, `n_nodes × N`.
    pub grad: Vec<f64>,
    /// `∂_ij φ` for `i < j` per node, `n_nodes × N(N-1)/2`.
    pub hess_cross: Vec<f64>,
}

impl ValueField {
    /// Wraps node values and computes the derivative caches. Inactive nodes
    /// are forced to the liquidation value.
    pub fn new(grid: Arc<GridSpec>, time: f64, mut values: Vec<f64>, par: Parallelism) -> Self {
        assert_eq!(values.len(), grid.n_nodes(), "one value per node");
        for (v, a) in values.iter_mut().zip(&grid.active) {
            if !*a {
                *v = grid.extension;
            }
        }
        let mut f = Self {
            grad: Vec::new(),
            hess_cross: Vec::new(),
            grid,
            time,
            values,
        };
        f.refresh_derivatives(par);
        f
    }

    /// Samples `g` at every node.
    pub fn from_fn(
        grid: Arc<GridSpec>,
        time: f64,
        par: Parallelism,
        g: impl Fn(&[f64]) -> f64 + Sync + Send,
    ) -> Self {
        let n = grid.n_dim();
        let values = exec::map_indexed(par, grid.n_nodes(), |idx| {
            let mut y = [0.0; MAX_DIM];
            grid.coords_into(idx, &mut y);
            g(&y[..n])
        });
        Self::new(grid, time, values, par)
    }

    /// Recomputes `grad` and `hess_cross` from `values`.
    pub fn refresh_derivatives(&mut self, par: Parallelism) {
        let n = self.grid.n_dim();
        let np = self.grid.n_pairs();
        let mut grad = vec![0.0; self.values.len() * n];
        exec::fill_chunks(par, &mut grad, n, |idx, out| {
            if self.grid.active[idx] {
                for (i, o) in out.iter_mut().enumerate() {
                    *o = self.stencil_first(i, idx);
                }
            }
        });
        let mut cross = vec![0.0; self.values.len() * np];
        if np > 0 {
            exec::fill_chunks(par, &mut cross, np, |idx, out| {
                if self.grid.active[idx] {
                    for i in 0..n {
                        for j in (i + 1)..n {
                            out[self.grid.pair_index(i, j)] = self.stencil_cross(i, j, idx);
                        }
                    }
                }
            });
        }
        self.grad = grad;
        self.hess_cross = cross;
    }

    #[inline]
    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    #[inline]
    pub fn grad_at(&self, idx: usize) -> &[f64] {
        let n = self.grid.n_dim();
        &self.grad[idx * n..(idx + 1) * n]
    }

    #[inline]
    pub fn cross_at(&self, idx: usize, i: usize, j: usize) -> f64 {
        let np = self.grid.n_pairs();
        self.hess_cross[idx * np + self.grid.pair_index(i, j)]
    }

    /// Reads the node at `center + offset` with the phantom-node rules.
    fn read_offset(&self, center: usize, offset: &[isize]) -> f64 {
        let g = &*self.grid;
        let mut m = [0usize; MAX_DIM];
        g.multi_index_into(center, &mut m);
        let mut off_box = false;
        for (i, &o) in offset.iter().enumerate() {
            let k = m[i] as isize + o;
            let last = g.counts[i] as isize - 1;
            if k < 0 || k > last {
                off_box = true;
            }
            m[i] = k.clamp(0, last) as usize;
        }
        match g.edge {
            EdgeRule::Extension => {
                let idx = g.linear(&m[..g.n_dim()]);
                if off_box || !g.active[idx] {
                    g.extension
                } else {
                    self.values[idx]
                }
            }
            EdgeRule::Replicate => {
                let idx = g.linear(&m[..g.n_dim()]);
                if g.active[idx] {
                    self.values[idx]
                } else {
                    self.values[center]
                }
            }
        }
    }

    fn stencil_first(&self, axis: usize, idx: usize) -> f64 {
        let n = self.grid.n_dim();
        let mut up = [0isize; MAX_DIM];
        let mut down = [0isize; MAX_DIM];
        up[axis] = 1;
        down[axis] = -1;
        (self.read_offset(idx, &up[..n]) - self.read_offset(idx, &down[..n]))
            / (2.0 * self.grid.dy[axis])
    }

    fn stencil_cross(&self, i: usize, j: usize, idx: usize) -> f64 {
        let n = self.grid.n_dim();
        let corner = |si: isize, sj: isize| {
            let mut o = [0isize; MAX_DIM];
            o[i] = si;
            o[j] = sj;
            self.read_offset(idx, &o[..n])
        };
        (corner(1, 1) + corner(-1, -1) - corner(1, -1) - corner(-1, 1))
            / (4.0 * self.grid.dy[i] * self.grid.dy[j])
    }

    /// Centered first difference along `axis` at node `idx`.
    pub fn first_derivative(&self, axis: usize, idx: usize) -> f64 {
        self.stencil_first(axis, idx)
    }

    /// Four-point cross difference at node `idx`; `i == j` is rejected since
    /// diagonal second derivatives belong to the sampled diffusion.
    pub fn cross_derivative(&self, i: usize, j: usize, idx: usize) -> Result<f64> {
        if i == j {
            return Err(Error::SameAxis(i));
        }
        Ok(self.stencil_cross(i, j, idx))
    }

    /// Multilinear interpolation of the node values.
    pub fn value_at(&self, y: &[f64]) -> f64 {
        let g = &*self.grid;
        let n = g.n_dim();
        let mut base = [0usize; MAX_DIM];
        let mut frac = [0.0; MAX_DIM];
        if g.locate(y, &mut base, &mut frac).is_none() {
            return g.extension;
        }
        let mut acc = 0.0;
        for corner in 0..(1usize << n) {
            let mut w = 1.0;
            let mut idx = 0;
            for i in 0..n {
                let up = (corner >> i) & 1 == 1;
                w *= if up { frac[i] } else { 1.0 - frac[i] };
                idx += (base[i] + up as usize) * g.strides[i];
            }
            if w == 0.0 {
                continue;
            }
            acc += w * if g.active[idx] {
                self.values[idx]
            } else {
                g.extension
            };
        }
        acc
    }

    /// Interpolates value, gradient cache and cross-derivative cache at `y`
    /// sharing one set of weights. Liquidation points report zero derivatives.
    pub fn sample_at(&self, y: &[f64]) -> FieldSample {
        let g = &*self.grid;
        let n = g.n_dim();
        let np = g.n_pairs();
        let mut out = FieldSample::default();
        let mut base = [0usize; MAX_DIM];
        let mut frac = [0.0; MAX_DIM];
        if g.locate(y, &mut base, &mut frac).is_none() {
            out.value = g.extension;
            return out;
        }
        for corner in 0..(1usize << n) {
            let mut w = 1.0;
            let mut idx = 0;
            for i in 0..n {
                let up = (corner >> i) & 1 == 1;
                w *= if up { frac[i] } else { 1.0 - frac[i] };
                idx += (base[i] + up as usize) * g.strides[i];
            }
            if w == 0.0 {
                continue;
            }
            if !g.active[idx] {
                out.value += w * g.extension;
                continue;
            }
            out.value += w * self.values[idx];
            for i in 0..n {
                out.grad[i] += w * self.grad[idx * n + i];
            }
            for k in 0..np {
                out.cross[k] += w * self.hess_cross[idx * np + k];
            }
        }
        out
    }

    /// Smallest and largest value over active nodes.
    pub fn value_range(&self) -> (f64, f64) {
        self.values
            .iter()
            .zip(&self.grid.active)
            .filter(|(_, a)| **a)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (v, _)| {
                (lo.min(*v), hi.max(*v))
            })
    }
}
