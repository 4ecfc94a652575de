//! Market and preference constants together with the coefficient functions of
//! the reduced (unit-wealth) HJB system.
//!
//! The state `y` is the vector of wealth fractions held in each stock when
//! total wealth equals one. All functions here are pure and cheap; they are
//! evaluated once per grid node per time step.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Symmetry tolerance applied to the covariance matrix.
const SYMMETRY_TOL: f64 = 1e-12;

/// All constants of the market model and the investor's preferences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketParams {
    /// Risk-free rate `r`.
    pub rate: f64,
    /// Mean rates of return `α`, one per stock.
    pub drift: Vec<f64>,
    /// Covariance `a = σσ'`, row-major `N × N`.
    pub cov: Vec<f64>,
    /// Proportional buying costs `λ`.
    pub buy_cost: Vec<f64>,
    /// Proportional selling costs `μ`.
    pub sell_cost: Vec<f64>,
    /// Discount rate `β`.
    pub discount: f64,
    /// Relative risk aversion coefficient `γ` of the power utility.
    pub risk_aversion: f64,
    /// Investment horizon `T` in years.
    pub horizon: f64,
}

/// Bounds on the free boundaries for a single stock.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DaiYiBounds {
    /// Length of the no-buying window before maturity.
    pub tau: f64,
    pub y_tilde: f64,
    /// Lower bound of the selling boundary, `1 / (1 + (1 - μ) ỹ)`.
    pub sell_lower: f64,
    /// Upper bound of the buying boundary before `T - τ`, `1 / (1 + (1 + λ) ỹ)`.
    pub buy_upper: f64,
    /// Sign of `α - r - (1 - γ) σ²`, which decides whether `S_t` is above,
    /// at or below one.
    pub leverage_indicator: f64,
}

impl MarketParams {
    /// Builds and validates parameters from a covariance matrix given as rows.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        rate: f64,
        drift: Vec<f64>,
        cov_rows: Vec<Vec<f64>>,
        buy_cost: Vec<f64>,
        sell_cost: Vec<f64>,
        discount: f64,
        risk_aversion: f64,
        horizon: f64,
    ) -> Result<Self> {
        let n = drift.len();
        if cov_rows.len() != n || cov_rows.iter().any(|r| r.len() != n) {
            return Err(invalid("market.cov", format!("expected a {n}x{n} matrix")));
        }
        let p = Self {
            rate,
            drift,
            cov: cov_rows.into_iter().flatten().collect(),
            buy_cost,
            sell_cost,
            discount,
            risk_aversion,
            horizon,
        };
        p.validate()?;
        Ok(p)
    }

    /// Builds parameters from a volatility matrix `σ`, forming `a = σσ'`.
    #[allow(clippy::too_many_arguments)]
    pub fn from_volatility(
        rate: f64,
        drift: Vec<f64>,
        sigma_rows: Vec<Vec<f64>>,
        buy_cost: Vec<f64>,
        sell_cost: Vec<f64>,
        discount: f64,
        risk_aversion: f64,
        horizon: f64,
    ) -> Result<Self> {
        let n = drift.len();
        if sigma_rows.len() != n || sigma_rows.iter().any(|r| r.len() != n) {
            return Err(invalid(
                "market.sigma",
                format!("expected a {n}x{n} matrix"),
            ));
        }
        let s = DMatrix::from_fn(n, n, |i, j| sigma_rows[i][j]);
        let a = &s * s.transpose();
        let rows = (0..n)
            .map(|i| (0..n).map(|j| a[(i, j)]).collect())
            .collect();
        Self::new(
            rate,
            drift,
            rows,
            buy_cost,
            sell_cost,
            discount,
            risk_aversion,
            horizon,
        )
    }

    /// Checks every invariant of the parameter set.
    pub fn validate(&self) -> Result<()> {
        let n = self.drift.len();
        if n == 0 {
            return Err(invalid("market.drift", "at least one stock is required"));
        }
        if self.cov.len() != n * n {
            return Err(invalid("market.cov", format!("expected {} entries", n * n)));
        }
        if self.buy_cost.len() != n {
            return Err(invalid("market.buy_cost", format!("expected {n} entries")));
        }
        if self.sell_cost.len() != n {
            return Err(invalid("market.sell_cost", format!("expected {n} entries")));
        }
        let all_finite = [self.rate, self.discount, self.risk_aversion, self.horizon]
            .iter()
            .chain(&self.drift)
            .chain(&self.cov)
            .chain(&self.buy_cost)
            .chain(&self.sell_cost)
            .all(|v| v.is_finite());
        if !all_finite {
            return Err(invalid("market", "all parameters must be finite"));
        }
        for i in 0..n {
            let (l, m) = (self.buy_cost[i], self.sell_cost[i]);
            if l < 0.0 {
                return Err(invalid("market.buy_cost", "costs must be non-negative"));
            }
            if !(0.0..1.0).contains(&m) {
                return Err(invalid(
                    "market.sell_cost",
                    "selling costs must lie in [0, 1)",
                ));
            }
            if l + m <= 0.0 {
                return Err(invalid(
                    "market.buy_cost",
                    format!("buy_cost + sell_cost must be positive for stock {}", i + 1),
                ));
            }
        }
        if self.discount <= 0.0 {
            return Err(invalid("market.discount", "must be positive"));
        }
        let g = self.risk_aversion;
        if g >= 1.0 || g == 0.0 {
            return Err(invalid(
                "market.risk_aversion",
                "power utility needs gamma < 1 and gamma != 0",
            ));
        }
        if self.horizon <= 0.0 {
            return Err(invalid("market.horizon", "must be positive"));
        }
        for i in 0..n {
            for j in 0..i {
                if (self.a(i, j) - self.a(j, i)).abs() > SYMMETRY_TOL {
                    return Err(invalid("market.cov", "matrix is not symmetric"));
                }
            }
        }
        if self.cov_matrix().cholesky().is_none() {
            return Err(invalid("market.cov", "matrix is not positive definite"));
        }
        Ok(())
    }

    #[inline]
    pub fn n_assets(&self) -> usize {
        self.drift.len()
    }

    #[inline]
    pub fn gamma(&self) -> f64 {
        self.risk_aversion
    }

    /// Covariance entry `a_ij`.
    #[inline]
    pub fn a(&self, i: usize, j: usize) -> f64 {
        self.cov[i * self.n_assets() + j]
    }

    pub fn cov_matrix(&self) -> DMatrix<f64> {
        let n = self.n_assets();
        DMatrix::from_row_slice(n, n, &self.cov)
    }

    /// `(a y, y' a y)`, shared by all three coefficient functions.
    fn quadratic_parts(&self, y: &[f64], ay: &mut [f64]) -> f64 {
        let n = self.n_assets();
        let mut yay = 0.0;
        for i in 0..n {
            let mut s = 0.0;
            for (k, yk) in y.iter().enumerate() {
                s += self.a(i, k) * yk;
            }
            ay[i] = s;
            yay += y[i] * s;
        }
        yay
    }

    /// Second-order coefficient `η(y)`, row-major `N × N`.
    pub fn coeff_eta(&self, y: &[f64]) -> Vec<f64> {
        let n = self.n_assets();
        let mut out = vec![0.0; n * n];
        self.coeff_eta_into(y, &mut out);
        out
    }

    /// `η_ij = y_i y_j (e_i - y)' a (e_j - y)`, written into `out`.
    pub fn coeff_eta_into(&self, y: &[f64], out: &mut [f64]) {
        let n = self.n_assets();
        let mut ay = [0.0; 16];
        let ay = scratch(&mut ay, n);
        let yay = self.quadratic_parts(y, ay);
        for i in 0..n {
            for j in i..n {
                let q = self.a(i, j) - ay[i] - ay[j] + yay;
                let v = y[i] * y[j] * q;
                out[i * n + j] = v;
                out[j * n + i] = v;
            }
        }
    }

    /// First-order coefficient `b(y)`.
    pub fn coeff_b(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_assets()];
        self.coeff_b_into(y, &mut out);
        out
    }

    pub fn coeff_b_into(&self, y: &[f64], out: &mut [f64]) {
        let n = self.n_assets();
        let g = self.gamma();
        let mut ay = [0.0; 16];
        let ay = scratch(&mut ay, n);
        let yay = self.quadratic_parts(y, ay);
        let excess_dot: f64 = y
            .iter()
            .zip(&self.drift)
            .map(|(yk, ak)| yk * (ak - self.rate))
            .sum();
        for i in 0..n {
            let excess = self.drift[i] - self.rate;
            out[i] = (g - 1.0) * y[i] * (ay[i] - yay) + y[i] * (excess - excess_dot);
        }
    }

    /// Zeroth-order coefficient `ϑ(y)`.
    pub fn coeff_vartheta(&self, y: &[f64]) -> f64 {
        let n = self.n_assets();
        let g = self.gamma();
        let mut ay = [0.0; 16];
        let ay = scratch(&mut ay, n);
        let yay = self.quadratic_parts(y, ay);
        let excess_dot: f64 = y
            .iter()
            .zip(&self.drift)
            .map(|(yk, ak)| yk * (ak - self.rate))
            .sum();
        self.discount - g * (self.rate + 0.5 * yay * (g - 1.0) + excess_dot)
    }

    /// Net liquidation wealth of the unit-wealth position `y`:
    /// `1 + Σ min(-μ_i y_i, λ_i y_i)`.
    pub fn liquidation_wealth(&self, y: &[f64]) -> f64 {
        1.0 + y
            .iter()
            .enumerate()
            .map(|(i, &yi)| (-self.sell_cost[i] * yi).min(self.buy_cost[i] * yi))
            .sum::<f64>()
    }

    /// Membership of the unit-wealth solvency section `Θᴺ`.
    pub fn in_domain(&self, y: &[f64]) -> bool {
        self.liquidation_wealth(y) >= 0.0
    }

    /// Power utility `c^γ / γ`.
    pub fn utility(&self, c: f64) -> f64 {
        let g = self.gamma();
        c.powf(g) / g
    }

    /// Terminal condition `γ⁻¹ (1 + Σ min(-μ_i y_i, λ_i y_i))^γ`.
    pub fn terminal_value(&self, y: &[f64]) -> Result<f64> {
        let w = self.liquidation_wealth(y);
        if w < 0.0 {
            return Err(Error::OutOfDomain { point: y.to_vec() });
        }
        Ok(self.utility(w))
    }

    /// Convex dual `U*(ν) = sup_c {U(c) - cν} = ((1-γ)/γ) ν^{γ/(γ-1)}`.
    pub fn dual_utility(&self, nu: f64) -> Result<f64> {
        if !(nu > 0.0) {
            return Err(Error::NonPositiveArgument(nu));
        }
        Ok(dual_utility_unchecked(self.gamma(), nu))
    }

    /// Frictionless optimal fractions `a⁻¹ (α - r e) / (1 - γ)`.
    pub fn merton_proportion(&self) -> Result<Vec<f64>> {
        let n = self.n_assets();
        let excess = DVector::from_iterator(n, self.drift.iter().map(|a| a - self.rate));
        let lu = self.cov_matrix().lu();
        let x = lu.solve(&excess).ok_or(Error::SingularCovariance)?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::SingularCovariance);
        }
        Ok(x.iter().map(|v| v / (1.0 - self.gamma())).collect())
    }

    /// Free-boundary bounds for the single-stock problem.
    pub fn dai_yi_bounds(&self) -> Result<DaiYiBounds> {
        if self.n_assets() != 1 {
            return Err(Error::BoundsUndefined(format!(
                "requires exactly one stock, got {}",
                self.n_assets()
            )));
        }
        let excess = self.drift[0] - self.rate;
        if excess == 0.0 {
            return Err(Error::BoundsUndefined(
                "drift equals the risk-free rate".into(),
            ));
        }
        let (l, m) = (self.buy_cost[0], self.sell_cost[0]);
        let indicator = excess - (1.0 - self.gamma()) * self.a(0, 0);
        let tau = ((1.0 + l) / (1.0 - m)).ln() / excess;
        let y_tilde = -indicator / excess;
        Ok(DaiYiBounds {
            tau,
            y_tilde,
            sell_lower: 1.0 / (1.0 + (1.0 - m) * y_tilde),
            buy_upper: 1.0 / (1.0 + (1.0 + l) * y_tilde),
            leverage_indicator: indicator,
        })
    }

    /// Lifts the reduced value back to `V(x, y)` for a position with cash `x`
    /// and stock holdings `y`; `phi_val` is φ at the scaled point.
    pub fn reconstruct_full_value(&self, x: f64, y: &[f64], phi_val: f64) -> Result<f64> {
        let wealth = x + y.iter().sum::<f64>();
        if !(wealth > 0.0) {
            return Err(Error::NonPositiveWealth(wealth));
        }
        Ok(phi_val * wealth.powf(self.gamma()))
    }

    /// Value of the liquidation boundary condition: `0` for `γ > 0`, and the
    /// finite floor `U(ε_w)` standing in for `-∞` when `γ < 0`.
    pub fn extension_value(&self, eps_wealth: f64) -> f64 {
        if self.gamma() > 0.0 {
            0.0
        } else {
            self.utility(eps_wealth)
        }
    }
}

#[inline]
pub(crate) fn dual_utility_unchecked(gamma: f64, nu: f64) -> f64 {
    (1.0 - gamma) / gamma * nu.powf(gamma / (gamma - 1.0))
}

#[inline]
fn scratch(buf: &mut [f64; 16], n: usize) -> &mut [f64] {
    assert!(n <= buf.len(), "at most 16 stocks are supported");
    &mut buf[..n]
}
