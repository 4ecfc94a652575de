//! Run configuration: TOML schema, experiment presets and command-line
//! overrides.
//!
//! A file may name a `preset`; every key it sets then overrides that preset
//! field by field. Without a preset the `[market]` and `[grid]` sections must
//! be complete.
//!
//! ```toml
//! preset = "test1"
//! solver = "both"
//!
//! [scheme]
//! paths = 10000
//! seed = 7
//!
//! [output]
//! dir = "runs/test1"
//! ```

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{build_grid, GridSpec};
use crate::market::MarketParams;
use crate::mc::SchemeParams;
use crate::solver::SolveOptions;

pub const PRESETS: [&str; 6] = [
    "test1",
    "test2a",
    "test2b",
    "test3a",
    "test3b",
    "merton-smallcost",
];

/// Which solver(s) a run executes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverKind {
    #[default]
    Mc,
    Fd1d,
    Both,
}

impl FromStr for SolverKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mc" => Ok(Self::Mc),
            "fd1d" => Ok(Self::Fd1d),
            "both" => Ok(Self::Both),
            _ => Err(Error::Config(format!(
                "solver: expected one of mc, fd1d, both, got `{s}`"
            ))),
        }
    }
}

impl fmt::Display for SolverKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Mc => "mc",
            Self::Fd1d => "fd1d",
            Self::Both => "both",
        })
    }
}

/// Computational box and spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct GridBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub dy: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputOptions {
    pub dir: PathBuf,
    /// Extra slice times to keep besides the regular ones.
    pub retain_times: Vec<f64>,
    /// Keep every k-th slice; `None` keeps about twenty.
    pub retain_every: Option<usize>,
    /// Write `values_t<k>.csv` per retained slice.
    pub values: bool,
    /// Write `regions_t<k>.csv` per retained slice.
    pub regions: bool,
}

/// Property checks performed after the solve.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CheckOptions {
    /// Tolerance on one-stock boundaries; defaults to two cells.
    pub grid_tol: Option<f64>,
    /// Tolerance on the no-buying window start; defaults to two steps.
    pub time_tol: Option<f64>,
    /// Require no buy nodes inside `[0, 1]ᴺ` at retained slices within this
    /// time of maturity.
    pub no_buy_window: Option<f64>,
    /// Check that the no-trade region brackets the Merton point at this time.
    pub merton_at: Option<f64>,
    pub merton_tol_cells: f64,
}

/// Fully resolved and validated run description.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub preset: Option<String>,
    pub solver: SolverKind,
    pub market: MarketParams,
    pub scheme: SchemeParams,
    /// Skip the projection step (debugging aid).
    pub adjust: bool,
    /// One-sided drift differences in the finite-difference solver.
    pub upwind: bool,
    pub grid: GridBox,
    pub output: OutputOptions,
    pub checks: CheckOptions,
}

/// Either one value for every axis or one per axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PerAxis {
    One(f64),
    Many(Vec<f64>),
}

impl PerAxis {
    fn expand(&self, n: usize, key: &str) -> Result<Vec<f64>> {
        match self {
            Self::One(v) => Ok(vec![*v; n]),
            Self::Many(v) if v.len() == n => Ok(v.clone()),
            Self::Many(v) => Err(Error::Config(format!(
                "{key}: expected {n} entries, got {}",
                v.len()
            ))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub drift: Option<Vec<f64>>,
    /// Covariance `a` as rows.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cov: Option<Vec<Vec<f64>>>,
    /// Volatility `σ` as rows; `a = σσ'`. Exclusive with `cov`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub buy_cost: Option<PerAxis>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sell_cost: Option<PerAxis>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub discount: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub risk_aversion: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemeSection {
    /// Number of time steps; exclusive with `dt`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_steps: Option<usize>,
    /// Target time step, rounded so that it divides the horizon.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub paths: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adjust_tol: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_sweeps: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clamp_eps: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub antithetic: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub common_random_numbers: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adjust: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub upwind: Option<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lo: Option<PerAxis>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hi: Option<PerAxis>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dy: Option<PerAxis>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub retain_times: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub retain_every: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub values: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub regions: Option<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChecksSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid_tol: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub time_tol: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub no_buy_window: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub merton_at: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub merton_tol_cells: Option<f64>,
}

/// On-disk layout of a configuration file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub solver: Option<SolverKind>,
    #[serde(default)]
    pub market: MarketSection,
    #[serde(default)]
    pub scheme: SchemeSection,
    #[serde(default)]
    pub grid: GridSection,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default)]
    pub checks: ChecksSection,
}

/// Values supplied on the command line; each one replaces the config value.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub out_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub paths: Option<usize>,
    pub dt: Option<f64>,
    pub dy: Option<f64>,
    pub solver: Option<SolverKind>,
    pub no_adjust: bool,
}

fn rows(m: &[&[f64]]) -> Vec<Vec<f64>> {
    m.iter().map(|r| r.to_vec()).collect()
}

/// Raw sections of a named preset.
fn preset_file(name: &str) -> Result<ConfigFile> {
    let market =
        |rate: f64, drift: &[f64], cov: Vec<Vec<f64>>, cost: f64, gamma: f64, horizon: f64| {
            MarketSection {
                rate: Some(rate),
                drift: Some(drift.to_vec()),
                cov: Some(cov),
                sigma: None,
                buy_cost: Some(PerAxis::Many(vec![cost; drift.len()])),
                sell_cost: Some(PerAxis::Many(vec![cost; drift.len()])),
                discount: Some(0.1),
                risk_aversion: Some(gamma),
                horizon: Some(horizon),
            }
        };
    let scheme = |n_steps: usize, paths: usize| SchemeSection {
        n_steps: Some(n_steps),
        paths: Some(paths),
        seed: Some(2024),
        ..Default::default()
    };
    let grid = |n: usize, lo: f64, hi: f64, dy: f64| GridSection {
        lo: Some(PerAxis::Many(vec![lo; n])),
        hi: Some(PerAxis::Many(vec![hi; n])),
        dy: Some(PerAxis::Many(vec![dy; n])),
    };
    let near_maturity = OutputSection {
        retain_times: Some(vec![0.9]),
        ..Default::default()
    };
    let no_buy = ChecksSection {
        no_buy_window: Some(0.1),
        ..Default::default()
    };
    let test2 = |a12: f64| ConfigFile {
        market: market(
            0.0,
            &[0.14, 0.12],
            rows(&[&[0.16, a12], &[a12, 0.1225]]),
            0.05,
            0.2,
            1.0,
        ),
        scheme: scheme(50, 2000),
        grid: grid(2, -0.2, 1.6, 0.05),
        output: near_maturity.clone(),
        checks: no_buy.clone(),
        ..Default::default()
    };
    let test3 = |a12: f64, a23: f64, a13: f64| ConfigFile {
        market: market(
            0.07,
            &[0.14, 0.12, 0.1],
            rows(&[&[0.16, a12, a13], &[a12, 0.1225, a23], &[a13, a23, 0.09]]),
            0.1,
            0.2,
            1.0,
        ),
        scheme: scheme(50, 1000),
        grid: grid(3, -0.1, 1.0, 0.1),
        output: near_maturity.clone(),
        checks: no_buy.clone(),
        ..Default::default()
    };
    let mut file = match name {
        "test1" => ConfigFile {
            market: market(0.07, &[0.12], rows(&[&[0.16]]), 0.05, 0.2, 5.0),
            scheme: scheme(250, 5000),
            grid: grid(1, -0.2, 1.2, 0.02),
            output: OutputSection {
                retain_every: Some(5),
                ..Default::default()
            },
            ..Default::default()
        },
        "test2a" => test2(0.028),
        "test2b" => test2(-0.028),
        "test3a" => test3(0.0, 0.0, 0.0),
        "test3b" => test3(0.014, 0.0105, 0.012),
        "merton-smallcost" => ConfigFile {
            market: market(
                0.07,
                &[0.14, 0.12],
                rows(&[&[0.16, 0.0], &[0.0, 0.1225]]),
                1e-6,
                -1.0,
                1.0,
            ),
            scheme: scheme(50, 1000),
            grid: grid(2, 0.0, 0.4, 0.01),
            output: near_maturity,
            checks: ChecksSection {
                merton_at: Some(0.9),
                merton_tol_cells: Some(2.0),
                ..Default::default()
            },
            ..Default::default()
        },
        _ => {
            return Err(Error::Config(format!(
                "preset: unknown preset `{name}` (known: {})",
                PRESETS.join(", ")
            )))
        }
    };
    file.preset = Some(name.to_string());
    Ok(file)
}

/// Fills every field `over` leaves unset from `base`.
fn merge(base: ConfigFile, over: ConfigFile) -> ConfigFile {
    macro_rules! pick {
        ($ty:ident, $sec:ident { $($f:ident),* }) => {
            $ty { $($f: over.$sec.$f.or(base.$sec.$f)),* }
        };
    }
    let (cov, sigma) = if over.market.cov.is_some() || over.market.sigma.is_some() {
        (over.market.cov.clone(), over.market.sigma.clone())
    } else {
        (base.market.cov.clone(), base.market.sigma.clone())
    };
    let (n_steps, dt) = if over.scheme.n_steps.is_some() || over.scheme.dt.is_some() {
        (over.scheme.n_steps, over.scheme.dt)
    } else {
        (base.scheme.n_steps, base.scheme.dt)
    };
    let m = over.market.clone();
    let b = base.market.clone();
    ConfigFile {
        preset: over.preset.or(base.preset),
        solver: over.solver.or(base.solver),
        market: MarketSection {
            rate: m.rate.or(b.rate),
            drift: m.drift.or(b.drift),
            cov,
            sigma,
            buy_cost: m.buy_cost.or(b.buy_cost),
            sell_cost: m.sell_cost.or(b.sell_cost),
            discount: m.discount.or(b.discount),
            risk_aversion: m.risk_aversion.or(b.risk_aversion),
            horizon: m.horizon.or(b.horizon),
        },
        scheme: SchemeSection {
            n_steps,
            dt,
            paths: over.scheme.paths.or(base.scheme.paths),
            seed: over.scheme.seed.or(base.scheme.seed),
            adjust_tol: over.scheme.adjust_tol.or(base.scheme.adjust_tol),
            max_sweeps: over.scheme.max_sweeps.or(base.scheme.max_sweeps),
            clamp_eps: over.scheme.clamp_eps.or(base.scheme.clamp_eps),
            antithetic: over.scheme.antithetic.or(base.scheme.antithetic),
            common_random_numbers: over
                .scheme
                .common_random_numbers
                .or(base.scheme.common_random_numbers),
            adjust: over.scheme.adjust.or(base.scheme.adjust),
            upwind: over.scheme.upwind.or(base.scheme.upwind),
        },
        grid: pick!(GridSection, grid { lo, hi, dy }),
        output: pick!(
            OutputSection,
            output {
                dir,
                retain_times,
                retain_every,
                values,
                regions
            }
        ),
        checks: pick!(
            ChecksSection,
            checks {
                grid_tol,
                time_tol,
                no_buy_window,
                merton_at,
                merton_tol_cells
            }
        ),
    }
}

fn required<T>(v: Option<T>, key: &str) -> Result<T> {
    v.ok_or_else(|| Error::Config(format!("{key}: missing (set it or choose a preset)")))
}

/// Steps of length close to `dt` that divide `horizon` exactly.
fn steps_for(horizon: f64, dt: f64) -> Result<usize> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::Config(format!(
            "scheme.dt: must be positive, got {dt}"
        )));
    }
    Ok(((horizon / dt).round() as usize).max(1))
}

impl ConfigFile {
    /// Parses TOML text; unknown or mistyped keys are reported by name.
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    fn resolve(self) -> Result<RunConfig> {
        let file = match &self.preset {
            Some(name) => merge(preset_file(name)?, self),
            None => self,
        };
        let m = file.market;
        let drift = required(m.drift, "market.drift")?;
        let n = drift.len();
        if n == 0 {
            return Err(Error::Config(
                "market.drift: at least one stock is required".into(),
            ));
        }
        let rate = required(m.rate, "market.rate")?;
        let buy = required(m.buy_cost, "market.buy_cost")?.expand(n, "market.buy_cost")?;
        let sell = required(m.sell_cost, "market.sell_cost")?.expand(n, "market.sell_cost")?;
        let discount = required(m.discount, "market.discount")?;
        let gamma = required(m.risk_aversion, "market.risk_aversion")?;
        let horizon = required(m.horizon, "market.horizon")?;
        let market = match (m.cov, m.sigma) {
            (Some(_), Some(_)) => {
                return Err(Error::Config(
                    "market.sigma: give either `cov` or `sigma`, not both".into(),
                ))
            }
            (Some(cov), None) => {
                MarketParams::new(rate, drift, cov, buy, sell, discount, gamma, horizon)?
            }
            (None, Some(sigma)) => MarketParams::from_volatility(
                rate, drift, sigma, buy, sell, discount, gamma, horizon,
            )?,
            (None, None) => {
                return Err(Error::Config(
                    "market.cov: missing (or give `sigma`)".into(),
                ))
            }
        };

        let s = file.scheme;
        let n_steps = match (s.n_steps, s.dt) {
            (Some(_), Some(_)) => {
                return Err(Error::Config(
                    "scheme.dt: give either `n_steps` or `dt`, not both".into(),
                ))
            }
            (Some(k), None) => k,
            (None, Some(dt)) => steps_for(horizon, dt)?,
            (None, None) => {
                return Err(Error::Config(
                    "scheme.n_steps: missing (or give `dt`)".into(),
                ))
            }
        };
        if n_steps == 0 {
            return Err(Error::Config("scheme.n_steps: must be at least one".into()));
        }
        let defaults = SchemeParams::new(horizon, n_steps, 1, 0);
        let scheme = SchemeParams {
            m_paths: required(s.paths, "scheme.paths")?,
            seed: s.seed.unwrap_or(0),
            adjust_tol: s.adjust_tol.unwrap_or(defaults.adjust_tol),
            max_sweeps: s.max_sweeps.unwrap_or(defaults.max_sweeps),
            clamp_eps: s.clamp_eps.unwrap_or(defaults.clamp_eps),
            antithetic: s.antithetic.unwrap_or(defaults.antithetic),
            common_random_numbers: s
                .common_random_numbers
                .unwrap_or(defaults.common_random_numbers),
            ..defaults
        };

        let g = file.grid;
        let grid = GridBox {
            lo: required(g.lo, "grid.lo")?.expand(n, "grid.lo")?,
            hi: required(g.hi, "grid.hi")?.expand(n, "grid.hi")?,
            dy: required(g.dy, "grid.dy")?.expand(n, "grid.dy")?,
        };
        let o = file.output;
        let output = OutputOptions {
            dir: o.dir.unwrap_or_else(|| PathBuf::from("out")),
            retain_times: o.retain_times.unwrap_or_default(),
            retain_every: o.retain_every,
            values: o.values.unwrap_or(true),
            regions: o.regions.unwrap_or(true),
        };
        let c = file.checks;
        let checks = CheckOptions {
            grid_tol: c.grid_tol,
            time_tol: c.time_tol,
            no_buy_window: c.no_buy_window,
            merton_at: c.merton_at,
            merton_tol_cells: c.merton_tol_cells.unwrap_or(2.0),
        };
        let cfg = RunConfig {
            preset: file.preset,
            solver: file.solver.unwrap_or_default(),
            market,
            scheme,
            adjust: s.adjust.unwrap_or(true),
            upwind: s.upwind.unwrap_or(false),
            grid,
            output,
            checks,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl RunConfig {
    /// Configuration of a named preset.
    pub fn preset(name: &str) -> Result<Self> {
        preset_file(name)?.resolve()
    }

    /// Parses and validates TOML text.
    pub fn from_toml(text: &str) -> Result<Self> {
        ConfigFile::parse(text)?.resolve()
    }

    /// Grid of the configured box.
    pub fn build_grid(&self) -> Result<Arc<GridSpec>> {
        Ok(Arc::new(build_grid(
            &self.market,
            &self.grid.lo,
            &self.grid.hi,
            &self.grid.dy,
        )?))
    }

    /// Solver options: retention schedule (including the Merton check time)
    /// and the projection switch.
    pub fn solve_options(&self) -> SolveOptions {
        let mut retain_times = self.output.retain_times.clone();
        retain_times.extend(self.checks.merton_at);
        SolveOptions {
            retain_times,
            retain_every: self.output.retain_every,
            adjust: self.adjust,
            ..Default::default()
        }
    }

    /// Checks the cross-field invariants; individual parameter sets validate
    /// themselves on construction.
    pub fn validate(&self) -> Result<()> {
        self.market.validate()?;
        self.scheme.validate()?;
        let expected_h = self.market.horizon / self.scheme.n_steps as f64;
        if (self.scheme.h - expected_h).abs() > 1e-12 * expected_h {
            return Err(Error::Config(
                "scheme.dt: step does not divide the horizon".into(),
            ));
        }
        build_grid(&self.market, &self.grid.lo, &self.grid.hi, &self.grid.dy)?;
        if self.solver != SolverKind::Mc && self.market.n_assets() != 1 {
            return Err(Error::Config(format!(
                "solver: the finite-difference solver needs one stock, got {}",
                self.market.n_assets()
            )));
        }
        for &t in &self.output.retain_times {
            if !(0.0..=self.market.horizon).contains(&t) {
                return Err(Error::Config(format!(
                    "output.retain_times: {t} lies outside [0, {}]",
                    self.market.horizon
                )));
            }
        }
        if self.output.retain_every == Some(0) {
            return Err(Error::Config(
                "output.retain_every: must be at least one".into(),
            ));
        }
        let c = &self.checks;
        for (v, key) in [
            (c.grid_tol, "checks.grid_tol"),
            (c.time_tol, "checks.time_tol"),
            (c.no_buy_window, "checks.no_buy_window"),
            (Some(c.merton_tol_cells), "checks.merton_tol_cells"),
        ] {
            if let Some(v) = v {
                if !(v >= 0.0) {
                    return Err(Error::Config(format!(
                        "{key}: must be non-negative, got {v}"
                    )));
                }
            }
        }
        if let Some(t) = c.merton_at {
            if !(0.0..=self.market.horizon).contains(&t) {
                return Err(Error::Config(format!(
                    "checks.merton_at: {t} outside the horizon"
                )));
            }
        }
        Ok(())
    }

    /// Applies command-line values and revalidates.
    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(d) = &o.out_dir {
            self.output.dir = d.clone();
        }
        if let Some(s) = o.seed {
            self.scheme.seed = s;
        }
        if let Some(m) = o.paths {
            self.scheme.m_paths = m;
        }
        if let Some(dt) = o.dt {
            let n = steps_for(self.market.horizon, dt)?;
            self.scheme.n_steps = n;
            self.scheme.h = self.market.horizon / n as f64;
        }
        if let Some(dy) = o.dy {
            self.grid.dy = vec![dy; self.market.n_assets()];
        }
        if let Some(s) = o.solver {
            self.solver = s;
        }
        if o.no_adjust {
            self.adjust = false;
        }
        self.validate()
    }

    /// Complete file form: every field explicit, so the result does not
    /// depend on preset defaults.
    pub fn to_file(&self) -> ConfigFile {
        let p = &self.market;
        let n = p.n_assets();
        let cov = (0..n)
            .map(|i| (0..n).map(|j| p.a(i, j)).collect())
            .collect();
        let s = &self.scheme;
        ConfigFile {
            preset: self.preset.clone(),
            solver: Some(self.solver),
            market: MarketSection {
                rate: Some(p.rate),
                drift: Some(p.drift.clone()),
                cov: Some(cov),
                sigma: None,
                buy_cost: Some(PerAxis::Many(p.buy_cost.clone())),
                sell_cost: Some(PerAxis::Many(p.sell_cost.clone())),
                discount: Some(p.discount),
                risk_aversion: Some(p.risk_aversion),
                horizon: Some(p.horizon),
            },
            scheme: SchemeSection {
                n_steps: Some(s.n_steps),
                dt: None,
                paths: Some(s.m_paths),
                seed: Some(s.seed),
                adjust_tol: Some(s.adjust_tol),
                max_sweeps: Some(s.max_sweeps),
                clamp_eps: Some(s.clamp_eps),
                antithetic: Some(s.antithetic),
                common_random_numbers: Some(s.common_random_numbers),
                adjust: Some(self.adjust),
                upwind: Some(self.upwind),
            },
            grid: GridSection {
                lo: Some(PerAxis::Many(self.grid.lo.clone())),
                hi: Some(PerAxis::Many(self.grid.hi.clone())),
                dy: Some(PerAxis::Many(self.grid.dy.clone())),
            },
            output: OutputSection {
                dir: Some(self.output.dir.clone()),
                retain_times: Some(self.output.retain_times.clone()),
                retain_every: self.output.retain_every,
                values: Some(self.output.values),
                regions: Some(self.output.regions),
            },
            checks: ChecksSection {
                grid_tol: self.checks.grid_tol,
                time_tol: self.checks.time_tol,
                no_buy_window: self.checks.no_buy_window,
                merton_at: self.checks.merton_at,
                merton_tol_cells: Some(self.checks.merton_tol_cells),
            },
        }
    }
}

/// Preset name or path to a TOML file.
pub fn load_config(source: &str) -> Result<RunConfig> {
    if PRESETS.contains(&source) {
        return RunConfig::preset(source);
    }
    let path = Path::new(source);
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config `{}`: {e}", path.display())))?;
    RunConfig::from_toml(&text)
}

/// TOML text that loads back to `cfg`.
pub fn write_config(cfg: &RunConfig) -> Result<String> {
    toml::to_string(&cfg.to_file()).map_err(|e| Error::Config(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn every_preset_round_trips() {
        for name in PRESETS {
            let c = RunConfig::preset(name).unwrap();
            let text = write_config(&c).unwrap();
            assert_eq!(RunConfig::from_toml(&text).unwrap(), c, "{name}\n{text}");
            assert_eq!(load_config(name).unwrap(), c);
        }
    }

    #[test]
    fn test1_preset_matches_published_parameters() {
        let c = RunConfig::preset("test1").unwrap();
        let p = &c.market;
        assert_eq!(p.rate, 0.07);
        assert_eq!(p.drift, vec![0.12]);
        assert_abs_diff_eq!(p.a(0, 0), 0.4 * 0.4, epsilon = 1e-15);
        assert_eq!((p.discount, p.risk_aversion, p.horizon), (0.1, 0.2, 5.0));
        assert_eq!((p.buy_cost[0], p.sell_cost[0]), (0.05, 0.05));
        let b = p.dai_yi_bounds().unwrap();
        assert_abs_diff_eq!(b.tau, 2.002, epsilon = 5e-4);
        assert_abs_diff_eq!(c.scheme.h, 0.02, epsilon = 1e-15);
        assert_eq!(c.scheme.m_paths, 5000);
    }

    #[test]
    fn test2_presets_carry_the_correlation() {
        let a = RunConfig::preset("test2a").unwrap();
        let b = RunConfig::preset("test2b").unwrap();
        assert_eq!(a.market.a(0, 1), 0.028);
        assert_eq!(b.market.a(1, 0), -0.028);
        assert_eq!(a.market.horizon, 1.0);
        assert_eq!(a.market.rate, 0.0);
    }

    #[test]
    fn merton_preset_point() {
        let c = RunConfig::preset("merton-smallcost").unwrap();
        let m = c.market.merton_proportion().unwrap();
        assert_abs_diff_eq!(m[0], 0.21875, epsilon = 1e-12);
        assert_abs_diff_eq!(m[1], 0.20408, epsilon = 1e-5);
    }

    #[test]
    fn file_overrides_preset_fields() {
        let c = RunConfig::from_toml(
            "preset = \"test1\"\nsolver = \"both\"\n[scheme]\npaths = 77\ndt = 0.05\n[market]\ndrift = [0.21]\n",
        )
        .unwrap();
        assert_eq!(c.solver, SolverKind::Both);
        assert_eq!(c.scheme.m_paths, 77);
        assert_eq!(c.scheme.n_steps, 100);
        assert_eq!(c.market.drift, vec![0.21]);
        assert_eq!(c.market.a(0, 0), 0.16);
    }

    #[test]
    fn sigma_input_forms_covariance() {
        let text = r#"
            solver = "mc"
            [market]
            rate = 0.07
            drift = [0.12]
            sigma = [[0.4]]
            buy_cost = 0.05
            sell_cost = 0.05
            discount = 0.1
            risk_aversion = 0.2
            horizon = 5.0
            [scheme]
            dt = 0.1
            paths = 10
            [grid]
            lo = -0.2
            hi = 1.2
            dy = 0.05
        "#;
        let c = RunConfig::from_toml(text).unwrap();
        assert_abs_diff_eq!(c.market.a(0, 0), 0.16, epsilon = 1e-15);
        assert_eq!(c.scheme.n_steps, 50);
        assert_eq!(c.grid.dy, vec![0.05]);
    }

    #[test]
    fn malformed_files_name_the_key() {
        let e = RunConfig::from_toml("preset = \"test1\"\n[scheme]\npathz = 3\n").unwrap_err();
        assert!(e.to_string().contains("pathz"), "{e}");
        let e =
            RunConfig::from_toml("preset = \"test1\"\n[market]\nrate = \"high\"\n").unwrap_err();
        assert!(e.to_string().contains("rate"), "{e}");
        let e = RunConfig::from_toml("[market]\nrate = 0.1\n").unwrap_err();
        assert!(e.to_string().contains("market.drift"), "{e}");
        let e = RunConfig::from_toml("preset = \"test9\"\n").unwrap_err();
        assert!(e.to_string().contains("test9"), "{e}");
        let e = RunConfig::from_toml("preset = \"test1\"\n[market]\nsell_cost = [0.05, 0.05]\n")
            .unwrap_err();
        assert!(e.to_string().contains("market.sell_cost"), "{e}");
        let e = RunConfig::from_toml("preset = \"test1\"\n[market]\nrisk_aversion = 1.5\n")
            .unwrap_err();
        assert!(e.to_string().contains("risk_aversion"), "{e}");
    }

    #[test]
    fn rejects_inconsistent_choices() {
        assert!(RunConfig::from_toml("preset = \"test2a\"\nsolver = \"fd1d\"\n").is_err());
        assert!(
            RunConfig::from_toml("preset = \"test1\"\n[scheme]\ndt = 0.1\nn_steps = 3\n").is_err()
        );
        assert!(
            RunConfig::from_toml("preset = \"test1\"\n[output]\nretain_times = [7.0]\n").is_err()
        );
        assert!(RunConfig::from_toml(
            "preset = \"test1\"\n[market]\nsigma = [[0.4]]\ncov = [[0.16]]\n"
        )
        .is_err());
    }

    #[test]
    fn overrides_replace_values() {
        let mut c = RunConfig::preset("test1").unwrap();
        c.apply(&Overrides {
            out_dir: Some("x".into()),
            seed: Some(9),
            paths: Some(100),
            dt: Some(0.1),
            dy: Some(0.05),
            solver: Some(SolverKind::Fd1d),
            no_adjust: true,
        })
        .unwrap();
        assert_eq!(c.output.dir, PathBuf::from("x"));
        assert_eq!(
            (c.scheme.seed, c.scheme.m_paths, c.scheme.n_steps),
            (9, 100, 50)
        );
        assert_eq!(c.grid.dy, vec![0.05]);
        assert_eq!(c.solver, SolverKind::Fd1d);
        assert!(!c.adjust);
        let mut c = RunConfig::preset("test2a").unwrap();
        assert!(c
            .apply(&Overrides {
                solver: Some(SolverKind::Both),
                ..Default::default()
            })
            .is_err());
    }

    #[test]
    fn rejects_four_stocks() {
        let text = r#"
            [market]
            rate = 0.0
            drift = [0.1, 0.1, 0.1, 0.1]
            cov = [[0.1,0,0,0],[0,0.1,0,0],[0,0,0.1,0],[0,0,0,0.1]]
            buy_cost = 0.01
            sell_cost = 0.01
            discount = 0.1
            risk_aversion = 0.5
            horizon = 1.0
            [scheme]
            n_steps = 10
            paths = 10
            [grid]
            lo = 0.0
            hi = 1.0
            dy = 0.1
        "#;
        let e = RunConfig::from_toml(text).unwrap_err();
        assert!(e.to_string().contains("at most 3"), "{e}");
    }
}
