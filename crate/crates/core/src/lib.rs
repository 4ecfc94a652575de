//! Finite-horizon investment and consumption with proportional transaction
//! costs.
//!
//! The value function of a CRRA investor trading `N ≤ 3` stocks reduces to a
//! function `φ(y, t)` of the risky-asset fractions `y`. It solves a fully
//! nonlinear parabolic equation constrained above and below by the buy and
//! sell gradient constraints. This crate computes `φ` backward in time on a
//! tensor grid:
//!
//! 1. [`mc::pde_step`] advances one slice with a Monte Carlo estimate of the
//!    conditional expectations (Euler step with diagonal noise, centred
//!    differences for the mixed terms, explicit consumption);
//! 2. [`obstacle::sweep_adjust`] labels every node as buy, sell or no-trade
//!    per stock and projects violating nodes along their trade curves onto the
//!    no-trade region;
//! 3. [`solver::solve`] repeats both steps from the terminal liquidation value
//!    and extracts free boundaries, region maps and property checks.
//!
//! [`reference_fd`] holds an implicit finite-difference solver for one stock
//! that shares the projection and serves as an oracle. [`config`] and [`io`]
//! provide the TOML schema, experiment presets and the output writer used by
//! the `portfolio-hjb` binary.
//!
//! Node loops run on rayon with the default `parallel` feature; every node
//! draws from its own counter-based stream ([`rng::node_stream`]), so results
//! are bit-identical for any number of worker threads and without the feature.
//!
//! ```no_run
//! use portfolio_hjb::{config::RunConfig, solver};
//!
//! let cfg = RunConfig::preset("test1")?;
//! let result = solver::solve(&cfg.market, &cfg.scheme, cfg.build_grid()?, &cfg.solve_options())?;
//! for b in &result.boundaries.one_d {
//!     println!("t={:.2} buy={:.3} sell={:.3}", b.time, b.buy, b.sell);
//! }
//! # Ok::<(), portfolio_hjb::error::Error>(())
//! ```

// `!(x > 0.0)` rejects NaN along with non-positive values; numerical loops
// index several parallel arrays at once.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod config;
pub mod error;
pub mod exec;
pub mod grid;
pub mod io;
pub mod market;
pub mod mc;
pub mod obstacle;
pub mod reference_fd;
pub mod rng;
pub mod solver;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use market::MarketParams;
pub use mc::SchemeParams;
pub use solver::{solve, SolveOptions, SolveResult};
