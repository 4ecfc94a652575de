//! Solves the single-stock preset and prints the free boundaries twice a year.
//!
//! ```text
//! cargo run --release --example test1_boundaries
//! ```

use portfolio_hjb::config::RunConfig;
use portfolio_hjb::solver;

fn main() -> Result<(), portfolio_hjb::error::Error> {
    let cfg = RunConfig::preset("test1")?;
    let p = &cfg.market;
    let bounds = p.dai_yi_bounds()?;
    println!(
        "Merton proportion {:.4}; sell boundary above {:.4}; buy boundary below {:.4}; no buying for the last {:.3} years",
        p.merton_proportion()?[0],
        bounds.sell_lower,
        bounds.buy_upper,
        bounds.tau
    );

    let result = solver::solve(p, &cfg.scheme, cfg.build_grid()?, &cfg.solve_options())?;
    println!("{:>6} {:>8} {:>8}", "t", "buy", "sell");
    for b in result.boundaries.one_d.iter().step_by(25) {
        println!("{:>6.2} {:>8.3} {:>8.3}", b.time, b.buy, b.sell);
    }
    Ok(())
}
