//! Randomized properties of the building blocks.

#![allow(clippy::needless_range_loop)]

use std::sync::Arc;

use portfolio_hjb::config::{Overrides, RunConfig, PRESETS};
use portfolio_hjb::exec::Parallelism;
use portfolio_hjb::grid::{build_grid, ValueField};
use portfolio_hjb::market::MarketParams;
use portfolio_hjb::mc::euler_step;
use portfolio_hjb::obstacle::{adjust_value, characteristic_point, TradeDirection};
use portfolio_hjb::reference_fd::Tridiag;
use proptest::prelude::*;

fn market(n: usize, cost: f64, gamma: f64) -> MarketParams {
    let mut cov = vec![vec![0.0; n]; n];
    for (i, row) in cov.iter_mut().enumerate() {
        for (j, c) in row.iter_mut().enumerate() {
            *c = if i == j { 0.12 } else { 0.02 };
        }
    }
    MarketParams::new(
        0.03,
        vec![0.09; n],
        cov,
        vec![cost; n],
        vec![cost; n],
        0.1,
        gamma,
        1.0,
    )
    .unwrap()
}

fn gamma() -> impl Strategy<Value = f64> {
    prop_oneof![-2.0..-0.1f64, 0.1..0.9f64]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn interpolation_reproduces_multilinear_functions(
        n in 1usize..=3,
        dy in 0.03..0.2f64,
        w in prop::collection::vec(-3.0..3.0f64, 8),
        u in prop::collection::vec(0.0..1.0f64, 3),
    ) {
        let p = market(n, 1e-6, 0.5);
        let grid = Arc::new(build_grid(&p, &vec![0.0; n], &vec![0.6; n], &vec![dy; n]).unwrap());
        let g = |y: &[f64]| {
            (0..1usize << n)
                .map(|s| w[s] * (0..n).filter(|i| (s >> i) & 1 == 1).map(|i| y[i]).product::<f64>())
                .sum::<f64>()
        };
        let f = ValueField::from_fn(Arc::clone(&grid), 0.0, Parallelism::Sequential, g);
        let y: Vec<f64> = (0..n).map(|i| u[i] * grid.hi[i]).collect();
        let want = g(&y);
        prop_assert!((f.value_at(&y) - want).abs() <= 1e-10 * want.abs().max(1.0));
    }

    #[test]
    fn stencils_are_exact_on_quadratics(
        n in 2usize..=3,
        dy in 0.03..0.2f64,
        c in prop::collection::vec(-2.0..2.0f64, 9),
        lin in prop::collection::vec(-2.0..2.0f64, 3),
    ) {
        let p = market(n, 1e-6, 0.5);
        let grid = Arc::new(build_grid(&p, &vec![0.0; n], &vec![0.6; n], &vec![dy; n]).unwrap());
        let a = |i: usize, j: usize| c[i.min(j) * 3 + i.max(j)];
        let q = |y: &[f64]| {
            let mut s = 0.0;
            for i in 0..n {
                s += lin[i] * y[i];
                for j in 0..n {
                    s += a(i, j) * y[i] * y[j];
                }
            }
            s
        };
        let f = ValueField::from_fn(Arc::clone(&grid), 0.0, Parallelism::Sequential, q);
        for k in (0..grid.n_nodes()).filter(|&k| grid.has_full_stencil(k)) {
            let y = grid.coords(k);
            for i in 0..n {
                let gi = lin[i] + 2.0 * (0..n).map(|j| a(i, j) * y[j]).sum::<f64>();
                prop_assert!((f.first_derivative(i, k) - gi).abs() <= 1e-10 * gi.abs().max(1.0));
                for j in (0..n).filter(|&j| j != i) {
                    let want = 2.0 * a(i, j);
                    let got = f.cross_derivative(i, j, k).unwrap();
                    prop_assert!((got - want).abs() <= 1e-10 * want.abs().max(1.0));
                }
            }
        }
    }

    /// Trading and then holding scales a constant value function by the
    /// post-trade wealth raised to γ.
    #[test]
    fn adjustment_scales_by_post_trade_wealth(
        y0 in -0.3..0.9f64,
        y1 in -0.3..0.9f64,
        delta in 0.0..0.4f64,
        cost in 0.001..0.1f64,
        g in gamma(),
        pattern in 0usize..8,
    ) {
        let p = market(2, cost, g);
        let y = [y0, y1];
        prop_assume!(p.in_domain(&y));
        let dir = match pattern {
            0 => TradeDirection::buy_only(2, 0),
            1 => TradeDirection::sell_only(2, 1),
            2 => TradeDirection::new(vec![true, false], vec![false, true]).unwrap(),
            3 => TradeDirection::new(vec![false, true], vec![true, false]).unwrap(),
            4 => TradeDirection::new(vec![true, true], vec![false, false]).unwrap(),
            5 => TradeDirection::new(vec![false, false], vec![true, true]).unwrap(),
            6 => TradeDirection::buy_only(2, 1),
            _ => TradeDirection::sell_only(2, 0),
        };
        let traded = (0..2).filter(|&i| dir.buy[i] || dir.sell[i]).count() as f64;
        let wealth = 1.0 - delta * cost * traded;
        let y_bar = characteristic_point(&y, &dir, delta, &p).unwrap();
        let grid = Arc::new(build_grid(&p, &[-1.0, -1.0], &[2.0, 2.0], &[0.1, 0.1]).unwrap());
        let f = ValueField::from_fn(grid, 0.0, Parallelism::Sequential, |_| 1.0 / g);
        let v = adjust_value(&y, &y_bar, &dir, &f, &p).unwrap();
        let want = wealth.powf(g) / g;
        prop_assert!((v - want).abs() <= 1e-12 * want.abs());
    }

    /// Reducing a position before liquidating costs the same as liquidating
    /// it outright.
    #[test]
    fn partial_liquidation_preserves_liquidation_value(
        y0 in 0.0..1.5f64,
        y1 in -0.8..0.0f64,
        frac in 0.0..1.0f64,
        cost in 0.001..0.1f64,
    ) {
        let p = market(2, cost, 0.5);
        let y = [y0, y1];
        prop_assume!(p.liquidation_wealth(&y) > 0.0);
        let sell = TradeDirection::sell_only(2, 0);
        let y_bar = characteristic_point(&y, &sell, frac * y0, &p).unwrap();
        let w = 1.0 - frac * y0 * cost;
        prop_assert!((w * p.liquidation_wealth(&y_bar) - p.liquidation_wealth(&y)).abs() < 1e-12);

        let cover = TradeDirection::buy_only(2, 1);
        let y_bar = characteristic_point(&y, &cover, -frac * y1, &p).unwrap();
        let w = 1.0 + frac * y1 * cost;
        prop_assert!((w * p.liquidation_wealth(&y_bar) - p.liquidation_wealth(&y)).abs() < 1e-12);
    }

    #[test]
    fn dual_utility_is_the_supremum(
        g in gamma(),
        nu in 0.05..5.0f64,
        c in 0.01..10.0f64,
    ) {
        let p = market(1, 0.01, g);
        let dual = p.dual_utility(nu).unwrap();
        prop_assert!(dual >= p.utility(c) - c * nu - 1e-12 * dual.abs().max(1.0));
        let c_star = nu.powf(1.0 / (g - 1.0));
        prop_assert!((dual - (p.utility(c_star) - c_star * nu)).abs() <= 1e-10 * dual.abs().max(1.0));
    }

    #[test]
    fn euler_step_without_noise_is_the_drift(
        y0 in -0.1..0.9f64,
        y1 in -0.1..0.9f64,
        h in 0.001..0.1f64,
    ) {
        let p = market(2, 0.02, 0.3);
        let y = [y0, y1];
        let b = p.coeff_b(&y);
        let next = euler_step(&y, h, &p, &[0.0, 0.0]).unwrap();
        for i in 0..2 {
            prop_assert!((next[i] - (y[i] + b[i] * h)).abs() < 1e-15);
        }
    }

    #[test]
    fn thomas_inverts_dominant_systems(
        n in 1usize..40,
        seed in prop::collection::vec((-1.0..1.0f64, -1.0..1.0f64, 0.1..2.0f64, -5.0..5.0f64), 40),
    ) {
        let seed = &seed[..n];
        let sub: Vec<f64> = seed.iter().enumerate().map(|(i, s)| if i == 0 { 0.0 } else { s.0 }).collect();
        let sup: Vec<f64> = seed.iter().enumerate().map(|(i, s)| if i + 1 == n { 0.0 } else { s.1 }).collect();
        let main: Vec<f64> = (0..n).map(|i| sub[i].abs() + sup[i].abs() + seed[i].2).collect();
        let rhs: Vec<f64> = seed.iter().map(|s| s.3).collect();
        let m = Tridiag::new(sub, main, sup).unwrap();
        prop_assert!(m.is_diagonally_dominant());
        let x = m.solve(&rhs).unwrap();
        for (got, want) in m.apply(&x).iter().zip(&rhs) {
            prop_assert!((got - want).abs() < 1e-10 * want.abs().max(1.0));
        }
    }

    #[test]
    fn overridden_configs_round_trip(
        which in 0usize..PRESETS.len(),
        seed in any::<u64>(),
        paths in 1usize..100_000,
        steps in 1usize..400,
    ) {
        let mut cfg = RunConfig::preset(PRESETS[which]).unwrap();
        let dt = cfg.market.horizon / steps as f64;
        cfg.apply(&Overrides { seed: Some(seed), paths: Some(paths), dt: Some(dt), ..Default::default() }).unwrap();
        prop_assert_eq!(cfg.scheme.n_steps, steps);
        let text = portfolio_hjb::config::write_config(&cfg).unwrap();
        let back = RunConfig::from_toml(&text).unwrap();
        prop_assert_eq!(back, cfg);
    }
}
