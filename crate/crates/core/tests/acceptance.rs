//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits with a
//! non-zero status when any criterion fails.
//!
//! Runs with `cargo test --test acceptance`; the full suite takes a couple of
//! minutes on one core.

#![allow(clippy::needless_range_loop)]

use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use portfolio_hjb::config::RunConfig;
use portfolio_hjb::exec::{self, Parallelism};
use portfolio_hjb::grid::{build_grid, ValueField};
use portfolio_hjb::market::MarketParams;
use portfolio_hjb::mc::{euler_step, SchemeParams};
use portfolio_hjb::obstacle::{constraint_buy, constraint_sell};
use portfolio_hjb::reference_fd::{compare_fields, solve_fd_1d, FdOptions};
use portfolio_hjb::rng::node_stream;
use portfolio_hjb::solver::{
    self, buy_nodes_in_box, check_dai_yi, check_merton_containment, correlation_elongation_sign,
    region_count, SolveOptions, SolveResult,
};
use rand::Rng;
use rand_distr::StandardNormal;

/// Outcome of one criterion: overall verdict plus the measurements behind it.
struct Verdict {
    pass: bool,
    detail: Vec<String>,
}

impl Verdict {
    fn new() -> Self {
        Self {
            pass: true,
            detail: Vec::new(),
        }
    }

    fn record(&mut self, ok: bool, what: String) {
        self.pass &= ok;
        self.detail
            .push(format!("{}{what}", if ok { "" } else { "FAILED " }));
    }
}

/// Solver run of a preset, with a label and its projection tolerance.
struct Run {
    name: String,
    cfg: RunConfig,
    result: SolveResult,
}

fn solve_preset(name: &str, cfg: RunConfig, opts: &SolveOptions) -> Run {
    let start = Instant::now();
    let grid = cfg.build_grid().expect("preset grid");
    let result = solver::solve(&cfg.market, &cfg.scheme, grid, opts).expect("solve");
    eprintln!("  {name}: solved in {:.1?}", start.elapsed());
    Run {
        name: name.to_string(),
        cfg,
        result,
    }
}

fn test1_with_drift(alpha: f64) -> RunConfig {
    let mut cfg = RunConfig::preset("test1").unwrap();
    cfg.market.drift = vec![alpha];
    cfg.market.validate().unwrap();
    cfg
}

/// Criterion 1: theoretical boundary properties on the single-stock run.
fn dai_yi(run: &Run) -> Verdict {
    let mut v = Verdict::new();
    let checks = check_dai_yi(&run.result.boundaries.one_d, &run.cfg.market, 0.04, 0.04).unwrap();
    for c in checks {
        v.record(c.pass, format!("{} margin={:.4}", c.property, c.margin));
    }
    v
}

/// Criterion 2: the Monte Carlo solve against the finite-difference oracle.
fn oracle_equivalence(mc: &Run) -> Verdict {
    let mut v = Verdict::new();
    let start = Instant::now();
    let fd = solve_fd_1d(
        &mc.cfg.market,
        &mc.cfg.scheme,
        Arc::clone(&mc.result.grid),
        &mc.cfg.solve_options(),
        FdOptions::default(),
    )
    .unwrap();
    eprintln!(
        "  test1 finite differences: solved in {:.1?}",
        start.elapsed()
    );
    let rows = compare_fields(&mc.result, &fd).unwrap();
    let at_zero = rows.iter().find(|r| r.time.abs() < 1e-12).unwrap();
    v.record(
        at_zero.max_rel_diff <= 0.02,
        format!("max_rel_diff(t=0)={:.2e}", at_zero.max_rel_diff),
    );
    let worst = rows
        .iter()
        .map(|r| r.boundary_offset_cells)
        .fold(0.0, f64::max);
    v.record(
        worst <= 2.0,
        format!(
            "max boundary offset={worst} cells over {} slices",
            rows.len()
        ),
    );
    v
}

/// Criterion 3: region topology, no buying near maturity and the sign of
/// the no-trade region's tilt for both correlation signs.
fn topology(a: &Run, b: &Run) -> Verdict {
    let mut v = Verdict::new();
    for (run, want_positive) in [(a, true), (b, false)] {
        let r = &run.result;
        let horizon = run.cfg.market.horizon;
        let slice = r.slice_near(0.9).unwrap();
        let regions = region_count(&slice.labels);
        v.record(
            regions == 9,
            format!("{} regions(t={:.2})={regions}", run.name, slice.time()),
        );
        let buys: usize = r
            .slices
            .iter()
            .filter(|s| s.time() >= horizon - 0.1 - 1e-9 && s.time() < horizon - 1e-9)
            .map(|s| buy_nodes_in_box(&s.labels, 0.0, 1.0))
            .sum();
        v.record(
            buys == 0,
            format!("{} buys in [0,1]² near maturity={buys}", run.name),
        );
        let cov = correlation_elongation_sign(&slice.labels).unwrap();
        let ok = if want_positive { cov > 0.0 } else { cov < 0.0 };
        v.record(
            ok,
            format!(
                "{} elongation={cov:+.4} (want {})",
                run.name,
                if want_positive { "> 0" } else { "< 0" }
            ),
        );
    }
    v
}

/// Criterion 4: the Merton point sits inside the no-trade region for tiny
/// costs.
fn merton(run: &Run) -> Verdict {
    let mut v = Verdict::new();
    let pi = run.cfg.market.merton_proportion().unwrap();
    let expected = [0.21875, 0.20408];
    let close = pi.iter().zip(expected).all(|(a, b)| (a - b).abs() < 5e-5);
    v.record(close, format!("merton=({:.5}, {:.5})", pi[0], pi[1]));
    let slice = run.result.slice_near(0.9).unwrap();
    let c = check_merton_containment(&slice.labels, &pi, 2.0).unwrap();
    v.record(
        c.pass,
        format!(
            "containment(t={:.2}) margin={:.3} cells",
            slice.time(),
            c.margin
        ),
    );
    v
}

/// Random quadratic in `n` variables: `c + g·y + yᵀ A y` with its gradient and
/// mixed second derivatives.
struct Quadratic {
    c: f64,
    g: Vec<f64>,
    a: Vec<Vec<f64>>,
}

impl Quadratic {
    fn random(n: usize, rng: &mut impl Rng) -> Self {
        let mut a = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in i..n {
                let x = rng.random_range(-2.0..2.0);
                a[i][j] = x;
                a[j][i] = x;
            }
        }
        Self {
            c: rng.random_range(-1.0..1.0),
            g: (0..n).map(|_| rng.random_range(-3.0..3.0)).collect(),
            a,
        }
    }

    fn eval(&self, y: &[f64]) -> f64 {
        let n = y.len();
        let mut s = self.c;
        for i in 0..n {
            s += self.g[i] * y[i];
            for j in 0..n {
                s += self.a[i][j] * y[i] * y[j];
            }
        }
        s
    }

    fn grad(&self, y: &[f64], i: usize) -> f64 {
        self.g[i] + 2.0 * (0..y.len()).map(|j| self.a[i][j] * y[j]).sum::<f64>()
    }
}

/// Market with negligible costs, so every node of `[0, 0.5]ᴺ` is active.
fn tiny_cost_market(n: usize) -> MarketParams {
    let mut cov = vec![vec![0.0; n]; n];
    for (i, row) in cov.iter_mut().enumerate() {
        row[i] = 0.1;
    }
    MarketParams::new(
        0.03,
        vec![0.08; n],
        cov,
        vec![1e-6; n],
        vec![1e-6; n],
        0.1,
        0.5,
        1.0,
    )
    .unwrap()
}

fn rel_err(got: f64, want: f64) -> f64 {
    (got - want).abs() / want.abs().max(1.0)
}

/// Centred differences reproduce the gradient and mixed derivatives of
/// quadratics; interpolation reproduces multilinear functions.
fn stencil_and_interpolation(v: &mut Verdict) {
    let mut rng = node_stream(2024, 0, 0);
    let mut worst_stencil = 0.0f64;
    let mut worst_interp = 0.0f64;
    for trial in 0..30 {
        let n = 1 + trial % 3;
        let p = tiny_cost_market(n);
        let dy: Vec<f64> = (0..n).map(|_| rng.random_range(0.04..0.12)).collect();
        let grid = Arc::new(build_grid(&p, &vec![0.0; n], &vec![0.5; n], &dy).unwrap());

        let q = Quadratic::random(n, &mut rng);
        let f = ValueField::from_fn(Arc::clone(&grid), 0.0, Parallelism::Sequential, |y| {
            q.eval(y)
        });
        for k in (0..grid.n_nodes()).filter(|&k| grid.has_full_stencil(k)) {
            let y = grid.coords(k);
            for i in 0..n {
                worst_stencil = worst_stencil.max(rel_err(f.grad_at(k)[i], q.grad(&y, i)));
                for j in (0..n).filter(|&j| j != i) {
                    worst_stencil =
                        worst_stencil.max(rel_err(f.cross_at(k, i, j), 2.0 * q.a[i][j]));
                }
            }
        }

        // Multilinear: sum over subsets of coordinates with random weights.
        let w: Vec<f64> = (0..1usize << n)
            .map(|_| rng.random_range(-2.0..2.0))
            .collect();
        let ml = |y: &[f64]| {
            (0..1usize << n)
                .map(|s| {
                    w[s] * (0..n)
                        .filter(|i| (s >> i) & 1 == 1)
                        .map(|i| y[i])
                        .product::<f64>()
                })
                .sum::<f64>()
        };
        let f = ValueField::from_fn(Arc::clone(&grid), 0.0, Parallelism::Sequential, ml);
        for _ in 0..50 {
            let y: Vec<f64> = (0..n).map(|i| rng.random_range(0.0..grid.hi[i])).collect();
            worst_interp = worst_interp.max(rel_err(f.value_at(&y), ml(&y)));
        }
    }
    v.record(
        worst_stencil <= 1e-10,
        format!("stencil rel err={worst_stencil:.1e}"),
    );
    v.record(
        worst_interp <= 1e-10,
        format!("interpolation rel err={worst_interp:.1e}"),
    );
}

/// The terminal slice satisfies the sell equality where it holds long
/// positions and the buy equality where it holds short positions.
fn terminal_equalities(v: &mut Verdict) {
    let mut worst_ratio = 0.0f64;
    for name in ["test1", "test2a"] {
        let cfg = RunConfig::preset(name).unwrap();
        let p = &cfg.market;
        let grid = cfg.build_grid().unwrap();
        let t = solver::terminal_slice(p, Arc::clone(&grid), Parallelism::Sequential);
        for k in (0..grid.n_nodes()).filter(|&k| grid.has_full_stencil(k)) {
            let y = grid.coords(k);
            for i in 0..p.n_assets() {
                let dy = grid.dy[i];
                // The centred stencil must stay on one side of the kink at 0.
                let c = if y[i] >= dy - 1e-12 {
                    constraint_sell(&t, k, i, p)
                } else if y[i] <= -dy + 1e-12 {
                    constraint_buy(&t, k, i, p)
                } else {
                    continue;
                };
                worst_ratio = worst_ratio.max(c.abs() / (5.0 * dy));
            }
        }
    }
    v.record(
        worst_ratio < 1.0,
        format!("terminal |constraint|/(5Δy) max={worst_ratio:.3}"),
    );
}

/// Euler increments have mean `b h` and variance `diag(η) h`.
fn euler_moments(v: &mut Verdict) {
    let cfg = RunConfig::preset("test2a").unwrap();
    let p = &cfg.market;
    let h = 0.02;
    let m = 20_000;
    let mut rng = node_stream(99, 0, 0);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let y = loop {
            let y = vec![rng.random_range(-0.2..1.2), rng.random_range(-0.2..1.2)];
            if p.in_domain(&y) {
                break y;
            }
        };
        let b = p.coeff_b(&y);
        let eta = p.coeff_eta(&y);
        let draws: Vec<Vec<f64>> = (0..m)
            .map(|_| {
                let z = [rng.sample(StandardNormal), rng.sample(StandardNormal)];
                euler_step(&y, h, p, &z).unwrap()
            })
            .collect();
        for i in 0..2 {
            let inc: Vec<f64> = draws.iter().map(|x| x[i] - y[i]).collect();
            let mean = inc.iter().sum::<f64>() / m as f64;
            let var = inc.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (m - 1) as f64;
            let true_var = eta[i * 2 + i] * h;
            let se_mean = (true_var / m as f64).sqrt();
            let se_var = true_var * (2.0 / (m - 1) as f64).sqrt();
            worst = worst
                .max((mean - b[i] * h).abs() / se_mean)
                .max((var - true_var).abs() / se_var);
        }
    }
    v.record(
        worst <= 3.0,
        format!("Euler moments max deviation={worst:.2} SE"),
    );
}

/// Reduced runs under different executors must agree to the last bit.
fn worker_independence(v: &mut Verdict) {
    for (name, paths) in [("test1", 200), ("test2a", 2000)] {
        let mut cfg = RunConfig::preset(name).unwrap();
        cfg.scheme = SchemeParams::new(cfg.market.horizon, 10, paths, 11);
        let grid = cfg.build_grid().unwrap();
        let run = |par: Parallelism| {
            let opts = SolveOptions {
                par,
                retain_every: Some(1),
                ..Default::default()
            };
            solver::solve(&cfg.market, &cfg.scheme, Arc::clone(&grid), &opts).unwrap()
        };
        let base = run(Parallelism::Sequential);
        let others = [
            exec::with_threads(1, || run(Parallelism::Parallel)),
            exec::with_threads(3, || run(Parallelism::Parallel)),
            exec::with_threads(8, || run(Parallelism::Parallel)),
        ];
        let identical = others.iter().all(|o| {
            o.slices.len() == base.slices.len()
                && o.slices.iter().zip(&base.slices).all(|(a, b)| {
                    a.field.values.iter().map(|x| x.to_bits()).eq(b
                        .field
                        .values
                        .iter()
                        .map(|x| x.to_bits()))
                        && (0..a.field.grid.n_nodes())
                            .all(|k| a.labels.node_labels(k) == b.labels.node_labels(k))
                })
                && o.boundaries.one_d == base.boundaries.one_d
                && o.boundaries.boundary_nodes == base.boundaries.boundary_nodes
                && o.boundaries.checks == base.boundaries.checks
        });
        v.record(
            identical,
            format!("{name} bit-identical over 1/3/8 workers and sequential"),
        );
    }
}

/// Criterion 5: property suites, plus the post-projection residual over
/// every slice of every full-scale run of this suite.
fn properties(runs: &[&Run]) -> Verdict {
    let mut v = Verdict::new();
    stencil_and_interpolation(&mut v);
    terminal_equalities(&mut v);
    for run in runs {
        let tol = run.cfg.scheme.adjust_tol;
        let worst = run
            .result
            .diagnostics
            .iter()
            .map(|d| d.sweep.worst_violation)
            .fold(0.0, f64::min);
        v.record(
            worst >= -tol,
            format!(
                "{} post-sweep residual={worst:.2e} (≥ -{tol:.0e})",
                run.name
            ),
        );
    }
    euler_moments(&mut v);
    worker_independence(&mut v);
    v
}

/// Criterion 6: the sell boundary crosses 1 exactly when leverage pays.
fn leverage(above: &Run, at: &Run) -> Verdict {
    let mut v = Verdict::new();
    let horizon = above.cfg.market.horizon;
    let before_end = |r: &Run| {
        r.result
            .boundaries
            .one_d
            .iter()
            .filter(|b| b.time < horizon - 1e-9)
            .map(|b| b.sell)
            .collect::<Vec<_>>()
    };
    let max_sell = before_end(above)
        .into_iter()
        .fold(f64::NEG_INFINITY, f64::max);
    v.record(max_sell > 1.0, format!("alpha=0.21 max S={max_sell:.3}"));
    let dy = at.cfg.grid.dy[0];
    let worst = before_end(at)
        .into_iter()
        .map(|s| (s - 1.0).abs() / dy)
        .fold(0.0, f64::max);
    v.record(
        worst <= 2.0,
        format!("alpha=0.198 max |S-1|={worst:.2} cells"),
    );
    v
}

fn main() -> ExitCode {
    let started = Instant::now();
    eprintln!("running acceptance solves");

    let t1_cfg = RunConfig::preset("test1").unwrap();
    let t1_opts = t1_cfg.solve_options();
    let test1 = solve_preset("test1", t1_cfg, &t1_opts);

    let every_step = |name: &str| {
        let cfg = RunConfig::preset(name).unwrap();
        let opts = SolveOptions {
            retain_every: Some(1),
            ..cfg.solve_options()
        };
        solve_preset(name, cfg, &opts)
    };
    let test2a = every_step("test2a");
    let test2b = every_step("test2b");

    let m_cfg = RunConfig::preset("merton-smallcost").unwrap();
    let m_opts = m_cfg.solve_options();
    let smallcost = solve_preset("merton-smallcost", m_cfg, &m_opts);

    let lev_cfg = test1_with_drift(0.21);
    let lev_opts = lev_cfg.solve_options();
    let lev = solve_preset("test1 alpha=0.21", lev_cfg, &lev_opts);
    let edge_cfg = test1_with_drift(0.198);
    let edge_opts = edge_cfg.solve_options();
    let edge = solve_preset("test1 alpha=0.198", edge_cfg, &edge_opts);

    let verdicts = [
        (1, "single-stock boundary properties", dai_yi(&test1)),
        (
            2,
            "Monte Carlo vs finite-difference oracle",
            oracle_equivalence(&test1),
        ),
        (3, "two-stock region topology", topology(&test2a, &test2b)),
        (
            4,
            "Merton point inside the no-trade region",
            merton(&smallcost),
        ),
        (
            5,
            "property suites",
            properties(&[&test1, &test2a, &test2b, &smallcost, &lev, &edge]),
        ),
        (6, "leverage trichotomy", leverage(&lev, &edge)),
    ];

    println!();
    let mut all = true;
    for (id, title, v) in &verdicts {
        all &= v.pass;
        println!(
            "{} criterion {id} ({title}): {}",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail.join("; ")
        );
    }
    println!(
        "acceptance: {}/{} criteria passed in {:.0?}",
        verdicts.iter().filter(|v| v.2.pass).count(),
        verdicts.len(),
        started.elapsed()
    );
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
