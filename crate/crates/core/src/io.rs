//! Run orchestration and file output.
//!
//! Every file is first written to a staging directory next to the target,
//! which is renamed into place only once everything succeeded. Timing is
//! logged but never written, so identical configurations produce
//! byte-identical output trees.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use crate::config::{write_config, RunConfig, SolverKind};
use crate::error::{Error, Result};
use crate::reference_fd::{self, FdOptions, SliceComparison};
use crate::solver::{self, CheckResult, SolveResult};

/// Process exit statuses.
pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_ABORT: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;

/// What a completed run produced.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub checks: Vec<CheckResult>,
    pub comparison: Vec<SliceComparison>,
}

impl RunSummary {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn exit_code(&self) -> i32 {
        if self.all_passed() {
            EXIT_OK
        } else {
            EXIT_CHECK_FAILED
        }
    }
}

/// Shortest decimal that parses back to the same `f64`.
fn num(v: f64) -> String {
    format!("{v}")
}

fn coord_header(n: usize) -> String {
    (1..=n)
        .map(|i| format!("y{i}"))
        .collect::<Vec<_>>()
        .join(",")
}

fn write_file(dir: &Path, name: &str, body: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    fs::write(&path, body)?;
    Ok(path)
}

/// Per retained slice `values_t<k>.csv` and `regions_t<k>.csv` (active nodes
/// only, `k` the step index), plus `boundaries.csv` for one stock or
/// `boundary_nodes.csv` for several, and `diagnostics.csv`.
pub fn emit_plot_data(
    result: &SolveResult,
    dir: &Path,
    values: bool,
    regions: bool,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let g = &result.grid;
    let n = g.n_dim();
    let head = coord_header(n);
    let mut written = Vec::new();
    for s in &result.slices {
        let mut v = format!("{head},value\n");
        let mut r = format!("{head},region\n");
        for k in (0..g.n_nodes()).filter(|&k| g.is_active(k)) {
            let y: Vec<String> = g.coords(k).into_iter().map(num).collect();
            let y = y.join(",");
            let _ = writeln!(v, "{y},{}", num(s.field.values[k]));
            let _ = writeln!(r, "{y},{}", s.labels.composite(k));
        }
        if values {
            written.push(write_file(dir, &format!("values_t{}.csv", s.step), &v)?);
        }
        if regions {
            written.push(write_file(dir, &format!("regions_t{}.csv", s.step), &r)?);
        }
    }

    if n == 1 {
        let mut b = String::from("step,time,buy,sell,degenerate\n");
        for s in &result.slices {
            if let Some(p) = result.boundaries.one_d.get(s.step) {
                let _ = writeln!(
                    b,
                    "{},{},{},{},{}",
                    s.step,
                    num(p.time),
                    num(p.buy),
                    num(p.sell),
                    p.degenerate
                );
            }
        }
        written.push(write_file(dir, "boundaries.csv", &b)?);
    } else {
        let mut b = format!("step,time,{head}\n");
        for (s, (_, nodes)) in result.slices.iter().zip(&result.boundaries.boundary_nodes) {
            for &k in nodes {
                let y: Vec<String> = g.coords(k).into_iter().map(num).collect();
                let _ = writeln!(b, "{},{},{}", s.step, num(s.time()), y.join(","));
            }
        }
        written.push(write_file(dir, "boundary_nodes.csv", &b)?);
    }

    let mut d = String::from(
        "step,time,clamp_count,monotonicity_ratio,min_value,max_value,\
         sweeps,adjusted,unresolved,converged,worst_violation\n",
    );
    for x in &result.diagnostics {
        let _ = writeln!(
            d,
            "{},{},{},{},{},{},{},{},{},{},{}",
            x.step,
            num(x.time),
            x.clamp_count,
            num(x.monotonicity_ratio),
            num(x.min_value),
            num(x.max_value),
            x.sweep.sweeps,
            x.sweep.adjusted,
            x.sweep.unresolved,
            x.sweep.converged,
            num(x.sweep.worst_violation)
        );
    }
    written.push(write_file(dir, "diagnostics.csv", &d)?);
    Ok(written)
}

/// Property checks configured for the run.
pub fn evaluate_checks(result: &SolveResult, cfg: &RunConfig) -> Result<Vec<CheckResult>> {
    let p = &cfg.market;
    let mut out = Vec::new();
    if result.grid.n_dim() == 1 {
        let grid_tol = cfg.checks.grid_tol.unwrap_or(2.0 * cfg.grid.dy[0]);
        let time_tol = cfg.checks.time_tol.unwrap_or(2.0 * result.h);
        match solver::check_dai_yi(&result.boundaries.one_d, p, grid_tol, time_tol) {
            Ok(c) => out.extend(c),
            Err(Error::BoundsUndefined(why)) => {
                log::info!("boundary bounds not applicable: {why}");
            }
            Err(e) => return Err(e),
        }
    }
    if let Some(w) = cfg.checks.no_buy_window {
        let t_end = result.horizon;
        let worst = result
            .slices
            .iter()
            .filter(|s| s.time() >= t_end - w - 1e-9 && s.time() < t_end - 1e-9)
            .map(|s| solver::buy_nodes_in_box(&s.labels, 0.0, 1.0))
            .max()
            .unwrap_or(0);
        out.push(CheckResult {
            property: "no_buying_in_unit_box_near_maturity".into(),
            pass: worst == 0,
            margin: worst as f64,
        });
    }
    if let Some(t) = cfg.checks.merton_at {
        let merton = p.merton_proportion()?;
        let slice = result
            .slice_near(t)
            .ok_or_else(|| Error::Mismatch("no retained slice".into()))?;
        out.push(solver::check_merton_containment(
            &slice.labels,
            &merton,
            cfg.checks.merton_tol_cells,
        )?);
    }
    Ok(out)
}

/// Human-readable summary of one solve.
fn describe(result: &SolveResult, checks: &[CheckResult], title: &str) -> String {
    let mut s = format!("== {title} ==\n");
    let d = &result.diagnostics;
    let worst = d
        .iter()
        .map(|x| x.sweep.worst_violation)
        .fold(0.0, f64::min);
    let clamps: usize = d.iter().map(|x| x.clamp_count).sum();
    let stalled = d.iter().filter(|x| !x.sweep.converged).count();
    let unresolved: usize = d.iter().map(|x| x.sweep.unresolved).sum();
    let _ = writeln!(
        s,
        "steps: {}  h: {}",
        d.len().saturating_sub(1),
        num(result.h)
    );
    let _ = writeln!(s, "worst relative constraint residual: {}", num(worst));
    let _ = writeln!(s, "consumption clamps: {clamps}  unconverged projections: {stalled}  unresolved traces: {unresolved}");
    let _ = writeln!(s, "retained slices:");
    for sl in &result.slices {
        let nt = (0..result.grid.n_nodes())
            .filter(|&k| sl.labels.is_no_trade(k))
            .count();
        let _ = write!(
            s,
            "  t={} regions={} no_trade_nodes={}",
            num(sl.time()),
            solver::region_count(&sl.labels),
            nt
        );
        if result.grid.n_dim() == 1 {
            if let Some(b) = result.boundaries.one_d.get(sl.step) {
                let _ = write!(s, " buy={} sell={}", num(b.buy), num(b.sell));
            }
        }
        if result.grid.n_dim() == 2 {
            if let Ok(c) = solver::correlation_elongation_sign(&sl.labels) {
                let _ = write!(s, " no_trade_covariance={}", num(c));
            }
        }
        s.push('\n');
    }
    let _ = writeln!(s, "checks:");
    if checks.is_empty() {
        let _ = writeln!(s, "  (none configured)");
    }
    for c in checks {
        let _ = writeln!(
            s,
            "  {} {} (margin {})",
            if c.pass { "PASS" } else { "FAIL" },
            c.property,
            num(c.margin)
        );
    }
    s
}

fn checks_csv(rows: &[(String, &CheckResult)]) -> String {
    let mut s = String::from("solver,property,pass,margin\n");
    for (solver, c) in rows {
        let _ = writeln!(s, "{solver},{},{},{}", c.property, c.pass, num(c.margin));
    }
    s
}

fn compare_csv(rows: &[SliceComparison]) -> String {
    let mut s = String::from("time,max_rel_diff,boundary_offset_cells\n");
    for c in rows {
        let _ = writeln!(
            s,
            "{},{},{}",
            num(c.time),
            num(c.max_rel_diff),
            num(c.boundary_offset_cells)
        );
    }
    s
}

/// Staging directory beside `target`.
fn staging_dir(target: &Path) -> Result<PathBuf> {
    let name = target
        .file_name()
        .ok_or_else(|| Error::Config(format!("output.dir: `{}` has no name", target.display())))?
        .to_string_lossy()
        .into_owned();
    let parent = match target.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    Ok(parent.join(format!(".{name}.partial-{}", std::process::id())))
}

/// Moves the finished staging tree onto `target`, replacing an earlier
/// run's output but never an unrelated directory.
fn publish(staging: &Path, target: &Path) -> Result<()> {
    if target.exists() {
        let ours = target.join("report.txt").exists() || fs::read_dir(target)?.next().is_none();
        if !ours {
            return Err(Error::Io(std::io::Error::new(
                std::io::ErrorKind::AlreadyExists,
                format!(
                    "`{}` exists and does not hold an earlier run; refusing to replace it",
                    target.display()
                ),
            )));
        }
        fs::remove_dir_all(target)?;
    }
    fs::rename(staging, target)?;
    Ok(())
}

fn produce(cfg: &RunConfig, dir: &Path) -> Result<RunSummary> {
    let p = &cfg.market;
    let grid = cfg.build_grid()?;
    let opts = cfg.solve_options();
    let mut rows: Vec<(String, CheckResult)> = Vec::new();
    let mut report = String::new();
    let _ = writeln!(
        report,
        "preset: {}\nsolver: {}\nstocks: {}  active nodes: {}  paths: {}  seed: {}\n",
        cfg.preset.as_deref().unwrap_or("(none)"),
        cfg.solver,
        p.n_assets(),
        grid.n_active(),
        cfg.scheme.m_paths,
        cfg.scheme.seed
    );

    let mut mc = None;
    if matches!(cfg.solver, SolverKind::Mc | SolverKind::Both) {
        let start = Instant::now();
        let r = solver::solve(p, &cfg.scheme, Arc::clone(&grid), &opts)?;
        log::info!("Monte Carlo solve took {:.2?}", start.elapsed());
        emit_plot_data(&r, dir, cfg.output.values, cfg.output.regions)?;
        let checks = evaluate_checks(&r, cfg)?;
        report.push_str(&describe(&r, &checks, "monte carlo"));
        rows.extend(checks.into_iter().map(|c| ("mc".to_string(), c)));
        mc = Some(r);
    }
    let mut fd = None;
    if matches!(cfg.solver, SolverKind::Fd1d | SolverKind::Both) {
        let start = Instant::now();
        let r = reference_fd::solve_fd_1d(
            p,
            &cfg.scheme,
            Arc::clone(&grid),
            &opts,
            FdOptions { upwind: cfg.upwind },
        )?;
        log::info!("finite-difference solve took {:.2?}", start.elapsed());
        emit_plot_data(&r, &dir.join("fd1d"), cfg.output.values, cfg.output.regions)?;
        let checks = evaluate_checks(&r, cfg)?;
        report.push_str(&describe(&r, &checks, "finite difference"));
        rows.extend(checks.into_iter().map(|c| ("fd1d".to_string(), c)));
        fd = Some(r);
    }
    let mut comparison = Vec::new();
    if let (Some(a), Some(b)) = (&mc, &fd) {
        comparison = reference_fd::compare_fields(a, b)?;
        write_file(dir, "compare.csv", &compare_csv(&comparison))?;
        let _ = writeln!(report, "== comparison ==");
        if let Some(c) = comparison.first() {
            let _ = writeln!(
                report,
                "t=0 max relative difference: {}",
                num(c.max_rel_diff)
            );
        }
        let worst = comparison
            .iter()
            .map(|c| c.boundary_offset_cells)
            .fold(0.0, f64::max);
        let _ = writeln!(report, "largest boundary offset (cells): {}", num(worst));
    }

    let refs: Vec<(String, &CheckResult)> = rows.iter().map(|(s, c)| (s.clone(), c)).collect();
    write_file(dir, "checks.csv", &checks_csv(&refs))?;
    let mut stored = cfg.clone();
    stored.output.dir = PathBuf::from(".");
    write_file(dir, "config.toml", &write_config(&stored)?)?;
    let summary = RunSummary {
        out_dir: cfg.output.dir.clone(),
        checks: rows.into_iter().map(|(_, c)| c).collect(),
        comparison,
    };
    let _ = writeln!(
        report,
        "\nresult: {}",
        if summary.all_passed() {
            "all checks passed"
        } else {
            "some checks FAILED"
        }
    );
    write_file(dir, "report.txt", &report)?;
    Ok(summary)
}

/// Solves, writes every output file and publishes the directory atomically.
/// On error nothing is left behind.
pub fn run(cfg: &RunConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let target = cfg.output.dir.clone();
    let staging = staging_dir(&target)?;
    if staging.exists() {
        fs::remove_dir_all(&staging)?;
    }
    fs::create_dir_all(&staging).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("cannot create `{}`: {e}", staging.display()),
        ))
    })?;
    let outcome = produce(cfg, &staging).and_then(|s| publish(&staging, &target).map(|_| s));
    if outcome.is_err() && staging.exists() {
        let _ = fs::remove_dir_all(&staging);
    }
    outcome
}
