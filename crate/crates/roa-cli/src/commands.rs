//! Command implementations.

use std::fs;
use std::path::{Path, PathBuf};

use roa_core::cone::SolveStatus;
use roa_core::diffcone::{
    assemble_sensitivity, build_embedding, solution_derivative, solution_metric, solve_dz_lsqr,
    solve_dz_qr,
};
use roa_core::model::{build_decomposition, check_assumptions};
use roa_core::optim::{
    evaluate_along_path, fmt_float, optimize, GradMethod,
    OptimizationTrace,
};
use roa_core::paramdiff::{
    data_derivative_with_base, gradient_analytic, gradient_fd, value_at, DzSolver, FdConfig,
};
use roa_core::roa::{export_grid, mc_volume};
use roa_core::soscomp::{compile, extract_certificate};
use roa_core::{cone, soscomp};
use serde::Serialize;

use crate::config::RunConfig;

pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_SOLVER: i32 = 2;
pub const EXIT_OPTIM: i32 = 3;

pub struct Ctx {
    pub config: RunConfig,
    pub out_dir: PathBuf,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    fs::write(path, serde_json::to_vec_pretty(value)?)?;
    Ok(())
}

#[derive(Serialize)]
struct SolveDiagnostics {
    status: SolveStatus,
    primal_objective: f64,
    dual_objective: f64,
    relative_gap: f64,
    worst_scaled_residual: f64,
    iterations: u32,
    rows: usize,
    cols: usize,
    assumption_flags: usize,
}

/// `solve`: compile, solve, extract, estimate, export.
pub fn cmd_solve(ctx: &Ctx) -> anyhow::Result<i32> {
    let sys = ctx.config.build_system()?;
    let splits = ctx.config.build_splits(&sys)?;
    let dec = build_decomposition(&sys, &splits)?;
    let report = check_assumptions(&sys, &dec, 200, ctx.config.seed);
    let cp = compile(&sys, &dec, ctx.config.degree)?;
    let sol = cone::solve(&cp.program, ctx.config.tol)?;
    let gap = (sol.primal_obj + sol.dual_obj).abs() / (1.0 + sol.primal_obj.abs());
    let diagnostics = SolveDiagnostics {
        status: sol.status,
        primal_objective: sol.primal_obj,
        dual_objective: sol.dual_obj,
        relative_gap: gap,
        worst_scaled_residual: solution_metric(&cp.program, &sol),
        iterations: sol.iterations,
        rows: cp.program.num_rows(),
        cols: cp.program.num_cols(),
        assumption_flags: report.faces.iter().filter(|f| f.flagged).count(),
    };
    fs::create_dir_all(&ctx.out_dir)?;
    write_json(&ctx.out_dir.join("diagnostics.json"), &diagnostics)?;

    let near_optimal = matches!(sol.status, SolveStatus::Optimal)
        || (matches!(sol.status, SolveStatus::Inaccurate)
            && diagnostics.worst_scaled_residual <= 1e-5);
    if !near_optimal {
        eprintln!(
            "solver returned {:?} (worst scaled residual {:.3e}); diagnostics written to {}",
            sol.status,
            diagnostics.worst_scaled_residual,
            ctx.out_dir.display()
        );
        return Ok(EXIT_SOLVER);
    }

    let cert = extract_certificate(&cp, &sol)?;
    write_json(&ctx.out_dir.join("certificate.json"), &cert)?;
    let estimate = mc_volume(
        &sys,
        &cert,
        sol.primal_obj,
        ctx.config.mc_samples.unwrap_or(100_000),
        ctx.config.seed,
    )?;
    write_json(&ctx.out_dir.join("estimate.json"), &estimate)?;
    if sys.n == 2 {
        let resolution = ctx
            .config
            .grid_resolution
            .clone()
            .unwrap_or_else(|| vec![101, 101]);
        let csv = export_grid(&sys, &cert, 0.0, &resolution)?;
        fs::write(ctx.out_dir.join("grid.csv"), csv)?;
    }
    println!(
        "objective {:.6}, certified-volume estimate {:.6} over state box",
        estimate.objective, estimate.mc_volume
    );
    Ok(0)
}

/// `optimize`: descent over split positions, or evaluation of a recorded
/// path at another degree when `--eval-path` is given.
pub fn cmd_optimize(
    ctx: &Ctx,
    iters_flag: Option<usize>,
    eval_path: Option<&Path>,
) -> anyhow::Result<i32> {
    let sys = ctx.config.build_system()?;
    let template = ctx.config.build_splits(&sys)?;
    fs::create_dir_all(&ctx.out_dir)?;

    if let Some(path) = eval_path {
        let trace: OptimizationTrace = serde_json::from_slice(&fs::read(path)?)?;
        let values = evaluate_along_path(
            &sys,
            &template,
            &trace.theta_path,
            ctx.config.degree,
            ctx.config.tol,
        );
        let mut csv = String::from("iteration,value\n");
        for (i, v) in values.iter().enumerate() {
            match v {
                Some(v) => csv.push_str(&format!("{i},{}\n", fmt_float(*v))),
                None => csv.push_str(&format!("{i},\n")),
            }
        }
        fs::write(ctx.out_dir.join("path_values.csv"), csv)?;
        write_json(&ctx.out_dir.join("path_values.json"), &values)?;
        let best = values.iter().flatten().fold(f64::INFINITY, |m, &v| m.min(v));
        println!(
            "evaluated {} path entries at degree {}; best value {:.6}",
            values.len(),
            ctx.config.degree,
            best
        );
        return Ok(0);
    }

    let optimizer = ctx.config.build_optimizer(iters_flag);
    let theta0 = template.flatten();
    let trace = match optimize(&sys, &template, &theta0, ctx.config.degree, &optimizer) {
        Ok(t) => t,
        Err(roa_core::Error::OptimizationAborted(msg)) => {
            eprintln!("optimization aborted: {msg}");
            return Ok(EXIT_OPTIM);
        }
        Err(e) => return Err(e.into()),
    };
    write_json(&ctx.out_dir.join("trace.json"), &trace)?;
    fs::write(ctx.out_dir.join("trace.csv"), trace.to_csv())?;

    let (_, sol, cp) = value_at(
        &sys,
        &template,
        &trace.best_theta,
        ctx.config.degree,
        ctx.config.tol,
    )?;
    let cert = extract_certificate(&cp, &sol)?;
    write_json(&ctx.out_dir.join("best_certificate.json"), &cert)?;
    println!(
        "start {:.6} -> best {:.6} at iteration {} of {}",
        trace.values[0],
        trace.best_value,
        trace.best_index,
        trace.values.len() - 1
    );
    Ok(0)
}

/// `gradcheck`: all three gradient methods at one configuration.
pub fn cmd_gradcheck(ctx: &Ctx) -> anyhow::Result<i32> {
    let sys = ctx.config.build_system()?;
    let template = ctx.config.build_splits(&sys)?;
    let theta = template.flatten();
    let fd = FdConfig::default();
    fs::create_dir_all(&ctx.out_dir)?;

    let t0 = std::time::Instant::now();
    let (g_qr, diag) = gradient_analytic(
        &sys,
        &template,
        &theta,
        ctx.config.degree,
        &fd,
        DzSolver::Qr,
        ctx.config.tol,
    )?;
    let t_qr = t0.elapsed().as_secs_f64();

    let t0 = std::time::Instant::now();
    let (g_lsqr, _) = gradient_analytic(
        &sys,
        &template,
        &theta,
        ctx.config.degree,
        &fd,
        DzSolver::Lsqr {
            maxiter: 1000,
            atol: 1e-12,
        },
        ctx.config.tol,
    )?;
    let t_lsqr = t0.elapsed().as_secs_f64();

    let t0 = std::time::Instant::now();
    let g_fd = gradient_fd(
        &sys,
        &template,
        &theta,
        ctx.config.degree,
        fd.eps_f,
        ctx.config.tol,
    )?;
    let t_fd = t0.elapsed().as_secs_f64();

    let cosine = |a: &[f64], b: &[f64]| -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb).max(1e-300)
    };
    let max_diff = |a: &[f64], b: &[f64]| -> f64 {
        a.iter()
            .zip(b)
            .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
    };

    let mut csv = String::from("method,seconds");
    for k in 0..theta.len() {
        csv.push_str(&format!(",grad_{k}"));
    }
    csv.push('\n');
    for (name, time, grad) in [
        ("qr", t_qr, &g_qr),
        ("lsqr", t_lsqr, &g_lsqr),
        ("fd", t_fd, &g_fd),
    ] {
        csv.push_str(&format!("{name},{}", fmt_float(time)));
        for v in grad.iter() {
            csv.push(',');
            csv.push_str(&fmt_float(*v));
        }
        csv.push('\n');
    }
    fs::write(ctx.out_dir.join("gradcheck.csv"), &csv)?;

    #[derive(Serialize)]
    struct GradCheckReport {
        cos_qr_fd: f64,
        cos_qr_lsqr: f64,
        cos_lsqr_fd: f64,
        max_diff_qr_lsqr: f64,
        seconds_qr: f64,
        seconds_lsqr: f64,
        seconds_fd: f64,
        min_margin: f64,
        fd_fallback: bool,
    }
    let report = GradCheckReport {
        cos_qr_fd: cosine(&g_qr, &g_fd),
        cos_qr_lsqr: cosine(&g_qr, &g_lsqr),
        cos_lsqr_fd: cosine(&g_lsqr, &g_fd),
        max_diff_qr_lsqr: max_diff(&g_qr, &g_lsqr),
        seconds_qr: t_qr,
        seconds_lsqr: t_lsqr,
        seconds_fd: t_fd,
        min_margin: diag.min_margin,
        fd_fallback: diag.fd_fallback,
    };
    write_json(&ctx.out_dir.join("gradcheck.json"), &report)?;
    println!(
        "cos(qr, fd) = {:.6}, cos(qr, lsqr) = {:.6}; qr {:.2}s lsqr {:.2}s fd {:.2}s",
        report.cos_qr_fd, report.cos_qr_lsqr, t_qr, t_lsqr, t_fd
    );
    Ok(0)
}

/// `benchmark`: wall time per gradient method over parameter counts and
/// degrees, on a fixed decomposition (only the leading parameters are
/// differentiated, so method scaling is isolated from program growth).
pub fn cmd_benchmark(ctx: &Ctx) -> anyhow::Result<i32> {
    let sys = ctx.config.build_system()?;
    let template = ctx.config.build_splits(&sys)?;
    let theta = template.flatten();
    let bench = ctx.config.benchmark.clone().unwrap_or_default();
    let fd = FdConfig::default();
    fs::create_dir_all(&ctx.out_dir)?;

    let mut csv = String::from("method,degree,n_theta,seconds\n");
    for &degree in &bench.degrees {
        // warm-up round, excluded from timing
        let dec = build_decomposition(&sys, &template.unflatten(&theta))?;
        let warm = compile(&sys, &dec, degree)?;
        let sol = cone::solve(&warm.program, ctx.config.tol)?;
        let _ = extract_certificate(&warm, &sol);

        for &nt in &bench.n_theta {
            if nt > theta.len() {
                eprintln!(
                    "skipping n_theta = {nt}: configuration has only {} parameters",
                    theta.len()
                );
                continue;
            }
            for method in [GradMethod::Qr, GradMethod::Lsqr, GradMethod::Fd] {
                let seconds = match time_subset_gradient(
                    &sys, &template, &theta, degree, nt, method, &fd, ctx.config.tol,
                ) {
                    Ok(s) => s,
                    Err(e) => {
                        eprintln!("benchmark cell ({method:?}, d{degree}, n{nt}) failed: {e}");
                        csv.push_str(&format!("{method:?},{degree},{nt},\n").to_lowercase());
                        continue;
                    }
                };
                csv.push_str(
                    &format!("{method:?},{degree},{nt},{}\n", fmt_float(seconds)).to_lowercase(),
                );
            }
        }
    }
    fs::write(ctx.out_dir.join("benchmark.csv"), &csv)?;
    print!("{csv}");
    Ok(0)
}

/// Times one gradient evaluation restricted to the first `nt` parameters
/// of a solved instance; the solve itself is shared by all methods and
/// excluded.
#[allow(clippy::too_many_arguments)]
pub fn time_subset_gradient(
    sys: &roa_core::SystemSpec,
    template: &roa_core::SplitConfig,
    theta: &[f64],
    degree: u32,
    nt: usize,
    method: GradMethod,
    fd: &FdConfig,
    tol: f64,
) -> anyhow::Result<f64> {
    let dec = build_decomposition(sys, &template.unflatten(theta))?;
    let cp = compile(sys, &dec, degree)?;
    let sol = cone::solve(&cp.program, tol)?;
    let base_value = sol.primal_obj;

    let start = std::time::Instant::now();
    match method {
        GradMethod::Fd => {
            for k in 0..nt {
                let mut t = theta.to_vec();
                t[k] += fd.eps_f;
                let _ = value_at(sys, template, &t, degree, tol)?;
            }
            let _ = base_value;
        }
        GradMethod::Qr | GradMethod::Lsqr => {
            let dirs = (0..nt)
                .map(|k| data_derivative_with_base(sys, template, theta, k, fd, degree, &cp))
                .collect::<Result<Vec<_>, _>>()?;
            let point = build_embedding(&sol);
            let mut system = assemble_sensitivity(&cp.program, &point, &dirs)?;
            let dzs = match method {
                GradMethod::Qr => solve_dz_qr(&mut system)?,
                _ => solve_dz_lsqr(&system, 1000, 1e-12).0,
            };
            for (k, dz) in dzs.iter().enumerate() {
                let _ = solution_derivative(&cp.program, &sol, &point, dz, &dirs[k])?;
            }
        }
    }
    Ok(start.elapsed().as_secs_f64())
}

/// Export/import helpers shared with cross-solver validation.
pub fn cmd_export(ctx: &Ctx) -> anyhow::Result<i32> {
    let sys = ctx.config.build_system()?;
    let splits = ctx.config.build_splits(&sys)?;
    let dec = build_decomposition(&sys, &splits)?;
    let cp = soscomp::compile(&sys, &dec, ctx.config.degree)?;
    fs::create_dir_all(&ctx.out_dir)?;
    let stem = ctx.out_dir.join("program");
    cone::io::export_program(&cp.program, &stem)?;
    println!(
        "wrote {} ({} rows x {} cols, {} nonzeros)",
        stem.display(),
        cp.program.num_rows(),
        cp.program.num_cols(),
        cp.program.a.nnz()
    );
    Ok(0)
}
