//! Interior-point backend adapter.
//!
//! The backend is Clarabel; this adapter owns every convention
//! difference. Clarabel packs PSD triangles upper-column-major while the
//! crate contract is lower-column-major, so PSD slot rows are permuted on
//! the way in and the returned `s`, `y` slots permuted back. The returned
//! dual satisfies `A'y + c = 0` with `y` in `K*` and the reported dual
//! objective is `b'y`, so optimality is witnessed by
//! `primal_obj + dual_obj ~ 0`.

use clarabel::algebra as clar_algebra;
use clarabel::solver as clar_solver;
use clarabel::solver::IPSolver;

use super::{svec_len, Cone, ConicProgram, ConicSolution, SolveStatus};
use crate::error::{Error, Result};

/// Row permutation into the backend's PSD slot order.
///
/// Entry `perm[our_row]` is the backend row. Zero and nonnegative slots
/// are fixed; inside a PSD block of side `r` our slot `(p, q)` with
/// `p >= q` (lower triangle, column-major) goes to the backend slot of
/// the upper-triangle entry `(q, p)` in column-major order.
fn backend_row_perm(cones: &[Cone]) -> Vec<usize> {
    let m: usize = cones.iter().map(Cone::slot_len).sum();
    let mut perm = Vec::with_capacity(m);
    let mut offset = 0;
    for cone in cones {
        match *cone {
            Cone::Zero(len) | Cone::NonNeg(len) => {
                perm.extend(offset..offset + len);
                offset += len;
            }
            Cone::Psd(r) => {
                for q in 0..r {
                    for p in q..r {
                        perm.push(offset + p * (p + 1) / 2 + q);
                    }
                }
                offset += svec_len(r);
            }
        }
    }
    perm
}

fn map_status(status: clar_solver::SolverStatus) -> SolveStatus {
    use clar_solver::SolverStatus::*;
    match status {
        Solved => SolveStatus::Optimal,
        PrimalInfeasible | AlmostPrimalInfeasible => SolveStatus::Infeasible,
        DualInfeasible | AlmostDualInfeasible => SolveStatus::Unbounded,
        _ => SolveStatus::Inaccurate,
    }
}

/// Solves a standard-form conic program at the requested tolerance.
///
/// Backend failures surface through the returned status, never a panic;
/// callers decide whether a non-optimal status is an error.
pub fn solve(p: &ConicProgram, tol: f64) -> Result<ConicSolution> {
    p.validate()?;
    let (m, n) = (p.num_rows(), p.num_cols());
    let perm = backend_row_perm(&p.cones);

    let mut triplets: Vec<(usize, usize, f64)> = p
        .a
        .triplets()
        .map(|(r, c, v)| (perm[r], c, v))
        .collect();
    triplets.sort_unstable_by(|a, b| (a.1, a.0).cmp(&(b.1, b.0)));
    let mut colptr = vec![0usize; n + 1];
    let mut rowval = Vec::with_capacity(triplets.len());
    let mut nzval = Vec::with_capacity(triplets.len());
    for &(r, c, v) in &triplets {
        colptr[c + 1] += 1;
        rowval.push(r);
        nzval.push(v);
    }
    for c in 0..n {
        colptr[c + 1] += colptr[c];
    }
    let a = clar_algebra::CscMatrix::new(m, n, colptr, rowval, nzval);

    let mut b = vec![0.0; m];
    for (ours, &target) in perm.iter().enumerate() {
        b[target] = p.b[ours];
    }

    let cones: Vec<clar_solver::SupportedConeT<f64>> = p
        .cones
        .iter()
        .filter(|c| c.slot_len() > 0)
        .map(|c| match *c {
            Cone::Zero(len) => clar_solver::SupportedConeT::ZeroConeT(len),
            Cone::NonNeg(len) => clar_solver::SupportedConeT::NonnegativeConeT(len),
            Cone::Psd(r) => clar_solver::SupportedConeT::PSDTriangleConeT(r),
        })
        .collect();

    let settings = clar_solver::DefaultSettingsBuilder::default()
        .verbose(false)
        .tol_gap_abs(tol)
        .tol_gap_rel(tol)
        .tol_feas(tol)
        .max_iter(500)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("solver settings: {e}")))?;

    let quad = clar_algebra::CscMatrix::zeros((n, n));
    let mut solver = clar_solver::DefaultSolver::new(&quad, &p.c, &a, &b, &cones, settings)
        .map_err(|e| Error::InvalidConfig(format!("solver setup: {e:?}")))?;
    solver.solve();

    let sol = &solver.solution;
    let mut y = vec![0.0; m];
    let mut s = vec![0.0; m];
    for (ours, &target) in perm.iter().enumerate() {
        y[ours] = sol.z[target];
        s[ours] = sol.s[target];
    }
    let x = sol.x.clone();
    let primal_obj: f64 = p.c.iter().zip(&x).map(|(c, x)| c * x).sum();
    let dual_obj: f64 = p.b.iter().zip(&y).map(|(b, y)| b * y).sum();

    let mut out = ConicSolution {
        x,
        y,
        s,
        status: map_status(sol.status),
        primal_obj,
        dual_obj,
        iterations: sol.iterations,
    };

    // split certificate programs routinely lack strict feasibility, where
    // interior-point iterations stall short of the requested tolerance; a
    // Gauss-Newton polish on the embedding residual recovers accuracy
    if out.status == SolveStatus::Inaccurate
        && crate::diffcone::solution_metric(p, &out) > tol
    {
        let refined = crate::diffcone::refine_solution(p, &out, 30);
        if crate::diffcone::solution_metric(p, &refined)
            < crate::diffcone::solution_metric(p, &out)
        {
            out = refined;
        }
        // upgrade only when the polished point genuinely meets the bars
        let bmax = p.b.iter().fold(0.0f64, |mx, v| mx.max(v.abs()));
        let cmax = p.c.iter().fold(0.0f64, |mx, v| mx.max(v.abs()));
        let gap = (out.primal_obj + out.dual_obj).abs() / (1.0 + out.primal_obj.abs());
        if out.primal_residual_inf(p) <= tol * (1.0 + bmax)
            && out.dual_residual_inf(p) <= tol * (1.0 + cmax)
            && gap <= 10.0 * tol
        {
            out.status = SolveStatus::Optimal;
        }
    }
    Ok(out)
}
