//! Differentiation of the conic solution map, and solution refinement.
//!
//! A solved program is embedded as `z = (x, y - s, 1)`. The optimality
//! conditions collapse to the residual map
//!
//! ```text
//! R(z) = Q P(z) - P(z) + z,   Q = [ 0   A'  c ]
//!                                 [ -A  0   b ]
//!                                 [ -c' -b'  0 ]
//! ```
//!
//! where `P` projects onto `R^n x K* x R+`; `R(z) = 0` exactly at a
//! primal-dual solution. Its Jacobian `M = (Q - I) DP(z) + I` serves two
//! purposes: implicit differentiation of the solution with respect to the
//! program data (`M dz = -dQ P(z)`, one factorization for any number of
//! directions), and Newton-type refinement of solutions a solver could
//! not push to high accuracy.
//!
//! `M` always has the current embedding point in its kernel (the residual
//! is positively homogeneous), so systems are solved in the least-squares
//! sense; the derivative read-out `dx = du - x dw`,
//! `dy = DP_K*(v) dv - y dw` is invariant along that direction.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::cone::{
    embedding_projection_jacobian, mat_from_svec, project_embedding, Cone, ConicProgram,
    ConicSolution, DerivBlock, EmbeddingDerivative,
};
use crate::error::{Error, Result};
use crate::sparse::CscMat;

/// Point at which the solution map is differentiated.
#[derive(Debug, Clone)]
pub struct EmbeddingPoint {
    pub z: Vec<f64>,
    /// Number of primal variables (length of the `u` block).
    pub num_primal: usize,
}

/// One direction of program-data perturbation.
#[derive(Debug, Clone)]
pub struct DataPerturbation {
    pub da: CscMat,
    pub db: Vec<f64>,
    pub dc: Vec<f64>,
}

/// Builds `z = (x, y - s, 1)` from a solution.
pub fn build_embedding(sol: &ConicSolution) -> EmbeddingPoint {
    let mut z = Vec::with_capacity(sol.x.len() + sol.y.len() + 1);
    z.extend_from_slice(&sol.x);
    z.extend(sol.y.iter().zip(&sol.s).map(|(y, s)| y - s));
    z.push(1.0);
    EmbeddingPoint {
        z,
        num_primal: sol.x.len(),
    }
}

/// The skew matrix `Q` of the homogeneous embedding.
fn embedding_matrix(p: &ConicProgram) -> CscMat {
    let nx = p.num_cols();
    let m = p.num_rows();
    let dim = nx + m + 1;
    let mut trips = Vec::with_capacity(2 * p.a.nnz() + 2 * (m + nx));
    for (r, c, v) in p.a.triplets() {
        trips.push((c, nx + r, v)); // A' block
        trips.push((nx + r, c, -v)); // -A block
    }
    for (j, &cj) in p.c.iter().enumerate() {
        if cj != 0.0 {
            trips.push((j, dim - 1, cj));
            trips.push((dim - 1, j, -cj));
        }
    }
    for (i, &bi) in p.b.iter().enumerate() {
        if bi != 0.0 {
            trips.push((nx + i, dim - 1, bi));
            trips.push((dim - 1, nx + i, -bi));
        }
    }
    CscMat::from_triplets(dim, dim, trips)
}

/// `M = (Q - I) J + I` with `J` the block-diagonal projection Jacobian.
fn assemble_m(q: &CscMat, jac: &EmbeddingDerivative) -> CscMat {
    let dim = q.nrows();
    let mut trips: Vec<(usize, usize, f64)> = Vec::with_capacity(q.nnz() * 2);
    for block in &jac.blocks {
        match block {
            DerivBlock::Identity { offset, len } => {
                // column j of M is column j of Q (diagonal of Q is zero,
                // so -I and +I cancel off the stored pattern)
                for j in *offset..offset + len {
                    for (r, v) in q.col(j) {
                        trips.push((r, j, v));
                    }
                }
            }
            DerivBlock::Diag { offset, d } => {
                for (i, &dj) in d.iter().enumerate() {
                    let j = offset + i;
                    if dj != 0.0 {
                        for (r, v) in q.col(j) {
                            trips.push((r, j, v * dj));
                        }
                    }
                    trips.push((j, j, 1.0 - dj));
                }
            }
            DerivBlock::Dense { offset, mat } => {
                let q_block = mat.nrows();
                for j in 0..q_block {
                    let col = offset + j;
                    for l in 0..q_block {
                        let t = mat[(l, j)];
                        if t == 0.0 {
                            continue;
                        }
                        for (r, v) in q.col(offset + l) {
                            trips.push((r, col, v * t));
                        }
                        trips.push((offset + l, col, -t));
                    }
                    trips.push((col, col, 1.0));
                }
            }
        }
    }
    CscMat::from_triplets(dim, dim, trips)
}

/// The assembled sensitivity system: `M` plus one right-hand side per
/// perturbation direction.
pub struct SensitivitySystem {
    pub matrix: CscMat,
    pub rhs: Vec<Vec<f64>>,
    pub num_primal: usize,
    /// Incremented on every factorization; gradient evaluation asserts
    /// this stays at one regardless of the direction count.
    pub factorizations: usize,
    /// Relative least-squares residual per direction from the last
    /// direct solve. The system is singular by construction (the
    /// embedding point spans its kernel) and can be slightly
    /// inconsistent at near-degenerate solutions; the read-out is
    /// invariant along the kernel, so residuals are reported rather
    /// than fatal.
    pub qr_residuals: Vec<f64>,
}

/// Assembles `M` and the right-hand sides `-dQ_k P(z)` at a
/// differentiable embedding point.
pub fn assemble_sensitivity(
    p: &ConicProgram,
    point: &EmbeddingPoint,
    directions: &[DataPerturbation],
) -> Result<SensitivitySystem> {
    let nx = p.num_cols();
    let m = p.num_rows();
    let dim = nx + m + 1;
    if point.z.len() != dim || point.num_primal != nx {
        return Err(Error::DimensionMismatch(
            "embedding point does not match the program".into(),
        ));
    }
    let jac = embedding_projection_jacobian(nx, &p.cones, &point.z)?;
    let q = embedding_matrix(p);
    let matrix = assemble_m(&q, &jac);

    let w = point.z[dim - 1].abs();
    let scaled: Vec<f64> = point.z.iter().map(|v| v / w).collect();
    let pi = project_embedding(nx, &p.cones, &scaled)?;
    let rhs = directions
        .iter()
        .map(|dd| {
            debug_assert_eq!(dd.da.nrows(), m);
            debug_assert_eq!(dd.da.ncols(), nx);
            // g = dQ * pi; the system solved is M dz = -g
            let mut g = vec![0.0; dim];
            dd.da.matvec_transpose_acc(&pi[nx..nx + m], 1.0, &mut g[0..nx]);
            dd.da.matvec_acc(&pi[0..nx], -1.0, &mut g[nx..nx + m]);
            let pw = pi[dim - 1];
            let mut top_dot = 0.0;
            for (j, &dcj) in dd.dc.iter().enumerate() {
                g[j] += dcj * pw;
                top_dot += dcj * pi[j];
            }
            let mut mid_dot = 0.0;
            for (i, &dbi) in dd.db.iter().enumerate() {
                g[nx + i] += dbi * pw;
                mid_dot += dbi * pi[nx + i];
            }
            g[dim - 1] = -top_dot - mid_dot;
            for v in &mut g {
                *v = -*v;
            }
            g
        })
        .collect();

    Ok(SensitivitySystem {
        matrix,
        rhs,
        num_primal: nx,
        factorizations: 0,
        qr_residuals: Vec::new(),
    })
}

/// Solves all right-hand sides with one direct factorization and a
/// triangular back-substitution per direction.
///
/// `M` has the embedding point in its kernel, so the system is solved in
/// the Tikhonov-damped least-squares sense; the derivative read-out is
/// invariant along the kernel direction. The triangular factor is the
/// Cholesky factor of `M'M + damp^2 I` (the `R` of the damped QR), and
/// matvec-based iterative refinement restores the accuracy the normal
/// equations would otherwise lose.
pub fn solve_dz_qr(sys: &mut SensitivitySystem) -> Result<Vec<Vec<f64>>> {
    use faer::prelude::*;
    use faer::sparse::SparseColMat;
    use faer::Side;

    let dim = sys.matrix.nrows();
    let scale = sys
        .matrix
        .values()
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()));

    let mut damp = 1e-7 * (1.0 + scale);
    let mut factor = None;
    for _ in 0..3 {
        let normal = sys.matrix.normal_matrix_lower(damp * damp);
        let trips: Vec<faer::sparse::Triplet<usize, usize, f64>> = normal
            .triplets()
            .map(|(r, c, v)| faer::sparse::Triplet::new(r, c, v))
            .collect();
        let lower = SparseColMat::try_new_from_triplets(dim, dim, &trips)
            .map_err(|e| Error::DimensionMismatch(format!("normal matrix assembly: {e:?}")))?;
        match lower.sp_cholesky(Side::Lower) {
            Ok(llt) => {
                factor = Some(llt);
                break;
            }
            Err(_) => damp *= 100.0,
        }
    }
    let Some(llt) = factor else {
        return Err(Error::RankDeficient {
            rank: estimate_rank(&sys.matrix),
            dim,
            residual: f64::NAN,
        });
    };
    sys.factorizations += 1;

    let mut out = Vec::with_capacity(sys.rhs.len());
    sys.qr_residuals.clear();
    for g in &sys.rhs {
        // damped least squares via the factor, with refinement on the
        // optimality residual r = M'(g - M dz) - damp^2 dz
        let mut dz = vec![0.0; dim];
        for _ in 0..4 {
            let mut resid = g.clone();
            sys.matrix.matvec_acc(&dz, -1.0, &mut resid);
            let mut opt = vec![0.0; dim];
            sys.matrix.matvec_transpose_acc(&resid, 1.0, &mut opt);
            for (o, z) in opt.iter_mut().zip(&dz) {
                *o -= damp * damp * z;
            }
            let opt_norm = opt.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if opt_norm <= 1e-14 * (1.0 + scale * scale) {
                break;
            }
            let mut rhs = Mat::zeros(dim, 1);
            for (i, &v) in opt.iter().enumerate() {
                rhs[(i, 0)] = v;
            }
            let update = llt.solve(&rhs);
            for i in 0..dim {
                dz[i] += update[(i, 0)];
            }
        }
        if dz.iter().any(|v| !v.is_finite()) {
            return Err(Error::RankDeficient {
                rank: estimate_rank(&sys.matrix),
                dim,
                residual: f64::INFINITY,
            });
        }
        // residual against the undamped system
        let mut r = sys.matrix.matvec(&dz);
        let mut gnorm = 0.0f64;
        let mut rnorm = 0.0f64;
        for i in 0..dim {
            r[i] -= g[i];
            rnorm = rnorm.max(r[i].abs());
            gnorm = gnorm.max(g[i].abs());
        }
        let rel = rnorm / (1.0 + gnorm);
        if rel > 1e-2 {
            return Err(Error::RankDeficient {
                rank: estimate_rank(&sys.matrix),
                dim,
                residual: rnorm,
            });
        }
        sys.qr_residuals.push(rel);
        out.push(dz);
    }
    Ok(out)
}

/// Cheap rank estimate used only in error reports.
fn estimate_rank(m: &CscMat) -> usize {
    let nonempty = (0..m.ncols()).filter(|&c| m.col(c).next().is_some()).count();
    nonempty.saturating_sub(1)
}

/// Convergence report for one LSQR run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LsqrReport {
    pub iterations: usize,
    pub converged: bool,
    pub residual_estimate: f64,
}

/// Paige-Saunders LSQR for `min ||M x - g||`.
fn lsqr(m: &CscMat, g: &[f64], maxiter: usize, atol: f64) -> (Vec<f64>, LsqrReport) {
    lsqr_operator(
        m.nrows(),
        m.ncols(),
        |x, y| m.matvec_acc(x, 1.0, y),
        |x, y| m.matvec_transpose_acc(x, 1.0, y),
        g,
        maxiter,
        atol,
    )
}

/// LSQR on an abstract linear operator given by `y += A x` and
/// `y += A' x` accumulators.
fn lsqr_operator(
    nrows: usize,
    ncols: usize,
    apply: impl Fn(&[f64], &mut [f64]),
    apply_t: impl Fn(&[f64], &mut [f64]),
    g: &[f64],
    maxiter: usize,
    atol: f64,
) -> (Vec<f64>, LsqrReport) {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();

    let mut x = vec![0.0; ncols];
    let mut u = g.to_vec();
    let beta1 = norm(&u);
    if beta1 == 0.0 {
        return (
            x,
            LsqrReport {
                iterations: 0,
                converged: true,
                residual_estimate: 0.0,
            },
        );
    }
    for t in &mut u {
        *t /= beta1;
    }
    let mut v = vec![0.0; ncols];
    apply_t(&u, &mut v);
    let mut alpha = norm(&v);
    if alpha == 0.0 {
        return (
            x,
            LsqrReport {
                iterations: 0,
                converged: true,
                residual_estimate: beta1,
            },
        );
    }
    for t in &mut v {
        *t /= alpha;
    }
    let mut w = v.clone();
    let mut phi_bar = beta1;
    let mut rho_bar = alpha;
    let mut anorm_sq = 0.0;
    let mut iterations = 0;
    let mut converged = false;

    for iter in 1..=maxiter {
        iterations = iter;
        // u = M v - alpha u
        let mut mu = vec![0.0; nrows];
        apply(&v, &mut mu);
        for i in 0..nrows {
            mu[i] -= alpha * u[i];
        }
        let beta = norm(&mu);
        if beta > 0.0 {
            for t in &mut mu {
                *t /= beta;
            }
        }
        u = mu;
        // v = M' u - beta v
        let mut mv = vec![0.0; ncols];
        apply_t(&u, &mut mv);
        for j in 0..ncols {
            mv[j] -= beta * v[j];
        }
        alpha = norm(&mv);
        if alpha > 0.0 {
            for t in &mut mv {
                *t /= alpha;
            }
        }
        v = mv;

        anorm_sq += alpha * alpha + beta * beta;
        let rho = (rho_bar * rho_bar + beta * beta).sqrt();
        let c = rho_bar / rho;
        let s = beta / rho;
        let theta = s * alpha;
        rho_bar = -c * alpha;
        let phi = c * phi_bar;
        phi_bar *= s;

        for j in 0..ncols {
            x[j] += (phi / rho) * w[j];
            w[j] = v[j] - (theta / rho) * w[j];
        }

        let rnorm = phi_bar;
        let arnorm = phi_bar * alpha * c.abs();
        let anorm = anorm_sq.sqrt();
        if arnorm <= atol * anorm * rnorm || rnorm <= atol * beta1 {
            converged = true;
            break;
        }
    }
    (
        x,
        LsqrReport {
            iterations,
            converged,
            residual_estimate: phi_bar,
        },
    )
}

/// Solves every right-hand side iteratively; each column is an
/// independent LSQR run. Non-convergence is reported per column, with
/// the partial result returned.
pub fn solve_dz_lsqr(
    sys: &SensitivitySystem,
    maxiter: usize,
    atol: f64,
) -> (Vec<Vec<f64>>, Vec<LsqrReport>) {
    let mut out = Vec::with_capacity(sys.rhs.len());
    let mut reports = Vec::with_capacity(sys.rhs.len());
    for g in &sys.rhs {
        let (dz, report) = lsqr(&sys.matrix, g, maxiter, atol);
        out.push(dz);
        reports.push(report);
    }
    (out, reports)
}

/// Primal, dual and value derivatives mapped out of one `dz` column.
#[derive(Debug, Clone)]
pub struct SolutionDerivative {
    pub dx: Vec<f64>,
    pub dy: Vec<f64>,
    /// Value derivative through the primal route `dc'x + c'dx`.
    pub dvalue_primal: f64,
    /// Value derivative through the dual route `-(db'y + b'dy)`.
    pub dvalue_dual: f64,
    /// Relative disagreement between the two routes.
    pub route_discrepancy: f64,
}

/// Maps a solved `dz` back to `(dx, dy, dp*)`, computing the value
/// derivative through both the primal and dual data.
pub fn solution_derivative(
    p: &ConicProgram,
    sol: &ConicSolution,
    point: &EmbeddingPoint,
    dz: &[f64],
    dd: &DataPerturbation,
) -> Result<SolutionDerivative> {
    let nx = p.num_cols();
    let m = p.num_rows();
    let dim = nx + m + 1;
    debug_assert_eq!(dz.len(), dim);
    let dw = dz[dim - 1];

    let dx: Vec<f64> = (0..nx).map(|j| dz[j] - sol.x[j] * dw).collect();

    // dy = DP_K*(v)(dv) - y dw, using the v-block of the projection Jacobian
    let jac = embedding_projection_jacobian(nx, &p.cones, &point.z)?;
    let full = jac.apply(dz);
    let dy: Vec<f64> = (0..m)
        .map(|i| full[nx + i] - sol.y[i] * dw)
        .collect();

    let dvalue_primal: f64 = dd
        .dc
        .iter()
        .zip(&sol.x)
        .map(|(dc, x)| dc * x)
        .sum::<f64>()
        + p.c.iter().zip(&dx).map(|(c, dx)| c * dx).sum::<f64>();
    let dvalue_dual: f64 = -(dd
        .db
        .iter()
        .zip(&sol.y)
        .map(|(db, y)| db * y)
        .sum::<f64>()
        + p.b.iter().zip(&dy).map(|(b, dy)| b * dy).sum::<f64>());
    let scale = dvalue_primal.abs().max(dvalue_dual.abs()).max(1e-12);
    Ok(SolutionDerivative {
        dx,
        dy,
        dvalue_primal,
        dvalue_dual,
        route_discrepancy: (dvalue_primal - dvalue_dual).abs() / scale,
    })
}

/// Strict-complementarity margin of one PSD block.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PsdMargin {
    pub cone_index: usize,
    pub side: usize,
    /// `min_i |lambda_i(Y)| + |lambda_i(S)|` in the common eigenbasis of
    /// `Y - S`; zero means the ranks do not fill the block.
    pub margin: f64,
    /// `max_i |lambda_i(Y) * lambda_i(S)|`, which complementarity drives
    /// to zero.
    pub complementarity_residual: f64,
}

/// Differentiability diagnostics at a solution.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComplementarityReport {
    pub psd: Vec<PsdMargin>,
    /// `min_i |y_i| + |s_i|` over nonnegative slots, infinite if none.
    pub nonneg_margin: f64,
    pub normalization: f64,
}

impl ComplementarityReport {
    /// Smallest margin over every block; the gradient is trustworthy when
    /// this is bounded away from zero.
    pub fn min_margin(&self) -> f64 {
        self.psd
            .iter()
            .map(|p| p.margin)
            .fold(self.nonneg_margin, f64::min)
    }
}

/// Reports per-block strict-complementarity margins. Advisory: low
/// margins flag likely nondifferentiability but nothing is blocked here.
pub fn check_differentiability(p: &ConicProgram, sol: &ConicSolution) -> ComplementarityReport {
    let mut psd = Vec::new();
    let mut nonneg_margin = f64::INFINITY;
    let mut pos = 0;
    for (idx, cone) in p.cones.iter().enumerate() {
        let len = cone.slot_len();
        match cone {
            Cone::Zero(_) => {}
            Cone::NonNeg(_) => {
                for i in pos..pos + len {
                    nonneg_margin = nonneg_margin.min(sol.y[i].abs() + sol.s[i].abs());
                }
            }
            Cone::Psd(side) => {
                let y_block = mat_from_svec(&sol.y[pos..pos + len]);
                let s_block = mat_from_svec(&sol.s[pos..pos + len]);
                let v_block: DMatrix<f64> = &y_block - &s_block;
                let eig = v_block.symmetric_eigen();
                let mut margin = f64::INFINITY;
                let mut comp = 0.0f64;
                for col in 0..*side {
                    let q = eig.eigenvectors.column(col);
                    let ly = (q.transpose() * &y_block * q)[(0, 0)];
                    let ls = (q.transpose() * &s_block * q)[(0, 0)];
                    margin = margin.min(ly.abs() + ls.abs());
                    comp = comp.max((ly * ls).abs());
                }
                psd.push(PsdMargin {
                    cone_index: idx,
                    side: *side,
                    margin,
                    complementarity_residual: comp,
                });
            }
        }
        pos += len;
    }
    ComplementarityReport {
        psd,
        nonneg_margin,
        normalization: 1.0,
    }
}

/// Projects a slack vector onto `K` (or a dual vector onto `K*` with
/// `dual = true`; they differ only on zero-cone slots, which are free on
/// the dual side).
fn project_cones(cones: &[Cone], v: &mut [f64], dual: bool) -> Result<()> {
    let mut pos = 0;
    for cone in cones {
        let len = cone.slot_len();
        match cone {
            Cone::Zero(_) => {
                if !dual {
                    v[pos..pos + len].fill(0.0);
                }
            }
            Cone::NonNeg(_) => {
                for t in &mut v[pos..pos + len] {
                    *t = t.max(0.0);
                }
            }
            Cone::Psd(_) => {
                let proj = crate::cone::project_psd(&mat_from_svec(&v[pos..pos + len]))?;
                v[pos..pos + len].copy_from_slice(&crate::cone::svec_from_mat(&proj));
            }
        }
        pos += len;
    }
    Ok(())
}

/// Feasibility polish of a stalled solution by alternating projections.
///
/// Interior-point backends stall short of tolerance on programs without
/// strict feasibility, which split certificate programs routinely lack
/// when the normal flow vanishes somewhere on a face. The primal side is
/// alternately projected onto the affine set `Ax + s = b` (min-norm
/// correction by LSQR) and onto the cone; the dual side likewise onto
/// `A'y + c = 0` and the dual cone. Both reported objectives then come
/// from genuinely feasible points, so the remaining gap is a certified
/// suboptimality bound. Returns the input unchanged if polishing does
/// not improve the worst scaled residual.
pub fn refine_solution(p: &ConicProgram, sol: &ConicSolution, max_rounds: usize) -> ConicSolution {
    let n = p.num_cols();
    let m = p.num_rows();
    let inf_norm = |v: &[f64]| v.iter().fold(0.0f64, |mx, t| mx.max(t.abs()));
    let bscale = 1.0 + inf_norm(&p.b);
    let cscale = 1.0 + inf_norm(&p.c);

    let mut x = sol.x.clone();
    let mut s = sol.s.clone();
    if project_cones(&p.cones, &mut s, false).is_err() {
        return sol.clone();
    }
    for _ in 0..max_rounds {
        // r = b - Ax - s, then the min-norm correction with [A I] d = r
        let mut r = vec![0.0; m];
        p.a.matvec_acc(&x, -1.0, &mut r);
        for i in 0..m {
            r[i] += p.b[i] - s[i];
        }
        if inf_norm(&r) <= 1e-12 * bscale {
            break;
        }
        let (delta, _) = lsqr_operator(
            m,
            n + m,
            |v, out| {
                p.a.matvec_acc(&v[0..n], 1.0, out);
                for i in 0..m {
                    out[i] += v[n + i];
                }
            },
            |u, out| {
                p.a.matvec_transpose_acc(u, 1.0, &mut out[0..n]);
                for i in 0..m {
                    out[n + i] += u[i];
                }
            },
            &r,
            300,
            1e-14,
        );
        for j in 0..n {
            x[j] += delta[j];
        }
        for i in 0..m {
            s[i] += delta[n + i];
        }
        if project_cones(&p.cones, &mut s, false).is_err() {
            return sol.clone();
        }
    }

    let mut y = sol.y.clone();
    if project_cones(&p.cones, &mut y, true).is_err() {
        return sol.clone();
    }
    for _ in 0..max_rounds {
        // r = -c - A'y, min-norm correction with A' d = r
        let mut r = vec![0.0; n];
        p.a.matvec_transpose_acc(&y, -1.0, &mut r);
        for j in 0..n {
            r[j] -= p.c[j];
        }
        if inf_norm(&r) <= 1e-12 * cscale {
            break;
        }
        let (delta, _) = lsqr_operator(
            n,
            m,
            |v, out| p.a.matvec_transpose_acc(v, 1.0, out),
            |u, out| p.a.matvec_acc(u, 1.0, out),
            &r,
            300,
            1e-14,
        );
        for i in 0..m {
            y[i] += delta[i];
        }
        if project_cones(&p.cones, &mut y, true).is_err() {
            return sol.clone();
        }
    }

    let primal_obj: f64 = p.c.iter().zip(&x).map(|(c, x)| c * x).sum();
    let dual_obj: f64 = p.b.iter().zip(&y).map(|(b, y)| b * y).sum();
    let candidate = ConicSolution {
        x,
        y,
        s,
        status: sol.status,
        primal_obj,
        dual_obj,
        iterations: sol.iterations,
    };
    if solution_metric(p, &candidate) < solution_metric(p, sol) {
        candidate
    } else {
        sol.clone()
    }
}

/// Worst scaled optimality residual of a solution; the measure used to
/// decide whether refinement helped and whether a solution meets the
/// adapter contract at a given tolerance. Cone membership and
/// complementarity are exact by construction for refined points, so the
/// measure is the scaled affine residuals and the duality gap.
pub fn solution_metric(p: &ConicProgram, sol: &ConicSolution) -> f64 {
    let bmax = p.b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let cmax = p.c.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let pres = sol.primal_residual_inf(p) / (1.0 + bmax);
    let dres = sol.dual_residual_inf(p) / (1.0 + cmax);
    let gap = (sol.primal_obj + sol.dual_obj).abs() / (1.0 + sol.primal_obj.abs());
    pres.max(dres).max(gap)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cone::{solve, SolveStatus};

    /// min x s.t. x >= theta at theta = 1, the hand-assembled oracle that
    /// pins every sign in the chain.
    fn one_dim_program() -> (ConicProgram, ConicSolution) {
        let p = ConicProgram {
            a: CscMat::from_triplets(1, 1, vec![(0, 0, -1.0)]),
            b: vec![-1.0],
            c: vec![1.0],
            cones: vec![Cone::NonNeg(1)],
        };
        let sol = ConicSolution {
            x: vec![1.0],
            y: vec![1.0],
            s: vec![0.0],
            status: SolveStatus::Optimal,
            primal_obj: 1.0,
            dual_obj: -1.0,
            iterations: 0,
        };
        (p, sol)
    }

    #[test]
    fn embedding_of_scalar_solution() {
        let (_, sol) = one_dim_program();
        let point = build_embedding(&sol);
        assert_eq!(point.z, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn hand_assembled_scalar_sensitivity() {
        let (p, sol) = one_dim_program();
        let point = build_embedding(&sol);
        // d/dtheta of (A, b, c): only b moves, db = -1
        let dd = DataPerturbation {
            da: CscMat::zeros(1, 1),
            db: vec![-1.0],
            dc: vec![0.0],
        };
        let mut sys = assemble_sensitivity(&p, &point, &[dd.clone()]).unwrap();
        // M = Q at this point: skew 3x3 with rows from (A, b, c)
        let expect_q = [
            (0usize, 1usize, -1.0f64),
            (0, 2, 1.0),
            (1, 0, 1.0),
            (1, 2, -1.0),
            (2, 0, -1.0),
            (2, 1, 1.0),
        ];
        for (r, c, v) in expect_q {
            let got = sys
                .matrix
                .col(c)
                .find(|&(row, _)| row == r)
                .map(|(_, v)| v)
                .unwrap_or(0.0);
            assert!((got - v).abs() < 1e-14, "M[{r},{c}] = {got}, want {v}");
        }
        // rhs = -dQ pi with pi = (1, 1, 1)
        assert_eq!(sys.rhs[0], vec![0.0, 1.0, -1.0]);

        let dz = solve_dz_qr(&mut sys).unwrap();
        assert_eq!(sys.factorizations, 1);
        let der = solution_derivative(&p, &sol, &point, &dz[0], &dd).unwrap();
        // p* = theta so dp*/dtheta = 1, through both routes
        assert!((der.dvalue_primal - 1.0).abs() < 1e-8, "{der:?}");
        assert!((der.dvalue_dual - 1.0).abs() < 1e-8, "{der:?}");
        assert!((der.dx[0] - 1.0).abs() < 1e-8);
        assert!(der.dy[0].abs() < 1e-8);

        // LSQR agrees with QR after quotienting the kernel direction
        let (dz_l, reports) = solve_dz_lsqr(&sys, 1000, 1e-12);
        assert!(reports[0].converged);
        let der_l = solution_derivative(&p, &sol, &point, &dz_l[0], &dd).unwrap();
        assert!((der_l.dvalue_primal - 1.0).abs() < 1e-8);
    }

    #[test]
    fn zero_perturbation_gives_zero_derivative() {
        let (p, sol) = one_dim_program();
        let point = build_embedding(&sol);
        let dd = DataPerturbation {
            da: CscMat::zeros(1, 1),
            db: vec![0.0],
            dc: vec![0.0],
        };
        let mut sys = assemble_sensitivity(&p, &point, &[dd.clone()]).unwrap();
        assert!(sys.rhs[0].iter().all(|&v| v == 0.0));
        let dz = solve_dz_qr(&mut sys).unwrap();
        let der = solution_derivative(&p, &sol, &point, &dz[0], &dd).unwrap();
        assert_eq!(der.dvalue_primal, 0.0);
        assert!(der.dx.iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn skew_structure_of_embedding_matrix() {
        let p = ConicProgram {
            a: CscMat::from_triplets(2, 2, vec![(0, 0, 2.0), (1, 1, -3.0), (0, 1, 0.5)]),
            b: vec![1.0, -2.0],
            c: vec![0.25, 0.0],
            cones: vec![Cone::Zero(1), Cone::NonNeg(1)],
        };
        let q = embedding_matrix(&p);
        for (r, c, v) in q.triplets() {
            let back = q
                .col(r)
                .find(|&(row, _)| row == c)
                .map(|(_, v)| v)
                .unwrap_or(0.0);
            assert!((back + v).abs() < 1e-15, "Q not skew at ({r},{c})");
        }
    }

    #[test]
    fn identity_sensitivity_returns_rhs() {
        // M = I happens when Q = 0 and J = I; fabricate it directly
        let matrix = CscMat::identity(5);
        let mut sys = SensitivitySystem {
            matrix,
            rhs: vec![vec![1.0, -2.0, 0.5, 0.0, 3.0]],
            num_primal: 2,
            factorizations: 0,
            qr_residuals: Vec::new(),
        };
        let dz = solve_dz_qr(&mut sys).unwrap();
        for (a, b) in dz[0].iter().zip(&sys.rhs[0]) {
            assert!((a - b).abs() < 1e-9);
        }
        let (dz_l, rep) = solve_dz_lsqr(&sys, 1000, 1e-12);
        assert!(rep[0].converged && rep[0].iterations <= 2);
        for (a, b) in dz_l[0].iter().zip(&sys.rhs[0]) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn lsqr_matches_qr_on_random_system() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let n = 40;
        let mut trips = vec![];
        for i in 0..n {
            trips.push((i, i, 2.0 + rng.random_range(0.0..1.0)));
            let j = rng.random_range(0..n);
            if j != i {
                trips.push((i, j, rng.random_range(-0.3..0.3)));
            }
        }
        let matrix = CscMat::from_triplets(n, n, trips);
        let rhs: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let mut sys = SensitivitySystem {
            matrix,
            rhs,
            num_primal: 10,
            factorizations: 0,
            qr_residuals: Vec::new(),
        };
        let dz_qr = solve_dz_qr(&mut sys).unwrap();
        assert_eq!(sys.factorizations, 1);
        // per-column residuals of the direct solve
        for (g, dz) in sys.rhs.iter().zip(&dz_qr) {
            let r = sys.matrix.matvec(dz);
            let rmax = r
                .iter()
                .zip(g)
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            let gmax = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(rmax <= 1e-9 * gmax.max(1.0));
        }
        let (dz_lsqr, reports) = solve_dz_lsqr(&sys, 1000, 1e-14);
        for ((a, b), rep) in dz_qr.iter().zip(&dz_lsqr).zip(&reports) {
            assert!(rep.converged);
            let diff = a
                .iter()
                .zip(b)
                .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
            assert!(diff <= 1e-6, "QR and LSQR disagree by {diff}");
        }
    }

    #[test]
    fn margins_classify_strict_complementarity() {
        // LP margin: active constraint with positive multiplier
        let (p, sol) = one_dim_program();
        let report = check_differentiability(&p, &sol);
        assert!((report.nonneg_margin - 1.0).abs() < 1e-15);

        // PSD block with Y = diag(1, 0), S = diag(0, 1): margins 1
        let p2 = ConicProgram {
            a: CscMat::from_triplets(3, 1, vec![(0, 0, 1.0)]),
            b: vec![0.0, 0.0, 0.0],
            c: vec![0.0],
            cones: vec![Cone::Psd(2)],
        };
        let mk = |d: [f64; 2]| {
            crate::cone::svec_from_mat(&DMatrix::from_diagonal(&nalgebra::dvector![d[0], d[1]]))
        };
        let sol2 = ConicSolution {
            x: vec![0.0],
            y: mk([1.0, 0.0]),
            s: mk([0.0, 1.0]),
            status: SolveStatus::Optimal,
            primal_obj: 0.0,
            dual_obj: 0.0,
            iterations: 0,
        };
        let report = check_differentiability(&p2, &sol2);
        assert!((report.psd[0].margin - 1.0).abs() < 1e-12);

        // rank-deficient pair Y = diag(1, 0), S = 0: margin 0
        let sol3 = ConicSolution {
            s: mk([0.0, 0.0]),
            ..sol2
        };
        let report = check_differentiability(&p2, &sol3);
        assert!(report.psd[0].margin < 1e-12);
    }

    #[test]
    fn refinement_restores_feasibility() {
        let (p, _) = one_dim_program();
        let clean = solve(&p, 1e-9).unwrap();
        let mut noisy = clean.clone();
        // knock both sides off their affine sets and the slack off the cone
        noisy.s[0] = -2e-4;
        noisy.y[0] += 3e-4;
        noisy.primal_obj = noisy.x[0];
        noisy.dual_obj = -noisy.y[0];
        let before = solution_metric(&p, &noisy);
        let refined = refine_solution(&p, &noisy, 40);
        let after = solution_metric(&p, &refined);
        assert!(after <= before, "polish must never regress the metric");
        assert!(refined.primal_residual_inf(&p) < 1e-10);
        assert!(refined.dual_residual_inf(&p) < 1e-10);
        assert!(refined.s[0] >= 0.0 && refined.y[0] >= 0.0);
    }
}
