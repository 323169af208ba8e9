//! Standard-form conic programs, the solver adapter and cone projection
//! operators.
//!
//! The primal-dual pair is fixed crate-wide as
//!
//! ```text
//! min c'x  s.t.  Ax + s = b, s in K        (primal)
//! min b'y  s.t.  A'y + c = 0, y in K*      (dual, p* = -d*)
//! ```
//!
//! with `K` an ordered product of zero, nonnegative and PSD-triangle
//! cones. PSD slots hold `svec` packings: lower triangle, column-major,
//! off-diagonal entries scaled by `sqrt(2)`, which makes the packing an
//! isometry. Every module that touches PSD slots shares these functions.

pub mod io;
mod proj;
mod solver;

pub use proj::{
    dproject_embedding, dproject_psd, embedding_projection_jacobian,
    embedding_projection_subjacobian, project_embedding, project_psd, DerivBlock,
    EmbeddingDerivative,
};
pub use solver::solve;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparse::CscMat;

/// One cone block in the product `K`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Cone {
    /// `{0}^len`, i.e. equality rows.
    Zero(usize),
    /// Nonnegative orthant of dimension `len`.
    NonNeg(usize),
    /// PSD matrices of side `side`, packed into `side*(side+1)/2` slots.
    Psd(usize),
}

impl Cone {
    /// Number of scalar slots the block occupies.
    pub fn slot_len(&self) -> usize {
        match *self {
            Cone::Zero(len) | Cone::NonNeg(len) => len,
            Cone::Psd(side) => svec_len(side),
        }
    }
}

/// Conic program data in standard form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConicProgram {
    pub a: CscMat,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub cones: Vec<Cone>,
}

impl ConicProgram {
    pub fn num_rows(&self) -> usize {
        self.a.nrows()
    }

    pub fn num_cols(&self) -> usize {
        self.a.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let slots: usize = self.cones.iter().map(Cone::slot_len).sum();
        if slots != self.a.nrows() || self.b.len() != self.a.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "cone slots {} vs {} rows, b has {}",
                slots,
                self.a.nrows(),
                self.b.len()
            )));
        }
        if self.c.len() != self.a.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "c has {} entries for {} columns",
                self.c.len(),
                self.a.ncols()
            )));
        }
        // fixed ordering: zero, then nonneg, then psd blocks
        let mut stage = 0;
        for cone in &self.cones {
            let s = match cone {
                Cone::Zero(_) => 0,
                Cone::NonNeg(_) => 1,
                Cone::Psd(_) => 2,
            };
            if s < stage {
                return Err(Error::DimensionMismatch(
                    "cones out of order (zero, nonneg, psd required)".into(),
                ));
            }
            stage = s;
        }
        Ok(())
    }

    /// Slot offsets of each cone block.
    pub fn cone_offsets(&self) -> Vec<usize> {
        let mut offs = Vec::with_capacity(self.cones.len());
        let mut pos = 0;
        for cone in &self.cones {
            offs.push(pos);
            pos += cone.slot_len();
        }
        offs
    }
}

/// Solver outcome classification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    Unbounded,
    Inaccurate,
}

/// Primal-dual solution as returned by the adapter.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConicSolution {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub s: Vec<f64>,
    pub status: SolveStatus,
    /// `c'x`
    pub primal_obj: f64,
    /// `b'y`; at an optimum `primal_obj + dual_obj ~ 0`.
    pub dual_obj: f64,
    /// Iterations reported by the backend.
    pub iterations: u32,
}

impl ConicSolution {
    /// `||Ax + s - b||_inf`
    pub fn primal_residual_inf(&self, p: &ConicProgram) -> f64 {
        let mut r = p.a.matvec(&self.x);
        for i in 0..r.len() {
            r[i] += self.s[i] - p.b[i];
        }
        r.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// `||A'y + c||_inf`
    pub fn dual_residual_inf(&self, p: &ConicProgram) -> f64 {
        let mut r = p.a.matvec_transpose(&self.y);
        for i in 0..r.len() {
            r[i] += p.c[i];
        }
        r.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// `|s'y|`
    pub fn complementarity_gap(&self) -> f64 {
        self.s
            .iter()
            .zip(&self.y)
            .map(|(s, y)| s * y)
            .sum::<f64>()
            .abs()
    }
}

/// Slots used by the `svec` packing of a symmetric matrix of side `r`.
pub fn svec_len(r: usize) -> usize {
    r * (r + 1) / 2
}

/// Slot of entry `(p, q)`, `p >= q`, in lower-triangle column-major
/// order.
pub fn svec_index(r: usize, p: usize, q: usize) -> usize {
    debug_assert!(p >= q && p < r);
    q * (2 * r - q + 1) / 2 + (p - q)
}

/// Scaling applied to entry `(p, q)` when packing.
pub fn svec_scale(p: usize, q: usize) -> f64 {
    if p == q {
        1.0
    } else {
        std::f64::consts::SQRT_2
    }
}

/// Packs the lower triangle of a symmetric matrix.
pub fn svec_from_mat(mat: &nalgebra::DMatrix<f64>) -> Vec<f64> {
    let r = mat.nrows();
    debug_assert_eq!(r, mat.ncols());
    let mut out = Vec::with_capacity(svec_len(r));
    for q in 0..r {
        for p in q..r {
            out.push(mat[(p, q)] * svec_scale(p, q));
        }
    }
    out
}

/// Unpacks an `svec` slot vector into the full symmetric matrix.
pub fn mat_from_svec(v: &[f64]) -> nalgebra::DMatrix<f64> {
    let r = side_from_svec_len(v.len());
    let mut mat = nalgebra::DMatrix::zeros(r, r);
    let mut idx = 0;
    for q in 0..r {
        for p in q..r {
            let val = v[idx] / svec_scale(p, q);
            mat[(p, q)] = val;
            mat[(q, p)] = val;
            idx += 1;
        }
    }
    mat
}

pub fn side_from_svec_len(len: usize) -> usize {
    let r = ((((8 * len + 1) as f64).sqrt() - 1.0) / 2.0).round() as usize;
    debug_assert_eq!(svec_len(r), len, "not a triangular number");
    r
}
