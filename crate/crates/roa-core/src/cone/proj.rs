//! Cone projections and their directional derivatives.
//!
//! The embedding projection acts on `z = (u | v | w)` where `u` is free,
//! `v` is projected onto the dual cone `K*` blockwise and `w` onto the
//! nonnegative half-line. The PSD projection clips negative eigenvalues;
//! its derivative uses the baked two-block eigenvalue formula with the
//! eigenvalues sorted ascending so the leading block is the negative one.

use nalgebra::{DMatrix, DVector};

use super::{mat_from_svec, svec_from_mat, Cone};
use crate::error::{Error, Result};

/// Symmetric eigendecomposition with eigenvalues sorted ascending.
fn eigh_sorted(mat: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if mat.iter().any(|v| !v.is_finite()) {
        return Err(Error::EigenFailed("non-finite entries".into()));
    }
    let sym = (mat + mat.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let r = mat.nrows();
    let mut vals = DVector::zeros(r);
    let mut vecs = DMatrix::zeros(r, r);
    for (new, &old) in order.iter().enumerate() {
        vals[new] = eig.eigenvalues[old];
        vecs.set_column(new, &eig.eigenvectors.column(old));
    }
    Ok((vals, vecs))
}

/// Nearest PSD matrix in Frobenius norm.
pub fn project_psd(mat: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (vals, vecs) = eigh_sorted(mat)?;
    let clipped = DVector::from_iterator(vals.len(), vals.iter().map(|&l| l.max(0.0)));
    Ok(&vecs * DMatrix::from_diagonal(&clipped) * vecs.transpose())
}

fn psd_singularity_tol(vals: &DVector<f64>) -> f64 {
    let spectral = vals.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    1e-9 * (1.0 + spectral)
}

/// Directional derivative of [`project_psd`] at a nonsingular point.
pub fn dproject_psd(mat: &DMatrix<f64>, dir: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (vals, vecs) = eigh_sorted(mat)?;
    let tol = psd_singularity_tol(&vals);
    if vals.iter().any(|&l| l.abs() < tol) {
        return Err(Error::NotDifferentiable(format!(
            "eigenvalue {:.3e} within singularity tolerance {:.3e}",
            vals.iter().fold(f64::INFINITY, |m, v| m.min(v.abs())),
            tol
        )));
    }
    Ok(dproject_psd_with_eigh(&vals, &vecs, dir))
}

/// Derivative evaluation when the eigendecomposition is already at hand.
fn dproject_psd_with_eigh(
    vals: &DVector<f64>,
    vecs: &DMatrix<f64>,
    dir: &DMatrix<f64>,
) -> DMatrix<f64> {
    let r = vals.len();
    let neg = vals.iter().take_while(|&&l| l < 0.0).count();
    let sym_dir = (dir + dir.transpose()) * 0.5;
    let mut inner = vecs.transpose() * sym_dir * vecs;
    for i in 0..r {
        for j in 0..r {
            let denom = vals[i].abs() + vals[j].abs();
            let scale = if i < neg && j < neg {
                0.0
            } else if i >= neg && j < neg {
                // an exactly-zero pair is a kink; pick the midpoint element
                if denom == 0.0 {
                    0.5
                } else {
                    vals[i].abs() / denom
                }
            } else if i < neg && j >= neg {
                if denom == 0.0 {
                    0.5
                } else {
                    vals[j].abs() / denom
                }
            } else {
                1.0
            };
            inner[(i, j)] *= scale;
        }
    }
    vecs * inner * vecs.transpose()
}

/// Block-diagonal Jacobian of the embedding projection at a point.
#[derive(Debug, Clone)]
pub enum DerivBlock {
    Identity { offset: usize, len: usize },
    Diag { offset: usize, d: Vec<f64> },
    Dense { offset: usize, mat: DMatrix<f64> },
}

#[derive(Debug, Clone)]
pub struct EmbeddingDerivative {
    pub blocks: Vec<DerivBlock>,
    pub dim: usize,
}

impl EmbeddingDerivative {
    /// Applies the Jacobian to a direction vector.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        debug_assert_eq!(v.len(), self.dim);
        let mut out = vec![0.0; self.dim];
        for block in &self.blocks {
            match block {
                DerivBlock::Identity { offset, len } => {
                    out[*offset..offset + len].copy_from_slice(&v[*offset..offset + len]);
                }
                DerivBlock::Diag { offset, d } => {
                    for (i, di) in d.iter().enumerate() {
                        out[offset + i] = di * v[offset + i];
                    }
                }
                DerivBlock::Dense { offset, mat } => {
                    let q = mat.nrows();
                    for row in 0..q {
                        let mut acc = 0.0;
                        for col in 0..q {
                            acc += mat[(row, col)] * v[offset + col];
                        }
                        out[offset + row] = acc;
                    }
                }
            }
        }
        out
    }
}

fn partition_check(nx: usize, cones: &[Cone], z: &[f64]) -> usize {
    let m: usize = cones.iter().map(Cone::slot_len).sum();
    assert_eq!(
        z.len(),
        nx + m + 1,
        "embedding point length does not match the cone layout"
    );
    m
}

/// Projection onto `R^nx x K* x R+` applied to `z = (u | v | w)`.
pub fn project_embedding(nx: usize, cones: &[Cone], z: &[f64]) -> Result<Vec<f64>> {
    partition_check(nx, cones, z);
    let mut out = z.to_vec();
    let mut pos = nx;
    for cone in cones {
        let len = cone.slot_len();
        match cone {
            // dual of the zero cone is everything: identity
            Cone::Zero(_) => {}
            Cone::NonNeg(_) => {
                for v in &mut out[pos..pos + len] {
                    *v = v.max(0.0);
                }
            }
            Cone::Psd(_) => {
                let block = mat_from_svec(&z[pos..pos + len]);
                let proj = project_psd(&block)?;
                out[pos..pos + len].copy_from_slice(&svec_from_mat(&proj));
            }
        }
        pos += len;
    }
    let w = out.len() - 1;
    out[w] = out[w].max(0.0);
    Ok(out)
}

fn jacobian_impl(nx: usize, cones: &[Cone], z: &[f64], strict: bool) -> Result<EmbeddingDerivative> {
    partition_check(nx, cones, z);
    let dim = z.len();
    let mut blocks = Vec::with_capacity(cones.len() + 2);
    if nx > 0 {
        blocks.push(DerivBlock::Identity { offset: 0, len: nx });
    }
    let mut pos = nx;
    for cone in cones {
        let len = cone.slot_len();
        match cone {
            Cone::Zero(_) => blocks.push(DerivBlock::Identity { offset: pos, len }),
            Cone::NonNeg(_) => {
                let mut d = Vec::with_capacity(len);
                for &v in &z[pos..pos + len] {
                    if strict && v.abs() < 1e-12 {
                        return Err(Error::NotDifferentiable(format!(
                            "nonnegative slot at {v:.3e} sits on the cone boundary"
                        )));
                    }
                    d.push(if v > 0.0 {
                        1.0
                    } else if v < 0.0 {
                        0.0
                    } else {
                        0.5
                    });
                }
                blocks.push(DerivBlock::Diag { offset: pos, d });
            }
            Cone::Psd(side) => {
                let block = mat_from_svec(&z[pos..pos + len]);
                let (vals, vecs) = eigh_sorted(&block)?;
                if strict {
                    let tol = psd_singularity_tol(&vals);
                    if vals.iter().any(|&l| l.abs() < tol) {
                        return Err(Error::NotDifferentiable(format!(
                            "PSD block of side {side} has an eigenvalue within {tol:.3e} of zero"
                        )));
                    }
                }
                // svec-space matrix of X~ -> U (B o (U' X~ U)) U'
                let q = len;
                let mut mat = DMatrix::zeros(q, q);
                let mut unit = vec![0.0; q];
                for col in 0..q {
                    unit[col] = 1.0;
                    let dir = mat_from_svec(&unit);
                    unit[col] = 0.0;
                    let image = dproject_psd_with_eigh(&vals, &vecs, &dir);
                    let packed = svec_from_mat(&image);
                    for row in 0..q {
                        mat[(row, col)] = packed[row];
                    }
                }
                blocks.push(DerivBlock::Dense { offset: pos, mat });
            }
        }
        pos += len;
    }
    let w = z[dim - 1];
    if strict && w.abs() < 1e-12 {
        return Err(Error::NotDifferentiable(
            "normalization coordinate at zero".into(),
        ));
    }
    blocks.push(DerivBlock::Diag {
        offset: dim - 1,
        d: vec![if w > 0.0 {
            1.0
        } else if w < 0.0 {
            0.0
        } else {
            0.5
        }],
    });
    Ok(EmbeddingDerivative { blocks, dim })
}

/// Jacobian of [`project_embedding`] at `z`, as reusable block structure.
///
/// Fails at nondifferentiable points: a nonnegative slot or the last
/// coordinate at zero, or a singular PSD block.
pub fn embedding_projection_jacobian(
    nx: usize,
    cones: &[Cone],
    z: &[f64],
) -> Result<EmbeddingDerivative> {
    jacobian_impl(nx, cones, z, true)
}

/// Like [`embedding_projection_jacobian`] but never fails: at kinks it
/// returns a fixed subdifferential element. Used by the solution refiner,
/// which only needs a descent-quality local model.
pub fn embedding_projection_subjacobian(
    nx: usize,
    cones: &[Cone],
    z: &[f64],
) -> Result<EmbeddingDerivative> {
    jacobian_impl(nx, cones, z, false)
}

/// Directional derivative of the embedding projection.
pub fn dproject_embedding(nx: usize, cones: &[Cone], z: &[f64], dz: &[f64]) -> Result<Vec<f64>> {
    let jac = embedding_projection_jacobian(nx, cones, z)?;
    Ok(jac.apply(dz))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_symmetric(r: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(r, r);
        for q in 0..r {
            for p in q..r {
                let v: f64 = rng.random_range(-1.0..1.0);
                m[(p, q)] = v;
                m[(q, p)] = v;
            }
        }
        m
    }

    #[test]
    fn projection_fixes_identity_and_clips_diag() {
        let id = DMatrix::identity(3, 3);
        assert_eq!(project_psd(&id).unwrap(), id);
        let d = DMatrix::from_diagonal(&nalgebra::dvector![1.0, -1.0]);
        let proj = project_psd(&d).unwrap();
        let expect = DMatrix::from_diagonal(&nalgebra::dvector![1.0, 0.0]);
        assert!((proj - expect).norm() < 1e-14);
    }

    #[test]
    fn projection_matches_eigenvalue_clipping_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let m = random_symmetric(6, &mut rng);
            let proj = project_psd(&m).unwrap();
            // brute-force oracle: clip eigenvalues of a fresh decomposition
            let eig = m.clone().symmetric_eigen();
            let clipped = DVector::from_iterator(6, eig.eigenvalues.iter().map(|&l| l.max(0.0)));
            let oracle = &eig.eigenvectors * DMatrix::from_diagonal(&clipped)
                * eig.eigenvectors.transpose();
            assert!((proj - oracle).norm() < 1e-12);
        }
    }

    #[test]
    fn derivative_identity_on_definite_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dir = random_symmetric(4, &mut rng);
        let pos = DMatrix::identity(4, 4) * 2.0;
        let d = dproject_psd(&pos, &dir).unwrap();
        assert!((&d - &dir).norm() < 1e-12);
        let neg = DMatrix::identity(4, 4) * -2.0;
        let d = dproject_psd(&neg, &dir).unwrap();
        assert!(d.norm() < 1e-14);
    }

    #[test]
    fn derivative_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let x = random_symmetric(5, &mut rng);
            // keep clearly nonsingular points only
            if x
                .clone()
                .symmetric_eigen()
                .eigenvalues
                .iter()
                .any(|l| l.abs() < 1e-3)
            {
                continue;
            }
            let dir = random_symmetric(5, &mut rng);
            let analytic = dproject_psd(&x, &dir).unwrap();
            let h = 1e-6;
            let fd = (project_psd(&(&x + &dir * h)).unwrap()
                - project_psd(&(&x - &dir * h)).unwrap())
                / (2.0 * h);
            assert!(
                (&analytic - &fd).amax() < 1e-6,
                "finite-difference mismatch {:.3e}",
                (&analytic - &fd).amax()
            );
        }
    }

    #[test]
    fn singular_point_is_rejected() {
        let x = DMatrix::from_diagonal(&nalgebra::dvector![1.0, 0.0]);
        let dir = DMatrix::identity(2, 2);
        assert!(matches!(
            dproject_psd(&x, &dir),
            Err(Error::NotDifferentiable(_))
        ));
    }

    #[test]
    fn embedding_projection_blockwise() {
        // layout: nx = 2 free, zero-dual 1, nonneg 2, psd side 2, then w
        let cones = [Cone::Zero(1), Cone::NonNeg(2), Cone::Psd(2)];
        let z = vec![1.0, -2.0, 5.0, -3.0, 4.0, 1.0, 0.0, -1.0, 1.0];
        let p = project_embedding(2, &cones, &z).unwrap();
        assert_eq!(&p[0..2], &[1.0, -2.0]); // free
        assert_eq!(p[2], 5.0); // zero-dual is free
        assert_eq!(&p[3..5], &[0.0, 4.0]); // nonneg
        let psd = mat_from_svec(&p[5..8]);
        let oracle = project_psd(&mat_from_svec(&z[5..8])).unwrap();
        assert!((psd - oracle).norm() < 1e-14);
        assert_eq!(p[8], 1.0);

        // derivative coefficient of the clipped nonneg slot is zero
        let jac = embedding_projection_jacobian(2, &cones, &z).unwrap();
        let mut dz = vec![0.0; z.len()];
        dz[3] = 1.0;
        assert_eq!(jac.apply(&dz)[3], 0.0);
    }

    proptest! {
        #[test]
        fn projection_idempotent_and_moreau(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_symmetric(5, &mut rng);
            let p = project_psd(&x).unwrap();
            let pp = project_psd(&p).unwrap();
            prop_assert!((&pp - &p).amax() <= 1e-12 * (1.0 + p.amax()));
            // Moreau: X = proj(X) - proj(-X)
            let pneg = project_psd(&(-&x)).unwrap();
            let recon = &p - &pneg;
            prop_assert!((&recon - &x).amax() <= 1e-12 * (1.0 + x.amax()));
        }

        #[test]
        fn projection_derivative_self_adjoint(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_symmetric(5, &mut rng);
            prop_assume!(x
                .clone()
                .symmetric_eigen()
                .eigenvalues
                .iter()
                .all(|l| l.abs() > 1e-6));
            let a = random_symmetric(5, &mut rng);
            let b = random_symmetric(5, &mut rng);
            let da = dproject_psd(&x, &a).unwrap();
            let db = dproject_psd(&x, &b).unwrap();
            let lhs: f64 = da.iter().zip(b.iter()).map(|(p, q)| p * q).sum();
            let rhs: f64 = a.iter().zip(db.iter()).map(|(p, q)| p * q).sum();
            prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()));
        }
    }
}
