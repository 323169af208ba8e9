//! Polynomials whose coefficients are affine expressions in the decision
//! variables of the conic program being assembled.
//!
//! Every certificate identity is built as one of these and then read off
//! monomial by monomial into equality rows. Coefficient expressions keep
//! duplicate variable entries; the triplet assembly canonicalizes.

use std::collections::BTreeMap;

use crate::poly::{Monomial, Polynomial, VarImage};

/// Affine expression `constant + sum coeff_i * var_i`.
#[derive(Debug, Clone, Default)]
pub(crate) struct LinExpr {
    pub constant: f64,
    pub terms: Vec<(usize, f64)>,
}

impl LinExpr {
    fn add_scaled(&mut self, other: &LinExpr, factor: f64) {
        self.constant += other.constant * factor;
        self.terms
            .extend(other.terms.iter().map(|&(id, c)| (id, c * factor)));
    }
}

/// Sparse polynomial with [`LinExpr`] coefficients.
#[derive(Debug, Clone)]
pub(crate) struct LinPoly {
    pub nvars: usize,
    pub terms: BTreeMap<Monomial, LinExpr>,
}

impl LinPoly {
    pub fn zero(nvars: usize) -> LinPoly {
        LinPoly {
            nvars,
            terms: BTreeMap::new(),
        }
    }

    /// The decision polynomial `sum_j var_(start+j) * basis_j`.
    pub fn decision(basis: &[Monomial], var_start: usize) -> LinPoly {
        let nvars = basis.first().map(|m| m.nvars()).unwrap_or(0);
        let mut terms = BTreeMap::new();
        for (j, m) in basis.iter().enumerate() {
            terms.insert(
                m.clone(),
                LinExpr {
                    constant: 0.0,
                    terms: vec![(var_start + j, 1.0)],
                },
            );
        }
        LinPoly { nvars, terms }
    }

    pub fn add_constant(&mut self, value: f64) {
        let m = Monomial::constant(self.nvars);
        self.terms.entry(m).or_default().constant += value;
    }

    pub fn add_assign_scaled(&mut self, other: &LinPoly, factor: f64) {
        debug_assert_eq!(self.nvars, other.nvars);
        if factor == 0.0 {
            return;
        }
        for (m, e) in &other.terms {
            self.terms
                .entry(m.clone())
                .or_default()
                .add_scaled(e, factor);
        }
    }

    /// Product with a constant-coefficient polynomial.
    pub fn mul_poly(&self, p: &Polynomial) -> LinPoly {
        debug_assert_eq!(self.nvars, p.nvars());
        let mut out = LinPoly::zero(self.nvars);
        for (ma, ea) in &self.terms {
            for (mb, cb) in p.terms() {
                out.terms
                    .entry(ma.mul(mb))
                    .or_default()
                    .add_scaled(ea, cb);
            }
        }
        out
    }

    /// Partial derivative with respect to variable `idx`.
    pub fn partial(&self, idx: usize) -> LinPoly {
        let mut out = LinPoly::zero(self.nvars);
        for (m, e) in &self.terms {
            let exp = m.0[idx];
            if exp > 0 {
                let mut exps = m.0.clone();
                exps[idx] -= 1;
                out.terms
                    .entry(Monomial(exps))
                    .or_default()
                    .add_scaled(e, exp as f64);
            }
        }
        out
    }

    /// Affine change of variables; same semantics as
    /// [`Polynomial::affine_map`].
    pub fn affine_map(&self, new_nvars: usize, images: &[VarImage]) -> LinPoly {
        debug_assert_eq!(images.len(), self.nvars);
        let mut out = LinPoly::zero(new_nvars);
        for (m, e) in &self.terms {
            let mut acc: Vec<(Monomial, f64)> = vec![(Monomial::constant(new_nvars), 1.0)];
            for (i, &exp) in m.0.iter().enumerate() {
                if exp == 0 {
                    continue;
                }
                let factor = image_power(new_nvars, images[i], exp);
                let mut next = Vec::with_capacity(acc.len() * factor.len());
                for (am, ac) in &acc {
                    for (fm, fc) in &factor {
                        next.push((am.mul(fm), ac * fc));
                    }
                }
                acc = next;
            }
            for (mm, cc) in acc {
                out.terms
                    .entry(mm)
                    .or_default()
                    .add_scaled(e, cc);
            }
        }
        out
    }

    /// Adds `sign * beta' G beta` where the lower triangle of the Gram
    /// matrix `G` occupies consecutive svec slots starting at
    /// `var_start` (off-diagonal slots carry the `sqrt 2` packing).
    pub fn add_gram(&mut self, basis: &[Monomial], var_start: usize, sign: f64) {
        let r = basis.len();
        let sqrt2 = std::f64::consts::SQRT_2;
        let mut slot = var_start;
        for q in 0..r {
            for p in q..r {
                let coeff = if p == q { sign } else { sign * sqrt2 };
                let m = basis[p].mul(&basis[q]);
                self.terms
                    .entry(m)
                    .or_default()
                    .terms
                    .push((slot, coeff));
                slot += 1;
            }
        }
    }
}

fn image_power(nvars: usize, image: VarImage, e: u32) -> Vec<(Monomial, f64)> {
    match image {
        VarImage::Const(v) => vec![(Monomial::constant(nvars), v.powi(e as i32))],
        VarImage::Affine {
            target,
            scale,
            shift,
        } => {
            let mut terms = Vec::with_capacity(e as usize + 1);
            let mut binom = 1.0;
            for k in 0..=e {
                let coeff = binom * shift.powi((e - k) as i32) * scale.powi(k as i32);
                if coeff != 0.0 {
                    let mut exps = vec![0; nvars];
                    exps[target] = k;
                    terms.push((Monomial(exps), coeff));
                }
                binom *= (e - k) as f64 / (k + 1) as f64;
            }
            terms
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::poly::monomial_basis;

    /// Collapses a LinPoly at a concrete assignment of decision variables.
    fn instantiate(lp: &LinPoly, vars: &[f64]) -> Polynomial {
        let mut p = Polynomial::zero(lp.nvars);
        for (m, e) in &lp.terms {
            let mut c = e.constant;
            for &(id, coeff) in &e.terms {
                c += coeff * vars[id];
            }
            p.add_term(m.clone(), c);
        }
        p
    }

    #[test]
    fn decision_polynomial_instantiates() {
        let basis = monomial_basis(2, 1);
        let lp = LinPoly::decision(&basis.monomials, 0);
        let p = instantiate(&lp, &[3.0, 4.0, 5.0]);
        // 3 + 4 x1 + 5 x2
        assert_eq!(p.coeff(&Monomial(vec![0, 0])), 3.0);
        assert_eq!(p.coeff(&Monomial(vec![1, 0])), 4.0);
        assert_eq!(p.coeff(&Monomial(vec![0, 1])), 5.0);
    }

    #[test]
    fn gram_expansion_matches_quadratic_form() {
        // basis (1, x), side 2: slots (g11, sqrt2 g21, g22)
        let basis = monomial_basis(1, 1);
        let mut lp = LinPoly::zero(1);
        lp.add_gram(&basis.monomials, 0, 1.0);
        // choose G = [[2, 0.5], [0.5, 3]]: svec = (2, 0.5*sqrt2, 3)
        let sq2 = std::f64::consts::SQRT_2;
        let p = instantiate(&lp, &[2.0, 0.5 * sq2, 3.0]);
        // beta' G beta = 2 + x + 3x^2
        assert!((p.coeff(&Monomial(vec![0])) - 2.0).abs() < 1e-15);
        assert!((p.coeff(&Monomial(vec![1])) - 1.0).abs() < 1e-15);
        assert!((p.coeff(&Monomial(vec![2])) - 3.0).abs() < 1e-15);
    }

    #[test]
    fn affine_map_commutes_with_instantiation() {
        let basis = monomial_basis(2, 2);
        let lp = LinPoly::decision(&basis.monomials, 0);
        let images = [
            VarImage::Affine {
                target: 0,
                scale: 0.5,
                shift: -1.0,
            },
            VarImage::Const(2.0),
        ];
        let mapped = lp.affine_map(1, &images);
        let vars: Vec<f64> = (0..basis.len()).map(|i| i as f64 - 2.0).collect();
        let direct = instantiate(&lp, &vars).affine_map(1, &images);
        let via_lin = instantiate(&mapped, &vars);
        let diff = direct.sub(&via_lin).unwrap();
        assert!(diff.terms().all(|(_, c)| c.abs() < 1e-12));
    }
}
