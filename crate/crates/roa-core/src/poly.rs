//! Sparse multivariate polynomials over a fixed, positional variable tuple.
//!
//! Variables are positional throughout the crate: time first, then the
//! states, then the inputs. Coefficients are `f64` and the term map is
//! canonical: a coefficient that becomes exactly zero is removed, so two
//! polynomials are equal iff their term maps are equal and program
//! sparsity patterns are reproducible run to run.

use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// A monomial, stored as one exponent per variable.
///
/// Ordering is graded lexicographic: lower total degree first, and within
/// a degree the variable earliest in the tuple dominates, so for two
/// variables the order is `1, x1, x2, x1^2, x1*x2, x2^2, ...`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Monomial(pub Vec<u32>);

impl Monomial {
    pub fn constant(nvars: usize) -> Self {
        Monomial(vec![0; nvars])
    }

    pub fn var(nvars: usize, idx: usize) -> Self {
        let mut e = vec![0; nvars];
        e[idx] = 1;
        Monomial(e)
    }

    pub fn degree(&self) -> u32 {
        self.0.iter().sum()
    }

    pub fn nvars(&self) -> usize {
        self.0.len()
    }

    pub fn mul(&self, other: &Monomial) -> Monomial {
        debug_assert_eq!(self.0.len(), other.0.len());
        Monomial(
            self.0
                .iter()
                .zip(&other.0)
                .map(|(a, b)| a + b)
                .collect(),
        )
    }

    pub fn eval(&self, point: &[f64]) -> f64 {
        debug_assert_eq!(point.len(), self.0.len());
        self.0
            .iter()
            .zip(point)
            .map(|(&e, &x)| x.powi(e as i32))
            .product()
    }
}

impl Ord for Monomial {
    fn cmp(&self, other: &Self) -> Ordering {
        self.degree()
            .cmp(&other.degree())
            // within a degree, larger exponent on an earlier variable sorts first
            .then_with(|| other.0.cmp(&self.0))
    }
}

impl PartialOrd for Monomial {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Image of one variable under an affine change of variables.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum VarImage {
    /// Variable is replaced by a constant.
    Const(f64),
    /// Variable maps to `shift + scale * (target variable)`.
    Affine {
        target: usize,
        scale: f64,
        shift: f64,
    },
}

/// Sparse multivariate polynomial in canonical form.
///
/// Serializes as `{"nvars": n, "terms": [{"exponents": [...], "coeff": c}]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "PolynomialRepr", try_from = "PolynomialRepr")]
pub struct Polynomial {
    nvars: usize,
    terms: BTreeMap<Monomial, f64>,
}

#[derive(Serialize, Deserialize)]
struct TermRepr {
    exponents: Vec<u32>,
    coeff: f64,
}

#[derive(Serialize, Deserialize)]
struct PolynomialRepr {
    nvars: usize,
    terms: Vec<TermRepr>,
}

impl From<Polynomial> for PolynomialRepr {
    fn from(p: Polynomial) -> Self {
        PolynomialRepr {
            nvars: p.nvars,
            terms: p
                .terms
                .into_iter()
                .map(|(m, c)| TermRepr {
                    exponents: m.0,
                    coeff: c,
                })
                .collect(),
        }
    }
}

impl TryFrom<PolynomialRepr> for Polynomial {
    type Error = String;

    fn try_from(repr: PolynomialRepr) -> std::result::Result<Self, String> {
        let mut p = Polynomial::zero(repr.nvars);
        for t in repr.terms {
            if t.exponents.len() != repr.nvars {
                return Err(format!(
                    "term has {} exponents for {} variables",
                    t.exponents.len(),
                    repr.nvars
                ));
            }
            p.add_term(Monomial(t.exponents), t.coeff);
        }
        Ok(p)
    }
}

impl Polynomial {
    pub fn zero(nvars: usize) -> Self {
        Polynomial {
            nvars,
            terms: BTreeMap::new(),
        }
    }

    pub fn constant(nvars: usize, value: f64) -> Self {
        let mut p = Self::zero(nvars);
        p.add_term(Monomial::constant(nvars), value);
        p
    }

    pub fn var(nvars: usize, idx: usize) -> Self {
        assert!(idx < nvars, "variable index out of range");
        let mut p = Self::zero(nvars);
        p.add_term(Monomial::var(nvars, idx), 1.0);
        p
    }

    pub fn from_terms(nvars: usize, terms: impl IntoIterator<Item = (Vec<u32>, f64)>) -> Self {
        let mut p = Self::zero(nvars);
        for (exps, coeff) in terms {
            assert_eq!(exps.len(), nvars, "exponent tuple length mismatch");
            p.add_term(Monomial(exps), coeff);
        }
        p
    }

    pub fn nvars(&self) -> usize {
        self.nvars
    }

    pub fn terms(&self) -> impl Iterator<Item = (&Monomial, f64)> {
        self.terms.iter().map(|(m, &c)| (m, c))
    }

    pub fn num_terms(&self) -> usize {
        self.terms.len()
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn degree(&self) -> u32 {
        self.terms.keys().map(|m| m.degree()).max().unwrap_or(0)
    }

    pub fn coeff(&self, m: &Monomial) -> f64 {
        self.terms.get(m).copied().unwrap_or(0.0)
    }

    /// Adds `coeff * m`, keeping the map canonical (exact zeros dropped).
    pub fn add_term(&mut self, m: Monomial, coeff: f64) {
        debug_assert_eq!(m.nvars(), self.nvars);
        use std::collections::btree_map::Entry;
        match self.terms.entry(m) {
            Entry::Vacant(e) => {
                if coeff != 0.0 {
                    e.insert(coeff);
                }
            }
            Entry::Occupied(mut e) => {
                *e.get_mut() += coeff;
                if *e.get() == 0.0 {
                    e.remove();
                }
            }
        }
    }

    fn check_compat(&self, other: &Polynomial) -> Result<()> {
        if self.nvars != other.nvars {
            return Err(Error::VarCountMismatch(self.nvars, other.nvars));
        }
        Ok(())
    }

    pub fn add(&self, other: &Polynomial) -> Result<Polynomial> {
        self.check_compat(other)?;
        let mut out = self.clone();
        for (m, c) in other.terms() {
            out.add_term(m.clone(), c);
        }
        Ok(out)
    }

    pub fn sub(&self, other: &Polynomial) -> Result<Polynomial> {
        self.check_compat(other)?;
        let mut out = self.clone();
        for (m, c) in other.terms() {
            out.add_term(m.clone(), -c);
        }
        Ok(out)
    }

    pub fn scale(&self, factor: f64) -> Polynomial {
        let mut out = Polynomial::zero(self.nvars);
        if factor == 0.0 {
            return out;
        }
        for (m, c) in self.terms() {
            out.add_term(m.clone(), c * factor);
        }
        out
    }

    pub fn neg(&self) -> Polynomial {
        self.scale(-1.0)
    }

    pub fn mul(&self, other: &Polynomial) -> Result<Polynomial> {
        self.check_compat(other)?;
        let mut out = Polynomial::zero(self.nvars);
        for (ma, ca) in self.terms() {
            for (mb, cb) in other.terms() {
                out.add_term(ma.mul(mb), ca * cb);
            }
        }
        Ok(out)
    }

    /// Partial derivative with respect to variable `idx`.
    pub fn partial(&self, idx: usize) -> Polynomial {
        assert!(idx < self.nvars);
        let mut out = Polynomial::zero(self.nvars);
        for (m, c) in self.terms() {
            let e = m.0[idx];
            if e > 0 {
                let mut exps = m.0.clone();
                exps[idx] -= 1;
                out.add_term(Monomial(exps), c * e as f64);
            }
        }
        out
    }

    pub fn eval(&self, point: &[f64]) -> f64 {
        assert_eq!(point.len(), self.nvars);
        self.terms().map(|(m, c)| c * m.eval(point)).sum()
    }

    /// Applies an affine change of variables into a new ambient tuple.
    ///
    /// `images[i]` says what the old variable `i` becomes; powers of
    /// affine images are expanded binomially. This single operation covers
    /// embedding into a larger tuple, restricting a variable to a
    /// constant, and rescaling cells to the unit box.
    pub fn affine_map(&self, new_nvars: usize, images: &[VarImage]) -> Polynomial {
        assert_eq!(images.len(), self.nvars, "one image per variable required");
        for im in images {
            if let VarImage::Affine { target, .. } = im {
                assert!(*target < new_nvars, "target variable out of range");
            }
        }
        let mut out = Polynomial::zero(new_nvars);
        for (m, c) in self.terms() {
            // product over variables of (shift + scale*y)^e, expanded
            let mut acc: Vec<(Monomial, f64)> = vec![(Monomial::constant(new_nvars), c)];
            for (i, &e) in m.0.iter().enumerate() {
                if e == 0 {
                    continue;
                }
                let factor = Self::image_power(new_nvars, images[i], e);
                let mut next = Vec::with_capacity(acc.len() * factor.len());
                for (am, ac) in &acc {
                    for (fm, fc) in &factor {
                        next.push((am.mul(fm), ac * fc));
                    }
                }
                acc = next;
            }
            for (mm, cc) in acc {
                out.add_term(mm, cc);
            }
        }
        out
    }

    fn image_power(nvars: usize, image: VarImage, e: u32) -> Vec<(Monomial, f64)> {
        match image {
            VarImage::Const(v) => vec![(Monomial::constant(nvars), v.powi(e as i32))],
            VarImage::Affine {
                target,
                scale,
                shift,
            } => {
                // (shift + scale*y)^e via binomial expansion
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

    /// Embeds into a larger variable tuple, keeping positions `0..nvars`.
    pub fn extend_vars(&self, new_nvars: usize) -> Polynomial {
        assert!(new_nvars >= self.nvars);
        let images: Vec<VarImage> = (0..self.nvars)
            .map(|i| VarImage::Affine {
                target: i,
                scale: 1.0,
                shift: 0.0,
            })
            .collect();
        self.affine_map(new_nvars, &images)
    }
}

/// The Lie derivative `dv/dt + grad_x(v) . f` of a time-state polynomial
/// along a controlled vector field.
///
/// `v` lives in `(t, x_1..x_n)`; each component of `f` lives in the full
/// tuple `(t, x_1..x_n, u_1..u_m)`; the result lives in the full tuple.
pub fn lie_derivative(v: &Polynomial, f: &[Polynomial]) -> Result<Polynomial> {
    let n = f.len();
    if v.nvars() != 1 + n {
        return Err(Error::DimensionMismatch(format!(
            "v has {} variables, expected {} for {} states",
            v.nvars(),
            1 + n,
            n
        )));
    }
    let nvars_full = f
        .first()
        .map(|p| p.nvars())
        .unwrap_or(v.nvars());
    for (j, fj) in f.iter().enumerate() {
        if fj.nvars() != nvars_full {
            return Err(Error::DimensionMismatch(format!(
                "dynamics component {j} has {} variables, expected {}",
                fj.nvars(),
                nvars_full
            )));
        }
    }
    if nvars_full < 1 + n {
        return Err(Error::DimensionMismatch(format!(
            "dynamics tuple has {nvars_full} variables, fewer than t and {n} states"
        )));
    }
    let mut out = v.partial(0).extend_vars(nvars_full);
    for (j, fj) in f.iter().enumerate() {
        let dv = v.partial(1 + j).extend_vars(nvars_full);
        out = out.add(&dv.mul(fj)?)?;
    }
    Ok(out)
}

/// All monomials of total degree at most `maxdeg`, in graded-lex order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MonomialBasis {
    pub monomials: Vec<Monomial>,
    pub nvars: usize,
    pub maxdeg: u32,
}

impl MonomialBasis {
    pub fn len(&self) -> usize {
        self.monomials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.monomials.is_empty()
    }

    /// Position of a monomial in the basis, if present.
    pub fn position(&self, m: &Monomial) -> Option<usize> {
        self.monomials.binary_search_by(|b| b.cmp(m)).ok()
    }
}

/// Generates the graded-lex monomial basis of degree at most `maxdeg`.
pub fn monomial_basis(nvars: usize, maxdeg: u32) -> MonomialBasis {
    assert!(nvars >= 1, "basis needs at least one variable");
    let mut monomials = Vec::with_capacity(binomial(nvars + maxdeg as usize, nvars));
    let mut exps = vec![0u32; nvars];
    for deg in 0..=maxdeg {
        gen_fixed_degree(nvars, deg, 0, deg, &mut exps, &mut monomials);
    }
    MonomialBasis {
        monomials,
        nvars,
        maxdeg,
    }
}

fn gen_fixed_degree(
    nvars: usize,
    deg: u32,
    pos: usize,
    remaining: u32,
    exps: &mut Vec<u32>,
    out: &mut Vec<Monomial>,
) {
    if pos == nvars - 1 {
        exps[pos] = remaining;
        out.push(Monomial(exps.clone()));
        exps[pos] = 0;
        return;
    }
    // earlier variables take larger exponents first, matching graded-lex
    for e in (0..=remaining).rev() {
        exps[pos] = e;
        gen_fixed_degree(nvars, deg, pos + 1, remaining - e, exps, out);
    }
    exps[pos] = 0;
}

pub fn binomial(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    acc as usize
}

/// Lebesgue moments of basis monomials over an axis-aligned box.
///
/// The entry for `x^a` is the product over axes of
/// `(hi^(a_i+1) - lo^(a_i+1)) / (a_i + 1)`. A degenerate axis
/// (`lo == hi`) makes every moment zero.
pub fn box_moments(bounds: &[(f64, f64)], basis: &MonomialBasis) -> Vec<f64> {
    assert_eq!(bounds.len(), basis.nvars, "one interval per basis variable");
    basis
        .monomials
        .iter()
        .map(|m| {
            m.0.iter()
                .zip(bounds)
                .map(|(&e, &(lo, hi))| {
                    let p = e as i32 + 1;
                    (hi.powi(p) - lo.powi(p)) / p as f64
                })
                .product()
        })
        .collect()
}
