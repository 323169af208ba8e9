//! Compiler from the split certificate program to standard conic form.
//!
//! For every cell `i` and time interval `k` the program carries a
//! polynomial piece `v_{i,k}(t, x)` plus per-cell mass polynomials
//! `w_i(x)`; the constraint families are
//!
//!   (a) flow:           -Lv_{i,k} is SOS modulo the cell description
//!   (b) initial:        w_i - v_{i,1}(0,.) - 1 is SOS modulo the cell
//!   (c) terminal:       v_{i,K-1}(T,.) is SOS modulo target and cell
//!   (d) mass:           w_i is SOS modulo the cell
//!   (e) time interface: v_{i,k}(T_{k+1},.) - v_{i,k+1}(T_{k+1},.) is SOS
//!   (f) face interface: +-(v_a - v_b) on each shared face, with an SOS
//!       multiplier against the normal flow component and the face
//!       description
//!
//! Each SOS membership becomes a PSD block whose Gram entries are free
//! program variables copied into PSD slots; coefficient matching becomes
//! zero-cone rows. Multiplier degrees are the largest even degrees that
//! keep every product within the relaxation budget: `d` everywhere,
//! except family (a) where the budget is `d + deg f` since the Lie
//! derivative itself reaches that degree.
//!
//! Every cell and interval is affinely rescaled to `[-1, 1]` internally
//! (conditioning); zero-width cells from coincident splits fall back to a
//! pure translation so nothing divides by zero, and their set
//! descriptions collapse to `-x^2 >= 0`, pinning the lost dimension.
//! Certificates are mapped back to original coordinates on extraction.
//!
//! The layout (dimensions, cone list, index maps) depends only on the
//! split counts and set degrees, never on split positions, which is what
//! lets the program data be differenced in position.

mod linpoly;

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::cone::{svec_len, Cone, ConicProgram, ConicSolution, SolveStatus};
use crate::error::{Error, Result};
use crate::model::{Decomposition, SystemSpec};
use crate::poly::{box_moments, monomial_basis, Monomial, MonomialBasis, Polynomial, VarImage};
use crate::sparse::CscMat;
use linpoly::LinPoly;

/// Constraint family tags for rows and Gram blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Family {
    Flow,
    Initial,
    Terminal,
    Mass,
    TimeInterface,
    /// Face with sign-indefinite affine normal flow in the face
    /// variables: rows tying the piece jump to `flow * quotient`.
    FaceQuotientLink,
    /// Sign certificate on a face: the quotient (or the jump itself when
    /// the normal flow is sign-definite) is SOS modulo the face.
    FaceSign,
    /// Face whose normal flow is input-driven and sign-indefinite: the
    /// jump must vanish, enforced as plain equality rows.
    FaceContinuity,
    /// General-flow fallback, the two-sided multiplier form.
    FaceUpwind,
    FaceDownwind,
}

/// Where one identity lives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdentityKey {
    pub family: Family,
    pub box_i: Option<usize>,
    pub interval_k: Option<usize>,
    pub neighbor: Option<usize>,
}

/// One SOS multiplier's Gram block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GramInfo {
    pub key: IdentityKey,
    /// 0 is the identity's main SOS term, then one per multiplied
    /// description in emission order.
    pub ordinal: usize,
    /// Side of the Gram matrix.
    pub side: usize,
    /// Columns holding the svec of the Gram block.
    pub vars: Range<usize>,
    /// PSD slot rows enforcing membership.
    pub slots: Range<usize>,
}

/// Equality rows of one identity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowBlock {
    pub key: IdentityKey,
    pub rows: Range<usize>,
}

/// Positions of every decision polynomial in the variable vector.
#[derive(Debug, Clone, PartialEq)]
pub struct VariableMap {
    /// `v[i][k]`: coefficient range of the piece on cell `i`, interval `k`.
    pub v: Vec<Vec<Range<usize>>>,
    /// `w[i]`: coefficient range of the mass polynomial on cell `i`.
    pub w: Vec<Range<usize>>,
    pub v_basis: MonomialBasis,
    pub w_basis: MonomialBasis,
    pub grams: Vec<GramInfo>,
    /// Face quotient polynomials, keyed `(neighbor, interval)`.
    pub face_quotients: Vec<(usize, usize, Range<usize>)>,
    pub num_vars: usize,
}

/// Affine frame mapping scaled coordinates to original ones,
/// `orig_p = center_p + scale_p * scaled_p`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub center: Vec<f64>,
    pub scale: Vec<f64>,
    pub degenerate: Vec<bool>,
}

impl Frame {
    pub fn from_bounds(bounds: &[(f64, f64)]) -> Frame {
        let mut center = Vec::with_capacity(bounds.len());
        let mut scale = Vec::with_capacity(bounds.len());
        let mut degenerate = Vec::with_capacity(bounds.len());
        for &(lo, hi) in bounds {
            let c = 0.5 * (lo + hi);
            let r = 0.5 * (hi - lo);
            center.push(c);
            degenerate.push(r == 0.0);
            scale.push(if r == 0.0 { 1.0 } else { r });
        }
        Frame {
            center,
            scale,
            degenerate,
        }
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    /// Images of the original variables for substituting original-space
    /// polynomials into scaled coordinates; variable `p` lands at
    /// `offset + p` of the new ambient tuple.
    fn into_scaled(&self, offset: usize) -> Vec<VarImage> {
        (0..self.dim())
            .map(|p| VarImage::Affine {
                target: offset + p,
                scale: self.scale[p],
                shift: self.center[p],
            })
            .collect()
    }

    /// Images of the scaled variables for mapping decision polynomials
    /// back to original coordinates.
    fn into_original(&self, offset: usize) -> Vec<VarImage> {
        (0..self.dim())
            .map(|p| VarImage::Affine {
                target: offset + p,
                scale: 1.0 / self.scale[p],
                shift: -self.center[p] / self.scale[p],
            })
            .collect()
    }

    /// Per-axis quadratic descriptions in scaled coordinates:
    /// `1 - x_p^2` for a real extent, `-x_p^2` for a collapsed one.
    fn descriptions(&self, ambient: usize, offset: usize) -> Vec<Polynomial> {
        (0..self.dim())
            .map(|p| {
                let mut g = Polynomial::zero(ambient);
                if !self.degenerate[p] {
                    g.add_term(Monomial::constant(ambient), 1.0);
                }
                let mut exps = vec![0u32; ambient];
                exps[offset + p] = 2;
                g.add_term(Monomial(exps), -1.0);
                g
            })
            .collect()
    }
}

/// Compiler output: the conic program plus everything needed to go back
/// from solution vectors to polynomials.
#[derive(Debug, Clone)]
pub struct CompiledProgram {
    pub program: ConicProgram,
    pub degree: u32,
    pub var_map: VariableMap,
    pub row_blocks: Vec<RowBlock>,
    pub num_eq_rows: usize,
    pub box_frames: Vec<Frame>,
    pub time_frames: Vec<Frame>,
    pub dec: Decomposition,
}

impl CompiledProgram {
    /// Layout equality: dimensions, cone list, index maps. This is the
    /// precondition for differencing program data across nearby split
    /// positions.
    pub fn same_layout(&self, other: &CompiledProgram) -> bool {
        self.degree == other.degree
            && self.program.num_rows() == other.program.num_rows()
            && self.program.num_cols() == other.program.num_cols()
            && self.program.cones == other.program.cones
            && self.var_map == other.var_map
            && self.row_blocks == other.row_blocks
    }

    /// Full structural equality: layout plus the stored pattern of `A`.
    pub fn same_structure(&self, other: &CompiledProgram) -> bool {
        self.same_layout(other) && self.program.a.same_pattern(&other.program.a)
    }
}

/// Piecewise certificate in original coordinates.
///
/// The outer approximation of the ROA is the zero super-level set of
/// `v(0, .)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PiecewiseCertificate {
    /// `v[i][k]`, polynomials in `(t, x)`.
    pub v: Vec<Vec<Polynomial>>,
    /// `w[i]`, polynomials in `x`.
    pub w: Vec<Polynomial>,
    pub dec: Decomposition,
    pub degree: u32,
}

fn even_cap(budget: i64, degree: u32, what: &str) -> Result<u32> {
    if budget < 0 {
        return Err(Error::DegreeTooSmall(
            degree,
            format!("no multiplier degree available for {what} (budget {budget})"),
        ));
    }
    Ok((budget as u32) & !1)
}

struct Builder {
    triplets: Vec<(usize, usize, f64)>,
    b: Vec<f64>,
    row_blocks: Vec<RowBlock>,
    grams: Vec<GramInfo>,
    next_var: usize,
}

impl Builder {
    /// Allocates a Gram block over `basis` and appends
    /// `sign * (times) * b' G b` to the identity expression.
    fn add_sos(
        &mut self,
        expr: &mut LinPoly,
        basis: &MonomialBasis,
        key: IdentityKey,
        ordinal: usize,
        sign: f64,
        times: Option<&Polynomial>,
    ) {
        let side = basis.len();
        let start = self.next_var;
        self.next_var += svec_len(side);
        self.grams.push(GramInfo {
            key,
            ordinal,
            side,
            vars: start..self.next_var,
            slots: 0..0, // filled once the equality block is complete
        });
        match times {
            None => expr.add_gram(&basis.monomials, start, sign),
            Some(g) => {
                let mut gram = LinPoly::zero(expr.nvars);
                gram.add_gram(&basis.monomials, start, 1.0);
                expr.add_assign_scaled(&gram.mul_poly(g), sign);
            }
        }
    }

    /// Emits the coefficient-matching rows of `expr == 0` over the full
    /// monomial basis of degree `row_deg`, so the row count is a
    /// structural constant.
    fn emit_identity(&mut self, expr: &LinPoly, row_deg: u32, key: IdentityKey) {
        debug_assert!(
            expr.terms.keys().all(|m| m.degree() <= row_deg),
            "identity degree exceeds its row budget"
        );
        let basis = monomial_basis(expr.nvars, row_deg);
        let start = self.b.len();
        for m in &basis.monomials {
            let row = self.b.len();
            match expr.terms.get(m) {
                Some(e) => {
                    for &(id, c) in &e.terms {
                        self.triplets.push((row, id, c));
                    }
                    self.b.push(-e.constant);
                }
                None => self.b.push(0.0),
            }
        }
        self.row_blocks.push(RowBlock {
            key,
            rows: start..self.b.len(),
        });
    }
}

/// Tests whether a cell meets the target set by maximizing the worst
/// inequality over the cell: a coarse grid seed plus cyclic coordinate
/// ternary search. The refinement matters for targets of measure zero
/// (a single point), which any fixed sampling grid misses.
fn box_intersects_target(sys: &SystemSpec, bounds: &[(f64, f64)]) -> bool {
    if sys.xt_set.is_empty() {
        return true;
    }
    let n = sys.n;
    let worst = |x: &[f64]| -> f64 {
        sys.xt_set
            .iter()
            .map(|g| g.eval(x))
            .fold(f64::INFINITY, f64::min)
    };
    let mut best_x: Vec<f64> = bounds.iter().map(|(lo, hi)| 0.5 * (lo + hi)).collect();
    let mut best = worst(&best_x);
    let mut idx = vec![0usize; n];
    'grid: loop {
        let x: Vec<f64> = (0..n)
            .map(|p| {
                let (lo, hi) = bounds[p];
                lo + (hi - lo) * idx[p] as f64 / 2.0
            })
            .collect();
        let v = worst(&x);
        if v > best {
            best = v;
            best_x = x;
        }
        for p in 0..n {
            idx[p] += 1;
            if idx[p] < 3 {
                continue 'grid;
            }
            idx[p] = 0;
        }
        break;
    }
    for _ in 0..4 {
        for p in 0..n {
            let (mut lo, mut hi) = bounds[p];
            for _ in 0..60 {
                let m1 = lo + (hi - lo) / 3.0;
                let m2 = hi - (hi - lo) / 3.0;
                let mut x1 = best_x.clone();
                x1[p] = m1;
                let mut x2 = best_x.clone();
                x2[p] = m2;
                if worst(&x1) < worst(&x2) {
                    lo = m1;
                } else {
                    hi = m2;
                }
            }
            let mut x = best_x.clone();
            x[p] = 0.5 * (lo + hi);
            let v = worst(&x);
            if v > best {
                best = v;
                best_x = x;
            }
        }
    }
    let scale = 1.0
        + bounds
            .iter()
            .fold(0.0f64, |m, (lo, hi)| m.max(lo.abs()).max(hi.abs()));
    best >= -1e-9 * scale
}

/// Range of an affine function over the scaled face domain: scaled time
/// and in-face coordinates run over `[-1, 1]` (collapsed ones sit at 0)
/// and inputs over the corners of the input bounding box. Exact for
/// affine functions, which attain extremes at corners.
fn affine_range_on_face(
    flow: &Polynomial,
    amb_face: usize,
    sys: &SystemSpec,
    tf: &Frame,
    face_frame: &Frame,
    axis: usize,
) -> (f64, f64) {
    let dim = amb_face + sys.m;
    let mut lows = Vec::with_capacity(dim);
    let mut highs = Vec::with_capacity(dim);
    lows.push(if tf.degenerate[0] { 0.0 } else { -1.0 });
    highs.push(if tf.degenerate[0] { 0.0 } else { 1.0 });
    for p in 0..face_frame.dim() {
        if p == axis {
            continue;
        }
        lows.push(if face_frame.degenerate[p] { 0.0 } else { -1.0 });
        highs.push(if face_frame.degenerate[p] { 0.0 } else { 1.0 });
    }
    for &(lo, hi) in &sys.u_box {
        lows.push(lo);
        highs.push(hi);
    }
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    let mut corner = vec![0.0; dim];
    for mask in 0..(1usize << dim) {
        for i in 0..dim {
            corner[i] = if mask >> i & 1 == 1 { highs[i] } else { lows[i] };
        }
        let v = flow.eval(&corner);
        min = min.min(v);
        max = max.max(v);
    }
    (min, max)
}

/// Compiles the certificate program at (even) relaxation degree `degree`.
pub fn compile(sys: &SystemSpec, dec: &Decomposition, degree: u32) -> Result<CompiledProgram> {
    sys.validate()?;
    if degree < 2 || degree % 2 != 0 {
        return Err(Error::DegreeTooSmall(
            degree,
            "relaxation degree must be even and at least 2".into(),
        ));
    }
    let d = degree;
    let n = sys.n;
    let nz = 1 + n + sys.m;
    let deg_f = sys.f.iter().map(Polynomial::degree).max().unwrap_or(0);
    let nboxes = dec.num_boxes();
    let nk = dec.num_intervals();

    let v_basis = monomial_basis(1 + n, d);
    let w_basis = monomial_basis(n, d);

    let box_frames: Vec<Frame> = dec.boxes.iter().map(|b| Frame::from_bounds(b)).collect();
    let time_frames: Vec<Frame> = dec
        .intervals
        .iter()
        .map(|&(lo, hi)| Frame::from_bounds(&[(lo, hi)]))
        .collect();

    // decision polynomial coefficients come first
    let mut next_var = 0;
    let mut v_ranges: Vec<Vec<Range<usize>>> = Vec::with_capacity(nboxes);
    for _ in 0..nboxes {
        let mut per_k = Vec::with_capacity(nk);
        for _ in 0..nk {
            per_k.push(next_var..next_var + v_basis.len());
            next_var += v_basis.len();
        }
        v_ranges.push(per_k);
    }
    let mut w_ranges: Vec<Range<usize>> = Vec::with_capacity(nboxes);
    for _ in 0..nboxes {
        w_ranges.push(next_var..next_var + w_basis.len());
        next_var += w_basis.len();
    }

    let mut bld = Builder {
        triplets: Vec::new(),
        b: Vec::new(),
        row_blocks: Vec::new(),
        grams: Vec::new(),
        next_var,
    };

    // input set descriptions lifted into the full (t, x, u) ambient
    let u_descr: Vec<Polynomial> = sys
        .u_set
        .iter()
        .map(|g| {
            let images: Vec<VarImage> = (0..sys.m)
                .map(|j| VarImage::Affine {
                    target: 1 + n + j,
                    scale: 1.0,
                    shift: 0.0,
                })
                .collect();
            g.affine_map(nz, &images)
        })
        .collect();

    let budget_a = (d + deg_f) as i64;
    let q_flow_deg = even_cap(budget_a, d, "flow SOS term")?;
    let lie_deg = d - 1 + deg_f;

    // substitutes the dynamics into a (time frame, state frame) pair
    let scaled_dynamics = |tf: &Frame, xf: &Frame| -> Vec<Polynomial> {
        let mut images = Vec::with_capacity(nz);
        images.push(VarImage::Affine {
            target: 0,
            scale: tf.scale[0],
            shift: tf.center[0],
        });
        images.extend(xf.into_scaled(1));
        for j in 0..sys.m {
            images.push(VarImage::Affine {
                target: 1 + n + j,
                scale: 1.0,
                shift: 0.0,
            });
        }
        sys.f.iter().map(|fp| fp.affine_map(nz, &images)).collect()
    };

    let embed_tx: Vec<VarImage> = (0..1 + n)
        .map(|p| VarImage::Affine {
            target: p,
            scale: 1.0,
            shift: 0.0,
        })
        .collect();

    // (a) flow identities
    for i in 0..nboxes {
        for k in 0..nk {
            let key = IdentityKey {
                family: Family::Flow,
                box_i: Some(i),
                interval_k: Some(k),
                neighbor: None,
            };
            let tf = &time_frames[k];
            let xf = &box_frames[i];
            let f_scaled = scaled_dynamics(tf, xf);
            let v = LinPoly::decision(&v_basis.monomials, v_ranges[i][k].start);
            let mut expr = LinPoly::zero(nz);
            expr.add_assign_scaled(&v.partial(0).affine_map(nz, &embed_tx), -1.0 / tf.scale[0]);
            for p in 0..n {
                let dv = v.partial(1 + p).affine_map(nz, &embed_tx);
                expr.add_assign_scaled(&dv.mul_poly(&f_scaled[p]), -1.0 / xf.scale[p]);
            }
            let mut row_deg = lie_deg.max(q_flow_deg);
            bld.add_sos(
                &mut expr,
                &monomial_basis(nz, q_flow_deg / 2),
                key,
                0,
                -1.0,
                None,
            );
            let mut descriptions = tf.descriptions(nz, 0);
            descriptions.extend(xf.descriptions(nz, 1));
            descriptions.extend(u_descr.iter().cloned());
            for (ordinal, g) in descriptions.iter().enumerate() {
                let s_deg = even_cap(budget_a - g.degree() as i64, d, "flow multiplier")?;
                row_deg = row_deg.max(s_deg + g.degree());
                bld.add_sos(
                    &mut expr,
                    &monomial_basis(nz, s_deg / 2),
                    key,
                    1 + ordinal,
                    -1.0,
                    Some(g),
                );
            }
            bld.emit_identity(&expr, row_deg, key);
        }
    }

    let q_deg = even_cap(d as i64, d, "SOS term")?;
    let embed_x: Vec<VarImage> = (0..n)
        .map(|p| VarImage::Affine {
            target: p,
            scale: 1.0,
            shift: 0.0,
        })
        .collect();

    // a piece evaluated at fixed original time, in the cell's scaled states
    let v_at_time = |i: usize, k: usize, t: f64, v_ranges: &[Vec<Range<usize>>]| -> LinPoly {
        let tf = &time_frames[k];
        let t_scaled = (t - tf.center[0]) / tf.scale[0];
        let v = LinPoly::decision(&v_basis.monomials, v_ranges[i][k].start);
        let mut images = vec![VarImage::Const(t_scaled)];
        images.extend(embed_x.iter().cloned());
        v.affine_map(n, &images)
    };

    // cell-description SOS terms shared by families (b) through (e)
    let add_cell_multipliers = |bld: &mut Builder,
                                expr: &mut LinPoly,
                                key: IdentityKey,
                                first_ordinal: usize,
                                frame: &Frame,
                                row_deg: &mut u32|
     -> Result<()> {
        for (ordinal, g) in frame.descriptions(n, 0).iter().enumerate() {
            let s_deg = even_cap(d as i64 - g.degree() as i64, d, "cell multiplier")?;
            *row_deg = (*row_deg).max(s_deg + g.degree());
            bld.add_sos(
                expr,
                &monomial_basis(n, s_deg / 2),
                key,
                first_ordinal + ordinal,
                -1.0,
                Some(g),
            );
        }
        Ok(())
    };

    // (b) initial identities
    for i in 0..nboxes {
        let key = IdentityKey {
            family: Family::Initial,
            box_i: Some(i),
            interval_k: None,
            neighbor: None,
        };
        let mut expr = LinPoly::decision(&w_basis.monomials, w_ranges[i].start);
        expr.add_assign_scaled(&v_at_time(i, 0, 0.0, &v_ranges), -1.0);
        expr.add_constant(-1.0);
        let mut row_deg = d.max(q_deg);
        bld.add_sos(&mut expr, &monomial_basis(n, q_deg / 2), key, 0, -1.0, None);
        add_cell_multipliers(&mut bld, &mut expr, key, 1, &box_frames[i], &mut row_deg)?;
        bld.emit_identity(&expr, row_deg, key);
    }

    // (c) terminal identities on cells meeting the target set
    for i in 0..nboxes {
        if !box_intersects_target(sys, &dec.boxes[i]) {
            continue;
        }
        let key = IdentityKey {
            family: Family::Terminal,
            box_i: Some(i),
            interval_k: None,
            neighbor: None,
        };
        let mut expr = v_at_time(i, nk - 1, sys.t_final, &v_ranges);
        let mut row_deg = d.max(q_deg);
        bld.add_sos(&mut expr, &monomial_basis(n, q_deg / 2), key, 0, -1.0, None);
        let xt_scaled: Vec<Polynomial> = sys
            .xt_set
            .iter()
            .map(|g| g.affine_map(n, &box_frames[i].into_scaled(0)))
            .collect();
        for (ordinal, g) in xt_scaled.iter().enumerate() {
            let s_deg = even_cap(d as i64 - g.degree() as i64, d, "target multiplier")?;
            row_deg = row_deg.max(s_deg + g.degree());
            bld.add_sos(
                &mut expr,
                &monomial_basis(n, s_deg / 2),
                key,
                1 + ordinal,
                -1.0,
                Some(g),
            );
        }
        add_cell_multipliers(
            &mut bld,
            &mut expr,
            key,
            1 + xt_scaled.len(),
            &box_frames[i],
            &mut row_deg,
        )?;
        bld.emit_identity(&expr, row_deg, key);
    }

    // (d) mass identities
    for i in 0..nboxes {
        let key = IdentityKey {
            family: Family::Mass,
            box_i: Some(i),
            interval_k: None,
            neighbor: None,
        };
        let mut expr = LinPoly::decision(&w_basis.monomials, w_ranges[i].start);
        let mut row_deg = d.max(q_deg);
        bld.add_sos(&mut expr, &monomial_basis(n, q_deg / 2), key, 0, -1.0, None);
        add_cell_multipliers(&mut bld, &mut expr, key, 1, &box_frames[i], &mut row_deg)?;
        bld.emit_identity(&expr, row_deg, key);
    }

    // (e) time-interface identities
    for i in 0..nboxes {
        for k in 0..nk.saturating_sub(1) {
            let key = IdentityKey {
                family: Family::TimeInterface,
                box_i: Some(i),
                interval_k: Some(k),
                neighbor: None,
            };
            let t_knot = dec.intervals[k].1;
            let mut expr = v_at_time(i, k, t_knot, &v_ranges);
            expr.add_assign_scaled(&v_at_time(i, k + 1, t_knot, &v_ranges), -1.0);
            let mut row_deg = d.max(q_deg);
            bld.add_sos(&mut expr, &monomial_basis(n, q_deg / 2), key, 0, -1.0, None);
            add_cell_multipliers(&mut bld, &mut expr, key, 1, &box_frames[i], &mut row_deg)?;
            bld.emit_identity(&expr, row_deg, key);
        }
    }

    // (f) face-interface identities. The certificate requires
    // (v_a - v_b) * flow >= 0 on each shared face, with flow the normal
    // dynamics component; everything is restricted to the face, where the
    // normal coordinate is a constant, so these identities live in
    // (t, in-face states) plus, for the general fallback, the inputs.
    //
    // Affine flows admit an exact encoding that keeps the program
    // strictly feasible: a sign-definite flow certifies the jump itself
    // one-sidedly; a flow crossing zero through in-face states factors
    // the jump as flow * quotient with the quotient certified
    // nonnegative; a flow crossing zero through the inputs alone forces
    // the jump to vanish (plain equality rows). Nonaffine flows fall
    // back to the two-sided multiplier form, which is inherently
    // degenerate at zero crossings but sound.
    let amb_face = n; // t plus the n - 1 in-face states
    let amb_full = n + sys.m;
    let mut quotient_vars: Vec<(usize, usize, Range<usize>)> = Vec::new();
    for (ni, nb) in dec.neighbors.iter().enumerate() {
        let face_frame = Frame::from_bounds(&nb.face);
        let j = nb.axis;
        let face_pos = |p: usize| 1 + if p < j { p } else { p - 1 };
        for k in 0..nk {
            let tf = &time_frames[k];
            // flow on the face in the (t, in-face states, inputs) ambient
            let mut images_full = Vec::with_capacity(nz);
            images_full.push(VarImage::Affine {
                target: 0,
                scale: tf.scale[0],
                shift: tf.center[0],
            });
            for p in 0..n {
                if p == j {
                    images_full.push(VarImage::Const(face_frame.center[p]));
                } else {
                    images_full.push(VarImage::Affine {
                        target: face_pos(p),
                        scale: face_frame.scale[p],
                        shift: face_frame.center[p],
                    });
                }
            }
            for q in 0..sys.m {
                images_full.push(VarImage::Affine {
                    target: amb_face + q,
                    scale: 1.0,
                    shift: 0.0,
                });
            }
            let flow_full = sys.f[j].affine_map(amb_full, &images_full);
            if flow_full.is_zero() {
                // nothing ever crosses this face; the constraint is vacuous
                continue;
            }

            // jump v_a - v_b restricted to the face
            let face_piece = |cell: usize| -> LinPoly {
                let v = LinPoly::decision(&v_basis.monomials, v_ranges[cell][k].start);
                let cf = &box_frames[cell];
                let mut images = vec![VarImage::Affine {
                    target: 0,
                    scale: 1.0,
                    shift: 0.0,
                }];
                for p in 0..n {
                    if p == j {
                        images.push(VarImage::Const(
                            (face_frame.center[p] - cf.center[p]) / cf.scale[p],
                        ));
                    } else {
                        images.push(VarImage::Affine {
                            target: face_pos(p),
                            scale: face_frame.scale[p] / cf.scale[p],
                            shift: (face_frame.center[p] - cf.center[p]) / cf.scale[p],
                        });
                    }
                }
                v.affine_map(amb_face, &images)
            };
            let mut jump = face_piece(nb.a);
            jump.add_assign_scaled(&face_piece(nb.b), -1.0);

            // face descriptions in the in-face ambient
            let mut descriptions = tf.descriptions(amb_face, 0);
            for p in 0..n {
                if p == j {
                    continue;
                }
                let mut g = Polynomial::zero(amb_face);
                if !face_frame.degenerate[p] {
                    g.add_term(Monomial::constant(amb_face), 1.0);
                }
                let mut exps = vec![0u32; amb_face];
                exps[face_pos(p)] = 2;
                g.add_term(Monomial(exps), -1.0);
                descriptions.push(g);
            }

            // sign pattern of the (affine) flow over face x inputs; affine
            // functions attain their extremes at domain corners
            let (flow_min, flow_max) = if flow_full.degree() <= 1 {
                affine_range_on_face(&flow_full, amb_face, sys, tf, &face_frame, j)
            } else {
                (f64::NEG_INFINITY, f64::INFINITY)
            };
            let scale_l = 1.0 + flow_min.abs().max(flow_max.abs());
            let sign_tol = 1e-12 * scale_l;
            let u_dependent = flow_full
                .terms()
                .any(|(mono, _)| mono.0[amb_face..].iter().any(|&e| e > 0));

            if flow_full.degree() <= 1 && (flow_min > sign_tol || flow_max < -sign_tol) {
                // sign-definite flow: the jump itself is one-sided
                let key = IdentityKey {
                    family: Family::FaceSign,
                    box_i: None,
                    interval_k: Some(k),
                    neighbor: Some(ni),
                };
                let orientation = if flow_min > sign_tol { 1.0 } else { -1.0 };
                let mut expr = LinPoly::zero(amb_face);
                expr.add_assign_scaled(&jump, orientation);
                let mut row_deg = d.max(q_deg);
                bld.add_sos(
                    &mut expr,
                    &monomial_basis(amb_face, q_deg / 2),
                    key,
                    0,
                    -1.0,
                    None,
                );
                for (ordinal, g) in descriptions.iter().enumerate() {
                    let s_deg = even_cap(d as i64 - g.degree() as i64, d, "face multiplier")?;
                    row_deg = row_deg.max(s_deg + g.degree());
                    bld.add_sos(
                        &mut expr,
                        &monomial_basis(amb_face, s_deg / 2),
                        key,
                        1 + ordinal,
                        -1.0,
                        Some(g),
                    );
                }
                bld.emit_identity(&expr, row_deg, key);
            } else if flow_full.degree() <= 1 && u_dependent {
                // input-driven crossings in both directions: the jump
                // must vanish on the face
                let key = IdentityKey {
                    family: Family::FaceContinuity,
                    box_i: None,
                    interval_k: Some(k),
                    neighbor: Some(ni),
                };
                bld.emit_identity(&jump, d, key);
            } else if flow_full.degree() <= 1 {
                // state-driven sign change: jump = flow * quotient with a
                // nonnegative quotient
                let flow_face = {
                    let mut images: Vec<VarImage> = (0..amb_face)
                        .map(|t| VarImage::Affine {
                            target: t,
                            scale: 1.0,
                            shift: 0.0,
                        })
                        .collect();
                    images.extend((0..sys.m).map(|_| VarImage::Const(0.0)));
                    flow_full.affine_map(amb_face, &images)
                };
                let rho_basis = monomial_basis(amb_face, d);
                let rho_start = bld.next_var;
                bld.next_var += rho_basis.len();
                quotient_vars.push((ni, k, rho_start..bld.next_var));
                let rho = LinPoly::decision(&rho_basis.monomials, rho_start);

                let link_key = IdentityKey {
                    family: Family::FaceQuotientLink,
                    box_i: None,
                    interval_k: Some(k),
                    neighbor: Some(ni),
                };
                let mut link = jump.clone();
                link.add_assign_scaled(&rho.mul_poly(&flow_face), -1.0);
                bld.emit_identity(&link, d + 1, link_key);

                let key = IdentityKey {
                    family: Family::FaceSign,
                    box_i: None,
                    interval_k: Some(k),
                    neighbor: Some(ni),
                };
                let mut expr = rho;
                let mut row_deg = d.max(q_deg);
                bld.add_sos(
                    &mut expr,
                    &monomial_basis(amb_face, q_deg / 2),
                    key,
                    0,
                    -1.0,
                    None,
                );
                for (ordinal, g) in descriptions.iter().enumerate() {
                    let s_deg = even_cap(d as i64 - g.degree() as i64, d, "face multiplier")?;
                    row_deg = row_deg.max(s_deg + g.degree());
                    bld.add_sos(
                        &mut expr,
                        &monomial_basis(amb_face, s_deg / 2),
                        key,
                        1 + ordinal,
                        -1.0,
                        Some(g),
                    );
                }
                bld.emit_identity(&expr, row_deg, key);
            } else {
                // nonaffine flow: two-sided multiplier form over
                // (t, in-face states, inputs)
                let lift: Vec<VarImage> = (0..amb_face)
                    .map(|t| VarImage::Affine {
                        target: t,
                        scale: 1.0,
                        shift: 0.0,
                    })
                    .collect();
                let jump_full = jump.affine_map(amb_full, &lift);
                let mut descriptions_full: Vec<Polynomial> = descriptions
                    .iter()
                    .map(|g| g.affine_map(amb_full, &lift))
                    .collect();
                for g in &sys.u_set {
                    let images: Vec<VarImage> = (0..sys.m)
                        .map(|q| VarImage::Affine {
                            target: amb_face + q,
                            scale: 1.0,
                            shift: 0.0,
                        })
                        .collect();
                    descriptions_full.push(g.affine_map(amb_full, &images));
                }
                let flow_deg = flow_full.degree();
                let s_flow_deg = even_cap(d as i64 - flow_deg as i64, d, "face flow multiplier")?;
                for (family, sign) in [(Family::FaceUpwind, 1.0), (Family::FaceDownwind, -1.0)] {
                    let key = IdentityKey {
                        family,
                        box_i: None,
                        interval_k: Some(k),
                        neighbor: Some(ni),
                    };
                    // sign +1: (v_a - v_b) = q + s * flow + multipliers
                    // sign -1: (v_b - v_a) = q - s * flow + multipliers
                    let mut expr = LinPoly::zero(amb_full);
                    expr.add_assign_scaled(&jump_full, sign);
                    let mut row_deg = d.max(q_deg);
                    bld.add_sos(
                        &mut expr,
                        &monomial_basis(amb_full, q_deg / 2),
                        key,
                        0,
                        -1.0,
                        None,
                    );
                    row_deg = row_deg.max(s_flow_deg + flow_deg);
                    bld.add_sos(
                        &mut expr,
                        &monomial_basis(amb_full, s_flow_deg / 2),
                        key,
                        1,
                        -sign,
                        Some(&flow_full),
                    );
                    for (ordinal, g) in descriptions_full.iter().enumerate() {
                        let s_deg =
                            even_cap(d as i64 - g.degree() as i64, d, "face multiplier")?;
                        row_deg = row_deg.max(s_deg + g.degree());
                        bld.add_sos(
                            &mut expr,
                            &monomial_basis(amb_full, s_deg / 2),
                            key,
                            2 + ordinal,
                            -1.0,
                            Some(g),
                        );
                    }
                    bld.emit_identity(&expr, row_deg, key);
                }
            }
        }
    }

    // PSD slot rows after the equality block
    let num_eq_rows = bld.b.len();
    let mut row = num_eq_rows;
    for gram in &mut bld.grams {
        let len = svec_len(gram.side);
        gram.slots = row..row + len;
        for (offset, var) in gram.vars.clone().enumerate() {
            bld.triplets.push((row + offset, var, -1.0));
            bld.b.push(0.0);
        }
        row += len;
    }

    let num_vars = bld.next_var;
    let mut cones = vec![Cone::Zero(num_eq_rows)];
    cones.extend(bld.grams.iter().map(|g| Cone::Psd(g.side)));

    // objective: sum over cells of the integral of the mass polynomial
    let mut c = vec![0.0; num_vars];
    for i in 0..nboxes {
        let frame = &box_frames[i];
        let unit_bounds: Vec<(f64, f64)> = frame
            .degenerate
            .iter()
            .map(|&deg| if deg { (0.0, 0.0) } else { (-1.0, 1.0) })
            .collect();
        let vol_factor: f64 = frame
            .scale
            .iter()
            .zip(&frame.degenerate)
            .filter(|&(_, &deg)| !deg)
            .map(|(&s, _)| s)
            .product();
        let moments = box_moments(&unit_bounds, &w_basis);
        for (j, &m) in moments.iter().enumerate() {
            c[w_ranges[i].start + j] = vol_factor * m;
        }
    }

    let a = CscMat::from_triplets(bld.b.len(), num_vars, bld.triplets);
    let program = ConicProgram {
        a,
        b: bld.b,
        c,
        cones,
    };
    program.validate()?;

    Ok(CompiledProgram {
        program,
        degree: d,
        var_map: VariableMap {
            v: v_ranges,
            w: w_ranges,
            v_basis,
            w_basis,
            grams: bld.grams,
            face_quotients: quotient_vars,
            num_vars,
        },
        row_blocks: bld.row_blocks,
        num_eq_rows,
        box_frames,
        time_frames,
        dec: dec.clone(),
    })
}

/// Reads the certificate polynomials out of a solution and maps them back
/// to original coordinates.
pub fn extract_certificate(
    cp: &CompiledProgram,
    sol: &ConicSolution,
) -> Result<PiecewiseCertificate> {
    match sol.status {
        SolveStatus::Optimal | SolveStatus::Inaccurate => {}
        status => {
            return Err(Error::SolveFailed {
                status,
                detail: "cannot extract a certificate from this solution".into(),
            })
        }
    }
    let n = cp.dec.boxes.first().map(Vec::len).unwrap_or(0);
    let mut v_out = Vec::with_capacity(cp.dec.num_boxes());
    for i in 0..cp.dec.num_boxes() {
        let xf = &cp.box_frames[i];
        let mut per_k = Vec::with_capacity(cp.dec.num_intervals());
        for k in 0..cp.dec.num_intervals() {
            let tf = &cp.time_frames[k];
            let mut scaled = Polynomial::zero(1 + n);
            for (j, m) in cp.var_map.v_basis.monomials.iter().enumerate() {
                scaled.add_term(m.clone(), sol.x[cp.var_map.v[i][k].start + j]);
            }
            let mut images = vec![VarImage::Affine {
                target: 0,
                scale: 1.0 / tf.scale[0],
                shift: -tf.center[0] / tf.scale[0],
            }];
            images.extend(xf.into_original(1));
            per_k.push(scaled.affine_map(1 + n, &images));
        }
        v_out.push(per_k);
    }
    let mut w_out = Vec::with_capacity(cp.dec.num_boxes());
    for i in 0..cp.dec.num_boxes() {
        let xf = &cp.box_frames[i];
        let mut scaled = Polynomial::zero(n);
        for (j, m) in cp.var_map.w_basis.monomials.iter().enumerate() {
            scaled.add_term(m.clone(), sol.x[cp.var_map.w[i].start + j]);
        }
        w_out.push(scaled.affine_map(n, &xf.into_original(0)));
    }
    Ok(PiecewiseCertificate {
        v: v_out,
        w: w_out,
        dec: cp.dec.clone(),
        degree: cp.degree,
    })
}

#[cfg(test)]
mod tests;
