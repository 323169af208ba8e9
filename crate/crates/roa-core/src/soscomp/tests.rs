use super::*;
use crate::model::{build_decomposition, SplitConfig, SystemSpec};
use crate::poly::binomial;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn di() -> SystemSpec {
    SystemSpec::double_integrator()
}

fn compile_di(splits: &SplitConfig, d: u32) -> CompiledProgram {
    let sys = di();
    let dec = build_decomposition(&sys, splits).unwrap();
    compile(&sys, &dec, d).unwrap()
}

/// Reference enumeration of the no-split degree-4 double integrator
/// program, written directly from the constraint families: one flow
/// identity in 4 ambient variables, initial/terminal/mass identities in
/// the 2 states, with multiplier degrees capped at the even part of the
/// remaining budget.
#[test]
fn dimensions_match_reference_enumeration() {
    let cp = compile_di(&SplitConfig::none(2), 4);

    let nmon = |nvars: usize, deg: usize| binomial(nvars + deg, nvars);
    let tri = |side: usize| side * (side + 1) / 2;

    let v_len = nmon(3, 4); // piece in (t, x1, x2)
    let w_len = nmon(2, 4);

    // flow: budget d + deg f = 5 -> main SOS degree 4 (side 15); four
    // degree-2 descriptions (time, two axes, input) -> multipliers of
    // degree 2 (side 5); rows over degree <= 4 in 4 variables
    let flow_grams = [nmon(4, 2), nmon(4, 1), nmon(4, 1), nmon(4, 1), nmon(4, 1)];
    let flow_rows = nmon(4, 4);
    // initial/mass: main side 6, two degree-2 multipliers side 3
    let cell_grams = [nmon(2, 2), nmon(2, 1), nmon(2, 1)];
    // terminal: main, target multiplier, two cell multipliers
    let term_grams = [nmon(2, 2), nmon(2, 1), nmon(2, 1), nmon(2, 1)];
    let x_rows = nmon(2, 4);

    let expected_cols: usize = v_len
        + w_len
        + flow_grams.iter().map(|&s| tri(s)).sum::<usize>()
        + 2 * cell_grams.iter().map(|&s| tri(s)).sum::<usize>()
        + term_grams.iter().map(|&s| tri(s)).sum::<usize>();
    let expected_eq_rows = flow_rows + 3 * x_rows;
    let expected_psd_rows: usize = flow_grams.iter().map(|&s| tri(s)).sum::<usize>()
        + 2 * cell_grams.iter().map(|&s| tri(s)).sum::<usize>()
        + term_grams.iter().map(|&s| tri(s)).sum::<usize>();

    assert_eq!(cp.program.num_cols(), expected_cols);
    assert_eq!(cp.num_eq_rows, expected_eq_rows);
    assert_eq!(cp.program.num_rows(), expected_eq_rows + expected_psd_rows);

    // main flow Gram lives on the degree-2 basis in (t, x1, x2, u)
    let main = cp
        .var_map
        .grams
        .iter()
        .find(|g| g.key.family == Family::Flow && g.ordinal == 0)
        .unwrap();
    assert_eq!(main.side, 15);

    // cone list: one zero cone, then the Gram blocks in emission order
    let expected_cones: Vec<Cone> = std::iter::once(Cone::Zero(expected_eq_rows))
        .chain(flow_grams.iter().map(|&s| Cone::Psd(s)))
        .chain(cell_grams.iter().map(|&s| Cone::Psd(s))) // initial
        .chain(term_grams.iter().map(|&s| Cone::Psd(s))) // terminal
        .chain(cell_grams.iter().map(|&s| Cone::Psd(s))) // mass
        .collect();
    assert_eq!(cp.program.cones, expected_cones);
}

#[test]
fn split_structure_has_interfaces_but_no_time_interface() {
    // a split on x1 has normal flow x2, which changes sign across the
    // face: the jump factors through a certified quotient
    let splits = SplitConfig {
        time_splits: vec![],
        axis_splits: vec![vec![0.1], vec![]],
    };
    let cp = compile_di(&splits, 4);
    let count = |fam: Family| {
        cp.row_blocks
            .iter()
            .filter(|rb| rb.key.family == fam)
            .count()
    };
    assert_eq!(count(Family::TimeInterface), 0);
    assert_eq!(count(Family::FaceQuotientLink), 1);
    assert_eq!(count(Family::FaceSign), 1);
    assert_eq!(count(Family::FaceContinuity), 0);
    assert_eq!(count(Family::Flow), 2);
    assert_eq!(cp.var_map.face_quotients.len(), 1);
    // terminal only on the cell holding the origin
    assert_eq!(count(Family::Terminal), 1);
    let term = cp
        .row_blocks
        .iter()
        .find(|rb| rb.key.family == Family::Terminal)
        .unwrap();
    assert_eq!(term.key.box_i, Some(0));

    // a split on x2 has normal flow u, sign-indefinite over the input
    // set: the pieces must agree on the face
    let splits = SplitConfig {
        time_splits: vec![],
        axis_splits: vec![vec![], vec![0.2]],
    };
    let cp = compile_di(&splits, 4);
    let count = |fam: Family| {
        cp.row_blocks
            .iter()
            .filter(|rb| rb.key.family == fam)
            .count()
    };
    assert_eq!(count(Family::FaceContinuity), 1);
    assert_eq!(count(Family::FaceQuotientLink), 0);
    assert_eq!(count(Family::FaceSign), 0);

    // with a time split, the time interface appears once per cell and the
    // face interfaces once per interval
    let splits = SplitConfig {
        time_splits: vec![0.5],
        axis_splits: vec![vec![0.1], vec![]],
    };
    let cp = compile_di(&splits, 4);
    let count = |fam: Family| {
        cp.row_blocks
            .iter()
            .filter(|rb| rb.key.family == fam)
            .count()
    };
    assert_eq!(count(Family::TimeInterface), 2);
    assert_eq!(count(Family::FaceQuotientLink), 2);
    assert_eq!(count(Family::FaceSign), 2);
    assert_eq!(count(Family::Flow), 4);
}

#[test]
fn sign_definite_face_gets_one_sided_identity() {
    // split x2 at 0.4 and x1 anywhere: the x1-normal face of the upper
    // row spans x2 in [0.4, 1.2], where the flow x2 is strictly positive
    let splits = SplitConfig {
        time_splits: vec![],
        axis_splits: vec![vec![0.0], vec![0.4]],
    };
    let cp = compile_di(&splits, 4);
    let faces: Vec<_> = cp
        .row_blocks
        .iter()
        .filter(|rb| {
            matches!(
                rb.key.family,
                Family::FaceSign | Family::FaceQuotientLink | Family::FaceContinuity
            )
        })
        .collect();
    // four neighbor pairs: two x1-normal (one quotient + sign pair, one
    // pure sign identity... both rows counted), two x2-normal
    // (continuity)
    let quotients = faces
        .iter()
        .filter(|rb| rb.key.family == Family::FaceQuotientLink)
        .count();
    let signs = faces
        .iter()
        .filter(|rb| rb.key.family == Family::FaceSign)
        .count();
    let continuity = faces
        .iter()
        .filter(|rb| rb.key.family == Family::FaceContinuity)
        .count();
    // lower row face spans x2 in [-1.2, 0.4]: sign change -> quotient;
    // upper row face spans [0.4, 1.2]: sign-definite -> bare sign identity
    assert_eq!(quotients, 1);
    assert_eq!(signs, 2);
    assert_eq!(continuity, 2);
    assert_eq!(cp.var_map.face_quotients.len(), 1);
}

#[test]
fn nonaffine_flow_uses_two_sided_fallback() {
    // Brockett integrator: splitting x3 gives normal flow u1 x2 - u2 x1,
    // which is not affine
    let sys = SystemSpec::brockett();
    let splits = SplitConfig {
        time_splits: vec![],
        axis_splits: vec![vec![], vec![], vec![0.1]],
    };
    let dec = build_decomposition(&sys, &splits).unwrap();
    let cp = compile(&sys, &dec, 2).unwrap();
    let count = |fam: Family| {
        cp.row_blocks
            .iter()
            .filter(|rb| rb.key.family == fam)
            .count()
    };
    assert_eq!(count(Family::FaceUpwind), 1);
    assert_eq!(count(Family::FaceDownwind), 1);
    // splitting x1 gives normal flow u1: input-driven sign change
    let splits = SplitConfig {
        time_splits: vec![],
        axis_splits: vec![vec![0.1], vec![], vec![]],
    };
    let dec = build_decomposition(&sys, &splits).unwrap();
    let cp = compile(&sys, &dec, 2).unwrap();
    let count = |fam: Family| {
        cp.row_blocks
            .iter()
            .filter(|rb| rb.key.family == fam)
            .count()
    };
    assert_eq!(count(Family::FaceContinuity), 1);
}

#[test]
fn layout_is_invariant_under_small_position_changes() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..20 {
        let base = SplitConfig {
            time_splits: vec![],
            axis_splits: vec![
                {
                    let mut s = vec![
                        rng.random_range(-0.6..0.6f64),
                        rng.random_range(-0.6..0.6f64),
                    ];
                    s.sort_by(f64::total_cmp);
                    s
                },
                vec![rng.random_range(-1.1..1.1f64)],
            ],
        };
        let mut theta = base.flatten();
        for v in &mut theta {
            *v += rng.random_range(-1e-5..1e-5f64);
        }
        let perturbed = base.unflatten(&theta);
        let a = compile_di(&base, 4);
        let b = compile_di(&perturbed, 4);
        assert!(a.same_layout(&b));
        assert!(
            a.same_structure(&b),
            "sparsity pattern changed under a small perturbation"
        );
    }
}

#[test]
fn coincident_splits_compile() {
    let splits = SplitConfig {
        time_splits: vec![],
        axis_splits: vec![vec![0.2, 0.2], vec![]],
    };
    let cp = compile_di(&splits, 4);
    assert_eq!(cp.dec.num_boxes(), 3);
    // degenerate middle cell contributes nothing to the objective
    let w_range = &cp.var_map.w[1];
    assert!(cp.program.c[w_range.clone()].iter().all(|&v| v == 0.0));
}

#[test]
fn objective_wiring_matches_independent_integral() {
    let splits = SplitConfig {
        time_splits: vec![],
        axis_splits: vec![vec![-0.2], vec![0.3]],
    };
    let sys = di();
    let dec = build_decomposition(&sys, &splits).unwrap();
    let cp = compile(&sys, &dec, 4).unwrap();

    // c is zero away from the mass-coefficient columns
    let mut is_w_col = vec![false; cp.program.num_cols()];
    for r in &cp.var_map.w {
        for j in r.clone() {
            is_w_col[j] = true;
        }
    }
    for (j, &cj) in cp.program.c.iter().enumerate() {
        if !is_w_col[j] {
            assert_eq!(cj, 0.0, "objective entry off the mass block at {j}");
        }
    }

    // plant random mass coefficients, extract to original coordinates,
    // and compare c'x against the closed-form integral over each cell
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut x = vec![0.0; cp.program.num_cols()];
    for r in &cp.var_map.w {
        for j in r.clone() {
            x[j] = rng.random_range(-1.0..1.0);
        }
    }
    let sol = crate::cone::ConicSolution {
        x: x.clone(),
        y: vec![0.0; cp.program.num_rows()],
        s: vec![0.0; cp.program.num_rows()],
        status: SolveStatus::Optimal,
        primal_obj: 0.0,
        dual_obj: 0.0,
        iterations: 0,
    };
    let cert = extract_certificate(&cp, &sol).unwrap();
    let mut integral = 0.0;
    for (i, w) in cert.w.iter().enumerate() {
        let moments = box_moments(&dec.boxes[i], &cp.var_map.w_basis);
        for (m, c) in w.terms() {
            let pos = cp.var_map.w_basis.position(m).unwrap();
            integral += c * moments[pos];
        }
    }
    let objective: f64 = cp.program.c.iter().zip(&x).map(|(c, x)| c * x).sum();
    assert!(
        (objective - integral).abs() <= 1e-10 * (1.0 + integral.abs()),
        "objective {objective} vs integral {integral}"
    );
}

#[test]
fn extraction_round_trips_planted_coefficients() {
    let splits = SplitConfig {
        time_splits: vec![0.4],
        axis_splits: vec![vec![0.15], vec![]],
    };
    let sys = di();
    let dec = build_decomposition(&sys, &splits).unwrap();
    let cp = compile(&sys, &dec, 4).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut x = vec![0.0; cp.program.num_cols()];
    for per_k in &cp.var_map.v {
        for r in per_k {
            for j in r.clone() {
                x[j] = rng.random_range(-1.0..1.0);
            }
        }
    }
    let sol = crate::cone::ConicSolution {
        x: x.clone(),
        y: vec![0.0; cp.program.num_rows()],
        s: vec![0.0; cp.program.num_rows()],
        status: SolveStatus::Optimal,
        primal_obj: 0.0,
        dual_obj: 0.0,
        iterations: 0,
    };
    let cert = extract_certificate(&cp, &sol).unwrap();

    // the extracted piece evaluated at (t, x) must equal the planted
    // scaled-coordinate polynomial evaluated at the frame preimage
    for i in 0..dec.num_boxes() {
        for k in 0..dec.num_intervals() {
            let tf = &cp.time_frames[k];
            let xf = &cp.box_frames[i];
            for _ in 0..20 {
                let t = rng.random_range(dec.intervals[k].0..=dec.intervals[k].1);
                let pt: Vec<f64> = dec.boxes[i]
                    .iter()
                    .map(|&(lo, hi)| rng.random_range(lo..=hi))
                    .collect();
                let direct = cert.v[i][k].eval(&[t, pt[0], pt[1]]);
                let scaled_pt = [
                    (t - tf.center[0]) / tf.scale[0],
                    (pt[0] - xf.center[0]) / xf.scale[0],
                    (pt[1] - xf.center[1]) / xf.scale[1],
                ];
                let mut planted = 0.0;
                for (j, m) in cp.var_map.v_basis.monomials.iter().enumerate() {
                    planted += x[cp.var_map.v[i][k].start + j] * m.eval(&scaled_pt);
                }
                assert!(
                    (direct - planted).abs() <= 1e-9 * (1.0 + planted.abs()),
                    "round trip mismatch: {direct} vs {planted}"
                );
            }
        }
    }
}

#[test]
fn odd_or_tiny_degree_rejected() {
    let sys = di();
    let dec = build_decomposition(&sys, &SplitConfig::none(2)).unwrap();
    assert!(matches!(
        compile(&sys, &dec, 3),
        Err(Error::DegreeTooSmall(3, _))
    ));
    assert!(matches!(
        compile(&sys, &dec, 0),
        Err(Error::DegreeTooSmall(0, _))
    ));
}

#[test]
fn brockett_compiles_at_degree_two() {
    let sys = SystemSpec::brockett();
    let dec = build_decomposition(&sys, &SplitConfig::none(3)).unwrap();
    let cp = compile(&sys, &dec, 2).unwrap();
    // flow budget is d + deg f = 4; main Gram on the degree-2 basis in
    // (t, x1..x3, u1, u2)
    let main = cp
        .var_map
        .grams
        .iter()
        .find(|g| g.key.family == Family::Flow && g.ordinal == 0)
        .unwrap();
    assert_eq!(main.side, binomial(6 + 2, 6));
}
