//! Ops-level integration: the compile/solve/extract/evaluate chain, the
//! differentiation stack against its finite-difference oracles, and the
//! program export surface.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use roa_core::cone;
use roa_core::model::{build_decomposition, check_assumptions, SplitConfig, SystemSpec};
use roa_core::paramdiff::{gradient_analytic, gradient_fd, value_at, DzSolver, FdConfig};
use roa_core::roa::mc_volume;
use roa_core::soscomp::{compile, extract_certificate};

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-300)
}

fn central_fd(
    sys: &SystemSpec,
    template: &SplitConfig,
    theta: &[f64],
    degree: u32,
    eps: f64,
) -> Vec<f64> {
    (0..theta.len())
        .map(|k| {
            let mut tp = theta.to_vec();
            tp[k] += eps;
            let mut tm = theta.to_vec();
            tm[k] -= eps;
            let (vp, _, _) = value_at(sys, template, &tp, degree, 1e-9).unwrap();
            let (vm, _, _) = value_at(sys, template, &tm, degree, 1e-9).unwrap();
            (vp - vm) / (2.0 * eps)
        })
        .collect()
}

#[test]
fn end_to_end_certificate_properties() {
    let sys = SystemSpec::double_integrator();
    let dec = build_decomposition(&sys, &SplitConfig::none(2)).unwrap();
    let cp = compile(&sys, &dec, 4).unwrap();
    let sol = cone::solve(&cp.program, 1e-9).unwrap();
    assert_eq!(sol.status, cone::SolveStatus::Optimal);
    assert!((sol.primal_obj + sol.dual_obj).abs() / (1.0 + sol.primal_obj.abs()) < 1e-6);

    let cert = extract_certificate(&cp, &sol).unwrap();
    // the origin belongs to its own region of attraction
    assert!(cert.evaluate(0.0, &[0.0, 0.0]).unwrap() > 0.0);

    // pointwise restatement of the mass constraints: w >= v(0,.) + 1 and
    // w >= 0 on every cell, up to solver tolerance
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..1000 {
        let x = [
            rng.random_range(-0.7..0.7),
            rng.random_range(-1.2..1.2f64),
        ];
        let w = cert.evaluate_mass(&x).unwrap();
        let v0 = cert.evaluate(0.0, &x).unwrap();
        assert!(w >= v0 + 1.0 - 1e-6, "w {w} < v+1 {} at {x:?}", v0 + 1.0);
        assert!(w >= -1e-6);
    }

    let estimate = mc_volume(&sys, &cert, sol.primal_obj, 20_000, 3).unwrap();
    let box_volume = 0.7 * 2.0 * 1.2 * 2.0;
    assert!(estimate.mc_volume > 0.0 && estimate.mc_volume <= box_volume);

    // the assumption diagnostics flag the tangential-flow hazard on a
    // split configuration of this system
    let dec = build_decomposition(
        &sys,
        &SplitConfig {
            time_splits: vec![],
            axis_splits: vec![vec![0.1], vec![]],
        },
    )
    .unwrap();
    let report = check_assumptions(&sys, &dec, 100, 9);
    assert!(report.any_flagged());
}

#[test]
fn analytic_gradient_matches_central_differences() {
    let sys = SystemSpec::double_integrator();
    let template = SplitConfig {
        time_splits: vec![],
        axis_splits: vec![vec![0.11], vec![-0.37]],
    };
    let theta = template.flatten();
    let (grad, diag) = gradient_analytic(
        &sys,
        &template,
        &theta,
        4,
        &FdConfig::default(),
        DzSolver::Qr,
        1e-9,
    )
    .unwrap();
    assert!(!diag.fd_fallback);
    assert_eq!(diag.factorizations, 1);
    assert!(diag.max_route_discrepancy < 1e-3);
    let fd = central_fd(&sys, &template, &theta, 4, 1e-4);
    assert!(cosine(&grad, &fd) > 0.999, "cos {}", cosine(&grad, &fd));
}

#[test]
fn forward_fd_close_to_central_fd_on_clean_instance() {
    // the x2-split continuity structure solves to high accuracy, so the
    // cheap forward stencil agrees with the central oracle
    let sys = SystemSpec::double_integrator();
    let template = SplitConfig {
        time_splits: vec![],
        axis_splits: vec![vec![], vec![-0.37]],
    };
    let theta = template.flatten();
    let fwd = gradient_fd(&sys, &template, &theta, 4, 1e-4, 1e-9).unwrap();
    let ctr = central_fd(&sys, &template, &theta, 4, 1e-4);
    let rel = (fwd[0] - ctr[0]).abs() / (1.0 + ctr[0].abs());
    assert!(rel <= 5e-2, "forward {} vs central {}", fwd[0], ctr[0]);
}

#[test]
fn exported_program_solves_identically_after_import() {
    let sys = SystemSpec::double_integrator();
    let splits = SplitConfig {
        time_splits: vec![],
        axis_splits: vec![vec![0.1], vec![]],
    };
    let dec = build_decomposition(&sys, &splits).unwrap();
    let cp = compile(&sys, &dec, 4).unwrap();
    let dir = std::env::temp_dir().join(format!("roa_pipeline_{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let stem = dir.join("program");
    cone::io::export_program(&cp.program, &stem).unwrap();
    let back = cone::io::import_program(&stem).unwrap();
    assert_eq!(cp.program, back);
    let a = cone::solve(&cp.program, 1e-9).unwrap();
    let b = cone::solve(&back, 1e-9).unwrap();
    assert!((a.primal_obj - b.primal_obj).abs() < 1e-9);
}

#[test]
fn time_split_and_brockett_cross_checks() {
    // interior time split exercises the time-interface family end to end
    let sys = SystemSpec::double_integrator();
    let splits = SplitConfig {
        time_splits: vec![0.4],
        axis_splits: vec![vec![], vec![]],
    };
    let dec = build_decomposition(&sys, &splits).unwrap();
    let cp = compile(&sys, &dec, 4).unwrap();
    let sol = cone::solve(&cp.program, 1e-9).unwrap();
    assert_eq!(sol.status, cone::SolveStatus::Optimal);
    let cert = extract_certificate(&cp, &sol).unwrap();
    // continuity of the certified envelope across the time knot
    let before = cert.evaluate(0.4 - 1e-9, &[0.2, 0.1]).unwrap();
    let after = cert.evaluate(0.4 + 1e-9, &[0.2, 0.1]).unwrap();
    assert!(before >= after - 1e-6, "value may only drop across the knot");

    // a different state/input dimension compiles and solves
    let sys = SystemSpec::brockett();
    let dec = build_decomposition(&sys, &SplitConfig::none(3)).unwrap();
    let cp = compile(&sys, &dec, 2).unwrap();
    let sol = cone::solve(&cp.program, 1e-8).unwrap();
    assert!(matches!(
        sol.status,
        cone::SolveStatus::Optimal | cone::SolveStatus::Inaccurate
    ));
    let cert = extract_certificate(&cp, &sol).unwrap();
    assert!(cert.evaluate(0.0, &[0.0, 0.0, 0.0]).unwrap() > -1e-6);
}
