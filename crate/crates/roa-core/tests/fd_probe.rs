use rand::Rng;
use rand::SeedableRng;
use roa_core::cone::SolveStatus;
use roa_core::model::{SplitConfig, SystemSpec};
use roa_core::paramdiff::value_at;

#[test]
#[ignore = "diagnostic probe"]
fn optimal_rate_scan() {
    let sys = SystemSpec::double_integrator();
    let template = SplitConfig { time_splits: vec![], axis_splits: vec![vec![0.0], vec![0.0]] };
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(303);
    let mut optimal = 0;
    let mut total = 0;
    for _ in 0..30 {
        let theta = vec![rng.random_range(-0.5..0.5f64), rng.random_range(-0.9..0.9f64)];
        if theta.iter().any(|v| v.abs() < 0.04) { continue; }
        total += 1;
        let (_, sol, _) = value_at(&sys, &template, &theta, 4, 1e-9).unwrap();
        if sol.status == SolveStatus::Optimal { optimal += 1; }
    }
    eprintln!("1+1 template: {optimal}/{total} optimal");
}
