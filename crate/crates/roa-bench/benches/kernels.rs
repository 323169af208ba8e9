//! Kernel micro-benchmarks: PSD projection, its directional derivative,
//! polynomial products and the certificate compiler.

use criterion::{criterion_group, criterion_main, Criterion};
use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use roa_core::cone::{dproject_psd, project_psd};
use roa_core::model::{build_decomposition, SplitConfig, SystemSpec};
use roa_core::poly::{monomial_basis, Polynomial};
use roa_core::soscomp::compile;

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

fn bench_projection(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random_symmetric(20, &mut rng) + DMatrix::identity(20, 20) * 0.5;
    let dir = random_symmetric(20, &mut rng);
    c.bench_function("project_psd_20", |b| b.iter(|| project_psd(&x).unwrap()));
    c.bench_function("dproject_psd_20", |b| {
        b.iter(|| dproject_psd(&x, &dir).unwrap())
    });
}

fn bench_poly(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let basis = monomial_basis(4, 4);
    let mut p = Polynomial::zero(4);
    let mut q = Polynomial::zero(4);
    for m in &basis.monomials {
        p.add_term(m.clone(), rng.random_range(-1.0..1.0));
        q.add_term(m.clone(), rng.random_range(-1.0..1.0));
    }
    c.bench_function("poly_mul_deg4x4", |b| b.iter(|| p.mul(&q).unwrap()));
}

fn bench_compile(c: &mut Criterion) {
    let sys = SystemSpec::double_integrator();
    let splits = SplitConfig::equidistant(&sys, 0, &[2, 2]);
    let dec = build_decomposition(&sys, &splits).unwrap();
    c.bench_function("compile_di_d4_9cells", |b| {
        b.iter(|| compile(&sys, &dec, 4).unwrap())
    });
}

criterion_group!(benches, bench_projection, bench_poly, bench_compile);
criterion_main!(benches);
