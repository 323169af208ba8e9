//! Gradient-method timing on a small split instance: the QR path
//! factorizes the sensitivity matrix once, LSQR iterates per direction,
//! and the finite-difference baseline re-solves per direction.

use criterion::{criterion_group, criterion_main, Criterion};

use roa_core::model::{SplitConfig, SystemSpec};
use roa_core::optim::GradMethod;
use roa_core::paramdiff::{gradient_analytic, gradient_fd, DzSolver, FdConfig};

fn bench_gradients(c: &mut Criterion) {
    let sys = SystemSpec::double_integrator();
    let template = SplitConfig {
        time_splits: vec![],
        axis_splits: vec![vec![0.11], vec![-0.37]],
    };
    let theta = template.flatten();
    let fd = FdConfig::default();

    let mut group = c.benchmark_group("gradient");
    group.sample_size(10);
    for method in [GradMethod::Qr, GradMethod::Lsqr, GradMethod::Fd] {
        group.bench_function(format!("{method:?}").to_lowercase(), |b| {
            b.iter(|| match method {
                GradMethod::Qr => {
                    gradient_analytic(&sys, &template, &theta, 4, &fd, DzSolver::Qr, 1e-8)
                        .unwrap()
                        .0
                }
                GradMethod::Lsqr => gradient_analytic(
                    &sys,
                    &template,
                    &theta,
                    4,
                    &fd,
                    DzSolver::Lsqr {
                        maxiter: 1000,
                        atol: 1e-12,
                    },
                    1e-8,
                )
                .unwrap()
                .0,
                GradMethod::Fd => {
                    gradient_fd(&sys, &template, &theta, 4, fd.eps_f, 1e-8).unwrap()
                }
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench_gradients);
criterion_main!(benches);
