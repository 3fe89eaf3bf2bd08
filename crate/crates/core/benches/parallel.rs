use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use brightside::geometry::ProjectionParams;
use brightside::kernels::{run_replicates, KernelConfig, KernelKind, RunSettings};
use brightside::par::Execution;
use brightside::targets::MvStudentT;
use brightside::tuning::{cap_batch, value_and_gradient, ThetaBar};
use brightside::chain_rng;

fn modes() -> Vec<(&'static str, Execution)> {
    let mut v = vec![("sequential", Execution::Sequential)];
    if cfg!(feature = "parallel") {
        v.push(("parallel", Execution::Parallel));
    }
    v
}

fn replicate_chains(c: &mut Criterion) {
    let d = 10;
    let target = MvStudentT::cauchy(d);
    let p = ProjectionParams::centered(d, 1.1).unwrap();
    let cfg = KernelConfig::walk(KernelKind::Scs, 0.5, 500);
    let settings = RunSettings::new(5_000, 500, 1, 1);
    let mut group = c.benchmark_group("replicate_chains");
    group.sample_size(10);
    for (name, exec) in modes() {
        group.bench_with_input(BenchmarkId::new(name, 8), &exec, |b, &exec| {
            b.iter(|| run_replicates(&cfg, Some(&p), &target, &vec![0.0; d], settings, 8, exec))
        });
    }
    group.finish();
}

fn kl_gradient_batch(c: &mut Criterion) {
    let d = 10;
    let target = MvStudentT::cauchy(d);
    let xs = cap_batch(d, 1.1, 2000, &mut chain_rng(2, 0));
    let theta = ThetaBar { h_o: vec![0.05; d], mu: vec![0.1; d], r: 1.2 };
    let mut group = c.benchmark_group("kl_gradient_batch");
    for (name, exec) in modes() {
        group.bench_with_input(BenchmarkId::new(name, 2000), &exec, |b, &exec| {
            b.iter(|| value_and_gradient(&theta, 1.1, &target, &xs, exec, true).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, replicate_chains, kl_gradient_batch);
criterion_main!(benches);
