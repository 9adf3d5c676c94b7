use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use loopsampler::channels::StationaryOptions;
use loopsampler::evolve::stationary_loop_state;
use loopsampler::fock::FockBasis;
use loopsampler::lift::lift;
use loopsampler::matrixkit::{haar_random_unitary, permanent};
use loopsampler::tensors::stationary_tensors;
use loopsampler_bench::haar_experiment;

fn permanents(c: &mut Criterion) {
    let mut g = c.benchmark_group("permanent");
    for n in [4, 8, 12, 16] {
        let a = haar_random_unitary(n, 1).matrix().clone();
        g.bench_with_input(BenchmarkId::from_parameter(n), &a, |b, a| b.iter(|| permanent(black_box(a)).unwrap()));
    }
    g.finish();
}

fn lifting(c: &mut Criterion) {
    let mut g = c.benchmark_group("lift");
    for (modes, n) in [(3, 4), (4, 4), (4, 6)] {
        let u = haar_random_unitary(modes, 2).matrix().clone();
        let basis = Arc::new(FockBasis::new(modes, n).unwrap());
        g.bench_function(format!("M{modes}_n{n}"), |b| b.iter(|| lift(black_box(&u), basis.clone()).unwrap()));
    }
    g.finish();
}

fn stationary(c: &mut Criterion) {
    let mut g = c.benchmark_group("stationary");
    g.sample_size(10);
    for (modes, looped) in [(2, 1), (3, 1)] {
        let exp = haar_experiment(modes, looped, 3);
        g.bench_function(format!("superop_M{modes}_L{looped}"), |b| {
            b.iter(|| stationary_loop_state(black_box(&exp), &StationaryOptions::default()).unwrap())
        });
        g.bench_function(format!("tensors_rank4_M{modes}_L{looped}"), |b| {
            b.iter(|| stationary_tensors(black_box(&exp), 4).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, permanents, lifting, stationary);
criterion_main!(benches);
