//! Parallel against sequential execution of the batch-level kernels.
//!
//! `cargo bench -p cdd-core --bench parallel`. Both paths produce identical
//! bits; the bench only compares wall time.

use cdd_core::config::RunConfig;
use cdd_core::exec::set_parallel;
use cdd_core::network::{Mode, Model};
use cdd_core::tensor::sum;
use cdd_core::{Tape, Tensor};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn batch(n: usize, shape: [usize; 3], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[n, shape[0], shape[1], shape[2]], |_| {
        rng.random_range(-1.0..1.0)
    })
}

fn bench(c: &mut Criterion) {
    let run = RunConfig::default();
    let student = Model::build(&run.model_config(true), 1).unwrap();
    let x = batch(16, student.config.input_shape(), 2);

    let mut group = c.benchmark_group("student");
    group.sample_size(10);
    for parallel in [false, true] {
        let label = if parallel { "parallel" } else { "sequential" };
        set_parallel(parallel);
        group.bench_with_input(BenchmarkId::new("infer", label), &x, |b, x| {
            b.iter(|| student.infer(x).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("forward_backward", label), &x, |b, x| {
            b.iter(|| {
                let mut tape = Tape::new();
                let vars = student.bind(&mut tape, true);
                let input = tape.constant(x.clone());
                let out = student
                    .forward_with_taps(&mut tape, &vars, input, Mode::Train)
                    .unwrap();
                let loss = sum(&mut tape, out.embedding);
                tape.backward(loss).unwrap();
                vars.grads(&tape)
            })
        });
    }
    set_parallel(true);
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
