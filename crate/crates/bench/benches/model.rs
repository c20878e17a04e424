use criterion::{criterion_group, criterion_main, Criterion};
use omnilv_core::conditioning::PromptPack;
use omnilv_core::tensor::Tensor;
use omnilv_core::train::Trainer;
use omnilv_core::{RunConfig, Tape};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = Tensor::randn([64, 48], 1.0, &mut rng);
    let b = Tensor::randn([48, 96], 1.0, &mut rng);
    c.bench_function("matmul 64x48x96 fwd+bwd", |bench| {
        bench.iter(|| {
            let tape = Tape::new();
            let (x, w) = (tape.constant(a.clone()).unwrap(), tape.leaf(b.clone()).unwrap());
            let y = tape.matmul(x, w).unwrap();
            let s = tape.sum(y).unwrap();
            tape.backward(s).unwrap();
        })
    });
}

fn training(c: &mut Criterion) {
    let mut cfg = RunConfig::default();
    cfg.train.batch_size = 1;
    let trainer = Trainer::new(&cfg).unwrap();
    let mut state = trainer.init_state().unwrap();
    let mut group = c.benchmark_group("default model");
    group.sample_size(20);
    group.bench_function("train step, batch 1", |b| b.iter(|| trainer.step(&mut state).unwrap()));
    let lq = trainer.batch(0).unwrap().remove(0).lq;
    let prompt = PromptPack::empty();
    group.bench_function("sample, 20 euler steps", |b| b.iter(|| state.model.sample(&lq, &prompt, 20, 3).unwrap()));
    group.finish();
}

criterion_group!(benches, matmul, training);
criterion_main!(benches);
