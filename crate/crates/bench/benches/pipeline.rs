use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use finesent::encoder::pooled_output;
use finesent::numerics::rng::seeded;
use finesent::objectives::{build_examples, pretrain_step, PretrainHyper, PretrainState};
use finesent::tokenizer::encode;
use finesent_bench::Fixture;
use std::hint::black_box;

fn tokenize(c: &mut Criterion) {
    let fx = Fixture::toy(200, 1);
    c.bench_function("encode 200 sentences", |b| {
        b.iter(|| {
            for s in &fx.sentences {
                black_box(encode(s, &fx.vocab, 64));
            }
        })
    });
}

fn forward(c: &mut Criterion) {
    let fx = Fixture::toy(16, 2);
    let seq = encode(&fx.sentences[0], &fx.vocab, 64);
    c.bench_function("toy pooled forward", |b| {
        b.iter(|| pooled_output(&fx.params, &fx.config, black_box(&seq)).unwrap())
    });
}

fn train_step(c: &mut Criterion) {
    let fx = Fixture::toy(64, 3);
    let hyper = PretrainHyper {
        max_len: 32,
        ..PretrainHyper::default()
    };
    let examples = build_examples(&fx.sentences, &fx.vocab, &hyper).unwrap();
    let batch = &examples[..8.min(examples.len())];
    let mut rng = seeded(3);
    c.bench_function("toy pretrain step, batch 8", |b| {
        b.iter_batched(
            || PretrainState::new(fx.config, 3).unwrap(),
            |mut state| pretrain_step(&mut state, batch, 1e-4, &mut rng).unwrap(),
            BatchSize::LargeInput,
        )
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = tokenize, forward, train_step
}
criterion_main!(benches);
