use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use maskopt_bench::desk_fixture;
use maskopt_core::model::{forward_logits, loss_and_grad};
use maskopt_core::pool::build_similarity_index;
use maskopt_core::train::{draw_mask, reconstruction_loss_on_tape, Stage};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn bench_forward(c: &mut Criterion) {
    let fx = desk_fixture();
    let tokens = &fx.data.examples[0].tokens;
    c.bench_function("forward_logits_desk_seq", |b| {
        b.iter(|| black_box(forward_logits(&fx.params, &fx.mcfg, black_box(tokens)).unwrap()))
    });
}

fn bench_loss_and_grad(c: &mut Criterion) {
    let fx = desk_fixture();
    let tokens = &fx.data.examples[0].tokens;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let draw = draw_mask(tokens, Stage::Sft, fx.vocab.mask_id, &mut rng).unwrap();
    c.bench_function("loss_and_grad_desk_seq", |b| {
        b.iter(|| {
            let (loss, grads) = loss_and_grad(&fx.params, |tape, ids| {
                reconstruction_loss_on_tape(tape, ids, &fx.mcfg, tokens, &draw)
            })
            .unwrap();
            black_box((loss, grads.tensors.len()))
        })
    });
}

fn bench_similarity_index(c: &mut Criterion) {
    let fx = desk_fixture();
    c.bench_function("similarity_index_500", |b| {
        b.iter(|| black_box(build_similarity_index(&fx.pool, &fx.task).unwrap().sigma))
    });
}

fn bench_oracle_enumeration(c: &mut Criterion) {
    let fx = desk_fixture();
    c.bench_function("oracle_extrema_65536", |b| {
        b.iter(|| black_box(fx.oracle.enumerate_extrema().unwrap()))
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench_forward, bench_loss_and_grad, bench_similarity_index, bench_oracle_enumeration
}
criterion_main!(benches);
