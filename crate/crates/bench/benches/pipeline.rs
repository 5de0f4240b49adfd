use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};
use ltm_core::masking::IGNORE_LABEL;
use ltm_core::model::{train_step, AdamWConfig, Batch, ModelConfig, MtmBatch, TrainState};
use ltm_core::{encode_cell, train_vocab, GeoPoint};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn city_cells(n: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let p = GeoPoint::new(rng.gen_range(35.5..35.9), rng.gen_range(139.5..139.9)).unwrap();
            encode_cell(&p, 6).unwrap().into_string()
        })
        .collect()
}

fn codec(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let points: Vec<GeoPoint> = (0..1000)
        .map(|_| GeoPoint::new(rng.gen_range(-90.0..90.0), rng.gen_range(-180.0..180.0)).unwrap())
        .collect();
    c.bench_function("encode_cell 1k points p6", |b| {
        b.iter(|| {
            for p in &points {
                black_box(encode_cell(p, 6).unwrap());
            }
        })
    });
}

fn tokenizer(c: &mut Criterion) {
    let cells = city_cells(20_000, 2);
    c.bench_function("train_vocab 20k cells budget 1000", |b| {
        b.iter(|| train_vocab(cells.iter().map(String::as_str), 1000).unwrap())
    });
    let (vocab, _) = train_vocab(cells.iter().map(String::as_str), 1000).unwrap();
    c.bench_function("tokenize 20k cells", |b| {
        b.iter(|| {
            for cell in &cells {
                black_box(vocab.tokenize_cell(cell));
            }
        })
    });
}

fn encoder_step(c: &mut Criterion) {
    let (n, len, v) = (8, 128, 1000);
    let cfg = ModelConfig::desk(v);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let ids: Vec<u32> = (0..n * len).map(|_| rng.gen_range(5..v as u32)).collect();
    let labels: Vec<i32> = ids
        .iter()
        .map(|&i| if rng.gen_bool(0.2) { i as i32 } else { IGNORE_LABEL })
        .collect();
    let batch = MtmBatch {
        batch: Batch::new(n, len, ids, vec![0; n * len], vec![1; n * len]).unwrap(),
        labels,
    };
    let state = TrainState::init(&cfg, 1, AdamWConfig::default()).unwrap();
    let mut group = c.benchmark_group("encoder");
    group.sample_size(10);
    group.bench_function("desk train step 8x128", |b| {
        b.iter_batched(
            || state.clone(),
            |mut s| train_step(&mut s, &batch, 1e-4, 1.0).unwrap(),
            BatchSize::LargeInput,
        )
    });
    group.finish();
}

criterion_group!(benches, codec, tokenizer, encoder_step);
criterion_main!(benches);
