use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use fvn_core::autodiff::{Tape, Tensor};
use fvn_core::codebook::nearest_row;
use fvn_core::corpus::{build_dataset, DatasetMode, RawRecord};
use fvn_core::layers::{Binder, LstmCell, ParamStore};
use fvn_core::metrics::{bleu, Tokens};
use fvn_core::trainer::{TrainConfig, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn lstm_step(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let cell = LstmCell::new(&mut store, "cell", 64, 128, &mut rng);
    let x = Tensor::vector((0..64).map(|_| rng.gen_range(-1.0..1.0)).collect());
    c.bench_function("lstm_step_64x128_forward_backward", |bch| {
        bch.iter(|| {
            let tape = Tape::new();
            let b = Binder::new(&tape, &store, true);
            let zeros = tape.constant(Tensor::zeros(&[128]));
            let (h, _) = cell.step(&b, &tape.constant(x.clone()), &zeros, &zeros).unwrap();
            black_box(tape.backward(&h.sum().unwrap()).unwrap());
        })
    });
}

fn nearest(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (k, d) = (512, 300);
    let book = Tensor::new(vec![k, d], (0..k * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let z: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    c.bench_function("nearest_512x300", |b| b.iter(|| black_box(nearest_row(&book, black_box(&z)))));
}

fn corpus_bleu(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let words: Vec<String> = (0..200).map(|i| format!("w{i}")).collect();
    let mut sentence = |len: usize| -> Tokens { (0..len).map(|_| words[rng.gen_range(0..words.len())].clone()).collect() };
    let hyps: Vec<Tokens> = (0..500).map(|_| sentence(20)).collect();
    let refs: Vec<Vec<Tokens>> = (0..500).map(|_| (0..3).map(|_| sentence(20)).collect()).collect();
    c.bench_function("bleu4_500_examples_3_refs", |b| b.iter(|| black_box(bleu(&hyps, &refs, 4).unwrap())));
}

fn training_epoch(c: &mut Criterion) {
    let recs: Vec<RawRecord> = (0..8)
        .map(|i| {
            let style = if i % 2 == 0 { "agreeable" } else { "disagreeable" };
            RawRecord::new(format!("name[N{i}], food[Italian]"), format!("N{i} serves Italian food, you see."), Some(style))
        })
        .collect();
    let ds = build_dataset(&recs, DatasetMode::Personage, None).unwrap();
    let cfg = TrainConfig {
        dim: 32,
        codebook_size: 16,
        encoder_layers: 1,
        batch_size: 8,
        epochs: 1,
        validation_fraction: 0.0,
        ..TrainConfig::default()
    };
    let mut group = c.benchmark_group("training");
    group.sample_size(10);
    group.bench_function("epoch_8_examples_d32", |b| {
        b.iter(|| {
            let mut t = Trainer::new(cfg.clone(), ds.vocab.clone(), ds.examples.clone(), vec![], None).unwrap();
            black_box(t.run_epoch().unwrap())
        })
    });
    group.finish();
}

criterion_group!(benches, lstm_step, nearest, corpus_bleu, training_epoch);
criterion_main!(benches);
