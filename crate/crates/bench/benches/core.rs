use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use img_core::data::Batch;
use img_core::importance::pseudo_importance_label;
use img_core::metrics::decode_span;
use img_core::{generate_synthetic_dataset, FusionWeight, ImgModel, ImportanceConfig, ModelConfig, Split, SyntheticSpec, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn model_benches(c: &mut Criterion) {
    let spec = SyntheticSpec {
        n_samples: 64,
        ..SyntheticSpec::default()
    };
    let corpus = generate_synthetic_dataset(&spec).expect("synthetic corpus");
    let train = corpus.dataset.split(Split::Train);
    let cfg = ModelConfig::synthetic();
    let batch = Batch::new(&train[..cfg.batch_size], cfg.dtype(), true).expect("batch");
    let model = ImgModel::new(&cfg).expect("model");

    c.bench_function("forward_synthetic_batch16", |b| {
        b.iter(|| model.forward(black_box(&batch), &FusionWeight::PREDICTED).expect("forward"))
    });

    let mut group = c.benchmark_group("train_step");
    group.sample_size(10);
    group.bench_function("synthetic_batch16", |b| {
        b.iter_batched(
            || Trainer::new(&cfg).expect("trainer"),
            |mut t| t.train_step(&train, None).expect("step"),
            BatchSize::LargeInput,
        )
    });
    group.finish();
}

fn decode_benches(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for t in [32usize, 128] {
        let start: Vec<f64> = (0..t).map(|_| rng.random_range(-4.0..4.0)).collect();
        let end: Vec<f64> = (0..t).map(|_| rng.random_range(-4.0..4.0)).collect();
        let keep = vec![true; t];
        c.bench_function(&format!("decode_span_t{t}"), |b| {
            b.iter(|| decode_span(black_box(&start), black_box(&end), &keep).expect("decode"))
        });
    }

    let cfg = ImportanceConfig::default();
    let pairs: Vec<(f64, f64)> = (0..1024).map(|_| (rng.random_range(0.0..8.0), rng.random_range(0.0..8.0))).collect();
    c.bench_function("pseudo_label_1024", |b| {
        b.iter(|| {
            pairs
                .iter()
                .map(|&(v, a)| pseudo_importance_label(v, a, &cfg).expect("label"))
                .sum::<f64>()
        })
    });
}

criterion_group!(benches, model_benches, decode_benches);
criterion_main!(benches);
