//! Sequential versus data-parallel execution of the hot paths. Without
//! the `parallel` feature both arms run sequentially.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use coeff_core::data::synthetic_dataset;
use coeff_core::encoder::{Encoder, EncoderConfig};
use coeff_core::heads::{head_init, HeadConfig, HeadKind};
use coeff_core::parallel::Execution;
use coeff_core::pool::cido_pack;
use coeff_core::tokenizer::build_vocab;
use coeff_core::train::{
    predict, prepare_samples, train, EmbeddingSource, EncoderMode, Model, PoolingMode, TrainConfig,
};

const MODES: [(&str, Execution); 2] = [
    ("sequential", Execution::Sequential),
    ("parallel", Execution::Parallel),
];

fn bench_config() -> EncoderConfig {
    EncoderConfig {
        embed_dim: 32,
        num_heads: 4,
        num_layers: 2,
        ..EncoderConfig::toy()
    }
}

fn encode(c: &mut Criterion) {
    let d = synthetic_dataset(32, 0);
    let vocab = build_vocab(&d.distinct_smiles()).unwrap();
    let packed = cido_pack(&d.formulations, &vocab).unwrap();
    let encoder = Encoder::init(bench_config(), vocab.len(), 1).unwrap();
    let mut g = c.benchmark_group("encode");
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| encoder.encode(&packed.sequences, exec).unwrap())
        });
    }
    g.finish();
}

fn training(c: &mut Criterion) {
    let d = synthetic_dataset(32, 0);
    let vocab = build_vocab(&d.distinct_smiles()).unwrap();
    let encoder = Encoder::init(bench_config(), vocab.len(), 1).unwrap();
    let samples = prepare_samples(
        &d.formulations,
        &EmbeddingSource::Encoder(vocab),
        Some(&encoder),
        EncoderMode::Finetune,
        PoolingMode::Cido,
        Execution::Sequential,
    )
    .unwrap();
    let model = Model {
        head: head_init(&HeadConfig::new(HeadKind::Kan), encoder.width(), 2).unwrap(),
        encoder: Some(encoder),
    };

    let mut g = c.benchmark_group("train_epoch");
    g.sample_size(10);
    for (name, exec) in MODES {
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 8,
            execution: exec,
            ..Default::default()
        };
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                let mut m = model.clone();
                train(&mut m, &samples, None, &cfg).unwrap()
            })
        });
    }
    g.finish();

    let mut g = c.benchmark_group("predict");
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| predict(&model, &samples, exec).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, encode, training);
criterion_main!(benches);
