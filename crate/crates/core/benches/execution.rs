//! Sequential against rayon-parallel execution for the three batch-heavy
//! paths: a distillation epoch, a fine-tuning epoch and batched inference.
//! Without the `parallel` feature both arms run the sequential path.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use sra_core::data::{LabeledExample, TaskKind, Vocabulary};
use sra_core::distill::{distill, DistillConfig};
use sra_core::finetune::{encode_examples, finetune, predict, FeatureSource, FinetuneConfig, TaskModel};
use sra_core::nn::{EncoderConfig, StudentEncoder};
use sra_core::parallel::Execution;
use sra_core::synthetic::{synthetic_corpus, CorpusConfig};
use sra_core::teacher::{SyntheticTeacher, TeacherOracle};
use sra_core::Rng;

const ARMS: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

struct Fixture {
    sentences: Vec<String>,
    vocab: Vocabulary,
    oracle: TeacherOracle,
    encoder: StudentEncoder,
}

fn fixture() -> Fixture {
    let corpus_cfg = CorpusConfig::default();
    let sentences = synthetic_corpus(512, &corpus_cfg, &mut Rng::new(1)).unwrap();
    let vocab = corpus_cfg.vocabulary();
    let enc_cfg = EncoderConfig {
        vocab_size: vocab.len(),
        embed_dim: 32,
        hidden_dim: 32,
        output_dim: 32,
    };
    Fixture {
        encoder: StudentEncoder::new(enc_cfg, &mut Rng::new(2)).unwrap(),
        oracle: TeacherOracle::Synthetic(SyntheticTeacher::new(3, 32, 16).unwrap()),
        sentences,
        vocab,
    }
}

fn labeled(sentences: &[String]) -> Vec<LabeledExample> {
    sentences
        .iter()
        .enumerate()
        .map(|(i, s)| LabeledExample::single(s.clone(), Some(i % 2)))
        .collect()
}

fn bench_distill(c: &mut Criterion) {
    let fx = fixture();
    let mut group = c.benchmark_group("distill_epoch");
    group.sample_size(10);
    for (name, exec) in ARMS {
        let cfg = DistillConfig {
            epochs: 1,
            batch_size: 128,
            validation_fraction: 0.0,
            execution: exec,
            ..DistillConfig::default()
        };
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| distill(&fx.sentences, &fx.vocab, &fx.oracle, fx.encoder.clone(), &cfg).unwrap())
        });
    }
    group.finish();
}

fn bench_finetune(c: &mut Criterion) {
    let fx = fixture();
    let examples = labeled(&fx.sentences);
    let (train, dev) = examples.split_at(448);
    let model = TaskModel::new(fx.encoder, TaskKind::Single, FeatureSource::Sentence, &[32], 2, &mut Rng::new(4)).unwrap();
    let mut group = c.benchmark_group("finetune_epoch");
    group.sample_size(10);
    for (name, exec) in ARMS {
        let cfg = FinetuneConfig {
            lr_grid: vec![1e-3],
            max_epochs: 1,
            batch_size: 64,
            head_hidden: vec![32],
            execution: exec,
            ..FinetuneConfig::default()
        };
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| finetune(&model, train, dev, &fx.vocab, &cfg, None).unwrap())
        });
    }
    group.finish();
}

fn bench_inference(c: &mut Criterion) {
    let fx = fixture();
    let (encoded, _) = encode_examples(&labeled(&fx.sentences), &fx.vocab);
    let model = TaskModel::new(fx.encoder, TaskKind::Single, FeatureSource::Sentence, &[32], 2, &mut Rng::new(5)).unwrap();
    let mut group = c.benchmark_group("predict");
    for (name, exec) in ARMS {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| black_box(predict(&model, &encoded, exec).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_distill, bench_finetune, bench_inference);
criterion_main!(benches);
