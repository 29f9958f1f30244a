use std::fs;
use std::path::Path;

use proptest::prelude::*;
use sra_core::bench::{closed_form_parameters, count_parameters};
use sra_core::data::{build_transfer_set, AugmentConfig, LabeledExample, TaskKind, Vocabulary, UNK_ID};
use sra_core::distill::{distill, DistillConfig, DistillHistory};
use sra_core::finetune::{finetune, FeatureSource, FinetuneConfig, TaskModel};
use sra_core::nn::{student_forward, AdamConfig, AdamState, EncoderConfig, Parameters, StudentEncoder};
use sra_core::parallel::Execution;
use sra_core::synthetic::{synthetic_corpus, CorpusConfig};
use sra_core::teacher::{export_teacher_file, range_statistic, FileTeacher, SyntheticTeacher, TeacherOracle};
use sra_core::{Rng, Tensor};

fn encoder_config(vocab_size: usize) -> EncoderConfig {
    EncoderConfig {
        vocab_size,
        embed_dim: 6,
        hidden_dim: 5,
        output_dim: 8,
    }
}

fn corpus(n: usize, seed: u64) -> (Vec<String>, Vocabulary) {
    let cfg = CorpusConfig {
        words: 30,
        ..CorpusConfig::default()
    };
    (synthetic_corpus(n, &cfg, &mut Rng::new(seed)).unwrap(), cfg.vocabulary())
}

fn synthetic_oracle(dim: usize) -> TeacherOracle {
    TeacherOracle::Synthetic(SyntheticTeacher::new(3, dim, 6).unwrap())
}

fn quick_distill(epochs: usize, exec: Execution) -> DistillConfig {
    DistillConfig {
        lr: 5e-3,
        batch_size: 8,
        epochs,
        seed: 1,
        validation_fraction: 0.2,
        execution: exec,
        ..DistillConfig::default()
    }
}

/// A copy of a teacher JSONL file with every vector multiplied by `factor`.
fn scaled_teacher(src: &Path, dst: &Path, factor: f64) {
    let text = fs::read_to_string(src).unwrap();
    let mut lines = text.lines();
    let mut out = vec![lines.next().unwrap().to_string()];
    for line in lines {
        let mut record: serde_json::Value = serde_json::from_str(line).unwrap();
        let scaled: Vec<f64> = record["vec"]
            .as_array()
            .unwrap()
            .iter()
            .map(|v| v.as_f64().unwrap() * factor)
            .collect();
        record["vec"] = serde_json::json!(scaled);
        out.push(record.to_string());
    }
    fs::write(dst, out.join("\n") + "\n").unwrap();
}

fn train_losses(h: &DistillHistory) -> Vec<f64> {
    h.records.iter().map(|r| r.train_loss).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rng_streams_repeat_for_equal_seeds(seed in any::<u64>(), stream in any::<u64>()) {
        let mut a = Rng::derive(seed, stream);
        let mut b = Rng::derive(seed, stream);
        for _ in 0..32 {
            prop_assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn student_output_is_strictly_inside_unit_interval(
        seed in any::<u64>(),
        tokens in proptest::collection::vec(0u32..20, 1..12),
        gain in 1.0f64..50.0,
    ) {
        let mut enc = StudentEncoder::new(encoder_config(20), &mut Rng::new(seed)).unwrap();
        // Large projection weights push tanh towards saturation.
        enc.projection_mut().data_mut().iter_mut().for_each(|w| *w *= gain);
        let out = student_forward(&tokens, &enc).unwrap();
        prop_assert!(out.data().iter().all(|&v| v > -1.0 && v < 1.0));
    }

    #[test]
    fn adam_with_zero_lr_is_identity(
        values in proptest::collection::vec(-5.0f64..5.0, 6),
        grads in proptest::collection::vec(-5.0f64..5.0, 6),
        steps in 1usize..5,
    ) {
        let mut p = Tensor::new(vec![2, 3], values.clone()).unwrap();
        let g = Tensor::new(vec![2, 3], grads).unwrap();
        let mut state = AdamState::new(AdamConfig::with_lr(0.0), &[&p]).unwrap();
        for _ in 0..steps {
            state.step(&mut [&mut p], &[&g]).unwrap();
        }
        prop_assert_eq!(p.data(), values.as_slice());
        prop_assert_eq!(state.step_count(), steps as u64);
    }

    #[test]
    fn encoder_output_ignores_batch_padding(
        seed in any::<u64>(),
        row in proptest::collection::vec(3u32..20, 1..6),
        extra in proptest::collection::vec(3u32..20, 6..14),
    ) {
        let enc = StudentEncoder::new(encoder_config(20), &mut Rng::new(seed)).unwrap();
        let alone = enc.encode_batch(&[row.as_slice()]).unwrap();
        let padded = enc.encode_batch(&[row.as_slice(), extra.as_slice()]).unwrap();
        prop_assert_eq!(alone[0].data(), padded[0].data());
    }

    #[test]
    fn transfer_set_size_is_capped_multiple(
        n in 1usize..20,
        multiplier in 1usize..5,
        cap in 1usize..60,
        seed in any::<u64>(),
    ) {
        let examples: Vec<LabeledExample> =
            (0..n).map(|i| LabeledExample::single(format!("w{i} w{} w{}", i + 1, i + 2), None)).collect();
        let cfg = AugmentConfig { multiplier, cap, ..AugmentConfig::default() };
        let out = build_transfer_set(&examples, &cfg, &mut Rng::new(seed), Execution::Sequential).unwrap();
        prop_assert_eq!(out.len(), (n * multiplier).min(cap));
    }

    #[test]
    fn vocabulary_ids_are_dense(words in proptest::collection::btree_set("[a-z]{1,6}", 1..30)) {
        let vocab = Vocabulary::from_tokens(words.iter().cloned()).unwrap();
        for id in 0..vocab.len() as u32 {
            let token = vocab.token(id).unwrap();
            prop_assert_eq!(vocab.lookup(token), id);
        }
        prop_assert_eq!(vocab.lookup("NOT-A-WORD"), UNK_ID);
    }

    #[test]
    fn range_statistic_ignores_order(
        seed in any::<u64>(),
        vectors in proptest::collection::vec(proptest::collection::vec(-2.0f64..2.0, 4), 1..10),
    ) {
        let tensors: Vec<Tensor> = vectors.iter().map(|v| Tensor::vector(v.clone()).unwrap()).collect();
        let mut shuffled = tensors.clone();
        Rng::new(seed).shuffle(&mut shuffled);
        prop_assert_eq!(range_statistic(&tensors).unwrap(), range_statistic(&shuffled).unwrap());
    }

    #[test]
    fn small_step_reduces_single_example_loss(
        seed in 0u64..1000,
        a in proptest::collection::vec(3u32..20, 1..6),
        label in 0usize..2,
    ) {
        let enc = StudentEncoder::new(encoder_config(20), &mut Rng::new(seed)).unwrap();
        let model = TaskModel::new(enc, TaskKind::Single, FeatureSource::Sentence, &[6], 2, &mut Rng::new(seed + 1)).unwrap();
        let (before, grads) = model.loss_and_gradients(&a, None, label).unwrap();
        let norm: f64 = grads.iter().flat_map(|g| g.data()).map(|x| x * x).sum();
        prop_assume!(norm > 1e-12);
        let mut stepped = model.clone();
        for (p, g) in stepped.parameters_mut().into_iter().zip(&grads) {
            for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
                *w -= 1e-4 * d;
            }
        }
        prop_assert!(stepped.loss(&a, None, label).unwrap() < before);
    }
}

#[test]
fn parameter_counter_matches_closed_form_on_grid() {
    for e in [1, 2, 5] {
        for h in [1, 3, 4] {
            for d in [1, 2, 7] {
                let cfg = EncoderConfig {
                    vocab_size: 6,
                    embed_dim: e,
                    hidden_dim: h,
                    output_dim: d,
                };
                let enc = StudentEncoder::new(cfg, &mut Rng::new(0)).unwrap();
                let lstm = 2 * 4 * (h * (e + h) + h);
                assert_eq!(count_parameters(&enc, true), lstm + 2 * h * d);
                assert_eq!(count_parameters(&enc, true), closed_form_parameters(&cfg, None, false));
                assert_eq!(count_parameters(&enc, false), closed_form_parameters(&cfg, None, true));
                let model = TaskModel::new(enc, TaskKind::Pair, FeatureSource::Sentence, &[3], 2, &mut Rng::new(1)).unwrap();
                let head = (4 * d, &[3usize][..], 2);
                assert_eq!(count_parameters(&model, true), closed_form_parameters(&cfg, Some(head), false));
            }
        }
    }
}

#[test]
fn oracle_digest_survives_encoding() {
    let oracle = synthetic_oracle(8);
    let before = oracle.digest();
    for s in corpus(50, 4).0 {
        oracle.embed(&s).unwrap();
    }
    assert_eq!(oracle.digest(), before);
}

#[test]
fn teacher_file_round_trip_is_exact_in_f32() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("teacher.jsonl");
    let oracle = synthetic_oracle(8);
    let (sentences, _) = corpus(40, 5);
    export_teacher_file(&oracle, &sentences, &path).unwrap();
    let file = FileTeacher::load(&path, Some(8)).unwrap();
    for s in &sentences {
        let want: Vec<f64> = oracle.embed(s).unwrap().data().iter().map(|&x| x as f32 as f64).collect();
        assert_eq!(file.lookup(s).unwrap().data(), want.as_slice());
    }
}

#[test]
fn distillation_ignores_teacher_scale() {
    let dir = tempfile::tempdir().unwrap();
    let (sentences, vocab) = corpus(60, 6);
    let base = dir.path().join("base.jsonl");
    export_teacher_file(&synthetic_oracle(8), &sentences, &base).unwrap();
    let enc = StudentEncoder::new(encoder_config(vocab.len()), &mut Rng::new(2)).unwrap();
    let run = |path: &Path| {
        let oracle = TeacherOracle::File(FileTeacher::load(path, None).unwrap());
        distill(&sentences, &vocab, &oracle, enc.clone(), &quick_distill(3, Execution::Sequential)).unwrap()
    };
    let reference = run(&base);
    // A power of two scales exactly in binary floating point.
    let four = dir.path().join("four.jsonl");
    scaled_teacher(&base, &four, 4.0);
    assert_eq!(run(&four).history, reference.history);

    let three = dir.path().join("three.jsonl");
    scaled_teacher(&base, &three, 3.0);
    let scaled = run(&three).history;
    for (a, b) in train_losses(&scaled).iter().zip(train_losses(&reference.history)) {
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }
}

#[test]
fn distillation_history_is_bounded_and_frozen_embeddings_hold() {
    let (sentences, vocab) = corpus(80, 7);
    let oracle = synthetic_oracle(8);
    let enc = StudentEncoder::new(encoder_config(vocab.len()), &mut Rng::new(3)).unwrap();
    let cfg = DistillConfig {
        freeze_embeddings: true,
        ..quick_distill(3, Execution::Sequential)
    };
    let out = distill(&sentences, &vocab, &oracle, enc.clone(), &cfg).unwrap();
    for r in &out.history.records {
        assert!((0.0..=1.0).contains(&r.train_loss));
        assert!(r.val_loss.is_none_or(|v| (0.0..=1.0).contains(&v)));
    }
    assert_eq!(out.encoder.embedding(), enc.embedding());
    assert_ne!(out.encoder.projection(), enc.projection());
}

#[test]
fn parallel_and_sequential_paths_agree() {
    let (sentences, vocab) = corpus(70, 8);
    let oracle = synthetic_oracle(8);
    let enc = StudentEncoder::new(encoder_config(vocab.len()), &mut Rng::new(4)).unwrap();
    let seq = distill(&sentences, &vocab, &oracle, enc.clone(), &quick_distill(2, Execution::Sequential)).unwrap();
    let par = distill(&sentences, &vocab, &oracle, enc, &quick_distill(2, Execution::Parallel)).unwrap();
    assert_eq!(seq.history, par.history);
    assert_eq!(seq.encoder, par.encoder);

    let pairs: Vec<LabeledExample> = sentences
        .chunks(2)
        .enumerate()
        .filter(|(_, c)| c.len() == 2)
        .map(|(i, c)| LabeledExample::pair(c[0].clone(), c[1].clone(), Some(i % 2)))
        .collect();
    let (train, dev) = pairs.split_at(25);
    let model = TaskModel::new(seq.encoder, TaskKind::Pair, FeatureSource::Sentence, &[4], 2, &mut Rng::new(5)).unwrap();
    let ft = |exec| FinetuneConfig {
        lr_grid: vec![1e-3, 3e-3],
        max_epochs: 2,
        batch_size: 4,
        head_hidden: vec![4],
        execution: exec,
        ..FinetuneConfig::default()
    };
    let a = finetune(&model, train, dev, &vocab, &ft(Execution::Sequential), None).unwrap();
    let b = finetune(&model, train, dev, &vocab, &ft(Execution::Parallel), None).unwrap();
    assert_eq!(a.report, b.report);
}

#[test]
fn pair_model_shares_one_encoder_through_training() {
    let (sentences, vocab) = corpus(40, 9);
    let pairs: Vec<LabeledExample> = (0..20)
        .map(|i| LabeledExample::pair(sentences[i].clone(), sentences[i + 20].clone(), Some(i % 2)))
        .collect();
    let enc = StudentEncoder::new(encoder_config(vocab.len()), &mut Rng::new(6)).unwrap();
    let model = TaskModel::new(enc, TaskKind::Pair, FeatureSource::Sentence, &[4], 2, &mut Rng::new(7)).unwrap();
    assert!(std::ptr::eq(model.encoder_for_side(0), model.encoder_for_side(1)));
    let cfg = FinetuneConfig {
        lr_grid: vec![1e-2],
        max_epochs: 3,
        batch_size: 4,
        head_hidden: vec![4],
        ..FinetuneConfig::default()
    };
    let out = finetune(&model, &pairs, &pairs[..8], &vocab, &cfg, None).unwrap();
    assert!(std::ptr::eq(out.model.encoder_for_side(0), out.model.encoder_for_side(1)));
    assert!(std::ptr::eq(out.model.encoder_for_side(0), out.model.encoder()));
    assert_ne!(out.model.encoder(), model.encoder());
}
