//! One function per subcommand.

use std::fs;
use std::path::Path;
use std::time::Instant;

use serde_json::json;
use sra_core::bench::{closed_form_parameters, count_parameters, time_inference};
use sra_core::checkpoint::{Checkpoint, Stage};
use sra_core::data::{
    build_transfer_set, load_word_vectors, read_corpus, read_tsv, read_tsv_with_labels, tokenize, Dataset,
    LabelDict, LabeledExample, TaskKind, Vocabulary, RESERVED_TOKENS,
};
use sra_core::distill::distill;
use sra_core::finetune::{
    encode_examples, evaluate, finetune, predict, predictions_tsv, untuned_similarity_eval, TaskModel,
    ENCODER_STREAM,
};
use sra_core::gradcheck::{gradient_suite, FD_TOLERANCE};
use sra_core::nn::StudentEncoder;
use sra_core::sweep::{
    data_fraction_sweep, distill_size_sweep, fraction_plot_csv, fraction_rows_csv, mean_final_metric, size_rows_csv,
    DownstreamTask, Init,
};
use sra_core::teacher::{export_teacher_file, FileTeacher, RangeReport, SyntheticTeacher, TeacherLogits, TeacherOracle};
use sra_core::Rng;

use crate::args::*;
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::manifest::{manifest_path_for_dir, manifest_path_for_file, ManifestBuilder};

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

fn print_json(value: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(value).expect("json serializes"));
}

fn write_json(path: &Path, value: &serde_json::Value) -> CliResult<()> {
    fs::write(path, serde_json::to_string_pretty(value).expect("json serializes") + "\n")?;
    Ok(())
}

/// A file teacher, or the synthetic one sized by the config. The config's
/// teacher dimension is updated to the file's.
fn load_oracle(
    file: Option<&Path>,
    explicit_dim: Option<usize>,
    cfg: &mut RunConfig,
    manifest: &mut ManifestBuilder,
) -> CliResult<TeacherOracle> {
    match file {
        Some(path) => {
            let teacher = FileTeacher::load(path, explicit_dim)?;
            cfg.teacher.dim = teacher.dim();
            manifest.input("teacher", path)?;
            let report = RangeReport::compute(&teacher.vectors())?;
            log::info!("teacher range: {report}");
            Ok(TeacherOracle::File(teacher))
        }
        None => Ok(TeacherOracle::Synthetic(SyntheticTeacher::new(
            cfg.teacher.teacher_seed,
            cfg.teacher.dim,
            cfg.teacher.token_dim,
        )?)),
    }
}

fn build_vocab<'a>(texts: impl IntoIterator<Item = &'a str>, cfg: &RunConfig) -> Vocabulary {
    let tokenized: Vec<Vec<String>> = texts.into_iter().map(tokenize).collect();
    Vocabulary::build(tokenized.iter().map(Vec::as_slice), cfg.vocab.min_count, cfg.vocab.max_vocab)
}

fn example_texts(examples: &[LabeledExample]) -> impl Iterator<Item = &str> {
    examples
        .iter()
        .flat_map(|e| std::iter::once(e.text_a.as_str()).chain(e.text_b.as_deref()))
}

fn training_labels(ds: &Dataset, path: &Path) -> CliResult<LabelDict> {
    ds.labels
        .clone()
        .ok_or_else(|| sra_core::Error::Input(format!("{} has no labeled rows", path.display())).into())
}

// ---------------------------------------------------------------------------

pub fn teacher_synth(args: &TeacherSynthArgs) -> CliResult<()> {
    let mut cfg = args.common.resolve()?;
    args.teacher.apply(&mut cfg);
    let mut manifest = ManifestBuilder::new("teacher-synth", cfg.seed, cfg.subset(&["seed", "teacher"]));
    manifest.input("corpus", &args.corpus)?;
    let corpus = read_corpus(&args.corpus)?;
    let oracle = load_oracle(None, None, &mut cfg, &mut manifest)?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let n = export_teacher_file(&oracle, &corpus, &args.out)?;
    manifest.output("teacher", &args.out)?;
    manifest.finish(&manifest_path_for_file(&args.out))?;
    println!("wrote {n} teacher records of dimension {} to {}", oracle.dim(), args.out.display());
    Ok(())
}

pub fn teacher_range(args: &TeacherRangeArgs) -> CliResult<()> {
    let teacher = FileTeacher::load(&args.teacher, None)?;
    println!("{}", RangeReport::compute(&teacher.vectors())?);
    Ok(())
}

pub fn distill_cmd(args: &DistillArgs) -> CliResult<()> {
    let mut cfg = args.common.resolve()?;
    args.batch.apply(&mut cfg);
    args.encoder.apply(&mut cfg);
    args.vocab.apply(&mut cfg);
    args.teacher_cfg.apply(&mut cfg);
    args.distill.apply(&mut cfg);
    let mut manifest = ManifestBuilder::new("distill", cfg.seed, serde_json::Value::Null);
    manifest.input("corpus", &args.corpus)?;
    let corpus = read_corpus(&args.corpus)?;
    let oracle = load_oracle(args.teacher.as_deref(), args.teacher_cfg.dim, &mut cfg, &mut manifest)?;
    let vocab = build_vocab(corpus.iter().map(String::as_str), &cfg);
    let mut encoder = StudentEncoder::new(cfg.encoder_config(vocab.len()), &mut Rng::derive(cfg.seed, ENCODER_STREAM))?;
    if let Some(path) = &args.vectors {
        manifest.input("vectors", path)?;
        encoder.set_embedding(load_word_vectors(path, &vocab, cfg.seed, Some(cfg.encoder.embed_dim))?)?;
    }
    create_dir(&args.out)?;
    let mut dcfg = cfg.distill_config();
    dcfg.checkpoint_dir = Some(args.out.clone());
    let start = Instant::now();
    let outcome = distill(&corpus, &vocab, &oracle, encoder, &dcfg)?;
    manifest.timing("distill_seconds", start.elapsed().as_secs_f64());
    for name in ["best.sra", "final.sra", "history.csv"] {
        manifest.output(name, &args.out.join(name))?;
    }
    let mut keys = vec!["seed", "workers", "batch_size", "encoder", "vocab", "distill"];
    if args.synthetic_teacher {
        keys.push("teacher");
    }
    let mut recorded = cfg.subset(&keys);
    if !args.synthetic_teacher {
        recorded["teacher"] = json!({ "dim": cfg.teacher.dim });
    }
    manifest.set_config(recorded);
    manifest.finish(&manifest_path_for_dir(&args.out))?;
    let h = &outcome.history;
    print_json(&json!({
        "train_sentences": outcome.train.len(),
        "validation_sentences": outcome.validation.len(),
        "vocab_size": vocab.len(),
        "initial_train_loss": h.initial_train_loss(),
        "final_train_loss": h.final_train_loss(),
        "best_val_loss": h.best_val_loss(),
        "best_epoch": h.best_epoch,
        "skipped": h.skipped,
    }));
    Ok(())
}

pub fn finetune_cmd(args: &FinetuneArgs) -> CliResult<()> {
    let mut cfg = args.common.resolve()?;
    args.batch.apply(&mut cfg);
    args.finetune.apply(&mut cfg);
    args.encoder.apply(&mut cfg);
    args.vocab.apply(&mut cfg);
    args.teacher_cfg.apply(&mut cfg);
    let t = &args.task;
    let mut keys = vec!["seed", "workers", "batch_size", "finetune"];
    if args.random_init {
        keys.extend(["encoder", "vocab", "teacher"]);
    }
    let mut manifest = ManifestBuilder::new("finetune", cfg.seed, cfg.subset(&keys));
    manifest.input("train", &t.train)?;
    manifest.input("dev", &t.dev)?;
    let train = read_tsv(&t.train, t.task, t.header)?;
    let labels = training_labels(&train, &t.train)?;
    let dev = read_tsv_with_labels(&t.dev, t.task, t.header, &labels)?;
    let (init, vocab, parent) = match &args.checkpoint {
        Some(path) => {
            manifest.input("checkpoint", path)?;
            let ck = Checkpoint::load(path)?;
            let vocab = ck.vocabulary.clone();
            let digest = ck.digest();
            (Init::Distilled(ck), vocab, Some(digest))
        }
        None => {
            let vocab = build_vocab(example_texts(&train.examples), &cfg);
            (Init::Random(cfg.encoder_config(vocab.len())), vocab, None)
        }
    };
    let task = DownstreamTask {
        train: &train.examples,
        dev: &dev.examples,
        vocab: &vocab,
        kind: t.task,
        num_classes: labels.len(),
        finetune: cfg.finetune_config(),
    };
    let model = init.build(&task, cfg.seed)?;
    let logits = match &args.teacher_logits {
        Some(path) => {
            manifest.input("teacher_logits", path)?;
            Some(TeacherLogits::load(path)?)
        }
        None => None,
    };
    let start = Instant::now();
    let outcome = finetune(&model, task.train, task.dev, &vocab, &task.finetune, logits.as_ref())?;
    manifest.timing("finetune_seconds", start.elapsed().as_secs_f64());

    create_dir(&args.out)?;
    let meta = vec![
        ("seed".to_string(), cfg.seed.to_string()),
        ("best_lr".to_string(), outcome.report.best_lr.to_string()),
    ];
    let model_path = args.out.join("model.sra");
    outcome.model.to_checkpoint(parent, &vocab, &labels, meta)?.save(&model_path)?;
    let report_path = args.out.join("report.csv");
    fs::write(&report_path, outcome.report.to_csv())?;
    let (encoded, kept) = encode_examples(&dev.examples, &vocab);
    let preds = predict(&outcome.model, &encoded, cfg.execution())?;
    let preds_path = args.out.join("dev_predictions.tsv");
    fs::write(&preds_path, predictions_tsv(&kept, &preds, &labels))?;
    manifest.output("model.sra", &model_path)?;
    manifest.output("report.csv", &report_path)?;
    manifest.output("dev_predictions.tsv", &preds_path)?;
    manifest.finish(&manifest_path_for_dir(&args.out))?;
    print_json(&json!({
        "init": init.name(),
        "best_lr": outcome.report.best_lr,
        "best_dev_score": outcome.report.best_score.primary,
        "best_dev_secondary": outcome.report.best_score.secondary,
        "arms": outcome.report.arms,
    }));
    Ok(())
}

pub fn eval_cmd(args: &EvalArgs) -> CliResult<()> {
    let cfg = args.common.resolve()?;
    let mut manifest = ManifestBuilder::new("eval", cfg.seed, cfg.subset(&["workers"]));
    manifest.input("model", &args.model)?;
    manifest.input("data", &args.data)?;
    let ck = Checkpoint::load(&args.model)?;
    if ck.stage != Stage::Finetuned {
        return Err(sra_core::Error::Input(format!("{} is not a fine-tuned checkpoint", args.model.display())).into());
    }
    let model = TaskModel::from_finetuned(&ck)?;
    let labels = ck.labels.clone().expect("fine-tuned checkpoints carry labels");
    let data = read_tsv_with_labels(&args.data, model.kind(), args.header, &labels)?;
    let (encoded, kept) = encode_examples(&data.examples, &ck.vocabulary);
    let metrics = evaluate(&model, &encoded, cfg.execution())?;
    let result = json!({
        "examples": encoded.len(),
        "accuracy": metrics.accuracy,
        "f1": metrics.f1,
        "positive_class": metrics.positive_class.and_then(|c| labels.label(c)),
        "support": metrics.support,
        "majority_baseline": metrics.majority_baseline(),
    });
    if let Some(out) = &args.out {
        create_dir(out)?;
        let preds = predict(&model, &encoded, cfg.execution())?;
        let preds_path = out.join("predictions.tsv");
        fs::write(&preds_path, predictions_tsv(&kept, &preds, &labels))?;
        let metrics_path = out.join("metrics.json");
        write_json(&metrics_path, &result)?;
        manifest.output("predictions.tsv", &preds_path)?;
        manifest.output("metrics.json", &metrics_path)?;
        manifest.finish(&manifest_path_for_dir(out))?;
    }
    print_json(&result);
    Ok(())
}

pub fn similarity_cmd(args: &SimilarityArgs) -> CliResult<()> {
    let mut cfg = args.common.resolve()?;
    if args.threshold.is_some() {
        cfg.similarity.threshold = args.threshold;
    }
    let mut manifest = ManifestBuilder::new("similarity", cfg.seed, cfg.subset(&["similarity"]));
    manifest.input("checkpoint", &args.checkpoint)?;
    manifest.input("data", &args.data)?;
    let ck = Checkpoint::load(&args.checkpoint)?;
    let encoder = ck.encoder()?;
    let data = read_tsv(&args.data, TaskKind::Pair, args.header)?;
    let dev = match (&args.dev, cfg.similarity.threshold) {
        (_, Some(_)) => Vec::new(),
        (Some(path), None) => {
            manifest.input("dev", path)?;
            read_tsv(path, TaskKind::Pair, args.header)?.examples
        }
        (None, None) => return Err(CliError::usage("pass --dev to choose a threshold, or --threshold")),
    };
    let report = untuned_similarity_eval(&data.examples, &dev, &encoder, &ck.vocabulary, cfg.similarity.threshold)?;
    let result = serde_json::to_value(&report).expect("report serializes");
    if let Some(out) = &args.out {
        create_dir(out)?;
        let path = out.join("similarity.json");
        write_json(&path, &result)?;
        manifest.output("similarity.json", &path)?;
        manifest.finish(&manifest_path_for_dir(out))?;
    }
    print_json(&result);
    Ok(())
}

pub fn augment_cmd(args: &AugmentArgs) -> CliResult<()> {
    let mut cfg = args.common.resolve()?;
    args.apply(&mut cfg);
    let mut manifest = ManifestBuilder::new("augment", cfg.seed, cfg.subset(&["seed", "workers", "augment"]));
    manifest.input("corpus", &args.corpus)?;
    let corpus = read_corpus(&args.corpus)?;
    let examples: Vec<LabeledExample> = corpus.into_iter().map(|s| LabeledExample::single(s, None)).collect();
    let out = build_transfer_set(&examples, &cfg.augment_config(), &mut Rng::new(cfg.seed), cfg.execution())?;
    let mut text = String::new();
    for ex in &out {
        text.push_str(&ex.text_a);
        text.push('\n');
    }
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    fs::write(&args.out, text)?;
    manifest.output("transfer_set", &args.out)?;
    manifest.finish(&manifest_path_for_file(&args.out))?;
    println!("wrote {} sentences ({} original) to {}", out.len(), examples.len(), args.out.display());
    Ok(())
}

fn model_for_bench(
    checkpoint: Option<&Path>,
    vocab_size: usize,
    cfg: &RunConfig,
    manifest: &mut ManifestBuilder,
) -> CliResult<StudentEncoder> {
    match checkpoint {
        Some(path) => {
            manifest.input("checkpoint", path)?;
            Ok(Checkpoint::load(path)?.encoder()?)
        }
        None => {
            if vocab_size <= RESERVED_TOKENS.len() {
                return Err(CliError::usage(format!(
                    "--vocab-size must exceed the {} reserved tokens",
                    RESERVED_TOKENS.len()
                )));
            }
            Ok(StudentEncoder::new(
                cfg.encoder_config(vocab_size),
                &mut Rng::derive(cfg.seed, ENCODER_STREAM),
            )?)
        }
    }
}

pub fn bench_params(args: &BenchParamsArgs) -> CliResult<()> {
    let mut cfg = args.common.resolve()?;
    args.encoder.apply(&mut cfg);
    args.teacher_cfg.apply(&mut cfg);
    if let Some(h) = &args.head.head_hidden {
        cfg.finetune.head_hidden = h.clone();
    }
    let mut recorded = cfg.subset(&["seed", "encoder"]);
    recorded["teacher"] = json!({ "dim": cfg.teacher.dim });
    recorded["finetune"] = json!({ "head_hidden": cfg.finetune.head_hidden });
    let mut manifest = ManifestBuilder::new("bench params", cfg.seed, recorded);
    let enc = model_for_bench(args.checkpoint.as_deref(), args.vocab_size, &cfg, &mut manifest)?;
    let exclude = !args.include_embeddings;
    let enc_cfg = enc.config();
    let encoder_count = count_parameters(&enc, exclude);
    let mut result = json!({
        "config": enc_cfg,
        "include_embeddings": args.include_embeddings,
        "encoder": encoder_count,
        "encoder_closed_form": closed_form_parameters(&enc_cfg, None, args.include_embeddings),
        "encoder_millions": format!("{:.1}", encoder_count as f64 / 1e6),
    });
    if let Some(kind) = args.task {
        let features = cfg.finetune.features;
        let hidden = cfg.finetune.head_hidden.clone();
        let input = TaskModel::head_input_dim(&enc, kind, features);
        let model = TaskModel::new(enc, kind, features, &hidden, args.classes, &mut Rng::new(cfg.seed))?;
        let total = count_parameters(&model, exclude);
        result["with_head"] = json!(total);
        result["with_head_closed_form"] = json!(closed_form_parameters(
            &enc_cfg,
            Some((input, &hidden, args.classes)),
            args.include_embeddings
        ));
        result["with_head_millions"] = json!(format!("{:.1}", total as f64 / 1e6));
    }
    if let Some(out) = &args.out {
        create_dir(out)?;
        let path = out.join("params.json");
        write_json(&path, &result)?;
        manifest.output("params.json", &path)?;
        manifest.finish(&manifest_path_for_dir(out))?;
    }
    print_json(&result);
    Ok(())
}

pub fn bench_speed(args: &BenchSpeedArgs) -> CliResult<()> {
    let mut cfg = args.common.resolve()?;
    args.encoder.apply(&mut cfg);
    args.teacher_cfg.apply(&mut cfg);
    args.apply(&mut cfg);
    let mut recorded = cfg.subset(&["seed", "encoder", "bench"]);
    recorded["teacher"] = json!({ "dim": cfg.teacher.dim });
    let mut manifest = ManifestBuilder::new("bench speed", cfg.seed, recorded);
    let enc = model_for_bench(args.checkpoint.as_deref(), args.vocab_size, &cfg, &mut manifest)?;
    let v = enc.config().vocab_size;
    let rows: Vec<Vec<u32>> = match &args.data {
        Some(path) => {
            manifest.input("data", path)?;
            let vocab = match &args.checkpoint {
                Some(ck) => Checkpoint::load(ck)?.vocabulary,
                None => return Err(CliError::usage("--data needs --checkpoint to map tokens to ids")),
            };
            read_corpus(path)?
                .iter()
                .map(|s| vocab.encode_text(s))
                .filter(|r| !r.is_empty())
                .collect()
        }
        None => {
            let mut rng = Rng::derive(cfg.seed, 0x5350_4545);
            (0..cfg.bench.sentences)
                .map(|_| {
                    let len = 3 + rng.below(8);
                    (0..len)
                        .map(|_| (RESERVED_TOKENS.len() + rng.below(v - RESERVED_TOKENS.len())) as u32)
                        .collect()
                })
                .collect()
        }
    };
    let report = time_inference(&enc, &rows, cfg.bench.inference_batch, cfg.bench.repeats)?;
    let result = serde_json::to_value(&report).expect("report serializes");
    if let Some(out) = &args.out {
        create_dir(out)?;
        let path = out.join("speed.json");
        write_json(&path, &result)?;
        manifest.output("speed.json", &path)?;
        manifest.finish(&manifest_path_for_dir(out))?;
    }
    print_json(&result);
    Ok(())
}

pub fn sweep_fraction(args: &SweepFractionArgs) -> CliResult<()> {
    let mut cfg = args.common.resolve()?;
    args.batch.apply(&mut cfg);
    args.finetune.apply(&mut cfg);
    if let Some(f) = &args.fractions {
        cfg.sweep.fractions = f.clone();
    }
    if let Some(s) = &args.seeds {
        cfg.sweep.seeds = s.clone();
    }
    if cfg.finetune.lr_grid.len() != 1 {
        return Err(CliError::usage("the data-fraction sweep needs a single learning rate, e.g. --lr-grid 0.001"));
    }
    let mut recorded = cfg.subset(&["seed", "workers", "batch_size", "finetune"]);
    recorded["sweep"] = json!({ "fractions": cfg.sweep.fractions, "seeds": cfg.sweep.seeds });
    let mut manifest = ManifestBuilder::new("sweep data-fraction", cfg.seed, recorded);
    let t = &args.task;
    manifest.input("checkpoint", &args.checkpoint)?;
    manifest.input("train", &t.train)?;
    manifest.input("dev", &t.dev)?;
    let ck = Checkpoint::load(&args.checkpoint)?;
    let train = read_tsv(&t.train, t.task, t.header)?;
    let labels = training_labels(&train, &t.train)?;
    let dev = read_tsv_with_labels(&t.dev, t.task, t.header, &labels)?;
    let vocab = ck.vocabulary.clone();
    let task = DownstreamTask {
        train: &train.examples,
        dev: &dev.examples,
        vocab: &vocab,
        kind: t.task,
        num_classes: labels.len(),
        finetune: cfg.finetune_config(),
    };
    let inits = [Init::Random(ck.config), Init::Distilled(ck)];
    let rows = data_fraction_sweep(&task, &cfg.sweep.fractions, &inits, &cfg.sweep.seeds, cfg.execution())?;
    create_dir(&args.out)?;
    let path = args.out.join("sweep.csv");
    fs::write(&path, fraction_rows_csv(&rows))?;
    manifest.output("sweep.csv", &path)?;
    if args.plot_data {
        let plot = args.out.join("sweep_plot.csv");
        fs::write(&plot, fraction_plot_csv(&rows))?;
        manifest.output("sweep_plot.csv", &plot)?;
    }
    manifest.finish(&manifest_path_for_dir(&args.out))?;
    let summary: Vec<_> = cfg
        .sweep
        .fractions
        .iter()
        .map(|&f| {
            json!({
                "fraction": f,
                "distilled": mean_final_metric(&rows, f, "distilled"),
                "random": mean_final_metric(&rows, f, "random"),
            })
        })
        .collect();
    print_json(&json!({ "rows": rows.len(), "final_dev_metric_means": summary }));
    Ok(())
}

pub fn sweep_size(args: &SweepSizeArgs) -> CliResult<()> {
    let mut cfg = args.common.resolve()?;
    args.batch.apply(&mut cfg);
    args.encoder.apply(&mut cfg);
    args.vocab.apply(&mut cfg);
    args.teacher_cfg.apply(&mut cfg);
    args.distill.apply(&mut cfg);
    args.finetune.apply(&mut cfg);
    if let Some(s) = &args.sizes {
        cfg.sweep.sizes = s.clone();
    }
    let mut manifest = ManifestBuilder::new("sweep distill-size", cfg.seed, serde_json::Value::Null);
    manifest.input("corpus", &args.corpus)?;
    manifest.input("validation", &args.validation)?;
    let corpus = read_corpus(&args.corpus)?;
    let validation = read_corpus(&args.validation)?;
    let oracle = load_oracle(args.teacher.as_deref(), args.teacher_cfg.dim, &mut cfg, &mut manifest)?;
    let vocab = build_vocab(corpus.iter().chain(&validation).map(String::as_str), &cfg);
    let downstream = match (&args.train, &args.dev) {
        (Some(train_path), Some(dev_path)) => {
            manifest.input("train", train_path)?;
            manifest.input("dev", dev_path)?;
            let train = read_tsv(train_path, args.task, args.header)?;
            let labels = training_labels(&train, train_path)?;
            let dev = read_tsv_with_labels(dev_path, args.task, args.header, &labels)?;
            Some((train, dev, labels))
        }
        _ => None,
    };
    let task = downstream.as_ref().map(|(train, dev, labels)| DownstreamTask {
        train: &train.examples,
        dev: &dev.examples,
        vocab: &vocab,
        kind: args.task,
        num_classes: labels.len(),
        finetune: cfg.finetune_config(),
    });
    let rows = distill_size_sweep(
        &corpus,
        &validation,
        &vocab,
        &oracle,
        cfg.encoder_config(vocab.len()),
        &cfg.sweep.sizes,
        &cfg.distill_config(),
        task.as_ref(),
    )?;
    create_dir(&args.out)?;
    let path = args.out.join("sizes.csv");
    fs::write(&path, size_rows_csv(&rows, false))?;
    manifest.output("sizes.csv", &path)?;
    if args.plot_data {
        let plot = args.out.join("sizes_plot.csv");
        fs::write(&plot, size_rows_csv(&rows, true))?;
        manifest.output("sizes_plot.csv", &plot)?;
    }
    let mut keys = vec!["seed", "workers", "batch_size", "encoder", "vocab", "distill"];
    if task.is_some() {
        keys.push("finetune");
    }
    if args.synthetic_teacher {
        keys.push("teacher");
    }
    let mut recorded = cfg.subset(&keys);
    if !args.synthetic_teacher {
        recorded["teacher"] = json!({ "dim": cfg.teacher.dim });
    }
    recorded["sweep"] = json!({ "sizes": cfg.sweep.sizes });
    manifest.set_config(recorded);
    manifest.finish(&manifest_path_for_dir(&args.out))?;
    print_json(&serde_json::to_value(&rows).expect("rows serialize"));
    Ok(())
}

pub fn gradcheck_cmd(args: &GradcheckArgs) -> CliResult<()> {
    let mut cfg = args.common.resolve()?;
    if let Some(s) = &args.check_seeds {
        cfg.gradcheck.check_seeds = s.clone();
    }
    if cfg.gradcheck.check_seeds.is_empty() {
        return Err(CliError::usage("--check-seeds needs at least one seed"));
    }
    let manifest = ManifestBuilder::new("gradcheck", cfg.seed, cfg.subset(&["gradcheck"]));
    let checks = gradient_suite(&cfg.gradcheck.check_seeds)?;
    println!("{:<18} {:>8} {:>12}  status", "layer", "coords", "max_rel_err");
    for c in &checks {
        println!(
            "{:<18} {:>8} {:>12.3e}  {}",
            c.layer,
            c.coordinates,
            c.max_relative_error,
            if c.passed() { "ok" } else { "FAIL" }
        );
    }
    if let Some(out) = &args.out {
        create_dir(out)?;
        let path = out.join("gradcheck.json");
        write_json(&path, &serde_json::to_value(&checks).expect("checks serialize"))?;
        let mut manifest = manifest;
        manifest.output("gradcheck.json", &path)?;
        manifest.finish(&manifest_path_for_dir(out))?;
    }
    let failing: Vec<&str> = checks.iter().filter(|c| !c.passed()).map(|c| c.layer.as_str()).collect();
    if failing.is_empty() {
        println!("all {} layers within {FD_TOLERANCE:e}", checks.len());
        Ok(())
    } else {
        Err(CliError::CheckFailed(format!(
            "layers above tolerance {FD_TOLERANCE:e}: {}",
            failing.join(", ")
        )))
    }
}
