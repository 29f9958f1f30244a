//! Command-line surface. Every config field a manifest records has a flag of
//! the same name in kebab case.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use sra_core::data::TaskKind;
use sra_core::finetune::FeatureSource;

use crate::config::{layered, RunConfig};
use crate::error::{CliError, CliResult};

pub const SEED_ENV: &str = "SRA_SEED";

#[derive(Debug, Parser)]
#[command(
    name = "sra",
    version,
    about = "Distill a sentence encoder into a small BiLSTM and fine-tune it",
    after_help = "Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numeric failure.\n\
                  Config precedence: flags > --config file > --paper-defaults > built-in defaults.\n\
                  SRA_SEED replaces the default seed when neither a flag nor the config file sets one."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Export synthetic-teacher embeddings for a corpus as a teacher JSONL file.
    TeacherSynth(TeacherSynthArgs),
    /// Report the fraction of teacher-file components inside [-1, 1].
    TeacherRange(TeacherRangeArgs),
    /// Distill a teacher into a BiLSTM student.
    Distill(DistillArgs),
    /// Fine-tune a task model over a learning-rate grid.
    Finetune(FinetuneArgs),
    /// Evaluate a fine-tuned model on a labeled TSV file.
    Eval(EvalArgs),
    /// Untuned paraphrase detection by thresholding embedding cosine.
    Similarity(SimilarityArgs),
    /// Build an augmented transfer set from a corpus.
    Augment(AugmentArgs),
    /// Parameter counts and inference throughput.
    #[command(subcommand)]
    Bench(BenchCommand),
    /// Data-fraction and distillation-corpus-size sweeps.
    #[command(subcommand)]
    Sweep(SweepCommand),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Subcommand)]
pub enum BenchCommand {
    /// Count trainable parameters, excluding embeddings by default.
    Params(BenchParamsArgs),
    /// Time frozen-model forward passes.
    Speed(BenchSpeedArgs),
}

#[derive(Debug, Subcommand)]
pub enum SweepCommand {
    /// Fine-tune on growing fractions of the training set from distilled and random encoders.
    DataFraction(SweepFractionArgs),
    /// Distill on growing corpus prefixes and measure held-out loss.
    DistillSize(SweepSizeArgs),
}

fn parse_task(s: &str) -> Result<TaskKind, String> {
    s.parse().map_err(|e: sra_core::Error| e.to_string())
}

fn parse_features(s: &str) -> Result<FeatureSource, String> {
    s.parse().map_err(|e: sra_core::Error| e.to_string())
}

// ---------------------------------------------------------------------------
// Shared flag groups.

#[derive(Debug, Clone, Args)]
pub struct CommonFlags {
    /// Run seed [default: $SRA_SEED, else 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; 1 runs sequentially [default: 1]
    #[arg(long)]
    pub workers: Option<usize>,
    /// TOML or JSON config file, or a previous run's manifest.json
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Start from full-size settings (batch 1024, E=300, h=512, d=768, head 256)
    #[arg(long)]
    pub paper_defaults: bool,
}

impl CommonFlags {
    /// Defaults, config file and these flags merged; other flag groups are
    /// applied by the caller.
    pub fn resolve(&self) -> CliResult<RunConfig> {
        let (mut cfg, file_seed) = layered(self.paper_defaults, self.config.as_deref())?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        } else if !file_seed {
            if let Ok(raw) = std::env::var(SEED_ENV) {
                cfg.seed = raw
                    .trim()
                    .parse()
                    .map_err(|_| CliError::usage(format!("{SEED_ENV}={raw:?} is not an unsigned integer")))?;
            }
        }
        if let Some(w) = self.workers {
            cfg.workers = w;
        }
        if cfg.workers == 0 {
            return Err(CliError::usage("--workers must be at least 1"));
        }
        Ok(cfg)
    }
}

/// Sets `target` when the flag was given.
fn set<T: Clone>(target: &mut T, flag: &Option<T>) {
    if let Some(v) = flag {
        *target = v.clone();
    }
}

#[derive(Debug, Clone, Args)]
pub struct BatchFlags {
    /// Mini-batch size for distillation and fine-tuning [default: 32]
    #[arg(long)]
    pub batch_size: Option<usize>,
}

impl BatchFlags {
    pub fn apply(&self, cfg: &mut RunConfig) {
        set(&mut cfg.batch_size, &self.batch_size);
    }
}

#[derive(Debug, Clone, Args)]
pub struct EncoderFlags {
    /// Word embedding size E [default: 16]
    #[arg(long)]
    pub embed_dim: Option<usize>,
    /// LSTM hidden size per direction h [default: 16]
    #[arg(long)]
    pub hidden_dim: Option<usize>,
}

impl EncoderFlags {
    pub fn apply(&self, cfg: &mut RunConfig) {
        set(&mut cfg.encoder.embed_dim, &self.embed_dim);
        set(&mut cfg.encoder.hidden_dim, &self.hidden_dim);
    }
}

#[derive(Debug, Clone, Args)]
pub struct VocabFlags {
    /// Minimum token count for the vocabulary [default: 1]
    #[arg(long)]
    pub min_count: Option<usize>,
    /// Maximum vocabulary size including reserved tokens
    #[arg(long)]
    pub max_vocab: Option<usize>,
}

impl VocabFlags {
    pub fn apply(&self, cfg: &mut RunConfig) {
        set(&mut cfg.vocab.min_count, &self.min_count);
        if self.max_vocab.is_some() {
            cfg.vocab.max_vocab = self.max_vocab;
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct TeacherFlags {
    /// Teacher embedding size d, which is also the student output size [default: 16]
    #[arg(long)]
    pub dim: Option<usize>,
    /// Synthetic teacher token-vector size [default: 16]
    #[arg(long)]
    pub token_dim: Option<usize>,
    /// Synthetic teacher seed [default: 0]
    #[arg(long)]
    pub teacher_seed: Option<u64>,
}

impl TeacherFlags {
    pub fn apply(&self, cfg: &mut RunConfig) {
        set(&mut cfg.teacher.dim, &self.dim);
        set(&mut cfg.teacher.token_dim, &self.token_dim);
        set(&mut cfg.teacher.teacher_seed, &self.teacher_seed);
    }
}

#[derive(Debug, Clone, Args)]
pub struct DistillFlags {
    /// Distillation learning rate [default: 0.001]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Distillation epochs [default: 10]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Keep word embeddings fixed during distillation
    #[arg(long)]
    pub freeze_embeddings: bool,
    /// Held-out fraction of the corpus for validation [default: 0.02]
    #[arg(long)]
    pub validation_fraction: Option<f64>,
}

impl DistillFlags {
    pub fn apply(&self, cfg: &mut RunConfig) {
        set(&mut cfg.distill.lr, &self.lr);
        set(&mut cfg.distill.epochs, &self.epochs);
        if self.freeze_embeddings {
            cfg.distill.freeze_embeddings = true;
        }
        set(&mut cfg.distill.validation_fraction, &self.validation_fraction);
    }
}

#[derive(Debug, Clone, Args)]
pub struct HeadFlags {
    /// Hidden widths of the classifier head, comma separated [default: 256]
    #[arg(long, value_delimiter = ',')]
    pub head_hidden: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Args)]
pub struct FinetuneFlags {
    /// Learning rates to try, comma separated [default: 0.0002,0.0003,0.0005,0.001]
    #[arg(long, value_delimiter = ',')]
    pub lr_grid: Option<Vec<f64>>,
    /// Maximum fine-tuning epochs per learning rate [default: 100]
    #[arg(long)]
    pub max_epochs: Option<usize>,
    /// Epochs without dev improvement before stopping; 0 disables early stopping [default: 5]
    #[arg(long)]
    pub patience: Option<usize>,
    /// Weight of the teacher-logit MSE term [default: 1.0]
    #[arg(long)]
    pub alpha: Option<f64>,
    #[command(flatten)]
    pub head: HeadFlags,
    /// Head input: sentence (S_x) or hidden (H) [default: sentence]
    #[arg(long, value_parser = parse_features)]
    pub features: Option<FeatureSource>,
}

impl FinetuneFlags {
    pub fn apply(&self, cfg: &mut RunConfig) {
        set(&mut cfg.finetune.lr_grid, &self.lr_grid);
        set(&mut cfg.finetune.max_epochs, &self.max_epochs);
        if let Some(p) = self.patience {
            cfg.finetune.patience = (p > 0).then_some(p);
        }
        set(&mut cfg.finetune.alpha, &self.alpha);
        set(&mut cfg.finetune.head_hidden, &self.head.head_hidden);
        set(&mut cfg.finetune.features, &self.features);
    }
}

#[derive(Debug, Clone, Args)]
pub struct TaskFlags {
    /// Training TSV: label<TAB>text or label<TAB>text_a<TAB>text_b
    #[arg(long, value_name = "FILE")]
    pub train: PathBuf,
    /// Development TSV in the same layout
    #[arg(long, value_name = "FILE")]
    pub dev: PathBuf,
    /// single or pair
    #[arg(long, value_parser = parse_task, default_value = "single")]
    pub task: TaskKind,
    /// The TSV files start with a header row
    #[arg(long)]
    pub header: bool,
}

// ---------------------------------------------------------------------------
// Subcommand arguments.

#[derive(Debug, Args)]
pub struct TeacherSynthArgs {
    /// Corpus, one sentence per line
    #[arg(long, value_name = "FILE")]
    pub corpus: PathBuf,
    /// Teacher JSONL file to write
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: CommonFlags,
    #[command(flatten)]
    pub teacher: TeacherFlags,
}

#[derive(Debug, Args)]
pub struct TeacherRangeArgs {
    /// Teacher JSONL file
    #[arg(long, value_name = "FILE")]
    pub teacher: PathBuf,
}

#[derive(Debug, Args)]
pub struct DistillArgs {
    /// Corpus, one sentence per line
    #[arg(long, value_name = "FILE")]
    pub corpus: PathBuf,
    /// Teacher JSONL file covering every corpus sentence
    #[arg(long, value_name = "FILE", required_unless_present = "synthetic_teacher")]
    pub teacher: Option<PathBuf>,
    /// Use the seeded synthetic teacher instead of a file
    #[arg(long, conflicts_with = "teacher")]
    pub synthetic_teacher: bool,
    /// Word vectors (token v1 ... vE per line) to initialize embeddings
    #[arg(long, value_name = "FILE")]
    pub vectors: Option<PathBuf>,
    /// Output directory for best.sra, final.sra, history.csv and manifest.json
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: CommonFlags,
    #[command(flatten)]
    pub batch: BatchFlags,
    #[command(flatten)]
    pub encoder: EncoderFlags,
    #[command(flatten)]
    pub vocab: VocabFlags,
    #[command(flatten)]
    pub teacher_cfg: TeacherFlags,
    #[command(flatten)]
    pub distill: DistillFlags,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub task: TaskFlags,
    /// Distilled checkpoint whose encoder initializes the task model
    #[arg(long, value_name = "FILE", required_unless_present = "random_init")]
    pub checkpoint: Option<PathBuf>,
    /// Start from a random encoder with a vocabulary built from the training file
    #[arg(long, conflicts_with = "checkpoint")]
    pub random_init: bool,
    /// JSONL teacher logits ({"id", "logits"}) for the combined loss
    #[arg(long, value_name = "FILE")]
    pub teacher_logits: Option<PathBuf>,
    /// Output directory for model.sra, report.csv, dev_predictions.tsv and manifest.json
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: CommonFlags,
    #[command(flatten)]
    pub batch: BatchFlags,
    #[command(flatten)]
    pub finetune: FinetuneFlags,
    #[command(flatten)]
    pub encoder: EncoderFlags,
    #[command(flatten)]
    pub vocab: VocabFlags,
    #[command(flatten)]
    pub teacher_cfg: TeacherFlags,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Fine-tuned checkpoint
    #[arg(long, value_name = "FILE")]
    pub model: PathBuf,
    /// Labeled TSV in the training layout
    #[arg(long, value_name = "FILE")]
    pub data: PathBuf,
    /// The TSV file starts with a header row
    #[arg(long)]
    pub header: bool,
    /// Directory for metrics.json, predictions.tsv and manifest.json
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub common: CommonFlags,
}

#[derive(Debug, Args)]
pub struct SimilarityArgs {
    /// Distilled or fine-tuned checkpoint
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    /// Pair TSV with 0/1 labels to evaluate
    #[arg(long, value_name = "FILE")]
    pub data: PathBuf,
    /// Pair TSV on which the threshold is chosen
    #[arg(long, value_name = "FILE", required_unless_present = "threshold")]
    pub dev: Option<PathBuf>,
    /// Fixed cosine threshold instead of choosing one on --dev
    #[arg(long, conflicts_with = "dev")]
    pub threshold: Option<f64>,
    /// The TSV files start with a header row
    #[arg(long)]
    pub header: bool,
    /// Directory for similarity.json and manifest.json
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub common: CommonFlags,
}

#[derive(Debug, Args)]
pub struct AugmentArgs {
    /// Corpus, one sentence per line
    #[arg(long, value_name = "FILE")]
    pub corpus: PathBuf,
    /// Transfer-set file to write, one sentence per line
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Target size as a multiple of the corpus [default: 2]
    #[arg(long)]
    pub multiplier: Option<usize>,
    /// Hard cap on the transfer-set size [default: 800000]
    #[arg(long)]
    pub cap: Option<usize>,
    /// Per-token masking probability [default: 0.1]
    #[arg(long)]
    pub p_mask: Option<f64>,
    /// Shortest sampled n-gram [default: 1]
    #[arg(long)]
    pub ngram_min: Option<usize>,
    /// Longest sampled n-gram [default: 5]
    #[arg(long)]
    pub ngram_max: Option<usize>,
    #[command(flatten)]
    pub common: CommonFlags,
}

impl AugmentArgs {
    pub fn apply(&self, cfg: &mut RunConfig) {
        set(&mut cfg.augment.multiplier, &self.multiplier);
        set(&mut cfg.augment.cap, &self.cap);
        set(&mut cfg.augment.p_mask, &self.p_mask);
        set(&mut cfg.augment.ngram_min, &self.ngram_min);
        set(&mut cfg.augment.ngram_max, &self.ngram_max);
    }
}

#[derive(Debug, Args)]
pub struct BenchParamsArgs {
    /// Count a checkpoint's tensors instead of a configured model
    #[arg(long, value_name = "FILE")]
    pub checkpoint: Option<PathBuf>,
    /// Also count a head for this task: single or pair
    #[arg(long, value_parser = parse_task)]
    pub task: Option<TaskKind>,
    /// Classes of the counted head
    #[arg(long, default_value_t = 2)]
    pub classes: usize,
    /// Vocabulary size of a configured model
    #[arg(long, default_value_t = 10)]
    pub vocab_size: usize,
    /// Include the embedding table in the totals
    #[arg(long)]
    pub include_embeddings: bool,
    /// Directory for params.json and manifest.json
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub common: CommonFlags,
    #[command(flatten)]
    pub encoder: EncoderFlags,
    #[command(flatten)]
    pub teacher_cfg: TeacherFlags,
    #[command(flatten)]
    pub head: HeadFlags,
}

#[derive(Debug, Args)]
pub struct BenchSpeedArgs {
    /// Time a checkpoint's encoder instead of a configured random one
    #[arg(long, value_name = "FILE")]
    pub checkpoint: Option<PathBuf>,
    /// Corpus to encode; random token sequences are generated otherwise
    #[arg(long, value_name = "FILE")]
    pub data: Option<PathBuf>,
    /// Vocabulary size of a configured model
    #[arg(long, default_value_t = 100)]
    pub vocab_size: usize,
    /// Sentences per forward batch [default: 1024]
    #[arg(long)]
    pub inference_batch: Option<usize>,
    /// Timed passes; the median is reported [default: 5]
    #[arg(long)]
    pub repeats: Option<usize>,
    /// Generated sentences when no --data is given [default: 10000]
    #[arg(long)]
    pub sentences: Option<usize>,
    /// Directory for speed.json and manifest.json
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub common: CommonFlags,
    #[command(flatten)]
    pub encoder: EncoderFlags,
    #[command(flatten)]
    pub teacher_cfg: TeacherFlags,
}

impl BenchSpeedArgs {
    pub fn apply(&self, cfg: &mut RunConfig) {
        set(&mut cfg.bench.inference_batch, &self.inference_batch);
        set(&mut cfg.bench.repeats, &self.repeats);
        set(&mut cfg.bench.sentences, &self.sentences);
    }
}

#[derive(Debug, Args)]
pub struct SweepFractionArgs {
    #[command(flatten)]
    pub task: TaskFlags,
    /// Distilled checkpoint; the random arm uses the same architecture
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    /// Training-set fractions, comma separated [default: 0.2,0.3,0.5,1.0]
    #[arg(long, value_delimiter = ',')]
    pub fractions: Option<Vec<f64>>,
    /// Seeds per cell, comma separated [default: 0,1,2]
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Also write the per-epoch seed means as sweep_plot.csv
    #[arg(long)]
    pub plot_data: bool,
    /// Output directory for sweep.csv and manifest.json
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: CommonFlags,
    #[command(flatten)]
    pub batch: BatchFlags,
    #[command(flatten)]
    pub finetune: FinetuneFlags,
}

#[derive(Debug, Args)]
pub struct SweepSizeArgs {
    /// Distillation corpus; prefixes of it are used
    #[arg(long, value_name = "FILE")]
    pub corpus: PathBuf,
    /// Held-out sentences for the validation loss
    #[arg(long, value_name = "FILE")]
    pub validation: PathBuf,
    /// Teacher JSONL file covering corpus and validation
    #[arg(long, value_name = "FILE", required_unless_present = "synthetic_teacher")]
    pub teacher: Option<PathBuf>,
    /// Use the seeded synthetic teacher instead of a file
    #[arg(long, conflicts_with = "teacher")]
    pub synthetic_teacher: bool,
    /// Corpus prefix sizes, ascending, comma separated; 0 is the undistilled baseline [default: 0,500,1000,2000,4000]
    #[arg(long, value_delimiter = ',')]
    pub sizes: Option<Vec<usize>>,
    /// Downstream training TSV; with --dev, each size is also fine-tuned
    #[arg(long, value_name = "FILE", requires = "dev")]
    pub train: Option<PathBuf>,
    /// Downstream development TSV
    #[arg(long, value_name = "FILE", requires = "train")]
    pub dev: Option<PathBuf>,
    /// Downstream task: single or pair
    #[arg(long, value_parser = parse_task, default_value = "single")]
    pub task: TaskKind,
    /// The TSV files start with a header row
    #[arg(long)]
    pub header: bool,
    /// Also write sizes_plot.csv with NaN for absent values
    #[arg(long)]
    pub plot_data: bool,
    /// Output directory for sizes.csv and manifest.json
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: CommonFlags,
    #[command(flatten)]
    pub batch: BatchFlags,
    #[command(flatten)]
    pub encoder: EncoderFlags,
    #[command(flatten)]
    pub vocab: VocabFlags,
    #[command(flatten)]
    pub teacher_cfg: TeacherFlags,
    #[command(flatten)]
    pub distill: DistillFlags,
    #[command(flatten)]
    pub finetune: FinetuneFlags,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Seeds of the random problems, comma separated [default: 0,1,2,3,4]
    #[arg(long, value_delimiter = ',')]
    pub check_seeds: Option<Vec<u64>>,
    /// Directory for gradcheck.json and manifest.json
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub common: CommonFlags,
}
