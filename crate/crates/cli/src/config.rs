//! Effective run configuration: defaults, optional published defaults, a config
//! file and command-line flags, merged in that order.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sra_core::distill::DistillConfig;
use sra_core::finetune::{FeatureSource, FinetuneConfig};
use sra_core::nn::EncoderConfig;
use sra_core::parallel::Execution;

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    pub embed_dim: usize,
    pub hidden_dim: usize,
}

impl Default for EncoderSection {
    fn default() -> Self {
        EncoderSection {
            embed_dim: 16,
            hidden_dim: 16,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VocabSection {
    pub min_count: usize,
    /// Cap on the vocabulary size including reserved tokens.
    pub max_vocab: Option<usize>,
}

/// The teacher dimension doubles as the student's output size. The token
/// size and seed only matter for the synthetic teacher.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherSection {
    pub dim: usize,
    pub token_dim: usize,
    pub teacher_seed: u64,
}

impl Default for TeacherSection {
    fn default() -> Self {
        TeacherSection {
            dim: 16,
            token_dim: 16,
            teacher_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillSection {
    pub lr: f64,
    pub epochs: usize,
    pub freeze_embeddings: bool,
    pub validation_fraction: f64,
}

impl Default for DistillSection {
    fn default() -> Self {
        let d = DistillConfig::default();
        DistillSection {
            lr: d.lr,
            epochs: d.epochs,
            freeze_embeddings: d.freeze_embeddings,
            validation_fraction: d.validation_fraction,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneSection {
    pub lr_grid: Vec<f64>,
    pub max_epochs: usize,
    pub patience: Option<usize>,
    pub alpha: f64,
    pub head_hidden: Vec<usize>,
    pub features: FeatureSource,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        let f = FinetuneConfig::default();
        FinetuneSection {
            lr_grid: f.lr_grid,
            max_epochs: f.max_epochs,
            patience: f.patience,
            alpha: f.alpha,
            head_hidden: f.head_hidden,
            features: f.features,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSection {
    pub multiplier: usize,
    pub cap: usize,
    pub p_mask: f64,
    pub ngram_min: usize,
    pub ngram_max: usize,
}

impl Default for AugmentSection {
    fn default() -> Self {
        let a = sra_core::data::AugmentConfig::default();
        AugmentSection {
            multiplier: 2,
            cap: a.cap,
            p_mask: a.p_mask,
            ngram_min: a.ngram_min,
            ngram_max: a.ngram_max,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub inference_batch: usize,
    pub repeats: usize,
    /// Generated sentences when no data file is given.
    pub sentences: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        BenchSection {
            inference_batch: 1024,
            repeats: 5,
            sentences: 10_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub fractions: Vec<f64>,
    pub seeds: Vec<u64>,
    pub sizes: Vec<usize>,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            fractions: vec![0.2, 0.3, 0.5, 1.0],
            seeds: vec![0, 1, 2],
            sizes: vec![0, 500, 1000, 2000, 4000],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimilaritySection {
    pub threshold: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckSection {
    pub check_seeds: Vec<u64>,
}

impl Default for GradcheckSection {
    fn default() -> Self {
        GradcheckSection {
            check_seeds: (0..5).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub workers: usize,
    /// Mini-batch size for both distillation and fine-tuning.
    pub batch_size: usize,
    pub encoder: EncoderSection,
    pub vocab: VocabSection,
    pub teacher: TeacherSection,
    pub distill: DistillSection,
    pub finetune: FinetuneSection,
    pub augment: AugmentSection,
    pub bench: BenchSection,
    pub sweep: SweepSection,
    pub similarity: SimilaritySection,
    pub gradcheck: GradcheckSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            workers: 1,
            batch_size: 32,
            encoder: EncoderSection::default(),
            vocab: VocabSection::default(),
            teacher: TeacherSection::default(),
            distill: DistillSection::default(),
            finetune: FinetuneSection::default(),
            augment: AugmentSection::default(),
            bench: BenchSection::default(),
            sweep: SweepSection::default(),
            similarity: SimilaritySection::default(),
            gradcheck: GradcheckSection::default(),
        }
    }
}

impl RunConfig {
    /// Full-size settings: BERT-base teacher width, E=300, h=512, batch 1024.
    pub fn paper() -> Self {
        let base = RunConfig::default();
        RunConfig {
            batch_size: 1024,
            encoder: EncoderSection {
                embed_dim: 300,
                hidden_dim: 512,
            },
            teacher: TeacherSection {
                dim: 768,
                token_dim: 300,
                ..base.teacher.clone()
            },
            distill: DistillSection {
                lr: 1e-3,
                ..base.distill.clone()
            },
            finetune: FinetuneSection {
                lr_grid: vec![2e-4, 3e-4, 5e-4, 1e-3],
                head_hidden: vec![256],
                ..base.finetune.clone()
            },
            ..base
        }
    }

    pub fn execution(&self) -> Execution {
        Execution::from_workers(self.workers)
    }

    pub fn encoder_config(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            vocab_size,
            embed_dim: self.encoder.embed_dim,
            hidden_dim: self.encoder.hidden_dim,
            output_dim: self.teacher.dim,
        }
    }

    pub fn distill_config(&self) -> DistillConfig {
        DistillConfig {
            lr: self.distill.lr,
            batch_size: self.batch_size,
            epochs: self.distill.epochs,
            seed: self.seed,
            freeze_embeddings: self.distill.freeze_embeddings,
            validation_fraction: self.distill.validation_fraction,
            checkpoint_dir: None,
            execution: self.execution(),
        }
    }

    pub fn finetune_config(&self) -> FinetuneConfig {
        FinetuneConfig {
            lr_grid: self.finetune.lr_grid.clone(),
            max_epochs: self.finetune.max_epochs,
            patience: self.finetune.patience,
            batch_size: self.batch_size,
            seed: self.seed,
            alpha: self.finetune.alpha,
            head_hidden: self.finetune.head_hidden.clone(),
            features: self.finetune.features,
            execution: self.execution(),
        }
    }

    pub fn augment_config(&self) -> sra_core::data::AugmentConfig {
        sra_core::data::AugmentConfig {
            multiplier: self.augment.multiplier,
            cap: self.augment.cap,
            p_mask: self.augment.p_mask,
            ngram_min: self.augment.ngram_min,
            ngram_max: self.augment.ngram_max,
        }
    }

    /// The listed top-level keys and sections, as recorded in a manifest.
    pub fn subset(&self, keys: &[&str]) -> Value {
        let full = serde_json::to_value(self).expect("config serializes");
        let mut out = serde_json::Map::new();
        for &k in keys {
            if let Some(v) = full.get(k) {
                out.insert(k.to_string(), v.clone());
            }
        }
        Value::Object(out)
    }
}

/// Overlays `patch` onto `base`, recursing into objects.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Reads a TOML or JSON config file. A run manifest is accepted too; its
/// `config` object is used.
pub fn read_config_file(path: &Path) -> Result<Value, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::config(path, e))?;
    let is_json = path.extension().is_some_and(|e| e == "json") || text.trim_start().starts_with('{');
    let value: Value = if is_json {
        serde_json::from_str(&text).map_err(|e| CliError::config(path, e))?
    } else {
        let table: toml::Table = toml::from_str(&text).map_err(|e| CliError::config(path, e))?;
        serde_json::to_value(table).map_err(|e| CliError::config(path, e))?
    };
    match value {
        Value::Object(mut map) if map.contains_key("manifest_version") => {
            map.remove("config").ok_or_else(|| CliError::config(path, "manifest has no config object"))
        }
        v @ Value::Object(_) => Ok(v),
        _ => Err(CliError::config(path, "config must be a table")),
    }
}

/// Defaults, then the published defaults, then the config file. Returns the merged
/// config and whether the file set the seed.
pub fn layered(paper_defaults: bool, file: Option<&Path>) -> Result<(RunConfig, bool), CliError> {
    let base = if paper_defaults {
        RunConfig::paper()
    } else {
        RunConfig::default()
    };
    let Some(path) = file else {
        return Ok((base, false));
    };
    let patch = read_config_file(path)?;
    let file_sets_seed = patch.get("seed").is_some();
    let mut value = serde_json::to_value(&base).expect("config serializes");
    merge(&mut value, patch);
    let cfg = serde_json::from_value(value).map_err(|e| CliError::config(path, e))?;
    Ok((cfg, file_sets_seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_values_override_defaults_and_keep_the_rest() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "batch_size = 8\n[distill]\nepochs = 3\n").unwrap();
        let (cfg, seeded) = layered(false, Some(&path)).unwrap();
        assert_eq!(cfg.batch_size, 8);
        assert_eq!(cfg.distill.epochs, 3);
        assert_eq!(cfg.distill.lr, RunConfig::default().distill.lr);
        assert!(!seeded);
    }

    #[test]
    fn paper_defaults_then_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(&path, r#"{"seed": 4, "encoder": {"hidden_dim": 64}}"#).unwrap();
        let (cfg, seeded) = layered(true, Some(&path)).unwrap();
        assert_eq!(cfg.encoder.hidden_dim, 64);
        assert_eq!(cfg.encoder.embed_dim, 300);
        assert_eq!(cfg.batch_size, 1024);
        assert!(seeded);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.toml");
        std::fs::write(&path, "[distill]\nepoch = 3\n").unwrap();
        assert!(layered(false, Some(&path)).is_err());
    }

    #[test]
    fn manifest_config_is_accepted() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        std::fs::write(&path, r#"{"manifest_version": 1, "config": {"batch_size": 5}}"#).unwrap();
        assert_eq!(layered(false, Some(&path)).unwrap().0.batch_size, 5);
    }
}
