//! Teacher-embedding oracles.
//!
//! A [`TeacherOracle`] supplies the target vector `T_x` for a sentence. The
//! file-backed oracle serves embeddings precomputed by an external model (for
//! example BERT's `[CLS]` state); the synthetic oracle is a frozen random
//! function used for fully offline runs.
//!
//! # Sentence ids
//!
//! Records are keyed by the lowercase hex SHA-256 of the normalized text:
//! Unicode NFC, leading and trailing whitespace trimmed, internal whitespace
//! runs collapsed to one ASCII space. Case is preserved. Exporters outside
//! this crate must apply the same normalization.
//!
//! # File format
//!
//! JSON lines. The first line is a header
//! `{"format":"sra-teacher","version":1,"d":768}`; every following line is
//! `{"id":"<64 hex>","text":"...","vec":[...d numbers...]}`. Vectors are
//! stored at 32-bit precision.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use unicode_normalization::UnicodeNormalization;

use crate::data::tokenize;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{uniform_init, Tensor};

pub const TEACHER_FORMAT: &str = "sra-teacher";
pub const TEACHER_VERSION: u32 = 1;

/// Share of BERT-base `[CLS]` components expected inside [-1, 1].
pub const REFERENCE_RANGE_FRACTION: f64 = 0.98;

pub fn normalize_text(text: &str) -> String {
    let nfc: String = text.nfc().collect();
    nfc.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn sha_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Stable key of a sentence.
pub fn sentence_id(text: &str) -> String {
    sha_hex(normalize_text(text).as_bytes())
}

/// Key of a sentence pair: the two normalized texts joined by a tab.
pub fn pair_id(a: &str, b: &str) -> String {
    sha_hex(format!("{}\t{}", normalize_text(a), normalize_text(b)).as_bytes())
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    d: usize,
}

#[derive(Serialize, Deserialize)]
struct Record {
    id: String,
    text: String,
    vec: Vec<f32>,
}

/// Precomputed embeddings loaded from a teacher file.
#[derive(Clone, Debug, PartialEq)]
pub struct FileTeacher {
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
}

impl FileTeacher {
    pub fn load(path: &Path, expected_dim: Option<usize>) -> Result<Self> {
        let origin = path.display().to_string();
        let reader = BufReader::new(fs::File::open(path)?);
        let mut lines = reader.lines().enumerate();
        let header_line = match lines.next() {
            Some((_, line)) => line?,
            None => return Err(Error::format(&origin, Some(1), "missing header")),
        };
        let header: Header = serde_json::from_str(&header_line)
            .map_err(|e| Error::format(&origin, Some(1), format!("bad header: {e}")))?;
        if header.format != TEACHER_FORMAT || header.version != TEACHER_VERSION || header.d == 0 {
            return Err(Error::format(
                &origin,
                Some(1),
                format!(
                    "unsupported header (format {:?}, version {}, d {})",
                    header.format, header.version, header.d
                ),
            ));
        }
        if let Some(d) = expected_dim {
            if d != header.d {
                return Err(Error::format(&origin, Some(1), format!("file has d = {}, expected {d}", header.d)));
            }
        }
        let mut vectors = HashMap::new();
        for (idx, line) in lines {
            let line = line?;
            let lineno = idx + 1;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record =
                serde_json::from_str(&line).map_err(|e| Error::format(&origin, Some(lineno), e.to_string()))?;
            if rec.vec.len() != header.d {
                return Err(Error::format(
                    &origin,
                    Some(lineno),
                    format!("vector has {} values, header declares {}", rec.vec.len(), header.d),
                ));
            }
            if rec.id != sentence_id(&rec.text) {
                return Err(Error::format(&origin, Some(lineno), "id does not match the normalized text"));
            }
            if rec.vec.iter().any(|v| !v.is_finite()) {
                return Err(Error::format(&origin, Some(lineno), "non-finite vector value"));
            }
            vectors
                .entry(rec.id)
                .or_insert_with(|| rec.vec.iter().map(|&v| v as f64).collect());
        }
        Ok(FileTeacher { dim: header.d, vectors })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn contains(&self, text: &str) -> bool {
        self.vectors.contains_key(&sentence_id(text))
    }

    pub fn lookup(&self, text: &str) -> Result<Tensor> {
        match self.vectors.get(&sentence_id(text)) {
            Some(v) => Tensor::vector(v.clone()),
            None => Err(Error::Coverage {
                missing: vec![text.to_string()],
            }),
        }
    }

    /// Every stored vector, ordered by id.
    pub fn vectors(&self) -> Vec<Tensor> {
        let mut ids: Vec<&String> = self.vectors.keys().collect();
        ids.sort();
        ids.into_iter()
            .map(|id| Tensor::from_parts_unchecked(vec![self.dim], self.vectors[id].clone()))
            .collect()
    }

    fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.dim as u64).to_le_bytes());
        let mut ids: Vec<&String> = self.vectors.keys().collect();
        ids.sort();
        for id in ids {
            h.update(id.as_bytes());
            for v in &self.vectors[id] {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Token vectors per component lie in [-1, 1); the projection is scaled so
/// pre-activations have a spread of roughly this gain.
pub const SYNTHETIC_GAIN: f64 = 3.0;

/// A frozen random teacher: `tanh(M * meanpool(token vectors))`.
///
/// Token vectors are a pure function of `(seed, token)`, so the oracle
/// encodes any token without a vocabulary and never changes after
/// construction.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTeacher {
    seed: u64,
    token_dim: usize,
    /// `d x token_dim`.
    projection: Tensor,
}

impl SyntheticTeacher {
    pub fn new(seed: u64, dim: usize, token_dim: usize) -> Result<Self> {
        if dim == 0 || token_dim == 0 {
            return Err(Error::Parameter("synthetic teacher dimensions must be positive".into()));
        }
        let limit = SYNTHETIC_GAIN * (3.0 / token_dim as f64).sqrt();
        let projection = uniform_init(&mut Rng::derive(seed, u64::MAX), &[dim, token_dim], -limit, limit)?;
        Ok(SyntheticTeacher {
            seed,
            token_dim,
            projection,
        })
    }

    pub fn dim(&self) -> usize {
        self.projection.rows()
    }

    pub fn token_dim(&self) -> usize {
        self.token_dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn token_vector(&self, token: &str) -> Vec<f64> {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(token.as_bytes());
        let digest = h.finalize();
        let stream = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
        let mut rng = Rng::derive(self.seed, stream);
        (0..self.token_dim).map(|_| rng.uniform(-1.0, 1.0)).collect()
    }

    /// The teacher vector for a token sequence, at 32-bit precision.
    pub fn encode(&self, tokens: &[String]) -> Result<Tensor> {
        if tokens.is_empty() {
            return Err(Error::EmptyInput("synthetic teacher needs at least one token"));
        }
        let mut pooled = vec![0.0; self.token_dim];
        for t in tokens {
            for (p, v) in pooled.iter_mut().zip(self.token_vector(t)) {
                *p += v;
            }
        }
        let n = tokens.len() as f64;
        pooled.iter_mut().for_each(|p| *p /= n);
        let mut out = vec![0.0; self.dim()];
        crate::tensor::matvec(self.projection.data(), &pooled, &mut out);
        let edge = 1.0f32.next_down() as f64;
        let data = out
            .into_iter()
            .map(|z| (z.tanh() as f32 as f64).clamp(-edge, edge))
            .collect();
        Tensor::vector(data)
    }

    fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update((self.token_dim as u64).to_le_bytes());
        for v in self.projection.data() {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TeacherOracle {
    File(FileTeacher),
    Synthetic(SyntheticTeacher),
}

impl TeacherOracle {
    pub fn dim(&self) -> usize {
        match self {
            TeacherOracle::File(f) => f.dim(),
            TeacherOracle::Synthetic(s) => s.dim(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            TeacherOracle::File(_) => "file",
            TeacherOracle::Synthetic(_) => "synthetic",
        }
    }

    /// `T_x` for a raw sentence.
    pub fn embed(&self, text: &str) -> Result<Tensor> {
        match self {
            TeacherOracle::File(f) => f.lookup(text),
            TeacherOracle::Synthetic(s) => s.encode(&tokenize(text)),
        }
    }

    pub fn covers(&self, text: &str) -> bool {
        match self {
            TeacherOracle::File(f) => f.contains(text),
            TeacherOracle::Synthetic(_) => !tokenize(text).is_empty(),
        }
    }

    /// Digest of the oracle's frozen state.
    pub fn digest(&self) -> String {
        match self {
            TeacherOracle::File(f) => f.digest(),
            TeacherOracle::Synthetic(s) => s.digest(),
        }
    }
}

pub fn file_teacher_lookup(oracle: &TeacherOracle, text: &str) -> Result<Tensor> {
    match oracle {
        TeacherOracle::File(f) => f.lookup(text),
        TeacherOracle::Synthetic(_) => Err(Error::Input("file lookup on a synthetic teacher".into())),
    }
}

pub fn synthetic_teacher_encode(oracle: &TeacherOracle, tokens: &[String]) -> Result<Tensor> {
    match oracle {
        TeacherOracle::Synthetic(s) => s.encode(tokens),
        TeacherOracle::File(_) => Err(Error::Input("synthetic encode on a file teacher".into())),
    }
}

/// Fraction of components with `|x| <= 1` across all vectors.
pub fn range_statistic(vectors: &[Tensor]) -> Result<f64> {
    if vectors.is_empty() {
        return Err(Error::EmptyInput("range statistic over zero vectors"));
    }
    let total: usize = vectors.iter().map(Tensor::len).sum();
    let inside = vectors
        .iter()
        .flat_map(|v| v.data().iter())
        .filter(|x| x.abs() <= 1.0)
        .count();
    Ok(inside as f64 / total as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RangeReport {
    pub vectors: usize,
    pub components: usize,
    pub fraction_inside: f64,
}

impl RangeReport {
    pub fn compute(vectors: &[Tensor]) -> Result<Self> {
        Ok(RangeReport {
            vectors: vectors.len(),
            components: vectors.iter().map(Tensor::len).sum(),
            fraction_inside: range_statistic(vectors)?,
        })
    }
}

impl fmt::Display for RangeReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} of {} components ({} vectors) inside [-1, 1]: {:.4}; reference for BERT-base [CLS] embeddings: > {:.2}",
            (self.fraction_inside * self.components as f64).round() as usize,
            self.components,
            self.vectors,
            self.fraction_inside,
            REFERENCE_RANGE_FRACTION
        )
    }
}

/// Writes one record per distinct sentence of `corpus`. Returns the number
/// of records written.
pub fn export_teacher_file(oracle: &TeacherOracle, corpus: &[String], path: &Path) -> Result<usize> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    let header = Header {
        format: TEACHER_FORMAT.to_string(),
        version: TEACHER_VERSION,
        d: oracle.dim(),
    };
    writeln!(out, "{}", serde_json::to_string(&header).expect("header serializes"))?;
    let mut seen = HashSet::new();
    for text in corpus {
        let id = sentence_id(text);
        if !seen.insert(id.clone()) {
            continue;
        }
        let vec = oracle.embed(text)?;
        let rec = Record {
            id,
            text: normalize_text(text),
            vec: vec.data().iter().map(|&v| v as f32).collect(),
        };
        writeln!(out, "{}", serde_json::to_string(&rec).expect("record serializes"))?;
    }
    out.flush()?;
    Ok(seen.len())
}

#[derive(Serialize, Deserialize)]
struct LogitRecord {
    id: String,
    logits: Vec<f64>,
}

/// Task-level teacher logits keyed like teacher embeddings (pair examples use
/// [`pair_id`]).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TeacherLogits {
    by_id: HashMap<String, Vec<f64>>,
}

impl TeacherLogits {
    pub fn load(path: &Path) -> Result<Self> {
        let origin = path.display().to_string();
        let reader = BufReader::new(fs::File::open(path)?);
        let mut by_id = HashMap::new();
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: LogitRecord =
                serde_json::from_str(&line).map_err(|e| Error::format(&origin, Some(idx + 1), e.to_string()))?;
            by_id.insert(rec.id, rec.logits);
        }
        Ok(TeacherLogits { by_id })
    }

    pub fn insert(&mut self, id: String, logits: Vec<f64>) {
        self.by_id.insert(id, logits);
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.by_id.get(id).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(fs::File::create(path)?);
        let mut ids: Vec<&String> = self.by_id.keys().collect();
        ids.sort();
        for id in ids {
            let rec = LogitRecord {
                id: id.clone(),
                logits: self.by_id[id].clone(),
            };
            writeln!(out, "{}", serde_json::to_string(&rec).expect("record serializes"))?;
        }
        out.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synth() -> TeacherOracle {
        TeacherOracle::Synthetic(SyntheticTeacher::new(11, 8, 6).unwrap())
    }

    #[test]
    fn normalization_rules() {
        assert_eq!(normalize_text("  a \t b\n c  "), "a b c");
        assert_eq!(normalize_text("Cafe\u{301}"), "Caf\u{e9}");
        assert_ne!(sentence_id("Hello"), sentence_id("hello"));
        assert_eq!(sentence_id(" x  y "), sentence_id("x y"));
        assert_eq!(sentence_id("x").len(), 64);
    }

    #[test]
    fn synthetic_outputs_are_bounded_and_pooled() {
        let t = synth();
        let a = synthetic_teacher_encode(&t, &["a".to_string()]).unwrap();
        let aa = synthetic_teacher_encode(&t, &["a".to_string(), "a".to_string()]).unwrap();
        assert_eq!(a, aa);
        assert!(a.data().iter().all(|v| v.abs() < 1.0));
        assert!(matches!(synthetic_teacher_encode(&t, &[]), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn synthetic_teacher_is_reproducible() {
        let toks: Vec<String> = ["the", "cat", "sat"].iter().map(|s| s.to_string()).collect();
        let a = SyntheticTeacher::new(5, 16, 16).unwrap().encode(&toks).unwrap();
        let b = SyntheticTeacher::new(5, 16, 16).unwrap().encode(&toks).unwrap();
        assert_eq!(a, b);
        let c = SyntheticTeacher::new(6, 16, 16).unwrap().encode(&toks).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn range_statistic_cases() {
        let v = Tensor::vector(vec![-2.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(range_statistic(&[v]).unwrap(), 0.75);
        assert!(matches!(range_statistic(&[]), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn export_dedups_and_round_trips() {
        let t = synth();
        let corpus: Vec<String> = ["one two", "three", " one  two "].iter().map(|s| s.to_string()).collect();
        let f = tempfile::NamedTempFile::new().unwrap();
        assert_eq!(export_teacher_file(&t, &corpus, f.path()).unwrap(), 2);
        let loaded = TeacherOracle::File(FileTeacher::load(f.path(), Some(8)).unwrap());
        for s in &corpus {
            assert_eq!(file_teacher_lookup(&loaded, s).unwrap(), t.embed(s).unwrap());
        }
        assert!(matches!(file_teacher_lookup(&loaded, "unseen"), Err(Error::Coverage { .. })));
        assert!(matches!(FileTeacher::load(f.path(), Some(9)), Err(Error::Format { .. })));
    }

    #[test]
    fn file_teacher_rejects_bad_records() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, r#"{{"format":"sra-teacher","version":1,"d":2}}"#).unwrap();
        writeln!(f, r#"{{"id":"{}","text":"a","vec":[1.0]}}"#, sentence_id("a")).unwrap();
        assert!(matches!(FileTeacher::load(f.path(), None), Err(Error::Format { line: Some(2), .. })));

        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, r#"{{"format":"other","version":1,"d":2}}"#).unwrap();
        assert!(matches!(FileTeacher::load(f.path(), None), Err(Error::Format { line: Some(1), .. })));

        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, r#"{{"format":"sra-teacher","version":1,"d":1}}"#).unwrap();
        writeln!(f, r#"{{"id":"{}","text":"a","vec":[1.0]}}"#, sentence_id("b")).unwrap();
        assert!(matches!(FileTeacher::load(f.path(), None), Err(Error::Format { line: Some(2), .. })));
    }

    #[test]
    fn encoding_does_not_mutate_oracle() {
        let t = synth();
        let before = t.digest();
        for s in ["a b", "c", "d e f g"] {
            t.embed(s).unwrap();
        }
        assert_eq!(before, t.digest());
    }

    #[test]
    fn range_report_mentions_reference() {
        let t = synth();
        let v = vec![t.embed("a b").unwrap()];
        let text = RangeReport::compute(&v).unwrap().to_string();
        assert!(text.contains("0.98"), "{text}");
    }

    #[test]
    fn teacher_logits_round_trip() {
        let mut l = TeacherLogits::default();
        l.insert(sentence_id("x"), vec![0.5, -1.0]);
        let f = tempfile::NamedTempFile::new().unwrap();
        l.save(f.path()).unwrap();
        assert_eq!(TeacherLogits::load(f.path()).unwrap(), l);
    }
}
