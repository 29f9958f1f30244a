//! Binary checkpoints for distilled encoders and fine-tuned task models.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SRA1"  u32 version
//! u64 V  u64 E  u64 h  u64 d  str prng
//! u8 stage (0 distilled, 1 finetuned)  str parent digest ("" when none)
//! u32 n  n x str                        vocabulary in id order
//! u8 has_labels  [u32 n  n x str]       label dictionary
//! u32 n  n x (str key, str value)       metadata, in insertion order
//! u32 n  n x tensor
//! ```
//!
//! `str` is a `u32` byte length followed by UTF-8. A tensor record is its
//! name, `u32` rank, `rank x u64` shape and the values as `f32`.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::data::{LabelDict, Vocabulary};
use crate::error::{Error, Result};
use crate::nn::{EncoderConfig, Gate, Linear, LstmParams, MlpHead, Parameters, StudentEncoder};
use crate::rng::RNG_ALGORITHM;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SRA1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Distilled,
    Finetuned,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: EncoderConfig,
    pub prng: String,
    pub stage: Stage,
    pub parent_digest: Option<String>,
    pub vocabulary: Vocabulary,
    pub labels: Option<LabelDict>,
    pub meta: Vec<(String, String)>,
    /// Values are held at 32-bit precision.
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    /// Captures a distilled encoder.
    pub fn distilled(encoder: &StudentEncoder, vocabulary: &Vocabulary, meta: Vec<(String, String)>) -> Result<Self> {
        Self::build(encoder, None, Stage::Distilled, None, vocabulary, None, meta)
    }

    /// Captures an encoder together with a task head.
    pub fn finetuned(
        encoder: &StudentEncoder,
        head: &MlpHead,
        parent_digest: Option<String>,
        vocabulary: &Vocabulary,
        labels: &LabelDict,
        meta: Vec<(String, String)>,
    ) -> Result<Self> {
        Self::build(
            encoder,
            Some(head),
            Stage::Finetuned,
            parent_digest,
            vocabulary,
            Some(labels.clone()),
            meta,
        )
    }

    fn build(
        encoder: &StudentEncoder,
        head: Option<&MlpHead>,
        stage: Stage,
        parent_digest: Option<String>,
        vocabulary: &Vocabulary,
        labels: Option<LabelDict>,
        meta: Vec<(String, String)>,
    ) -> Result<Self> {
        let config = encoder.config();
        if vocabulary.len() != config.vocab_size {
            return Err(Error::Input(format!(
                "vocabulary has {} entries but the encoder expects {}",
                vocabulary.len(),
                config.vocab_size
            )));
        }
        let mut tensors: Vec<(String, Tensor)> = encoder
            .named_parameters()
            .into_iter()
            .map(|(n, t)| (n, t.round_to_f32()))
            .collect();
        if let Some(h) = head {
            tensors.extend(h.named_parameters().into_iter().map(|(n, t)| (n, t.round_to_f32())));
        }
        Ok(Checkpoint {
            config,
            prng: RNG_ALGORITHM.to_string(),
            stage,
            parent_digest,
            vocabulary: vocabulary.clone(),
            labels,
            meta,
            tensors,
        })
    }

    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::format("checkpoint", None, format!("missing tensor {name}")))
    }

    fn lstm(&self, dir: &str) -> Result<LstmParams> {
        let get = |kind: &str, g: Gate| self.tensor(&format!("encoder.{dir}.{kind}_{}", g.suffix())).cloned();
        let w = [
            get("w", Gate::Input)?,
            get("w", Gate::Forget)?,
            get("w", Gate::Output)?,
            get("w", Gate::Candidate)?,
        ];
        let b = [
            get("b", Gate::Input)?,
            get("b", Gate::Forget)?,
            get("b", Gate::Output)?,
            get("b", Gate::Candidate)?,
        ];
        LstmParams::from_gates(w, b).map_err(|e| Error::format("checkpoint", None, e.to_string()))
    }

    /// Rebuilds the encoder and checks it against the recorded dimensions.
    pub fn encoder(&self) -> Result<StudentEncoder> {
        let enc = StudentEncoder::from_parts(
            self.tensor("encoder.embedding")?.clone(),
            self.lstm("fwd")?,
            self.lstm("bwd")?,
            self.tensor("encoder.projection")?.clone(),
        )
        .map_err(|e| Error::format("checkpoint", None, e.to_string()))?;
        if enc.config() != self.config {
            return Err(Error::format(
                "checkpoint",
                None,
                format!("tensor shapes imply {:?}, header records {:?}", enc.config(), self.config),
            ));
        }
        Ok(enc)
    }

    /// Rebuilds the task head, if the checkpoint has one.
    pub fn head(&self) -> Result<Option<MlpHead>> {
        if !self.tensors.iter().any(|(n, _)| n.starts_with("head.")) {
            return Ok(None);
        }
        let linear = |prefix: &str| -> Result<Linear> {
            Ok(Linear {
                weight: self.tensor(&format!("{prefix}.weight"))?.clone(),
                bias: self.tensor(&format!("{prefix}.bias"))?.clone(),
            })
        };
        let mut hidden = Vec::new();
        while self.tensors.iter().any(|(n, _)| *n == format!("head.hidden{}.weight", hidden.len())) {
            hidden.push(linear(&format!("head.hidden{}", hidden.len()))?);
        }
        let head = MlpHead::from_layers(hidden, linear("head.output")?)
            .map_err(|e| Error::format("checkpoint", None, e.to_string()))?;
        Ok(Some(head))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(MAGIC);
        w.u32(FORMAT_VERSION);
        for v in [
            self.config.vocab_size,
            self.config.embed_dim,
            self.config.hidden_dim,
            self.config.output_dim,
        ] {
            w.u64(v as u64);
        }
        w.str(&self.prng);
        w.u8(match self.stage {
            Stage::Distilled => 0,
            Stage::Finetuned => 1,
        });
        w.str(self.parent_digest.as_deref().unwrap_or(""));
        w.u32(self.vocabulary.len() as u32);
        for t in self.vocabulary.tokens() {
            w.str(t);
        }
        match &self.labels {
            Some(l) => {
                w.u8(1);
                w.u32(l.len() as u32);
                for s in l.labels() {
                    w.str(s);
                }
            }
            None => w.u8(0),
        }
        w.u32(self.meta.len() as u32);
        for (k, v) in &self.meta {
            w.str(k);
            w.str(v);
        }
        w.u32(self.tensors.len() as u32);
        for (name, t) in &self.tensors {
            w.str(name);
            w.u32(t.rank() as u32);
            for &s in t.shape() {
                w.u64(s as u64);
            }
            for &v in t.data() {
                w.bytes(&(v as f32).to_le_bytes());
            }
        }
        w.0
    }

    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, origin };
        if r.take(4)? != MAGIC {
            return Err(r.err("bad magic; not a checkpoint"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(r.err(format!("unsupported checkpoint version {version}")));
        }
        let config = EncoderConfig {
            vocab_size: r.usize()?,
            embed_dim: r.usize()?,
            hidden_dim: r.usize()?,
            output_dim: r.usize()?,
        };
        let prng = r.str()?;
        let stage = match r.u8()? {
            0 => Stage::Distilled,
            1 => Stage::Finetuned,
            other => return Err(r.err(format!("unknown stage {other}"))),
        };
        let parent = r.str()?;
        let n = r.u32()? as usize;
        let tokens = (0..n).map(|_| r.str()).collect::<Result<Vec<_>>>()?;
        let vocabulary = Vocabulary::from_tokens(tokens.into_iter().skip(crate::data::RESERVED_TOKENS.len()))
            .map_err(|e| r.err(e.to_string()))?;
        if vocabulary.len() != n || n != config.vocab_size {
            return Err(r.err(format!("vocabulary of {n} entries does not match V = {}", config.vocab_size)));
        }
        let labels = match r.u8()? {
            0 => None,
            1 => {
                let n = r.u32()? as usize;
                let labels = (0..n).map(|_| r.str()).collect::<Result<Vec<_>>>()?;
                Some(LabelDict::new(labels).map_err(|e| r.err(e.to_string()))?)
            }
            other => return Err(r.err(format!("invalid label flag {other}"))),
        };
        let n = r.u32()? as usize;
        let mut meta = Vec::with_capacity(n);
        for _ in 0..n {
            meta.push((r.str()?, r.str()?));
        }
        let n = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(n);
        for _ in 0..n {
            let name = r.str()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
            let count = shape
                .iter()
                .try_fold(1usize, |acc, &s| acc.checked_mul(s))
                .filter(|&c| c <= r.remaining() / 4)
                .ok_or_else(|| r.err(format!("tensor {name} has an impossible shape {shape:?}")))?;
            let raw = r.take(count * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| r.err(format!("tensor {name}: {e}")))?;
            tensors.push((name, t));
        }
        if r.remaining() != 0 {
            return Err(r.err("trailing bytes after the last tensor"));
        }
        let ck = Checkpoint {
            config,
            prng,
            stage,
            parent_digest: (!parent.is_empty()).then_some(parent),
            vocabulary,
            labels,
            meta,
            tensors,
        };
        ck.encoder().map_err(|e| relabel(e, origin))?;
        ck.head().map_err(|e| relabel(e, origin))?;
        Ok(ck)
    }

    /// Hex SHA-256 of the serialized checkpoint.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?, &path.display().to_string())
    }
}

fn relabel(e: Error, origin: &str) -> Error {
    match e {
        Error::Format { line, message, .. } => Error::Format {
            origin: origin.to_string(),
            line,
            message,
        },
        other => other,
    }
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    checkpoint.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path)
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a str,
}

impl<'a> Reader<'a> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::format(self.origin, None, format!("{} (byte {})", message.into(), self.pos))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(self.err("truncated checkpoint"));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| self.err(format!("value {v} does not fit in usize")))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.err("invalid UTF-8 string"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn setup() -> (StudentEncoder, Vocabulary) {
        let vocab = Vocabulary::from_tokens(["a", "b", "c"]).unwrap();
        let cfg = EncoderConfig {
            vocab_size: vocab.len(),
            embed_dim: 3,
            hidden_dim: 2,
            output_dim: 4,
        };
        (StudentEncoder::new(cfg, &mut Rng::new(9)).unwrap(), vocab)
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let (enc, vocab) = setup();
        let ck = Checkpoint::distilled(&enc, &vocab, vec![("epochs".into(), "3".into())]).unwrap();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes, "mem").unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.encoder().unwrap().config(), enc.config());
        assert!(back.head().unwrap().is_none());
    }

    #[test]
    fn finetuned_round_trip_keeps_head_and_labels() {
        let (enc, vocab) = setup();
        let head = MlpHead::new(4, &[5], 2, &mut Rng::new(1)).unwrap();
        let labels = LabelDict::from_observed(["0", "1"]).unwrap();
        let ck = Checkpoint::finetuned(&enc, &head, Some("ab".repeat(32)), &vocab, &labels, vec![]).unwrap();
        let back = Checkpoint::from_bytes(&ck.to_bytes(), "mem").unwrap();
        assert_eq!(back.labels, Some(labels));
        assert_eq!(back.head().unwrap().unwrap().hidden_widths(), vec![5]);
        assert_eq!(back.parent_digest, ck.parent_digest);
    }

    #[test]
    fn corrupt_inputs_are_format_errors() {
        let (enc, vocab) = setup();
        let mut bytes = Checkpoint::distilled(&enc, &vocab, vec![]).unwrap().to_bytes();
        let truncated = bytes[..bytes.len() - 3].to_vec();
        assert!(matches!(Checkpoint::from_bytes(&truncated, "mem"), Err(Error::Format { .. })));
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes, "mem"), Err(Error::Format { .. })));
    }

    #[test]
    fn shape_mismatch_against_header_is_rejected() {
        let (enc, vocab) = setup();
        let mut ck = Checkpoint::distilled(&enc, &vocab, vec![]).unwrap();
        ck.config.output_dim = 5;
        assert!(matches!(Checkpoint::from_bytes(&ck.to_bytes(), "mem"), Err(Error::Format { .. })));
    }
}
