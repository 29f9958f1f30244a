//! The student sentence encoder: embedding lookup, BiLSTM, bias-free
//! projection and tanh.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::lstm::{bilstm_backward, bilstm_forward, run_direction_batch, BiLstmTrace, LstmParams};
use super::Parameters;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{axpy, matmul_rows_nt, matvec, matvec_t_acc, open_tanh, outer_acc, uniform_init, Tensor};

pub const EMBEDDING_INIT_RANGE: f64 = 0.1;
pub const PROJECTION_INIT_RANGE: f64 = 0.08;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    /// Teacher embedding dimension `d`.
    pub output_dim: usize,
}

impl EncoderConfig {
    /// GloVe-300 inputs, 512 hidden units per direction, BERT-base output.
    pub fn paper(vocab_size: usize) -> Self {
        EncoderConfig {
            vocab_size,
            embed_dim: 300,
            hidden_dim: 512,
            output_dim: 768,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < crate::data::RESERVED_TOKENS.len()
            || self.embed_dim == 0
            || self.hidden_dim == 0
            || self.output_dim == 0
        {
            return Err(Error::Parameter(format!("invalid encoder configuration {self:?}")));
        }
        Ok(())
    }
}

/// Maps a token-id sequence to `S_x = tanh(W_p H)`.
#[derive(Clone, Debug, PartialEq)]
pub struct StudentEncoder {
    config: EncoderConfig,
    embedding: Tensor,
    forward: LstmParams,
    backward: LstmParams,
    /// `d x 2h`, no bias.
    projection: Tensor,
}

/// Anything that produces a sentence vector from token ids.
pub trait SentenceEncoder: Sync {
    fn encode_ids(&self, ids: &[u32]) -> Result<Tensor>;
}

impl StudentEncoder {
    /// Random initialization: embeddings uniform(-0.1, 0.1) with a zero
    /// padding row, LSTM and projection uniform(-0.08, 0.08).
    pub fn new(config: EncoderConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let EncoderConfig {
            vocab_size,
            embed_dim,
            hidden_dim,
            output_dim,
        } = config;
        let mut embedding = uniform_init(rng, &[vocab_size, embed_dim], -EMBEDDING_INIT_RANGE, EMBEDDING_INIT_RANGE)?;
        embedding.row_mut(crate::data::PAD_ID as usize).fill(0.0);
        let forward = LstmParams::init(embed_dim, hidden_dim, rng)?;
        let backward = LstmParams::init(embed_dim, hidden_dim, rng)?;
        let projection = uniform_init(
            rng,
            &[output_dim, 2 * hidden_dim],
            -PROJECTION_INIT_RANGE,
            PROJECTION_INIT_RANGE,
        )?;
        Ok(StudentEncoder {
            config,
            embedding,
            forward,
            backward,
            projection,
        })
    }

    pub fn from_parts(embedding: Tensor, forward: LstmParams, backward: LstmParams, projection: Tensor) -> Result<Self> {
        let config = EncoderConfig {
            vocab_size: embedding.rows(),
            embed_dim: embedding.cols(),
            hidden_dim: forward.hidden_dim(),
            output_dim: projection.rows(),
        };
        config.validate()?;
        let h = config.hidden_dim;
        if embedding.rank() != 2 {
            return Err(Error::dim("embedding", embedding.shape(), &[config.vocab_size, config.embed_dim]));
        }
        for dir in [&forward, &backward] {
            if dir.input_dim() != config.embed_dim || dir.hidden_dim() != h {
                return Err(Error::dim(
                    "lstm direction",
                    &[dir.input_dim(), dir.hidden_dim()],
                    &[config.embed_dim, h],
                ));
            }
        }
        if projection.shape() != [config.output_dim, 2 * h] {
            return Err(Error::dim("projection", projection.shape(), &[config.output_dim, 2 * h]));
        }
        Ok(StudentEncoder {
            config,
            embedding,
            forward,
            backward,
            projection,
        })
    }

    pub fn config(&self) -> EncoderConfig {
        self.config
    }

    pub fn embedding(&self) -> &Tensor {
        &self.embedding
    }

    pub fn forward_lstm(&self) -> &LstmParams {
        &self.forward
    }

    pub fn backward_lstm(&self) -> &LstmParams {
        &self.backward
    }

    pub fn projection(&self) -> &Tensor {
        &self.projection
    }

    pub fn projection_mut(&mut self) -> &mut Tensor {
        &mut self.projection
    }

    /// Replaces the embedding table, e.g. with pretrained word vectors.
    pub fn set_embedding(&mut self, table: Tensor) -> Result<()> {
        let expected = [self.config.vocab_size, self.config.embed_dim];
        if table.shape() != expected {
            return Err(Error::dim("set_embedding", table.shape(), &expected));
        }
        self.embedding = table;
        Ok(())
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::EmptyInput("sentence has no tokens"));
        }
        if let Some(&id) = tokens.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(Error::Vocabulary {
                id,
                size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    pub(crate) fn forward_trace(&self, tokens: &[u32]) -> Result<EncoderTrace> {
        self.check_tokens(tokens)?;
        let inputs: Vec<&[f64]> = tokens.iter().map(|&t| self.embedding.row(t as usize)).collect();
        let (hidden, bilstm) = bilstm_forward(&self.forward, &self.backward, &inputs);
        let mut output = vec![0.0; self.config.output_dim];
        matvec(self.projection.data(), &hidden, &mut output);
        output.iter_mut().for_each(|v| *v = open_tanh(*v));
        Ok(EncoderTrace {
            tokens: tokens.to_vec(),
            hidden,
            bilstm,
            output,
        })
    }

    /// Accumulates parameter gradients given `dL/dS_x` and, optionally, an
    /// extra gradient arriving directly at `H`.
    pub(crate) fn backward(
        &self,
        trace: &EncoderTrace,
        d_output: Option<&[f64]>,
        d_hidden_extra: Option<&[f64]>,
        grads: &mut EncoderGrads,
    ) {
        let mut d_hidden = vec![0.0; 2 * self.config.hidden_dim];
        if let Some(d_out) = d_output {
            let d_pre: Vec<f64> = d_out.iter().zip(&trace.output).map(|(&g, &s)| g * (1.0 - s * s)).collect();
            outer_acc(grads.projection.data_mut(), &d_pre, &trace.hidden);
            matvec_t_acc(self.projection.data(), &d_pre, &mut d_hidden);
        }
        if let Some(extra) = d_hidden_extra {
            axpy(1.0, extra, &mut d_hidden);
        }
        let e = self.config.embed_dim;
        let mut d_inputs = vec![vec![0.0; e]; trace.tokens.len()];
        bilstm_backward(
            &self.forward,
            &self.backward,
            &trace.bilstm,
            &d_hidden,
            &mut grads.forward,
            &mut grads.backward,
            &mut d_inputs,
        );
        for (&tok, d) in trace.tokens.iter().zip(&d_inputs) {
            let row = grads.embedding.entry(tok).or_insert_with(|| vec![0.0; e]);
            axpy(1.0, d, row);
        }
    }

    /// `S_x` for one sentence.
    pub fn encode(&self, tokens: &[u32]) -> Result<Tensor> {
        Tensor::vector(self.forward_trace(tokens)?.output)
    }

    /// The BiLSTM representation `H` (length `2h`) for one sentence.
    pub fn hidden(&self, tokens: &[u32]) -> Result<Tensor> {
        Tensor::vector(self.forward_trace(tokens)?.hidden)
    }

    /// `H` for a batch of sentences using row-blocked kernels. Bit-identical
    /// to calling [`StudentEncoder::hidden`] per row.
    pub fn hidden_batch(&self, rows: &[&[u32]]) -> Result<Vec<Vec<f64>>> {
        for r in rows {
            self.check_tokens(r)?;
        }
        let embedded: Vec<Vec<&[f64]>> = rows
            .iter()
            .map(|r| r.iter().map(|&t| self.embedding.row(t as usize)).collect())
            .collect();
        let fwd = run_direction_batch(&self.forward, &embedded, false);
        let bwd = run_direction_batch(&self.backward, &embedded, true);
        Ok(fwd
            .into_iter()
            .zip(bwd)
            .map(|(mut f, b)| {
                f.extend_from_slice(&b);
                f
            })
            .collect())
    }

    /// `S_x` for a batch of sentences; bit-identical to per-row [`StudentEncoder::encode`].
    pub fn encode_batch(&self, rows: &[&[u32]]) -> Result<Vec<Tensor>> {
        let hidden = self.hidden_batch(rows)?;
        let k = 2 * self.config.hidden_dim;
        let d = self.config.output_dim;
        let flat: Vec<f64> = hidden.concat();
        let mut out = vec![0.0; rows.len() * d];
        matmul_rows_nt(&flat, k, self.projection.data(), d, &mut out);
        out.chunks(d)
            .map(|c| Tensor::vector(c.iter().map(|&v| open_tanh(v)).collect()))
            .collect()
    }
}

impl SentenceEncoder for StudentEncoder {
    fn encode_ids(&self, ids: &[u32]) -> Result<Tensor> {
        self.encode(ids)
    }
}

/// Free-function form of [`StudentEncoder::encode`].
pub fn student_forward(tokens: &[u32], encoder: &StudentEncoder) -> Result<Tensor> {
    encoder.encode(tokens)
}

impl Parameters for StudentEncoder {
    fn named_parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("encoder.embedding".to_string(), &self.embedding)];
        for (dir, p) in [("fwd", &self.forward), ("bwd", &self.backward)] {
            out.extend(p.tensors().into_iter().map(|(n, t)| (format!("encoder.{dir}.{n}"), t)));
        }
        out.push(("encoder.projection".to_string(), &self.projection));
        out
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.embedding];
        out.extend(self.forward.tensors_mut());
        out.extend(self.backward.tensors_mut());
        out.push(&mut self.projection);
        out
    }
}

impl StudentEncoder {
    /// Trainable tensors in [`Parameters`] order, optionally without the
    /// embedding table.
    pub fn trainable_mut(&mut self, include_embedding: bool) -> Vec<&mut Tensor> {
        let mut all = self.parameters_mut();
        if !include_embedding {
            all.remove(0);
        }
        all
    }
}

#[derive(Clone, Debug)]
pub(crate) struct EncoderTrace {
    pub(crate) tokens: Vec<u32>,
    pub(crate) hidden: Vec<f64>,
    bilstm: BiLstmTrace,
    pub(crate) output: Vec<f64>,
}

/// Gradients mirroring [`StudentEncoder`]; embedding rows are stored sparsely.
#[derive(Clone, Debug)]
pub struct EncoderGrads {
    pub embedding: BTreeMap<u32, Vec<f64>>,
    pub forward: LstmParams,
    pub backward: LstmParams,
    pub projection: Tensor,
}

impl EncoderGrads {
    pub fn zeros(config: &EncoderConfig) -> Self {
        EncoderGrads {
            embedding: BTreeMap::new(),
            forward: LstmParams::zeros(config.embed_dim, config.hidden_dim),
            backward: LstmParams::zeros(config.embed_dim, config.hidden_dim),
            projection: Tensor::zeros(&[config.output_dim, 2 * config.hidden_dim]),
        }
    }

    pub fn add_assign(&mut self, other: &EncoderGrads) {
        for (tok, row) in &other.embedding {
            match self.embedding.get_mut(tok) {
                Some(mine) => axpy(1.0, row, mine),
                None => {
                    self.embedding.insert(*tok, row.clone());
                }
            }
        }
        self.forward.add_assign(&other.forward);
        self.backward.add_assign(&other.backward);
        axpy(1.0, other.projection.data(), self.projection.data_mut());
    }

    pub fn scale(&mut self, c: f64) {
        for row in self.embedding.values_mut() {
            row.iter_mut().for_each(|x| *x *= c);
        }
        self.forward.scale(c);
        self.backward.scale(c);
        self.projection.data_mut().iter_mut().for_each(|x| *x *= c);
    }

    pub fn embedding_dense(&self, config: &EncoderConfig) -> Tensor {
        let mut t = Tensor::zeros(&[config.vocab_size, config.embed_dim]);
        for (&tok, row) in &self.embedding {
            t.row_mut(tok as usize).copy_from_slice(row);
        }
        t
    }

    /// Dense gradients aligned with [`StudentEncoder::trainable_mut`].
    pub fn dense(&self, config: &EncoderConfig, include_embedding: bool) -> Vec<Tensor> {
        let mut out = Vec::with_capacity(18);
        if include_embedding {
            out.push(self.embedding_dense(config));
        }
        out.extend(self.forward.tensors().into_iter().map(|(_, t)| t.clone()));
        out.extend(self.backward.tensors().into_iter().map(|(_, t)| t.clone()));
        out.push(self.projection.clone());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            vocab_size: 10,
            embed_dim: 3,
            hidden_dim: 4,
            output_dim: 5,
        }
    }

    #[test]
    fn zero_projection_gives_zero_output() {
        let mut enc = StudentEncoder::new(tiny(), &mut Rng::new(1)).unwrap();
        enc.projection_mut().data_mut().fill(0.0);
        let s = enc.encode(&[3, 4, 5]).unwrap();
        assert!(s.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_stays_inside_unit_interval() {
        let mut enc = StudentEncoder::new(tiny(), &mut Rng::new(2)).unwrap();
        // Blow the projection up so tanh saturates hard.
        enc.projection_mut().data_mut().iter_mut().for_each(|w| *w *= 1e3);
        let s = enc.encode(&[1, 2, 3, 9]).unwrap();
        assert!(s.data().iter().all(|v| v.abs() < 1.0));
        let s = StudentEncoder::new(tiny(), &mut Rng::new(2)).unwrap().encode(&[7]).unwrap();
        assert!(s.data().iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn encoding_is_deterministic() {
        let a = StudentEncoder::new(tiny(), &mut Rng::new(4)).unwrap();
        let b = StudentEncoder::new(tiny(), &mut Rng::new(4)).unwrap();
        assert_eq!(a.encode(&[5, 1, 2]).unwrap(), b.encode(&[5, 1, 2]).unwrap());
    }

    #[test]
    fn rejects_empty_and_out_of_range() {
        let enc = StudentEncoder::new(tiny(), &mut Rng::new(4)).unwrap();
        assert!(matches!(enc.encode(&[]), Err(Error::EmptyInput(_))));
        assert!(matches!(enc.encode(&[2, 10]), Err(Error::Vocabulary { id: 10, size: 10 })));
    }

    #[test]
    fn padding_row_starts_at_zero() {
        let enc = StudentEncoder::new(tiny(), &mut Rng::new(4)).unwrap();
        assert!(enc.embedding().row(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_encoding_matches_single_encoding() {
        let enc = StudentEncoder::new(tiny(), &mut Rng::new(6)).unwrap();
        let rows: Vec<&[u32]> = vec![&[1, 2, 3], &[4], &[5, 6, 7, 8, 9], &[3, 3]];
        let batched = enc.encode_batch(&rows).unwrap();
        for (r, b) in rows.iter().zip(&batched) {
            assert_eq!(&enc.encode(r).unwrap(), b);
        }
    }

    #[test]
    fn parameter_names_are_unique_and_ordered() {
        let mut enc = StudentEncoder::new(tiny(), &mut Rng::new(6)).unwrap();
        let names: Vec<String> = enc.named_parameters().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names.len(), 18);
        assert_eq!(names[0], "encoder.embedding");
        assert_eq!(names[1], "encoder.fwd.w_i");
        assert_eq!(names[17], "encoder.projection");
        let shapes: Vec<Vec<usize>> = enc.named_parameters().iter().map(|(_, t)| t.shape().to_vec()).collect();
        let mut_shapes: Vec<Vec<usize>> = enc.parameters_mut().iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(shapes, mut_shapes);
    }
}
