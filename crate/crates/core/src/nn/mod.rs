//! Layers with forward and hand-derived backward passes, losses and Adam.

mod adam;
mod encoder;
mod loss;
mod lstm;
mod mlp;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use encoder::{
    student_forward, EncoderConfig, EncoderGrads, SentenceEncoder, StudentEncoder, EMBEDDING_INIT_RANGE,
    PROJECTION_INIT_RANGE,
};
pub use loss::{
    cosine_distill_backward, cosine_distill_loss, mse_logit_loss, softmax, softmax_cross_entropy, MIN_NORM,
};
pub use lstm::{
    bilstm_encode, bilstm_encode_backward, lstm_cell_backward, lstm_cell_forward, BiLstmGradients, CellGradients,
    Gate, LstmParams, FORGET_BIAS_INIT, LSTM_INIT_RANGE,
};
pub use mlp::{mlp_forward, Linear, MlpHead, DEFAULT_HEAD_WIDTH};

pub(crate) use encoder::EncoderTrace;
pub(crate) use loss::{cosine_loss, cosine_loss_grad, cross_entropy_grad, mse_grad};

use crate::tensor::Tensor;

/// Trainable tensors of a model, in a fixed order shared by both methods.
pub trait Parameters {
    fn named_parameters(&self) -> Vec<(String, &Tensor)>;
    fn parameters_mut(&mut self) -> Vec<&mut Tensor>;

    fn parameter_count(&self) -> usize {
        self.named_parameters().iter().map(|(_, t)| t.len()).sum()
    }
}
