//! Forward and backward kernels for the layer kinds of the tiny transformer.
//!
//! There is no autograd graph: every layer exposes a forward that returns
//! whatever the backward needs, and a backward that maps an upstream
//! gradient to parameter and input gradients.

mod activation;
mod attention;
mod linear;
mod loss;
mod norm;

pub use activation::{gelu_bwd, gelu_fwd, softmax_rows};
pub use attention::{attention_bwd, attention_fwd, AttentionCache, AttentionShape};
pub use linear::{linear_bwd, linear_fwd, lowrank_linear_bwd, lowrank_linear_fwd, LinearGrads, LowRankGrads};
pub use loss::{cross_entropy, distillation_loss, kd_loss, LossOutput};
pub use norm::{layernorm_bwd, layernorm_fwd, LayerNormCache, LAYERNORM_EPS};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Token activations for a batch: `batch · tokens` rows of width `dim`,
/// tokens of one sample contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTensor {
    batch: usize,
    tokens: usize,
    data: Matrix,
}

impl ActivationTensor {
    pub fn new(batch: usize, tokens: usize, data: Matrix) -> Result<Self> {
        if batch == 0 || tokens == 0 || data.rows() != batch * tokens {
            return Err(Error::shape(
                "ActivationTensor",
                format!("{batch}×{tokens} tokens vs {} rows", data.rows()),
            ));
        }
        if !data.is_finite() {
            return Err(Error::NonFinite("activation".into()));
        }
        Ok(Self { batch, tokens, data })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn dim(&self) -> usize {
        self.data.cols()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.data
    }

    pub fn into_matrix(self) -> Matrix {
        self.data
    }
}
