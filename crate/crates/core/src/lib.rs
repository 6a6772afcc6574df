//! Attention-based neural machine translation built from first principles:
//! a bidirectional gated-recurrent encoder, an additive soft-alignment
//! decoder with a maxout deep output, and the fixed-context encoder-decoder
//! baseline. Includes a reverse-mode autodiff tape, Adadelta training,
//! beam search, BLEU, and alignment export.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases at the crate root name the two concrete instantiations.

pub mod autograd;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod infer;
pub mod model;
pub mod named;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use autograd::{finite_diff_grad, Fault, OpKind, Tape, Var};
pub use error::{Error, Result};
pub use data::{Batch, Corpus, EncodedPair, Task, TokenId, Vocabulary};
pub use model::{ContextMode, Model, ModelDims};
pub use named::{GradientSet, NamedTensors};
pub use rng::RngState;
pub use scalar::{Precision, Scalar};
pub use tensor::{softmax_row, Tensor};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;

pub type Model32 = Model<f32>;
pub type Model64 = Model<f64>;
