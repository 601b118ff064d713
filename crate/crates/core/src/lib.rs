//! Single-model ensembles for a small Transformer encoder.
//!
//! One parameter set hosts `K` virtual models. Virtual model `k` sees every
//! input with pseudo-tag token `ℓ_k` prepended and a fixed, untrainable
//! vector `o_k` added to each content-token embedding; the `o_k` are mutually
//! orthogonal. Training inflates the data `K` times (one copy per tag) and
//! inference aggregates the `K` virtual outputs.

pub mod corpus;
pub mod encoder;
pub mod ensemble;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod model;
pub mod rng;
pub mod scalar;
pub mod synthetic;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use rng::Rng;
pub use scalar::Scalar;

/// Element type used for training and by the command line front end.
pub type Real = f64;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Tape64 = tensor::Tape<f64>;
