//! Tensor autograd, Gaussian-mixture cross-attention, a toy Transformer,
//! synthetic aligned corpora, training and the analysis suite.
//!
//! ```
//! use gma_core::{Graph, Tensor};
//!
//! let g = Graph::new();
//! let x = g.param(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
//! let y = x.square().sum();
//! g.backward(y).unwrap();
//! assert_eq!(x.grad().unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

pub mod analysis;
pub mod attention;
pub mod autograd;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod params;
pub mod tensor;
pub mod training;

pub use autograd::{concat, Graph, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
