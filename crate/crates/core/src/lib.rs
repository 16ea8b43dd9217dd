//! Tensor-equivariant networks for multi-user MIMO precoding and scheduling.
//!
//! The core is generic over the scalar type (`f32` or `f64`); the `*64`
//! aliases at the crate root fix it to `f64`.

pub mod autodiff;
pub mod complex;
pub mod complexity;
pub mod error;
pub mod mimo;
pub mod nn;
pub mod scalar;
pub mod tensor;
pub mod tepn;
pub mod teusn;

pub use autodiff::{AdamConfig, Gradients, Graph, ParamId, ParamStore, SparseMap, Var};
pub use complex::ComplexMatrix;
pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{batch_apply, DimSubset, Permutation, Tensor};

pub type Tensor64 = Tensor<f64>;
pub type ComplexMatrix64 = ComplexMatrix<f64>;
pub type ParamStore64 = ParamStore<f64>;
pub type Graph64<'a> = Graph<'a, f64>;
