//! Deep memory unrolled networks (DeMUN) and their baselines for linear
//! inverse problems `y = A x + w`.

pub mod autodiff;
pub mod container;
pub mod data;
pub mod dct;
pub mod dncnn;
pub mod error;
pub mod experiment;
pub mod eval;
pub mod gradcheck;
pub mod linalg;
pub mod operator;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod unrolled;

pub use error::{Error, Result};
pub use tensor::Tensor;
