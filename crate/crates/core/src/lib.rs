//! Channel-order robust selective state-space forecasting.

pub mod analysis;
pub mod blocks;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod report;
pub mod ssm;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tape::{ElementwiseOp, Tape, Var};
pub use tensor::Tensor;
