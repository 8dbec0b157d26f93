//! Descriptor engine for visual place recognition: token fusion, query
//! residual aggregation, metric learning and exact retrieval.

pub mod aggregation;
pub mod checks;
pub mod config;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod io;
pub mod loss;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod retrieval;
pub mod tensor;
pub mod train;

pub use error::{Error, FormatErrorKind, Result};
pub use tensor::{Matrix, Parameter};
