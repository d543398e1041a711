//! Instruction tuning versus instruction modelling on a tiny from-scratch
//! decoder-only language model.

pub mod cli;
pub mod corpus;
pub mod error;
pub mod masking;
pub mod metrics;
pub mod model;
pub mod train;

pub use error::{Error, Result};
