//! Sequence-to-sequence training with emulated FP16 mixed precision and
//! data-parallel workers.

pub mod autodiff;
pub mod blocks;
pub mod distrib;
pub mod error;
pub mod halffloat;
pub mod mixed_precision;
pub mod optim;
pub mod params;
pub mod registry;
pub mod runner;
pub mod tensor;

pub use error::{Error, Result};
