// `!(x > 0.0)` style checks are how NaN gets rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ablate;
pub mod data;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod frontend;
pub mod nst;
pub mod pipeline;
pub mod pretrain;
pub mod synth;
pub mod textkit;
pub mod train;
pub mod transducer;

pub use error::{Error, Result};
