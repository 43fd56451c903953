//! Progressive mixed-precision decoding for a toy transformer: bit-plane
//! quantized weights, precision schedules, a learned switch-point scheduler,
//! fidelity metrics and an analytic accelerator latency model.

pub mod cli;
pub mod error;
pub mod learnsched;
pub mod metrics;
pub mod perf;
pub mod quant;
pub mod schedule;
pub mod tinylm;

pub use error::{Error, ParseError, Result};
