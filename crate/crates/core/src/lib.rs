//! Bit-exact emulation of block-scaled MX floating-point formats and a
//! deterministic student-teacher training lab for studying low-precision
//! training instabilities.

// `!(x > 0.0)` is used on purpose to reject NaN; bit literals are grouped
// sign|exponent|mantissa.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::unusual_byte_groupings)]

pub mod cli;
pub mod config;
pub mod diagnostics;
pub mod error;
pub mod fp_codec;
pub mod interventions;
pub mod mx_block;
pub mod proxy;
pub mod real;
pub mod scaling;
pub mod tensor;

pub use error::{Error, Result};
