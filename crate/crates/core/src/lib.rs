//! Teacher-student laboratory for over-realized rectified networks.
//!
//! Networks store one augmented weight matrix per layer with the bias as the
//! last row. Everything is seeded and runs deterministically.

// `!(x > 0.0)` is used on purpose so that NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod connectivity;
pub mod csvio;
pub mod data;
pub mod error;
pub mod net;
pub mod oracle;
pub mod snapshot;
pub mod teacher;
pub mod train;
pub mod vmats;

pub use error::{Error, Result};
pub use net::{Activation, Network, Role};
