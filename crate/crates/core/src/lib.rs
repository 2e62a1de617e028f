//! Remote file I/O testbed: wire protocol, headnode, disk server, client
//! library, network emulation and a benchmark harness.
//!
//! The analytic models are generic over [`Scalar`]; the aliases below fix
//! them to `f64`, which is what the rest of the crate uses.

pub mod client;
pub mod diskserver;
pub mod error;
pub mod harness;
pub mod headnode;
pub mod model;
pub mod net;
pub mod runtime;
pub mod scalar;
pub mod wire;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type LinearFit = model::LinearFit<f64>;
