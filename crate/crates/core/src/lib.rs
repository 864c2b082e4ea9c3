//! Distributed exact-attention simulator and numerical reference library.

pub mod attention;
pub mod checkpoint;
pub mod cost;
pub mod dd;
pub mod error;
pub mod fabric;
pub mod lmhead;
pub mod numerics;
pub mod oracle;
pub mod partition;
pub mod verify;

pub use error::{Error, Result};
