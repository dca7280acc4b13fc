//! Event-level simulation and analysis of a three-state decoy BB84 link:
//! transmitter, free-space channel with an eavesdropper sampling the
//! side channel, passive-basis receiver with time tagging, clock recovery
//! and sifting, and side-channel mutual-information estimation.

pub mod alignment;
pub mod channel;
pub mod config;
pub mod error;
pub mod filter;
pub mod io;
pub mod model;
pub mod postprocess;
pub mod profile;
pub mod receiver;
pub mod session;
pub mod sidechannel;
pub mod sifting;
pub mod sync;
pub mod tagging;
pub mod timeline;
pub mod transmitter;

pub use error::{Error, Result};
