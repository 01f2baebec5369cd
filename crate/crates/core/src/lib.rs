//! Fundamental precision limits for estimating a parameter encoded in a
//! time-dependent Markovian channel, with and without quantum error correction.

pub mod aqec;
pub mod asymptotics;
pub mod bound;
pub mod channel;
pub mod dynamics;
pub mod error;
pub mod operator;
pub mod optim;
pub mod qec;
pub mod quadrature;
pub mod sdp;
pub mod span;

pub use error::{Error, Result};
