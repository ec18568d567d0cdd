//! Harmonic-domain modeling and control synthesis for systems whose
//! fundamental frequency varies in time.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod error;
pub mod harmonic_model;
pub mod numerics;
pub mod phase;
pub mod pmsm;
pub mod sdp;
pub mod sfd;
pub mod synthesis;
pub mod toeplitz;

pub use error::{Error, Result};
