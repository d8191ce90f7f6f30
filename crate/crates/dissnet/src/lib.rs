#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod decentralized;
pub mod dissipativity;
pub mod error;
pub mod linalg;
mod lmi;
pub mod lti_sim;
pub mod nsc;
pub mod sdp;
pub mod synthesis;

pub use error::{Error, Result};
