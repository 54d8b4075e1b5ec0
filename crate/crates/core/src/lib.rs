//! Token-based human mesh recovery with per-joint temporal modelling.

pub mod archive;
pub mod autodiff;
pub mod body_model;
pub mod dual;
pub mod error;
pub mod harness;
pub mod int_base;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod rotations;
pub mod synthdata;
pub mod temporal;

pub use error::{Error, Result};
