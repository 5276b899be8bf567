#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! Endurance modeling, behavioral simulation and modeling-attack evaluation
//! for NVM-based physical unclonable functions.

pub mod attack;
pub mod chain;
pub mod cli;
pub mod dist;
pub mod error;
pub mod lifetime;
pub mod metrics;
pub mod occupancy;
pub mod sim;

pub use error::{Error, Result};
