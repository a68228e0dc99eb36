//! Identification of people from the micro-movements of their eyes.

pub mod cli;
pub mod config;
pub mod dataset;
pub mod eval;
pub mod model;
pub mod signal;
pub mod sim;
