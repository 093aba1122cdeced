//! Command-line and HTTP front ends for `seedprop-core`.

pub mod options;
pub mod service;
