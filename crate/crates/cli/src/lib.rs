//! Command line and HTTP front ends for `flowsculpt`.

pub mod api;
pub mod cli;
pub mod service;
