//! Command-line entrypoints and the HTTP inference service.

pub mod cli;
pub mod error;
pub mod images;
pub mod loading;
pub mod recon;
pub mod service;
