//! Training loops and experiment runner.
pub mod config;
pub mod optim;
pub use config::*;
pub use optim::*;
