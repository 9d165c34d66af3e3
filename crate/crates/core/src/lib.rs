pub mod cli;
pub mod config;
pub mod data;
pub mod encoder;
pub mod eval;
pub mod linalg;
pub mod losses;
pub mod nn;
pub mod rng;
pub mod trainer;
