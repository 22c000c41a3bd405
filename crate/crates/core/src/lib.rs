pub mod config;
pub mod corpus;
pub mod costmodel;
pub mod encoders;
pub mod eval;
pub mod error;
pub mod model;
pub mod mome;
pub mod mpo;
pub mod numerics;
pub mod promptlm;
pub mod rng;
pub mod spae;

pub use error::{Error, Result};
