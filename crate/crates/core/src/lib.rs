pub mod env;
pub mod error;
pub mod eval;
pub mod fitting;
pub mod model;
pub mod perception;
pub mod qnet;
pub mod rng;
pub mod trainer;
pub mod world;

pub use error::{Error, Result};
