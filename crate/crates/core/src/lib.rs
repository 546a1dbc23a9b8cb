pub mod degrade;
pub mod error;
pub mod gradcheck;
pub mod grid;
pub mod loss;
pub mod metrics;
pub mod normal;
pub mod optim;
pub mod posterior;
pub mod risk;
pub mod rng;
pub mod synth;

pub use error::{Error, Result};
