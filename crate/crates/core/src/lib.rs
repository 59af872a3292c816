pub mod augment;
pub mod autodiff;
pub mod cli;
pub mod data;
pub mod error;
pub mod labels;
pub mod layers;
pub mod metrics;
pub mod objectives;
pub mod training;
pub mod rng;
pub mod runtime;
pub mod vit;

pub use error::{Error, Result};
