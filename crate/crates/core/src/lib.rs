pub mod acf;
pub mod autodiff;
pub mod cli;
pub mod container;
pub mod corpus;
pub mod diagnostics;
pub mod dsp;
pub mod error;
pub mod evaluation;
pub mod models;
pub mod pipeline;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
