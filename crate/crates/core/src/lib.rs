pub mod archive;
pub mod attention;
pub mod autodiff;
pub mod backbone;
pub mod bench;
pub mod checks;
pub mod cli;
pub mod config;
pub mod correction;
pub mod dd;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod head;
pub mod kernels;
pub mod layers;
pub mod model;
pub mod params;
pub mod tensor;
pub mod transformer;

pub use error::{Error, Result};
