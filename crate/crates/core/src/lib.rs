pub mod adapt;
pub mod align;
pub mod autodiff;
pub mod encoder;
pub mod error;
pub mod graph;
pub mod harness;
mod par;
pub mod pretrain;
pub mod theory;
pub mod seed;
pub mod vocab;

pub use error::{Error, Result};
