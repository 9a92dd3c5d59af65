pub mod autograd;
pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod contrastive;
pub mod data;
pub mod decouple;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod nn;
pub mod pipeline;
pub mod prep;
pub mod split;

pub use error::{Error, Result};
