pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod error;
pub mod eval;
pub mod export;
pub mod model;
pub mod pipeline;
pub mod projector;
pub mod rl;
pub mod sft;
pub mod task;
pub mod teacher;
pub mod trajectory;
pub mod vocab;

pub use error::{Error, Result};
