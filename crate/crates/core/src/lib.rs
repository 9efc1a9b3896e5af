pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod gradsuite;
pub mod model;
pub mod probe;
pub mod store;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
pub use model::{Model, ModelConfig};
