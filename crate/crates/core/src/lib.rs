//! Cross-species knowledge sharing and preserving for universal animal
//! activity recognition.

pub mod archive;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod gradcheck;
pub mod ingest;
pub mod model;
pub mod preprocess;
pub mod rng;
pub mod synthetic;
pub mod tape;
pub mod tensor;
pub mod train;

pub use dataset::{Dataset, SampleWindow, SpeciesInfo};
pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
