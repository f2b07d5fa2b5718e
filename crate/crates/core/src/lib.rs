//! Compositional generative image classification with an explicit occluder
//! model, black-box patch attacks, and robustness evaluation.

pub mod attack;
pub mod backbone;
pub mod bundle;
pub mod combiner;
pub mod compnet;
pub mod dataset;
pub mod dictionary;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod features_io;
pub mod filters;
pub mod finetune;
pub mod head;
pub mod image;
pub mod model;
pub mod rng;
pub mod synth;
pub mod vmf;
pub mod viz;

pub use error::{Error, Result};
