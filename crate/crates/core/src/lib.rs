//! Unsupervised abstractive summarization of two-speaker (customer/agent)
//! dialogues with a conditional dual-latent variational autoencoder.

pub mod autodiff;
pub mod checkpoint;
pub mod corpus;
mod error;
pub mod evaluation;
pub mod generative;
pub mod latent;
pub mod model;
pub mod pipeline;
pub mod seqmodel;
pub mod summarizer;
pub mod synthetic;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
