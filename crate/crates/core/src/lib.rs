//! Generative sequential recommendation with a jointly trained item tokenizer.

pub mod alignment;
pub mod autograd;
pub mod data;
pub mod error;
pub mod evaldecode;
pub mod nn;
pub mod recommender;
pub mod synthetic;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
