//! Sticker retrieval with a contrastive dual encoder and a frozen language
//! model extended with trainable retrieval tokens.

pub mod checkpoint;
pub mod cli;
pub mod corpus;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod models;
pub mod objectives;
pub mod params;
pub mod retrieval;
pub mod service;
pub mod tensor;
pub mod text;
pub mod training;

pub use error::{Error, Result};
