//! Prototype-concept CNN with orthogonal per-class concept bases, plus the
//! analysis tools that turn a trained model into global semantic explanations.

pub mod binfmt;
pub mod checkpoint;
pub mod common_traits;
pub mod config;
pub mod data;
pub mod error;
pub mod explanation;
pub mod feature_viz;
pub mod losses;
pub mod optim;
pub mod percept_study;
pub mod pipeline;
pub mod proto_model;
pub mod rank_sensitivity;
pub mod render;
pub mod trainer;
pub(crate) mod util;

pub use error::{Error, Result};
