//! Personalized programming task generation, sandboxed grading and
//! evaluation statistics.

pub mod api;
pub mod assessment;
pub mod batch;
pub mod config;
pub mod domain;
pub mod gateway;
pub mod pipeline;
pub mod prompt;
pub mod sandbox;
pub mod store;
