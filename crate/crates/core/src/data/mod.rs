//! Synthetic data and the curation pipeline.

pub mod curate;
pub mod filters;
pub mod manifest;
pub mod synth;
