//! Query-driven scenario construction: pick the sentences of a mixed pool
//! that belong with a query sentence, one at a time, and place each one in
//! order.

pub mod corpus;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod evalkit;
pub mod graph;
pub mod mixgen;
pub mod model;
pub mod scoring;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};
