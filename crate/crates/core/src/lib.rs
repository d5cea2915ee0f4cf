//! Multi-label coral condition classification toolkit: survey image
//! tiling, training, probability ensembling and multi-label evaluation.

pub mod ensemble;
pub mod eval;
pub mod fsutil;
pub mod ingest;
pub mod manifest;
pub mod query;
pub mod schema;
pub mod synthetic;
pub mod train;

pub use schema::{LabelSchema, LabelVector};
