//! Vehicle-manufacturing analysis toolkit.
//!
//! Labels action-duration anomalies in production-line logs as source,
//! knock-on, normal or misc; turns labelled sequences into look-back windows;
//! trains sequence-to-sequence duration forecasters (GRU, LSTM, Transformer);
//! and scores them with a composite time-weighted metric.

pub mod classify;
pub mod domain;
pub mod ingest;
pub mod metrics;
pub mod simgen;
pub mod pipeline;
pub mod neural;
pub mod report;
pub mod stages;
