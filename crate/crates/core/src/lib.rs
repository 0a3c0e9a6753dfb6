//! Batch detection of anomalous driving behavior from GPS trips.
//!
//! Trips are map-matched onto a road network, summarized as edge-attributed
//! matrices, reduced to fixed-length feature vectors and scored with an
//! Isolation Forest. Drivers are ranked by their mean trip score.

pub mod eval;
pub mod exec;
pub mod features;
pub mod iforest;
pub mod ingest;
pub mod matcher;
pub mod model;
pub mod pipeline;
pub mod scoring;
pub mod synth;
pub mod tripgraph;

pub use exec::Execution;
pub use model::AnalysisConfig;
pub use pipeline::{run_pipeline, PipelineError, PipelineOutput, PipelineSummary};

/// Version of this library, as recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
