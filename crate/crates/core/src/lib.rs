//! Data-side building blocks of the landfill classification benchmark.
//!
//! * [`manifest`]: dataset metadata ingest, label corrections, stratified
//!   splits and the on-disk folder layout.
//! * [`pipeline`]: image standardization, seeded augmentation, class
//!   balancing and model-input normalization.
//! * [`predictions`]: the per-image probability record and its CSV format.
//! * [`metrics`]: confusion counts, per-class and weighted metrics, ROC/AUC
//!   and baseline comparison.
//! * [`fusion`]: filename-aligned late fusion of several prediction files.

pub mod fusion;
pub mod label;
pub mod manifest;
pub mod metrics;
pub mod pipeline;
pub mod predictions;

pub use label::Label;
pub use predictions::PredictionRecord;
