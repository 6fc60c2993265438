//! Segment electricity customers from smart-meter data, fit constrained
//! per-segment price–demand models, and compute profit-maximizing
//! per-segment dynamic tariffs benchmarked against a uniform tariff.

pub mod clustering;
pub mod demand;
pub mod ingest;
pub mod optim;
pub mod pricing;
pub mod segmentation;
pub mod synthgen;

mod rng;
