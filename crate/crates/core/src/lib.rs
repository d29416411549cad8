//! HCRF segmentation core: data handling, potentials, fusion, weight search,
//! post-processing, baselines and metrics.

pub mod baselines;
pub mod dataset;
pub mod error;
pub mod fusion;
pub mod imagedata;
pub mod metrics;
pub mod pipeline;
pub mod postprocess;
pub mod potentials;
pub mod refsources;
pub mod weightopt;

pub use error::{HcrfError, Result};
