//! Few-shot multi-instance temporal action localization.
//!
//! The pipeline runs synthetic (or file-backed) clip features through a
//! spatial-channel relation transformer, regresses masked start/end
//! boundary distributions, refines them with selective cosine penalization,
//! and decodes segments with top-k pair selection, soft-NMS and DBSCAN
//! interval clustering.

pub mod ablation;
pub mod boundary;
pub mod cli;
pub mod config;
pub mod container;
pub mod episodes;
pub mod error;
pub mod evaluation;
pub mod localizer;
pub mod numerics;
pub mod pipeline;
pub mod scr;
pub mod supervision;

pub use error::{Error, Result};
