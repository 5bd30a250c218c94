//! Analytical performance model for BERT-style transformer training.
//!
//! The crate enumerates every operation in one training iteration
//! ([`opgraph`]), prices each op on a parametric accelerator with a roofline
//! model ([`roofline`]), lays the result out across data- and model-parallel
//! device groups ([`parallel`]), and aggregates per-category time breakdowns
//! ([`report`]). [`whatif`] rewrites graphs to score optimizations (kernel
//! fusion, fused QKV projections, micro-batching) before anyone implements
//! them, and [`lambref`] provides an executable reference of the optimizer
//! update the model prices.

pub mod config;
pub mod error;
pub mod lambref;
pub mod opgraph;
pub mod parallel;
pub mod report;
pub mod roofline;
pub mod whatif;

pub use error::Error;
