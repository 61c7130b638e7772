//! Narrative incident reports in, structured e-bike safety records and
//! severity statistics out.
//!
//! The pipeline: [`ingest`] loads raw exports, [`agents`] runs the four-stage
//! extraction workflow (rule-backed or LLM-backed through [`gateway`]),
//! [`codebook`] turns raw strings into numeric predictors, [`ordlogit`] and
//! [`inference`] quantify severity drivers, [`metrics`] scores extraction
//! quality, and [`report`] renders everything to files.

pub mod agents;
pub mod cli;
pub mod codebook;
pub mod gateway;
pub mod inference;
pub mod ingest;
pub mod metrics;
pub mod ordlogit;
pub mod report;
pub mod text;
