//! Federated normal-behaviour models for wind turbine condition monitoring.
//!
//! - [`scada_data`]: SCADA ingestion, cleaning, encoding and windowing.
//! - [`nbm`]: the LSTM regressor with exact gradients.
//! - [`fl_core`]: weighted aggregation, FedAvg/FedProx rounds, fine-tuning and
//!   the local / intra-farm / inter-farm strategies.
//! - [`synthdata`]: seeded synthetic fleets.
//! - [`experiments`]: the start-date x time-range grid, MAE tables and
//!   cold-start analysis.

pub mod error;
pub mod experiments;
pub mod fl_core;
pub mod nbm;
pub mod scada_data;
pub mod seed;
pub mod synthdata;

pub use error::{Error, Result};
