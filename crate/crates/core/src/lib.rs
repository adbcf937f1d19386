//! Hierarchical federated learning with filter-wise optimal transport
//! alignment and shrinkage-aware regularized-mean merging.
//!
//! The crate is organised bottom-up:
//!
//! | module | role |
//! |--------|------|
//! | [`math`] | dense matrices, 4-D filter tensors, seeded RNG, SPD solves, bilinear resize |
//! | [`model`] | micro CNN with hand-written backprop and the checkpoint container |
//! | [`data`] | synthetic multi-domain images and the heterogeneous partitioner |
//! | [`client`] | local FedAvg/FedProx training, Gram capture, clipping and DP noise |
//! | [`fot`] | filter normalization, Sinkhorn transport, assignment rounding, station alignment |
//! | [`merge`] | station aggregation, Gram shrinkage, conv means and the RegMean solve |
//! | [`orchestrator`] | the client → station → server round protocol and evaluation |
//! | [`experiment`] | end-to-end synthetic federations built from a single description |
//!
//! Stations and the server never see samples: every function in [`merge`] and
//! [`fot`] works on weights and Gram statistics only.

pub mod assignment;
pub mod client;
pub mod container;
pub mod data;
pub mod experiment;
pub mod fot;
pub mod math;
pub mod merge;
pub mod model;
pub mod orchestrator;

mod error;

pub use error::{Error, Result};
