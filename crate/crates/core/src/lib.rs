//! Decentralized multi-task Gaussian mixture learning over a privacy-preserving
//! dynamic consensus protocol.
//!
//! Agents sit on a communication graph ([`graph`]) and aggregate scalars by
//! repeated neighbor averaging ([`consensus`]). Raw values are hidden either by
//! Shamir-style polynomial shares or by random additive chunks sent over
//! reshuffled topologies ([`sharing`]); [`privacy`] gives closed-form breach
//! probabilities for the chunking scheme and [`simnet`] checks them by
//! simulation. [`learning`] runs federated EM for a Gaussian mixture with
//! agent-specific mixing weights on top of these aggregators.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases at the
//! crate root fix the scalar to `f64`, or `f32` with a `32` suffix.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod consensus;
pub mod error;
pub mod graph;
pub mod learning;
pub mod linalg;
pub mod privacy;
pub mod scalar;
pub mod sharing;
pub mod simnet;

pub use error::{Error, Result};
pub use graph::Graph;
pub use scalar::Scalar;

pub type Matrix = linalg::Matrix<f64>;
pub type Matrix32 = linalg::Matrix<f32>;
pub type TransitionMatrix = graph::TransitionMatrix<f64>;
pub type TransitionMatrix32 = graph::TransitionMatrix<f32>;
pub type Spectrum = graph::Spectrum<f64>;
pub type ConsensusRun = consensus::ConsensusRun<f64>;
pub type ConsensusRun32 = consensus::ConsensusRun<f32>;
pub type AggregateConfig = sharing::AggregateConfig<f64>;
pub type AggregateOutcome = sharing::AggregateOutcome<f64>;
pub type ShamirShareSet = sharing::ShamirShareSet<f64>;
pub type ChunkSet = sharing::ChunkSet<f64>;
pub type TopologySource = sharing::TopologySource<f64>;
pub type Aggregator = sharing::Aggregator<f64>;
pub type Dataset = learning::Dataset<f64>;
pub type Dataset32 = learning::Dataset<f32>;
pub type MixtureParams = learning::MixtureParams<f64>;
pub type MixtureParams32 = learning::MixtureParams<f32>;
pub type Hyperparams = learning::Hyperparams<f64>;
pub type Responsibilities = learning::Responsibilities<f64>;
pub type LocalStats = learning::LocalStats<f64>;
pub type GlobalStats = learning::GlobalStats<f64>;
pub type EmOptions = learning::EmOptions<f64>;
pub type EmResult = learning::EmResult<f64>;
pub type SimConfig = simnet::SimConfig<f64>;
pub type MessageLog = simnet::MessageLog<f64>;
