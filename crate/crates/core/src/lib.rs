//! Agent-assist core for chat call centers: information vectors, ensemble
//! advice, automatic tagging, simulated clients and the session orchestrator.

pub mod advisor;
pub mod autotagger;
pub mod clientsim;
pub mod digest;
pub mod domain;
pub mod nnet;
pub mod operator;
pub mod orchestrator;
pub mod scalar;
pub mod sessionlog;
pub mod simulate;
pub mod vectorcore;

pub use scalar::Scalar;

/// Double-precision instantiations used by the service and the CLI.
pub type Network = nnet::Network<f64>;
pub type Ensemble = advisor::Ensemble<f64>;
pub type AdvisorBundle = advisor::AdvisorBundle<f64>;
pub type Tagger = autotagger::Tagger<f64>;
pub type Models = orchestrator::Models<f64>;
pub type Session = orchestrator::Session<f64>;

/// Single-precision variants.
pub type NetworkF32 = nnet::Network<f32>;
pub type EnsembleF32 = advisor::Ensemble<f32>;
pub type AdvisorBundleF32 = advisor::AdvisorBundle<f32>;
pub type TaggerF32 = autotagger::Tagger<f32>;
