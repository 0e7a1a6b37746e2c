//! Language Transmission Engine: populations of sender and receiver agents
//! playing referential games, with periodic culling that drives cultural
//! and architectural evolution.
//!
//! Module order follows the dependency order: a small reverse-mode
//! autodiff tape, cell genotypes and their compiled cells, agents, the game
//! itself, the population loop, metrics, and the experiment commands.

pub mod agents;
pub mod autodiff;
pub mod cell;
pub mod error;
pub mod experiments;
pub mod game;
pub mod genome;
pub mod metrics;
pub mod population;
pub mod rng;

pub use agents::{Agent, AgentConfig, Arch, DecodeMode, Message, Role};
pub use error::{Error, Result};
pub use experiments::{parse_config, ExperimentConfig, Profile};
pub use game::{Dataset, DatasetManifest, SymbolicDescription};
pub use genome::{Activation, Genotype};
pub use metrics::MetricsRecord;
pub use population::{CullingPolicy, LteConfig, Population};
pub use rng::RandomStream;
