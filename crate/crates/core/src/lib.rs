//! Simulation of gossip-based update dissemination under lotus-eater
//! (satiation) attacks, plus the abstract token-collecting model and an
//! experiment harness for attacker-fraction sweeps.

pub mod adversary;
pub mod engine;
pub mod error;
pub mod gossip;
pub mod graph;
pub mod harness;
pub mod model;
pub mod rng;

pub use adversary::{AttackConfig, AttackKind, ReportingConfig};
pub use engine::{run, SimConfig, SimReport};
pub use error::ConfigError;
pub use gossip::{NodeId, NodeKind, NodeState, ProtocolParams, Round, UpdateId};
