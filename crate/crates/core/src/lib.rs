//! Token-level gating of a frozen generator.
//!
//! A frozen generator proposes candidate tokens in descending probability
//! order; a small proxy policy accepts or rejects each one. Rejected tokens
//! are excluded for the rest of the position, and rejection is masked when
//! the remaining candidates carry too little probability mass. The proxy is
//! trained with PPO against a programmable reward oracle.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, threading and
//! the command line live in the `proxygate` companion crate.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod environment;
pub mod error;
pub mod experiments;
pub mod generator;
mod math;
pub mod parallel;
pub mod proxy;
pub mod rewards;
pub mod trainer;

pub use environment::{Action, AllowedActions, GateEnv, GateState, SkamConfig, StepOutcome};
pub use error::{Error, Result};
pub use generator::{Generator, ProbVector, TokenId, Vocab};
pub use parallel::{ParallelMap, Sequential};
pub use proxy::{
    AlwaysAccept, FeatureExtractor, FeatureVec, GatePolicy, Observation, PolicyOutput, ProxyModel,
    ProxyParams,
};
pub use rewards::{OracleSpec, RewardOracle};
pub use trainer::{DecisionRecord, TrainConfig, Trajectory};
