//! Simulation and multi-agent PPO training for MEC-equipped UAVs serving mobile
//! users over sub-THz links.
//!
//! The numeric modules (`net`, `alloc`, `nn`, `ppo`) are generic over
//! [`Scalar`]; the simulator and trainer run in `f64`, exposed through the
//! aliases below.

pub mod alloc;
pub mod cli;
pub mod config;
pub mod env;
pub mod error;
pub mod metrics;
pub mod net;
pub mod nn;
pub mod ppo;
pub mod scalar;
pub mod trainer;

pub use config::{ModelConfig, PpoHyper, RunConfig, ScenarioConfig, TrainConfig};
pub use error::{Error, Result};
pub use scalar::Scalar;

/// Scalar used by the simulator and trainer.
pub type Real = f64;
pub type NetworkConfig = config::NetworkConfig<Real>;
pub type Position = net::Position<Real>;
pub type Task = net::Task<Real>;
pub type LinkAlloc = net::LinkAlloc<Real>;
pub type AllocProblem = alloc::AllocProblem<Real>;
pub type AllocSolution = alloc::AllocSolution<Real>;
