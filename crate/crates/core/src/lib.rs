//! Multi-task concept network simulator.

pub mod analytics;
pub mod config;
pub mod error;
pub mod experiment;
pub mod graph;
pub mod intervene;
pub mod policy;
pub mod rollout;
pub mod seeds;
pub mod trainer;

pub use config::{TrainConfig, UpdateMode};
pub use error::{Error, Result};
pub use graph::{ConceptGraph, Task, TaskSet};
pub use policy::{Policy, SparseGradient};
pub use rollout::{Execution, Trajectory};
pub use trainer::{Simulation, StepMetrics};
