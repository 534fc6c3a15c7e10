//! Simulation library for optimistic least-squares value iteration in
//! episodic MDPs whose optimal action-value function is linear in known
//! features, sampled under a state-revisiting protocol.
//!
//! - [`linalg`]: ridge covariances with maintained inverses.
//! - [`mdp`]: finite MDPs, exact dynamic programming, linear Q fits.
//! - [`envgen`]: validated environment generators and JSON serialization.
//! - [`agent`]: the revisiting agent and the full-refit baseline.

pub mod agent;
pub mod envgen;
pub mod harness;
pub mod linalg;
pub mod mdp;

pub use agent::{BaselineAgent, BonusSnapshot, LinQAgent, PathBuffer, StepRegressor};
pub use envgen::{EnvKind, EnvSpec, Environment};
pub use harness::{AgentKind, ExperimentConfig, RegretLog};
pub use linalg::CovarianceState;
pub use mdp::{DeterministicPolicy, DpSolution, FeatureMap, FiniteMdp};
