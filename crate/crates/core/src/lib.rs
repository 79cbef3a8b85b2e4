//! Solver and verification tools for time-inconsistent, distribution-dependent
//! mean-field equilibria of finite-state controlled Markov chains.
//!
//! The pipeline is: build a [`GeneratorModel`] and a [`CostModel`], run
//! [`picard_solve`], then check the result with [`verify_local_optimality`]
//! or against an N-player simulation with [`simulate`].

pub mod chain;
pub mod cli;
pub mod error;
pub mod expm;
pub mod hj;
pub mod mfe;
pub mod models;
pub mod scenario;
pub mod sim;
pub mod verify;

pub use chain::{
    propagate_flow, strategy_distance, tv_distance, validate_generator, Action, ActionInterval,
    FlowCurve, GeneratorModel, ProbabilityVector, StrategyTable, TimeGrid,
};
pub use error::{MfeError, Result};
pub use hj::{evaluate_cost, evaluate_population_cost, solve_hj, CostModel, HjSolution, ValueTable};
pub use mfe::{estimate_constants, picard_solve, Equilibrium, SolveStatus, SolverOptions};
pub use models::{AffineQuadraticModel, ControlFreeModel, ScenarioCost};
pub use scenario::Scenario;
pub use sim::{simulate, SimConfig};
pub use verify::{dp_oracle, spike_gap, verify_local_optimality};
