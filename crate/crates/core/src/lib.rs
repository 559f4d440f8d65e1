//! Differentially private distributed Nash-equilibrium seeking for
//! peer-to-peer energy trading.
//!
//! The crate models the reduced trading game, runs the consensus-plus-gradient
//! seeking iteration in exact and Laplace-noised form, mounts the
//! trajectory-based inference attack on a victim's demand, and drives the
//! Monte Carlo campaigns that measure all of the above.

// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adversary;
pub mod error;
pub mod experiment;
pub mod game;
pub mod network;
pub mod privacy;
pub mod report;
pub mod seeking;

pub use adversary::{
    attack_statistics, infer, AttackModel, AttackObservation, AttackStats, InferenceResult,
};
pub use error::{Error, Result};
pub use experiment::{run_experiment, ExperimentConfig, ExperimentKind, ExperimentReport};
pub use game::{
    beta_to_demand, derive_coefficients, nash_equilibrium, payoff, recover_dispatch,
    social_optimum, total_cost, BidProfile, Dispatch, Game, GameCoefficients, MarketParams,
    ProsumerParams,
};
pub use network::{CommGraph, GraphSpectrum};
pub use privacy::{
    adjacent, calibrate, dp_ratio_check, mix_seed, sample_laplace, sensitivity, LaplaceSpec,
    PrivacyBudget,
};
pub use seeking::{
    build_iteration_matrix, read_trajectory_csv, residual_log, seek, step_size_bound,
    variance_bound, variance_bound_trace, EstimateState, IterationMatrix, NoiseRealization,
    SeekConfig, SeekEngine, Trajectory,
};
