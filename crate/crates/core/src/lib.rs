//! Channel tracking for many devices sharing one pilot sequence.
//!
//! The crate models a multi-antenna base station that tracks `K` drifting
//! channel vectors through a despread pilot measurement in which any subset
//! of devices may be superimposed. It provides:
//!
//! * [`filter_core`]: Gaussian belief algebra (Kalman steps, log-weights,
//!   mixture moment matching, Lyapunov solve).
//! * [`model`]: the ground-truth simulator.
//! * [`coordinated`]: trackers that are told the access pattern (JC, CI, BP).
//! * [`uncoordinated`]: trackers that infer it (optimal mixture, GNN, MHT, PDAF).
//! * [`heuristics`]: active-count estimation, collision discarding, LS and
//!   coordinate-ascent pattern estimates.
//! * [`analysis`]: exact coordinated MMSE, price-of-anarchy estimation, the
//!   single-step bound, stability checks and MRT rates.
//! * [`harness`]: configuration, seeded Monte Carlo runs and CSV output.

pub mod analysis;
pub mod coordinated;
pub mod error;
pub mod filter_core;
pub mod harness;
pub mod heuristics;
pub mod joint;
pub mod model;
pub mod uncoordinated;

pub use error::{Error, Result};
pub use filter_core::{Belief, LogWeightSet};
pub use harness::{ExperimentSpec, MetricsRow, TrackerKind, TrackerSpec};
pub use joint::{Dynamics, JointBelief, JointCov, MeasNoise, MixtureCovariance};
pub use model::{AccessPattern, PilotBook, ScenarioConfig, SlotMeasurement};
pub use uncoordinated::{Hypothesis, HypothesisSet};
