//! Symbolic-model Q-learning for continuous control systems.
//!
//! The pipeline is: grid the state and action boxes ([`abstraction`]), build a
//! sound nondeterministic successor relation with per-pair reward bounds,
//! learn lower and upper Q-tables over it ([`learner`]), and lift a policy
//! back to the continuous system ([`refinement`]). [`analysis`] computes the
//! precision bounds and stability checks; [`experiments`] scripts the
//! benchmark runs and [`persist`] holds the file formats.

pub mod abstraction;
pub mod analysis;
pub mod dynamics;
pub mod error;
pub mod experiments;
pub mod learner;
pub mod persist;
pub mod refinement;
pub mod rng;

pub use abstraction::{
    build_symbolic_model, AbstractionOptions, CellId, EnablingMode, GridPartition, InflationMode, RewardMode,
    SymbolicModel,
};
pub use dynamics::{BoxDomain, CellBox, LipschitzBounds, SystemModel, Trajectory};
pub use error::{Result, SymqError};
pub use experiments::{ExperimentKind, ExperimentSpec, GoalSpec};
pub use learner::{
    AlphaSchedule, GreedyTable, LearnConfig, PolicySource, PolicyTable, QTable, QTablePair, StartDistribution,
    SuccessorSelection, Which,
};
pub use refinement::{RefinedController, Verdict};
