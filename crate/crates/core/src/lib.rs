pub mod control;
pub mod data;
pub mod diagnostics;
pub mod dynamics;
pub mod error;
pub mod experiment;
pub mod gradients;
pub mod integrate;
pub mod io;
pub mod objectives;
pub mod train;

pub use control::{glorot_grid, glorot_init, Checkpoint, ControlGrid, FlatParams, Interpolation};
pub use dynamics::{Activation, ConcatsquashShape, DynamicsLayer, LayerSpec, TraceEstimate, TraceMode};
pub use error::{Error, Result};
pub use experiment::{ExperimentConfig, ExperimentKind, Outcome, Summary};
pub use gradients::{Engine, EngineConfig, GradientReport};
pub use integrate::{Method, SolveRecord, SolverConfig, TraceProbe};
pub use train::{ConvergenceLog, MultilevelSchedule, OptimizerConfig, Phase, TrainConfig};
