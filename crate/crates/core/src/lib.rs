//! Desk-scale elastic supernet training.
//!
//! One shared weight store hosts a family of convolutional subnets that vary
//! in depth, width, and kernel size. Training strategies decide when smaller
//! subnets join the update (immediately, progressively by phase, or delayed
//! with a warmed-up gradient scale), diagnostics measure what the extra
//! subnet gradients do to the full model, and the evaluation tools calibrate
//! batch-norm statistics, score subnets, and extract the accuracy/MACs
//! Pareto frontier.

pub mod arch;
pub mod checkpoint;
pub mod data;
pub mod diag;
pub mod error;
pub mod eval;
pub mod kernels;
pub mod optim;
pub mod reference;
pub mod rng;
pub mod schedule;
pub mod supernet;
pub mod tape;
pub mod tensor;
pub mod testnet;
pub mod train;

pub use arch::{ArchConfig, ArchSpace, HeadSpec, StageSpec, StemSpec};
pub use error::{Error, Result};
pub use eval::{EvalRecord, ParetoFrontier};
pub use schedule::{EpsilonSchedule, LrKind, LrSchedule};
pub use supernet::{StandaloneModel, SubnetView, Supernet, SupernetWeights};
pub use tape::{BnMode, BnRunningStats, Tape, Var};
pub use tensor::{Minibatch, Tensor};
pub use train::{
    DistillMode, MetricsLog, ShrinkingPlan, StepReport, Strategy, TrainObserver,
};
