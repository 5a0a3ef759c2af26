//! Latency-budgeted depth compression for convolutional networks.
//!
//! The crate plans which activation layers and which convolution layers of a
//! chain-structured CNN to remove so that the merged network fits a latency
//! budget, and it materializes the merged convolution kernels.
//!
//! The pipeline is:
//!
//! 1. [`arch`] parses a [`NetworkDescriptor`] and answers which segments
//!    `(i, j]` of the layer chain may be collapsed into one convolution.
//! 2. [`tables`] enumerates the merged kernel sizes reachable on each segment
//!    and builds the latency and importance lookup tables.
//! 3. [`keep_set`] picks, for every segment and kernel size, the kept
//!    convolutions with the largest total ℓ1 norm.
//! 4. [`planner`] runs the exact dynamic program over discretized latencies
//!    (and the layer-pruning knapsack baseline) and validates plans.
//! 5. [`kernel`] and [`fuse`] merge the kept kernels of every planned segment
//!    into a single equivalent convolution.
//!
//! [`oracle`] holds exhaustive reference solvers used to cross-check the
//! dynamic programs; [`synth`] and [`zoo`] generate networks for tests and
//! benchmarks.

pub mod arch;
pub mod budget;
pub mod error;
pub mod fuse;
pub mod keep_set;
pub mod kernel;
pub mod oracle;
pub mod planner;
pub mod synth;
pub mod tables;
pub mod zoo;

pub use arch::{FeatureShape, LayerDescriptor, LayerKind, NetworkDescriptor, SkipSpan};
pub use budget::{BudgetSpec, ConstraintSense};
pub use error::{Error, Result};
pub use keep_set::KeepSetSolution;
pub use kernel::{BatchNormParams, KernelTensor};
pub use planner::{MergePlan, PlanMode, PlanSegment};
pub use tables::{CostTables, RawPerfMeasurement, TableKey};
