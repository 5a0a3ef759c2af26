use thiserror::Error;

use crate::tables::TableKey;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid network descriptor: {0}")]
    Schema(String),

    #[error("layer {layer}: {reason}")]
    Shape { layer: usize, reason: String },

    #[error("declared irreducible set {declared:?} disagrees with the layer shapes (expected {computed:?})")]
    IrreducibleMismatch { declared: Vec<usize>, computed: Vec<usize> },

    #[error("layer {0} carries no feature-map shapes")]
    MissingShapes(usize),

    #[error("layer {0} carries no l1 norm")]
    MissingNorm(usize),

    #[error("segment ({i}, {j}] is not a valid merge segment: {reason}")]
    SegmentNotAllowed { i: usize, j: usize, reason: String },

    #[error("kernel size {k} is not realizable on segment ({i}, {j}]")]
    InfeasibleKernelSize { i: usize, j: usize, k: usize },

    #[error("channel mismatch: expected {expected} input channels, found {found}")]
    ChannelMismatch { expected: usize, found: usize },

    #[error("layer {layer} cannot be replaced by the identity: {reason}")]
    NotSubstitutable { layer: usize, reason: String },

    #[error("invalid kernel: {0}")]
    InvalidKernel(String),

    #[error("missing table entry {0}")]
    MissingKey(TableKey),

    #[error("cost tables carry no entries for segment ({i}, {j}]")]
    MissingSegment { i: usize, j: usize },

    #[error("duplicate table entry {0}")]
    DuplicateKey(TableKey),

    #[error("latency provider failed for {key}: {reason}")]
    Provider { key: TableKey, reason: String },

    #[error("non-finite value for {0}")]
    NonFinite(TableKey),

    #[error("no plan fits within {capacity} latency units; the cheapest plan needs {minimum} units")]
    InfeasibleBudget { capacity: u64, minimum: u64 },

    #[error("the network admits no complete plan")]
    NoPlan,

    #[error("{what} is {value}, above the enumeration guard of {limit}")]
    GuardLimit {
        what: &'static str,
        value: usize,
        limit: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Short machine-readable category, used by the CLI's error documents.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Schema(_) => "schema",
            Error::Shape { .. } => "shape",
            Error::IrreducibleMismatch { .. } => "irreducible-mismatch",
            Error::MissingShapes(_) => "missing-shapes",
            Error::MissingNorm(_) => "missing-norm",
            Error::SegmentNotAllowed { .. } => "segment-not-allowed",
            Error::InfeasibleKernelSize { .. } => "infeasible-kernel-size",
            Error::ChannelMismatch { .. } => "channel-mismatch",
            Error::NotSubstitutable { .. } => "not-substitutable",
            Error::InvalidKernel(_) => "invalid-kernel",
            Error::MissingKey(_) => "missing-key",
            Error::MissingSegment { .. } => "missing-segment",
            Error::DuplicateKey(_) => "duplicate-key",
            Error::Provider { .. } => "provider",
            Error::NonFinite(_) => "non-finite",
            Error::InfeasibleBudget { .. } => "infeasible-budget",
            Error::NoPlan => "no-plan",
            Error::GuardLimit { .. } => "guard-limit",
            Error::InvalidArgument(_) => "invalid-argument",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}
