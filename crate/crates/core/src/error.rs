use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

/// Errors raised anywhere in the core pipeline.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    NonFinite {
        op: &'static str,
    },
    ZeroNorm {
        op: &'static str,
    },
    LabelOutOfRange {
        label: usize,
        classes: usize,
    },
    StepOutOfRange {
        step: u64,
        total: u64,
    },
    UnknownId {
        kind: &'static str,
        id: usize,
    },
    AdapterSiteCount {
        expected: usize,
        got: usize,
    },
    TooFewExamples {
        needed: usize,
        got: usize,
    },
    NoFeasiblePositivePairs,
    NoFeasibleNegativePairs,
    DuplicateTask(String),
    EmptyDatasets(String),
    EmptyRegistry,
    EmptyDataset,
    EmptyEvalPool,
    NoFeasibleBudget {
        target: f64,
        minimum: f64,
    },
    ModalityMismatch(&'static str),
    InvalidConfig(String),
}

pub type Result<T> = core::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, left, right } => {
                write!(f, "{op}: shape mismatch {left:?} vs {right:?}")
            }
            Error::NonFinite { op } => write!(f, "{op}: produced a non-finite value"),
            Error::ZeroNorm { op } => write!(f, "{op}: zero-norm input"),
            Error::LabelOutOfRange { label, classes } => {
                write!(f, "label {label} out of range for {classes} classes")
            }
            Error::StepOutOfRange { step, total } => {
                write!(f, "step {step} outside schedule of {total} steps")
            }
            Error::UnknownId { kind, id } => write!(f, "unregistered {kind} id {id}"),
            Error::AdapterSiteCount { expected, got } => {
                write!(f, "expected {expected} adapter sites, got {got}")
            }
            Error::TooFewExamples { needed, got } => {
                write!(f, "need at least {needed} examples, got {got}")
            }
            Error::NoFeasiblePositivePairs => f.write_str("no feasible positive pairs"),
            Error::NoFeasibleNegativePairs => f.write_str("no feasible negative pairs"),
            Error::DuplicateTask(name) => write!(f, "duplicate task id {name}"),
            Error::EmptyDatasets(name) => write!(f, "task {name} has no datasets"),
            Error::EmptyRegistry => f.write_str("task registry is empty"),
            Error::EmptyDataset => f.write_str("dataset is empty"),
            Error::EmptyEvalPool => f.write_str("evaluation pool is empty"),
            Error::NoFeasibleBudget { target, minimum } => write!(
                f,
                "no feasible configuration for budget {target}: minimal adapter set needs {minimum}"
            ),
            Error::ModalityMismatch(what) => write!(f, "modality mismatch: {what}"),
            Error::InvalidConfig(msg) => write!(f, "invalid configuration: {msg}"),
        }
    }
}

impl core::error::Error for Error {}
