use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum CgrlError {
    #[error("node id {id} out of range for graph with {n} nodes")]
    NodeOutOfRange { id: usize, n: usize },

    #[error("self-loop ({0}, {0}) rejected in edge input")]
    SelfLoopInput(usize),

    #[error("feature matrix has {rows} rows but graph has {n} nodes")]
    FeatureRowMismatch { rows: usize, n: usize },

    #[error("label {label} at node {node} exceeds class count {classes}")]
    LabelOutOfRange {
        node: usize,
        label: usize,
        classes: usize,
    },

    #[error("nodes {0} and {1} are not adjacent")]
    NotAdjacent(usize, usize),

    #[error("split ratios must be non-negative and sum to 1 (got {0:?})")]
    BadSplitRatios([f64; 3]),

    #[error("{op}: shape mismatch, expected {expect} got {got}")]
    Shape {
        op: &'static str,
        expect: String,
        got: String,
    },

    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },

    #[error("backward root must be a 1x1 scalar, got {rows}x{cols}")]
    NonScalarRoot { rows: usize, cols: usize },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("row {row} of {what} is not stochastic (sum {sum})")]
    NotStochastic { what: &'static str, row: usize, sum: f64 },

    #[error("node {0} has no neighbors")]
    IsolatedNode(usize),

    #[error("backdoor adjustment inestimable: P(h={h}, g={g}) = 0 while P(g={g}) > 0")]
    PositivityViolation { h: usize, g: usize },

    #[error("degree split degenerate: all node degrees equal ({0})")]
    Unsplittable(usize),

    #[error("config: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path} line {line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("experiment run failed: {0}")]
    RunFailed(String),
}

pub type Result<T> = std::result::Result<T, CgrlError>;

impl CgrlError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        CgrlError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        CgrlError::Invalid {
            op,
            msg: msg.into(),
        }
    }
}
