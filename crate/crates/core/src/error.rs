use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value produced at node `{node}`")]
    NonFinite { node: String },
    #[error("backward called without a forward pass that retained its caches")]
    NoForward,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("invalid graph: {0}")]
    InvalidGraph(String),
    #[error("residual operands of `{node}` have mismatched channel counts ({left} vs {right})")]
    ResidualMismatch {
        node: String,
        left: usize,
        right: usize,
    },
    #[error("pruning would remove every channel of `{layer}`")]
    LayerCollapse { layer: String },
    #[error("group anchored at layer {layer} filter {filter} does not exist in the network")]
    UnknownGroup { layer: usize, filter: usize },
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("score maps cover different filter sets")]
    KeyMismatch,
    #[error("no prunable group remains")]
    NoPrunableGroup,
    #[error("sampling: {0}")]
    Sampling(String),
    #[error("invalid configuration: {0}")]
    Config(String),
}
