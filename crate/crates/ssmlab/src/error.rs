use thiserror::Error;

/// Library-wide error type.
#[derive(Debug, Error)]
pub enum SsmError {
    #[error("shape mismatch in {op}: lhs {lhs:?}, rhs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("non-finite input to {op}")]
    NonFinite { op: &'static str },

    #[error("NaN produced at timestep {t}, channel {channel}")]
    NanInScan { t: usize, channel: usize },

    #[error("non-positive delta at timestep {t}, channel {channel}: softplus missing?")]
    NonPositiveDelta { t: usize, channel: usize },

    #[error("output node {0} is not scalar-valued")]
    NonScalarOutput(usize),

    #[error("unknown node id {0}")]
    UnknownNode(usize),

    #[error("token id {token} out of vocabulary at position {position}")]
    OutOfVocab { token: usize, position: usize },

    #[error("sequence length {len} exceeds brute-force guard {max}")]
    LengthGuard { len: usize, max: usize },

    #[error("missing trace for layer {0}")]
    MissingTrace(usize),

    #[error("layer {layer} out of range (model has {n_layers} layers)")]
    LayerOutOfRange { layer: usize, n_layers: usize },

    #[error("dimension {dim} out of range (width {width})")]
    DimOutOfRange { dim: usize, width: usize },

    #[error("empty input to {0}")]
    EmptyInput(&'static str),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("checkpoint parse error: {0}")]
    Checkpoint(String),

    #[error("training diverged (non-finite loss) at step {0}")]
    Diverged(usize),

    #[error("too few layers: need at least {need}, got {got}")]
    TooFewLayers { need: usize, got: usize },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SsmError>;
