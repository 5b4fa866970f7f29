use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HwError {
    #[error("invalid granularity: {field} = {value} (must be >= 1)")]
    InvalidGranularity { field: &'static str, value: usize },
    #[error("invalid config field `{field}`: {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("bad override: {0}")]
    BadOverride(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("graph parse error: {0}")]
    Parse(String),
    #[error("node `{node}`: {reason}")]
    Schema { node: String, reason: String },
    #[error("node `{node}` references unknown tensor `{tensor}`")]
    UnknownTensor { node: String, tensor: String },
    #[error("tensor `{tensor}`: {reason}")]
    BadTensor { tensor: String, reason: String },
    #[error("tensor `{tensor}` is produced by both `{first}` and `{second}`")]
    MultipleProducers { tensor: String, first: String, second: String },
    #[error("cycle detected through node `{node}`")]
    Cycle { node: String },
    #[error("node `{node}`: shape mismatch: {reason}")]
    ShapeMismatch { node: String, reason: String },
    #[error("head grouping: {q_heads} query heads are not divisible by {kv_heads} kv heads")]
    HeadGrouping { q_heads: usize, kv_heads: usize },
    #[error("inconsistent plan: {0}")]
    InconsistentPlan(String),
    #[error("node `{node}`: cannot evaluate: {reason}")]
    Eval { node: String, reason: String },
}

impl GraphError {
    /// True for errors detected while checking a syntactically valid document.
    pub fn is_validation(&self) -> bool {
        !matches!(self, GraphError::Parse(_))
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TilerError {
    #[error("dimension `{dim}` = {value} is not a multiple of granule {granule}; pad first")]
    Unpadded { dim: &'static str, value: usize, granule: usize },
    #[error("invalid attention shape: {0}")]
    InvalidShape(String),
    #[error("utilization is not defined for an unfolded (level 1) plan")]
    NotApplicable,
    #[error(transparent)]
    Hw(#[from] HwError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransformError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("tensor `{tensor}` dims {dims:?} are not multiples of block {block}; pad first")]
    MustPadFirst { tensor: String, dims: Vec<usize>, block: usize },
    #[error("tensor `{tensor}` needs padding on {ragged} dims but DMA pads at most {limit} and the producer cannot pad")]
    Unpaddable { tensor: String, ragged: usize, limit: usize },
    #[error("block transpose of {elem_bytes}B elements in blocks of {block} violates the {stride}B DMA stride")]
    StrideViolation { block: usize, elem_bytes: u32, stride: u32 },
    #[error(transparent)]
    Hw(#[from] HwError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("plan/input mismatch: {0}")]
    PlanMismatch(String),
    #[error("utilization {0} is outside (0, 1]")]
    BadUtilization(f64),
    #[error(transparent)]
    Transform(#[from] TransformError),
    #[error(transparent)]
    Tiler(#[from] TilerError),
}
