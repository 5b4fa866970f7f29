//! Attention-block folding for a parameterized NPU model.
//!
//! The pipeline is: parse a [`graph::Graph`], find attention chains with
//! [`graph::match_attention`], batch heads, pick an L1 tiling with
//! [`tiler::select_tiling`], plan transposes and padding in [`transforms`],
//! rewrite the graph with [`graph::fold_attention`], and execute or cost the
//! result with [`sim`].

pub mod error;
pub mod graph;
pub mod hw;
pub mod parallel;
pub mod sim;
pub mod tensor;
pub mod tiler;
pub mod transforms;

pub use error::{GraphError, HwError, SimError, TilerError, TransformError};
pub use hw::{default_xdna2_config, HwProfile, KernelGranularity, NpuConfig};
pub use parallel::ExecMode;
pub use tensor::Tensor;
pub use tiler::{select_tiling, AttentionShape, FoldingLevel, FoldingPlan, Sharing, SpatialMode};
