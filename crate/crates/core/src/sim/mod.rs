//! Numeric executors, schedules and the roofline cost model.
//!
//! All numerics run in `f64`; the modeled element width only enters byte
//! counts. Schedules are data independent and can be built without inputs.

mod cost;
mod folded;
mod inputs;
mod reference;
mod schedule;
mod softmax;
mod unfolded;

pub use cost::{account_traffic, compare_costs, estimate_latency, mapping_utilization, speedup, Bound, Comparison, CostReport};
pub use folded::{build_folded_schedule, crop_output, execute_folded, execute_folded_with, execute_softmax_stage, pad_inputs};
pub use inputs::AttentionInputs;
pub use reference::{padded_key_mass, reference_attention};
pub use schedule::{Access, Direction, MemLevel, Operand, Schedule, Step, StepKind, TileCoord};
pub use softmax::{combine_partials, SoftmaxPartial};
pub use unfolded::{build_unfolded_schedule, execute_unfolded, execute_unfolded_with};

/// Default max-abs tolerance between an executor and the reference.
pub const TOLERANCE: f64 = 1e-9;
