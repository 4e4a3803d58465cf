//! Dual-stream forecasting with physics-regularised graphs.
//!
//! A trend stream forecasts the target from its own multi-scale history; a
//! residual stream built on a prior-masked static graph, per-step dynamic
//! graphs and adaptive temporal windows adds a gated correction.

pub mod arx;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph_dynamic;
pub mod graph_static;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod stability;
pub mod tensor;
pub mod training;
pub mod trend;

pub use checkpoint::Checkpoint;
pub use data::{SeriesDataset, SplitConfig, Splits, WindowBatch};
pub use error::{DsprError, Result};
pub use graph_static::{PriorGraph, Role, Variable};
pub use metrics::{MetricReport, Regime, RegimePartition, TdaConfig};
pub use model::{DsprModel, ForwardOutput, ForwardVars, ModelConfig, Variant};
pub use params::{Bound, ParamId, ParamStore};
pub use tensor::{Gradients, Tape, Tensor, Var, MASK_NEG};
pub use training::{RunRecord, TrainConfig, TrainedRun};
