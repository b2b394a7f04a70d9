//! Temporal encoding of irregularly sampled satellite image time series
//! with learnable cluster queries (collect, update, distribute), plus the
//! data handling, training and benchmarking around it.

pub mod baseline;
pub mod checkpoint;
pub mod data;
pub mod encoding;
pub mod error;
pub mod exchanger;
pub mod graph;
pub mod heads;
pub mod params;
pub mod scaling;
pub mod tensor;
pub mod train;

pub use encoding::TimeAxis;
pub use error::{Error, Result};
pub use exchanger::{ExchangerConfig, ExchangerParams};
pub use graph::{Gradients, Graph, Var, IGNORE_INDEX};
pub use params::{ParamId, ParamStore};
pub use tensor::{Scalar, Tensor};
