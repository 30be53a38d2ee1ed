//! Matrix completion with a shared factor structure between the data matrix
//! and the logits of the observation mask.

pub mod error;
pub mod linalg;
pub mod inference;
pub mod io;
pub mod loss;
pub mod model;
pub mod mcp;
pub mod oracle;
pub mod par;
pub mod pipeline;
pub mod ranks;
pub mod sim;
pub mod tuning;

pub use error::{Error, ErrorKind, Result};
pub use loss::{BFamily, FitConfig, LossSpec};
pub use model::{FactorModel, MaskedData, ParamPair, Ranks};
