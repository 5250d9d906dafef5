//! Few-shot segmentation with task-disruptive background suppression.
//!
//! The crate carries its own small reverse-mode autodiff engine
//! ([`tape::Graph`]), the suppression module ([`tbs`]), a synthetic episode
//! generator ([`episodes`]), the mask-value aggregation head ([`seg_head`])
//! and evaluation metrics ([`metrics`]).

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod episodes;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod params;
pub mod pnm;
pub mod run;
pub mod seg_head;
pub mod tape;
pub mod tbs;
pub mod tensor;
pub mod viz;

pub use error::{Result, TbsError};
pub use tape::{Graph, OpKind, Var};
pub use tensor::{Scalar, Tensor};
