//! Differentiable primitives. Each submodule adds its operations to
//! [`Graph`](crate::graph::Graph) and supplies the matching backward rule.

pub mod basic;
pub mod conv;
pub mod interp;
pub mod loss;
pub mod norm;
pub mod pool;
pub mod stereo;

pub use conv::ConvGeom;
pub use loss::{smooth_l1, smooth_l1_grad};
pub use norm::{BatchStats, NormMode};
