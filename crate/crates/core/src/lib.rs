//! Cross-form pyramid stereo matching network (CFP-Net) on a small,
//! self-contained reverse-mode autodiff core.

pub mod backbone;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod matcher;
pub mod model;
pub mod nn;
pub mod objective;
pub mod ops;
pub mod optim;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use matcher::DisparityMap;
pub use model::{Network, Summary};
pub use nn::{ModelState, Mode};
pub use tensor::{Real, Tensor};
