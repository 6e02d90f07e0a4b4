//! Reverse-mode gradient engine, neural-network layers and the Adam optimizer.

pub mod adam;
pub mod check;
pub mod conv;
pub mod graph;
pub mod kernels;
pub mod nn;
pub mod sparse;

pub use adam::Adam;
pub use check::{check_gradients, GradCheckOptions, GradCheckReport};
pub use conv::ConvGeometry;
pub use graph::{BatchNormMode, BatchStats, Gradients, Graph, Var};
pub use nn::{Mode, ParamId, ParamStore, Session};
pub use sparse::CsrMatrix;
