//! Kernel conditional-dependence screening, cross-validated discrete
//! bandwidth refinement and dimension-reduced doubly robust ATE estimation.

pub mod causal;
pub mod cde;
pub mod cv;
pub mod data;
pub mod dependence;
pub mod error;
pub mod io;
pub mod kernel;
pub mod screening;
pub mod simulate;
mod par;
pub mod stats;

pub use data::{Column, ColumnKind, Dataset, Role};
pub use error::{Error, ErrorClass, Result};
pub use kernel::{Bandwidth, Kernel, KernelFamily, KernelSpec, Smoothing, WeightMatrix};
