//! Elastic-net multiple kernel learning for SVM classification and kernel
//! ridge regression.
//!
//! The crate is organized bottom-up:
//!
//! - [`kernel`]: grouped datasets, linear kernels, centering and normalization.
//! - [`solvers`]: SMO for the SVM dual and the regularized KRR solve.
//! - [`mkl`]: the alternating elastic-net trainers, objectives and primal recovery.
//! - [`evaluation`]: metrics, fold plans and nested cross-validation.
//! - [`io`]: CSV/JSON/binary file formats with atomic writes.

pub mod error;
pub mod evaluation;
pub mod io;
pub mod kernel;
pub mod mkl;
pub mod solvers;
pub mod task;

pub use error::{MklError, Result};
pub use kernel::{GroupedDataset, KernelMatrix, KernelStack};
pub use mkl::MklModel;
pub use task::{Targets, Task};
