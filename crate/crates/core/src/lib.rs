//! Simulated photonic random-projection defense laboratory.
//!
//! The crate models an optical co-processor computing `|U x|^2` behind a
//! sealed interface, a classifier head built around it and trained with
//! direct feedback alignment, an adversarially trained base network whose
//! frozen features feed that head, an attack suite (FGSM, PGD, APGD-CE,
//! APGD-T, Square and their sequential cascade) with differentiable
//! backward approximations, and an idealized matrix-retrieval attack.
//!
//! ```compile_fail
//! // A sealed handle exposes no matrix accessor.
//! let h = ropust::opu::opu_new(4, 8, 1).unwrap();
//! let _ = h.lab_matrix("peek");
//! ```
//!
//! ```compile_fail
//! let h = ropust::opu::opu_new(4, 8, 1).unwrap();
//! let _ = &h.tm;
//! ```
//!
//! ```compile_fail
//! // The black-box attack bound offers no gradient method.
//! use ropust::attacks::Classifier;
//! fn peek<M: Classifier>(m: &M, x: ndarray::ArrayView2<f64>) {
//!     let _ = m.loss_gradient(x, &[0], &[ropust::loss::Loss::CrossEntropy]);
//! }
//! ```

pub mod attacks;
pub mod base;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod dfa;
pub mod error;
pub mod loss;
pub mod model;
pub mod optim;
pub mod opu;
pub mod pipeline;
pub mod report;
pub mod retrieval;
pub mod rng;

pub use error::{Error, Result};
