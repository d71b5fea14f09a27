//! Closed-loop-feedback crack segmentation.
//!
//! A U-shaped segmentation network with attention decoders and deep
//! supervision, an adversarial critic trained against it with a multi-scale
//! L1 feature loss, and a tolerance-aware evaluation engine (Pr/Re/F1, ODS,
//! OIS).
//!
//! The crate is `no_std` (it needs `alloc`). Everything is computed in `f64`
//! on a small reverse-mode autodiff tape ([`graph::Graph`]); file formats,
//! image decoding and the command line live in the `crackclf` crate.
#![no_std]

extern crate alloc;
#[cfg(feature = "std")]
extern crate std;

pub mod adversary;
pub mod attention;
pub mod complexity;
mod error;
pub mod graph;
mod kernels;
mod linalg;
pub mod mask;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod segnet;
pub mod supervision;
pub mod synthetic;
pub mod tensor;
pub mod toy;
pub mod trainer;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, StoreHandle, Var};

pub use mask::{BinaryMask, ProbabilityMap};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
