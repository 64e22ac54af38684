//! Differentiable self-supervised structure from motion.
//!
//! The crate recovers per-pixel depth, relative camera motion and pinhole
//! intrinsics from short image sequences by minimizing a photometric
//! view-synthesis objective with reverse-mode gradients. It also ships the
//! evaluation protocols used to score the results (Eigen depth metrics,
//! absolute trajectory error, intrinsics statistics) and the file formats
//! that tie the pieces together.

pub mod autodiff;
pub mod camera;
pub mod error;
pub mod experiment;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod scene;
pub mod subpixel;
pub mod tensor;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{PadMode, Tensor};
