//! Occlusion-robust body mesh sequence reconstruction on a small, self-contained
//! numerical stack.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] and [`autodiff`]: dense `f64` tensors, a reverse-mode tape and
//!   finite-difference gradient checking.
//! * [`graph`]: body mesh topology, normalized adjacency, graph convolution and
//!   coarse/fine resampling.
//! * [`diffusion`]: noise schedules, forward/reverse steps, latent video layouts
//!   and the temporally aligned diffusion block.
//! * [`loss`]: stable log-softmax, part-wise KL and the hierarchical part loss.
//! * [`metrics`]: MPVPE, MPJPE and Procrustes-aligned MPJPE.
//! * [`synth`]: deterministic articulated motion with occlusion and blur.
//! * [`harness`]: model assembly, training, evaluation and the ablation grid.
//!
//! ```
//! use tempograph::autodiff::Tape;
//! use tempograph::tensor::Tensor;
//!
//! let mut tape = Tape::new();
//! let a = tape.var(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]])?);
//! let b = tape.constant(Tensor::from_rows(&[&[0.0], &[1.0]])?);
//! let c = tape.matmul(a, b)?;
//! assert_eq!(tape.value(c).data(), &[2.0, 4.0]);
//!
//! let loss = tape.sum(c)?;
//! let grads = tape.backward(loss)?;
//! assert_eq!(grads.wrt(&tape, a).data(), &[0.0, 1.0, 0.0, 1.0]);
//! # Ok::<(), tempograph::tensor::TensorError>(())
//! ```

pub mod autodiff;
pub mod diffusion;
pub mod graph;
pub mod harness;
pub mod loss;
pub mod metrics;
pub mod nn;
pub mod synth;
pub mod tensor;

pub use harness::{HarnessError as Error, Result};
