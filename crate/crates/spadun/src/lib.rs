//! Video snapshot compressive sensing toolkit.
//!
//! A single exposure captures `c` video frames as one 2-D measurement by
//! modulating each frame with a binary mask and summing over time. This
//! crate simulates that capture, reconstructs the frames with an
//! ADMM-unfolded solver whose per-stage prior is either a mask-guided U-net
//! (trainable on the built-in autodiff core) or a total-variation denoiser
//! (training-free baseline), and ships the metrics, file formats, and
//! evaluation harness around it.
//!
//! Start from the runnable examples: `capture_basics`, `autodiff_basics`,
//! `tv_baseline`, `train_toy`, `reconstruct_learned`, `eval_grid`,
//! `mask_attention`.

pub mod checkpoint;
pub mod classic;
pub mod cli;
pub mod metrics;
pub mod net;
pub mod npy;
pub mod sampling;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod unfold;

pub use tensor::{DType, Parameter, Tensor, TensorError};
