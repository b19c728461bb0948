//! unseg - a self-contained crack-segmentation engine.
//!
//! Everything runs on the CPU from first principles:
//!
//! 1. **tensor / autograd** - dense NCHW tensors and a reverse-mode tape.
//! 2. **nn / kernels** - conv2d, pooling, upsampling, batch/layer norm, GRN.
//! 3. **encoders** - residual-bottleneck and ConvNeXt-style backbones behind
//!    one trait, registered by preset name.
//! 4. **unet** - standard skip-concatenation decoder plus a 1-channel head.
//! 5. **augment** - joint image+mask transforms behind one trait, composed
//!    into a stochastic pipeline or run one at a time for ablations.
//! 6. **metrics** - confusion counts, Dice / Jaccard / mIoU in both micro
//!    and per-image aggregations.
//! 7. **data** - PNG datasets, deterministic batching, and a synthetic
//!    crack generator for desk-scale experiments.
//! 8. **train** - BCE loss, Adam, cosine annealing, early stopping, and a
//!    versioned binary checkpoint format.
//!
//! The element type is generic: training uses `f32`, gradient checking uses
//! the identical code paths in `f64`.

pub mod augment;
pub mod autograd;
pub mod data;
pub mod elem;
pub mod encoders;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod metrics;
pub mod nn;
pub mod tensor;
pub mod train;
pub mod unet;

pub use autograd::{Gradients, Tape, UpsampleMode, Var};
pub use elem::Element;
pub use error::{Error, Result};
pub use tensor::Tensor;
