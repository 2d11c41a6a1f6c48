//! Universal undersampled MRI reconstruction.
//!
//! A five-cascade convolutional network with interleaved data-consistency
//! blocks, extended with anatomy-specific instance normalization (per-anatomy
//! affine pairs over shared instance statistics) and trained through a
//! four-stage pipeline:
//!
//! 1. independent single-anatomy models,
//! 2. universal pre-training with round-robin anatomy batches,
//! 3. attention-transfer distillation from the independent models,
//! 4. adaptation to a new anatomy by training only a freshly inserted affine set.
//!
//! Everything runs on the CPU in plain `f32` (training) or `f64` (gradient
//! checks); the model code is generic over [`Real`].

pub mod distill;
pub mod error;
pub mod io_store;
pub mod kspace;
pub mod metrics;
pub mod phantom_data;
pub mod recon_net;
pub mod report;
pub mod scalar;
pub mod train_pipeline;

pub use error::{Error, Result};
pub use kspace::{DcMode, ImageTensor, KSpaceTensor, SamplingMask};
pub use recon_net::{Activation, Architecture, AspinBank, CascadeModel, ParamScope};
pub use scalar::Real;
