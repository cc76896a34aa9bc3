//! Transformer-based RGB-D salient object detection at desk scale.
//!
//! The crate is layered bottom-up:
//!
//! * [`tensor`] and [`autodiff`]: dense tensors and a tape-based reverse-mode
//!   autodiff engine, generic over `f32`/`f64`.
//! * [`attention`] and [`decoder`]: efficient attention, multi-head wrapping,
//!   sine positional encodings and the transformer decoder block.
//! * [`twfem`], [`tffm`] and [`model`]: within-modality cross-scale
//!   enhancement, global multi-scale multi-modal fusion, the two-stream
//!   backbone and checkpointing.
//! * [`metrics`]: MAE, adaptive F-measure, S-measure and E-measure.
//! * [`harness`]: synthetic data, training, evaluation, ablations and the
//!   gradient-check suite behind the CLI.

pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod decoder;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod tffm;
pub mod twfem;

pub use autodiff::{Axis, Gradients, Tape, Var};
pub use error::{Error, Result};
pub use model::{Enhancement, Model, ModelConfig, Predictions};
pub use params::{ParamId, ParamStore};
pub use tensor::{Element, Tensor};
