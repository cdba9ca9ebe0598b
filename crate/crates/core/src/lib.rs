//! Camera-based cardiac pulse measurement.
//!
//! * [`demix`]: classical pulse extraction (POS, CHROM, FastICA) and pseudo labels
//! * [`sigproc`]: band-pass filtering, spectral heart rate, evaluation metrics
//! * [`tensor`]: a small autodiff tensor library
//! * [`tscan`]: two-branch attention network with temporal shift
//! * [`meta`]: pretraining, first-order MAML meta-training and per-subject adaptation
//! * [`synth`]: synthetic skin-reflection video generator with known ground truth
//! * [`harness`]: dataset I/O, experiments and reports

pub mod demix;
pub mod error;
pub mod harness;
pub mod meta;
pub mod sigproc;
pub mod synth;
pub mod tensor;
pub mod tscan;
mod types;

pub use error::{Error, Result};
pub use types::{FrameSequence, PulseTrace, SkinType};
