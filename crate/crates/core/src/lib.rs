//! Frequency-domain analysis, spectral alignment of forged images, and a
//! desk-scale harness for testing forgery detectors against it.

// Negated comparisons also reject NaN; index loops mirror the maths in numeric kernels.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

/// Library version recorded in run records and model metadata.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub mod alignment;
pub mod detector;
pub mod error;
pub mod image;
pub mod io;
pub mod lab;
pub mod metrics;
pub mod nn;
pub mod rdc;
pub mod spectral;

pub use alignment::{AlignConfig, AlignPipeline, Aligner, PowerLawFit, RescaleMode};
pub use detector::{
    Defense, DefenseProtocol, Detector, DetectorKind, ExperimentReport, LabeledImage,
};
pub use error::{Error, Result};
pub use image::Image;
pub use lab::{PerturbKind, PerturbSpec, SynthKind, SynthSpec};
pub use metrics::{Label, MetricsReport};
pub use nn::Tensor;
pub use rdc::{RdcModel, RdcTrainConfig};
pub use spectral::{SpectralProfile, Spectrum};
