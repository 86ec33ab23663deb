//! Ground-truth construction and evaluation for multi-layer optical flow and
//! stereo benchmarks.
//!
//! The crate covers camera geometry, calibration and rectification, tag-based
//! annotation of real captures, procedural scenes with a layered path tracer
//! for synthetic ground truth, multi-layer metrics, and prediction tooling.

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod annotation;
pub mod calibration;
pub mod formats;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod prediction;
pub mod render;
pub mod scene;
pub mod synth;

pub use annotation::AnnotationError;
pub use calibration::CalibrationError;
pub use formats::FormatError;
pub use geometry::GeometryError;
pub use metrics::MetricsError;
pub use prediction::PredictionError;
pub use render::RenderError;
pub use scene::SceneError;

/// Any domain error raised by the crate, with a stable machine-readable code.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error(transparent)]
    Annotation(#[from] AnnotationError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Prediction(#[from] PredictionError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl Error {
    pub fn code(&self) -> &'static str {
        match self {
            Error::Geometry(e) => e.code(),
            Error::Calibration(e) => e.code(),
            Error::Annotation(e) => e.code(),
            Error::Scene(e) => e.code(),
            Error::Render(e) => e.code(),
            Error::Metrics(e) => e.code(),
            Error::Prediction(e) => e.code(),
            Error::Format(e) => e.code(),
            Error::Io { .. } => "Io",
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().display().to_string(), source }
    }
}
