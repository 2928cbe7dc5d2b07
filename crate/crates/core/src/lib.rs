//! Heatmap-based, NMS-free object detection with a difficulty-weighted
//! focal loss.
//!
//! The crate covers the whole toy pipeline: a small reverse-mode autodiff
//! engine ([`tensor`]), box geometry, Gaussian target rendering, peak
//! decoding, the per-image difficulty score, focal losses and the class
//! alpha table, a CSP/SPP toy backbone, a deterministic trainer, detection
//! metrics and dataset tooling (tiling, class mapping, synthetic data).
//!
//! Work that fans out over images goes through [`par`], which uses rayon
//! with the default `parallel` feature and plain iteration without it.

pub mod backbone;
pub mod benchkit;
pub mod checks;
pub mod data;
pub mod decoder;
pub mod difficulty;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod loss;
pub mod nms;
pub mod par;
pub mod svg;
pub mod targets;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use geometry::{iou, Annotation, BBox, Detection};
pub use tensor::{Tape, Tensor, Var};
