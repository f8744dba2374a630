//! Cross-view multi-object geo-localization.
//!
//! Given a ground-level query image with one click per object of interest
//! and a top-down reference image, predict one box per click in the
//! reference image. The pipeline is:
//!
//! - [`encoders`]: stride-16 feature extractors for both views,
//! - [`mope`]: one-hot impulse masks turn each click into a query vector,
//! - [`cvmf`]: cosine attention of each query vector over the reference
//!   grid, attention-weighted fusion and a grid detection head,
//! - [`objective`]: confidence, regression and attention-separation losses,
//! - [`eval`]: IoU, `acc@t`, per-image `accI@t` and the patch-retrieval protocol,
//! - [`train`]: training loop, checkpoints, ablations and reports.
//!
//! [`data`] generates synthetic aligned (V1) and crop/flip/scale (V2) pairs.

pub mod autograd;
pub mod config;
pub mod cvmf;
pub mod data;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gradcheck;
pub mod model;
pub mod mope;
pub mod objective;
pub mod params;
pub mod tensor;
pub mod train;
pub mod viz;

pub use error::{Error, Result};
pub use geometry::{iou, BBox, ClickPoint};
pub use tensor::Tensor;
