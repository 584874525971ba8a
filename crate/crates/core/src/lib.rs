//! Joint cine motion estimation, anatomy propagation and myocardial
//! pathology (scar / edema) segmentation, with the evaluation metrics,
//! chord-based transmurality quantification and a synthetic cine phantom
//! that serves as ground truth.

pub mod error;
pub mod grid;
pub mod anatomy;
pub mod io;
pub mod loss;
pub mod manifest;
pub mod metrics;
pub mod motion;
pub mod pathology;
mod optim;
pub mod phantom;
pub mod pipeline;
pub mod transmurality;

pub use error::{Error, Result};
pub use grid::{
    bilinear_sample, field_gradient, warp_image, warp_labelmap, CineSequence, DisplacementField,
    FieldJacobian, Image2D, LabelMap, Spacing,
};
