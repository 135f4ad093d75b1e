//! Crowd-counting toolkit built around multi-level density targets.
//!
//! Point annotations are converted into a stack of density maps whose
//! Gaussian bandwidths tighten as the level index grows, ending in a
//! discrete localization map. A decomposable training objective scores a
//! predicted stack against its target level by level plus a count term, and
//! a small convolutional regressor plus evaluation metrics (counting error,
//! map fidelity, localization precision-recall) close the loop from
//! synthetic scene generation to scored predictions.

pub mod annotations;
pub mod density;
pub mod eval;
pub mod loss;
pub mod model;
pub mod raster;
pub mod sampling;

mod kdtree;
