//! Vertebral compression fracture quantification.
//!
//! Pipeline over CT volumes:
//!
//! 1. **Localization**: a per-voxel spine probability map is reduced to a
//!    3D spine curve with a z validity interval ([`locator`]).
//! 2. **Straightening**: the volume is resampled on planes orthogonal to the
//!    curve, producing a straightened volume and its mid-sagittal image
//!    ([`straighten`]).
//! 3. **Detection**: anchor-free six-keypoint vertebra detection with
//!    butterfly-IoU non-maximum suppression ([`detector`]).
//! 4. **Grading**: Genant heights, index and grade per vertebra and per
//!    patient ([`grading`]).
//!
//! Learned predictors are replaced by the [`locator::heuristic_probability_map`]
//! and the ground-truth oracles fed by [`phantom`] volumes. [`evaluation`]
//! implements matching and the detection/classification metrics.

pub mod detector;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod grading;
pub mod io;
pub mod locator;
pub mod overlay;
pub mod phantom;
pub mod pipeline;
pub mod straighten;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{AxialSlice, Image2, Volume};
