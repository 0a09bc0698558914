//! Anchor-free six-keypoint vertebra detection on the mid-sagittal image.
//!
//! Every pixel of the sagittal grid is an anchor. A detection field carries
//! a per-pixel objectness and twelve offsets, the six keypoints encoded
//! relative to the pixel center. Candidates above the objectness threshold
//! are decoded and reduced with butterfly-IoU non-maximum suppression.
//!
//! Sagittal coordinates are `(x, y)` in mm where `x` grows posteriorly and
//! `y` grows superiorly along the straightened spine.

mod butterfly;
mod encoding;
mod loss;
mod nms;
mod oracle;
mod targets;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::P2;
use crate::volume::Image2;

pub use butterfly::{biou, biou_detailed, butterfly, Biou, Butterfly, RASTER_STEP_MM};
pub use encoding::{decode, decode_field, encode};
pub use loss::{detection_loss, DetectionLoss, LossConfig, RegressionNormalizer};
pub(crate) use loss::bce;
pub use nms::{nms, NmsConfig};
pub use oracle::{oracle_predictor, OracleDetector};
pub use targets::{make_targets, TargetVertebra, DEFAULT_OBJECTNESS_RADIUS_MM};

pub const N_KEYPOINTS: usize = 6;
pub const N_OFFSETS: usize = 2 * N_KEYPOINTS;

/// Keypoint slots in serialization order.
pub const ANTERIOR_TOP: usize = 0;
pub const MIDDLE_TOP: usize = 1;
pub const POSTERIOR_TOP: usize = 2;
pub const POSTERIOR_BOTTOM: usize = 3;
pub const MIDDLE_BOTTOM: usize = 4;
pub const ANTERIOR_BOTTOM: usize = 5;

/// (top, bottom) slot pairs for the anterior, middle and posterior segments.
pub const SEGMENTS: [(usize, usize); 3] = [
    (ANTERIOR_TOP, ANTERIOR_BOTTOM),
    (MIDDLE_TOP, MIDDLE_BOTTOM),
    (POSTERIOR_TOP, POSTERIOR_BOTTOM),
];

/// The six Genant keypoints of one vertebral body.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VertebraKeypoints {
    pub points: [P2; N_KEYPOINTS],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

impl VertebraKeypoints {
    pub fn new(points: [P2; N_KEYPOINTS]) -> Self {
        Self { points, label: None }
    }

    /// Builds keypoints from the anterior/middle/posterior `x` positions and
    /// per-column `[top_y, bottom_y]`.
    pub fn from_columns(xs: [f64; 3], columns: [[f64; 2]; 3]) -> Self {
        let [a, m, p] = columns;
        Self::new([
            [xs[0], a[0]],
            [xs[1], m[0]],
            [xs[2], p[0]],
            [xs[2], p[1]],
            [xs[1], m[1]],
            [xs[0], a[1]],
        ])
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = Some(label.into());
        self
    }

    pub fn centroid(&self) -> P2 {
        let (sx, sy) = self
            .points
            .iter()
            .fold((0.0, 0.0), |(sx, sy), p| (sx + p[0], sy + p[1]));
        [sx / N_KEYPOINTS as f64, sy / N_KEYPOINTS as f64]
    }

    /// Segment lengths without validation.
    pub fn raw_heights(&self) -> [f64; 3] {
        SEGMENTS.map(|(t, b)| {
            let (p, q) = (self.points[t], self.points[b]);
            (p[0] - q[0]).hypot(p[1] - q[1])
        })
    }

    pub fn translated(&self, d: P2) -> Self {
        Self {
            points: self.points.map(|p| [p[0] + d[0], p[1] + d[1]]),
            label: self.label.clone(),
        }
    }

    /// Checks finiteness, top-above-bottom ordering and butterfly validity.
    pub fn validate(&self) -> Result<()> {
        if self.points.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::Degenerate("non-finite keypoint".into()));
        }
        for (name, (t, b)) in ["anterior", "middle", "posterior"].iter().zip(SEGMENTS) {
            if !(self.points[t][1] > self.points[b][1]) {
                return Err(Error::Degenerate(format!("{name} top keypoint is not above its bottom keypoint")));
            }
        }
        let shape = butterfly(self);
        if shape.degenerate {
            return Err(Error::Degenerate("butterfly quadrilateral is self-intersecting or flat".into()));
        }
        Ok(())
    }

    pub fn is_degenerate(&self) -> bool {
        self.validate().is_err()
    }
}

/// Geometry of a 2D pixel grid; pixel `(i, j)` is centered at
/// `origin + (i, j) ⊙ spacing`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid2 {
    pub shape: [usize; 2],
    pub spacing: [f64; 2],
    pub origin: [f64; 2],
}

impl Grid2 {
    pub fn of_image(img: &Image2) -> Self {
        Self {
            shape: img.shape,
            spacing: img.spacing,
            origin: img.origin,
        }
    }

    pub fn len(&self) -> usize {
        self.shape[0] * self.shape[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn anchor(&self, idx: usize) -> P2 {
        let (i, j) = (idx % self.shape[0], idx / self.shape[0]);
        [
            self.origin[0] + i as f64 * self.spacing[0],
            self.origin[1] + j as f64 * self.spacing[1],
        ]
    }

    pub fn pixel(&self, idx: usize) -> [usize; 2] {
        [idx % self.shape[0], idx / self.shape[0]]
    }

    pub fn linear(&self, pixel: [usize; 2]) -> usize {
        pixel[1] * self.shape[0] + pixel[0]
    }
}

/// Dense network-shaped output: objectness and encoded offsets per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionField {
    pub grid: Grid2,
    pub objectness: Vec<f64>,
    pub offsets: Vec<[f64; N_OFFSETS]>,
}

impl DetectionField {
    pub fn new(grid: Grid2, objectness: Vec<f64>, offsets: Vec<[f64; N_OFFSETS]>) -> Result<Self> {
        if objectness.len() != grid.len() || offsets.len() != grid.len() {
            return Err(Error::Invalid(format!(
                "field sizes ({}, {}) do not match grid {:?}",
                objectness.len(),
                offsets.len(),
                grid.shape
            )));
        }
        if objectness.iter().any(|o| !(0.0..=1.0).contains(o)) {
            return Err(Error::Invalid("objectness must lie in [0, 1]".into()));
        }
        Ok(Self {
            grid,
            objectness,
            offsets,
        })
    }

    /// Splits the field into an objectness image and twelve offset images.
    pub fn to_images(&self) -> (Image2, Vec<Image2>) {
        let img = |data: Vec<f32>| Image2 {
            data,
            shape: self.grid.shape,
            spacing: self.grid.spacing,
            origin: self.grid.origin,
        };
        let obj = img(self.objectness.iter().map(|&o| o as f32).collect());
        let channels = (0..N_OFFSETS)
            .map(|c| img(self.offsets.iter().map(|e| e[c] as f32).collect()))
            .collect();
        (obj, channels)
    }

    pub fn from_images(objectness: &Image2, channels: &[Image2]) -> Result<Self> {
        if channels.len() != N_OFFSETS {
            return Err(Error::Invalid(format!("expected {N_OFFSETS} offset channels, got {}", channels.len())));
        }
        let grid = Grid2::of_image(objectness);
        if channels.iter().any(|c| Grid2::of_image(c) != grid) {
            return Err(Error::Invalid("offset channels do not share the objectness grid".into()));
        }
        let offsets = (0..grid.len())
            .map(|p| std::array::from_fn(|c| channels[c].data[p] as f64))
            .collect();
        Self::new(grid, objectness.data.iter().map(|&o| o as f64).collect(), offsets)
    }
}

/// Training target for one sagittal image.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetField {
    pub grid: Grid2,
    pub objectness: Vec<bool>,
    pub offsets: Vec<[f64; N_OFFSETS]>,
    pub genant: Vec<f64>,
    /// Index of the vertebra owning each positive pixel.
    pub owner: Vec<Option<usize>>,
}

impl TargetField {
    pub fn positive_count(&self) -> usize {
        self.objectness.iter().filter(|&&o| o).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "keypoints_mm")]
    pub points: [P2; N_KEYPOINTS],
    pub score: f64,
    /// Source pixel `(i, j)`.
    pub anchor: [usize; 2],
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub degenerate: bool,
}

impl Detection {
    pub fn keypoints(&self) -> VertebraKeypoints {
        VertebraKeypoints::new(self.points)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DetectionSet {
    pub detections: Vec<Detection>,
}

/// Stand-in for a trained detection network.
pub trait DetectionPredictor: Sync {
    fn predict(&self, image: &Image2) -> Result<DetectionField>;
}
