//! Spine localization post-processing.
//!
//! A probability volume (one value per voxel, "near the vertebral column")
//! is reduced to a [`SpineCurve`]: per-slice soft-argmax coordinates plus a
//! z validity interval obtained by thresholding slice-level probabilities at
//! 0.5 and taking the 1D convex hull of the surviving slices.

mod heuristic;
mod interp;
mod loss;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{AxialSlice, Volume};

pub use heuristic::{heuristic_probability_map, HeuristicLocator};
pub use interp::{interpolate_centroid_curve, pchip_slopes, CurveTarget};
pub use loss::{localization_loss, LocalizationLoss};

pub const LIMIT_THRESHOLD: f64 = 0.5;

/// Extrapolation used for datasets whose annotations stop short of the
/// visible spine.
pub const VERSE_EXTRAPOLATION_MM: f64 = 20.0;

/// One world-mm point per axial slice plus the z validity interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpineCurve {
    #[serde(rename = "points_mm")]
    pub points: Vec<[f64; 3]>,
    #[serde(rename = "limits_mm")]
    pub limits: [f64; 2],
}

impl SpineCurve {
    pub fn new(points: Vec<[f64; 3]>, limits: [f64; 2]) -> Result<Self> {
        let c = Self { points, limits };
        c.validate()?;
        Ok(c)
    }

    /// Checks finiteness, a constant positive z step and ordered limits.
    pub fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::Curve("curve has no points".into()));
        }
        if self.points.iter().flatten().chain(&self.limits).any(|c| !c.is_finite()) {
            return Err(Error::Curve("non-finite coordinate".into()));
        }
        if self.limits[0] > self.limits[1] {
            return Err(Error::Curve(format!("limits {:?} are reversed", self.limits)));
        }
        if self.points.len() >= 2 {
            let step = self.points[1][2] - self.points[0][2];
            if !(step > 0.0) {
                return Err(Error::Curve("z must be strictly increasing".into()));
            }
            let tol = 1e-6 * step.max(1.0);
            if self.points.windows(2).any(|w| ((w[1][2] - w[0][2]) - step).abs() > tol) {
                return Err(Error::Curve("z step is not constant".into()));
            }
        }
        Ok(())
    }

    pub fn z_step(&self) -> Option<f64> {
        (self.points.len() >= 2).then(|| self.points[1][2] - self.points[0][2])
    }

    /// Curve position at height `z`, linear between points and along the
    /// end segments beyond them.
    pub fn position_at(&self, z: f64) -> [f64; 3] {
        let n = self.points.len();
        if n == 1 {
            let p = self.points[0];
            return [p[0], p[1], z];
        }
        let step = self.points[1][2] - self.points[0][2];
        let t = (z - self.points[0][2]) / step;
        let k = (t.floor().max(0.0) as usize).min(n - 2);
        let f = t - k as f64;
        let (a, b) = (self.points[k], self.points[k + 1]);
        [a[0] + f * (b[0] - a[0]), a[1] + f * (b[1] - a[1]), z]
    }

    /// The polyline restricted to the limits, with interpolated endpoints
    /// exactly at the limits.
    pub fn cropped_polyline(&self) -> Vec<[f64; 3]> {
        let [lo, hi] = self.limits;
        let mut out = vec![self.position_at(lo)];
        out.extend(self.points.iter().filter(|p| p[2] > lo + 1e-9 && p[2] < hi - 1e-9).copied());
        if hi > lo {
            out.push(self.position_at(hi));
        }
        out
    }

    /// Rigid z translation of points and limits.
    pub fn shifted_z(&self, dz: f64) -> Self {
        Self {
            points: self.points.iter().map(|p| [p[0], p[1], p[2] + dz]).collect(),
            limits: [self.limits[0] + dz, self.limits[1] + dz],
        }
    }
}

/// Per-slice probabilities of containing the spine.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceProbabilities(Vec<f64>);

impl SliceProbabilities {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Invalid("slice probabilities must lie in [0, 1]".into()));
        }
        Ok(Self(values))
    }

    /// Slice-wise maximum of a probability volume.
    pub fn from_volume_max(prob: &Volume) -> Self {
        let nz = prob.shape()[2];
        Self(
            (0..nz)
                .map(|k| prob.slice_data(k).iter().fold(0.0f64, |m, &v| m.max(v as f64)).clamp(0.0, 1.0))
                .collect(),
        )
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

/// Normalization used by the soft-argmax.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SoftArgmaxMode {
    /// Weights are the probabilities divided by their sum.
    #[default]
    Normalize,
    /// Spatial softmax of the probability logits at a temperature.
    Softmax { temperature: f64 },
}

fn slice_weighted_center(data: &[f32], nx: usize, weight: impl Fn(f64) -> f64) -> Option<[f64; 2]> {
    let (mut sw, mut si, mut sj) = (0.0, 0.0, 0.0);
    for (idx, &v) in data.iter().enumerate() {
        let w = weight(v as f64);
        if w != 0.0 {
            sw += w;
            si += w * (idx % nx) as f64;
            sj += w * (idx / nx) as f64;
        }
    }
    (sw > 0.0).then(|| [si / sw, sj / sw])
}

fn soft_argmax_raw(data: &[f32], shape: [usize; 2], spacing: [f64; 2], origin: [f64; 2], mode: SoftArgmaxMode) -> Result<Option<[f64; 2]>> {
    if data.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::Invalid("probability slice has negative or non-finite values".into()));
    }
    let center = match mode {
        SoftArgmaxMode::Normalize => slice_weighted_center(data, shape[0], |p| p),
        SoftArgmaxMode::Softmax { temperature } => {
            if !(temperature > 0.0) {
                return Err(Error::Invalid("softmax temperature must be positive".into()));
            }
            let logit = |p: f64| {
                let p = p.clamp(1e-7, 1.0 - 1e-7);
                (p / (1.0 - p)).ln() / temperature
            };
            let max = data.iter().map(|&p| logit(p as f64)).fold(f64::NEG_INFINITY, f64::max);
            slice_weighted_center(data, shape[0], |p| (logit(p) - max).exp())
        }
    };
    Ok(center.map(|[i, j]| [origin[0] + i * spacing[0], origin[1] + j * spacing[1]]))
}

/// Probability-weighted mean pixel center of an axial slice, in world mm.
pub fn soft_argmax_2d(slice: &AxialSlice, mode: SoftArgmaxMode) -> Result<[f64; 2]> {
    let img = &slice.image;
    soft_argmax_raw(&img.data, img.shape, img.spacing, img.origin, mode)?.ok_or(Error::EmptySlice(slice.z_index))
}

fn hull_indices(p: &SliceProbabilities) -> Result<(usize, usize)> {
    let above = |v: &f64| *v >= LIMIT_THRESHOLD;
    let lo = p.0.iter().position(above).ok_or(Error::SpineNotFound(LIMIT_THRESHOLD))?;
    let hi = p.0.iter().rposition(above).expect("found above");
    Ok((lo, hi))
}

/// z interval spanned by all slices with probability at least 0.5.
pub fn limits_from_probabilities(p: &SliceProbabilities, z_grid: &[f64]) -> Result<[f64; 2]> {
    if z_grid.len() != p.0.len() {
        return Err(Error::Invalid(format!(
            "{} probabilities for {} z positions",
            p.0.len(),
            z_grid.len()
        )));
    }
    let (lo, hi) = hull_indices(p)?;
    Ok([z_grid[lo], z_grid[hi]])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LocalizeConfig {
    pub extrapolate_mm: f64,
    pub soft_argmax: SoftArgmaxMode,
}

impl Default for LocalizeConfig {
    fn default() -> Self {
        Self {
            extrapolate_mm: 0.0,
            soft_argmax: SoftArgmaxMode::Normalize,
        }
    }
}

/// Reduces a probability volume to a cropped (and optionally extrapolated)
/// spine curve.
///
/// Slices inside the limits whose map is empty take the linear
/// interpolation of their nearest non-empty neighbours.
pub fn localize(prob: &Volume, cfg: &LocalizeConfig) -> Result<SpineCurve> {
    if !(cfg.extrapolate_mm >= 0.0 && cfg.extrapolate_mm.is_finite()) {
        return Err(Error::Invalid(format!("extrapolation must be non-negative, got {}", cfg.extrapolate_mm)));
    }
    let probs = SliceProbabilities::from_volume_max(prob);
    let (lo, hi) = hull_indices(&probs)?;
    let [nx, ny, _] = prob.shape();
    let sp = prob.spacing();
    let org = prob.origin();
    let centers = (lo..=hi)
        .into_par_iter()
        .map(|k| soft_argmax_raw(prob.slice_data(k), [nx, ny], [sp[0], sp[1]], [org[0], org[1]], cfg.soft_argmax))
        .collect::<Result<Vec<_>>>()?;
    let known: Vec<usize> = (0..centers.len()).filter(|&i| centers[i].is_some()).collect();
    if known.is_empty() {
        return Err(Error::EmptySlice(lo));
    }
    let z = |k: usize| org[2] + k as f64 * sp[2];
    let mut points = Vec::with_capacity(centers.len());
    for (i, c) in centers.iter().enumerate() {
        let xy = match c {
            Some(xy) => *xy,
            None => {
                let next = known.partition_point(|&k| k < i);
                match (next.checked_sub(1).map(|p| known[p]), known.get(next)) {
                    (Some(a), Some(&b)) => {
                        let (pa, pb) = (centers[a].unwrap(), centers[b].unwrap());
                        let f = (i - a) as f64 / (b - a) as f64;
                        [pa[0] + f * (pb[0] - pa[0]), pa[1] + f * (pb[1] - pa[1])]
                    }
                    (Some(a), None) => centers[a].unwrap(),
                    (None, Some(&b)) => centers[b].unwrap(),
                    (None, None) => unreachable!(),
                }
            }
        };
        points.push([xy[0], xy[1], z(lo + i)]);
    }
    let curve = SpineCurve {
        points,
        limits: [z(lo), z(hi)],
    };
    Ok(extrapolate(curve, cfg.extrapolate_mm, sp[2]))
}

/// Extends both ends of the curve by `mm` along the end segments.
pub fn extrapolate(curve: SpineCurve, mm: f64, z_step: f64) -> SpineCurve {
    if mm <= 0.0 {
        return curve;
    }
    let n_ext = (mm / z_step - 1e-9).ceil() as usize;
    let pts = &curve.points;
    let dir = |a: [f64; 3], b: [f64; 3]| [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let (d_lo, d_hi) = if pts.len() >= 2 {
        (dir(pts[1], pts[0]), dir(pts[pts.len() - 2], pts[pts.len() - 1]))
    } else {
        ([0.0, 0.0, -z_step], [0.0, 0.0, z_step])
    };
    let first = pts[0];
    let last = *pts.last().unwrap();
    let mut points: Vec<[f64; 3]> = (1..=n_ext)
        .rev()
        .map(|m| {
            let m = m as f64;
            [first[0] + m * d_lo[0], first[1] + m * d_lo[1], first[2] - m * z_step]
        })
        .collect();
    points.extend_from_slice(pts);
    points.extend((1..=n_ext).map(|m| {
        let m = m as f64;
        [last[0] + m * d_hi[0], last[1] + m * d_hi[1], last[2] + m * z_step]
    }));
    SpineCurve {
        points,
        limits: [curve.limits[0] - mm, curve.limits[1] + mm],
    }
}

/// Stand-in for the localization network: maps a preprocessed volume to a
/// per-voxel spine probability volume on the same grid.
pub trait ProbabilityPredictor: Sync {
    fn predict(&self, volume: &Volume) -> Result<Volume>;
}
