//! Synthetic spine CT volumes with exact ground truth.
//!
//! Vertebral bodies are rounded slabs centered on a parametric centerline
//! inside an elliptic soft-tissue torso. Each body has its own frame: `t`
//! is the centerline tangent, `u` the patient-left axis projected off `t`
//! and `v = t × u` (posterior). In that frame the cross-section is a
//! superellipse and the top and bottom surfaces are piecewise linear
//! through the anterior, middle and posterior half-heights, so the six
//! keypoints and the Genant index are exact by construction.

use std::collections::BTreeMap;

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detector::{VertebraKeypoints, N_KEYPOINTS, SEGMENTS};
use crate::error::{Error, Result};
use crate::locator::{ProbabilityPredictor, SpineCurve};
use crate::straighten::StraightenedVolume;
use crate::volume::Volume;

type V3 = Vector3<f64>;

const SUPERELLIPSE_POWER: i32 = 4;
const ARC_TABLE_STEP_MM: f64 = 0.01;
const LABELS: [&str; 24] = [
    "C1", "C2", "C3", "C4", "C5", "C6", "C7", "T1", "T2", "T3", "T4", "T5", "T6", "T7", "T8", "T9", "T10",
    "T11", "T12", "L1", "L2", "L3", "L4", "L5",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FractureType {
    /// Anterior height reduced.
    Wedge,
    /// Middle height reduced.
    Biconcave,
    /// Anterior and middle heights reduced.
    Crush,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Fracture {
    #[serde(rename = "type")]
    pub kind: FractureType,
    pub target_genant: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Intensities {
    pub bone: f32,
    pub soft_tissue: f32,
    pub air: f32,
}

impl Default for Intensities {
    fn default() -> Self {
        Self {
            bone: 700.0,
            soft_tissue: 40.0,
            air: -1000.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub n_vertebrae: usize,
    /// Top-to-bottom body height in mm.
    pub base_height: f64,
    /// Anterior-posterior body extent in mm.
    pub body_width: f64,
    /// Left-right body extent in mm.
    pub body_lateral_width: f64,
    pub gap: f64,
    pub scoliosis_amplitude: f64,
    pub scoliosis_wavelength: f64,
    pub kyphosis_amplitude: f64,
    /// Keyed by vertebra index, counted from the caudal end.
    pub fractures: BTreeMap<usize, Fracture>,
    pub intensities: Intensities,
    pub noise_sigma: f64,
    pub seed: u64,
    pub spacing_mm: [f64; 3],
    /// Air/soft-tissue padding above and below the spine in mm.
    pub margin_mm: f64,
    /// Lateral and anterior-posterior torso semi-axes in mm.
    pub torso_half_axes_mm: [f64; 2],
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            n_vertebrae: 10,
            base_height: 24.0,
            body_width: 30.0,
            body_lateral_width: 36.0,
            gap: 6.0,
            scoliosis_amplitude: 0.0,
            scoliosis_wavelength: 300.0,
            kyphosis_amplitude: 0.0,
            fractures: BTreeMap::new(),
            intensities: Intensities::default(),
            noise_sigma: 20.0,
            seed: 0,
            spacing_mm: [1.0; 3],
            margin_mm: 20.0,
            torso_half_axes_mm: [80.0, 60.0],
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::PhantomSpec(m));
        if self.n_vertebrae < 2 {
            return fail(format!("n_vertebrae must be at least 2, got {}", self.n_vertebrae));
        }
        let positive = [
            ("base_height", self.base_height),
            ("body_width", self.body_width),
            ("body_lateral_width", self.body_lateral_width),
            ("scoliosis_wavelength", self.scoliosis_wavelength),
        ];
        for (name, x) in positive {
            if !(x > 0.0 && x.is_finite()) {
                return fail(format!("{name} must be positive, got {x}"));
            }
        }
        let non_negative = [
            ("gap", self.gap),
            ("noise_sigma", self.noise_sigma),
            ("margin_mm", self.margin_mm),
            ("scoliosis_amplitude", self.scoliosis_amplitude.abs()),
            ("kyphosis_amplitude", self.kyphosis_amplitude.abs()),
        ];
        for (name, x) in non_negative {
            if !(x >= 0.0 && x.is_finite()) {
                return fail(format!("{name} must be non-negative and finite, got {x}"));
            }
        }
        if self.spacing_mm.iter().chain(&self.torso_half_axes_mm).any(|s| !(*s > 0.0 && s.is_finite())) {
            return fail("spacing and torso semi-axes must be positive".into());
        }
        for (&i, f) in &self.fractures {
            if i >= self.n_vertebrae {
                return fail(format!("fracture index {i} outside [0, {})", self.n_vertebrae));
            }
            if !(f.target_genant > 0.0 && f.target_genant <= 1.0) {
                return fail(format!("target genant {} for vertebra {i} outside (0, 1]", f.target_genant));
            }
        }
        Ok(())
    }

    /// Anterior, middle and posterior heights of vertebra `i`.
    pub fn heights(&self, i: usize) -> [f64; 3] {
        let h = self.base_height;
        match self.fractures.get(&i) {
            None => [h; 3],
            Some(f) => {
                let r = f.target_genant * h;
                match f.kind {
                    FractureType::Wedge => [r, h, h],
                    FractureType::Biconcave => [h, r, h],
                    FractureType::Crush => [r, r, h],
                }
            }
        }
    }

    fn nominal_length(&self) -> f64 {
        self.n_vertebrae as f64 * (self.base_height + self.gap)
    }

    /// Centerline offset from the spine axis at height `dz` above its base.
    fn offset(&self, dz: f64) -> [f64; 2] {
        let sc = self.scoliosis_amplitude * (2.0 * std::f64::consts::PI * dz / self.scoliosis_wavelength).sin();
        let ky = self.kyphosis_amplitude * (std::f64::consts::PI * dz / self.nominal_length()).sin();
        [sc, ky]
    }

    fn offset_derivative(&self, dz: f64) -> [f64; 2] {
        let w = 2.0 * std::f64::consts::PI / self.scoliosis_wavelength;
        let l = std::f64::consts::PI / self.nominal_length();
        [
            self.scoliosis_amplitude * w * (w * dz).cos(),
            self.kyphosis_amplitude * l * (l * dz).cos(),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtVertebra {
    pub label: String,
    pub centroid_mm: [f64; 3],
    pub keypoints_mm: [[f64; 3]; N_KEYPOINTS],
    pub genant: f64,
}

impl GtVertebra {
    /// Keypoints in straightened mid-sagittal coordinates `(b, arc)`.
    pub fn sagittal_keypoints(&self, s: &StraightenedVolume) -> Result<VertebraKeypoints> {
        let mut points = [[0.0; 2]; N_KEYPOINTS];
        for (dst, p) in points.iter_mut().zip(&self.keypoints_mm) {
            let q = s.straightened_coords(*p)?;
            *dst = [q[1], q[2]];
        }
        Ok(VertebraKeypoints::new(points).with_label(self.label.clone()))
    }

    pub fn heights(&self) -> [f64; 3] {
        SEGMENTS.map(|(t, b)| (V3::from(self.keypoints_mm[t]) - V3::from(self.keypoints_mm[b])).norm())
    }
}

/// Ground-truth annotation; also the annotation format read by evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub vertebrae: Vec<GtVertebra>,
    pub curve: Vec<[f64; 3]>,
    pub limits_mm: [f64; 2],
}

impl GroundTruth {
    pub fn spine_curve(&self) -> Result<SpineCurve> {
        SpineCurve::new(self.curve.clone(), self.limits_mm)
    }

    pub fn validate(&self) -> Result<()> {
        self.spine_curve()?;
        for v in &self.vertebrae {
            let all = v.keypoints_mm.iter().flatten().chain(&v.centroid_mm).chain(std::iter::once(&v.genant));
            if all.clone().any(|x| !x.is_finite()) {
                return Err(Error::Invalid(format!("vertebra {} has non-finite values", v.label)));
            }
        }
        Ok(())
    }
}

struct Body {
    c: V3,
    t: V3,
    u: V3,
    v: V3,
    /// Half-heights at the anterior, middle and posterior columns.
    half: [f64; 3],
    half_width: f64,
    half_lateral: f64,
    bbox: ([f64; 3], [f64; 3]),
}

impl Body {
    fn top(&self, b: f64) -> f64 {
        let [a, m, p] = self.half;
        let f = (b / self.half_width).clamp(-1.0, 1.0);
        if f < 0.0 {
            m + (a - m) * -f
        } else {
            m + (p - m) * f
        }
    }

    fn contains(&self, p: V3) -> bool {
        if (0..3).any(|k| p[k] < self.bbox.0[k] || p[k] > self.bbox.1[k]) {
            return false;
        }
        let d = p - self.c;
        let (a, b, s) = (d.dot(&self.u), d.dot(&self.v), d.dot(&self.t));
        let e = (a / self.half_lateral).abs().powi(SUPERELLIPSE_POWER) + (b / self.half_width).abs().powi(SUPERELLIPSE_POWER);
        if e > 1.0 {
            return false;
        }
        let top = self.top(b);
        -top <= s && s < top
    }

    fn keypoints(&self) -> [[f64; 3]; N_KEYPOINTS] {
        let w = self.half_width;
        let [a, m, p] = self.half;
        let at = |b: f64, s: f64| {
            let q = self.c + self.v * b + self.t * s;
            [q.x, q.y, q.z]
        };
        [at(-w, a), at(0.0, m), at(w, p), at(w, -p), at(0.0, -m), at(-w, -a)]
    }
}

struct Layout {
    origin: [f64; 3],
    shape: [usize; 3],
    /// World position of the spine axis `(x, y)` and its base height.
    axis: [f64; 3],
    torso_center: [f64; 2],
    z_top: f64,
    bodies: Vec<Body>,
}

fn layout(spec: &PhantomSpec) -> Layout {
    let [tx, ty] = spec.torso_half_axes_mm;
    let sp = spec.spacing_mm;
    // The spine axis sits posterior of the torso center.
    let spine_y = 0.3 * ty;
    let torso_center = [0.0, 0.0];
    let axis_z = 0.0;

    let total_arc = spec.nominal_length();
    // Arc length table of the centerline as a function of height.
    let deriv = |dz: f64| {
        let d = spec.offset_derivative(dz);
        (1.0 + d[0] * d[0] + d[1] * d[1]).sqrt()
    };
    let mut table = vec![(0.0, 0.0)];
    let (mut z, mut s) = (0.0, 0.0);
    while s < total_arc {
        let h = ARC_TABLE_STEP_MM;
        s += h / 6.0 * (deriv(z) + 4.0 * deriv(z + h / 2.0) + deriv(z + h));
        z += h;
        table.push((z, s));
    }
    let z_at_arc = |target: f64| {
        let k = table.partition_point(|&(_, s)| s < target).clamp(1, table.len() - 1);
        let ((z0, s0), (z1, s1)) = (table[k - 1], table[k]);
        z0 + (z1 - z0) * (target - s0) / (s1 - s0)
    };
    let z_top = z_at_arc(total_arc);

    let pitch = spec.base_height + spec.gap;
    let bodies = (0..spec.n_vertebrae)
        .map(|i| {
            let dz = z_at_arc((i as f64 + 0.5) * pitch);
            let off = spec.offset(dz);
            let der = spec.offset_derivative(dz);
            let c = V3::new(off[0], spine_y + off[1], axis_z + dz);
            let t = V3::new(der[0], der[1], 1.0).normalize();
            let u = (V3::x() - t * t.x).normalize();
            let v = t.cross(&u);
            let half = spec.heights(i).map(|h| h / 2.0);
            let (hw, hl) = (spec.body_width / 2.0, spec.body_lateral_width / 2.0);
            let hmax = half.iter().copied().fold(0.0, f64::max);
            let r = (hw * hw + hl * hl + hmax * hmax).sqrt();
            Body {
                c,
                t,
                u,
                v,
                half,
                half_width: hw,
                half_lateral: hl,
                bbox: ([c.x - r, c.y - r, c.z - r], [c.x + r, c.y + r, c.z + r]),
            }
        })
        .collect();

    let amp_x = spec.scoliosis_amplitude.abs();
    let lo = [
        -(tx.max(amp_x + spec.body_lateral_width)) - 10.0,
        -ty - 10.0,
        axis_z - spec.margin_mm,
    ];
    let hi = [-lo[0], ty + 10.0, axis_z + z_top + spec.margin_mm];
    let shape = [0, 1, 2].map(|k| ((hi[k] - lo[k]) / sp[k]).ceil() as usize + 1);
    Layout {
        origin: lo,
        shape,
        axis: [0.0, spine_y, axis_z],
        torso_center,
        z_top,
        bodies,
    }
}

/// Generates the phantom volume and its ground truth. Deterministic in
/// `spec.seed` and independent of the thread count.
pub fn generate(spec: &PhantomSpec) -> Result<(Volume, GroundTruth)> {
    spec.validate()?;
    let lay = layout(spec);
    let [nx, ny, nz] = lay.shape;
    let sp = spec.spacing_mm;
    let [tx, ty] = spec.torso_half_axes_mm;
    let ints = spec.intensities;
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::PhantomSpec(e.to_string()))?;

    let slices: Vec<Result<Vec<f32>>> = (0..nz)
        .into_par_iter()
        .map(|k| {
            let z = lay.origin[2] + k as f64 * sp[2];
            let candidates: Vec<(usize, &Body)> = lay
                .bodies
                .iter()
                .enumerate()
                .filter(|(_, b)| b.bbox.0[2] <= z && z <= b.bbox.1[2])
                .collect();
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(k as u64);
            let mut out = Vec::with_capacity(nx * ny);
            for j in 0..ny {
                let y = lay.origin[1] + j as f64 * sp[1];
                for i in 0..nx {
                    let x = lay.origin[0] + i as f64 * sp[0];
                    let p = V3::new(x, y, z);
                    let mut owner = None;
                    for &(idx, b) in &candidates {
                        if b.contains(p) {
                            if let Some(prev) = owner {
                                return Err(Error::Overlap(prev, idx));
                            }
                            owner = Some(idx);
                        }
                    }
                    let (dx, dy) = ((x - lay.torso_center[0]) / tx, (y - lay.torso_center[1]) / ty);
                    let base = if owner.is_some() {
                        ints.bone
                    } else if dx * dx + dy * dy <= 1.0 {
                        ints.soft_tissue
                    } else {
                        ints.air
                    };
                    let n = if spec.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                    out.push((base as f64 + n) as f32);
                }
            }
            Ok(out)
        })
        .collect();
    let mut data = Vec::with_capacity(nx * ny * nz);
    for s in slices {
        data.extend(s?);
    }
    let volume = Volume::new(data, lay.shape, sp, lay.origin)?.with_fill(ints.air);

    let first_label = LABELS.len().saturating_sub(spec.n_vertebrae);
    let vertebrae = lay
        .bodies
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let label = if spec.n_vertebrae <= LABELS.len() {
                LABELS[first_label + spec.n_vertebrae - 1 - i].to_string()
            } else {
                format!("V{i}")
            };
            let h = spec.heights(i);
            let lo = h.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = h.iter().copied().fold(0.0, f64::max);
            GtVertebra {
                label,
                centroid_mm: [b.c.x, b.c.y, b.c.z],
                keypoints_mm: b.keypoints(),
                genant: lo / hi,
            }
        })
        .collect();
    let curve = volume
        .z_grid()
        .into_iter()
        .map(|z| {
            let off = spec.offset(z - lay.axis[2]);
            [lay.axis[0] + off[0], lay.axis[1] + off[1], z]
        })
        .collect();
    let gt = GroundTruth {
        vertebrae,
        curve,
        limits_mm: [lay.axis[2], lay.axis[2] + lay.z_top],
    };
    Ok((volume, gt))
}

/// Gaussian of the in-plane distance to the ground-truth curve, zero
/// outside its limits.
pub fn oracle_probability_map(gt: &GroundTruth, v: &Volume, sigma: f64) -> Result<Volume> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Invalid(format!("sigma must be positive, got {sigma}")));
    }
    let curve = gt.spine_curve()?;
    let [lo, hi] = gt.limits_mm;
    Volume::from_fn(v.shape(), v.spacing(), v.origin(), |p| {
        if p[2] < lo || p[2] > hi {
            return 0.0;
        }
        let c = curve.position_at(p[2]);
        let d2 = (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2);
        (-d2 / (2.0 * sigma * sigma)).exp() as f32
    })
}

/// Locator stand-in returning [`oracle_probability_map`].
#[derive(Debug, Clone)]
pub struct OracleLocator {
    pub gt: GroundTruth,
    pub sigma_mm: f64,
}

impl ProbabilityPredictor for OracleLocator {
    fn predict(&self, volume: &Volume) -> Result<Volume> {
        oracle_probability_map(&self.gt, volume, self.sigma_mm)
    }
}
