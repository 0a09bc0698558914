//! Curved planar reformation along the spine curve.
//!
//! Equidistant points are taken along the cropped curve, each gets an
//! orthonormal frame `(t, u, v)` with `t` the curve tangent, and the volume
//! is resampled on the planes `c_k + a·u_k + b·v_k`. Stacking those planes
//! turns the curve into the straight column `a = b = 0`.
//!
//! In-plane axes are seeded with the patient-left axis (+x) and carried
//! along the curve by double-reflection rotation-minimizing transport, so
//! `v` tracks the posterior direction (+y) without twisting.

use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::locator::SpineCurve;
use crate::volume::{Image2, Volume};

pub const DEFAULT_HALF_EXTENT_MM: [f64; 2] = [60.0; 2];
pub const DEFAULT_STEP_MM: f64 = 1.0;

type V3 = Vector3<f64>;

fn v3(p: [f64; 3]) -> V3 {
    V3::new(p[0], p[1], p[2])
}

fn arr(v: V3) -> [f64; 3] {
    [v.x, v.y, v.z]
}

/// Curve point and orthonormal right-handed triad of one output level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub c: [f64; 3],
    pub t: [f64; 3],
    pub u: [f64; 3],
    pub v: [f64; 3],
}

/// Points at exact arc-length multiples of `step_mm` along the curve
/// polyline cropped to its limits.
pub fn equidistant_points(curve: &SpineCurve, step_mm: f64) -> Result<Vec<[f64; 3]>> {
    if curve.points.len() < 2 {
        return Err(Error::Curve("at least two curve points are required".into()));
    }
    resample_polyline(&curve.cropped_polyline(), step_mm)
}

pub fn resample_polyline(poly: &[[f64; 3]], step_mm: f64) -> Result<Vec<[f64; 3]>> {
    if !(step_mm > 0.0 && step_mm.is_finite()) {
        return Err(Error::Invalid(format!("step must be positive, got {step_mm}")));
    }
    let seg_len: Vec<f64> = poly.windows(2).map(|w| (v3(w[1]) - v3(w[0])).norm()).collect();
    let total: f64 = seg_len.iter().sum();
    if total + 1e-9 < step_mm {
        return Err(Error::Curve(format!("curve length {total:.3} mm is shorter than one step ({step_mm} mm)")));
    }
    let n = (total / step_mm + 1e-9).floor() as usize;
    let mut out = Vec::with_capacity(n + 1);
    let (mut seg, mut seg_start) = (0usize, 0.0f64);
    for k in 0..=n {
        let s = k as f64 * step_mm;
        while seg + 1 < seg_len.len() && seg_start + seg_len[seg] < s {
            seg_start += seg_len[seg];
            seg += 1;
        }
        let f = if seg_len[seg] > 0.0 {
            ((s - seg_start) / seg_len[seg]).clamp(0.0, 1.0)
        } else {
            0.0
        };
        out.push(arr(v3(poly[seg]).lerp(&v3(poly[seg + 1]), f)));
    }
    Ok(out)
}

/// Rotation-minimizing frames along a point sequence.
pub fn build_frames(points: &[[f64; 3]]) -> Result<Vec<Frame>> {
    let n = points.len();
    if n < 2 {
        return Err(Error::Curve("at least two points are required to build frames".into()));
    }
    let p: Vec<V3> = points.iter().map(|&q| v3(q)).collect();
    if p.windows(2).any(|w| (w[1] - w[0]).norm() < 1e-12) {
        return Err(Error::Curve("coincident consecutive points leave the tangent undefined".into()));
    }
    let tangents: Vec<V3> = (0..n)
        .map(|k| {
            let d = match k {
                0 => p[1] - p[0],
                k if k == n - 1 => p[n - 1] - p[n - 2],
                k => p[k + 1] - p[k - 1],
            };
            d.try_normalize(1e-12)
                .ok_or_else(|| Error::Curve(format!("tangent undefined at point {k}")))
        })
        .collect::<Result<_>>()?;

    let seed = |t: &V3| {
        [V3::x(), V3::y(), V3::z()]
            .iter()
            .find_map(|axis| (axis - t * axis.dot(t)).try_normalize(1e-6))
            .expect("some axis is not parallel to t")
    };
    let mut u = seed(&tangents[0]);
    let mut frames = Vec::with_capacity(n);
    for k in 0..n {
        let t = tangents[k];
        if k > 0 {
            u = transport(p[k - 1], p[k], tangents[k - 1], t, u);
        }
        let v = t.cross(&u);
        frames.push(Frame {
            c: arr(p[k]),
            t: arr(t),
            u: arr(u),
            v: arr(v),
        });
    }
    Ok(frames)
}

/// Double-reflection transport of `u` from `(p0, t0)` to `(p1, t1)`,
/// re-orthonormalized against `t1`.
fn transport(p0: V3, p1: V3, t0: V3, t1: V3, u: V3) -> V3 {
    let v1 = p1 - p0;
    let c1 = v1.dot(&v1);
    let u_l = u - v1 * (2.0 / c1 * v1.dot(&u));
    let t_l = t0 - v1 * (2.0 / c1 * v1.dot(&t0));
    let v2 = t1 - t_l;
    let c2 = v2.dot(&v2);
    let r = if c2 > 0.0 { u_l - v2 * (2.0 / c2 * v2.dot(&u_l)) } else { u_l };
    (r - t1 * r.dot(&t1)).normalize()
}

/// Signed in-plane rotation of each `u_{k+1}` relative to `u_k` carried by
/// the minimal rotation taking `t_k` to `t_{k+1}`.
pub fn frame_twist(frames: &[Frame]) -> Vec<f64> {
    frames
        .windows(2)
        .map(|w| {
            let (t0, t1) = (v3(w[0].t), v3(w[1].t));
            let u0 = v3(w[0].u);
            let axis = t0.cross(&t1);
            let s = axis.norm();
            let c = t0.dot(&t1);
            let carried = if s < 1e-15 {
                u0
            } else {
                let k = axis / s;
                u0 * c + k.cross(&u0) * s + k * (k.dot(&u0) * (1.0 - c))
            };
            let u1 = v3(w[1].u);
            t1.dot(&carried.cross(&u1)).atan2(carried.dot(&u1))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct StraightenedVolume {
    /// Axes `(a, b, level)`; world coordinates are `(a mm, b mm, arc mm)`.
    pub volume: Volume,
    pub frames: Vec<Frame>,
    pub source_curve: SpineCurve,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StraightenConfig {
    /// In-plane spacing and level step.
    pub step_mm: f64,
    pub half_extent_mm: [f64; 2],
}

impl Default for StraightenConfig {
    fn default() -> Self {
        Self {
            step_mm: DEFAULT_STEP_MM,
            half_extent_mm: DEFAULT_HALF_EXTENT_MM,
        }
    }
}

pub fn straighten(v: &Volume, curve: &SpineCurve, cfg: &StraightenConfig) -> Result<StraightenedVolume> {
    if cfg.half_extent_mm.iter().any(|h| !(*h >= 0.0 && h.is_finite())) {
        return Err(Error::Invalid("half extent must be non-negative".into()));
    }
    let (lo, hi) = v.world_bounds();
    if curve.limits[1] < lo[2] || curve.limits[0] > hi[2] {
        return Err(Error::Curve(format!(
            "curve limits {:?} do not intersect the volume z-range [{}, {}]",
            curve.limits, lo[2], hi[2]
        )));
    }
    let step = cfg.step_mm;
    let points = equidistant_points(curve, step)?;
    let frames = build_frames(&points)?;
    let half = |h: f64| (h / step + 1e-9).round() as usize;
    let (ha, hb) = (half(cfg.half_extent_mm[0]), half(cfg.half_extent_mm[1]));
    let (nu, nv, nl) = (2 * ha + 1, 2 * hb + 1, frames.len());
    let origin = [-(ha as f64) * step, -(hb as f64) * step, 0.0];
    let mut data = vec![0.0f32; nu * nv * nl];
    data.par_chunks_mut(nu * nv).zip(&frames).for_each(|(plane, f)| {
        let (c, u, w) = (v3(f.c), v3(f.u), v3(f.v));
        for j in 0..nv {
            let b = origin[1] + j as f64 * step;
            for i in 0..nu {
                let a = origin[0] + i as f64 * step;
                plane[j * nu + i] = v.sample_unchecked(arr(c + u * a + w * b)) as f32;
            }
        }
    });
    Ok(StraightenedVolume {
        volume: Volume::new(data, [nu, nv, nl], [step, step, step], origin)?.with_fill(v.fill()),
        frames,
        source_curve: curve.clone(),
    })
}

impl StraightenedVolume {
    pub fn step(&self) -> f64 {
        self.volume.spacing()[2]
    }

    /// Sagittal image through the straightened curve (`a = 0`); `x` is the
    /// posterior offset `b`, `y` the arc length.
    pub fn mid_sagittal(&self) -> Image2 {
        let [nu, nv, nl] = self.volume.shape();
        let i0 = nu / 2;
        let data = (0..nl)
            .flat_map(|k| (0..nv).map(move |j| (j, k)))
            .map(|(j, k)| self.volume.get(i0, j, k))
            .collect();
        let sp = self.volume.spacing();
        let org = self.volume.origin();
        Image2::new(data, [nv, nl], [sp[1], sp[2]], [org[1], org[2]]).expect("valid straightened geometry")
    }

    fn lerp_frame(&self, h: f64) -> (usize, f64) {
        let n = self.frames.len();
        if n == 1 {
            return (0, 0.0);
        }
        let k = (h.floor().max(0.0) as usize).min(n - 2);
        (k, h - k as f64)
    }

    /// World point of a mid-sagittal coordinate `[b, arc]`.
    pub fn unstraighten_point(&self, p2d: [f64; 2]) -> Result<[f64; 3]> {
        self.unstraighten_point_3d([0.0, p2d[0], p2d[1]])
    }

    /// World point of a straightened coordinate `[a, b, arc]`. Heights
    /// beyond either end continue along the end frame's tangent.
    pub fn unstraighten_point_3d(&self, q: [f64; 3]) -> Result<[f64; 3]> {
        if q.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(q.to_vec()));
        }
        let h = (q[2] - self.volume.origin()[2]) / self.step();
        let last = (self.frames.len() - 1) as f64;
        let (k, f) = self.lerp_frame(h.clamp(0.0, last));
        let (c, u, w) = self.frame_at(k, f);
        let beyond = (h - h.clamp(0.0, last)) * self.step();
        let t = v3(if h < 0.0 { self.frames[0].t } else { self.frames[self.frames.len() - 1].t });
        Ok(arr(c + t * beyond + u * q[0] + w * q[1]))
    }

    fn frame_at(&self, k: usize, f: f64) -> (V3, V3, V3) {
        let a = &self.frames[k];
        let Some(b) = self.frames.get(k + 1) else {
            return (v3(a.c), v3(a.u), v3(a.v));
        };
        (
            v3(a.c).lerp(&v3(b.c), f),
            v3(a.u).lerp(&v3(b.u), f),
            v3(a.v).lerp(&v3(b.v), f),
        )
    }

    /// Inverse of [`Self::unstraighten_point_3d`]: straightened coordinates
    /// `[a, b, arc]` of a world point, choosing the solution nearest to the
    /// curve when several interpolated planes pass through it. Points past
    /// either end use the end frame's extension.
    pub fn straightened_coords(&self, p: [f64; 3]) -> Result<[f64; 3]> {
        let p = v3(p);
        let n = self.frames.len();
        let step = self.step();
        let z0 = self.volume.origin()[2];
        if n == 1 {
            let f = &self.frames[0];
            let d = p - v3(f.c);
            return Ok([d.dot(&v3(f.u)), d.dot(&v3(f.v)), z0]);
        }
        let mut best: Option<(f64, [f64; 3])> = None;
        for k in 0..n - 1 {
            let (fa, fb) = (&self.frames[k], &self.frames[k + 1]);
            let d0 = (p - v3(fa.c)).dot(&v3(fa.t));
            let d1 = (p - v3(fb.c)).dot(&v3(fb.t));
            if (d0 > step && d1 > step) || (d0 < -step && d1 < -step) {
                continue;
            }
            let mut f = if (d0 - d1).abs() > 1e-15 { d0 / (d0 - d1) } else { 0.5 };
            let (c, u, w) = self.frame_at(k, f.clamp(0.0, 1.0));
            let (mut a, mut b) = ((p - c).dot(&u), (p - c).dot(&w));
            let (dc, du, dw) = (v3(fb.c) - v3(fa.c), v3(fb.u) - v3(fa.u), v3(fb.v) - v3(fa.v));
            let mut converged = false;
            for _ in 0..50 {
                let (c, u, w) = self.frame_at(k, f);
                let r = c + u * a + w * b - p;
                if r.norm() < 1e-12 {
                    converged = true;
                    break;
                }
                let j = Matrix3::from_columns(&[dc + du * a + dw * b, u, w]);
                let Some(delta) = j.lu().solve(&(-r)) else { break };
                f += delta.x;
                a += delta.y;
                b += delta.z;
                if !f.is_finite() || f.abs() > 10.0 {
                    break;
                }
            }
            if !converged {
                let (c, u, w) = self.frame_at(k, f.clamp(0.0, 1.0));
                converged = (c + u * a + w * b - p).norm() < 1e-9;
            }
            if converged && (-1e-9..=1.0 + 1e-9).contains(&f) {
                let cand = [a, b, z0 + (k as f64 + f.clamp(0.0, 1.0)) * step];
                let dist = a * a + b * b;
                if best.is_none_or(|(bd, _)| dist < bd) {
                    best = Some((dist, cand));
                }
            }
        }
        let ends = [(&self.frames[0], 0.0), (&self.frames[n - 1], (n - 1) as f64 * step)];
        for (k, (fr, arc)) in ends.into_iter().enumerate() {
            let d = p - v3(fr.c);
            let along = d.dot(&v3(fr.t));
            if (k == 0 && along < 0.0) || (k == 1 && along > 0.0) {
                let (a, b) = (d.dot(&v3(fr.u)), d.dot(&v3(fr.v)));
                let dist = a * a + b * b;
                if best.is_none_or(|(bd, _)| dist < bd) {
                    best = Some((dist, [a, b, z0 + arc + along]));
                }
            }
        }
        best.map(|(_, c)| c)
            .ok_or_else(|| Error::Invalid("point does not lie on any straightened plane".into()))
    }

    /// Writes `<dir>/straightened.json|raw`, `frames.json` and `curve.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        io::save_container(&self.volume, &dir.join("straightened.json"), io::DType::F32)?;
        io::write_json(&dir.join("frames.json"), &FramesFile { levels: self.frames.clone() })?;
        io::write_json(&dir.join("curve.json"), &self.source_curve)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let volume = io::load_container(&dir.join("straightened.json"))?;
        let frames: FramesFile = io::read_json(&dir.join("frames.json"))?;
        let source_curve: SpineCurve = io::read_json(&dir.join("curve.json"))?;
        if frames.levels.len() != volume.shape()[2] {
            return Err(Error::format(dir, "frame count does not match the straightened volume levels"));
        }
        Ok(Self {
            volume,
            frames: frames.levels,
            source_curve,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FramesFile {
    pub levels: Vec<Frame>,
}
