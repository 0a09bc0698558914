//! Non-learned spine probability map.
//!
//! Per axial slice: threshold bone, keep the bone component closest to a
//! posterior-central prior inside the body outline, and emit its distance
//! transform scaled to a peak of 1. Slices that cut only part of a body
//! borrow the maps of neighbouring full slices.

use std::collections::VecDeque;

use rayon::prelude::*;

use super::ProbabilityPredictor;
use crate::error::Result;
use crate::volume::Volume;

const HIST_BINS: usize = 256;
/// Components smaller than this (mm²) are treated as noise.
const MIN_COMPONENT_MM2: f64 = 12.0;
/// Posterior shift of the prior, as a fraction of the body half-depth.
const POSTERIOR_PRIOR: f64 = 0.3;
/// Components below this fraction of the median component size are
/// partial cuts through a body.
const PARTIAL_FRACTION: f64 = 0.9;

#[derive(Debug, Clone, Copy, Default)]
pub struct HeuristicLocator;

impl ProbabilityPredictor for HeuristicLocator {
    fn predict(&self, volume: &Volume) -> Result<Volume> {
        Ok(heuristic_probability_map(volume))
    }
}

fn otsu(values: impl Iterator<Item = f32> + Clone, lo: f32, hi: f32) -> Option<f32> {
    if !(hi > lo) {
        return None;
    }
    let width = (hi - lo) as f64 / HIST_BINS as f64;
    let mut hist = [0u64; HIST_BINS];
    for v in values {
        let b = (((v - lo) as f64 / width) as usize).min(HIST_BINS - 1);
        hist[b] += 1;
    }
    let total: u64 = hist.iter().sum();
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w0, mut sum0) = (0u64, 0.0);
    let mut best = (0.0, None);
    for (i, &c) in hist.iter().enumerate().take(HIST_BINS - 1) {
        w0 += c;
        sum0 += i as f64 * c as f64;
        let w1 = total - w0;
        if w0 == 0 || w1 == 0 {
            continue;
        }
        let m0 = sum0 / w0 as f64;
        let m1 = (sum_all - sum0) / w1 as f64;
        let between = w0 as f64 * w1 as f64 * (m0 - m1).powi(2);
        if between > best.0 {
            best = (between, Some(lo + ((i + 1) as f64 * width) as f32));
        }
    }
    best.1
}

/// Body and bone thresholds from two nested Otsu splits.
fn thresholds(v: &Volume) -> Option<(f32, f32)> {
    let (lo, hi) = v.min_max();
    let body = otsu(v.data().iter().copied(), lo, hi)?;
    let inside = v.data().iter().copied().filter(move |&x| x >= body);
    let bone = otsu(inside, body, hi)?;
    Some((body, bone))
}

fn components(mask: &[bool], nx: usize, ny: usize) -> Vec<Vec<usize>> {
    let mut seen = vec![false; mask.len()];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut comp = Vec::new();
        while let Some(p) = queue.pop_front() {
            comp.push(p);
            let (i, j) = (p % nx, p / nx);
            let mut visit = |q: usize| {
                if mask[q] && !seen[q] {
                    seen[q] = true;
                    queue.push_back(q);
                }
            };
            if i > 0 {
                visit(p - 1);
            }
            if i + 1 < nx {
                visit(p + 1);
            }
            if j > 0 {
                visit(p - nx);
            }
            if j + 1 < ny {
                visit(p + nx);
            }
        }
        out.push(comp);
    }
    out
}

/// Distance map of the selected bone component and the component's size
/// in pixels.
fn slice_map(data: &[f32], nx: usize, ny: usize, spacing: [f64; 2], body_t: f32, bone_t: f32) -> (Vec<f32>, usize) {
    let mut out = vec![0.0f32; data.len()];
    let pos = |p: usize| [(p % nx) as f64 * spacing[0], (p / nx) as f64 * spacing[1]];

    let body: Vec<usize> = (0..data.len()).filter(|&p| data[p] >= body_t).collect();
    if body.is_empty() {
        return (out, 0);
    }
    let (mut cx, mut cy, mut ymax) = (0.0, 0.0, f64::NEG_INFINITY);
    for &p in &body {
        let q = pos(p);
        cx += q[0];
        cy += q[1];
        ymax = ymax.max(q[1]);
    }
    cx /= body.len() as f64;
    cy /= body.len() as f64;
    let prior = [cx, cy + POSTERIOR_PRIOR * (ymax - cy)];

    let mask: Vec<bool> = data.iter().map(|&v| v >= bone_t).collect();
    let min_pixels = (MIN_COMPONENT_MM2 / (spacing[0] * spacing[1])).ceil() as usize;
    let best = components(&mask, nx, ny)
        .into_iter()
        .filter(|c| c.len() >= min_pixels.max(1))
        .map(|c| {
            let (sx, sy) = c.iter().fold((0.0, 0.0), |(sx, sy), &p| {
                let q = pos(p);
                (sx + q[0], sy + q[1])
            });
            let n = c.len() as f64;
            let d = (sx / n - prior[0]).hypot(sy / n - prior[1]);
            (d, c)
        })
        .min_by(|a, b| a.0.total_cmp(&b.0));
    let Some((_, comp)) = best else {
        return (out, 0);
    };

    // Exact Euclidean distance to the nearest pixel outside the component.
    let in_comp: std::collections::HashSet<usize> = comp.iter().copied().collect();
    let boundary: Vec<[f64; 2]> = comp
        .iter()
        .flat_map(|&p| {
            let (i, j) = (p % nx, p / nx);
            let mut outside = Vec::new();
            for (di, dj) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
                let (a, b) = (i as i64 + di, j as i64 + dj);
                let q = if a < 0 || b < 0 || a >= nx as i64 || b >= ny as i64 {
                    None
                } else {
                    Some(b as usize * nx + a as usize)
                };
                if q.is_none_or(|q| !in_comp.contains(&q)) {
                    outside.push([a as f64 * spacing[0], b as f64 * spacing[1]]);
                }
            }
            outside
        })
        .collect();
    let dist: Vec<f64> = comp
        .iter()
        .map(|&p| {
            let q = pos(p);
            boundary
                .iter()
                .map(|b| (b[0] - q[0]).hypot(b[1] - q[1]))
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    let peak = dist.iter().copied().fold(0.0, f64::max);
    if peak > 0.0 {
        for (&p, d) in comp.iter().zip(dist) {
            out[p] = (d / peak) as f32;
        }
    }
    (out, comp.len())
}

/// Weighted centroid of a map in pixel units.
fn centroid(map: &[f32], nx: usize) -> [f64; 2] {
    let (mut sx, mut sy, mut sw) = (0.0, 0.0, 0.0);
    for (p, &w) in map.iter().enumerate() {
        let w = f64::from(w);
        sx += w * (p % nx) as f64;
        sy += w * (p / nx) as f64;
        sw += w;
    }
    [sx / sw, sy / sw]
}

/// Least-squares line through `centers` at slice indices `ks`, evaluated
/// at slice `k`.
fn fit_line(ks: &[usize], centers: &[[f64; 2]], k: usize) -> [f64; 2] {
    let n = ks.len() as f64;
    let mk = ks.iter().map(|&i| i as f64).sum::<f64>() / n;
    let skk: f64 = ks.iter().map(|&i| (i as f64 - mk).powi(2)).sum();
    std::array::from_fn(|a| {
        let m = centers.iter().map(|c| c[a]).sum::<f64>() / n;
        let skc: f64 = ks.iter().zip(centers).map(|(&i, c)| (i as f64 - mk) * (c[a] - m)).sum();
        m + skc / skk * (k as f64 - mk)
    })
}

/// Map translated by `d` pixels with bilinear splatting, which moves its
/// centroid by exactly `d` when nothing falls off the grid.
fn shifted(map: &[f64], nx: usize, ny: usize, d: [f64; 2]) -> Vec<f64> {
    let mut out = vec![0.0; map.len()];
    let (fx, fy) = (d[0].floor(), d[1].floor());
    let (ax, ay) = (d[0] - fx, d[1] - fy);
    for (p, &w) in map.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let (i, j) = ((p % nx) as f64 + fx, (p / nx) as f64 + fy);
        for (di, dj, wt) in [(0.0, 0.0, (1.0 - ax) * (1.0 - ay)), (1.0, 0.0, ax * (1.0 - ay)), (0.0, 1.0, (1.0 - ax) * ay), (1.0, 1.0, ax * ay)] {
            let (x, y) = (i + di, j + dj);
            if wt > 0.0 && x >= 0.0 && y >= 0.0 && (x as usize) < nx && (y as usize) < ny {
                out[y as usize * nx + x as usize] += w * wt;
            }
        }
    }
    out
}

/// Bone-component distance map per axial slice; zeros where no bone is
/// found. A slice whose component is smaller than `PARTIAL_FRACTION` of the
/// median component cuts only part of a body (the endplate region of a
/// tilted vertebra or an intervertebral gap). It receives a blend of the
/// unit-sum maps of the nearest full slices below and above, weighted
/// linearly in z, so its sum-normalized centroid interpolates theirs; the
/// blend is scaled to peak at the size ratio. Deterministic and independent
/// of thread count.
pub fn heuristic_probability_map(v: &Volume) -> Volume {
    let [nx, ny, nz] = v.shape();
    let spacing = [v.spacing()[0], v.spacing()[1]];
    let Some((body_t, bone_t)) = thresholds(v) else {
        return Volume::filled(0.0, v.shape(), v.spacing(), v.origin()).expect("same geometry");
    };
    let slices: Vec<(Vec<f32>, usize)> = (0..nz)
        .into_par_iter()
        .map(|k| slice_map(v.slice_data(k), nx, ny, spacing, body_t, bone_t))
        .collect();
    let mut sizes: Vec<usize> = slices.iter().map(|s| s.1).filter(|&n| n > 0).collect();
    sizes.sort_unstable();
    let median = sizes.get(sizes.len() / 2).copied().unwrap_or(0) as f64;
    let is_full = |k: usize| slices[k].1 > 0 && slices[k].1 as f64 >= PARTIAL_FRACTION * median;
    let unit = |k: usize| {
        let sum: f64 = slices[k].0.iter().map(|&x| f64::from(x)).sum();
        slices[k].0.iter().map(move |&x| f64::from(x) / sum)
    };
    let mut data = Vec::with_capacity(v.len());
    for (k, (map, size)) in slices.iter().enumerate() {
        if *size == 0 || is_full(k) {
            data.extend_from_slice(map);
            continue;
        }
        let below = (0..k).rev().find(|&j| is_full(j));
        let above = (k + 1..nz).find(|&j| is_full(j));
        let blend: Vec<f64> = match (below, above) {
            (Some(a), Some(b)) => {
                let f = (k - a) as f64 / (b - a) as f64;
                unit(a).zip(unit(b)).map(|(x, y)| (1.0 - f) * x + f * y).collect()
            }
            (Some(j), None) | (None, Some(j)) => {
                // Beyond the last full slice: follow the line fitted to the
                // run of full slices that starts there.
                let run: Vec<usize> = if below.is_some() {
                    (0..=j).rev().take_while(|&i| is_full(i)).collect()
                } else {
                    (j..nz).take_while(|&i| is_full(i)).collect()
                };
                let map: Vec<f64> = unit(j).collect();
                if run.len() < 2 {
                    map
                } else {
                    let centers: Vec<[f64; 2]> = run.iter().map(|&i| centroid(&slices[i].0, nx)).collect();
                    let target = fit_line(&run, &centers, k);
                    let cj = centers[0];
                    shifted(&map, nx, ny, [target[0] - cj[0], target[1] - cj[1]])
                }
            }
            (None, None) => {
                data.extend_from_slice(map);
                continue;
            }
        };
        let peak = blend.iter().copied().fold(0.0, f64::max);
        let scale = *size as f64 / median / peak;
        data.extend(blend.iter().map(|&x| (x * scale) as f32));
    }
    Volume::new(data, v.shape(), v.spacing(), v.origin()).expect("same geometry")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_air_gives_zero_map() {
        let v = Volume::filled(0.0, [8, 8, 4], [2.0, 2.0, 4.0], [0.0; 3]).unwrap();
        assert!(heuristic_probability_map(&v).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn picks_posterior_component() {
        // Body disc of soft tissue with two bone blobs: anterior and posterior.
        let v = Volume::from_fn([60, 60, 2], [1.0, 1.0, 1.0], [0.0; 3], |p| {
            let (x, y) = (p[0] - 30.0, p[1] - 30.0);
            if x.hypot(y - 10.0) < 4.0 || x.hypot(y + 15.0) < 4.0 {
                1.0
            } else if x.hypot(y) < 28.0 {
                0.6
            } else {
                0.0
            }
        })
        .unwrap();
        let m = heuristic_probability_map(&v);
        let s = m.slice_data(0);
        let peak = s.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert_eq!((peak % 60, peak / 60), (30, 40));
        assert_eq!(*s.iter().max_by(|a, b| a.total_cmp(b)).unwrap(), 1.0);
        assert_eq!(s[15 * 60 + 30], 0.0);
    }

    #[test]
    fn shifted_moves_the_centroid_exactly() {
        let map: Vec<f64> = (0..100usize).map(|p| if (p % 10).abs_diff(5) <= 1 && (p / 10).abs_diff(4) <= 2 { 1.0 } else { 0.0 }).collect();
        let as_f32: Vec<f32> = map.iter().map(|&x| x as f32).collect();
        let out: Vec<f32> = shifted(&map, 10, 10, [1.25, -0.5]).iter().map(|&x| x as f32).collect();
        let (a, b) = (centroid(&as_f32, 10), centroid(&out, 10));
        assert!((b[0] - a[0] - 1.25).abs() < 1e-6 && (b[1] - a[1] + 0.5).abs() < 1e-6);
    }

    #[test]
    fn fit_line_reproduces_linear_tracks() {
        let ks = [3, 4, 5, 6];
        let centers: Vec<[f64; 2]> = ks.iter().map(|&k| [1.0 + 0.5 * k as f64, 2.0 - k as f64]).collect();
        let p = fit_line(&ks, &centers, 0);
        assert!((p[0] - 1.0).abs() < 1e-12 && (p[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn partial_end_slice_follows_the_body_axis() {
        // Tilted cylinder whose lowest slice only holds a sliver.
        let axis = |z: f64| 20.0 + 0.5 * z;
        let v = Volume::from_fn([48, 40, 8], [1.0, 1.0, 2.0], [0.0; 3], |p| {
            let inside = (p[0] - axis(p[2])).hypot(p[1] - 20.0) < 6.0;
            let cut = p[2] >= 1.0 || p[0] > axis(p[2]) + 3.0;
            if inside && cut && p[2] < 14.0 {
                1.0
            } else if (p[0] - 24.0).hypot(p[1] - 20.0) < 19.0 {
                0.6
            } else {
                0.0
            }
        })
        .unwrap();
        let m = heuristic_probability_map(&v);
        let c = centroid(m.slice_data(0), 48);
        assert!((c[0] - axis(0.0)).abs() < 0.5, "{c:?}");
    }
}
