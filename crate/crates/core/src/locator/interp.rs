use super::SpineCurve;
use crate::error::{Error, Result};

/// Regression target for the localization heads.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveTarget {
    pub curve: SpineCurve,
    /// True on slices between the first and last centroid.
    pub inside: Vec<bool>,
}

/// Fritsch–Carlson derivative estimates for a monotone-preserving cubic
/// Hermite interpolant through `(xs, ys)`.
pub fn pchip_slopes(xs: &[f64], ys: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let h: Vec<f64> = xs.windows(2).map(|w| w[1] - w[0]).collect();
    let delta: Vec<f64> = (0..n - 1).map(|k| (ys[k + 1] - ys[k]) / h[k]).collect();
    if n == 2 {
        return vec![delta[0]; 2];
    }
    let mut d = vec![0.0; n];
    for k in 1..n - 1 {
        let (a, b) = (delta[k - 1], delta[k]);
        if a * b > 0.0 {
            let w1 = 2.0 * h[k] + h[k - 1];
            let w2 = h[k] + 2.0 * h[k - 1];
            d[k] = (w1 + w2) / (w1 / a + w2 / b);
        }
    }
    let edge = |h0: f64, h1: f64, m0: f64, m1: f64| {
        let d = ((2.0 * h0 + h1) * m0 - h0 * m1) / (h0 + h1);
        if d.signum() != m0.signum() || m0 == 0.0 {
            0.0
        } else if m0.signum() != m1.signum() && d.abs() > 3.0 * m0.abs() {
            3.0 * m0
        } else {
            d
        }
    };
    d[0] = edge(h[0], h[1], delta[0], delta[1]);
    d[n - 1] = edge(h[n - 2], h[n - 3], delta[n - 2], delta[n - 3]);
    d
}

fn hermite(xs: &[f64], ys: &[f64], d: &[f64], x: f64) -> f64 {
    let k = xs.partition_point(|&v| v <= x).clamp(1, xs.len() - 1) - 1;
    let h = xs[k + 1] - xs[k];
    let t = (x - xs[k]) / h;
    let (t2, t3) = (t * t, t * t * t);
    (2.0 * t3 - 3.0 * t2 + 1.0) * ys[k]
        + (t3 - 2.0 * t2 + t) * h * d[k]
        + (-2.0 * t3 + 3.0 * t2) * ys[k + 1]
        + (t3 - t2) * h * d[k + 1]
}

/// Shape-preserving interpolation of vertebra centroids onto `z_grid`.
///
/// Slices outside the centroid span hold the nearest end value and are
/// labelled outside.
pub fn interpolate_centroid_curve(centroids: &[[f64; 3]], z_grid: &[f64]) -> Result<CurveTarget> {
    if centroids.len() < 2 {
        return Err(Error::Invalid("at least two centroids are required".into()));
    }
    if centroids.windows(2).any(|w| !(w[1][2] > w[0][2])) {
        return Err(Error::Invalid("centroid z must be strictly increasing (duplicate or unsorted z)".into()));
    }
    let zs: Vec<f64> = centroids.iter().map(|c| c[2]).collect();
    let xs: Vec<f64> = centroids.iter().map(|c| c[0]).collect();
    let ys: Vec<f64> = centroids.iter().map(|c| c[1]).collect();
    let (dx, dy) = (pchip_slopes(&zs, &xs), pchip_slopes(&zs, &ys));
    let (z0, z1) = (zs[0], *zs.last().unwrap());
    let mut points = Vec::with_capacity(z_grid.len());
    let mut inside = Vec::with_capacity(z_grid.len());
    for &z in z_grid {
        let zc = z.clamp(z0, z1);
        points.push([hermite(&zs, &xs, &dx, zc), hermite(&zs, &ys, &dy, zc), z]);
        inside.push(z >= z0 && z <= z1);
    }
    Ok(CurveTarget {
        curve: SpineCurve::new(points, [z0, z1])?,
        inside,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(lo: f64, hi: f64, step: f64) -> Vec<f64> {
        let n = ((hi - lo) / step).round() as usize;
        (0..=n).map(|k| lo + k as f64 * step).collect()
    }

    #[test]
    fn collinear_is_linear() {
        let c = [[0.0, 10.0, 0.0], [3.0, 8.0, 7.0], [6.0, 6.0, 14.0], [12.0, 2.0, 28.0]];
        let t = interpolate_centroid_curve(&c, &grid(-4.0, 32.0, 1.0)).unwrap();
        for (p, &inside) in t.curve.points.iter().zip(&t.inside) {
            if inside {
                assert!((p[0] - 3.0 * p[2] / 7.0).abs() < 1e-12);
                assert!((p[1] - (10.0 - 2.0 * p[2] / 7.0)).abs() < 1e-12);
            }
        }
        assert_eq!(t.inside.iter().filter(|&&b| b).count(), 29);
        assert_eq!(t.curve.limits, [0.0, 28.0]);
    }

    #[test]
    fn two_centroids_straight_segment() {
        let t = interpolate_centroid_curve(&[[0.0, 0.0, 0.0], [10.0, -5.0, 10.0]], &grid(0.0, 10.0, 0.5)).unwrap();
        for p in &t.curve.points {
            assert!((p[0] - p[2]).abs() < 1e-12 && (p[1] + 0.5 * p[2]).abs() < 1e-12);
        }
    }

    #[test]
    fn passes_through_centroids_without_overshoot() {
        let c = [[0.0, 0.0, 0.0], [5.0, 1.0, 30.0], [5.0, 3.0, 60.0], [-10.0, 2.0, 90.0], [-11.0, 0.0, 120.0]];
        let t = interpolate_centroid_curve(&c, &grid(0.0, 120.0, 1.0)).unwrap();
        for ci in &c {
            let p = t.curve.points[ci[2] as usize];
            assert!((p[0] - ci[0]).abs() < 1e-12 && (p[1] - ci[1]).abs() < 1e-12);
        }
        // Flat run between the 2nd and 3rd centroid stays flat in x.
        for p in &t.curve.points[30..=60] {
            assert!((p[0] - 5.0).abs() < 1e-12);
        }
        for w in c.windows(2) {
            let (lo, hi) = (w[0][0].min(w[1][0]), w[0][0].max(w[1][0]));
            for p in &t.curve.points[w[0][2] as usize..=w[1][2] as usize] {
                assert!(p[0] >= lo - 1e-12 && p[0] <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn duplicate_z_rejected() {
        assert!(interpolate_centroid_curve(&[[0.0, 0.0, 1.0], [1.0, 0.0, 1.0]], &[0.0, 1.0]).is_err());
        assert!(interpolate_centroid_curve(&[[0.0, 0.0, 1.0]], &[0.0, 1.0]).is_err());
    }
}
