//! Butterfly polygons and the butterfly IoU.
//!
//! A butterfly is the pair of quadrilaterals spanned by the Genant segments:
//! the anterior quad (anterior-top, middle-top, middle-bottom,
//! anterior-bottom) and the posterior quad (middle-top, posterior-top,
//! posterior-bottom, middle-bottom). The two share the middle segment.

use super::{VertebraKeypoints, ANTERIOR_BOTTOM, ANTERIOR_TOP, MIDDLE_BOTTOM, MIDDLE_TOP, POSTERIOR_BOTTOM, POSTERIOR_TOP};
use crate::error::{Error, Result};
use crate::geometry::{self, P2};

/// Resolution of the rasterized fallback for non-convex quads.
pub const RASTER_STEP_MM: f64 = 0.1;

const AREA_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct Butterfly {
    pub quads: [[P2; 4]; 2],
    pub area: f64,
    pub degenerate: bool,
}

impl Butterfly {
    pub fn is_convex(&self) -> bool {
        self.quads.iter().all(|q| geometry::is_convex(q))
    }

    fn contains(&self, p: P2) -> bool {
        self.quads.iter().any(|q| geometry::contains(q, p))
    }

    fn bounds(&self) -> (P2, P2) {
        self.quads.iter().flatten().fold(
            ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]),
            |(lo, hi), p| ([lo[0].min(p[0]), lo[1].min(p[1])], [hi[0].max(p[0]), hi[1].max(p[1])]),
        )
    }
}

pub fn butterfly(kp: &VertebraKeypoints) -> Butterfly {
    let p = &kp.points;
    let quads = [
        [p[ANTERIOR_TOP], p[MIDDLE_TOP], p[MIDDLE_BOTTOM], p[ANTERIOR_BOTTOM]],
        [p[MIDDLE_TOP], p[POSTERIOR_TOP], p[POSTERIOR_BOTTOM], p[MIDDLE_BOTTOM]],
    ];
    let areas = quads.map(|q| geometry::area(&q));
    let degenerate = areas.iter().any(|&a| !(a > AREA_EPS)) || quads.iter().any(|q| !geometry::is_simple_quad(q));
    Butterfly {
        quads,
        area: areas[0] + areas[1],
        degenerate,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biou {
    pub value: f64,
    pub intersection: f64,
    pub union: f64,
    /// Set when a non-convex quad forced the rasterized estimate.
    pub rasterized: bool,
}

pub fn biou(a: &VertebraKeypoints, b: &VertebraKeypoints) -> Result<f64> {
    biou_detailed(a, b).map(|r| r.value)
}

pub fn biou_detailed(a: &VertebraKeypoints, b: &VertebraKeypoints) -> Result<Biou> {
    let (ba, bb) = (butterfly(a), butterfly(b));
    if ba.degenerate || bb.degenerate {
        return Err(Error::Degenerate("butterfly IoU of a degenerate butterfly".into()));
    }
    let rasterized = !(ba.is_convex() && bb.is_convex());
    let intersection = if rasterized {
        raster_intersection(&ba, &bb)
    } else {
        ba.quads
            .iter()
            .flat_map(|qa| bb.quads.iter().map(move |qb| geometry::convex_intersection_area(qa, qb)))
            .sum()
    };
    let intersection = intersection.min(ba.area).min(bb.area);
    let union = ba.area + bb.area - intersection;
    Ok(Biou {
        value: (intersection / union).clamp(0.0, 1.0),
        intersection,
        union,
        rasterized,
    })
}

fn raster_intersection(a: &Butterfly, b: &Butterfly) -> f64 {
    let (alo, ahi) = a.bounds();
    let (blo, bhi) = b.bounds();
    let lo = [alo[0].max(blo[0]), alo[1].max(blo[1])];
    let hi = [ahi[0].min(bhi[0]), ahi[1].min(bhi[1])];
    if lo[0] >= hi[0] || lo[1] >= hi[1] {
        return 0.0;
    }
    let nx = ((hi[0] - lo[0]) / RASTER_STEP_MM).ceil() as usize;
    let ny = ((hi[1] - lo[1]) / RASTER_STEP_MM).ceil() as usize;
    let mut count = 0usize;
    for j in 0..ny {
        let y = lo[1] + (j as f64 + 0.5) * RASTER_STEP_MM;
        for i in 0..nx {
            let p = [lo[0] + (i as f64 + 0.5) * RASTER_STEP_MM, y];
            if a.contains(p) && b.contains(p) {
                count += 1;
            }
        }
    }
    count as f64 * RASTER_STEP_MM * RASTER_STEP_MM
}
