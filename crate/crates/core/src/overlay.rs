//! Sagittal overlay rendering as binary PPM.

use crate::detector::{butterfly, Detection};
use crate::volume::Image2;

const SCALE: usize = 2;
const GLYPH_W: usize = 3;
const GLYPH_H: usize = 5;

const KEYPOINT: [u8; 3] = [255, 64, 64];
const SEGMENT: [u8; 3] = [64, 200, 255];
const OUTLINE: [u8; 3] = [255, 220, 0];
const TEXT: [u8; 3] = [255, 255, 255];

/// Rows of a 3x5 glyph, most significant of the low three bits on the left.
fn glyph(c: char) -> Option<[u8; GLYPH_H]> {
    Some(match c {
        '0' => [0b111, 0b101, 0b101, 0b101, 0b111],
        '1' => [0b010, 0b110, 0b010, 0b010, 0b111],
        '2' => [0b111, 0b001, 0b111, 0b100, 0b111],
        '3' => [0b111, 0b001, 0b111, 0b001, 0b111],
        '4' => [0b101, 0b101, 0b111, 0b001, 0b001],
        '5' => [0b111, 0b100, 0b111, 0b001, 0b111],
        '6' => [0b111, 0b100, 0b111, 0b101, 0b111],
        '7' => [0b111, 0b001, 0b010, 0b010, 0b010],
        '8' => [0b111, 0b101, 0b111, 0b101, 0b111],
        '9' => [0b111, 0b101, 0b111, 0b001, 0b111],
        '.' => [0b000, 0b000, 0b000, 0b000, 0b010],
        '=' => [0b000, 0b111, 0b000, 0b111, 0b000],
        'G' => [0b111, 0b100, 0b101, 0b101, 0b111],
        _ => return None,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rgb {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[u8; 3]>,
}

impl Rgb {
    fn put(&mut self, x: i64, y: i64, c: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            self.pixels[y as usize * self.width + x as usize] = c;
        }
    }

    fn line(&mut self, a: [f64; 2], b: [f64; 2], c: [u8; 3]) {
        let n = ((b[0] - a[0]).abs().max((b[1] - a[1]).abs()).ceil() as usize).max(1);
        for k in 0..=n {
            let f = k as f64 / n as f64;
            self.put(
                (a[0] + f * (b[0] - a[0])).round() as i64,
                (a[1] + f * (b[1] - a[1])).round() as i64,
                c,
            );
        }
    }

    fn text(&mut self, x: i64, y: i64, s: &str, c: [u8; 3]) {
        let mut cx = x;
        for ch in s.chars() {
            if let Some(rows) = glyph(ch) {
                for (r, bits) in rows.iter().enumerate() {
                    for col in 0..GLYPH_W {
                        if bits >> (GLYPH_W - 1 - col) & 1 == 1 {
                            self.put(cx + col as i64, y + r as i64, c);
                        }
                    }
                }
            }
            cx += GLYPH_W as i64 + 1;
        }
    }

    /// Binary `P6` encoding.
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.pixels.iter().flatten());
        out
    }
}

/// Sagittal image with superior at the top, keypoints, Genant segments,
/// butterfly outlines and the per-vertebra index burned in.
pub fn render_overlay(img: &Image2, detections: &[(Detection, f64)]) -> Rgb {
    let [nx, ny] = img.shape;
    let (w, h) = (nx * SCALE, ny * SCALE);
    let (lo, hi) = img
        .data
        .iter()
        .filter(|v| v.is_finite())
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let range = if hi > lo { hi - lo } else { 1.0 };
    let mut out = Rgb {
        width: w,
        height: h,
        pixels: vec![[0; 3]; w * h],
    };
    for y in 0..h {
        let j = ny - 1 - y / SCALE;
        for x in 0..w {
            let v = img.get(x / SCALE, j);
            let g = if v.is_finite() { ((v - lo) / range * 255.0).round().clamp(0.0, 255.0) as u8 } else { 0 };
            out.pixels[y * w + x] = [g; 3];
        }
    }
    let to_px = |p: [f64; 2]| {
        let i = (p[0] - img.origin[0]) / img.spacing[0];
        let j = (p[1] - img.origin[1]) / img.spacing[1];
        [(i + 0.5) * SCALE as f64 - 0.5, (ny as f64 - 0.5 - j) * SCALE as f64 - 0.5]
    };
    for (d, genant) in detections {
        let kp = d.keypoints();
        for q in butterfly(&kp).quads {
            for e in 0..4 {
                out.line(to_px(q[e]), to_px(q[(e + 1) % 4]), OUTLINE);
            }
        }
        for (t, b) in crate::detector::SEGMENTS {
            out.line(to_px(kp.points[t]), to_px(kp.points[b]), SEGMENT);
        }
        for p in kp.points {
            let c = to_px(p);
            for o in -2i64..=2 {
                out.put(c[0].round() as i64 + o, c[1].round() as i64, KEYPOINT);
                out.put(c[0].round() as i64, c[1].round() as i64 + o, KEYPOINT);
            }
        }
        let anchor = to_px(kp.points[crate::detector::POSTERIOR_TOP]);
        out.text(anchor[0].round() as i64 + 4, anchor[1].round() as i64, &format!("G={genant:.2}"), TEXT);
    }
    out
}
