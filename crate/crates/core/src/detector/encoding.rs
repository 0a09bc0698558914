use super::{Detection, DetectionField, VertebraKeypoints, N_KEYPOINTS, N_OFFSETS};
use crate::geometry::P2;

/// Keypoints relative to `anchor`, flattened as `(ex, ey)` pairs.
pub fn encode(kp: &VertebraKeypoints, anchor: P2) -> [f64; N_OFFSETS] {
    let mut e = [0.0; N_OFFSETS];
    for (k, p) in kp.points.iter().enumerate() {
        e[2 * k] = p[0] - anchor[0];
        e[2 * k + 1] = p[1] - anchor[1];
    }
    e
}

pub fn decode(e: &[f64; N_OFFSETS], anchor: P2) -> VertebraKeypoints {
    VertebraKeypoints::new(std::array::from_fn::<_, N_KEYPOINTS, _>(|k| {
        [e[2 * k] + anchor[0], e[2 * k + 1] + anchor[1]]
    }))
}

/// Decodes every pixel whose objectness exceeds `min_score`.
///
/// Detections that violate the keypoint invariants are kept but flagged.
pub fn decode_field(field: &DetectionField, min_score: f64) -> Vec<Detection> {
    let mut out = Vec::new();
    let mut flagged = 0usize;
    for (idx, (&score, e)) in field.objectness.iter().zip(&field.offsets).enumerate() {
        if score <= min_score {
            continue;
        }
        let kp = decode(e, field.grid.anchor(idx));
        let degenerate = kp.is_degenerate();
        flagged += usize::from(degenerate);
        out.push(Detection {
            points: kp.points,
            score,
            anchor: field.grid.pixel(idx),
            degenerate,
        });
    }
    if flagged > 0 {
        log::warn!("{flagged} of {} decoded candidates are degenerate", out.len());
    }
    out
}
