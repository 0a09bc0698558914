use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::{biou, Detection};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NmsConfig {
    /// Candidates must score strictly above this objectness.
    pub score_thresh: f64,
    /// A candidate survives only if its BIoU with every kept detection is
    /// strictly below this closeness.
    pub closeness_thresh: f64,
    pub keep_degenerate: bool,
}

impl Default for NmsConfig {
    fn default() -> Self {
        Self {
            score_thresh: 0.7,
            closeness_thresh: 0.1,
            keep_degenerate: false,
        }
    }
}

/// Greedy non-maximum suppression by descending score with butterfly IoU
/// as the closeness. Ties in score resolve to the lower anchor `(j, i)`.
pub fn nms(detections: &[Detection], cfg: &NmsConfig) -> Vec<Detection> {
    let mut order: Vec<&Detection> = detections
        .iter()
        .filter(|d| d.score > cfg.score_thresh && (cfg.keep_degenerate || !d.degenerate))
        .collect();
    order.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(Ordering::Equal)
            .then_with(|| (a.anchor[1], a.anchor[0]).cmp(&(b.anchor[1], b.anchor[0])))
    });
    let mut kept: Vec<Detection> = Vec::new();
    for d in order {
        let kp = d.keypoints();
        let suppressed = kept.iter().any(|k| match biou(&kp, &k.keypoints()) {
            Ok(v) => v >= cfg.closeness_thresh,
            // Degenerate pairs (only with keep_degenerate) fall back to
            // identical-anchor suppression.
            Err(_) => k.anchor == d.anchor,
        });
        if !suppressed {
            kept.push(d.clone());
        }
    }
    kept
}
