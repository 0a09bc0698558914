use serde::{Deserialize, Serialize};

use crate::detector::{biou, VertebraKeypoints, N_KEYPOINTS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchPair {
    pub target: usize,
    pub prediction: usize,
    pub closeness: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MatchResult {
    pub pairs: Vec<MatchPair>,
    pub unmatched_targets: Vec<usize>,
    pub unmatched_predictions: Vec<usize>,
}

impl MatchResult {
    pub fn true_positives(&self) -> usize {
        self.pairs.len()
    }

    pub fn false_positives(&self) -> usize {
        self.unmatched_predictions.len()
    }

    pub fn false_negatives(&self) -> usize {
        self.unmatched_targets.len()
    }

    /// Prediction matched to each target, if any.
    pub fn prediction_for_targets(&self, n_targets: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; n_targets];
        for p in &self.pairs {
            out[p.target] = Some(p.prediction);
        }
        out
    }
}

/// Assigns predictions to targets from a closeness matrix. `None` entries
/// are pairs below the closeness threshold.
///
/// One-to-one assignment is greedy by descending closeness (ties by target,
/// then prediction index). Otherwise every target takes its closest
/// surviving prediction, which may then be shared between targets.
pub fn assign(closeness: &[Vec<Option<f64>>], n_predictions: usize, one_to_one: bool) -> MatchResult {
    let n_targets = closeness.len();
    let mut pairs = Vec::new();
    if one_to_one {
        let mut cand: Vec<MatchPair> = closeness
            .iter()
            .enumerate()
            .flat_map(|(t, row)| {
                row.iter().enumerate().filter_map(move |(p, c)| {
                    c.map(|closeness| MatchPair {
                        target: t,
                        prediction: p,
                        closeness,
                    })
                })
            })
            .collect();
        cand.sort_by(|a, b| {
            b.closeness
                .total_cmp(&a.closeness)
                .then(a.target.cmp(&b.target))
                .then(a.prediction.cmp(&b.prediction))
        });
        let (mut t_used, mut p_used) = (vec![false; n_targets], vec![false; n_predictions]);
        for c in cand {
            if !t_used[c.target] && !p_used[c.prediction] {
                t_used[c.target] = true;
                p_used[c.prediction] = true;
                pairs.push(c);
            }
        }
        pairs.sort_by_key(|p| p.target);
    } else {
        for (t, row) in closeness.iter().enumerate() {
            let best = row
                .iter()
                .enumerate()
                .filter_map(|(p, c)| c.map(|c| (p, c)))
                .fold(None, |acc: Option<(usize, f64)>, (p, c)| match acc {
                    Some((_, bc)) if bc >= c => acc,
                    _ => Some((p, c)),
                });
            if let Some((p, c)) = best {
                pairs.push(MatchPair {
                    target: t,
                    prediction: p,
                    closeness: c,
                });
            }
        }
    }
    let mut t_hit = vec![false; n_targets];
    let mut p_hit = vec![false; n_predictions];
    for p in &pairs {
        t_hit[p.target] = true;
        p_hit[p.prediction] = true;
    }
    MatchResult {
        pairs,
        unmatched_targets: (0..n_targets).filter(|&t| !t_hit[t]).collect(),
        unmatched_predictions: (0..n_predictions).filter(|&p| !p_hit[p]).collect(),
    }
}

/// Matching by butterfly IoU; pairs below `threshold` or with a degenerate
/// butterfly are discarded.
pub fn match_biou(targets: &[VertebraKeypoints], predictions: &[VertebraKeypoints], threshold: f64, one_to_one: bool) -> MatchResult {
    let closeness: Vec<Vec<Option<f64>>> = targets
        .iter()
        .map(|t| {
            predictions
                .iter()
                .map(|p| biou(t, p).ok().filter(|&b| b >= threshold && b > 0.0))
                .collect()
        })
        .collect();
    assign(&closeness, predictions.len(), one_to_one)
}

/// Matching by centroid distance; closeness is the negated distance and
/// pairs farther than `threshold_mm` are discarded.
pub fn match_centroid(targets: &[[f64; 3]], predictions: &[[f64; 3]], threshold_mm: f64, one_to_one: bool) -> MatchResult {
    let closeness: Vec<Vec<Option<f64>>> = targets
        .iter()
        .map(|t| {
            predictions
                .iter()
                .map(|p| {
                    let d = ((t[0] - p[0]).powi(2) + (t[1] - p[1]).powi(2) + (t[2] - p[2]).powi(2)).sqrt();
                    (d <= threshold_mm).then_some(-d)
                })
                .collect()
        })
        .collect();
    assign(&closeness, predictions.len(), one_to_one)
}

/// Sagittal `(y, z)` projection of 3D keypoints.
pub fn project_sagittal(points: &[[f64; 3]; N_KEYPOINTS]) -> VertebraKeypoints {
    VertebraKeypoints::new(points.map(|p| [p[1], p[2]]))
}

/// `(precision, recall)`, with empty denominators counted as 1.
pub fn precision_recall(m: &MatchResult) -> (f64, f64) {
    let tp = m.true_positives() as f64;
    let ratio = |den: usize| if den == 0 { 1.0 } else { tp / den as f64 };
    (
        ratio(m.true_positives() + m.false_positives()),
        ratio(m.true_positives() + m.false_negatives()),
    )
}
