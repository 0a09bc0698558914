use super::{DetectionField, TargetField, N_OFFSETS};
use crate::error::{Error, Result};

/// Denominator of the regression term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegressionNormalizer {
    /// Number of positive pixels.
    #[default]
    Positive,
    /// Number of negative pixels, the formula as printed.
    Negative,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub normalizer: RegressionNormalizer,
    pub eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            normalizer: RegressionNormalizer::Positive,
            eps: 1e-7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionLoss {
    pub value: f64,
    pub bce: f64,
    pub regression: f64,
    pub grad_objectness: Vec<f64>,
    pub grad_offsets: Vec<[f64; N_OFFSETS]>,
}

pub(crate) fn bce(p: f64, y: f64, eps: f64) -> (f64, f64) {
    let pc = p.clamp(eps, 1.0 - eps);
    let value = -(y * pc.ln() + (1.0 - y) * (1.0 - pc).ln());
    let grad = if p > eps && p < 1.0 - eps {
        -y / pc + (1.0 - y) / (1.0 - pc)
    } else {
        0.0
    };
    (value, grad)
}

/// Mean pixel BCE on objectness plus the Genant-reweighted offset MAE over
/// positive pixels, with analytic gradients.
pub fn detection_loss(pred: &DetectionField, target: &TargetField, cfg: &LossConfig) -> Result<DetectionLoss> {
    if pred.grid != target.grid {
        return Err(Error::Invalid("prediction and target grids differ".into()));
    }
    let n = pred.grid.len();
    let inv_n = 1.0 / n as f64;
    let positives = target.positive_count();
    let norm = match cfg.normalizer {
        RegressionNormalizer::Positive => positives,
        RegressionNormalizer::Negative => n - positives,
    };

    let mut grad_objectness = vec![0.0; n];
    let mut grad_offsets = vec![[0.0; N_OFFSETS]; n];
    let mut bce_sum = 0.0;
    for (i, (&p, &o)) in pred.objectness.iter().zip(&target.objectness).enumerate() {
        let (v, g) = bce(p, if o { 1.0 } else { 0.0 }, cfg.eps);
        bce_sum += v;
        grad_objectness[i] = g * inv_n;
    }

    let mut regression = 0.0;
    if norm > 0 {
        let scale = 1.0 / norm as f64;
        for i in (0..n).filter(|&i| target.objectness[i]) {
            let g = target.genant[i];
            let w = scale / (g * N_OFFSETS as f64);
            for c in 0..N_OFFSETS {
                let d = pred.offsets[i][c] - target.offsets[i][c];
                regression += w * d.abs();
                grad_offsets[i][c] = if d > 0.0 {
                    w
                } else if d < 0.0 {
                    -w
                } else {
                    0.0
                };
            }
        }
    }
    let bce = bce_sum * inv_n;
    Ok(DetectionLoss {
        value: bce + regression,
        bce,
        regression,
        grad_objectness,
        grad_offsets,
    })
}
