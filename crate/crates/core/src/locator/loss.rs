use super::SpineCurve;
use crate::detector::bce;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationLoss {
    pub value: f64,
    pub mae: f64,
    pub bce: f64,
    pub grad_xy: Vec<[f64; 2]>,
    pub grad_logits: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Coordinate MAE on inside slices (averaged over both axes) plus the mean
/// BCE between slice probabilities and the inside labels.
pub fn localization_loss(
    pred_xy: &[[f64; 2]],
    pred_logits: &[f64],
    target: &SpineCurve,
    target_inside: &[bool],
    eps: f64,
) -> Result<LocalizationLoss> {
    let n = pred_xy.len();
    if pred_logits.len() != n || target.points.len() != n || target_inside.len() != n {
        return Err(Error::Invalid("localization loss inputs must share one z grid".into()));
    }
    if n == 0 {
        return Err(Error::Invalid("empty z grid".into()));
    }
    let n_in = target_inside.iter().filter(|&&b| b).count();
    let mut grad_xy = vec![[0.0; 2]; n];
    let mut mae = 0.0;
    if n_in > 0 {
        let w = 1.0 / (2 * n_in) as f64;
        for k in (0..n).filter(|&k| target_inside[k]) {
            for a in 0..2 {
                let d = pred_xy[k][a] - target.points[k][a];
                mae += w * d.abs();
                grad_xy[k][a] = w * d.signum() * f64::from(u8::from(d != 0.0));
            }
        }
    }
    let inv_n = 1.0 / n as f64;
    let mut bce_sum = 0.0;
    let mut grad_logits = vec![0.0; n];
    for k in 0..n {
        let p = sigmoid(pred_logits[k]);
        let y = if target_inside[k] { 1.0 } else { 0.0 };
        let (v, _) = bce(p, y, eps);
        bce_sum += v;
        if p > eps && p < 1.0 - eps {
            grad_logits[k] = (p - y) * inv_n;
        }
    }
    let bce = bce_sum * inv_n;
    Ok(LocalizationLoss {
        value: mae + bce,
        mae,
        bce,
        grad_xy,
        grad_logits,
    })
}
