use crate::error::{Error, Result};

fn class_counts(labels: &[bool]) -> Result<(usize, usize)> {
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 {
        return Err(Error::SingleClass("no positive samples"));
    }
    if neg == 0 {
        return Err(Error::SingleClass("no negative samples"));
    }
    Ok((pos, neg))
}

fn sorted_by_score(scores: &[f64], labels: &[bool]) -> Result<Vec<(f64, bool)>> {
    if scores.len() != labels.len() {
        return Err(Error::Invalid(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Invalid("NaN score".into()));
    }
    let mut v: Vec<(f64, bool)> = scores.iter().copied().zip(labels.iter().copied()).collect();
    v.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(v)
}

/// Groups of equal scores in ascending order as `(positives, negatives)`.
fn tie_groups(sorted: &[(f64, bool)]) -> Vec<(f64, usize, usize)> {
    let mut out: Vec<(f64, usize, usize)> = Vec::new();
    for &(s, l) in sorted {
        match out.last_mut() {
            Some(g) if g.0 == s => {
                if l {
                    g.1 += 1
                } else {
                    g.2 += 1
                }
            }
            _ => out.push((s, l as usize, !l as usize)),
        }
    }
    out
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = class_counts(labels)?;
    let sorted = sorted_by_score(scores, labels)?;
    let (mut below, mut wins) = (0usize, 0.0f64);
    for (_, p, n) in tie_groups(&sorted) {
        wins += (p * below) as f64 + 0.5 * (p * n) as f64;
        below += n;
    }
    Ok(wins / (pos as f64 * neg as f64))
}

/// Highest sensitivity among thresholds `t` (every observed score and
/// `+inf`, predicting positive when `score >= t`) whose specificity is at
/// least `level`.
pub fn sensitivity_at_specificity(scores: &[f64], labels: &[bool], level: f64) -> Result<f64> {
    let (pos, neg) = class_counts(labels)?;
    if !(0.0..=1.0).contains(&level) {
        return Err(Error::Invalid(format!("specificity level {level} outside [0, 1]")));
    }
    let sorted = sorted_by_score(scores, labels)?;
    // Sweep thresholds from +inf downwards.
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut best = 0.0f64;
    let mut check = |tp: usize, fp: usize| {
        let spec = (neg - fp) as f64 / neg as f64;
        if spec >= level {
            best = best.max(tp as f64 / pos as f64);
        }
    };
    check(0, 0);
    for (_, p, n) in tie_groups(&sorted).into_iter().rev() {
        tp += p;
        fp += n;
        check(tp, fp);
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separated_and_tied() {
        let s = [0.1, 0.2, 0.8, 0.9];
        let l = [false, false, true, true];
        assert_eq!(roc_auc(&s, &l).unwrap(), 1.0);
        assert_eq!(sensitivity_at_specificity(&s, &l, 0.9).unwrap(), 1.0);
        let flat = [0.3; 20];
        let labels: Vec<bool> = (0..20).map(|i| i % 2 == 0).collect();
        assert_eq!(roc_auc(&flat, &labels).unwrap(), 0.5);
        assert_eq!(sensitivity_at_specificity(&flat, &labels, 0.9).unwrap(), 0.0);
    }

    #[test]
    fn single_class_is_an_error() {
        assert!(roc_auc(&[0.1, 0.2], &[true, true]).is_err());
        assert!(sensitivity_at_specificity(&[0.1, 0.2], &[false, false], 0.9).is_err());
    }

    #[test]
    fn inverted_scores() {
        let s = [0.9, 0.8, 0.2, 0.1];
        let l = [false, false, true, true];
        assert_eq!(roc_auc(&s, &l).unwrap(), 0.0);
    }
}
