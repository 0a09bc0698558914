use super::{encode, Grid2, TargetField, VertebraKeypoints, N_OFFSETS};
use crate::error::{Error, Result};

pub const DEFAULT_OBJECTNESS_RADIUS_MM: f64 = 10.0;

#[derive(Debug, Clone, PartialEq)]
pub struct TargetVertebra {
    pub keypoints: VertebraKeypoints,
    pub genant: f64,
}

/// Objectness is 1 on pixels strictly closer than `radius_mm` to the
/// nearest vertebra centroid; those pixels encode that vertebra.
/// Equidistant centroids resolve to the lower vertebra index.
pub fn make_targets(vertebrae: &[TargetVertebra], grid: Grid2, radius_mm: f64) -> Result<TargetField> {
    if !(radius_mm > 0.0 && radius_mm.is_finite()) {
        return Err(Error::Invalid(format!("objectness radius must be positive, got {radius_mm}")));
    }
    if let Some(v) = vertebrae.iter().find(|v| !(v.genant > 0.0 && v.genant <= 1.0)) {
        return Err(Error::Invalid(format!("target Genant index {} outside (0, 1]", v.genant)));
    }
    let centroids: Vec<_> = vertebrae.iter().map(|v| v.keypoints.centroid()).collect();
    let n = grid.len();
    let mut field = TargetField {
        grid,
        objectness: vec![false; n],
        offsets: vec![[0.0; N_OFFSETS]; n],
        genant: vec![0.0; n],
        owner: vec![None; n],
    };
    for idx in 0..n {
        let a = grid.anchor(idx);
        let nearest = centroids
            .iter()
            .enumerate()
            .map(|(k, c)| (k, (c[0] - a[0]).hypot(c[1] - a[1])))
            .fold(None, |best: Option<(usize, f64)>, (k, d)| match best {
                Some((_, bd)) if bd <= d => best,
                _ => Some((k, d)),
            });
        if let Some((k, d)) = nearest {
            if d < radius_mm {
                field.objectness[idx] = true;
                field.offsets[idx] = encode(&vertebrae[k].keypoints, a);
                field.genant[idx] = vertebrae[k].genant;
                field.owner[idx] = Some(k);
            }
        }
    }
    Ok(field)
}
