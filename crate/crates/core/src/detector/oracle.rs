use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{make_targets, DetectionField, DetectionPredictor, Grid2, TargetVertebra, VertebraKeypoints};
use crate::error::{Error, Result};
use crate::volume::Image2;

/// Ground-truth detection field: exact target objectness and encoded
/// offsets, plus iid Gaussian offset noise on positive pixels.
pub fn oracle_predictor(
    keypoints: &[VertebraKeypoints],
    grid: Grid2,
    radius_mm: f64,
    noise_sigma_mm: f64,
    seed: u64,
) -> Result<DetectionField> {
    if !(noise_sigma_mm >= 0.0 && noise_sigma_mm.is_finite()) {
        return Err(Error::Invalid(format!("noise sigma must be non-negative, got {noise_sigma_mm}")));
    }
    let vertebrae: Vec<_> = keypoints
        .iter()
        .map(|kp| TargetVertebra {
            keypoints: kp.clone(),
            genant: 1.0,
        })
        .collect();
    let target = make_targets(&vertebrae, grid, radius_mm)?;
    let mut offsets = target.offsets;
    if noise_sigma_mm > 0.0 {
        let normal = Normal::new(0.0, noise_sigma_mm).expect("finite sigma");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (e, _) in offsets.iter_mut().zip(&target.objectness).filter(|(_, &o)| o) {
            e.iter_mut().for_each(|c| *c += normal.sample(&mut rng));
        }
    }
    let objectness = target.objectness.iter().map(|&o| if o { 1.0 } else { 0.0 }).collect();
    DetectionField::new(grid, objectness, offsets)
}

/// Detection predictor backed by known sagittal keypoints.
#[derive(Debug, Clone)]
pub struct OracleDetector {
    pub keypoints: Vec<VertebraKeypoints>,
    pub radius_mm: f64,
    pub noise_sigma_mm: f64,
    pub seed: u64,
}

impl DetectionPredictor for OracleDetector {
    fn predict(&self, image: &Image2) -> Result<DetectionField> {
        oracle_predictor(&self.keypoints, Grid2::of_image(image), self.radius_mm, self.noise_sigma_mm, self.seed)
    }
}
