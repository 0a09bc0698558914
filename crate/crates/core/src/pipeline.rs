//! End-to-end pipeline: preprocess, localize, straighten, detect, suppress,
//! grade, and map the detections back to world coordinates.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::detector::{decode_field, nms, Detection, DetectionField, DetectionPredictor, NmsConfig, OracleDetector, DEFAULT_OBJECTNESS_RADIUS_MM};
use crate::error::{Error, Result};
use crate::evaluation::{EvalConfig, Prediction, PredictionSet};
use crate::grading::{aggregate_patient, assess, GradeThresholds, PatientAssessment};
use crate::locator::{localize, HeuristicLocator, LocalizeConfig, ProbabilityPredictor, SoftArgmaxMode, SpineCurve};
use crate::overlay::{render_overlay, Rgb};
use crate::phantom::{GroundTruth, OracleLocator};
use crate::straighten::{straighten, StraightenConfig, StraightenedVolume};
use crate::volume::{Image2, Volume};

pub const LOCALIZATION_SPACING_MM: [f64; 3] = [2.0, 2.0, 4.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    /// Min-max to `[0, 1]`.
    Unit,
    /// Zero mean, unit variance.
    Standard,
}

impl Normalization {
    pub fn apply(self, v: &Volume) -> Result<Volume> {
        match self {
            Normalization::Unit => v.normalize_unit(),
            Normalization::Standard => v.normalize_standard(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub spacing_mm: [f64; 3],
    pub normalization: Normalization,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            spacing_mm: LOCALIZATION_SPACING_MM,
            normalization: Normalization::Unit,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LocatorKind {
    /// Gaussian tube around the annotated curve.
    Oracle,
    /// Bone-threshold distance map.
    Heuristic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LocatorConfig {
    pub predictor: LocatorKind,
    /// Width of the oracle probability tube.
    pub oracle_sigma_mm: f64,
    pub extrapolate_mm: f64,
    pub soft_argmax: SoftArgmaxMode,
}

impl LocatorConfig {
    pub fn localize_config(&self) -> LocalizeConfig {
        LocalizeConfig {
            extrapolate_mm: self.extrapolate_mm,
            soft_argmax: self.soft_argmax,
        }
    }
}

impl Default for LocatorConfig {
    fn default() -> Self {
        Self {
            predictor: LocatorKind::Heuristic,
            oracle_sigma_mm: 4.0,
            extrapolate_mm: 0.0,
            soft_argmax: SoftArgmaxMode::Normalize,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DetectorKind {
    /// Field built from annotated keypoints, optionally with offset noise.
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub predictor: DetectorKind,
    pub score_thresh: f64,
    pub closeness_thresh: f64,
    pub keep_degenerate: bool,
    pub radius_mm: f64,
    pub noise_sigma_mm: f64,
    pub seed: u64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        let nms = NmsConfig::default();
        Self {
            predictor: DetectorKind::Oracle,
            score_thresh: nms.score_thresh,
            closeness_thresh: nms.closeness_thresh,
            keep_degenerate: nms.keep_degenerate,
            radius_mm: DEFAULT_OBJECTNESS_RADIUS_MM,
            noise_sigma_mm: 0.0,
            seed: 0,
        }
    }
}

impl DetectorConfig {
    pub fn nms(&self) -> NmsConfig {
        NmsConfig {
            score_thresh: self.score_thresh,
            closeness_thresh: self.closeness_thresh,
            keep_degenerate: self.keep_degenerate,
        }
    }
}

/// Last stage to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Localize,
    Straighten,
    Detect,
    Grade,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Localize => "localize",
            Stage::Straighten => "straighten",
            Stage::Detect => "detect",
            Stage::Grade => "grade",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub preprocess: PreprocessConfig,
    pub locator: LocatorConfig,
    pub straighten: StraightenConfig,
    pub detector: DetectorConfig,
    pub grading: GradeThresholds,
    pub evaluation: EvalConfig,
    pub stop_after: Stage,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            preprocess: PreprocessConfig::default(),
            locator: LocatorConfig::default(),
            straighten: StraightenConfig::default(),
            detector: DetectorConfig::default(),
            grading: GradeThresholds::default(),
            evaluation: EvalConfig::default(),
            stop_after: Stage::Grade,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.preprocess.spacing_mm.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return bad("preprocess.spacing_mm must be positive".into());
        }
        let l = &self.locator;
        if !(l.oracle_sigma_mm > 0.0 && l.oracle_sigma_mm.is_finite()) {
            return bad("locator.oracle_sigma_mm must be positive".into());
        }
        if !(l.extrapolate_mm >= 0.0 && l.extrapolate_mm.is_finite()) {
            return bad("locator.extrapolate_mm must be non-negative".into());
        }
        if let SoftArgmaxMode::Softmax { temperature } = l.soft_argmax {
            if !(temperature > 0.0 && temperature.is_finite()) {
                return bad("locator.soft_argmax.temperature must be positive".into());
            }
        }
        let s = &self.straighten;
        if !(s.step_mm > 0.0 && s.step_mm.is_finite()) {
            return bad("straighten.step_mm must be positive".into());
        }
        if s.half_extent_mm.iter().any(|h| !(*h > 0.0 && h.is_finite())) {
            return bad("straighten.half_extent_mm must be positive".into());
        }
        let d = &self.detector;
        if !(0.0..=1.0).contains(&d.score_thresh) || !(0.0..=1.0).contains(&d.closeness_thresh) {
            return bad("detector thresholds must lie in [0, 1]".into());
        }
        if !(d.radius_mm > 0.0 && d.radius_mm.is_finite()) {
            return bad("detector.radius_mm must be positive".into());
        }
        if !(d.noise_sigma_mm >= 0.0 && d.noise_sigma_mm.is_finite()) {
            return bad("detector.noise_sigma_mm must be non-negative".into());
        }
        self.grading.validate()?;
        self.evaluation.validate()
    }

    /// Whether any stage needs annotations.
    pub fn needs_annotations(&self) -> bool {
        self.locator.predictor == LocatorKind::Oracle || self.stop_after >= Stage::Detect
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridInfo {
    pub shape: Vec<usize>,
    pub spacing_mm: Vec<f64>,
    pub origin_mm: Vec<f64>,
}

impl GridInfo {
    fn of(v: &Volume) -> Self {
        Self {
            shape: v.shape().to_vec(),
            spacing_mm: v.spacing().to_vec(),
            origin_mm: v.origin().to_vec(),
        }
    }
}

/// Deterministic pipeline output; timing is kept separately.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineResult {
    pub config: PipelineConfig,
    pub input: GridInfo,
    pub localization_grid: GridInfo,
    pub curve: SpineCurve,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub straightened: Option<GridInfo>,
    /// Sagittal detections after suppression, ordered bottom to top.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detections: Option<Vec<Detection>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_candidates: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub assessment: Option<PatientAssessment>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub predictions: Option<PredictionSet>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTime {
    pub stage: String,
    pub seconds: f64,
}

/// Result plus the intermediate artifacts.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub result: PipelineResult,
    pub probability: Volume,
    pub straightened: Option<StraightenedVolume>,
    pub sagittal: Option<Image2>,
    pub field: Option<DetectionField>,
    pub timing: Vec<StageTime>,
}

impl PipelineOutput {
    /// Sagittal overlay of the graded detections, if detection ran.
    pub fn overlay(&self) -> Option<Rgb> {
        let img = self.sagittal.as_ref()?;
        let dets = self.result.detections.as_ref()?;
        let graded: Vec<(Detection, f64)> = match &self.result.assessment {
            Some(a) => dets.iter().cloned().zip(a.vertebrae.iter().map(|v| v.genant)).collect(),
            None => Vec::new(),
        };
        Some(render_overlay(img, &graded))
    }
}

struct Timer(Vec<StageTime>);

impl Timer {
    fn run<T>(&mut self, stage: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let t0 = Instant::now();
        let out = f().map_err(|e| Error::Stage {
            stage,
            source: Box::new(e),
        });
        self.0.push(StageTime {
            stage: stage.to_string(),
            seconds: t0.elapsed().as_secs_f64(),
        });
        out
    }
}

fn require(gt: Option<&GroundTruth>, what: &str) -> Result<GroundTruth> {
    gt.cloned()
        .ok_or_else(|| Error::Invalid(format!("the oracle {what} requires annotations")))
}

/// Resampling to the localization grid and intensity normalization.
pub fn preprocess(volume: &Volume, cfg: &PreprocessConfig) -> Result<Volume> {
    cfg.normalization.apply(&volume.resample(cfg.spacing_mm)?)
}

pub fn build_locator(cfg: &LocatorConfig, annotations: Option<&GroundTruth>) -> Result<Box<dyn ProbabilityPredictor>> {
    Ok(match cfg.predictor {
        LocatorKind::Heuristic => Box::new(HeuristicLocator),
        LocatorKind::Oracle => Box::new(OracleLocator {
            gt: require(annotations, "locator")?,
            sigma_mm: cfg.oracle_sigma_mm,
        }),
    })
}

/// Runs the pipeline on one volume. Annotations are needed by the oracle
/// predictors only.
pub fn run(volume: &Volume, annotations: Option<&GroundTruth>, cfg: &PipelineConfig) -> Result<PipelineOutput> {
    cfg.validate()?;
    let locator = build_locator(&cfg.locator, annotations)?;
    let oracle_gt = match (cfg.stop_after >= Stage::Detect, cfg.detector.predictor) {
        (true, DetectorKind::Oracle) => Some(require(annotations, "detector")?),
        (false, _) => None,
    };

    let mut timer = Timer(Vec::new());
    let pre = timer.run("preprocess", || preprocess(volume, &cfg.preprocess))?;
    let (probability, curve) = timer.run("localize", || {
        let p = locator.predict(&pre)?;
        let c = localize(&p, &cfg.locator.localize_config())?;
        Ok((p, c))
    })?;
    let mut result = PipelineResult {
        config: cfg.clone(),
        input: GridInfo::of(volume),
        localization_grid: GridInfo::of(&pre),
        curve: curve.clone(),
        straightened: None,
        detections: None,
        n_candidates: None,
        assessment: None,
        predictions: None,
    };
    let mut out = PipelineOutput {
        result: result.clone(),
        probability,
        straightened: None,
        sagittal: None,
        field: None,
        timing: Vec::new(),
    };
    if cfg.stop_after < Stage::Straighten {
        out.timing = timer.0;
        return Ok(out);
    }

    let s = timer.run("straighten", || straighten(&volume.normalize_standard()?, &curve, &cfg.straighten))?;
    let sagittal = s.mid_sagittal();
    result.straightened = Some(GridInfo::of(&s.volume));

    if let Some(gt) = oracle_gt {
        let (field, candidates, kept) = timer.run("detect", || detect(&s, &sagittal, &gt, &cfg.detector))?;
        result.n_candidates = Some(candidates);
        if cfg.stop_after >= Stage::Grade {
            let (assessment, predictions) = timer.run("grade", || grade(&kept, &s, &cfg.grading))?;
            result.assessment = assessment;
            result.predictions = Some(predictions);
        }
        result.detections = Some(kept);
        out.field = Some(field);
    }
    out.result = result;
    out.straightened = Some(s);
    out.sagittal = Some(sagittal);
    out.timing = timer.0;
    Ok(out)
}

/// Oracle detection on the mid-sagittal image, decoding and suppression.
/// Returns the field, the number of decoded candidates and the kept
/// detections ordered bottom to top.
pub fn detect(
    s: &StraightenedVolume,
    sagittal: &Image2,
    gt: &GroundTruth,
    cfg: &DetectorConfig,
) -> Result<(DetectionField, usize, Vec<Detection>)> {
    let keypoints = gt
        .vertebrae
        .iter()
        .filter_map(|v| match v.sagittal_keypoints(s) {
            Ok(kp) => Some(kp),
            Err(e) => {
                log::warn!("vertebra {} cannot be mapped into the straightened volume: {e}", v.label);
                None
            }
        })
        .collect();
    let predictor = match cfg.predictor {
        DetectorKind::Oracle => OracleDetector {
            keypoints,
            radius_mm: cfg.radius_mm,
            noise_sigma_mm: cfg.noise_sigma_mm,
            seed: cfg.seed,
        },
    };
    let field = predictor.predict(sagittal)?;
    let candidates = decode_field(&field, cfg.score_thresh);
    let mut kept = nms(&candidates, &cfg.nms());
    kept.sort_by(|a, b| a.keypoints().centroid()[1].total_cmp(&b.keypoints().centroid()[1]));
    Ok((field, candidates.len(), kept))
}

/// Genant assessment of each detection plus the patient summary; `None`
/// when nothing was detected.
pub fn assess_detections(detections: &[Detection], thresholds: &GradeThresholds) -> Result<Option<PatientAssessment>> {
    let assessments = detections
        .iter()
        .map(|d| assess(&d.keypoints(), thresholds))
        .collect::<Result<Vec<_>>>()?;
    if assessments.is_empty() {
        log::warn!("no vertebrae detected");
        return Ok(None);
    }
    aggregate_patient(assessments, thresholds).map(Some)
}

/// Maps graded sagittal detections back to world coordinates.
pub fn to_world(detections: &[Detection], assessment: Option<&PatientAssessment>, s: &StraightenedVolume) -> Result<PredictionSet> {
    let genants: Vec<f64> = assessment.map(|a| a.vertebrae.iter().map(|v| v.genant).collect()).unwrap_or_default();
    if genants.len() != detections.len() {
        return Err(Error::Invalid("assessment does not cover every detection".into()));
    }
    let vertebrae = detections
        .iter()
        .zip(genants)
        .map(|(d, genant)| {
            let mut keypoints_mm = [[0.0; 3]; 6];
            for (dst, p) in keypoints_mm.iter_mut().zip(d.points) {
                *dst = s.unstraighten_point(p)?;
            }
            Ok(Prediction {
                label: None,
                centroid_mm: s.unstraighten_point(d.keypoints().centroid())?,
                keypoints_mm,
                genant,
                score: d.score,
            })
        })
        .collect::<Result<_>>()?;
    Ok(PredictionSet { vertebrae })
}

/// Grades detections and maps them back to world coordinates.
pub fn grade(
    detections: &[Detection],
    s: &StraightenedVolume,
    thresholds: &GradeThresholds,
) -> Result<(Option<PatientAssessment>, PredictionSet)> {
    let assessment = assess_detections(detections, thresholds)?;
    let predictions = to_world(detections, assessment.as_ref(), s)?;
    Ok((assessment, predictions))
}
