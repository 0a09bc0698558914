//! Matching predictions to annotations and the detection and
//! classification metrics.
//!
//! Targets missed by the detector enter classification with deformity 0,
//! so a miss counts as a confidently healthy call. Unmatched predictions
//! carry no label and only affect precision.

mod matching;
mod roc;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detector::N_KEYPOINTS;
use crate::error::{Error, Result};
use crate::grading::{Grade, GradeThresholds};
use crate::phantom::GroundTruth;

pub use matching::{assign, match_biou, match_centroid, precision_recall, project_sagittal, MatchPair, MatchResult};
pub use roc::{roc_auc, sensitivity_at_specificity};

pub const DEFAULT_BIOU_THRESHOLD: f64 = 0.1;
pub const DEFAULT_CENTROID_THRESHOLD_MM: f64 = 20.0;
pub const DEFAULT_SPECIFICITY: f64 = 0.9;

/// One predicted vertebra in world coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub centroid_mm: [f64; 3],
    pub keypoints_mm: [[f64; 3]; N_KEYPOINTS],
    pub genant: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PredictionSet {
    pub vertebrae: Vec<Prediction>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchMode {
    Biou,
    Centroid,
}

/// Binary grade splits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "G0_vs_G1-3")]
    NormalVsFractured,
    /// Mild vertebrae are left out.
    #[serde(rename = "G0_vs_G2-3")]
    NormalVsModerateSevere,
    #[serde(rename = "G0-1_vs_G2-3")]
    NormalMildVsModerateSevere,
}

impl Task {
    pub const ALL: [Task; 3] = [
        Task::NormalVsFractured,
        Task::NormalVsModerateSevere,
        Task::NormalMildVsModerateSevere,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Task::NormalVsFractured => "G0_vs_G1-3",
            Task::NormalVsModerateSevere => "G0_vs_G2-3",
            Task::NormalMildVsModerateSevere => "G0-1_vs_G2-3",
        }
    }

    /// Positive/negative label of a true grade, `None` when excluded.
    pub fn label(self, g: Grade) -> Option<bool> {
        match (self, g) {
            (_, Grade::Normal) => Some(false),
            (Task::NormalVsFractured, _) => Some(true),
            (Task::NormalVsModerateSevere, Grade::Mild) => None,
            (Task::NormalMildVsModerateSevere, Grade::Mild) => Some(false),
            _ => Some(true),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub mode: MatchMode,
    pub biou_threshold: f64,
    pub centroid_threshold_mm: f64,
    /// Greedy one-to-one assignment; `false` lets each target take its
    /// closest prediction independently.
    pub one_to_one: bool,
    pub tasks: Vec<Task>,
    pub spec_levels: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            mode: MatchMode::Biou,
            biou_threshold: DEFAULT_BIOU_THRESHOLD,
            centroid_threshold_mm: DEFAULT_CENTROID_THRESHOLD_MM,
            one_to_one: true,
            tasks: Task::ALL.to_vec(),
            spec_levels: vec![DEFAULT_SPECIFICITY],
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.biou_threshold) {
            return Err(Error::Invalid(format!("biou_threshold {} outside [0, 1]", self.biou_threshold)));
        }
        if !(self.centroid_threshold_mm >= 0.0) {
            return Err(Error::Invalid("centroid_threshold_mm must be non-negative".into()));
        }
        if self.spec_levels.iter().any(|l| !(0.0..=1.0).contains(l)) {
            return Err(Error::Invalid("specificity levels must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Annotations and predictions of one patient.
#[derive(Debug, Clone)]
pub struct PatientCase {
    pub id: String,
    pub annotation: GroundTruth,
    pub predictions: PredictionSet,
}

pub fn match_case(case: &PatientCase, cfg: &EvalConfig) -> MatchResult {
    let (targets, preds) = (&case.annotation.vertebrae, &case.predictions.vertebrae);
    match cfg.mode {
        MatchMode::Biou => {
            let t: Vec<_> = targets.iter().map(|v| project_sagittal(&v.keypoints_mm)).collect();
            let p: Vec<_> = preds.iter().map(|v| project_sagittal(&v.keypoints_mm)).collect();
            match_biou(&t, &p, cfg.biou_threshold, cfg.one_to_one)
        }
        MatchMode::Centroid => {
            let t: Vec<_> = targets.iter().map(|v| v.centroid_mm).collect();
            let p: Vec<_> = preds.iter().map(|v| v.centroid_mm).collect();
            match_centroid(&t, &p, cfg.centroid_threshold_mm, cfg.one_to_one)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
}

impl DetectionCounts {
    fn of(m: &MatchResult) -> Self {
        let (precision, recall) = precision_recall(m);
        Self {
            tp: m.true_positives(),
            fp: m.false_positives(),
            fn_: m.false_negatives(),
            precision,
            recall,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanPrecisionRecall {
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub pooled: DetectionCounts,
    pub per_patient_mean: MeanPrecisionRecall,
}

/// Classification metrics; `None` when only one class is present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub n_positive: usize,
    pub n_negative: usize,
    pub roc_auc: Option<f64>,
    /// Keyed by the specificity level.
    pub sensitivity_at_specificity: BTreeMap<String, Option<f64>>,
}

impl ClassMetrics {
    pub fn compute(samples: &[(f64, bool)], levels: &[f64]) -> Result<Self> {
        let scores: Vec<f64> = samples.iter().map(|s| s.0).collect();
        let labels: Vec<bool> = samples.iter().map(|s| s.1).collect();
        let n_positive = labels.iter().filter(|&&l| l).count();
        let both = n_positive > 0 && n_positive < labels.len();
        let roc_auc = both.then(|| roc_auc(&scores, &labels)).transpose()?;
        let sensitivity_at_specificity = levels
            .iter()
            .map(|&l| Ok((format_level(l), both.then(|| sensitivity_at_specificity(&scores, &labels, l)).transpose()?)))
            .collect::<Result<_>>()?;
        Ok(Self {
            n_positive,
            n_negative: labels.len() - n_positive,
            roc_auc,
            sensitivity_at_specificity,
        })
    }
}

fn format_level(l: f64) -> String {
    format!("{l}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub task: Task,
    pub vertebra: ClassMetrics,
    pub patient: ClassMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientReport {
    pub id: String,
    pub detection: DetectionCounts,
    pub true_genant: f64,
    pub true_grade: Grade,
    /// Maximal deformity `1 - G` over the patient's targets.
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config: EvalConfig,
    pub thresholds: GradeThresholds,
    pub n_patients: usize,
    pub detection: DetectionReport,
    pub tasks: Vec<TaskReport>,
    pub patients: Vec<PatientReport>,
}

struct CaseOutcome {
    report: PatientReport,
    matches: MatchResult,
    /// (true grade, deformity score) per target.
    vertebrae: Vec<(Grade, f64)>,
}

fn evaluate_case(case: &PatientCase, cfg: &EvalConfig, thresholds: &GradeThresholds) -> Result<CaseOutcome> {
    let targets = &case.annotation.vertebrae;
    if targets.is_empty() {
        return Err(Error::Invalid(format!("patient {} has no annotated vertebrae", case.id)));
    }
    let m = match_case(case, cfg);
    let by_target = m.prediction_for_targets(targets.len());
    let vertebrae: Vec<(Grade, f64)> = targets
        .iter()
        .zip(&by_target)
        .map(|(t, p)| {
            let score = p.map_or(0.0, |p| 1.0 - case.predictions.vertebrae[p].genant);
            (thresholds.grade(t.genant), score)
        })
        .collect();
    let true_genant = targets.iter().map(|t| t.genant).fold(f64::INFINITY, f64::min);
    let score = vertebrae.iter().map(|v| v.1).fold(f64::NEG_INFINITY, f64::max);
    Ok(CaseOutcome {
        report: PatientReport {
            id: case.id.clone(),
            detection: DetectionCounts::of(&m),
            true_genant,
            true_grade: thresholds.grade(true_genant),
            score,
        },
        matches: m,
        vertebrae,
    })
}

/// Evaluates all cases; output order follows the patient id.
pub fn evaluate(cases: &[PatientCase], cfg: &EvalConfig, thresholds: &GradeThresholds) -> Result<MetricsReport> {
    cfg.validate()?;
    thresholds.validate()?;
    if cases.is_empty() {
        return Err(Error::Invalid("no cases to evaluate".into()));
    }
    let mut order: Vec<&PatientCase> = cases.iter().collect();
    order.sort_by(|a, b| a.id.cmp(&b.id));
    if let Some(w) = order.windows(2).find(|w| w[0].id == w[1].id) {
        return Err(Error::Invalid(format!("duplicate patient id {}", w[0].id)));
    }
    let outcomes: Vec<CaseOutcome> = order.par_iter().map(|c| evaluate_case(c, cfg, thresholds)).collect::<Result<_>>()?;

    let pooled = outcomes.iter().fold(MatchResult::default(), |mut acc, o| {
        let base_t = acc.pairs.len() + acc.unmatched_targets.len();
        let base_p = acc.pairs.len() + acc.unmatched_predictions.len();
        acc.pairs.extend(o.matches.pairs.iter().map(|p| MatchPair {
            target: p.target + base_t,
            prediction: p.prediction + base_p,
            closeness: p.closeness,
        }));
        acc.unmatched_targets.extend(o.matches.unmatched_targets.iter().map(|t| t + base_t));
        acc.unmatched_predictions.extend(o.matches.unmatched_predictions.iter().map(|p| p + base_p));
        acc
    });
    let n = outcomes.len() as f64;
    let per_patient_mean = MeanPrecisionRecall {
        precision: outcomes.iter().map(|o| o.report.detection.precision).sum::<f64>() / n,
        recall: outcomes.iter().map(|o| o.report.detection.recall).sum::<f64>() / n,
    };

    let tasks = cfg
        .tasks
        .iter()
        .map(|&task| {
            let vert: Vec<(f64, bool)> = outcomes
                .iter()
                .flat_map(|o| o.vertebrae.iter())
                .filter_map(|&(g, s)| task.label(g).map(|l| (s, l)))
                .collect();
            let pat: Vec<(f64, bool)> = outcomes
                .iter()
                .filter_map(|o| task.label(o.report.true_grade).map(|l| (o.report.score, l)))
                .collect();
            Ok(TaskReport {
                task,
                vertebra: ClassMetrics::compute(&vert, &cfg.spec_levels)?,
                patient: ClassMetrics::compute(&pat, &cfg.spec_levels)?,
            })
        })
        .collect::<Result<_>>()?;

    Ok(MetricsReport {
        config: cfg.clone(),
        thresholds: *thresholds,
        n_patients: outcomes.len(),
        detection: DetectionReport {
            pooled: DetectionCounts::of(&pooled),
            per_patient_mean,
        },
        tasks,
        patients: outcomes.into_iter().map(|o| o.report).collect(),
    })
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"))
}

impl MetricsReport {
    /// Flat `scope,task,metric,value` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("scope,task,metric,value\n");
        let d = &self.detection;
        for (metric, v) in [
            ("precision", d.pooled.precision),
            ("recall", d.pooled.recall),
            ("tp", d.pooled.tp as f64),
            ("fp", d.pooled.fp as f64),
            ("fn", d.pooled.fn_ as f64),
        ] {
            let _ = writeln!(out, "detection_pooled,,{metric},{v}");
        }
        let _ = writeln!(out, "detection_per_patient,,precision,{}", d.per_patient_mean.precision);
        let _ = writeln!(out, "detection_per_patient,,recall,{}", d.per_patient_mean.recall);
        for t in &self.tasks {
            for (scope, m) in [("vertebra", &t.vertebra), ("patient", &t.patient)] {
                let name = t.task.name();
                let _ = writeln!(out, "{scope},{name},n_positive,{}", m.n_positive);
                let _ = writeln!(out, "{scope},{name},n_negative,{}", m.n_negative);
                let _ = writeln!(out, "{scope},{name},roc_auc,{}", m.roc_auc.map_or(String::new(), |v| v.to_string()));
                for (level, v) in &m.sensitivity_at_specificity {
                    let _ = writeln!(out, "{scope},{name},sens_at_spec_{level},{}", v.map_or(String::new(), |v| v.to_string()));
                }
            }
        }
        out
    }

    /// Human-readable summary table.
    pub fn to_table(&self) -> String {
        let d = &self.detection;
        let mut out = String::new();
        let _ = writeln!(out, "patients: {}", self.n_patients);
        let _ = writeln!(
            out,
            "detection  pooled P={:.4} R={:.4} (TP {} FP {} FN {})  per-patient P={:.4} R={:.4}",
            d.pooled.precision, d.pooled.recall, d.pooled.tp, d.pooled.fp, d.pooled.fn_, d.per_patient_mean.precision, d.per_patient_mean.recall
        );
        let _ = writeln!(out, "{:<14} {:<9} {:>5} {:>5} {:>8} {:>12}", "task", "level", "pos", "neg", "auc", "sens@spec");
        for t in &self.tasks {
            for (scope, m) in [("vertebra", &t.vertebra), ("patient", &t.patient)] {
                let sens = m
                    .sensitivity_at_specificity
                    .iter()
                    .map(|(l, v)| format!("{}@{l}", fmt_opt(*v)))
                    .collect::<Vec<_>>()
                    .join(" ");
                let _ = writeln!(
                    out,
                    "{:<14} {:<9} {:>5} {:>5} {:>8} {:>12}",
                    t.task.name(),
                    scope,
                    m.n_positive,
                    m.n_negative,
                    fmt_opt(m.roc_auc),
                    sens
                );
            }
        }
        out
    }
}
