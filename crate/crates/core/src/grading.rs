//! Genant heights, index and severity grades.

use serde::{Deserialize, Serialize};

use crate::detector::VertebraKeypoints;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Grade {
    Normal,
    Mild,
    Moderate,
    Severe,
}

impl Grade {
    pub fn as_str(self) -> &'static str {
        match self {
            Grade::Normal => "normal",
            Grade::Mild => "mild",
            Grade::Moderate => "moderate",
            Grade::Severe => "severe",
        }
    }
}

/// Upper (inclusive) bounds of the mild, moderate and severe classes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradeThresholds {
    pub mild: f64,
    pub moderate: f64,
    pub severe: f64,
}

impl Default for GradeThresholds {
    fn default() -> Self {
        Self {
            mild: 0.8,
            moderate: 0.74,
            severe: 0.6,
        }
    }
}

impl GradeThresholds {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.severe && self.severe < self.moderate && self.moderate < self.mild && self.mild < 1.0) {
            return Err(Error::Invalid(format!(
                "grade thresholds must satisfy 0 < severe < moderate < mild < 1, got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn grade(&self, g: f64) -> Grade {
        if g <= self.severe {
            Grade::Severe
        } else if g <= self.moderate {
            Grade::Moderate
        } else if g <= self.mild {
            Grade::Mild
        } else {
            Grade::Normal
        }
    }
}

/// Anterior, middle and posterior heights in mm.
pub type Heights = [f64; 3];

pub fn heights(kp: &VertebraKeypoints) -> Result<Heights> {
    let h = kp.raw_heights();
    if h.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
        return Err(Error::Degenerate(format!("non-positive vertebra heights {h:?}")));
    }
    Ok(h)
}

pub fn genant_index(h: Heights) -> Result<f64> {
    if h.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
        return Err(Error::Invalid(format!("heights must be positive, got {h:?}")));
    }
    let lo = h.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = h.iter().copied().fold(0.0, f64::max);
    Ok(lo / hi)
}

pub fn compute_grade(g: f64) -> Grade {
    GradeThresholds::default().grade(g)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenantAssessment {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub heights_mm: Heights,
    pub genant: f64,
    pub grade: Grade,
}

impl GenantAssessment {
    pub fn deformity(&self) -> f64 {
        1.0 - self.genant
    }
}

pub fn assess(kp: &VertebraKeypoints, thresholds: &GradeThresholds) -> Result<GenantAssessment> {
    let h = heights(kp)?;
    let genant = genant_index(h)?;
    Ok(GenantAssessment {
        label: kp.label.clone(),
        heights_mm: h,
        genant,
        grade: thresholds.grade(genant),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientSummary {
    pub genant: f64,
    pub grade: Grade,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientAssessment {
    pub vertebrae: Vec<GenantAssessment>,
    pub patient: PatientSummary,
}

/// Patient-level grade from the most severe (minimal G) vertebra.
pub fn aggregate_patient(assessments: Vec<GenantAssessment>, thresholds: &GradeThresholds) -> Result<PatientAssessment> {
    let genant = assessments
        .iter()
        .map(|a| a.genant)
        .reduce(f64::min)
        .ok_or_else(|| Error::Invalid("cannot aggregate an empty set of vertebrae".into()))?;
    Ok(PatientAssessment {
        vertebrae: assessments,
        patient: PatientSummary {
            genant,
            grade: thresholds.grade(genant),
        },
    })
}
