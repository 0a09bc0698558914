//! Subcommand implementations. Every JSON result echoes the effective config.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use vcfq::detector::{Detection, DetectionField};
use vcfq::evaluation::{evaluate as run_evaluation, PatientCase, PredictionSet};
use vcfq::grading::PatientAssessment;
use vcfq::io::{self, DType};
use vcfq::locator::SpineCurve;
use vcfq::phantom::{generate, GroundTruth, PhantomSpec};
use vcfq::pipeline::{self, PipelineConfig};
use vcfq::straighten::{straighten as straighten_volume, StraightenedVolume};

use crate::config::{self, stem, CliError, CliResult};
use crate::ConfigArgs;

pub const GT_SUFFIX: &str = ".gt.json";
pub const PREDICTIONS_SUFFIX: &str = ".predictions.json";

#[derive(Debug, Serialize, Deserialize)]
pub struct LocalizeFile {
    pub config: PipelineConfig,
    pub curve: SpineCurve,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DetectFile {
    pub config: PipelineConfig,
    pub n_candidates: usize,
    pub detections: Vec<Detection>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct GradeFile {
    pub config: PipelineConfig,
    pub assessment: Option<PatientAssessment>,
}

/// Prediction set with the config echo; readable as a bare `PredictionSet`.
#[derive(Debug, Serialize, Deserialize)]
pub struct PredictionsFile {
    pub config: PipelineConfig,
    #[serde(flatten)]
    pub predictions: PredictionSet,
}

fn read_annotations(path: Option<&Path>) -> CliResult<Option<GroundTruth>> {
    path.map(|p| {
        let gt: GroundTruth = io::read_json(p)?;
        gt.validate()?;
        Ok(gt)
    })
    .transpose()
}

fn ensure_dir(dir: &Path) -> CliResult {
    fs::create_dir_all(dir).map_err(|e| vcfq::Error::io(dir, e).into())
}

pub fn phantom(spec_path: &Path, out: &Path, name: Option<String>, nifti: bool) -> CliResult {
    let spec: PhantomSpec = io::read_json(spec_path)?;
    let name = match name.or_else(|| stem(spec_path)) {
        Some(n) => n,
        None => return Err(CliError::invalid("cannot derive an output name; pass --name")),
    };
    let (volume, gt) = generate(&spec)?;
    ensure_dir(out)?;
    io::save_container(&volume, &out.join(format!("{name}.json")), DType::F32)?;
    io::write_json(&out.join(format!("{name}{GT_SUFFIX}")), &gt)?;
    io::write_json(&out.join(format!("{name}.spec.json")), &spec)?;
    if nifti {
        io::save_nifti(&volume, &out.join(format!("{name}.nii")), DType::F32)?;
    }
    Ok(())
}

pub fn localize(
    volume: &Path,
    annotations: Option<&Path>,
    out: &Path,
    probability: Option<&Path>,
    args: &ConfigArgs,
) -> CliResult {
    let cfg = config::load(args)?;
    let gt = read_annotations(annotations)?;
    let locator = pipeline::build_locator(&cfg.locator, gt.as_ref())?;
    let v = io::load_volume(volume)?;
    let pre = pipeline::preprocess(&v, &cfg.preprocess)?;
    let prob = locator.predict(&pre)?;
    let curve = vcfq::locator::localize(&prob, &cfg.locator.localize_config())?;
    if let Some(p) = probability {
        io::save_container(&prob, p, DType::F32)?;
    }
    io::write_json(out, &LocalizeFile { config: cfg, curve })?;
    Ok(())
}

/// Accepts either a `localize` output or a bare curve.
fn read_curve(path: &Path) -> CliResult<SpineCurve> {
    let mut value: Value = io::read_json(path)?;
    if let Some(c) = value.get_mut("curve") {
        value = c.take();
    }
    let curve: SpineCurve =
        serde_json::from_value(value).map_err(|e| CliError::invalid(format!("{}: not a spine curve: {e}", path.display())))?;
    curve
        .validate()
        .map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))?;
    Ok(curve)
}

pub fn straighten(volume: &Path, curve: &Path, out: &Path, args: &ConfigArgs) -> CliResult {
    let cfg = config::load(args)?;
    let curve = read_curve(curve)?;
    let v = io::load_volume(volume)?.normalize_standard()?;
    let s = straighten_volume(&v, &curve, &cfg.straighten)?;
    ensure_dir(out)?;
    s.save(out)?;
    io::save_container(&s.mid_sagittal().to_volume(), &out.join("sagittal.json"), DType::F32)?;
    io::write_json(&out.join("config.json"), &cfg)?;
    Ok(())
}

fn save_field(field: &DetectionField, dir: &Path) -> CliResult {
    ensure_dir(dir)?;
    let (objectness, offsets) = field.to_images();
    io::save_container(&objectness.to_volume(), &dir.join("objectness.json"), DType::F32)?;
    for (c, img) in offsets.iter().enumerate() {
        io::save_container(&img.to_volume(), &dir.join(format!("offset_{c:02}.json")), DType::F32)?;
    }
    Ok(())
}

pub fn detect(
    straightened: &Path,
    annotations: Option<&Path>,
    out: &Path,
    field_dir: Option<&Path>,
    args: &ConfigArgs,
) -> CliResult {
    let cfg = config::load(args)?;
    let gt = read_annotations(annotations)?
        .ok_or_else(|| CliError::invalid("the oracle detector requires --annotations"))?;
    let s = StraightenedVolume::load(straightened)?;
    let sagittal = s.mid_sagittal();
    let (field, n_candidates, detections) = pipeline::detect(&s, &sagittal, &gt, &cfg.detector)?;
    if let Some(dir) = field_dir {
        save_field(&field, dir)?;
    }
    io::write_json(
        out,
        &DetectFile {
            config: cfg,
            n_candidates,
            detections,
        },
    )?;
    Ok(())
}

pub fn grade(
    detections: &Path,
    straightened: Option<&Path>,
    predictions: Option<&Path>,
    out: &Path,
    args: &ConfigArgs,
) -> CliResult {
    let cfg = config::load(args)?;
    let input: DetectFile = io::read_json(detections)?;
    let assessment = pipeline::assess_detections(&input.detections, &cfg.grading)?;
    if let Some(p) = predictions {
        let dir = straightened.ok_or_else(|| CliError::invalid("--predictions needs --straightened"))?;
        let s = StraightenedVolume::load(dir)?;
        let set = pipeline::to_world(&input.detections, assessment.as_ref(), &s)?;
        io::write_json(
            p,
            &PredictionsFile {
                config: cfg.clone(),
                predictions: set,
            },
        )?;
    }
    io::write_json(out, &GradeFile { config: cfg, assessment })?;
    Ok(())
}

/// Files in `dir` ending with `suffix`, keyed by stem.
fn files_by_stem(dir: &Path, suffix: &str) -> CliResult<BTreeMap<String, PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| vcfq::Error::io(dir, e))?;
    let mut out = BTreeMap::new();
    for entry in entries {
        let path = entry.map_err(|e| vcfq::Error::io(dir, e))?.path();
        let is_match = path.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with(suffix));
        if !is_match {
            continue;
        }
        if let Some(id) = stem(&path) {
            if let Some(prev) = out.insert(id.clone(), path.clone()) {
                return Err(CliError::invalid(format!(
                    "patient {id} appears twice: {} and {}",
                    prev.display(),
                    path.display()
                )));
            }
        }
    }
    Ok(out)
}

fn missing(from: &BTreeMap<String, PathBuf>, other: &BTreeMap<String, PathBuf>) -> Vec<String> {
    from.keys().filter(|k| !other.contains_key(*k)).cloned().collect()
}

pub fn evaluate(annotations: &Path, predictions: &Path, out: &Path, csv: Option<&Path>, args: &ConfigArgs) -> CliResult {
    let cfg = config::load(args)?;
    let gts = files_by_stem(annotations, GT_SUFFIX)?;
    let preds = files_by_stem(predictions, PREDICTIONS_SUFFIX)?;
    let no_pred = missing(&gts, &preds);
    let no_gt = missing(&preds, &gts);
    if !no_pred.is_empty() || !no_gt.is_empty() {
        let mut msg = String::from("patient sets differ;");
        if !no_pred.is_empty() {
            msg += &format!(" missing predictions for [{}]", no_pred.join(", "));
        }
        if !no_gt.is_empty() {
            msg += &format!(" missing annotations for [{}]", no_gt.join(", "));
        }
        return Err(CliError::invalid(msg));
    }
    if gts.is_empty() {
        return Err(CliError::invalid(format!("no {GT_SUFFIX} files in {}", annotations.display())));
    }
    let cases = gts
        .iter()
        .map(|(id, gt_path)| {
            let annotation: GroundTruth = io::read_json(gt_path)?;
            annotation.validate()?;
            let predictions: PredictionSet = io::read_json(&preds[id])?;
            Ok(PatientCase {
                id: id.clone(),
                annotation,
                predictions,
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    let report = run_evaluation(&cases, &cfg.evaluation, &cfg.grading)?;
    io::write_json(out, &report)?;
    if let Some(p) = csv {
        io::write_atomic(p, report.to_csv().as_bytes())?;
    }
    print!("{}", report.to_table());
    Ok(())
}

struct Job {
    id: String,
    volume: PathBuf,
    annotations: Option<PathBuf>,
}

fn plan_jobs(volumes: &[PathBuf], annotations: Option<&Path>, annotations_dir: Option<&Path>) -> CliResult<Vec<Job>> {
    if annotations.is_some() && volumes.len() != 1 {
        return Err(CliError::invalid("--annotations pairs with a single --volume; use --annotations-dir"));
    }
    let mut seen = BTreeSet::new();
    volumes
        .iter()
        .map(|v| {
            let id = stem(v).ok_or_else(|| CliError::invalid(format!("cannot derive an id from {}", v.display())))?;
            if !seen.insert(id.clone()) {
                return Err(CliError::invalid(format!("volume id {id} appears twice")));
            }
            let annotations = match (annotations, annotations_dir) {
                (Some(a), _) => Some(a.to_path_buf()),
                (None, Some(dir)) => Some(dir.join(format!("{id}{GT_SUFFIX}"))),
                (None, None) => None,
            };
            Ok(Job {
                id,
                volume: v.clone(),
                annotations,
            })
        })
        .collect()
}

fn run_job(job: &Job, out: &Path, overlay: bool, cfg: &PipelineConfig) -> CliResult {
    let volume = io::load_volume(&job.volume)?;
    let gt = if cfg.needs_annotations() {
        read_annotations(job.annotations.as_deref())?
    } else {
        None
    };
    let output = pipeline::run(&volume, gt.as_ref(), cfg)?;
    let id = &job.id;
    io::write_json(&out.join(format!("{id}.result.json")), &output.result)?;
    io::write_json(&out.join(format!("{id}.timing.json")), &output.timing)?;
    if let Some(set) = &output.result.predictions {
        io::write_json(
            &out.join(format!("{id}{PREDICTIONS_SUFFIX}")),
            &PredictionsFile {
                config: cfg.clone(),
                predictions: set.clone(),
            },
        )?;
    }
    if overlay {
        if let Some(img) = output.overlay() {
            io::write_atomic(&out.join(format!("{id}.overlay.ppm")), &img.to_ppm())?;
        }
    }
    Ok(())
}

pub fn pipeline(
    volumes: &[PathBuf],
    annotations: Option<&Path>,
    annotations_dir: Option<&Path>,
    out: &Path,
    overlay: bool,
    args: &ConfigArgs,
) -> CliResult {
    let cfg = config::load(args)?;
    let jobs = plan_jobs(volumes, annotations, annotations_dir)?;
    ensure_dir(out)?;
    let results: Vec<CliResult> = jobs
        .par_iter()
        .map(|job| run_job(job, out, overlay, &cfg).map_err(|e| e.context(&job.id)))
        .collect();
    results.into_iter().collect()
}
