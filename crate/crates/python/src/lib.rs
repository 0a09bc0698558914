//! Python bindings. Structured values cross the boundary as JSON strings;
//! volume samples as little-endian `float32` bytes.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};
use vcfq::detector::VertebraKeypoints;
use vcfq::phantom::{generate, PhantomSpec};
use vcfq::pipeline::PipelineConfig;
use vcfq::Error;

fn to_py(e: Error) -> PyErr {
    match e.root() {
        Error::Invalid(_)
        | Error::PhantomSpec(_)
        | Error::Geometry(_)
        | Error::Json { .. }
        | Error::Format { .. }
        | Error::SingleClass(_)
        | Error::Degenerate(_)
        | Error::NonFinite(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn parse<T: serde::de::DeserializeOwned>(json: &str, what: &str) -> PyResult<T> {
    serde_json::from_str(json).map_err(|e| PyValueError::new_err(format!("invalid {what}: {e}")))
}

fn dump<T: serde::Serialize>(value: &T) -> PyResult<String> {
    serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

/// Generates a phantom; returns a dict with `shape`, `spacing_mm`,
/// `origin_mm`, `data` (float32 bytes, x fastest) and `ground_truth` (JSON).
#[pyfunction]
#[pyo3(signature = (spec_json = "{}"))]
fn generate_phantom<'py>(py: Python<'py>, spec_json: &str) -> PyResult<Bound<'py, PyDict>> {
    let spec: PhantomSpec = parse(spec_json, "phantom spec")?;
    let (volume, gt) = generate(&spec).map_err(to_py)?;
    let bytes: Vec<u8> = volume.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    let out = PyDict::new(py);
    out.set_item("shape", volume.shape().to_vec())?;
    out.set_item("spacing_mm", volume.spacing().to_vec())?;
    out.set_item("origin_mm", volume.origin().to_vec())?;
    out.set_item("data", PyBytes::new(py, &bytes))?;
    out.set_item("ground_truth", dump(&gt)?)?;
    Ok(out)
}

/// Runs the pipeline on a volume file; returns the result JSON.
#[pyfunction]
#[pyo3(signature = (volume_path, annotations_path = None, config_json = None))]
fn run_pipeline(volume_path: PathBuf, annotations_path: Option<PathBuf>, config_json: Option<&str>) -> PyResult<String> {
    let cfg: PipelineConfig = match config_json {
        Some(j) => parse(j, "pipeline config")?,
        None => PipelineConfig::default(),
    };
    let volume = vcfq::io::load_volume(&volume_path).map_err(to_py)?;
    let gt = annotations_path
        .map(|p| vcfq::io::read_json(&p))
        .transpose()
        .map_err(to_py)?;
    let out = vcfq::pipeline::run(&volume, gt.as_ref(), &cfg).map_err(to_py)?;
    dump(&out.result)
}

/// Butterfly IoU of two six-keypoint vertebrae given as `[[x, y]; 6]`.
#[pyfunction]
fn biou(a: [[f64; 2]; 6], b: [[f64; 2]; 6]) -> PyResult<f64> {
    vcfq::detector::biou(&VertebraKeypoints::new(a), &VertebraKeypoints::new(b)).map_err(to_py)
}

/// Genant index of six keypoints.
#[pyfunction]
fn genant_index(points: [[f64; 2]; 6]) -> PyResult<f64> {
    let h = vcfq::grading::heights(&VertebraKeypoints::new(points)).map_err(to_py)?;
    vcfq::grading::genant_index(h).map_err(to_py)
}

#[pyfunction]
fn roc_auc(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    vcfq::evaluation::roc_auc(&scores, &labels).map_err(to_py)
}

#[pyfunction]
fn sensitivity_at_specificity(scores: Vec<f64>, labels: Vec<bool>, level: f64) -> PyResult<f64> {
    vcfq::evaluation::sensitivity_at_specificity(&scores, &labels, level).map_err(to_py)
}

/// Default pipeline config as JSON.
#[pyfunction]
fn default_config() -> PyResult<String> {
    dump(&PipelineConfig::default())
}

#[pymodule]
#[pyo3(name = "vcfq")]
fn vcfq_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(generate_phantom, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    m.add_function(wrap_pyfunction!(biou, m)?)?;
    m.add_function(wrap_pyfunction!(genant_index, m)?)?;
    m.add_function(wrap_pyfunction!(roc_auc, m)?)?;
    m.add_function(wrap_pyfunction!(sensitivity_at_specificity, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    Ok(())
}
