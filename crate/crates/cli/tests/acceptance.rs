//! Acceptance suite. Prints one `criterion N: PASS|FAIL` line per
//! criterion (run with `-- --nocapture`) and fails if any criterion fails.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use vcfq::detector::{
    biou, butterfly, detection_loss, make_targets, nms, Detection, DetectionField, Grid2, LossConfig, RegressionNormalizer,
    TargetVertebra, VertebraKeypoints, N_OFFSETS,
};
use vcfq::evaluation::{
    evaluate, match_case, roc_auc, sensitivity_at_specificity, EvalConfig, MatchMode, PatientCase, Task,
};
use vcfq::geometry;
use vcfq::grading::GradeThresholds;
use vcfq::locator::{localization_loss, localize, LocalizeConfig, SpineCurve, VERSE_EXTRAPOLATION_MM};
use vcfq::phantom::{generate, oracle_probability_map, GroundTruth, PhantomSpec};
use vcfq::pipeline::{self, DetectorKind, LocatorKind, PipelineConfig, Stage};
use vcfq::straighten::{build_frames, frame_twist, straighten, StraightenConfig};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn read_json(p: &Path) -> Value {
    serde_json::from_slice(&fs::read(p).unwrap()).unwrap()
}

/// Phantom specs of the grade-mix fixture.
fn grade_mix() -> Vec<(String, PhantomSpec)> {
    let mix = read_json(&fixtures().join("grade_mix.json"));
    mix["phantoms"]
        .as_array()
        .unwrap()
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let spec = json!({
                "n_vertebrae": mix["n_vertebrae"],
                "base_height": mix["base_height"],
                "gap": mix["gap"],
                "body_width": mix["body_width"],
                "seed": p["seed"],
                "scoliosis_amplitude": p["scoliosis_amplitude"],
                "fractures": p["fractures"],
            });
            (format!("mix{k:02}"), serde_json::from_value(spec).unwrap())
        })
        .collect()
}

fn oracle_config(noise_sigma_mm: f64, seed: u64) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.locator.predictor = LocatorKind::Oracle;
    cfg.detector.predictor = DetectorKind::Oracle;
    cfg.detector.noise_sigma_mm = noise_sigma_mm;
    cfg.detector.seed = seed;
    cfg
}

struct CaseRun {
    case: PatientCase,
    predicted_min: Option<(usize, f64)>,
}

/// Runs the oracle pipeline on every grade-mix phantom on the calling
/// thread pool.
fn run_grade_mix(noise_sigma_mm: f64) -> Vec<CaseRun> {
    grade_mix()
        .into_iter()
        .map(|(id, spec)| {
            let (volume, gt) = generate(&spec).unwrap();
            let out = pipeline::run(&volume, Some(&gt), &oracle_config(noise_sigma_mm, spec.seed)).unwrap();
            let predictions = out.result.predictions.unwrap_or_default();
            let predicted_min = out.result.assessment.map(|a| {
                let k = a
                    .vertebrae
                    .iter()
                    .enumerate()
                    .min_by(|x, y| x.1.genant.total_cmp(&y.1.genant))
                    .unwrap()
                    .0;
                (k, a.patient.genant)
            });
            CaseRun {
                case: PatientCase {
                    id,
                    annotation: gt,
                    predictions,
                },
                predicted_min,
            }
        })
        .collect()
}

/// Per target: matched prediction Genant index (centroid matching).
fn matched_genants(case: &PatientCase) -> Vec<Option<f64>> {
    let cfg = EvalConfig {
        mode: MatchMode::Centroid,
        ..EvalConfig::default()
    };
    let m = match_case(case, &cfg);
    m.prediction_for_targets(case.annotation.vertebrae.len())
        .into_iter()
        .map(|p| p.map(|p| case.predictions.vertebrae[p].genant))
        .collect()
}

fn grade_agreement(runs: &[CaseRun]) -> (usize, usize) {
    let th = GradeThresholds::default();
    let mut agree = 0;
    let mut total = 0;
    for r in runs {
        for (t, g) in r.case.annotation.vertebrae.iter().zip(matched_genants(&r.case)) {
            total += 1;
            if g.is_some_and(|g| th.grade(g) == th.grade(t.genant)) {
                agree += 1;
            }
        }
    }
    (agree, total)
}

// Criterion 1 tolerances.
const C1_MAX_DG: f64 = 0.02;
const C1_MAX_SECONDS: f64 = 60.0;

fn criterion_1() -> Outcome {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let t0 = Instant::now();
    let runs = pool.install(|| run_grade_mix(0.0));
    let seconds = t0.elapsed().as_secs_f64();

    let th = GradeThresholds::default();
    let mut max_dg: f64 = 0.0;
    let mut unmatched = 0;
    let mut patient_ok = true;
    for r in &runs {
        let targets = &r.case.annotation.vertebrae;
        for (t, g) in targets.iter().zip(matched_genants(&r.case)) {
            match g {
                Some(g) => max_dg = max_dg.max((g - t.genant).abs()),
                None => unmatched += 1,
            }
        }
        // Most severe vertebra: the prediction with the lowest index matches
        // a target of minimal index (ties allowed), with the same grade and
        // an index within tolerance.
        let true_min = targets.iter().map(|t| t.genant).fold(f64::INFINITY, f64::min);
        let matched = match_case(
            &r.case,
            &EvalConfig {
                mode: MatchMode::Centroid,
                ..EvalConfig::default()
            },
        )
        .prediction_for_targets(targets.len());
        patient_ok &= match r.predicted_min {
            Some((k, g)) => {
                let target = matched.iter().position(|&m| m == Some(k));
                target.is_some_and(|t| targets[t].genant == true_min)
                    && th.grade(g) == th.grade(true_min)
                    && (g - true_min).abs() <= C1_MAX_DG
            }
            None => false,
        };
    }
    let (agree, total) = grade_agreement(&runs);
    let cases: Vec<PatientCase> = runs.into_iter().map(|r| r.case).collect();
    let mut detection = Vec::new();
    for mode in [MatchMode::Biou, MatchMode::Centroid] {
        let cfg = EvalConfig {
            mode,
            ..EvalConfig::default()
        };
        let rep = evaluate(&cases, &cfg, &th).unwrap();
        detection.push((rep.detection.pooled.precision, rep.detection.pooled.recall));
    }
    let det_ok = detection.iter().all(|&(p, r)| p == 1.0 && r == 1.0);
    check(
        max_dg <= C1_MAX_DG && unmatched == 0 && agree == total && det_ok && patient_ok && seconds <= C1_MAX_SECONDS,
        format!(
            "{} vertebrae, max |dG| {max_dg:.2e} (<= {C1_MAX_DG}), grade agreement {agree}/{total}, \
             P/R biou {:?} centroid {:?}, patient min-G ok {patient_ok}, {seconds:.1} s on one thread (<= {C1_MAX_SECONDS})",
            total, detection[0], detection[1]
        ),
    )
}

fn rect(x0: f64, x1: f64, y0: f64, y1: f64) -> VertebraKeypoints {
    VertebraKeypoints::from_columns([x0, 0.5 * (x0 + x1), x1], [[y1, y0]; 3])
}

fn det(kp: &VertebraKeypoints, score: f64, anchor: [usize; 2]) -> Detection {
    Detection {
        points: kp.points,
        score,
        anchor,
        degenerate: false,
    }
}

fn gt_with(centroids: &[[f64; 3]]) -> GroundTruth {
    let vertebrae = centroids
        .iter()
        .enumerate()
        .map(|(k, c)| {
            let kp = [[0.0, -15.0, 12.5], [0.0, 0.0, 12.5], [0.0, 15.0, 12.5], [0.0, 15.0, -12.5], [0.0, 0.0, -12.5], [0.0, -15.0, -12.5]]
                .map(|p| [p[0] + c[0], p[1] + c[1], p[2] + c[2]]);
            serde_json::from_value(json!({
                "label": format!("V{k}"),
                "centroid_mm": c,
                "keypoints_mm": kp,
                "genant": 1.0,
            }))
            .unwrap()
        })
        .collect();
    GroundTruth {
        vertebrae,
        curve: vec![[0.0, 0.0, -50.0], [0.0, 0.0, 150.0]],
        limits_mm: [-50.0, 150.0],
    }
}

fn centroid_match_counts(offset: [f64; 3]) -> (usize, usize, usize) {
    let gt = gt_with(&[[0.0, 15.0, 12.5]]);
    let mut p = gt_with(&[[offset[0], 15.0 + offset[1], 12.5 + offset[2]]]);
    let v = p.vertebrae.remove(0);
    let case = PatientCase {
        id: "p".into(),
        annotation: gt,
        predictions: serde_json::from_value(json!({"vertebrae": [{
            "centroid_mm": v.centroid_mm, "keypoints_mm": v.keypoints_mm, "genant": 1.0, "score": 1.0
        }]}))
        .unwrap(),
    };
    let cfg = EvalConfig {
        mode: MatchMode::Centroid,
        ..EvalConfig::default()
    };
    let m = match_case(&case, &cfg);
    (m.true_positives(), m.false_positives(), m.false_negatives())
}

fn criterion_2() -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;
    let mut expect = |cond: bool, what: &str| {
        ok &= cond;
        if !cond {
            notes.push(format!("FAILED {what}"));
        }
    };

    // Config echo, both in the library result and in the CLI output.
    let cfg = PipelineConfig::default();
    expect(cfg.preprocess.spacing_mm == [2.0, 2.0, 4.0], "localization spacing default");
    expect(cfg.straighten.step_mm == 1.0, "straightened step default");
    expect(cfg.detector.score_thresh == 0.7 && cfg.detector.closeness_thresh == 0.1, "nms defaults");
    expect(cfg.evaluation.centroid_threshold_mm == 20.0, "centroid threshold default");
    expect(VERSE_EXTRAPOLATION_MM == 20.0, "extrapolation constant");

    let spec: PhantomSpec = serde_json::from_value(json!({"n_vertebrae": 4, "seed": 3, "torso_half_axes_mm": [50.0, 40.0]})).unwrap();
    let (volume, gt) = generate(&spec).unwrap();
    let mut run_cfg = oracle_config(0.0, 0);
    run_cfg.locator.extrapolate_mm = 20.0;
    let out = pipeline::run(&volume, Some(&gt), &run_cfg).unwrap();
    let echo = serde_json::to_value(&out.result).unwrap();
    expect(echo["config"]["preprocess"]["spacing_mm"] == json!([2.0, 2.0, 4.0]), "echoed localization spacing");
    expect(echo["localization_grid"]["spacing_mm"] == json!([2.0, 2.0, 4.0]), "localization grid spacing");
    expect(echo["straightened"]["spacing_mm"] == json!([1.0, 1.0, 1.0]), "straightened grid spacing");
    expect(echo["config"]["detector"]["score_thresh"] == json!(0.7), "echoed score threshold");
    expect(echo["config"]["detector"]["closeness_thresh"] == json!(0.1), "echoed closeness threshold");
    expect(echo["config"]["evaluation"]["centroid_threshold_mm"] == json!(20.0), "echoed centroid threshold");
    expect(echo["config"]["locator"]["extrapolate_mm"] == json!(20.0), "echoed extrapolation");

    let dir = tempfile::tempdir().unwrap();
    let spec_path = dir.path().join("p.json");
    fs::write(&spec_path, serde_json::to_vec(&spec).unwrap()).unwrap();
    let bin = env!("CARGO_BIN_EXE_vcfq");
    let d = dir.path().to_str().unwrap();
    let st = Command::new(bin).args(["phantom", "--spec", spec_path.to_str().unwrap(), "--out", d]).status().unwrap();
    expect(st.success(), "cli phantom");
    let curve = dir.path().join("curve.json");
    let st = Command::new(bin)
        .args(["localize", "--volume", &format!("{d}/p.json"), "--out", curve.to_str().unwrap()])
        .status()
        .unwrap();
    expect(st.success(), "cli localize");
    let cli_cfg = &read_json(&curve)["config"];
    expect(cli_cfg == &serde_json::to_value(PipelineConfig::default()).unwrap(), "cli echoes the full default config");

    // NMS: objectness strictly above 0.7, closeness strictly below 0.1.
    let n = PipelineConfig::default().detector.nms();
    let a = rect(0.0, 10.0, 0.0, 11.0);
    let far = rect(0.0, 10.0, 100.0, 111.0);
    let kept = nms(&[det(&a, 0.7, [0, 0]), det(&far, 0.7000001, [0, 9])], &n);
    expect(kept.len() == 1 && kept[0].score > 0.7, "score exactly 0.7 dropped");
    let touching = rect(0.0, 10.0, 9.0, 20.0);
    let b = biou(&a, &touching).unwrap();
    expect(b == 0.1, "boundary pair has BIoU exactly 0.1");
    let kept = nms(&[det(&a, 0.9, [0, 0]), det(&touching, 0.8, [0, 1])], &n);
    expect(kept.len() == 1, "BIoU exactly 0.1 suppressed");
    let apart = rect(0.0, 10.0, 9.5, 20.5);
    let kept = nms(&[det(&a, 0.9, [0, 0]), det(&apart, 0.8, [0, 1])], &n);
    expect(kept.len() == 2, "BIoU below 0.1 kept");

    // Centroid matching at 20 mm: 20 matches, 21 is a false positive.
    expect(centroid_match_counts([0.0, 20.0, 0.0]) == (1, 0, 0), "20 mm centroid matches");
    expect(centroid_match_counts([0.0, 21.0, 0.0]) == (0, 1, 1), "21 mm centroid is FP");
    expect(centroid_match_counts([12.0, 0.0, 16.0]) == (1, 0, 0), "oblique 20 mm centroid matches");

    // Extrapolation widens both limits by exactly 20 mm.
    let prob = oracle_probability_map(&gt, &volume.resample([2.0, 2.0, 4.0]).unwrap(), 4.0).unwrap();
    let base = localize(&prob, &LocalizeConfig::default()).unwrap();
    let wide = localize(
        &prob,
        &LocalizeConfig {
            extrapolate_mm: VERSE_EXTRAPOLATION_MM,
            ..LocalizeConfig::default()
        },
    )
    .unwrap();
    let dl = [base.limits[0] - wide.limits[0], wide.limits[1] - base.limits[1]];
    expect(dl == [20.0, 20.0], "extrapolation by 20 mm");
    expect(out.result.curve.limits == wide.limits, "pipeline applies the configured extrapolation");

    check(
        ok,
        if notes.is_empty() {
            format!(
                "defaults and echoes 2x2x4 / 1x1x1 / 0.7 / 0.1 / 20 mm verified; boundaries: score 0.7 dropped, \
                 BIoU {b} suppressed, 20 mm TP, 21 mm FP, limits widened by {dl:?} mm"
            )
        } else {
            notes.join("; ")
        },
    )
}

/// Random butterfly with convex quads.
fn random_butterfly(rng: &mut ChaCha8Rng, center: [f64; 2]) -> VertebraKeypoints {
    loop {
        let w = rng.random_range(20.0..40.0);
        let h = rng.random_range(15.0..30.0);
        let xs = [center[0] - w / 2.0, center[0], center[0] + w / 2.0];
        let mut pts = [[0.0; 2]; 6];
        let cols = [0usize, 1, 2, 2, 1, 0];
        for (k, p) in pts.iter_mut().enumerate() {
            let top = k < 3;
            let dy = rng.random_range(-0.3..0.3) * h;
            let y = center[1] + if top { h / 2.0 } else { -h / 2.0 } + dy;
            *p = [xs[cols[k]] + rng.random_range(-3.0..3.0), y];
        }
        let kp = VertebraKeypoints::new(pts);
        let b = butterfly(&kp);
        if b.is_convex() && !b.degenerate {
            return kp;
        }
    }
}

fn monte_carlo_biou(a: &VertebraKeypoints, b: &VertebraKeypoints, n: usize, seed: u64) -> f64 {
    let (ba, bb) = (butterfly(a), butterfly(b));
    let all: Vec<[f64; 2]> = ba.quads.iter().chain(&bb.quads).flatten().copied().collect();
    let lo = all.iter().fold([f64::INFINITY; 2], |m, p| [m[0].min(p[0]), m[1].min(p[1])]);
    let hi = all.iter().fold([f64::NEG_INFINITY; 2], |m, p| [m[0].max(p[0]), m[1].max(p[1])]);
    let inside = |q: &[[[f64; 2]; 4]; 2], p: [f64; 2]| q.iter().any(|quad| geometry::contains(quad, p));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut both, mut either) = (0u64, 0u64);
    for _ in 0..n {
        let p = [rng.random_range(lo[0]..hi[0]), rng.random_range(lo[1]..hi[1])];
        let (ia, ib) = (inside(&ba.quads, p), inside(&bb.quads, p));
        both += u64::from(ia && ib);
        either += u64::from(ia || ib);
    }
    both as f64 / either as f64
}

const C3_MC_SAMPLES: usize = 1_000_000;
const C3_MC_TOL: f64 = 0.01;
const C3_EXACT_TOL: f64 = 1e-9;

fn criterion_3() -> Outcome {
    use rayon::prelude::*;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let pairs: Vec<(VertebraKeypoints, VertebraKeypoints)> = (0..50)
        .map(|_| {
            let a = random_butterfly(&mut rng, [0.0, 0.0]);
            let shift = [rng.random_range(-12.0..12.0), rng.random_range(-12.0..12.0)];
            (a, random_butterfly(&mut rng, shift))
        })
        .collect();
    let errs: Vec<(f64, f64)> = pairs
        .par_iter()
        .enumerate()
        .map(|(k, (a, b))| {
            let exact = biou(a, b).unwrap();
            (exact, (exact - monte_carlo_biou(a, b, C3_MC_SAMPLES, 1000 + k as u64)).abs())
        })
        .collect();
    let max_mc = errs.iter().map(|e| e.1).fold(0.0, f64::max);
    let overlapping = errs.iter().filter(|e| e.0 > 0.0).count();

    let a = random_butterfly(&mut rng, [0.0, 0.0]);
    let identical = biou(&a, &a).unwrap();
    let disjoint = biou(&a, &random_butterfly(&mut rng, [200.0, 0.0])).unwrap();
    let mut max_rect: f64 = 0.0;
    for _ in 0..200 {
        let r = |rng: &mut ChaCha8Rng| {
            let x0: f64 = rng.random_range(-20.0..20.0);
            let y0: f64 = rng.random_range(-20.0..20.0);
            [x0, x0 + rng.random_range(5.0..40.0), y0, y0 + rng.random_range(5.0..40.0)]
        };
        let (p, q) = (r(&mut rng), r(&mut rng));
        let inter = (p[1].min(q[1]) - p[0].max(q[0])).max(0.0) * (p[3].min(q[3]) - p[2].max(q[2])).max(0.0);
        let union = (p[1] - p[0]) * (p[3] - p[2]) + (q[1] - q[0]) * (q[3] - q[2]) - inter;
        let got = biou(&rect(p[0], p[1], p[2], p[3]), &rect(q[0], q[1], q[2], q[3])).unwrap();
        max_rect = max_rect.max((got - inter / union).abs());
    }
    check(
        max_mc <= C3_MC_TOL && identical == 1.0 && disjoint == 0.0 && max_rect <= C3_EXACT_TOL && overlapping >= 40,
        format!(
            "50 pairs ({overlapping} overlapping) max |biou - MC(1e6)| {max_mc:.4} (<= {C3_MC_TOL}); identical {identical}, \
             disjoint {disjoint}, 200 rectangle pairs max |biou - IoU| {max_rect:.1e} (<= {C3_EXACT_TOL})"
        ),
    )
}

fn brute_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (s, &l) in scores.iter().zip(labels) {
        if !l {
            continue;
        }
        for (t, &m) in scores.iter().zip(labels) {
            if m {
                continue;
            }
            pairs += 1.0;
            wins += if s > t {
                1.0
            } else if s == t {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / pairs
}

fn brute_sens(scores: &[f64], labels: &[bool], level: f64) -> f64 {
    let pos = labels.iter().filter(|&&l| l).count() as f64;
    let neg = labels.len() as f64 - pos;
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.push(f64::INFINITY);
    thresholds
        .iter()
        .filter_map(|&t| {
            let tp = scores.iter().zip(labels).filter(|(s, &l)| l && **s >= t).count() as f64;
            let tn = scores.iter().zip(labels).filter(|(s, &l)| !l && **s < t).count() as f64;
            (tn / neg >= level).then_some(tp / pos)
        })
        .fold(0.0, f64::max)
}

const C4_AUC_TOL: f64 = 1e-9;

fn criterion_4() -> Outcome {
    let mut max_auc: f64 = 0.0;
    let mut sens_mismatch = 0;
    let mut ties = 0;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<bool> = (0..200).map(|_| rng.random_bool(0.4)).collect();
        let scores: Vec<f64> = labels
            .iter()
            .map(|&l| {
                let s: f64 = rng.random_range(0.0..1.0) + if l { 0.3 } else { 0.0 };
                // Coarse rounding injects ties within and across classes.
                if rng.random_bool(0.5) {
                    (s * 10.0).round() / 10.0
                } else {
                    s
                }
            })
            .collect();
        let mut sorted = scores.clone();
        sorted.sort_by(f64::total_cmp);
        ties += sorted.windows(2).filter(|w| w[0] == w[1]).count();
        max_auc = max_auc.max((roc_auc(&scores, &labels).unwrap() - brute_auc(&scores, &labels)).abs());
        for level in [0.0, 0.5, 0.8, 0.9, 0.95, 1.0] {
            if sensitivity_at_specificity(&scores, &labels, level).unwrap() != brute_sens(&scores, &labels, level) {
                sens_mismatch += 1;
            }
        }
    }
    check(
        max_auc <= C4_AUC_TOL && sens_mismatch == 0 && ties > 0,
        format!(
            "20 sets of 200 pairs ({ties} tied neighbours): max |AUC - pairwise| {max_auc:.1e} (<= {C4_AUC_TOL}), \
             sens@spec mismatches {sens_mismatch}/120"
        ),
    )
}

const C5_H: f64 = 1e-4;
const C5_MAX_REL: f64 = 1e-4;
/// Denominator floor of the relative error, so coordinates whose true
/// gradient vanishes are compared absolutely at this scale.
const C5_REL_FLOOR: f64 = 1e-6;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(C5_REL_FLOOR)
}

fn detection_instance(seed: u64) -> (DetectionField, vcfq::detector::TargetField) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = Grid2 {
        shape: [14, 16],
        spacing: [2.0, 2.0],
        origin: [-14.0, 0.0],
    };
    let vertebrae: Vec<TargetVertebra> = (0..2)
        .map(|k| {
            let cy = 8.0 + 14.0 * k as f64 + rng.random_range(-1.0..1.0);
            let mut kp = random_butterfly(&mut rng, [0.0, cy]);
            kp.points.iter_mut().for_each(|p| p[1] = cy + (p[1] - cy) * 0.5);
            TargetVertebra {
                keypoints: kp,
                genant: rng.random_range(0.5..1.0),
            }
        })
        .collect();
    let target = make_targets(&vertebrae, grid, 6.0).unwrap();
    let objectness = (0..grid.len()).map(|_| rng.random_range(0.05..0.95)).collect();
    let offsets = (0..grid.len())
        .map(|_| std::array::from_fn(|_| rng.random_range(-20.0..20.0)))
        .collect();
    (DetectionField::new(grid, objectness, offsets).unwrap(), target)
}

fn criterion_5() -> Outcome {
    let mut worst_det: f64 = 0.0;
    let mut worst_loc: f64 = 0.0;
    let mut positives = 0;
    for seed in 0..20u64 {
        let (field, target) = detection_instance(seed);
        positives += target.positive_count();
        for normalizer in [RegressionNormalizer::Positive, RegressionNormalizer::Negative] {
            let cfg = LossConfig {
                normalizer,
                ..LossConfig::default()
            };
            let loss = detection_loss(&field, &target, &cfg).unwrap();
            let f = |fd: &DetectionField| detection_loss(fd, &target, &cfg).unwrap().value;
            for i in 0..field.grid.len() {
                let (mut p, mut m) = (field.clone(), field.clone());
                p.objectness[i] += C5_H;
                m.objectness[i] -= C5_H;
                worst_det = worst_det.max(rel_err(loss.grad_objectness[i], (f(&p) - f(&m)) / (2.0 * C5_H)));
                for c in 0..N_OFFSETS {
                    let (mut p, mut m) = (field.clone(), field.clone());
                    p.offsets[i][c] += C5_H;
                    m.offsets[i][c] -= C5_H;
                    worst_det = worst_det.max(rel_err(loss.grad_offsets[i][c], (f(&p) - f(&m)) / (2.0 * C5_H)));
                }
            }
        }

        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let n = 40;
        let target = SpineCurve::new(
            (0..n)
                .map(|k| [rng.random_range(-5.0..5.0), rng.random_range(10.0..20.0), 4.0 * k as f64])
                .collect(),
            [20.0, 120.0],
        )
        .unwrap();
        let inside: Vec<bool> = target.points.iter().map(|p| (20.0..=120.0).contains(&p[2])).collect();
        let xy: Vec<[f64; 2]> = (0..n).map(|_| [rng.random_range(-8.0..8.0), rng.random_range(8.0..22.0)]).collect();
        let logits: Vec<f64> = (0..n).map(|_| rng.random_range(-4.0..4.0)).collect();
        let loss = localization_loss(&xy, &logits, &target, &inside, 1e-7).unwrap();
        let f = |xy: &[[f64; 2]], lg: &[f64]| localization_loss(xy, lg, &target, &inside, 1e-7).unwrap().value;
        for k in 0..n {
            for a in 0..2 {
                let (mut p, mut m) = (xy.clone(), xy.clone());
                p[k][a] += C5_H;
                m[k][a] -= C5_H;
                worst_loc = worst_loc.max(rel_err(loss.grad_xy[k][a], (f(&p, &logits) - f(&m, &logits)) / (2.0 * C5_H)));
            }
            let (mut p, mut m) = (logits.clone(), logits.clone());
            p[k] += C5_H;
            m[k] -= C5_H;
            worst_loc = worst_loc.max(rel_err(loss.grad_logits[k], (f(&xy, &p) - f(&xy, &m)) / (2.0 * C5_H)));
        }
    }
    check(
        worst_det <= C5_MAX_REL && worst_loc <= C5_MAX_REL && positives > 0,
        format!(
            "20 instances each, h = {C5_H}: detection_loss max rel err {worst_det:.1e}, localization_loss {worst_loc:.1e} \
             (<= {C5_MAX_REL}, floor {C5_REL_FLOOR})"
        ),
    )
}

const C6_MAX_REL_DEV: f64 = 0.01;
const C6_MAX_TWIST: f64 = 1e-5;

fn polyline_length(p: &[[f64; 3]]) -> f64 {
    p.windows(2)
        .map(|w| ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2) + (w[1][2] - w[0][2]).powi(2)).sqrt())
        .sum()
}

fn planar_curve(e1: [f64; 3], e2: [f64; 3], amp: f64) -> Vec<[f64; 3]> {
    (0..=400)
        .map(|k| {
            let s = k as f64 * 0.5;
            let f = amp * (s / 40.0).sin();
            [0, 1, 2].map(|c| s * e1[c] + f * e2[c])
        })
        .collect()
}

fn criterion_6() -> Outcome {
    // Straight spine on a grid-aligned phantom: x = 0, y = 0.3 * 60 = 18
    // and integer origin, so straightened samples land on voxel centers.
    let spec: PhantomSpec = serde_json::from_value(json!({"n_vertebrae": 6, "seed": 5})).unwrap();
    let (volume, gt) = generate(&spec).unwrap();
    let curve = gt.spine_curve().unwrap();
    let s = straighten(&volume, &curve, &StraightenConfig::default()).unwrap();
    let [na, nb, nl] = s.volume.shape();
    let (lo, hi) = volume.min_max();
    let range = f64::from(hi - lo);
    let mut dev = 0.0;
    let mut count = 0usize;
    let margin = 2;
    for l in margin..nl - margin {
        let c = s.frames[l].c;
        for b in margin..nb - margin {
            for a in margin..na - margin {
                let p = [c[0] + a as f64 - 60.0, c[1] + b as f64 - 60.0, c[2]];
                let idx = volume.world_to_index(p);
                let ijk = idx.map(|x| x.round());
                if idx.iter().zip(&ijk).any(|(x, r)| (x - r).abs() > 1e-9) {
                    return Err(format!("straight phantom is not grid aligned at {p:?}"));
                }
                let [i, j, k] = ijk.map(|x| x as usize);
                dev += (f64::from(s.volume.get(a, b, l)) - f64::from(volume.get(i, j, k))).abs();
                count += 1;
            }
        }
    }
    let rel_dev = dev / count as f64 / range;

    // Arc length on a curved spine.
    let curved: PhantomSpec = serde_json::from_value(
        json!({"n_vertebrae": 8, "seed": 6, "scoliosis_amplitude": 15.0, "kyphosis_amplitude": 10.0, "noise_sigma": 0.0}),
    )
    .unwrap();
    let (cv, cgt) = generate(&curved).unwrap();
    let ccurve = cgt.spine_curve().unwrap();
    let cs = straighten(&cv, &ccurve, &StraightenConfig::default()).unwrap();
    let arc = (cs.volume.shape()[2] - 1) as f64 * cs.step();
    let truth = polyline_length(&ccurve.cropped_polyline());
    let arc_err = (arc - truth).abs();

    // Twist on planar curves, axis-aligned and tilted.
    let n = {
        let v = [1.0f64, 2.0, 3.0];
        let l = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        v.map(|x| x / l)
    };
    let e1 = {
        let v = [0.0, -n[2], n[1]];
        let l = (v[1] * v[1] + v[2] * v[2]).sqrt();
        v.map(|x| x / l)
    };
    let e2 = [n[1] * e1[2] - n[2] * e1[1], n[2] * e1[0] - n[0] * e1[2], n[0] * e1[1] - n[1] * e1[0]];
    let mut max_twist: f64 = 0.0;
    for poly in [
        planar_curve([0.0, 0.0, 1.0], [1.0, 0.0, 0.0], 25.0),
        planar_curve([0.0, 0.0, 1.0], [0.0, 1.0, 0.0], 15.0),
        planar_curve(e1, e2, 30.0),
    ] {
        let frames = build_frames(&vcfq::straighten::resample_polyline(&poly, 1.0).unwrap()).unwrap();
        max_twist = frame_twist(&frames).into_iter().fold(max_twist, |m, t| m.max(t.abs()));
    }
    check(
        rel_dev <= C6_MAX_REL_DEV && arc_err <= cs.step() && max_twist <= C6_MAX_TWIST,
        format!(
            "mean |straightened - crop| {:.2e} of range over {count} voxels (<= {C6_MAX_REL_DEV}); arc {arc:.2} vs curve \
             {truth:.2} mm (|diff| {arc_err:.2} <= step {}); max planar twist {max_twist:.1e} rad (<= {C6_MAX_TWIST})",
            rel_dev,
            cs.step()
        ),
    )
}

const C7_NOISE_MM: f64 = 1.0;
const C7_MIN_AGREEMENT: f64 = 0.90;
const C7_MIN_AUC: f64 = 0.95;

fn criterion_7() -> Outcome {
    let expected = read_json(&fixtures().join("degradation_expected.json"));
    let runs = run_grade_mix(C7_NOISE_MM);
    let (agree, total) = grade_agreement(&runs);
    let agreement = agree as f64 / total as f64;
    let cases: Vec<PatientCase> = runs.into_iter().map(|r| r.case).collect();
    let report = evaluate(&cases, &EvalConfig::default(), &GradeThresholds::default()).unwrap();
    let auc = report
        .tasks
        .iter()
        .find(|t| t.task == Task::NormalMildVsModerateSevere)
        .and_then(|t| t.vertebra.roc_auc)
        .unwrap_or(0.0);
    check(
        agreement >= C7_MIN_AGREEMENT && auc >= C7_MIN_AUC,
        format!(
            "sigma {C7_NOISE_MM} mm: grade agreement {agree}/{total} = {agreement:.3} (>= {C7_MIN_AGREEMENT}; simulated mean {}), \
             G0-1 vs G2-3 AUC {auc:.4} (>= {C7_MIN_AUC}; simulated mean {:.4})",
            expected["agreement_mean"].as_f64().unwrap_or(f64::NAN),
            expected["auc_mean"].as_f64().unwrap_or(f64::NAN)
        ),
    )
}

const C8_MAX_CURVE_MM: f64 = 4.0;
const C8_MAX_LIMIT_MM: f64 = 8.0;

fn criterion_8() -> Outcome {
    let mut worst_curve: f64 = 0.0;
    let mut worst_limit: f64 = 0.0;
    let mut notes = Vec::new();
    for (k, amp) in (0..=8).map(|i| 2.5 * f64::from(i)).enumerate() {
        let spec: PhantomSpec =
            serde_json::from_value(json!({"seed": 40 + k, "scoliosis_amplitude": amp, "noise_sigma": 0.0})).unwrap();
        let (volume, gt) = generate(&spec).unwrap();
        let mut cfg = PipelineConfig::default();
        cfg.stop_after = Stage::Localize;
        let out = pipeline::run(&volume, None, &cfg).unwrap();
        let curve = &out.result.curve;
        let truth = gt.spine_curve().unwrap();
        let lim = (curve.limits[0] - truth.limits[0]).abs().max((curve.limits[1] - truth.limits[1]).abs());
        let (zlo, zhi) = (curve.limits[0].max(truth.limits[0]), curve.limits[1].min(truth.limits[1]));
        let err = curve
            .points
            .iter()
            .filter(|p| p[2] >= zlo && p[2] <= zhi)
            .map(|p| {
                let q = truth.position_at(p[2]);
                (p[0] - q[0]).hypot(p[1] - q[1])
            })
            .fold(0.0, f64::max);
        notes.push(format!("amp {amp}: {err:.2}/{lim:.1}"));
        worst_curve = worst_curve.max(err);
        worst_limit = worst_limit.max(lim);
    }
    check(
        worst_curve <= C8_MAX_CURVE_MM && worst_limit <= C8_MAX_LIMIT_MM,
        format!(
            "max per-slice curve error {worst_curve:.2} mm (<= {C8_MAX_CURVE_MM}), max limit error {worst_limit:.1} mm \
             (<= {C8_MAX_LIMIT_MM}); curve/limit mm by scoliosis [{}]",
            notes.join(", ")
        ),
    )
}

/// Every file under `dir` except timings, keyed by relative path.
fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if !p.to_string_lossy().ends_with(".timing.json") {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn run_all_commands(root: &Path, jobs: &str) {
    let bin = env!("CARGO_BIN_EXE_vcfq");
    let fx = fixtures().join("phantoms");
    let r = |p: &str| root.join(p).to_str().unwrap().to_string();
    let go = |args: Vec<String>| {
        let out = Command::new(bin).arg("--jobs").arg(jobs).args(&args).output().unwrap();
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    };
    let sv = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    let noisy = ["--set", "detector.noise_sigma_mm=1.0", "--set", "detector.seed=9"];
    for name in ["straight", "scoliotic", "fractured"] {
        go(sv(&["phantom", "--spec", fx.join(format!("{name}.json")).to_str().unwrap(), "--out", &r("data"), "--nifti"]));
    }
    let v = r("data/fractured.json");
    let gt = r("data/fractured.gt.json");
    go(sv(&["localize", "--volume", &v, "--out", &r("stages/curve.json"), "--probability", &r("stages/prob.json")]));
    go(sv(&["straighten", "--volume", &v, "--curve", &r("stages/curve.json"), "--out", &r("stages/st")]));
    go([sv(&["detect", "--straightened", &r("stages/st"), "--annotations", &gt, "--out", &r("stages/det.json")]), sv(&noisy)]
        .concat()
        .into_iter()
        .chain(sv(&["--field-dir", &r("stages/field")]))
        .collect());
    go(sv(&[
        "grade",
        "--detections",
        &r("stages/det.json"),
        "--straightened",
        &r("stages/st"),
        "--predictions",
        &r("stages/preds/fractured.predictions.json"),
        "--out",
        &r("stages/grade.json"),
    ]));
    let mut pipeline = sv(&["pipeline", "--annotations-dir", &r("data"), "--out", &r("pipe"), "--overlay"]);
    for name in ["straight", "scoliotic", "fractured"] {
        pipeline.extend(sv(&["--volume", &r(&format!("data/{name}.json"))]));
    }
    go([pipeline, sv(&noisy), sv(&["--set", "locator.extrapolate_mm=20"])].concat());
    go(sv(&["pipeline", "--volume", &r("data/scoliotic.nii"), "--out", &r("heur"), "--set", "stop_after=straighten"]));
    go(sv(&["evaluate", "--annotations", &r("data"), "--predictions", &r("pipe"), "--out", &r("eval/report.json"), "--csv", &r("eval/report.csv")]));
}

fn criterion_9() -> Outcome {
    let dirs: Vec<_> = (0..3).map(|_| tempfile::tempdir().unwrap()).collect();
    for (d, jobs) in dirs.iter().zip(["1", "1", "4"]) {
        run_all_commands(d.path(), jobs);
    }
    let snaps: Vec<_> = dirs.iter().map(|d| snapshot(d.path())).collect();
    let n_json = snaps[0].keys().filter(|k| k.extension().is_some_and(|e| e == "json")).count();
    let mut diffs = Vec::new();
    for (label, other) in [("rerun", &snaps[1]), ("--jobs 4", &snaps[2])] {
        if other.keys().ne(snaps[0].keys()) {
            diffs.push(format!("{label}: file sets differ"));
        }
        for (k, v) in &snaps[0] {
            if other.get(k) != Some(v) {
                diffs.push(format!("{label}: {}", k.display()));
            }
        }
    }
    check(
        diffs.is_empty() && n_json > 20,
        if diffs.is_empty() {
            format!(
                "all 7 commands rerun and under --jobs 4: {} files ({n_json} JSON) byte-identical, timings excluded",
                snaps[0].len()
            )
        } else {
            format!("differences: {}", diffs.join(", "))
        },
    )
}

#[test]
fn acceptance() {
    let criteria: [(u32, &str, fn() -> Outcome); 9] = [
        (1, "oracle end-to-end", criterion_1),
        (2, "constant conformance", criterion_2),
        (3, "BIoU oracle", criterion_3),
        (4, "ROC AUC oracle", criterion_4),
        (5, "gradient checks", criterion_5),
        (6, "straightening identity", criterion_6),
        (7, "degradation study", criterion_7),
        (8, "heuristic localizer", criterion_8),
        (9, "determinism", criterion_9),
    ];
    let mut failed = Vec::new();
    for (n, name, f) in criteria {
        let t0 = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = t0.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("criterion {n}: PASS {name} [{secs:.1} s] {d}"),
            Err(d) => {
                println!("criterion {n}: FAIL {name} [{secs:.1} s] {d}");
                failed.push(n);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
