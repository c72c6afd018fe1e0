//! Edge-voxel ROC and per-fracture FROC scoring.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::Detection;
use crate::volume::Annotation;

pub const DEFAULT_MATCH_RADIUS_MM: f64 = 10.0;
pub const DEFAULT_FP_TARGETS: [f64; 2] = [5.0, 10.0];

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("ROC needs at least one positive and one negative ({n_pos} positive, {n_neg} negative)")]
    DegenerateLabels { n_pos: usize, n_neg: usize },
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RocCurve {
    /// `(fpr, tpr)` from (0, 0) to (1, 1), one point per distinct score.
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

/// Threshold sweep over distinct scores. Equal scores form one step, so ties
/// contribute a trapezoid (half credit).
pub fn roc(scores: &[(f64, bool)]) -> Result<RocCurve, EvalError> {
    let n_pos = scores.iter().filter(|s| s.1).count();
    let n_neg = scores.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::DegenerateLabels { n_pos, n_neg });
    }
    if scores.iter().any(|s| s.0.is_nan()) {
        return Err(EvalError::InvalidParam("NaN score".into()));
    }
    let mut sorted: Vec<(f64, bool)> = scores.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut points = vec![(0.0, 0.0)];
    // twice the area in units of (1/n_neg) x (1/n_pos), kept as an integer
    let mut area2: u128 = 0;
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let s = sorted[i].0;
        let (tp0, fp0) = (tp, fp);
        while i < sorted.len() && sorted[i].0 == s {
            if sorted[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        area2 += ((fp - fp0) as u128) * ((tp + tp0) as u128);
        points.push((fp as f64 / n_neg as f64, tp as f64 / n_pos as f64));
    }
    let auc = area2 as f64 / (2.0 * n_pos as f64 * n_neg as f64);
    Ok(RocCurve {
        points,
        auc,
        n_pos,
        n_neg,
    })
}

/// How a detection is allowed to hit an annotation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchMode {
    /// Any unmatched annotation within the radius; the nearest is taken.
    #[default]
    Distance,
    /// The detection is attributed to the process of its nearest annotation and may
    /// only hit unmatched annotations carrying that process label.
    Process,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FrocPoint {
    pub threshold: f64,
    pub fp_per_patient: f64,
    pub sensitivity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrocCurve {
    /// Ordered by descending threshold.
    pub points: Vec<FrocPoint>,
    pub n_targets: usize,
    pub n_patients: usize,
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>().sqrt()
}

/// Greedy matching in descending score order (stable for equal scores). Returns, per
/// detection, the index of the annotation it hit.
pub fn match_detections(
    dets: &[Detection],
    anns: &[Annotation],
    radius_mm: f64,
    mode: MatchMode,
) -> Vec<Option<usize>> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut taken = vec![false; anns.len()];
    let mut out = vec![None; dets.len()];
    for i in order {
        let p = dets[i].position;
        let nearest_label = match mode {
            MatchMode::Distance => None,
            MatchMode::Process => anns
                .iter()
                .min_by(|a, b| dist(p, a.position).total_cmp(&dist(p, b.position)))
                .map(|a| a.process_label),
        };
        let best = anns
            .iter()
            .enumerate()
            .filter(|(j, a)| {
                !taken[*j]
                    && dist(p, a.position) <= radius_mm
                    && nearest_label.is_none_or(|l| l == a.process_label)
            })
            .min_by(|a, b| dist(p, a.1.position).total_cmp(&dist(p, b.1.position)));
        if let Some((j, _)) = best {
            taken[j] = true;
            out[i] = Some(j);
        }
    }
    out
}

/// Fill `matched_annotation` on each detection.
pub fn annotate_matches(dets: &mut [Detection], anns: &[Annotation], radius_mm: f64, mode: MatchMode) {
    let m = match_detections(dets, anns, radius_mm, mode);
    for (d, j) in dets.iter_mut().zip(m) {
        d.matched_annotation = j.map(|j| anns[j].clone());
    }
}

/// One operating point per threshold, keeping detections with score >= threshold.
/// Patients are the union of both maps' keys.
pub fn froc(
    detections: &BTreeMap<String, Vec<Detection>>,
    annotations: &BTreeMap<String, Vec<Annotation>>,
    match_radius_mm: f64,
    thresholds: &[f64],
    mode: MatchMode,
) -> Result<FrocCurve, EvalError> {
    if !(match_radius_mm > 0.0) {
        return Err(EvalError::InvalidParam("match_radius_mm must be > 0".into()));
    }
    if thresholds.is_empty() {
        return Err(EvalError::InvalidParam("thresholds must be non-empty".into()));
    }
    let patients: BTreeSet<&String> = detections.keys().chain(annotations.keys()).collect();
    let n_patients = patients.len();
    let n_targets: usize = annotations.values().map(Vec::len).sum();
    let mut ts = thresholds.to_vec();
    ts.sort_by(|a, b| b.total_cmp(a));
    let empty_d = Vec::new();
    let empty_a = Vec::new();
    let points = ts
        .into_iter()
        .map(|t| {
            let (mut tp, mut fp) = (0usize, 0usize);
            for p in &patients {
                let kept: Vec<Detection> = detections
                    .get(*p)
                    .unwrap_or(&empty_d)
                    .iter()
                    .filter(|d| d.score >= t)
                    .cloned()
                    .collect();
                let anns = annotations.get(*p).unwrap_or(&empty_a);
                let m = match_detections(&kept, anns, match_radius_mm, mode);
                let hits = m.iter().flatten().count();
                tp += hits;
                fp += kept.len() - hits;
            }
            point(t, tp, fp, n_targets, n_patients)
        })
        .collect();
    Ok(FrocCurve {
        points,
        n_targets,
        n_patients,
    })
}

fn point(t: f64, tp: usize, fp: usize, n_targets: usize, n_patients: usize) -> FrocPoint {
    FrocPoint {
        threshold: t,
        fp_per_patient: if n_patients == 0 { 0.0 } else { fp as f64 / n_patients as f64 },
        sensitivity: if n_targets == 0 { 0.0 } else { tp as f64 / n_targets as f64 },
    }
}

/// Every distinct detection score, descending: the full FROC sweep over fixed candidates.
pub fn score_thresholds(detections: &BTreeMap<String, Vec<Detection>>) -> Vec<f64> {
    let mut ts: Vec<f64> = detections.values().flatten().map(|d| d.score).collect();
    ts.sort_by(|a, b| b.total_cmp(a));
    ts.dedup();
    ts
}

/// Best sensitivity among points with `fp_per_patient <= target`; 0 when none qualify.
pub fn sensitivity_at_fp(curve: &FrocCurve, fp_targets: &[f64]) -> Vec<f64> {
    fp_targets
        .iter()
        .map(|&t| {
            curve
                .points
                .iter()
                .filter(|p| p.fp_per_patient <= t)
                .map(|p| p.sensitivity)
                .fold(0.0, f64::max)
        })
        .collect()
}

/// CSV `x,y`: `(fpr, tpr)` for ROC.
pub fn roc_csv(c: &RocCurve) -> String {
    xy_csv(c.points.iter().copied())
}

/// CSV `x,y`: `(fp_per_patient, sensitivity)`, in sweep order.
pub fn froc_csv(c: &FrocCurve) -> String {
    xy_csv(c.points.iter().map(|p| (p.fp_per_patient, p.sensitivity)))
}

fn xy_csv(points: impl Iterator<Item = (f64, f64)>) -> String {
    let mut s = String::from("x,y\n");
    for (x, y) in points {
        let _ = writeln!(s, "{x:?},{y:?}");
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub auc: f64,
    pub sens_at_5fp: f64,
    pub sens_at_10fp: f64,
    pub n_targets: usize,
    pub n_patients: usize,
}

impl EvalSummary {
    pub fn new(roc: &RocCurve, froc: &FrocCurve) -> Self {
        let s = sensitivity_at_fp(froc, &DEFAULT_FP_TARGETS);
        Self {
            auc: roc.auc,
            sens_at_5fp: s[0],
            sens_at_10fp: s[1],
            n_targets: froc.n_targets,
            n_patients: froc.n_patients,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("plain struct");
        s.push('\n');
        s
    }
}
