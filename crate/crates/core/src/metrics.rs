//! Detection quality: greedy matching, all-point AP, mAP at IoU .5 / .75,
//! precision and recall at a fixed operating point, and throughput.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::detector::{confidence_order, Detection, Label};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub use crate::detector::iou;
pub use crate::params::count_parameters;

pub const DEFAULT_CONF_THRESHOLD: f64 = 0.25;
pub const DEFAULT_NMS_IOU: f64 = 0.45;
/// Detections below this never enter the AP curves.
pub const AP_CONF_FLOOR: f64 = 0.001;

/// Greedy TP/FP flags for `dets`, which must be sorted by descending
/// confidence. Each detection takes the best-overlapping unmatched truth of
/// its class; each truth matches once.
pub fn match_detections<T: Scalar>(dets: &[Detection<T>], truths: &[Label<T>], iou_threshold: f64) -> Vec<bool> {
    let mut used = vec![false; truths.len()];
    dets.iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (j, t) in truths.iter().enumerate() {
                if used[j] || t.class_id != d.class_id {
                    continue;
                }
                let o = iou(&d.bbox, &t.bbox).as_f64();
                if best.map_or(true, |(_, b)| o > b) {
                    best = Some((j, o));
                }
            }
            match best {
                Some((j, o)) if o >= iou_threshold => {
                    used[j] = true;
                    true
                }
                _ => false,
            }
        })
        .collect()
}

/// All-point interpolated AP: area under the monotone precision envelope.
///
/// `records` are `(confidence, is_tp)` pairs in any order; ties keep their
/// given order. With no truths, AP is 1 when there are no detections and 0
/// otherwise.
pub fn average_precision(records: &[(f64, bool)], truth_count: usize) -> f64 {
    if truth_count == 0 {
        return if records.is_empty() { 1.0 } else { 0.0 };
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| records[b].0.partial_cmp(&records[a].0).unwrap_or(std::cmp::Ordering::Equal));
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(records.len());
    let mut precision = Vec::with_capacity(records.len());
    for (k, &i) in order.iter().enumerate() {
        tp += records[i].1 as usize;
        recall.push(tp as f64 / truth_count as f64);
        precision.push(tp as f64 / (k + 1) as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev) * p;
        prev = *r;
    }
    ap
}

/// Post-NMS detections and ground truth of one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageResult {
    pub detections: Vec<Detection<f64>>,
    pub truths: Vec<Label<f64>>,
}

impl ImageResult {
    pub fn new<T: Scalar>(detections: &[Detection<T>], truths: &[Label<T>]) -> Self {
        ImageResult {
            detections: detections
                .iter()
                .map(|d| Detection { bbox: d.bbox.cast(), class_id: d.class_id, confidence: d.confidence.as_f64() })
                .collect(),
            truths: truths.iter().map(|l| Label { class_id: l.class_id, bbox: l.bbox.cast() }).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class_id: usize,
    pub truth_count: usize,
    pub ap50: f64,
    pub ap75: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionScores {
    pub precision: f64,
    pub recall: f64,
    pub map50: f64,
    pub map75: f64,
    /// Classes present in the ground truth, ascending.
    pub per_class_ap: Vec<ClassAp>,
}

fn class_ap(images: &[ImageResult], class_id: usize, iou_threshold: f64) -> (f64, usize) {
    let mut records = Vec::new();
    let mut truth_count = 0;
    for img in images {
        let truths: Vec<Label<f64>> = img.truths.iter().filter(|t| t.class_id == class_id).copied().collect();
        truth_count += truths.len();
        let dets: Vec<Detection<f64>> =
            img.detections.iter().filter(|d| d.class_id == class_id).copied().collect();
        let sorted: Vec<Detection<f64>> = confidence_order(&dets).into_iter().map(|i| dets[i]).collect();
        let flags = match_detections(&sorted, &truths, iou_threshold);
        records.extend(sorted.iter().zip(flags).map(|(d, tp)| (d.confidence, tp)));
    }
    (average_precision(&records, truth_count), truth_count)
}

/// Scores a dataset. mAP averages over classes present in the ground truth;
/// precision and recall count detections with confidence ≥ `conf_threshold`
/// matched at IoU 0.5. Precision is 0 when nothing passes the threshold.
pub fn score_detections(images: &[ImageResult], conf_threshold: f64) -> Result<DetectionScores> {
    if images.is_empty() {
        return Err(Error::input("cannot evaluate an empty dataset"));
    }
    let mut classes: Vec<usize> = images.iter().flat_map(|i| i.truths.iter().map(|t| t.class_id)).collect();
    classes.sort_unstable();
    classes.dedup();

    let per_class_ap: Vec<ClassAp> = classes
        .iter()
        .map(|&c| {
            let (ap50, truth_count) = class_ap(images, c, 0.5);
            let (ap75, _) = class_ap(images, c, 0.75);
            ClassAp { class_id: c, truth_count, ap50, ap75 }
        })
        .collect();
    let mean = |f: fn(&ClassAp) -> f64| {
        if per_class_ap.is_empty() {
            0.0
        } else {
            per_class_ap.iter().map(f).sum::<f64>() / per_class_ap.len() as f64
        }
    };

    let (mut tp, mut kept, mut truths) = (0usize, 0usize, 0usize);
    for img in images {
        let dets: Vec<Detection<f64>> =
            img.detections.iter().filter(|d| d.confidence >= conf_threshold).copied().collect();
        let sorted: Vec<Detection<f64>> = confidence_order(&dets).into_iter().map(|i| dets[i]).collect();
        tp += match_detections(&sorted, &img.truths, 0.5).into_iter().filter(|&f| f).count();
        kept += sorted.len();
        truths += img.truths.len();
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(DetectionScores {
        precision: ratio(tp, kept),
        recall: ratio(tp, truths),
        map50: mean(|c| c.ap50),
        map75: mean(|c| c.ap75),
        per_class_ap,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub precision: f64,
    pub recall: f64,
    pub map50: f64,
    pub map75: f64,
    pub fps: f64,
    pub parameter_count: usize,
    pub per_class_ap: Vec<ClassAp>,
    pub conf_threshold: f64,
    pub nms_iou: f64,
    /// Marks `fps` as a wall-clock measurement, excluded from reproducibility checks.
    pub wall_clock: bool,
}

impl MetricsReport {
    pub fn new(scores: DetectionScores, fps: f64, parameter_count: usize, conf_threshold: f64, nms_iou: f64) -> Self {
        MetricsReport {
            precision: scores.precision,
            recall: scores.recall,
            map50: scores.map50,
            map75: scores.map75,
            fps,
            parameter_count,
            per_class_ap: scores.per_class_ap,
            conf_threshold,
            nms_iou,
            wall_clock: true,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Images per second of `forward`, one image per call, after `warmup` calls.
pub fn measure_fps(images: usize, warmup: usize, mut forward: impl FnMut(usize) -> Result<()>) -> Result<f64> {
    if images == 0 {
        return Err(Error::input("fps needs at least one image"));
    }
    for i in 0..warmup {
        forward(i % images)?;
    }
    let start = Instant::now();
    for i in 0..images {
        forward(i)?;
    }
    let secs = start.elapsed().as_secs_f64();
    Ok(if secs > 0.0 { images as f64 / secs } else { f64::INFINITY })
}
