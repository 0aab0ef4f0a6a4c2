use std::time::Instant;

use super::data::Dataset;
use super::model::Model;
use crate::detector::{extract_detections, nms};
use crate::error::{Error, Result};
use crate::metrics::{score_detections, ImageResult, MetricsReport, AP_CONF_FLOOR};
use crate::scalar::Scalar;

/// Post-NMS detections (confidence ≥ the AP floor) for every sample, and
/// the forward-pass wall time in seconds, batch 1, after one warm-up pass.
pub fn image_results<T: Scalar>(model: &Model<T>, data: &Dataset<T>, nms_iou: f64) -> Result<(Vec<ImageResult>, f64)> {
    let first = data.samples.first().ok_or_else(|| Error::input("cannot evaluate an empty dataset"))?;
    model.predict(&first.image.unsqueeze0())?;
    let mut seconds = 0.0;
    let mut results = Vec::with_capacity(data.len());
    for s in &data.samples {
        let batch = s.image.unsqueeze0();
        let start = Instant::now();
        let out = model.predict(&batch)?;
        seconds += start.elapsed().as_secs_f64();
        let dets = extract_detections(&out, T::lit(AP_CONF_FLOOR)).pop().unwrap_or_default();
        let kept = nms(&dets, T::lit(nms_iou), T::lit(AP_CONF_FLOOR));
        results.push(ImageResult::new(&kept, &s.labels));
    }
    Ok((results, seconds))
}

/// Scores `model` on `data` through its full inference path.
pub fn evaluate_model<T: Scalar>(model: &Model<T>, data: &Dataset<T>, conf_threshold: f64, nms_iou: f64) -> Result<MetricsReport> {
    let (results, seconds) = image_results(model, data, nms_iou)?;
    let scores = score_detections(&results, conf_threshold)?;
    let fps = if seconds > 0.0 { data.len() as f64 / seconds } else { 0.0 };
    Ok(MetricsReport::new(scores, fps, model.parameter_count(), conf_threshold, nms_iou))
}
