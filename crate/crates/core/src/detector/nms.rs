use super::boxes::{iou, Detection};
use crate::scalar::Scalar;

/// Indices sorted by confidence descending, ties kept in input order.
pub fn confidence_order<T: Scalar>(dets: &[Detection<T>]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..dets.len()).collect();
    idx.sort_by(|&a, &b| {
        dets[b]
            .confidence
            .partial_cmp(&dets[a].confidence)
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    idx
}

/// Per-class greedy non-maximum suppression.
///
/// Drops detections under `conf_threshold`, then keeps detections in
/// descending confidence unless one already kept with the same class
/// overlaps it by more than `iou_threshold`.
pub fn nms<T: Scalar>(dets: &[Detection<T>], iou_threshold: T, conf_threshold: T) -> Vec<Detection<T>> {
    let mut kept: Vec<Detection<T>> = Vec::new();
    for i in confidence_order(dets) {
        let d = dets[i];
        if d.confidence < conf_threshold {
            continue;
        }
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == d.class_id && iou(&k.bbox, &d.bbox) > iou_threshold);
        if !suppressed {
            kept.push(d);
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::BBox;
    use proptest::prelude::*;

    fn det(x0: f64, y0: f64, x1: f64, y1: f64, class_id: usize, confidence: f64) -> Detection<f64> {
        Detection { bbox: BBox::from_corners(x0, y0, x1, y1), class_id, confidence }
    }

    #[test]
    fn identical_same_class_keeps_best() {
        let out = nms(&[det(0.1, 0.1, 0.3, 0.3, 0, 0.8), det(0.1, 0.1, 0.3, 0.3, 0, 0.9)], 0.5, 0.0);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].confidence, 0.9);
    }

    #[test]
    fn identical_different_class_both_survive() {
        let out = nms(&[det(0.1, 0.1, 0.3, 0.3, 0, 0.9), det(0.1, 0.1, 0.3, 0.3, 1, 0.8)], 0.5, 0.0);
        assert_eq!(out.len(), 2);
    }

    #[test]
    fn third_overlap_survives_half_threshold() {
        let out = nms(&[det(0.0, 0.0, 0.5, 0.5, 0, 0.9), det(0.25, 0.0, 0.75, 0.5, 0, 0.8)], 0.5, 0.0);
        assert_eq!(out.len(), 2);
    }

    #[test]
    fn low_confidence_dropped_and_empty_ok() {
        assert!(nms::<f64>(&[], 0.5, 0.25).is_empty());
        let out = nms(&[det(0.0, 0.0, 0.5, 0.5, 0, 0.1)], 0.5, 0.25);
        assert!(out.is_empty());
    }

    #[test]
    fn equal_confidence_keeps_input_order() {
        let out = nms(&[det(0.0, 0.0, 0.1, 0.1, 0, 0.5), det(0.5, 0.5, 0.6, 0.6, 1, 0.5)], 0.5, 0.0);
        assert_eq!(out[0].class_id, 0);
        assert_eq!(out[1].class_id, 1);
    }

    proptest! {
        #[test]
        fn nms_is_idempotent(raw in prop::collection::vec((0.0..0.8f64, 0.0..0.8f64, 0.05..0.2f64, 0usize..3, 0.0..1.0f64), 0..25)) {
            let dets: Vec<_> = raw.iter().map(|&(x, y, s, c, p)| det(x, y, x + s, y + s, c, p)).collect();
            let once = nms(&dets, 0.45, 0.2);
            let twice = nms(&once, 0.45, 0.2);
            prop_assert_eq!(&once, &twice);
            for w in once.windows(2) {
                prop_assert!(w[0].confidence >= w[1].confidence);
            }
        }
    }
}
