use super::boxes::Label;
use super::head::AnchorSet;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Responsibility indicators and regression/class targets for one scale.
/// Arrays are indexed by `((n·gh + row)·gw + col)·B + anchor`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleTarget<T> {
    pub batch: usize,
    pub grid: (usize, usize),
    pub anchors: usize,
    pub num_classes: usize,
    pub obj: Vec<bool>,
    pub noobj: Vec<bool>,
    /// `cx, cy, w, h` per slot.
    pub boxes: Vec<[T; 4]>,
    /// One-hot, `num_classes` per slot.
    pub classes: Vec<T>,
}

impl<T: Scalar> ScaleTarget<T> {
    fn empty(batch: usize, grid: (usize, usize), anchors: usize, num_classes: usize) -> Self {
        let slots = batch * grid.0 * grid.1 * anchors;
        ScaleTarget {
            batch,
            grid,
            anchors,
            num_classes,
            obj: vec![false; slots],
            noobj: vec![true; slots],
            boxes: vec![[T::zero(); 4]; slots],
            classes: vec![T::zero(); slots * num_classes],
        }
    }

    pub fn slots(&self) -> usize {
        self.obj.len()
    }

    pub fn slot(&self, n: usize, row: usize, col: usize, anchor: usize) -> usize {
        ((n * self.grid.0 + row) * self.grid.1 + col) * self.anchors + anchor
    }
}

/// Assignment targets over every scale.
#[derive(Clone, Debug, PartialEq)]
pub struct GridTarget<T> {
    pub scales: Vec<ScaleTarget<T>>,
}

impl<T: Scalar> GridTarget<T> {
    pub fn batch_size(&self) -> usize {
        self.scales.first().map_or(0, |s| s.batch)
    }

    pub fn num_responsible(&self) -> usize {
        self.scales.iter().map(|s| s.obj.iter().filter(|&&o| o).count()).sum()
    }

    /// Concatenates single-image (or smaller-batch) targets along the batch axis.
    pub fn concat(parts: &[GridTarget<T>]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::input("no targets to concatenate"))?;
        let mut scales = Vec::new();
        for (i, s0) in first.scales.iter().enumerate() {
            let mut out = ScaleTarget::empty(0, s0.grid, s0.anchors, s0.num_classes);
            for p in parts {
                let s = p.scales.get(i).ok_or_else(|| Error::input("scale count differs"))?;
                if (s.grid, s.anchors, s.num_classes) != (s0.grid, s0.anchors, s0.num_classes) {
                    return Err(Error::input("target layouts differ"));
                }
                out.batch += s.batch;
                out.obj.extend_from_slice(&s.obj);
                out.noobj.extend_from_slice(&s.noobj);
                out.boxes.extend_from_slice(&s.boxes);
                out.classes.extend_from_slice(&s.classes);
            }
            scales.push(out);
        }
        Ok(GridTarget { scales })
    }
}

/// IoU of two boxes sharing a centre.
fn centred_iou(w0: f64, h0: f64, w1: f64, h1: f64) -> f64 {
    let inter = w0.min(w1) * h0.min(h1);
    inter / (w0 * h0 + w1 * h1 - inter)
}

/// Assigns every ground-truth box to exactly one `(scale, cell, anchor)`.
///
/// On each scale the cell containing the box centre is considered; the
/// `(scale, anchor)` prior with the highest centred IoU wins, ties going to the
/// smaller scale index and then the smaller anchor index. If that slot already
/// holds an earlier box, the next-best free candidate is taken.
pub fn assign_targets<T: Scalar>(
    labels: &[Label<T>],
    anchors: &AnchorSet,
    grid_sizes: &[(usize, usize)],
    num_classes: usize,
) -> Result<GridTarget<T>> {
    anchors.validate()?;
    if grid_sizes.len() != anchors.scales.len() {
        return Err(Error::config(format!(
            "{} grid sizes for {} anchor scales",
            grid_sizes.len(),
            anchors.scales.len()
        )));
    }
    let b = anchors.per_scale();
    let mut scales: Vec<ScaleTarget<T>> =
        grid_sizes.iter().map(|&g| ScaleTarget::empty(1, g, b, num_classes)).collect();
    for label in labels {
        label.bbox.validate()?;
        if label.class_id >= num_classes {
            return Err(Error::input(format!("class id {} out of range 0..{num_classes}", label.class_id)));
        }
        let (bw, bh) = (label.bbox.w.as_f64(), label.bbox.h.as_f64());
        let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
        for (si, priors) in anchors.scales.iter().enumerate() {
            for (ai, p) in priors.iter().enumerate() {
                candidates.push((centred_iou(bw, bh, p[0], p[1]), si, ai));
            }
        }
        // stable sort keeps (scale, anchor) order among equal IoUs
        candidates.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));
        let mut placed = false;
        for &(_, si, ai) in &candidates {
            let st = &mut scales[si];
            let (gh, gw) = st.grid;
            let col = ((label.bbox.cx.as_f64() * gw as f64).floor() as usize).min(gw - 1);
            let row = ((label.bbox.cy.as_f64() * gh as f64).floor() as usize).min(gh - 1);
            let slot = st.slot(0, row, col, ai);
            if st.obj[slot] {
                continue;
            }
            st.obj[slot] = true;
            st.noobj[slot] = false;
            st.boxes[slot] = [label.bbox.cx, label.bbox.cy, label.bbox.w, label.bbox.h];
            st.classes[slot * num_classes + label.class_id] = T::one();
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::input("too many boxes share one location: no free anchor slot"));
        }
    }
    Ok(GridTarget { scales })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::BBox;
    use proptest::prelude::*;

    fn single_scale(priors: Vec<[f64; 2]>) -> AnchorSet {
        AnchorSet { scales: vec![priors] }
    }

    fn label(cx: f64, cy: f64, w: f64, h: f64, class_id: usize) -> Label<f64> {
        Label { class_id, bbox: BBox { cx, cy, w, h } }
    }

    #[test]
    fn centre_box_lands_in_middle_cell() {
        let anchors = single_scale(vec![[0.2, 0.2]]);
        let t = assign_targets(&[label(0.5, 0.5, 0.2, 0.2, 1)], &anchors, &[(8, 8)], 3).unwrap();
        let s = &t.scales[0];
        let slot = s.slot(0, 4, 4, 0);
        assert!(s.obj[slot]);
        assert_eq!(&s.classes[slot * 3..slot * 3 + 3], &[0.0, 1.0, 0.0]);
        assert_eq!(t.num_responsible(), 1);
    }

    #[test]
    fn empty_labels_give_all_noobj() {
        let t = assign_targets::<f64>(&[], &AnchorSet::default(), &[(8, 8), (4, 4), (2, 2)], 3).unwrap();
        for s in &t.scales {
            assert!(s.obj.iter().all(|&o| !o));
            assert!(s.noobj.iter().all(|&o| o));
        }
    }

    #[test]
    fn best_prior_wins() {
        // IoU 1.0 vs 0.25 vs 0.25
        assert!((centred_iou(0.2, 0.2, 0.1, 0.1) - 0.25).abs() < 1e-12);
        assert!((centred_iou(0.2, 0.2, 0.4, 0.4) - 0.25).abs() < 1e-12);
        let anchors = single_scale(vec![[0.1, 0.1], [0.2, 0.2], [0.4, 0.4]]);
        let t = assign_targets(&[label(0.3, 0.3, 0.2, 0.2, 0)], &anchors, &[(8, 8)], 3).unwrap();
        let s = &t.scales[0];
        assert!(s.obj[s.slot(0, 2, 2, 1)]);
    }

    #[test]
    fn ties_break_toward_smaller_indices() {
        let anchors = AnchorSet { scales: vec![vec![[0.3, 0.3], [0.3, 0.3]], vec![[0.3, 0.3], [0.3, 0.3]]] };
        let t = assign_targets(&[label(0.5, 0.5, 0.3, 0.3, 0)], &anchors, &[(4, 4), (2, 2)], 1).unwrap();
        assert!(t.scales[0].obj[t.scales[0].slot(0, 2, 2, 0)]);
        assert_eq!(t.num_responsible(), 1);
    }

    #[test]
    fn degenerate_box_is_input_error() {
        let r = assign_targets(&[label(0.5, 0.5, 0.0, 0.1, 0)], &AnchorSet::default(), &[(8, 8), (4, 4), (2, 2)], 3);
        assert!(matches!(r, Err(Error::Input(_))));
    }

    proptest! {
        #[test]
        fn every_box_assigned_once(boxes in prop::collection::vec((0.0..1.0f64, 0.0..1.0f64, 0.05..0.6f64, 0.05..0.6f64, 0usize..3), 0..8)) {
            let labels: Vec<_> = boxes.iter().map(|&(x, y, w, h, c)| label(x, y, w, h, c)).collect();
            let t = assign_targets(&labels, &AnchorSet::default(), &[(8, 8), (4, 4), (2, 2)], 3).unwrap();
            prop_assert_eq!(t.num_responsible(), labels.len());
            for s in &t.scales {
                for i in 0..s.slots() {
                    prop_assert!(s.obj[i] != s.noobj[i]);
                }
            }
        }
    }
}
