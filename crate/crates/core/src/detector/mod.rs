//! Anchor-based single-stage detector: head, target assignment, decoding
//! and non-maximum suppression.

mod assign;
mod boxes;
mod head;
mod nms;

pub use assign::{assign_targets, GridTarget, ScaleTarget};
pub use boxes::{format_labels, iou, parse_labels, BBox, Detection, Label};
pub use head::{decode_raw, encode_box, AnchorSet, Head, HeadOutput, WH_CLAMP};
pub use nms::{confidence_order, nms};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Backbone, BackboneConfig, CotConfig, Neck, NeckConfig, STRIDES};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use crate::nn::BackboneOutput;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub backbone: BackboneConfig,
    /// Channel widths of the neck outputs, which the head consumes.
    pub neck_widths: [usize; 3],
    pub cot: CotConfig,
    pub num_classes: usize,
    pub anchors: AnchorSet,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            backbone: BackboneConfig::default(),
            neck_widths: [16, 32, 64],
            cot: CotConfig::default(),
            num_classes: 3,
            anchors: AnchorSet::default(),
        }
    }
}

/// Backbone, CCSP neck and prediction head.
#[derive(Clone, Debug)]
pub struct Detector {
    pub config: DetectorConfig,
    pub backbone: Backbone,
    pub neck: Neck,
    pub head: Head,
}

impl Detector {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, config: DetectorConfig, rng: &mut R) -> Result<Self> {
        if config.anchors.scales.len() != 3 {
            return Err(Error::config("detector needs anchors for exactly 3 scales"));
        }
        let backbone = Backbone::new(store, config.backbone.clone(), rng)?;
        let neck = Neck::new(
            store,
            NeckConfig { in_widths: config.backbone.widths, out_widths: config.neck_widths, cot: config.cot },
            rng,
        )?;
        let head = Head::new(store, &config.neck_widths, config.anchors.clone(), config.num_classes, rng)?;
        Ok(Detector { config, backbone, neck, head })
    }

    /// Per-scale `(rows, cols)` for an image of `h × w` pixels.
    pub fn grid_sizes(h: usize, w: usize) -> Vec<(usize, usize)> {
        STRIDES.iter().map(|s| (h / s, w / s)).collect()
    }

    /// Decoded per-scale prediction nodes for an image batch node.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, images: Var) -> Result<Vec<Var>> {
        let feats = self.backbone.forward(g, store, images)?;
        let fused = self.neck.forward(g, store, &feats)?;
        self.head.forward(g, store, &fused)
    }

    pub fn predict<T: Scalar>(&self, store: &ParamStore<T>, images: &Tensor<T>) -> Result<HeadOutput<T>> {
        let mut g = Graph::new();
        let x = g.input(images.clone());
        let outs = self.forward(&mut g, store, x)?;
        Ok(HeadOutput { scales: outs.iter().map(|&v| g.value(v).clone()).collect() })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.backbone.param_ids();
        ids.extend(self.neck.param_ids());
        ids.extend(self.head.param_ids());
        ids
    }
}

/// Candidate detections of each image: one per `(cell, anchor)` with the
/// best class, kept when `p_obj · p(class) ≥ min_confidence`.
pub fn extract_detections<T: Scalar>(out: &HeadOutput<T>, min_confidence: T) -> Vec<Vec<Detection<T>>> {
    let n = out.batch_size();
    let mut per_image = vec![Vec::new(); n];
    for t in &out.scales {
        let s = t.shape();
        let (gh, gw, b, d) = (s[1], s[2], s[3], s[4]);
        for (ni, dets) in per_image.iter_mut().enumerate() {
            for cell in 0..gh * gw * b {
                let o = (ni * gh * gw * b + cell) * d;
                let v = &t.data()[o..o + d];
                let (class_id, &pc) = v[5..]
                    .iter()
                    .enumerate()
                    .fold((0, &v[5]), |best, cur| if *cur.1 > *best.1 { cur } else { best });
                let confidence = v[4] * pc;
                if confidence >= min_confidence {
                    let clip = |x: T| x.max(T::zero()).min(T::one());
                    dets.push(Detection {
                        bbox: BBox { cx: clip(v[0]), cy: clip(v[1]), w: v[2], h: v[3] },
                        class_id,
                        confidence,
                    });
                }
            }
        }
    }
    per_image
}
