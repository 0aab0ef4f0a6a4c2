//! Detection losses (classification, localization, objectness and their
//! weighted sum), the restoration loss, and the joint objective.
//!
//! Detection terms are summed over the grid and divided by the batch size.

use serde::{Deserialize, Serialize};

use crate::detector::{GridTarget, HeadOutput};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_cls: f64,
    pub lambda_loc: f64,
    pub lambda_obj: f64,
    pub lambda_noobj: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_cls: 1.0, lambda_loc: 5.0, lambda_obj: 1.0, lambda_noobj: 0.5, alpha: 0.5, beta: 0.5 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_cls, self.lambda_loc, self.lambda_obj, self.lambda_noobj, self.alpha, self.beta];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::config("loss weights must be finite and nonnegative"));
        }
        if self.alpha + self.beta <= 0.0 {
            return Err(Error::config("alpha + beta must be positive"));
        }
        Ok(())
    }
}

/// Scalar loss components.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub loc: f64,
    pub obj: f64,
    pub l1: f64,
    pub l2: f64,
    pub joint: f64,
}

impl LossBreakdown {
    /// Fills `l1` from the components and weights.
    pub fn with_detection(cls: f64, loc: f64, obj: f64, w: &LossWeights) -> Self {
        LossBreakdown {
            cls,
            loc,
            obj,
            l1: w.lambda_cls * cls + w.lambda_loc * loc + w.lambda_obj * obj,
            ..Default::default()
        }
    }

    /// Sets `l2` and recombines `joint`.
    pub fn with_denoise(mut self, l2: f64, w: &LossWeights) -> Self {
        self.l2 = l2;
        self.joint = joint_loss(self.l1, l2, w);
        self
    }
}

/// `α·l1 + β·l2`.
pub fn joint_loss(l1: f64, l2: f64, w: &LossWeights) -> f64 {
    w.alpha * l1 + w.beta * l2
}

fn check_shapes<T: Scalar>(pred: &HeadOutput<T>, target: &GridTarget<T>) -> Result<()> {
    if pred.scales.len() != target.scales.len() {
        return Err(Error::input(format!(
            "{} prediction scales vs {} target scales",
            pred.scales.len(),
            target.scales.len()
        )));
    }
    for (p, t) in pred.scales.iter().zip(&target.scales) {
        let want = [t.batch, t.grid.0, t.grid.1, t.anchors, 5 + t.num_classes];
        if p.shape() != want {
            return Err(Error::input(format!("prediction shape {:?} vs target layout {want:?}", p.shape())));
        }
    }
    Ok(())
}

struct Terms<T> {
    cls: T,
    loc: T,
    obj: T,
    grads: Option<Vec<Tensor<T>>>,
}

fn detection_terms<T: Scalar>(pred: &HeadOutput<T>, target: &GridTarget<T>, w: &LossWeights, want_grad: bool) -> Result<Terms<T>> {
    check_shapes(pred, target)?;
    let n = T::lit(target.batch_size().max(1) as f64);
    let two = T::lit(2.0);
    let (lc, ll, lo, lno) = (T::lit(w.lambda_cls), T::lit(w.lambda_loc), T::lit(w.lambda_obj), T::lit(w.lambda_noobj));
    let (mut cls, mut loc, mut obj) = (T::zero(), T::zero(), T::zero());
    let mut grads = Vec::new();
    for (p, t) in pred.scales.iter().zip(&target.scales) {
        let d = 5 + t.num_classes;
        let mut gr = if want_grad { Tensor::zeros(p.shape()) } else { Tensor::zeros(&[0]) };
        for slot in 0..t.slots() {
            let o = slot * d;
            let v = &p.data()[o..o + d];
            if t.obj[slot] {
                let tc = &t.classes[slot * t.num_classes..(slot + 1) * t.num_classes];
                for c in 0..t.num_classes {
                    let e = v[5 + c] - tc[c];
                    cls += e * e;
                    if want_grad {
                        gr[o + 5 + c] += lc * two * e / n;
                    }
                }
                let tb = t.boxes[slot];
                if !(v[2] > T::zero() && v[3] > T::zero() && tb[2] > T::zero() && tb[3] > T::zero()) {
                    return Err(Error::input("localization needs positive widths and heights"));
                }
                let (ex, ey) = (v[0] - tb[0], v[1] - tb[1]);
                let (sw, sh) = (v[2].sqrt(), v[3].sqrt());
                let (ew, eh) = (sw - tb[2].sqrt(), sh - tb[3].sqrt());
                loc += ex * ex + ey * ey + ew * ew + eh * eh;
                let eo = T::one() - v[4];
                obj += eo * eo;
                if want_grad {
                    gr[o] += ll * two * ex / n;
                    gr[o + 1] += ll * two * ey / n;
                    gr[o + 2] += ll * ew / sw / n;
                    gr[o + 3] += ll * eh / sh / n;
                    gr[o + 4] += -lo * two * eo / n;
                }
            }
            if t.noobj[slot] {
                obj += lno * v[4] * v[4];
                if want_grad {
                    gr[o + 4] += lo * lno * two * v[4] / n;
                }
            }
        }
        if want_grad {
            grads.push(gr);
        }
    }
    Ok(Terms { cls: cls / n, loc: loc / n, obj: obj / n, grads: want_grad.then_some(grads) })
}

/// Squared error between predicted and one-hot class probabilities at responsible anchors.
pub fn classification_loss<T: Scalar>(pred: &HeadOutput<T>, target: &GridTarget<T>) -> Result<T> {
    Ok(detection_terms(pred, target, &LossWeights::default(), false)?.cls)
}

/// Squared error on centres and on square roots of sizes at responsible anchors.
pub fn localization_loss<T: Scalar>(pred: &HeadOutput<T>, target: &GridTarget<T>) -> Result<T> {
    Ok(detection_terms(pred, target, &LossWeights::default(), false)?.loc)
}

/// `Σ_obj (1 − p)² + λ_noobj Σ_noobj p²`.
pub fn objectness_loss<T: Scalar>(pred: &HeadOutput<T>, target: &GridTarget<T>, w: &LossWeights) -> Result<T> {
    Ok(detection_terms(pred, target, w, false)?.obj)
}

/// Components and their weighted sum `l1`.
pub fn detection_loss<T: Scalar>(pred: &HeadOutput<T>, target: &GridTarget<T>, w: &LossWeights) -> Result<LossBreakdown> {
    let t = detection_terms(pred, target, w, false)?;
    Ok(LossBreakdown::with_detection(t.cls.as_f64(), t.loc.as_f64(), t.obj.as_f64(), w))
}

/// As [`detection_loss`], plus `d l1 / d pred` for every scale.
pub fn detection_loss_grad<T: Scalar>(
    pred: &HeadOutput<T>,
    target: &GridTarget<T>,
    w: &LossWeights,
) -> Result<(LossBreakdown, Vec<Tensor<T>>)> {
    let t = detection_terms(pred, target, w, true)?;
    let b = LossBreakdown::with_detection(t.cls.as_f64(), t.loc.as_f64(), t.obj.as_f64(), w);
    Ok((b, t.grads.unwrap_or_default()))
}

fn check_pair<T: Scalar>(pred: &Tensor<T>, truth: &Tensor<T>) -> Result<usize> {
    if pred.shape() != truth.shape() || pred.rank() < 2 || pred.is_empty() {
        return Err(Error::input(format!(
            "restoration batches differ in shape: {:?} vs {:?}",
            pred.shape(),
            truth.shape()
        )));
    }
    Ok(pred.shape()[0])
}

/// Mean over images of each image's per-element mean squared error.
pub fn denoise_loss<T: Scalar>(pred: &Tensor<T>, truth: &Tensor<T>) -> Result<T> {
    let d = check_pair(pred, truth)?;
    let per = pred.len() / d;
    let mut total = T::zero();
    for i in 0..d {
        let s: T = pred.data()[i * per..(i + 1) * per]
            .iter()
            .zip(&truth.data()[i * per..(i + 1) * per])
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum();
        total += s / T::lit(per as f64);
    }
    Ok(total / T::lit(d as f64))
}

/// [`denoise_loss`] and its gradient w.r.t. `pred`.
pub fn denoise_loss_grad<T: Scalar>(pred: &Tensor<T>, truth: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    let loss = denoise_loss(pred, truth)?;
    let scale = T::lit(2.0 / pred.len() as f64);
    let g = Tensor::from_fn(pred.shape(), |i| scale * (pred[i] - truth[i]));
    Ok((loss, g))
}
