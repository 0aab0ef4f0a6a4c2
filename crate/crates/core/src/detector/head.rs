use rand::Rng;
use serde::{Deserialize, Serialize};

use super::boxes::BBox;
use crate::error::{Error, Result};
use crate::graph::{CustomOp, Graph, Var};
use crate::nn::{BackboneOutput, Conv};
use crate::ops::sigmoid;
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Raw width/height logits are clamped to `±WH_CLAMP` before exponentiation.
pub const WH_CLAMP: f64 = 4.0;
/// Objectness bias at initialization.
const OBJ_BIAS_INIT: f64 = -2.0;

/// Per-scale `(w, h)` priors, normalized to the image size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AnchorSet {
    pub scales: Vec<Vec<[f64; 2]>>,
}

impl Default for AnchorSet {
    fn default() -> Self {
        AnchorSet {
            scales: vec![
                vec![[0.12, 0.12], [0.17, 0.17], [0.22, 0.22]],
                vec![[0.28, 0.28], [0.34, 0.34], [0.40, 0.40]],
                vec![[0.48, 0.48], [0.60, 0.60], [0.75, 0.75]],
            ],
        }
    }
}

impl AnchorSet {
    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() {
            return Err(Error::config("anchor set has no scales"));
        }
        let b = self.scales[0].len();
        for s in &self.scales {
            if s.is_empty() || s.len() != b {
                return Err(Error::config("every scale needs the same, positive number of anchors"));
            }
            if s.iter().any(|a| !(a[0] > 0.0 && a[1] > 0.0)) {
                return Err(Error::config("anchor priors must be positive"));
            }
        }
        Ok(())
    }

    pub fn per_scale(&self) -> usize {
        self.scales.first().map_or(0, Vec::len)
    }
}

/// Decoded predictions, one tensor per scale shaped `(N, gh, gw, B, 5 + C)`:
/// `cx, cy, w, h` in normalized image coordinates, then `p_obj`, then `p(c)`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutput<T> {
    pub scales: Vec<Tensor<T>>,
}

impl<T: Scalar> HeadOutput<T> {
    pub fn batch_size(&self) -> usize {
        self.scales.first().map_or(0, |t| t.shape()[0])
    }

    pub fn num_classes(&self) -> usize {
        self.scales.first().map_or(0, |t| t.shape()[4] - 5)
    }

    /// Predictions for one image of the batch.
    pub fn image(&self, index: usize) -> Result<HeadOutput<T>> {
        Ok(HeadOutput { scales: self.scales.iter().map(|t| t.narrow_batch(index, 1)).collect::<Result<_>>()? })
    }
}

/// Maps raw `(N, B·(5+C), gh, gw)` logits to decoded `(N, gh, gw, B, 5+C)` predictions.
pub fn decode_raw<T: Scalar>(raw: &Tensor<T>, anchors: &[[f64; 2]], num_classes: usize) -> Result<Tensor<T>> {
    let (n, ch, gh, gw) = raw.dims4()?;
    let b = anchors.len();
    let d = 5 + num_classes;
    if ch != b * d {
        return Err(Error::config(format!("head emits {ch} channels, expected {b}×{d}")));
    }
    let hw = gh * gw;
    let lim = T::lit(WH_CLAMP);
    let mut out = Tensor::zeros(&[n, gh, gw, b, d]);
    for ni in 0..n {
        for row in 0..gh {
            for col in 0..gw {
                let p = row * gw + col;
                for (a, prior) in anchors.iter().enumerate() {
                    let r = |j: usize| raw[(ni * ch + a * d + j) * hw + p];
                    let o = (((ni * gh + row) * gw + col) * b + a) * d;
                    let od = out.data_mut();
                    od[o] = (T::lit(col as f64) + sigmoid(r(0))) / T::lit(gw as f64);
                    od[o + 1] = (T::lit(row as f64) + sigmoid(r(1))) / T::lit(gh as f64);
                    od[o + 2] = T::lit(prior[0]) * r(2).max(-lim).min(lim).exp();
                    od[o + 3] = T::lit(prior[1]) * r(3).max(-lim).min(lim).exp();
                    for j in 4..d {
                        od[o + j] = sigmoid(r(j));
                    }
                }
            }
        }
    }
    Ok(out)
}

struct DecodeOp {
    anchors: Vec<[f64; 2]>,
    num_classes: usize,
}

impl<T: Scalar> CustomOp<T> for DecodeOp {
    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, grad: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let raw = inputs[0];
        let (n, ch, gh, gw) = raw.dims4()?;
        let b = self.anchors.len();
        let d = 5 + self.num_classes;
        let hw = gh * gw;
        let lim = T::lit(WH_CLAMP);
        let mut dr = Tensor::zeros(raw.shape());
        for ni in 0..n {
            for row in 0..gh {
                for col in 0..gw {
                    let p = row * gw + col;
                    for (a, prior) in self.anchors.iter().enumerate() {
                        let o = (((ni * gh + row) * gw + col) * b + a) * d;
                        let ri = |j: usize| (ni * ch + a * d + j) * hw + p;
                        let dsig = |v: T| {
                            let s = sigmoid(v);
                            s * (T::one() - s)
                        };
                        dr[ri(0)] = grad[o] * dsig(raw[ri(0)]) / T::lit(gw as f64);
                        dr[ri(1)] = grad[o + 1] * dsig(raw[ri(1)]) / T::lit(gh as f64);
                        for (j, pr) in [(2, prior[0]), (3, prior[1])] {
                            let t = raw[ri(j)];
                            dr[ri(j)] = if t.abs() <= lim { grad[o + j] * T::lit(pr) * t.exp() } else { T::zero() };
                        }
                        for j in 4..d {
                            dr[ri(j)] = grad[o + j] * dsig(raw[ri(j)]);
                        }
                    }
                }
            }
        }
        Ok(vec![dr])
    }
}

/// Inverse of the box part of [`decode_raw`] for a box whose centre lies
/// strictly inside cell `(row, col)`: returns raw `(tx, ty, tw, th)`.
pub fn encode_box<T: Scalar>(bbox: &BBox<T>, row: usize, col: usize, grid: (usize, usize), prior: [f64; 2]) -> [T; 4] {
    let logit = |p: T| (p / (T::one() - p)).ln();
    let (gh, gw) = grid;
    [
        logit(bbox.cx * T::lit(gw as f64) - T::lit(col as f64)),
        logit(bbox.cy * T::lit(gh as f64) - T::lit(row as f64)),
        (bbox.w / T::lit(prior[0])).ln(),
        (bbox.h / T::lit(prior[1])).ln(),
    ]
}

/// One pointwise prediction convolution per scale.
#[derive(Clone, Debug)]
pub struct Head {
    pub anchors: AnchorSet,
    pub num_classes: usize,
    pub in_widths: Vec<usize>,
    convs: Vec<Conv>,
}

impl Head {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        in_widths: &[usize],
        anchors: AnchorSet,
        num_classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        anchors.validate()?;
        if anchors.scales.len() != in_widths.len() {
            return Err(Error::config(format!(
                "{} anchor scales for {} feature scales",
                anchors.scales.len(),
                in_widths.len()
            )));
        }
        if num_classes == 0 {
            return Err(Error::config("need at least one class"));
        }
        let d = 5 + num_classes;
        let mut convs = Vec::new();
        for (i, (&w, priors)) in in_widths.iter().zip(&anchors.scales).enumerate() {
            let conv = Conv::new(store, &format!("head.pred{i}"), w, priors.len() * d, 1, 1, 1, true, rng);
            // small initial weights; objectness starts low
            let weight = store.get_mut(conv.weight);
            let shrunk = weight.map(|v| v * T::lit(0.1));
            *weight = shrunk;
            let bias = store.get_mut(conv.bias.expect("head conv has bias"));
            for a in 0..priors.len() {
                bias[a * d + 4] = T::lit(OBJ_BIAS_INIT);
            }
            convs.push(conv);
        }
        Ok(Head { anchors, num_classes, in_widths: in_widths.to_vec(), convs })
    }

    /// Raw per-scale logits, then decoding.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, neck: &BackboneOutput) -> Result<Vec<Var>> {
        let mut outs = Vec::new();
        for (i, ((conv, priors), &x)) in self.convs.iter().zip(&self.anchors.scales).zip(&neck.scales).enumerate() {
            let (_, c, _, _) = g.value(x).dims4()?;
            if c != self.in_widths[i] {
                return Err(Error::config(format!(
                    "head scale {i} expects {} channels, got {c}",
                    self.in_widths[i]
                )));
            }
            let raw = conv.forward(g, store, x)?;
            outs.push(self.decode(g, raw, priors)?);
        }
        Ok(outs)
    }

    /// Decodes a raw logit node; `priors` are that scale's anchors.
    pub fn decode<T: Scalar>(&self, g: &mut Graph<T>, raw: Var, priors: &[[f64; 2]]) -> Result<Var> {
        let out = decode_raw(g.value(raw), priors, self.num_classes)?;
        Ok(g.custom(&[raw], out, Box::new(DecodeOp { anchors: priors.to_vec(), num_classes: self.num_classes })))
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.convs.iter().flat_map(Conv::param_ids).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_logits_decode_to_cell_centres_and_priors() {
        let anchors = [[0.1, 0.2], [0.3, 0.3], [0.5, 0.4]];
        let raw = Tensor::<f64>::zeros(&[1, 3 * 8, 8, 8]);
        let out = decode_raw(&raw, &anchors, 3).unwrap();
        assert_eq!(out.shape(), &[1, 8, 8, 3, 8]);
        for row in 0..8 {
            for col in 0..8 {
                for (a, prior) in anchors.iter().enumerate() {
                    let o = ((row * 8 + col) * 3 + a) * 8;
                    assert!((out[o] - (col as f64 + 0.5) / 8.0).abs() < 1e-12);
                    assert!((out[o + 1] - (row as f64 + 0.5) / 8.0).abs() < 1e-12);
                    assert_eq!(out[o + 2], prior[0]);
                    assert_eq!(out[o + 3], prior[1]);
                    for j in 4..8 {
                        assert_eq!(out[o + j], 0.5);
                    }
                }
            }
        }
    }

    #[test]
    fn decode_rejects_channel_mismatch() {
        let raw = Tensor::<f64>::zeros(&[1, 20, 2, 2]);
        assert!(matches!(decode_raw(&raw, &[[0.1, 0.1]; 3], 3), Err(Error::Config(_))));
    }

    #[test]
    fn decode_gradient_matches_finite_differences() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let anchors = vec![[0.2, 0.3], [0.4, 0.1]];
        let raw = Tensor::<f64>::uniform(&[2, 2 * 7, 2, 3], 2.0, &mut rng);
        let probe = Tensor::<f64>::uniform(&[2, 2, 3, 2, 7], 1.0, &mut rng);
        let f = |r: &Tensor<f64>| {
            decode_raw(r, &anchors, 2).unwrap().data().iter().zip(probe.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let op = DecodeOp { anchors: anchors.clone(), num_classes: 2 };
        let out = decode_raw(&raw, &anchors, 2).unwrap();
        let grad = CustomOp::<f64>::backward(&op, &[&raw], &out, &probe).unwrap().remove(0);
        for i in 0..raw.len() {
            let (mut p, mut m) = (raw.clone(), raw.clone());
            p[i] += 1e-6;
            m[i] -= 1e-6;
            assert!(((f(&p) - f(&m)) / 2e-6 - grad[i]).abs() < 1e-6);
        }
    }

    proptest! {
        #[test]
        fn decoded_centre_stays_in_cell(logits in prop::collection::vec(-30.0..30.0f64, 4 * 8 * 2 * 3)) {
            let raw = Tensor::from_vec(&[1, 8, 4, 6], logits).unwrap();
            let out = decode_raw(&raw, &[[0.2, 0.2]], 3).unwrap();
            for row in 0..4 {
                for col in 0..6 {
                    let o = (row * 6 + col) * 8;
                    prop_assert!(out[o] >= col as f64 / 6.0 && out[o] <= (col + 1) as f64 / 6.0);
                    prop_assert!(out[o + 1] >= row as f64 / 4.0 && out[o + 1] <= (row + 1) as f64 / 4.0);
                    prop_assert!(out[o + 2] > 0.0 && out[o + 3] > 0.0);
                }
            }
        }

        #[test]
        fn encode_decode_round_trip(fx in 0.01..0.99f64, fy in 0.01..0.99f64, w in 0.05..0.9f64, h in 0.05..0.9f64,
                                    row in 0usize..4, col in 0usize..4) {
            let bbox = BBox { cx: (col as f64 + fx) / 4.0, cy: (row as f64 + fy) / 4.0, w, h };
            let prior = [0.3, 0.25];
            let t = encode_box(&bbox, row, col, (4, 4), prior);
            prop_assume!(t[2].abs() < WH_CLAMP && t[3].abs() < WH_CLAMP);
            let mut raw = Tensor::<f64>::zeros(&[1, 6, 4, 4]);
            for (j, v) in t.iter().enumerate() {
                raw[j * 16 + row * 4 + col] = *v;
            }
            let out = decode_raw(&raw, &[prior], 1).unwrap();
            let o = (row * 4 + col) * 6;
            prop_assert!((out[o] - bbox.cx).abs() < 1e-6);
            prop_assert!((out[o + 1] - bbox.cy).abs() < 1e-6);
            prop_assert!((out[o + 2] - bbox.w).abs() < 1e-6);
            prop_assert!((out[o + 3] - bbox.h).abs() < 1e-6);
        }
    }
}
