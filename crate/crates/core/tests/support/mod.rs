//! Slow, explicit reference implementations shared by test targets.

#![allow(dead_code)]

use ccsp_core::nn::{ConvNormAct, CotLayer};
use ccsp_core::params::{ParamId, ParamStore};
use ccsp_core::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Compares reverse-mode gradients of `loss` against central differences
/// for every element of every parameter in `store`.
pub fn check_param_gradients(
    store: &ParamStore<f64>,
    step: f64,
    tol: f64,
    loss: impl Fn(&ParamStore<f64>) -> f64,
    grads: impl Fn(&ParamStore<f64>) -> std::collections::HashMap<ParamId, Tensor<f64>>,
) {
    let analytic = grads(store);
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let n = store.get(id).len();
        for i in 0..n {
            let mut plus = store.clone();
            plus.get_mut(id)[i] += step;
            let mut minus = store.clone();
            minus.get_mut(id)[i] -= step;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * step);
            let ad = analytic.get(&id).map_or(0.0, |g| g[i]);
            let e = rel_err(fd, ad);
            assert!(e <= tol, "{}[{i}]: analytic {ad} vs numeric {fd} (rel {e})", store.name(id));
        }
    }
}

pub fn random_input(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

pub fn randomize(store: &mut ParamStore<f64>, scale: f64, rng: &mut ChaCha8Rng) {
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v = rng.gen_range(-scale..scale);
        }
    }
}

pub fn silu(v: f64) -> f64 {
    v / (1.0 + (-v).exp())
}

/// Direct convolution with zero padding `k / 2`.
pub fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, bias: Option<&Tensor<f64>>, groups: usize) -> Tensor<f64> {
    let (n, c, h, wd) = x.dims4().unwrap();
    let (o, cg, k, _) = w.dims4().unwrap();
    let r = (k / 2) as isize;
    let og = o / groups;
    let mut out = Tensor::zeros(&[n, o, h, wd]);
    for b in 0..n {
        for oc in 0..o {
            let g = oc / og;
            for y in 0..h {
                for xx in 0..wd {
                    let mut s = bias.map_or(0.0, |t| t[oc]);
                    for ic in 0..cg {
                        let cin = g * cg + ic;
                        for ky in 0..k {
                            for kx in 0..k {
                                let sy = y as isize + ky as isize - r;
                                let sx = xx as isize + kx as isize - r;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                                    continue;
                                }
                                s += w[((oc * cg + ic) * k + ky) * k + kx]
                                    * x[((b * c + cin) * h + sy as usize) * wd + sx as usize];
                            }
                        }
                    }
                    out[((b * o + oc) * h + y) * wd + xx] = s;
                }
            }
        }
    }
    out
}

pub fn naive_cna(x: &Tensor<f64>, store: &ParamStore<f64>, layer: &ConvNormAct) -> Tensor<f64> {
    let y = naive_conv(x, store.get(layer.conv.weight), None, layer.conv.spec.groups);
    let (scale, shift) = (store.get(layer.scale), store.get(layer.shift));
    let (_, c, h, w) = y.dims4().unwrap();
    Tensor::from_fn(y.shape(), |i| {
        let ch = (i / (h * w)) % c;
        silu(scale[ch] * y[i] + shift[ch])
    })
}

pub fn concat(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let (n, ca, h, w) = a.dims4().unwrap();
    let (_, cb, _, _) = b.dims4().unwrap();
    let mut out = Vec::new();
    for i in 0..n {
        out.extend_from_slice(&a.data()[i * ca * h * w..(i + 1) * ca * h * w]);
        out.extend_from_slice(&b.data()[i * cb * h * w..(i + 1) * cb * h * w]);
    }
    Tensor::from_vec(&[n, ca + cb, h, w], out).unwrap()
}

/// Sliding-window contextual attention written out position by position.
pub fn reference_cot(layer: &CotLayer, store: &ParamStore<f64>, x: &Tensor<f64>) -> Tensor<f64> {
    let k = layer.config.kernel_size;
    let heads = layer.config.heads;
    let k1 = naive_cna(x, store, &layer.key);
    let v = naive_cna(x, store, &layer.value);
    let hidden = naive_cna(&concat(&k1, x), store, &layer.attn_hidden);
    let logits = naive_conv(
        &hidden,
        store.get(layer.attn_logits.weight),
        layer.attn_logits.bias.map(|b| store.get(b)),
        1,
    );
    let (n, c, h, w) = x.dims4().unwrap();
    let per_head = c / heads;
    let r = (k / 2) as isize;
    let mut out = k1.clone();
    for b in 0..n {
        for y in 0..h {
            for xx in 0..w {
                for hd in 0..heads {
                    let window: Vec<f64> = (0..k * k)
                        .map(|j| logits[((b * heads * k * k + hd * k * k + j) * h + y) * w + xx])
                        .collect();
                    let m = window.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = window.iter().map(|l| (l - m).exp()).sum();
                    for ch in hd * per_head..(hd + 1) * per_head {
                        let mut acc = 0.0;
                        for (j, l) in window.iter().enumerate() {
                            let sy = y as isize + (j / k) as isize - r;
                            let sx = xx as isize + (j % k) as isize - r;
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                continue;
                            }
                            acc += (l - m).exp() / z * v[((b * c + ch) * h + sy as usize) * w + sx as usize];
                        }
                        out[((b * c + ch) * h + y) * w + xx] += acc;
                    }
                }
            }
        }
    }
    out
}
