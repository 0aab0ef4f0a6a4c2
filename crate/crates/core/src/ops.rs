//! Forward and backward kernels on raw tensors. The autograd tape in
//! [`crate::graph`] dispatches to these.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Stride, zero padding and group count of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub fn same(kernel: usize) -> Self {
        ConvSpec { stride: 1, padding: kernel / 2, groups: 1 }
    }

    pub fn output_size(&self, input: usize, kernel: usize) -> Option<usize> {
        let padded = input + 2 * self.padding;
        if padded < kernel || self.stride == 0 {
            return None;
        }
        Some((padded - kernel) / self.stride + 1)
    }
}

struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    ho: usize,
    wo: usize,
    cin_g: usize,
    cout_g: usize,
    groups: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn new<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, spec: ConvSpec) -> Result<Self> {
        let (n, cin, h, wd) = x.dims4()?;
        let (cout, cin_g, kh, kw) = w.dims4()?;
        if kh != kw {
            return Err(Error::config(format!("only square kernels supported, got {kh}×{kw}")));
        }
        if spec.groups == 0 || cin % spec.groups != 0 || cout % spec.groups != 0 {
            return Err(Error::config(format!(
                "groups {} must divide in {cin} and out {cout} channels",
                spec.groups
            )));
        }
        if cin / spec.groups != cin_g {
            return Err(Error::config(format!(
                "channel mismatch: input has {cin} channels, weights expect {}",
                cin_g * spec.groups
            )));
        }
        let ho = spec
            .output_size(h, kh)
            .ok_or_else(|| Error::input(format!("input height {h} too small for kernel {kh}")))?;
        let wo = spec
            .output_size(wd, kw)
            .ok_or_else(|| Error::input(format!("input width {wd} too small for kernel {kw}")))?;
        Ok(ConvGeom {
            n,
            cin,
            h,
            w: wd,
            cout,
            k: kh,
            ho,
            wo,
            cin_g,
            cout_g: cout / spec.groups,
            groups: spec.groups,
            stride: spec.stride,
            pad: spec.padding,
        })
    }

    fn rows(&self) -> usize {
        self.cin_g * self.k * self.k
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Unfolds one group of one sample into `rows × (ho*wo)`.
    fn im2col<T: Scalar>(&self, x: &[T], col: &mut [T]) {
        let (k, s, p) = (self.k, self.stride, self.pad as isize);
        let hw = self.ho * self.wo;
        for ci in 0..self.cin_g {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut col[row * hw..(row + 1) * hw];
                    for oy in 0..self.ho {
                        let iy = (oy * s + ky) as isize - p;
                        let out_row = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            out_row.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, v) in out_row.iter_mut().enumerate() {
                            let ix = (ox * s + kx) as isize - p;
                            *v = if ix < 0 || ix >= self.w as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Folds `rows × (ho*wo)` column gradients back onto one group's input planes.
    fn col2im<T: Scalar>(&self, col: &[T], dx: &mut [T]) {
        let (k, s, p) = (self.k, self.stride, self.pad as isize);
        let hw = self.ho * self.wo;
        for ci in 0..self.cin_g {
            let plane = &mut dx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &col[row * hw..(row + 1) * hw];
                    for oy in 0..self.ho {
                        let iy = (oy * s + ky) as isize - p;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let base = iy as usize * self.w;
                        for ox in 0..self.wo {
                            let ix = (ox * s + kx) as isize - p;
                            if ix >= 0 && ix < self.w as isize {
                                plane[base + ix as usize] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: ConvSpec,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(x, weight, spec)?;
    if let Some(b) = bias {
        if b.len() != g.cout {
            return Err(Error::config(format!("bias has {} entries, expected {}", b.len(), g.cout)));
        }
    }
    let hw = g.ho * g.wo;
    let rows = g.rows();
    let mut out = Tensor::zeros(&[g.n, g.cout, g.ho, g.wo]);
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * hw] };
    let xd = x.data();
    let wd = weight.data();
    let in_sample = g.cin * g.h * g.w;
    let out_sample = g.cout * hw;
    for n in 0..g.n {
        for grp in 0..g.groups {
            let xs = &xd[n * in_sample + grp * g.cin_g * g.h * g.w..][..g.cin_g * g.h * g.w];
            let cols: &[T] = if g.is_pointwise() {
                xs
            } else {
                g.im2col(xs, &mut col);
                &col
            };
            let wg = &wd[grp * g.cout_g * rows..(grp + 1) * g.cout_g * rows];
            let og = &mut out.data_mut()[n * out_sample + grp * g.cout_g * hw..][..g.cout_g * hw];
            T::gemm(
                g.cout_g, rows, hw, T::one(), wg, rows as isize, 1, cols, hw as isize, 1, T::zero(),
                og, hw as isize, 1,
            );
        }
        if let Some(b) = bias {
            let os = &mut out.data_mut()[n * out_sample..(n + 1) * out_sample];
            for (co, &bv) in b.data().iter().enumerate() {
                os[co * hw..(co + 1) * hw].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Ok(out)
}

/// Gradients of a convolution; each requested output is `Some`.
pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    spec: ConvSpec,
    want: (bool, bool, bool),
) -> Result<ConvGrads<T>> {
    let g = ConvGeom::new(x, weight, spec)?;
    let hw = g.ho * g.wo;
    let rows = g.rows();
    let in_sample = g.cin * g.h * g.w;
    let out_sample = g.cout * hw;
    let (want_x, want_w, want_b) = want;
    let mut dx = want_x.then(|| Tensor::zeros(x.shape()));
    let mut dw = want_w.then(|| Tensor::zeros(weight.shape()));
    let mut db = want_b.then(|| Tensor::zeros(&[g.cout]));
    let mut col = vec![T::zero(); rows * hw];
    let mut dcol = vec![T::zero(); rows * hw];
    let xd = x.data();
    let wd = weight.data();
    let gd = grad_out.data();
    for n in 0..g.n {
        for grp in 0..g.groups {
            let go = &gd[n * out_sample + grp * g.cout_g * hw..][..g.cout_g * hw];
            let wg = &wd[grp * g.cout_g * rows..(grp + 1) * g.cout_g * rows];
            if let Some(dw) = dw.as_mut() {
                let xs = &xd[n * in_sample + grp * g.cin_g * g.h * g.w..][..g.cin_g * g.h * g.w];
                let cols: &[T] = if g.is_pointwise() {
                    xs
                } else {
                    g.im2col(xs, &mut col);
                    &col
                };
                let dwg = &mut dw.data_mut()[grp * g.cout_g * rows..(grp + 1) * g.cout_g * rows];
                // dW += gout · colᵀ
                T::gemm(
                    g.cout_g, hw, rows, T::one(), go, hw as isize, 1, cols, 1, hw as isize, T::one(),
                    dwg, rows as isize, 1,
                );
            }
            if let Some(dx) = dx.as_mut() {
                let dxs =
                    &mut dx.data_mut()[n * in_sample + grp * g.cin_g * g.h * g.w..][..g.cin_g * g.h * g.w];
                if g.is_pointwise() {
                    // dx += Wᵀ · gout directly
                    T::gemm(
                        rows, g.cout_g, hw, T::one(), wg, 1, rows as isize, go, hw as isize, 1,
                        T::one(), dxs, hw as isize, 1,
                    );
                } else {
                    T::gemm(
                        rows, g.cout_g, hw, T::one(), wg, 1, rows as isize, go, hw as isize, 1,
                        T::zero(), &mut dcol, hw as isize, 1,
                    );
                    g.col2im(&dcol, dxs);
                }
            }
        }
        if let Some(db) = db.as_mut() {
            for co in 0..g.cout {
                let s: T = gd[n * out_sample + co * hw..][..hw].iter().copied().sum();
                db[co] += s;
            }
        }
    }
    Ok(ConvGrads { input: dx, weight: dw, bias: db })
}

/// Offsets `(dy, dx)` of a centred `k×k` window in row-major order.
pub fn window_offsets(k: usize) -> Vec<(isize, isize)> {
    let r = (k / 2) as isize;
    (-r..=r).flat_map(|dy| (-r..=r).map(move |dx| (dy, dx))).collect()
}

/// Softmax over the `k²` logits of each head at each position.
/// `logits` is `(N, heads·k², H, W)`; the result has the same layout.
pub fn local_softmax<T: Scalar>(logits: &Tensor<T>, kernel: usize, heads: usize) -> Result<Tensor<T>> {
    let (n, a, h, w) = logits.dims4()?;
    let kk = kernel * kernel;
    if a != heads * kk {
        return Err(Error::config(format!(
            "attention logits carry {a} channels, expected heads·k² = {}",
            heads * kk
        )));
    }
    let hw = h * w;
    let mut out = Tensor::zeros(logits.shape());
    let ld = logits.data();
    let od = out.data_mut();
    for ni in 0..n {
        for hd in 0..heads {
            let base = (ni * a + hd * kk) * hw;
            for p in 0..hw {
                let mut m = T::neg_infinity();
                for j in 0..kk {
                    m = m.max(ld[base + j * hw + p]);
                }
                let mut z = T::zero();
                for j in 0..kk {
                    let e = (ld[base + j * hw + p] - m).exp();
                    od[base + j * hw + p] = e;
                    z += e;
                }
                for j in 0..kk {
                    od[base + j * hw + p] /= z;
                }
            }
        }
    }
    Ok(out)
}

fn check_attention_shapes<T: Scalar>(
    weights: &Tensor<T>,
    value: &Tensor<T>,
    kernel: usize,
    heads: usize,
) -> Result<(usize, usize, usize, usize)> {
    let (n, c, h, w) = value.dims4()?;
    let (wn, wa, wh, ww) = weights.dims4()?;
    if (wn, wh, ww) != (n, h, w) || wa != heads * kernel * kernel {
        return Err(Error::config(format!(
            "attention weights {:?} incompatible with values {:?}",
            weights.shape(),
            value.shape()
        )));
    }
    if heads == 0 || c % heads != 0 {
        return Err(Error::config(format!("head count {heads} must divide {c} channels")));
    }
    Ok((n, c, h, w))
}

/// Aggregates zero-padded `k×k` neighbourhoods of `value` with per-position
/// weights. Channels are split into `heads` contiguous groups that share weights.
pub fn local_aggregate<T: Scalar>(
    weights: &Tensor<T>,
    value: &Tensor<T>,
    kernel: usize,
    heads: usize,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = check_attention_shapes(weights, value, kernel, heads)?;
    let offsets = window_offsets(kernel);
    let kk = offsets.len();
    let per_head = c / heads;
    let hw = h * w;
    let mut out = Tensor::zeros(value.shape());
    let (wd, vd) = (weights.data(), value.data());
    let od = out.data_mut();
    for ni in 0..n {
        for ch in 0..c {
            let hd = ch / per_head;
            let vplane = &vd[(ni * c + ch) * hw..][..hw];
            let wbase = (ni * heads * kk + hd * kk) * hw;
            let oplane = &mut od[(ni * c + ch) * hw..][..hw];
            for (j, &(dy, dx)) in offsets.iter().enumerate() {
                let wp = &wd[wbase + j * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for x in 0..w {
                        let sx = x as isize + dx;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        oplane[y * w + x] += wp[y * w + x] * vplane[sy as usize * w + sx as usize];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Backward of `local_aggregate(local_softmax(logits), value)`.
/// Returns `(d logits, d value)`.
pub fn local_attention_backward<T: Scalar>(
    weights: &Tensor<T>,
    value: &Tensor<T>,
    grad_out: &Tensor<T>,
    kernel: usize,
    heads: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = check_attention_shapes(weights, value, kernel, heads)?;
    let offsets = window_offsets(kernel);
    let kk = offsets.len();
    let per_head = c / heads;
    let hw = h * w;
    // d loss / d weight_j, accumulated over the channels of a head
    let mut gw = Tensor::zeros(weights.shape());
    let mut gv = Tensor::zeros(value.shape());
    let (wd, vd, gd) = (weights.data(), value.data(), grad_out.data());
    for ni in 0..n {
        for ch in 0..c {
            let hd = ch / per_head;
            let vbase = (ni * c + ch) * hw;
            let wbase = (ni * heads * kk + hd * kk) * hw;
            for (j, &(dy, dx)) in offsets.iter().enumerate() {
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for x in 0..w {
                        let sx = x as isize + dx;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let p = y * w + x;
                        let src = sy as usize * w + sx as usize;
                        let go = gd[vbase + p];
                        gw.data_mut()[wbase + j * hw + p] += go * vd[vbase + src];
                        gv.data_mut()[vbase + src] += wd[wbase + j * hw + p] * go;
                    }
                }
            }
        }
    }
    // softmax Jacobian
    let mut gl = Tensor::zeros(weights.shape());
    for ni in 0..n {
        for hd in 0..heads {
            let base = (ni * heads * kk + hd * kk) * hw;
            for p in 0..hw {
                let mut dot = T::zero();
                for j in 0..kk {
                    dot += wd[base + j * hw + p] * gw[base + j * hw + p];
                }
                for j in 0..kk {
                    let idx = base + j * hw + p;
                    gl[idx] = wd[idx] * (gw[idx] - dot);
                }
            }
        }
    }
    Ok((gl, gv))
}

pub fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn silu<T: Scalar>(v: T) -> T {
    v * sigmoid(v)
}

pub fn silu_grad<T: Scalar>(v: T) -> T {
    let s = sigmoid(v);
    s * (T::one() + v * (T::one() - s))
}

/// Per-channel `x * scale[c] + shift[c]` on a rank-4 tensor.
pub fn channel_affine<T: Scalar>(x: &Tensor<T>, scale: &Tensor<T>, shift: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    if scale.len() != c || shift.len() != c {
        return Err(Error::config(format!(
            "affine expects {c} channels, got scale {} shift {}",
            scale.len(),
            shift.len()
        )));
    }
    let hw = h * w;
    let mut out = x.clone();
    for ni in 0..n {
        for ci in 0..c {
            let (a, b) = (scale[ci], shift[ci]);
            out.data_mut()[(ni * c + ci) * hw..][..hw].iter_mut().for_each(|v| *v = *v * a + b);
        }
    }
    Ok(out)
}

pub fn concat_channels<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| Error::config("concat of zero tensors"))?;
    let (n, _, h, w) = first.dims4()?;
    let mut total = 0;
    for p in parts {
        let (pn, pc, ph, pw) = p.dims4()?;
        if (pn, ph, pw) != (n, h, w) {
            return Err(Error::config(format!(
                "concat shape mismatch: {:?} vs {:?}",
                p.shape(),
                first.shape()
            )));
        }
        total += pc;
    }
    let hw = h * w;
    let mut data = Vec::with_capacity(n * total * hw);
    for ni in 0..n {
        for p in parts {
            let pc = p.shape()[1];
            data.extend_from_slice(&p.data()[ni * pc * hw..(ni + 1) * pc * hw]);
        }
    }
    Tensor::from_vec(&[n, total, h, w], data)
}

/// Splits a channel-concatenated gradient back into per-part gradients.
pub fn split_channels<T: Scalar>(grad: &Tensor<T>, widths: &[usize]) -> Result<Vec<Tensor<T>>> {
    let (n, c, h, w) = grad.dims4()?;
    if widths.iter().sum::<usize>() != c {
        return Err(Error::config("split widths do not add up"));
    }
    let hw = h * w;
    let mut out: Vec<Vec<T>> = widths.iter().map(|&pc| Vec::with_capacity(n * pc * hw)).collect();
    for ni in 0..n {
        let mut off = 0;
        for (part, &pc) in out.iter_mut().zip(widths) {
            part.extend_from_slice(&grad.data()[(ni * c + off) * hw..(ni * c + off + pc) * hw]);
            off += pc;
        }
    }
    out.into_iter()
        .zip(widths)
        .map(|(d, &pc)| Tensor::from_vec(&[n, pc, h, w], d))
        .collect()
}

pub fn upsample_nearest2x<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = Tensor::zeros(&[n, c, h2, w2]);
    for plane in 0..n * c {
        let src = &x.data()[plane * h * w..][..h * w];
        let dst = &mut out.data_mut()[plane * h2 * w2..][..h2 * w2];
        for y in 0..h2 {
            for xx in 0..w2 {
                dst[y * w2 + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    Ok(out)
}

pub fn upsample_nearest2x_backward<T: Scalar>(grad: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h2, w2) = grad.dims4()?;
    let (h, w) = (h2 / 2, w2 / 2);
    let mut out = Tensor::zeros(&[n, c, h, w]);
    for plane in 0..n * c {
        let src = &grad.data()[plane * h2 * w2..][..h2 * w2];
        let dst = &mut out.data_mut()[plane * h * w..][..h * w];
        for y in 0..h2 {
            for xx in 0..w2 {
                dst[(y / 2) * w + xx / 2] += src[y * w2 + xx];
            }
        }
    }
    Ok(out)
}
