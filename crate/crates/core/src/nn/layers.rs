//! Forward and backward kernels for the individual U-Net layers.

use super::tensor::{Scalar, Tensor};

/// `dst[y][x] += a * src[y + dy][x + dx]` over every in-bounds position.
#[inline]
fn shifted_axpy<T: Scalar>(dst: &mut [T], src: &[T], w: usize, h: usize, dy: isize, dx: isize, a: T) {
    let (y0, y1) = valid_range(h, dy);
    let (x0, x1) = valid_range(w, dx);
    if x0 >= x1 {
        return;
    }
    for y in y0..y1 {
        let sy = (y as isize + dy) as usize;
        let d = &mut dst[y * w + x0..y * w + x1];
        let sx0 = (x0 as isize + dx) as usize;
        let s = &src[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
        for (dv, &sv) in d.iter_mut().zip(s) {
            *dv += a * sv;
        }
    }
}

/// `sum a[y][x] * b[y + dy][x + dx]` over every in-bounds position.
#[inline]
fn shifted_dot<T: Scalar>(a: &[T], b: &[T], w: usize, h: usize, dy: isize, dx: isize) -> T {
    let (y0, y1) = valid_range(h, dy);
    let (x0, x1) = valid_range(w, dx);
    let mut acc = T::zero();
    if x0 >= x1 {
        return acc;
    }
    for y in y0..y1 {
        let sy = (y as isize + dy) as usize;
        let sx0 = (x0 as isize + dx) as usize;
        let ra = &a[y * w + x0..y * w + x1];
        let rb = &b[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
        let mut row = T::zero();
        for (&u, &v) in ra.iter().zip(rb) {
            row += u * v;
        }
        acc += row;
    }
    acc
}

/// Positions `i` in `0..n` with `i + shift` also in `0..n`.
#[inline]
fn valid_range(n: usize, shift: isize) -> (usize, usize) {
    let lo = (-shift).max(0) as usize;
    let hi = (n as isize - shift.max(0)).max(0) as usize;
    (lo.min(n), hi)
}

pub fn conv3x3_forward<T: Scalar>(input: &Tensor<T>, weight: &[T], bias: &[T]) -> Tensor<T> {
    let (w, h, in_ch) = (input.width, input.height, input.planes);
    let out_ch = bias.len();
    debug_assert_eq!(weight.len(), out_ch * in_ch * 9);
    let mut out = Tensor::zeros(out_ch, w, h);
    for oc in 0..out_ch {
        let dst = out.plane_mut(oc);
        dst.fill(bias[oc]);
        for ic in 0..in_ch {
            let src = input.plane(ic);
            let k = &weight[(oc * in_ch + ic) * 9..(oc * in_ch + ic + 1) * 9];
            for ky in 0..3 {
                for kx in 0..3 {
                    shifted_axpy(dst, src, w, h, ky as isize - 1, kx as isize - 1, k[ky * 3 + kx]);
                }
            }
        }
    }
    out
}

/// Accumulates weight/bias gradients into `grad_w`/`grad_b` and returns the
/// gradient with respect to the input when `want_input` is set.
pub fn conv3x3_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &[T],
    grad_out: &Tensor<T>,
    grad_w: &mut [T],
    grad_b: &mut [T],
    want_input: bool,
) -> Option<Tensor<T>> {
    let (w, h, in_ch) = (input.width, input.height, input.planes);
    let out_ch = grad_out.planes;
    for oc in 0..out_ch {
        let g = grad_out.plane(oc);
        grad_b[oc] += g.iter().copied().sum::<T>();
        for ic in 0..in_ch {
            let src = input.plane(ic);
            let base = (oc * in_ch + ic) * 9;
            for ky in 0..3 {
                for kx in 0..3 {
                    grad_w[base + ky * 3 + kx] +=
                        shifted_dot(g, src, w, h, ky as isize - 1, kx as isize - 1);
                }
            }
        }
    }
    if !want_input {
        return None;
    }
    let mut grad_in = Tensor::zeros(in_ch, w, h);
    for ic in 0..in_ch {
        let dst = grad_in.plane_mut(ic);
        for oc in 0..out_ch {
            let g = grad_out.plane(oc);
            let k = &weight[(oc * in_ch + ic) * 9..(oc * in_ch + ic + 1) * 9];
            for ky in 0..3 {
                for kx in 0..3 {
                    shifted_axpy(dst, g, w, h, 1 - ky as isize, 1 - kx as isize, k[ky * 3 + kx]);
                }
            }
        }
    }
    Some(grad_in)
}

pub fn relu_inplace<T: Scalar>(t: &mut Tensor<T>) {
    for v in &mut t.data {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Zeroes gradient entries whose activation output is not strictly positive.
pub fn relu_backward_inplace<T: Scalar>(output: &Tensor<T>, grad: &mut Tensor<T>) {
    for (g, &o) in grad.data.iter_mut().zip(&output.data) {
        if o <= T::zero() {
            *g = T::zero();
        }
    }
}

/// 2x2 max-pool. Returns the pooled tensor and, per output element, the
/// window offset (0..4, row-major) of the first maximum.
pub fn maxpool2_forward<T: Scalar>(input: &Tensor<T>) -> (Tensor<T>, Vec<u8>) {
    let (w, h) = (input.width, input.height);
    let (ow, oh) = (w / 2, h / 2);
    let mut out = Tensor::zeros(input.planes, ow, oh);
    let mut arg = vec![0u8; input.planes * ow * oh];
    for p in 0..input.planes {
        let src = input.plane(p);
        let base = p * ow * oh;
        for oy in 0..oh {
            for ox in 0..ow {
                let i0 = 2 * oy * w + 2 * ox;
                let cands = [src[i0], src[i0 + 1], src[i0 + w], src[i0 + w + 1]];
                let mut best = 0u8;
                for k in 1..4 {
                    if cands[k] > cands[best as usize] {
                        best = k as u8;
                    }
                }
                out.data[base + oy * ow + ox] = cands[best as usize];
                arg[base + oy * ow + ox] = best;
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_backward<T: Scalar>(grad_out: &Tensor<T>, arg: &[u8], in_w: usize, in_h: usize) -> Tensor<T> {
    let (ow, oh) = (grad_out.width, grad_out.height);
    let mut grad_in = Tensor::zeros(grad_out.planes, in_w, in_h);
    for p in 0..grad_out.planes {
        let g = grad_out.plane(p);
        let a = &arg[p * ow * oh..(p + 1) * ow * oh];
        let dst = grad_in.plane_mut(p);
        for oy in 0..oh {
            for ox in 0..ow {
                let k = a[oy * ow + ox] as usize;
                let (dy, dx) = (k / 2, k % 2);
                dst[(2 * oy + dy) * in_w + 2 * ox + dx] += g[oy * ow + ox];
            }
        }
    }
    grad_in
}

/// 2x2 stride-2 transposed convolution; weight `[in][out][2][2]`.
pub fn upconv2_forward<T: Scalar>(input: &Tensor<T>, weight: &[T], bias: &[T]) -> Tensor<T> {
    let (w, h, in_ch) = (input.width, input.height, input.planes);
    let out_ch = bias.len();
    let ow = 2 * w;
    let mut out = Tensor::zeros(out_ch, ow, 2 * h);
    for oc in 0..out_ch {
        let dst = out.plane_mut(oc);
        dst.fill(bias[oc]);
        for ic in 0..in_ch {
            let src = input.plane(ic);
            let k = &weight[(ic * out_ch + oc) * 4..(ic * out_ch + oc + 1) * 4];
            for y in 0..h {
                let row = &src[y * w..(y + 1) * w];
                for dy in 0..2 {
                    let drow = &mut dst[(2 * y + dy) * ow..(2 * y + dy + 1) * ow];
                    let (k0, k1) = (k[dy * 2], k[dy * 2 + 1]);
                    for (pair, &v) in drow.chunks_exact_mut(2).zip(row) {
                        pair[0] += k0 * v;
                        pair[1] += k1 * v;
                    }
                }
            }
        }
    }
    out
}

pub fn upconv2_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &[T],
    grad_out: &Tensor<T>,
    grad_w: &mut [T],
    grad_b: &mut [T],
) -> Tensor<T> {
    let (w, h, in_ch) = (input.width, input.height, input.planes);
    let out_ch = grad_out.planes;
    let ow = 2 * w;
    let mut grad_in = Tensor::zeros(in_ch, w, h);
    for oc in 0..out_ch {
        let g = grad_out.plane(oc);
        grad_b[oc] += g.iter().copied().sum::<T>();
        for ic in 0..in_ch {
            let src = input.plane(ic);
            let base = (ic * out_ch + oc) * 4;
            let k = [weight[base], weight[base + 1], weight[base + 2], weight[base + 3]];
            let mut acc = [T::zero(); 4];
            let gin = grad_in.plane_mut(ic);
            for y in 0..h {
                for dy in 0..2 {
                    let grow = &g[(2 * y + dy) * ow..(2 * y + dy + 1) * ow];
                    let srow = &src[y * w..(y + 1) * w];
                    let girow = &mut gin[y * w..(y + 1) * w];
                    for ((pair, &v), gi) in grow.chunks_exact(2).zip(srow).zip(girow.iter_mut()) {
                        acc[dy * 2] += v * pair[0];
                        acc[dy * 2 + 1] += v * pair[1];
                        *gi += k[dy * 2] * pair[0] + k[dy * 2 + 1] * pair[1];
                    }
                }
            }
            for (gw, a) in grad_w[base..base + 4].iter_mut().zip(acc) {
                *gw += a;
            }
        }
    }
    grad_in
}

/// 1x1 convolution; weight `[out][in]`.
pub fn conv1x1_forward<T: Scalar>(input: &Tensor<T>, weight: &[T], bias: &[T]) -> Tensor<T> {
    let in_ch = input.planes;
    let out_ch = bias.len();
    let mut out = Tensor::zeros(out_ch, input.width, input.height);
    for oc in 0..out_ch {
        let dst = out.plane_mut(oc);
        dst.fill(bias[oc]);
        for ic in 0..in_ch {
            let a = weight[oc * in_ch + ic];
            for (d, &s) in dst.iter_mut().zip(input.plane(ic)) {
                *d += a * s;
            }
        }
    }
    out
}

pub fn conv1x1_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &[T],
    grad_out: &Tensor<T>,
    grad_w: &mut [T],
    grad_b: &mut [T],
) -> Tensor<T> {
    let in_ch = input.planes;
    let out_ch = grad_out.planes;
    let mut grad_in = Tensor::zeros(in_ch, input.width, input.height);
    for oc in 0..out_ch {
        let g = grad_out.plane(oc);
        grad_b[oc] += g.iter().copied().sum::<T>();
        for ic in 0..in_ch {
            let src = input.plane(ic);
            let mut acc = T::zero();
            for (&gv, &sv) in g.iter().zip(src) {
                acc += gv * sv;
            }
            grad_w[oc * in_ch + ic] += acc;
            let a = weight[oc * in_ch + ic];
            for (d, &gv) in grad_in.plane_mut(ic).iter_mut().zip(g) {
                *d += a * gv;
            }
        }
    }
    grad_in
}

/// Plane-wise concatenation `[a, b]`.
pub fn concat<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    debug_assert_eq!((a.width, a.height), (b.width, b.height));
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Tensor::from_vec(a.planes + b.planes, a.width, a.height, data)
}

pub fn split<T: Scalar>(t: &Tensor<T>, first: usize) -> (Tensor<T>, Tensor<T>) {
    let n = first * t.area();
    (
        Tensor::from_vec(first, t.width, t.height, t.data[..n].to_vec()),
        Tensor::from_vec(t.planes - first, t.width, t.height, t.data[n..].to_vec()),
    )
}
