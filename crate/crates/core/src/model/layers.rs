//! Per-sample forward and backward kernels for the supported layer kinds.
//!
//! All tensors are flat channel-major slices. Convolutions use stride 1 and
//! "same" zero padding with odd square kernels; pooling uses non-overlapping
//! windows (trailing rows/columns that do not fill a window are dropped).

use crate::scalar::Scalar;
use crate::tensor::Shape;

use super::{Activation, PoolKind};

pub(crate) fn dense_forward<T: Scalar>(params: &[T], input: &[T], outputs: usize) -> Vec<T> {
    let n = input.len();
    let (w, b) = params.split_at(outputs * n);
    (0..outputs)
        .map(|o| {
            let row = &w[o * n..(o + 1) * n];
            row.iter().zip(input).fold(b[o], |acc, (&wi, &xi)| acc + wi * xi)
        })
        .collect()
}

pub(crate) fn dense_backward<T: Scalar>(
    params: &[T],
    input: &[T],
    dout: &[T],
    grad: Option<&mut [T]>,
    want_input: bool,
) -> Option<Vec<T>> {
    let n = input.len();
    let outputs = dout.len();
    if let Some(g) = grad {
        let (gw, gb) = g.split_at_mut(outputs * n);
        for o in 0..outputs {
            let d = dout[o];
            if d == T::zero() {
                continue;
            }
            gb[o] += d;
            for (gwi, &xi) in gw[o * n..(o + 1) * n].iter_mut().zip(input) {
                *gwi += d * xi;
            }
        }
    }
    if !want_input {
        return None;
    }
    let w = &params[..outputs * n];
    let mut din = vec![T::zero(); n];
    for o in 0..outputs {
        let d = dout[o];
        if d == T::zero() {
            continue;
        }
        for (di, &wi) in din.iter_mut().zip(&w[o * n..(o + 1) * n]) {
            *di += d * wi;
        }
    }
    Some(din)
}

/// Valid output range `[lo, hi)` for kernel offset `k` with padding `pad`
/// so that `y + k - pad` stays inside `0..size`.
#[inline]
fn valid_range(k: usize, pad: usize, size: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k);
    let hi = (size + pad).saturating_sub(k).min(size);
    (lo, hi.max(lo))
}

pub(crate) fn conv_forward<T: Scalar>(
    params: &[T],
    input: &[T],
    in_shape: Shape,
    out_channels: usize,
    kernel: usize,
) -> Vec<T> {
    let Shape { channels: cin, height: h, width: w } = in_shape;
    let pad = kernel / 2;
    let kk = kernel * kernel;
    let (weights, bias) = params.split_at(out_channels * cin * kk);
    let mut out = vec![T::zero(); out_channels * h * w];
    for o in 0..out_channels {
        let plane = &mut out[o * h * w..(o + 1) * h * w];
        plane.iter_mut().for_each(|v| *v = bias[o]);
        for i in 0..cin {
            let src = &input[i * h * w..(i + 1) * h * w];
            for ky in 0..kernel {
                let (y0, y1) = valid_range(ky, pad, h);
                for kx in 0..kernel {
                    let wv = weights[((o * cin + i) * kernel + ky) * kernel + kx];
                    let (x0, x1) = valid_range(kx, pad, w);
                    for y in y0..y1 {
                        let sy = y + ky - pad;
                        let dst = &mut plane[y * w + x0..y * w + x1];
                        let s = &src[sy * w + x0 + kx - pad..sy * w + x1 + kx - pad];
                        for (d, &sv) in dst.iter_mut().zip(s) {
                            *d += wv * sv;
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn conv_backward<T: Scalar>(
    params: &[T],
    input: &[T],
    in_shape: Shape,
    kernel: usize,
    dout: &[T],
    grad: Option<&mut [T]>,
    want_input: bool,
) -> Option<Vec<T>> {
    let Shape { channels: cin, height: h, width: w } = in_shape;
    let out_channels = dout.len() / (h * w);
    let pad = kernel / 2;
    let kk = kernel * kernel;
    if let Some(g) = grad {
        let (gw, gb) = g.split_at_mut(out_channels * cin * kk);
        for o in 0..out_channels {
            let dplane = &dout[o * h * w..(o + 1) * h * w];
            gb[o] += dplane.iter().copied().sum::<T>();
            for i in 0..cin {
                let src = &input[i * h * w..(i + 1) * h * w];
                for ky in 0..kernel {
                    let (y0, y1) = valid_range(ky, pad, h);
                    for kx in 0..kernel {
                        let (x0, x1) = valid_range(kx, pad, w);
                        let mut acc = T::zero();
                        for y in y0..y1 {
                            let sy = y + ky - pad;
                            let d = &dplane[y * w + x0..y * w + x1];
                            let s = &src[sy * w + x0 + kx - pad..sy * w + x1 + kx - pad];
                            for (&dv, &sv) in d.iter().zip(s) {
                                acc += dv * sv;
                            }
                        }
                        gw[((o * cin + i) * kernel + ky) * kernel + kx] += acc;
                    }
                }
            }
        }
    }
    if !want_input {
        return None;
    }
    let weights = &params[..out_channels * cin * kk];
    let mut din = vec![T::zero(); cin * h * w];
    for o in 0..out_channels {
        let dplane = &dout[o * h * w..(o + 1) * h * w];
        for i in 0..cin {
            let dst = &mut din[i * h * w..(i + 1) * h * w];
            for ky in 0..kernel {
                let (y0, y1) = valid_range(ky, pad, h);
                for kx in 0..kernel {
                    let wv = weights[((o * cin + i) * kernel + ky) * kernel + kx];
                    let (x0, x1) = valid_range(kx, pad, w);
                    for y in y0..y1 {
                        let sy = y + ky - pad;
                        let d = &dplane[y * w + x0..y * w + x1];
                        let s = &mut dst[sy * w + x0 + kx - pad..sy * w + x1 + kx - pad];
                        for (sv, &dv) in s.iter_mut().zip(d) {
                            *sv += wv * dv;
                        }
                    }
                }
            }
        }
    }
    Some(din)
}

pub(crate) fn activation_forward<T: Scalar>(act: Activation, input: &[T]) -> Vec<T> {
    match act {
        Activation::Relu => input.iter().map(|&v| v.max(T::zero())).collect(),
        Activation::Tanh => input.iter().map(|&v| v.tanh()).collect(),
    }
}

pub(crate) fn activation_backward<T: Scalar>(act: Activation, input: &[T], output: &[T], dout: &[T]) -> Vec<T> {
    match act {
        Activation::Relu => input.iter().zip(dout).map(|(&x, &d)| if x > T::zero() { d } else { T::zero() }).collect(),
        Activation::Tanh => output.iter().zip(dout).map(|(&y, &d)| d * (T::one() - y * y)).collect(),
    }
}

pub(crate) fn pool_forward<T: Scalar>(kind: PoolKind, size: usize, input: &[T], in_shape: Shape) -> Vec<T> {
    let Shape { channels, height: h, width: w } = in_shape;
    let (oh, ow) = (h / size, w / size);
    let norm = T::from_usize_lossy(size * size).recip();
    let mut out = Vec::with_capacity(channels * oh * ow);
    for c in 0..channels {
        let plane = &input[c * h * w..(c + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = match kind {
                    PoolKind::Avg => T::zero(),
                    PoolKind::Max => T::neg_infinity(),
                };
                for dy in 0..size {
                    for dx in 0..size {
                        let v = plane[(oy * size + dy) * w + ox * size + dx];
                        acc = match kind {
                            PoolKind::Avg => acc + v,
                            PoolKind::Max => {
                                if v > acc {
                                    v
                                } else {
                                    acc
                                }
                            }
                        };
                    }
                }
                out.push(match kind {
                    PoolKind::Avg => acc * norm,
                    PoolKind::Max => acc,
                });
            }
        }
    }
    out
}

pub(crate) fn pool_backward<T: Scalar>(
    kind: PoolKind,
    size: usize,
    input: &[T],
    in_shape: Shape,
    dout: &[T],
) -> Vec<T> {
    let Shape { channels, height: h, width: w } = in_shape;
    let (oh, ow) = (h / size, w / size);
    let norm = T::from_usize_lossy(size * size).recip();
    let mut din = vec![T::zero(); input.len()];
    for c in 0..channels {
        let base = c * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let d = dout[(c * oh + oy) * ow + ox];
                match kind {
                    PoolKind::Avg => {
                        for dy in 0..size {
                            for dx in 0..size {
                                din[base + (oy * size + dy) * w + ox * size + dx] += d * norm;
                            }
                        }
                    }
                    PoolKind::Max => {
                        // first maximum wins, matching the forward scan
                        let mut best = base + oy * size * w + ox * size;
                        for dy in 0..size {
                            for dx in 0..size {
                                let idx = base + (oy * size + dy) * w + ox * size + dx;
                                if input[idx] > input[best] {
                                    best = idx;
                                }
                            }
                        }
                        din[best] += d;
                    }
                }
            }
        }
    }
    din
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_identity_kernel_copies_input() {
        // 1 -> 1 channel, 3x3 kernel with a single centre tap
        let mut params = vec![0.0f64; 9 + 1];
        params[4] = 1.0;
        let input: Vec<f64> = (0..12).map(|v| v as f64).collect();
        let out = conv_forward(&params, &input, Shape::new(1, 3, 4), 1, 3);
        assert_eq!(out, input);
    }

    #[test]
    fn conv_sums_neighbourhood_with_zero_padding() {
        let params = [vec![1.0f64; 9], vec![0.5]].concat();
        let input = vec![1.0f64; 9];
        let out = conv_forward(&params, &input, Shape::new(1, 3, 3), 1, 3);
        // corners see 4 cells, edges 6, centre 9
        assert_eq!(out, vec![4.5, 6.5, 4.5, 6.5, 9.5, 6.5, 4.5, 6.5, 4.5]);
    }

    #[test]
    fn avg_pool_drops_ragged_edge() {
        let input: Vec<f64> = (0..15).map(|v| v as f64).collect();
        let out = pool_forward(PoolKind::Avg, 2, &input, Shape::new(1, 3, 5));
        assert_eq!(out, vec![3.0, 5.0]);
        let din = pool_backward(PoolKind::Avg, 2, &input, Shape::new(1, 3, 5), &[4.0, 8.0]);
        assert_eq!(din.iter().sum::<f64>(), 12.0);
        assert_eq!(din[4], 0.0);
    }
}
