//! Per-sample layer kernels. Tensors are flat `[channels, height, width]`.

use super::Real;

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    fn padded_h(&self) -> usize {
        self.in_h + 2 * self.pad
    }

    fn padded_w(&self) -> usize {
        self.in_w + 2 * self.pad
    }

    pub(crate) fn pad_input<T: Real>(&self, input: &[T]) -> Vec<T> {
        if self.pad == 0 {
            return input.to_vec();
        }
        let (ph, pw) = (self.padded_h(), self.padded_w());
        let mut out = vec![T::zero(); self.in_c * ph * pw];
        for c in 0..self.in_c {
            for y in 0..self.in_h {
                let src = &input[(c * self.in_h + y) * self.in_w..][..self.in_w];
                let dst = &mut out[(c * ph + y + self.pad) * pw + self.pad..][..self.in_w];
                dst.copy_from_slice(src);
            }
        }
        out
    }
}

/// Dot product with eight independent partial sums so the loop vectorizes.
#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let (ac, bc) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ar, br) = (ac.remainder(), bc.remainder());
    for (x, y) in ac.zip(bc) {
        for k in 0..8 {
            lanes[k] += x[k] * y[k];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ar.iter().zip(br) {
        tail += x * y;
    }
    let mut sum = T::zero();
    for l in lanes {
        sum += l;
    }
    sum + tail
}

/// Stride-1 convolution computed on rows of the padded width, so every kernel tap is
/// one long contiguous multiply-add; the extra columns are dropped at the end.
fn conv_forward_wide<T: Real>(g: &ConvGeom, weights: &[T], bias: &[T], padded: &[T]) -> Vec<T> {
    let (ph, pw) = (g.padded_h(), g.padded_w());
    // last valid output sits at (out_h - 1) * pw + out_w - 1
    let span = (g.out_h - 1) * pw + g.out_w;
    let mut wide = vec![T::zero(); span];
    let mut out = vec![T::zero(); g.out_c * g.out_h * g.out_w];
    for oc in 0..g.out_c {
        wide.iter_mut().for_each(|v| *v = bias[oc]);
        for ic in 0..g.in_c {
            let in_plane = &padded[ic * ph * pw..(ic + 1) * ph * pw];
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let w = weights[((oc * g.in_c + ic) * g.k + ky) * g.k + kx];
                    let src = &in_plane[ky * pw + kx..][..span];
                    for (o, &i) in wide.iter_mut().zip(src) {
                        *o += w * i;
                    }
                }
            }
        }
        let out_plane = &mut out[oc * g.out_h * g.out_w..][..g.out_h * g.out_w];
        for oy in 0..g.out_h {
            out_plane[oy * g.out_w..(oy + 1) * g.out_w]
                .copy_from_slice(&wide[oy * pw..oy * pw + g.out_w]);
        }
    }
    out
}

pub(crate) fn conv_forward<T: Real>(
    g: &ConvGeom,
    weights: &[T],
    bias: &[T],
    input: &[T],
) -> Vec<T> {
    let padded = g.pad_input(input);
    let (ph, pw) = (g.padded_h(), g.padded_w());
    let plane = g.out_h * g.out_w;
    if g.stride == 1 {
        return conv_forward_wide(g, weights, bias, &padded);
    }
    let mut out = vec![T::zero(); g.out_c * plane];
    for oc in 0..g.out_c {
        let out_plane = &mut out[oc * plane..(oc + 1) * plane];
        out_plane.iter_mut().for_each(|v| *v = bias[oc]);
        for ic in 0..g.in_c {
            let in_plane = &padded[ic * ph * pw..(ic + 1) * ph * pw];
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let w = weights[((oc * g.in_c + ic) * g.k + ky) * g.k + kx];
                    for oy in 0..g.out_h {
                        let row_out = &mut out_plane[oy * g.out_w..(oy + 1) * g.out_w];
                        let row_in = &in_plane[(oy * g.stride + ky) * pw + kx..];
                        if g.stride == 1 {
                            for (o, &i) in row_out.iter_mut().zip(&row_in[..g.out_w]) {
                                *o += w * i;
                            }
                        } else {
                            for (ox, o) in row_out.iter_mut().enumerate() {
                                *o += w * row_in[ox * g.stride];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Stride-1 backward on padded-width rows; see `conv_forward_wide`. `dpadded` is
/// empty when no input gradient is needed.
fn conv_backward_wide<T: Real>(
    g: &ConvGeom,
    weights: &[T],
    padded: &[T],
    dout: &[T],
    dweights: &mut [T],
    dbias: &mut [T],
    dpadded: &mut [T],
) {
    let (ph, pw) = (g.padded_h(), g.padded_w());
    let plane = g.out_h * g.out_w;
    let span = (g.out_h - 1) * pw + g.out_w;
    let mut d_wide = vec![T::zero(); span];
    for oc in 0..g.out_c {
        let d_plane = &dout[oc * plane..(oc + 1) * plane];
        let mut db = T::zero();
        for &d in d_plane {
            db += d;
        }
        dbias[oc] += db;
        for oy in 0..g.out_h {
            d_wide[oy * pw..oy * pw + g.out_w].copy_from_slice(&d_plane[oy * g.out_w..(oy + 1) * g.out_w]);
        }
        for ic in 0..g.in_c {
            let in_plane = &padded[ic * ph * pw..(ic + 1) * ph * pw];
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let widx = ((oc * g.in_c + ic) * g.k + ky) * g.k + kx;
                    let off = ky * pw + kx;
                    dweights[widx] += dot(&d_wide, &in_plane[off..off + span]);
                    if !dpadded.is_empty() {
                        let w = weights[widx];
                        let dst = &mut dpadded[ic * ph * pw + off..][..span];
                        for (dp, &d) in dst.iter_mut().zip(&d_wide) {
                            *dp += w * d;
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates weight/bias gradients; returns the input gradient when `need_input_grad`.
pub(crate) fn conv_backward<T: Real>(
    g: &ConvGeom,
    weights: &[T],
    input: &[T],
    dout: &[T],
    dweights: &mut [T],
    dbias: &mut [T],
    need_input_grad: bool,
) -> Option<Vec<T>> {
    let padded = g.pad_input(input);
    let (ph, pw) = (g.padded_h(), g.padded_w());
    let plane = g.out_h * g.out_w;
    let mut dpadded = if need_input_grad {
        vec![T::zero(); g.in_c * ph * pw]
    } else {
        Vec::new()
    };
    if g.stride == 1 {
        conv_backward_wide(g, weights, &padded, dout, dweights, dbias, &mut dpadded);
    } else {
        for oc in 0..g.out_c {
            let d_plane = &dout[oc * plane..(oc + 1) * plane];
            let mut db = T::zero();
            for &d in d_plane {
                db += d;
            }
            dbias[oc] += db;
            for ic in 0..g.in_c {
                let in_plane = &padded[ic * ph * pw..(ic + 1) * ph * pw];
                for ky in 0..g.k {
                    for kx in 0..g.k {
                        let widx = ((oc * g.in_c + ic) * g.k + ky) * g.k + kx;
                        let mut acc = T::zero();
                        for oy in 0..g.out_h {
                            let row_d = &d_plane[oy * g.out_w..(oy + 1) * g.out_w];
                            let row_in = &in_plane[(oy * g.stride + ky) * pw + kx..];
                            if g.stride == 1 {
                                acc += dot(row_d, &row_in[..g.out_w]);
                            } else {
                                for (ox, &d) in row_d.iter().enumerate() {
                                    acc += d * row_in[ox * g.stride];
                                }
                            }
                        }
                        dweights[widx] += acc;

                        if need_input_grad {
                            let w = weights[widx];
                            let dp_plane = &mut dpadded[ic * ph * pw..(ic + 1) * ph * pw];
                            for oy in 0..g.out_h {
                                let row_d = &d_plane[oy * g.out_w..(oy + 1) * g.out_w];
                                let row_dp = &mut dp_plane[(oy * g.stride + ky) * pw + kx..];
                                if g.stride == 1 {
                                    for (dp, &d) in row_dp[..g.out_w].iter_mut().zip(row_d) {
                                        *dp += w * d;
                                    }
                                } else {
                                    for (ox, &d) in row_d.iter().enumerate() {
                                        row_dp[ox * g.stride] += w * d;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    if !need_input_grad {
        return None;
    }
    if g.pad == 0 {
        return Some(dpadded);
    }
    let mut dinput = vec![T::zero(); g.in_c * g.in_h * g.in_w];
    for c in 0..g.in_c {
        for y in 0..g.in_h {
            let src = &dpadded[(c * ph + y + g.pad) * pw + g.pad..][..g.in_w];
            dinput[(c * g.in_h + y) * g.in_w..][..g.in_w].copy_from_slice(src);
        }
    }
    Some(dinput)
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct PoolGeom {
    pub c: usize,
    pub window: usize,
    pub stride: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

/// Returns the pooled tensor and, per output, the flat input index of the max.
pub(crate) fn maxpool_forward<T: Real>(g: &PoolGeom, input: &[T]) -> (Vec<T>, Vec<u32>) {
    let n = g.c * g.out_h * g.out_w;
    let mut out = Vec::with_capacity(n);
    let mut arg = Vec::with_capacity(n);
    for c in 0..g.c {
        let base = c * g.in_h * g.in_w;
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let mut best = T::neg_infinity();
                let mut best_i = 0usize;
                for wy in 0..g.window {
                    for wx in 0..g.window {
                        let i = base + (oy * g.stride + wy) * g.in_w + ox * g.stride + wx;
                        if input[i] > best {
                            best = input[i];
                            best_i = i;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i as u32);
            }
        }
    }
    (out, arg)
}

pub(crate) fn maxpool_backward<T: Real>(input_len: usize, argmax: &[u32], dout: &[T]) -> Vec<T> {
    let mut din = vec![T::zero(); input_len];
    for (&i, &d) in argmax.iter().zip(dout) {
        din[i as usize] += d;
    }
    din
}

pub(crate) fn fc_forward<T: Real>(
    in_dim: usize,
    out_dim: usize,
    weights: &[T],
    bias: &[T],
    input: &[T],
) -> Vec<T> {
    (0..out_dim)
        .map(|j| {
            let row = &weights[j * in_dim..(j + 1) * in_dim];
            let mut acc = bias[j];
            for (&w, &x) in row.iter().zip(input) {
                acc += w * x;
            }
            acc
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn fc_backward<T: Real>(
    in_dim: usize,
    out_dim: usize,
    weights: &[T],
    input: &[T],
    dout: &[T],
    dweights: &mut [T],
    dbias: &mut [T],
    need_input_grad: bool,
) -> Option<Vec<T>> {
    let mut din = if need_input_grad {
        vec![T::zero(); in_dim]
    } else {
        Vec::new()
    };
    for j in 0..out_dim {
        let d = dout[j];
        dbias[j] += d;
        let drow = &mut dweights[j * in_dim..(j + 1) * in_dim];
        for (dw, &x) in drow.iter_mut().zip(input) {
            *dw += d * x;
        }
        if need_input_grad {
            let row = &weights[j * in_dim..(j + 1) * in_dim];
            for (di, &w) in din.iter_mut().zip(row) {
                *di += w * d;
            }
        }
    }
    need_input_grad.then_some(din)
}

/// Numerically stable softmax.
pub(crate) fn softmax<T: Real>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
    let mut sum = T::zero();
    for &e in &exps {
        sum += e;
    }
    exps.into_iter().map(|e| e / sum).collect()
}

/// `-log softmax(logits)[label]`, computed via log-sum-exp.
pub(crate) fn cross_entropy<T: Real>(logits: &[T], label: usize) -> T {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for &z in logits {
        sum += (z - max).exp();
    }
    max + sum.ln() - logits[label]
}
