//! Forward and adjoint kernels on raw buffers.
//!
//! Everything here is shape-checked by the [`Graph`](super::Graph) ops that
//! call it; the kernels themselves only assert internal consistency.

use super::{gemm, MatRef, Scalar};

/// Geometry of a cubic-kernel 3D convolution over one batch item.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub input: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeom {
    /// Output extents of a convolution, or `None` when the kernel does not
    /// fit the padded input.
    pub fn output_extents(
        input: [usize; 3],
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Option<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * padding;
            if kernel > padded || stride == 0 {
                return None;
            }
            out[a] = (padded - kernel) / stride + 1;
        }
        Some(out)
    }

    pub fn in_voxels(&self) -> usize {
        self.input.iter().product()
    }

    pub fn out_voxels(&self) -> usize {
        self.output.iter().product()
    }

    /// Rows of the unfolded patch matrix: `c_in * k^3`.
    pub fn patch_len(&self) -> usize {
        self.c_in * self.kernel.pow(3)
    }

    /// Visits every (patch matrix offset, input offset) pair whose input
    /// position lies inside the unpadded volume.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let k = self.kernel;
        let [id, ih, iw] = self.input;
        let [od, oh, ow] = self.output;
        let (s, p) = (self.stride as isize, self.padding as isize);
        let cols = self.out_voxels();
        for ci in 0..self.c_in {
            for kd in 0..k {
                for kh in 0..k {
                    for kw in 0..k {
                        let row = ((ci * k + kd) * k + kh) * k + kw;
                        let row_base = row * cols;
                        for zd in 0..od {
                            let xd = zd as isize * s - p + kd as isize;
                            if xd < 0 || xd >= id as isize {
                                continue;
                            }
                            for zh in 0..oh {
                                let xh = zh as isize * s - p + kh as isize;
                                if xh < 0 || xh >= ih as isize {
                                    continue;
                                }
                                let in_row = ((ci * id + xd as usize) * ih + xh as usize) * iw;
                                let col_row = row_base + (zd * oh + zh) * ow;
                                for zw in 0..ow {
                                    let xw = zw as isize * s - p + kw as isize;
                                    if xw < 0 || xw >= iw as isize {
                                        continue;
                                    }
                                    f(col_row + zw, in_row + xw as usize);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Unfolds one batch item `[c_in, D, H, W]` into `[c_in*k^3, D'*H'*W']`.
pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    debug_assert_eq!(x.len(), g.c_in * g.in_voxels());
    debug_assert_eq!(col.len(), g.patch_len() * g.out_voxels());
    col.iter_mut().for_each(|v| *v = T::zero());
    g.for_each_tap(|c, i| col[c] = x[i]);
}

/// Adjoint of [`im2col`]: scatters-adds patch columns back into `x`.
pub fn col2im<T: Scalar>(col: &[T], g: &ConvGeom, x: &mut [T]) {
    debug_assert_eq!(x.len(), g.c_in * g.in_voxels());
    debug_assert_eq!(col.len(), g.patch_len() * g.out_voxels());
    g.for_each_tap(|c, i| x[i] = x[i] + col[c]);
}

/// Batched convolution forward. `x: [b, c_in, ...]`, `w: [c_out, c_in, k, k, k]`.
pub fn conv3d_forward<T: Scalar>(
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    batch: usize,
    g: &ConvGeom,
) -> Vec<T> {
    let (kl, lo) = (g.patch_len(), g.out_voxels());
    let mut out = vec![T::zero(); batch * g.c_out * lo];
    let mut col = vec![T::zero(); kl * lo];
    let wm = MatRef::new(w, g.c_out, kl);
    for b in 0..batch {
        let xb = &x[b * g.c_in * g.in_voxels()..(b + 1) * g.c_in * g.in_voxels()];
        im2col(xb, g, &mut col);
        let ob = &mut out[b * g.c_out * lo..(b + 1) * g.c_out * lo];
        gemm(wm, MatRef::new(&col, kl, lo), ob, false);
        if let Some(bias) = bias {
            add_channel_bias(ob, bias, lo);
        }
    }
    out
}

/// Gradients of [`conv3d_forward`] w.r.t. input, weight and bias.
pub fn conv3d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dout: &[T],
    batch: usize,
    g: &ConvGeom,
    want_dx: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let (kl, lo, li) = (g.patch_len(), g.out_voxels(), g.in_voxels());
    let mut dw = vec![T::zero(); g.c_out * kl];
    let mut dbias = vec![T::zero(); g.c_out];
    let mut dx = want_dx.then(|| vec![T::zero(); batch * g.c_in * li]);
    let mut col = vec![T::zero(); kl * lo];
    let wm = MatRef::new(w, g.c_out, kl);
    for b in 0..batch {
        let xb = &x[b * g.c_in * li..(b + 1) * g.c_in * li];
        let gb = &dout[b * g.c_out * lo..(b + 1) * g.c_out * lo];
        let gm = MatRef::new(gb, g.c_out, lo);
        im2col(xb, g, &mut col);
        gemm(gm, MatRef::new(&col, kl, lo).t(), &mut dw, true);
        accumulate_channel_sums(gb, &mut dbias, lo);
        if let Some(dx) = dx.as_mut() {
            gemm(wm.t(), gm, &mut col, false);
            col2im(&col, g, &mut dx[b * g.c_in * li..(b + 1) * g.c_in * li]);
        }
    }
    (dx, dw, dbias)
}

/// Transposed convolution: the adjoint of a padding-free [`conv3d_forward`]
/// with geometry `g`. Input is `[b, g.c_out, g.output]`, result is
/// `[b, g.c_in, g.input]`; `w` keeps the `[g.c_out, g.c_in, k, k, k]` layout.
pub fn conv_transpose3d_forward<T: Scalar>(
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    batch: usize,
    g: &ConvGeom,
) -> Vec<T> {
    let (kl, lo, li) = (g.patch_len(), g.out_voxels(), g.in_voxels());
    let mut out = vec![T::zero(); batch * g.c_in * li];
    let mut col = vec![T::zero(); kl * lo];
    let wm = MatRef::new(w, g.c_out, kl);
    for b in 0..batch {
        let xb = &x[b * g.c_out * lo..(b + 1) * g.c_out * lo];
        gemm(wm.t(), MatRef::new(xb, g.c_out, lo), &mut col, false);
        let ob = &mut out[b * g.c_in * li..(b + 1) * g.c_in * li];
        col2im(&col, g, ob);
        if let Some(bias) = bias {
            add_channel_bias(ob, bias, li);
        }
    }
    out
}

pub fn conv_transpose3d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dout: &[T],
    batch: usize,
    g: &ConvGeom,
    want_dx: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let (kl, lo, li) = (g.patch_len(), g.out_voxels(), g.in_voxels());
    let mut dw = vec![T::zero(); g.c_out * kl];
    let mut dbias = vec![T::zero(); g.c_in];
    let mut dx = want_dx.then(|| vec![T::zero(); batch * g.c_out * lo]);
    let mut col = vec![T::zero(); kl * lo];
    let wm = MatRef::new(w, g.c_out, kl);
    for b in 0..batch {
        let xb = &x[b * g.c_out * lo..(b + 1) * g.c_out * lo];
        let gb = &dout[b * g.c_in * li..(b + 1) * g.c_in * li];
        im2col(gb, g, &mut col);
        let cm = MatRef::new(&col, kl, lo);
        gemm(MatRef::new(xb, g.c_out, lo), cm.t(), &mut dw, true);
        accumulate_channel_sums(gb, &mut dbias, li);
        if let Some(dx) = dx.as_mut() {
            gemm(
                wm,
                cm,
                &mut dx[b * g.c_out * lo..(b + 1) * g.c_out * lo],
                false,
            );
        }
    }
    (dx, dw, dbias)
}

fn add_channel_bias<T: Scalar>(out: &mut [T], bias: &[T], spatial: usize) {
    for (chunk, &bv) in out.chunks_mut(spatial).zip(bias) {
        chunk.iter_mut().for_each(|v| *v = *v + bv);
    }
}

fn accumulate_channel_sums<T: Scalar>(g: &[T], sums: &mut [T], spatial: usize) {
    for (chunk, s) in g.chunks(spatial).zip(sums.iter_mut()) {
        *s = *s + chunk.iter().copied().sum::<T>();
    }
}

/// Max pooling over `[planes, D, H, W]`. Returns the pooled values and, for
/// every output, the flat input index of the first maximal element in scan
/// order. Padded positions never win.
pub fn max_pool3d_forward<T: Scalar>(
    x: &[T],
    planes: usize,
    input: [usize; 3],
    output: [usize; 3],
    kernel: usize,
    stride: usize,
    padding: usize,
) -> (Vec<T>, Vec<usize>) {
    let [id, ih, iw] = input;
    let [od, oh, ow] = output;
    let lo = od * oh * ow;
    let li = id * ih * iw;
    let mut out = vec![T::zero(); planes * lo];
    let mut arg = vec![0usize; planes * lo];
    let span = |o: usize, extent: usize| {
        let start = (o * stride) as isize - padding as isize;
        let lo = start.max(0) as usize;
        let hi = ((start + kernel as isize).min(extent as isize)).max(0) as usize;
        lo..hi
    };
    for p in 0..planes {
        let base = p * li;
        for zd in 0..od {
            for zh in 0..oh {
                for zw in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut best_idx = usize::MAX;
                    for xd in span(zd, id) {
                        for xh in span(zh, ih) {
                            for xw in span(zw, iw) {
                                let idx = base + (xd * ih + xh) * iw + xw;
                                if best_idx == usize::MAX || x[idx] > best {
                                    best = x[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                    }
                    let o = p * lo + (zd * oh + zh) * ow + zw;
                    out[o] = best;
                    arg[o] = best_idx;
                }
            }
        }
    }
    (out, arg)
}

/// Copies `x` (row-major with `shape`) into the layout whose axis `i` is
/// input axis `perm[i]`.
pub fn permute<T: Scalar>(x: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let in_strides = super::strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(x.len());
    if rank == 0 {
        return x.to_vec();
    }
    // Odometer over all but the last output axis; inner loop is a strided copy.
    let last = rank - 1;
    let inner = out_shape[last];
    let inner_stride = src_strides[last];
    let mut idx = vec![0usize; last];
    let mut base = 0usize;
    loop {
        if inner_stride == 1 {
            out.extend_from_slice(&x[base..base + inner]);
        } else {
            out.extend((0..inner).map(|j| x[base + j * inner_stride]));
        }
        let mut axis = last;
        loop {
            if axis == 0 {
                return out;
            }
            axis -= 1;
            idx[axis] += 1;
            base += src_strides[axis];
            if idx[axis] < out_shape[axis] {
                break;
            }
            base -= src_strides[axis] * idx[axis];
            idx[axis] = 0;
        }
    }
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Splits `shape` around `axis` into `(outer, extent, inner)`.
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn softmax_forward<T: Scalar>(x: &[T], shape: &[usize], axis: usize, log: bool) -> Vec<T> {
    let (outer, n, inner) = axis_split(shape, axis);
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * n + j) * inner + i;
            let mut max = T::neg_infinity();
            for j in 0..n {
                max = max.max(x[at(j)]);
            }
            let mut total = T::zero();
            for j in 0..n {
                let e = (x[at(j)] - max).exp();
                out[at(j)] = e;
                total = total + e;
            }
            if log {
                let lse = total.ln();
                for j in 0..n {
                    out[at(j)] = x[at(j)] - max - lse;
                }
            } else {
                for j in 0..n {
                    out[at(j)] = out[at(j)] / total;
                }
            }
        }
    }
    out
}

/// `dx = y * (dy - sum(dy * y))` along `axis` where `y` is the softmax output.
pub fn softmax_backward<T: Scalar>(y: &[T], dy: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, n, inner) = axis_split(shape, axis);
    let mut dx = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * n + j) * inner + i;
            let dot: T = (0..n).map(|j| dy[at(j)] * y[at(j)]).sum();
            for j in 0..n {
                dx[at(j)] = y[at(j)] * (dy[at(j)] - dot);
            }
        }
    }
    dx
}

/// `dx = dy - softmax * sum(dy)` along `axis` where `ly` is the log-softmax output.
pub fn log_softmax_backward<T: Scalar>(ly: &[T], dy: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, n, inner) = axis_split(shape, axis);
    let mut dx = vec![T::zero(); ly.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * n + j) * inner + i;
            let total: T = (0..n).map(|j| dy[at(j)]).sum();
            for j in 0..n {
                dx[at(j)] = dy[at(j)] - ly[at(j)].exp() * total;
            }
        }
    }
    dx
}

/// Layer norm over rows of length `d`. Returns output plus per-row mean and
/// reciprocal standard deviation.
pub fn layer_norm_forward<T: Scalar>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    d: usize,
    eps: T,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = x.len() / d;
    let dn = T::of(d as f64);
    let mut out = vec![T::zero(); x.len()];
    let mut means = vec![T::zero(); rows];
    let mut rstds = vec![T::zero(); rows];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<T>() / dn;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
        let rstd = (var + eps).sqrt().recip();
        for j in 0..d {
            out[r * d + j] = (row[j] - mean) * rstd * gamma[j] + beta[j];
        }
        means[r] = mean;
        rstds[r] = rstd;
    }
    (out, means, rstds)
}

#[allow(clippy::type_complexity)]
pub fn layer_norm_backward<T: Scalar>(
    x: &[T],
    gamma: &[T],
    means: &[T],
    rstds: &[T],
    dy: &[T],
    d: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = x.len() / d;
    let dn = T::of(d as f64);
    let mut dx = vec![T::zero(); x.len()];
    let mut dgamma = vec![T::zero(); d];
    let mut dbeta = vec![T::zero(); d];
    for r in 0..rows {
        let (mean, rstd) = (means[r], rstds[r]);
        let mut sum_g = T::zero();
        let mut sum_gx = T::zero();
        for j in 0..d {
            let xhat = (x[r * d + j] - mean) * rstd;
            let g = dy[r * d + j];
            dgamma[j] = dgamma[j] + g * xhat;
            dbeta[j] = dbeta[j] + g;
            let gg = g * gamma[j];
            sum_g = sum_g + gg;
            sum_gx = sum_gx + gg * xhat;
        }
        for j in 0..d {
            let xhat = (x[r * d + j] - mean) * rstd;
            let gg = dy[r * d + j] * gamma[j];
            dx[r * d + j] = rstd * (gg - (sum_g + xhat * sum_gx) / dn);
        }
    }
    (dx, dgamma, dbeta)
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// Tanh-approximation GELU.
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::of(SQRT_2_OVER_PI);
    let a = T::of(GELU_CUBIC);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

pub fn gelu_derivative<T: Scalar>(x: T) -> T {
    let c = T::of(SQRT_2_OVER_PI);
    let a = T::of(GELU_CUBIC);
    let half = T::of(0.5);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let dinner = c * (T::one() + T::of(3.0) * a * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * dinner
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_matches_index_arithmetic() {
        let shape = [2, 3, 4, 5];
        let x: Vec<f64> = (0..120).map(|v| v as f64).collect();
        let perm = [2, 0, 3, 1];
        let y = permute(&x, &shape, &perm);
        let out_shape = [4, 2, 5, 3];
        for a in 0..4 {
            for b in 0..2 {
                for c in 0..5 {
                    for d in 0..3 {
                        let o = ((a * 2 + b) * 5 + c) * 3 + d;
                        // input index (b, d, a, c)
                        let i = ((b * 3 + d) * 4 + a) * 5 + c;
                        assert_eq!(y[o], x[i], "{:?}", out_shape);
                    }
                }
            }
        }
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        let g = ConvGeom {
            c_in: 2,
            c_out: 1,
            kernel: 3,
            stride: 2,
            padding: 1,
            input: [5, 4, 3],
            output: ConvGeom::output_extents([5, 4, 3], 3, 2, 1).unwrap(),
        };
        let x: Vec<f64> = (0..g.c_in * g.in_voxels())
            .map(|v| (v as f64).sin())
            .collect();
        let y: Vec<f64> = (0..g.patch_len() * g.out_voxels())
            .map(|v| (v as f64 * 0.7).cos())
            .collect();
        let mut col = vec![0.0; y.len()];
        im2col(&x, &g, &mut col);
        let lhs: f64 = col.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im(&y, &g, &mut back);
        let rhs: f64 = back.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn gelu_derivative_matches_difference_quotient() {
        for &x in &[-3.0f64, -0.5, 0.0, 0.3, 2.0] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_derivative(x)).abs() < 1e-8);
        }
    }
}
