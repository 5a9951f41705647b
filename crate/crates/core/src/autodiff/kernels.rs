//! Raw slice kernels behind the graph primitives. All image tensors are NCHW.

use super::tensor::{gemm, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    /// Geometry of a strided, zero-padded correlation; `None` when the kernel
    /// does not fit the padded input.
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        if stride == 0 || height + 2 * pad < kernel_h || width + 2 * pad < kernel_w {
            return None;
        }
        Some(Self {
            channels,
            height,
            width,
            kernel_h,
            kernel_w,
            stride,
            pad,
            out_h: (height + 2 * pad - kernel_h) / stride + 1,
            out_w: (width + 2 * pad - kernel_w) / stride + 1,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfold one CHW image into a `[C·kh·kw, out_h·out_w]` column matrix.
pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let ncols = g.col_cols();
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, out) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *out = if ix < 0 || ix >= g.width as isize {
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

/// Adjoint of [`im2col`]: scatter-add columns back into a CHW image.
pub fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, x: &mut [T]) {
    let ncols = g.col_cols();
    for c in 0..g.channels {
        let plane = &mut x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let base = iy as usize * g.width;
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.width {
                            plane[base + ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `y[n] = W · im2col(x[n]) (+ bias)`, weights `[out_c, in_c, kh, kw]`.
pub fn conv2d_forward<T: Scalar>(
    x: &[T],
    batch: usize,
    g: &ConvGeom,
    w: &[T],
    out_c: usize,
    bias: Option<&[T]>,
) -> Vec<T> {
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let in_per = g.channels * g.height * g.width;
    let out_per = out_c * ncols;
    let mut y = vec![T::zero(); batch * out_per];
    let mut cols = vec![T::zero(); rows * ncols];
    for n in 0..batch {
        im2col(&x[n * in_per..(n + 1) * in_per], g, &mut cols);
        let out = &mut y[n * out_per..(n + 1) * out_per];
        gemm(out_c, rows, ncols, w, false, &cols, false, T::zero(), out);
        if let Some(b) = bias {
            for (oc, chunk) in out.chunks_mut(ncols).enumerate() {
                for v in chunk {
                    *v += b[oc];
                }
            }
        }
    }
    y
}

pub struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    batch: usize,
    g: &ConvGeom,
    w: &[T],
    out_c: usize,
    dy: &[T],
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> ConvGrads<T> {
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let in_per = g.channels * g.height * g.width;
    let out_per = out_c * ncols;
    let mut dx = need_dx.then(|| vec![T::zero(); batch * in_per]);
    let mut dw = need_dw.then(|| vec![T::zero(); w.len()]);
    let mut db = need_db.then(|| vec![T::zero(); out_c]);
    let mut cols = vec![T::zero(); rows * ncols];
    for n in 0..batch {
        let dyn_ = &dy[n * out_per..(n + 1) * out_per];
        if let Some(dw) = dw.as_mut() {
            im2col(&x[n * in_per..(n + 1) * in_per], g, &mut cols);
            // dW[out_c, rows] += dY[out_c, ncols] · cols^T
            gemm(out_c, ncols, rows, dyn_, false, &cols, true, T::one(), dw);
        }
        if let Some(db) = db.as_mut() {
            for (oc, chunk) in dyn_.chunks(ncols).enumerate() {
                db[oc] += chunk.iter().copied().sum();
            }
        }
        if let Some(dx) = dx.as_mut() {
            // dcols[rows, ncols] = W^T · dY
            gemm(rows, out_c, ncols, w, true, dyn_, false, T::zero(), &mut cols);
            col2im(&cols, g, &mut dx[n * in_per..(n + 1) * in_per]);
        }
    }
    ConvGrads { dx, dw, db }
}

/// Transposed convolution: the adjoint of a strided conv. Weights `[in_c, out_c, kh, kw]`;
/// `g` describes the *adjoint* conv geometry (channels = out_c, height/width = output size,
/// out_h/out_w = input size).
pub fn conv_transpose_forward<T: Scalar>(
    x: &[T],
    batch: usize,
    in_c: usize,
    g: &ConvGeom,
    w: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let in_per = in_c * ncols;
    let out_per = g.channels * g.height * g.width;
    let mut y = vec![T::zero(); batch * out_per];
    let mut cols = vec![T::zero(); rows * ncols];
    for n in 0..batch {
        // cols[out_c·kk, HiWi] = W^T[out_c·kk, in_c] · x[in_c, HiWi]
        gemm(rows, in_c, ncols, w, true, &x[n * in_per..(n + 1) * in_per], false, T::zero(), &mut cols);
        let out = &mut y[n * out_per..(n + 1) * out_per];
        col2im(&cols, g, out);
        if let Some(b) = bias {
            let plane = g.height * g.width;
            for (oc, chunk) in out.chunks_mut(plane).enumerate() {
                for v in chunk {
                    *v += b[oc];
                }
            }
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
pub fn conv_transpose_backward<T: Scalar>(
    x: &[T],
    batch: usize,
    in_c: usize,
    g: &ConvGeom,
    w: &[T],
    dy: &[T],
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> ConvGrads<T> {
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let in_per = in_c * ncols;
    let out_per = g.channels * g.height * g.width;
    let mut dx = need_dx.then(|| vec![T::zero(); batch * in_per]);
    let mut dw = need_dw.then(|| vec![T::zero(); w.len()]);
    let mut db = need_db.then(|| vec![T::zero(); g.channels]);
    let mut cols = vec![T::zero(); rows * ncols];
    for n in 0..batch {
        let dyn_ = &dy[n * out_per..(n + 1) * out_per];
        im2col(dyn_, g, &mut cols);
        if let Some(dx) = dx.as_mut() {
            // dx[in_c, HiWi] = W[in_c, rows] · cols
            gemm(in_c, rows, ncols, w, false, &cols, false, T::zero(), &mut dx[n * in_per..(n + 1) * in_per]);
        }
        if let Some(dw) = dw.as_mut() {
            // dW[in_c, rows] += x[in_c, HiWi] · cols^T
            gemm(in_c, ncols, rows, &x[n * in_per..(n + 1) * in_per], false, &cols, true, T::one(), dw);
        }
        if let Some(db) = db.as_mut() {
            let plane = g.height * g.width;
            for (oc, chunk) in dyn_.chunks(plane).enumerate() {
                db[oc] += chunk.iter().copied().sum();
            }
        }
    }
    ConvGrads { dx, dw, db }
}

/// Non-overlapping 2×2 max pooling; returns values and flat argmax indices.
pub fn maxpool2_forward<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize) -> (Vec<T>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Vec::with_capacity(planes * oh * ow);
    let mut idx = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[i] > x[best] {
                        best = i;
                    }
                }
                y.push(x[best]);
                idx.push(best as u32);
            }
        }
    }
    (y, idx)
}

pub fn upsample2_forward<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut y = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        for oy in 0..oh {
            for ox in 0..ow {
                y[p * oh * ow + oy * ow + ox] = x[p * h * w + (oy / 2) * w + ox / 2];
            }
        }
    }
    y
}

pub fn upsample2_backward<T: Scalar>(dy: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        for oy in 0..oh {
            for ox in 0..ow {
                dx[p * h * w + (oy / 2) * w + ox / 2] += dy[p * oh * ow + oy * ow + ox];
            }
        }
    }
    dx
}

/// Per-plane normalization to zero mean and unit variance (biased variance).
/// Returns output and per-plane inverse standard deviations.
pub fn instance_norm_forward<T: Scalar>(x: &[T], planes: usize, size: usize, eps: T) -> (Vec<T>, Vec<T>) {
    let mut y = vec![T::zero(); x.len()];
    let mut inv_std = Vec::with_capacity(planes);
    let nf = T::from_usize(size).unwrap();
    for p in 0..planes {
        let src = &x[p * size..(p + 1) * size];
        let mean = src.iter().copied().sum::<T>() / nf;
        let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
        let is = T::one() / (var + eps).sqrt();
        for (o, &v) in y[p * size..(p + 1) * size].iter_mut().zip(src) {
            *o = (v - mean) * is;
        }
        inv_std.push(is);
    }
    (y, inv_std)
}

pub fn instance_norm_backward<T: Scalar>(y: &[T], inv_std: &[T], dy: &[T], size: usize) -> Vec<T> {
    let nf = T::from_usize(size).unwrap();
    let mut dx = vec![T::zero(); y.len()];
    for (p, &is) in inv_std.iter().enumerate() {
        let r = p * size..(p + 1) * size;
        let (yp, gp) = (&y[r.clone()], &dy[r.clone()]);
        let mean_g = gp.iter().copied().sum::<T>() / nf;
        let mean_gy = gp.iter().zip(yp).map(|(&g, &v)| g * v).sum::<T>() / nf;
        for ((d, &g), &v) in dx[r].iter_mut().zip(gp).zip(yp) {
            *d = is * (g - mean_g - v * mean_gy);
        }
    }
    dx
}

/// Softmax (or log-softmax) over the channel axis of an NCHW tensor.
pub fn softmax_channels<T: Scalar>(x: &[T], batch: usize, channels: usize, plane: usize, log: bool) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    for n in 0..batch {
        let base = n * channels * plane;
        for s in 0..plane {
            let at = |c: usize| base + c * plane + s;
            let mut mx = T::neg_infinity();
            for c in 0..channels {
                mx = mx.max(x[at(c)]);
            }
            let mut z = T::zero();
            for c in 0..channels {
                z += (x[at(c)] - mx).exp();
            }
            let lz = z.ln();
            for c in 0..channels {
                let shifted = x[at(c)] - mx;
                y[at(c)] = if log { shifted - lz } else { shifted.exp() / z };
            }
        }
    }
    y
}

#[cfg(test)]
mod tests {
    use super::*;

    #[allow(clippy::too_many_arguments)]
    fn naive_conv(x: &[f64], h: usize, w: usize, k: &[f64], kh: usize, kw: usize, s: usize, p: usize) -> Vec<f64> {
        let oh = (h + 2 * p - kh) / s + 1;
        let ow = (w + 2 * p - kw) / s + 1;
        let mut out = vec![0.0; oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for i in 0..kh {
                    for j in 0..kw {
                        let iy = (oy * s + i) as isize - p as isize;
                        let ix = (ox * s + j) as isize - p as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            acc += x[iy as usize * w + ix as usize] * k[i * kw + j];
                        }
                    }
                }
                out[oy * ow + ox] = acc;
            }
        }
        out
    }

    #[test]
    fn conv_matches_sliding_window() {
        let x: Vec<f64> = (0..25).map(|v| (v as f64 * 0.37).sin()).collect();
        let k: Vec<f64> = (0..9).map(|v| v as f64 - 4.0).collect();
        for (s, p) in [(1, 0), (1, 1), (2, 1), (2, 0)] {
            let g = ConvGeom::new(1, 5, 5, 3, 3, s, p).unwrap();
            let y = conv2d_forward(&x, 1, &g, &k, 1, None);
            let want = naive_conv(&x, 5, 5, &k, 3, 3, s, p);
            for (a, b) in y.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom::new(2, 5, 4, 3, 3, 2, 1).unwrap();
        let x: Vec<f64> = (0..40).map(|v| (v as f64).cos()).collect();
        let c: Vec<f64> = (0..g.col_rows() * g.col_cols()).map(|v| (v as f64 * 0.3).sin()).collect();
        let mut cols = vec![0.0; c.len()];
        im2col(&x, &g, &mut cols);
        let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im(&c, &g, &mut back);
        let rhs: f64 = back.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x: Vec<f64> = (0..24).map(|v| v as f64 * 0.7 - 5.0).collect();
        let y = softmax_channels(&x, 2, 3, 4, false);
        for n in 0..2 {
            for s in 0..4 {
                let total: f64 = (0..3).map(|c| y[n * 12 + c * 4 + s]).sum();
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }
}
