//! Raw forward/backward kernels on NCHW tensors.
//!
//! Every kernel parallelizes only over independent outputs (batch items or
//! channels) and reduces partial sums in a fixed order, so results are
//! bitwise identical for any thread count.

use rayon::prelude::*;

use super::tensor::{Scalar, Tensor};

/// Reflects an out-of-range coordinate back into `0..n` (edge not repeated:
/// -1 ↦ 1, n ↦ n-2). A single-element axis maps everything to 0.
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

/// Gather tables for a "same"-padded convolution with reflective borders.
#[derive(Clone, Debug)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub h: usize,
    pub w: usize,
    pub out_h: usize,
    pub out_w: usize,
    row_src: Vec<usize>,
    col_src: Vec<usize>,
}

impl ConvGeometry {
    pub fn new(h: usize, w: usize, kernel: usize, stride: usize) -> Self {
        let pad = kernel / 2;
        let out_h = (h + 2 * pad - kernel) / stride + 1;
        let out_w = (w + 2 * pad - kernel) / stride + 1;
        let table = |out: usize, n: usize| {
            let mut t = Vec::with_capacity(out * kernel);
            for o in 0..out {
                for k in 0..kernel {
                    t.push(reflect_index((o * stride + k) as isize - pad as isize, n));
                }
            }
            t
        };
        Self { kernel, stride, h, w, out_h, out_w, row_src: table(out_h, h), col_src: table(out_w, w) }
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1
    }

    fn im2col<T: Scalar>(&self, x: &[T], channels: usize, col: &mut [T]) {
        let (k, ow, plane) = (self.kernel, self.out_w, self.out_h * self.out_w);
        for c in 0..channels {
            let src = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for kh in 0..k {
                for kw in 0..k {
                    let dst = &mut col[((c * k + kh) * k + kw) * plane..][..plane];
                    for oh in 0..self.out_h {
                        let row = &src[self.row_src[oh * k + kh] * self.w..][..self.w];
                        let out_row = &mut dst[oh * ow..(oh + 1) * ow];
                        for (o, v) in out_row.iter_mut().enumerate() {
                            *v = row[self.col_src[o * k + kw]];
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, col: &[T], channels: usize, dx: &mut [T]) {
        let (k, ow, plane) = (self.kernel, self.out_w, self.out_h * self.out_w);
        for c in 0..channels {
            let dst = &mut dx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for kh in 0..k {
                for kw in 0..k {
                    let src = &col[((c * k + kh) * k + kw) * plane..][..plane];
                    for oh in 0..self.out_h {
                        let row_off = self.row_src[oh * k + kh] * self.w;
                        for o in 0..ow {
                            dst[row_off + self.col_src[o * k + kw]] += src[oh * ow + o];
                        }
                    }
                }
            }
        }
    }
}

/// 2D convolution, square odd kernel, reflective "same" padding, no bias.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, stride: usize) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let (o, wc, k, k2) = weight.dims4();
    assert_eq!(wc, c, "conv weight expects {wc} input channels, got {c}");
    assert_eq!(k, k2);
    let geom = ConvGeometry::new(h, w, k, stride);
    let plane = geom.out_h * geom.out_w;
    let ckk = c * k * k;
    let mut out = Tensor::zeros(&[n, o, geom.out_h, geom.out_w]);
    out.data_mut().par_chunks_mut(o * plane).enumerate().for_each(|(i, y)| {
        let xi = x.item(i);
        if geom.is_pointwise() {
            T::gemm(o, ckk, plane, weight.data(), false, xi, false, y, false);
        } else {
            let mut col = vec![T::zero(); ckk * plane];
            geom.im2col(xi, c, &mut col);
            T::gemm(o, ckk, plane, weight.data(), false, &col, false, y, false);
        }
    });
    out
}

/// Gradients of [`conv2d`] with respect to its input and weight.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    grad_out: &Tensor<T>,
    need_input: bool,
    need_weight: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let (n, c, h, w) = x.dims4();
    let (o, _, k, _) = weight.dims4();
    let geom = ConvGeometry::new(h, w, k, stride);
    let plane = geom.out_h * geom.out_w;
    let ckk = c * k * k;

    let grad_input = need_input.then(|| {
        let mut dx = Tensor::zeros(&[n, c, h, w]);
        dx.data_mut().par_chunks_mut(c * h * w).enumerate().for_each(|(i, dxi)| {
            let dy = grad_out.item(i);
            if geom.is_pointwise() {
                T::gemm(ckk, o, plane, weight.data(), true, dy, false, dxi, false);
            } else {
                let mut col = vec![T::zero(); ckk * plane];
                T::gemm(ckk, o, plane, weight.data(), true, dy, false, &mut col, false);
                geom.col2im(&col, c, dxi);
            }
        });
        dx
    });

    let grad_weight = need_weight.then(|| {
        let partials: Vec<Vec<T>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let dy = grad_out.item(i);
                let mut dw = vec![T::zero(); o * ckk];
                if geom.is_pointwise() {
                    T::gemm(o, plane, ckk, dy, false, x.item(i), true, &mut dw, false);
                } else {
                    let mut col = vec![T::zero(); ckk * plane];
                    geom.im2col(x.item(i), c, &mut col);
                    T::gemm(o, plane, ckk, dy, false, &col, true, &mut dw, false);
                }
                dw
            })
            .collect();
        let mut total = partials[0].clone();
        for p in &partials[1..] {
            for (a, &b) in total.iter_mut().zip(p) {
                *a += b;
            }
        }
        Tensor::from_vec(weight.shape(), total)
    });

    (grad_input, grad_weight)
}

/// Per-channel bias add.
pub fn add_channel_bias<T: Scalar>(x: &Tensor<T>, bias: &Tensor<T>) -> Tensor<T> {
    let (_, c, h, w) = x.dims4();
    assert_eq!(bias.len(), c);
    let plane = h * w;
    let mut out = x.clone();
    for (idx, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let b = bias.data()[idx % c];
        chunk.iter_mut().for_each(|v| *v += b);
    }
    out
}

/// Sum over N, H, W for every channel (accumulated in f64).
pub fn channel_sums<T: Scalar>(x: &Tensor<T>) -> Vec<f64> {
    let (n, c, h, w) = x.dims4();
    let plane = h * w;
    (0..c)
        .into_par_iter()
        .map(|ch| {
            let mut s = 0.0f64;
            for i in 0..n {
                let off = (i * c + ch) * plane;
                s += x.data()[off..off + plane].iter().map(|v| v.as_f64()).sum::<f64>();
            }
            s
        })
        .collect()
}

/// Per-channel population mean and variance over N, H, W (two-pass, f64).
pub fn channel_moments<T: Scalar>(x: &Tensor<T>) -> (Vec<f64>, Vec<f64>) {
    let (n, c, h, w) = x.dims4();
    let plane = h * w;
    let count = (n * plane) as f64;
    (0..c)
        .into_par_iter()
        .map(|ch| {
            let mut s = 0.0f64;
            for i in 0..n {
                let off = (i * c + ch) * plane;
                s += x.data()[off..off + plane].iter().map(|v| v.as_f64()).sum::<f64>();
            }
            let mean = s / count;
            let mut ss = 0.0f64;
            for i in 0..n {
                let off = (i * c + ch) * plane;
                ss += x.data()[off..off + plane]
                    .iter()
                    .map(|v| {
                        let d = v.as_f64() - mean;
                        d * d
                    })
                    .sum::<f64>();
            }
            (mean, ss / count)
        })
        .unzip()
}

/// y = x * scale[c] + shift[c]
pub fn channel_affine<T: Scalar>(x: &Tensor<T>, scale: &[T], shift: &[T]) -> Tensor<T> {
    let (_, c, h, w) = x.dims4();
    let plane = h * w;
    let mut out = x.clone();
    out.data_mut().par_chunks_mut(plane).enumerate().for_each(|(idx, chunk)| {
        let (s, b) = (scale[idx % c], shift[idx % c]);
        chunk.iter_mut().for_each(|v| *v = *v * s + b);
    });
    out
}

/// Sum over N, H, W of a * b per channel.
pub fn channel_dot<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Vec<f64> {
    let (n, c, h, w) = a.dims4();
    let plane = h * w;
    (0..c)
        .into_par_iter()
        .map(|ch| {
            let mut s = 0.0f64;
            for i in 0..n {
                let off = (i * c + ch) * plane;
                s += a.data()[off..off + plane]
                    .iter()
                    .zip(&b.data()[off..off + plane])
                    .map(|(x, y)| x.as_f64() * y.as_f64())
                    .sum::<f64>();
            }
            s
        })
        .collect()
}

/// 3×3 stride-2 max pooling with a one-pixel border that never wins.
/// Returns the pooled tensor and the flat source index of every maximum.
pub fn max_pool_3x3_s2<T: Scalar>(x: &Tensor<T>) -> (Tensor<T>, Vec<usize>) {
    let (n, c, h, w) = x.dims4();
    let (oh, ow) = ((h + 2 - 3) / 2 + 1, (w + 2 - 3) / 2 + 1);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let mut argmax = vec![0usize; n * c * oh * ow];
    out.data_mut()
        .par_chunks_mut(oh * ow)
        .zip(argmax.par_chunks_mut(oh * ow))
        .enumerate()
        .for_each(|(plane_idx, (y, am))| {
            let base = plane_idx * h * w;
            let src = &x.data()[base..base + h * w];
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut best_idx = 0;
                    for di in 0..3 {
                        let r = (2 * i + di) as isize - 1;
                        if r < 0 || r >= h as isize {
                            continue;
                        }
                        for dj in 0..3 {
                            let q = (2 * j + dj) as isize - 1;
                            if q < 0 || q >= w as isize {
                                continue;
                            }
                            let idx = r as usize * w + q as usize;
                            if src[idx] > best {
                                best = src[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    y[i * ow + j] = best;
                    am[i * ow + j] = base + best_idx;
                }
            }
        });
    (out, argmax)
}

pub fn max_pool_backward<T: Scalar>(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&src, &g) in argmax.iter().zip(grad_out.data()) {
        d[src] += g;
    }
    dx
}

/// 2×2 stride-2 average pooling (odd trailing row/column dropped).
pub fn avg_pool_2x2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::from_f64(0.25);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    out.data_mut().par_chunks_mut(oh * ow).enumerate().for_each(|(p, y)| {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        for i in 0..oh {
            for j in 0..ow {
                let a = src[2 * i * w + 2 * j] + src[2 * i * w + 2 * j + 1];
                let b = src[(2 * i + 1) * w + 2 * j] + src[(2 * i + 1) * w + 2 * j + 1];
                y[i * ow + j] = (a + b) * quarter;
            }
        }
    });
    out
}

pub fn avg_pool_2x2_backward<T: Scalar>(input_shape: &[usize], grad_out: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (input_shape[2], input_shape[3]);
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::from_f64(0.25);
    let mut dx = Tensor::zeros(input_shape);
    dx.data_mut().par_chunks_mut(h * w).enumerate().for_each(|(p, d)| {
        let g = &grad_out.data()[p * oh * ow..(p + 1) * oh * ow];
        for i in 0..oh {
            for j in 0..ow {
                let v = g[i * ow + j] * quarter;
                d[2 * i * w + 2 * j] = v;
                d[2 * i * w + 2 * j + 1] = v;
                d[(2 * i + 1) * w + 2 * j] = v;
                d[(2 * i + 1) * w + 2 * j + 1] = v;
            }
        }
    });
    dx
}

/// Nearest-neighbour ×2 upsampling.
pub fn upsample2x<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    out.data_mut().par_chunks_mut(oh * ow).enumerate().for_each(|(p, y)| {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        for i in 0..oh {
            for j in 0..ow {
                y[i * ow + j] = src[(i / 2) * w + j / 2];
            }
        }
    });
    out
}

pub fn upsample2x_backward<T: Scalar>(grad_out: &Tensor<T>) -> Tensor<T> {
    let (n, c, oh, ow) = grad_out.dims4();
    let (h, w) = (oh / 2, ow / 2);
    let mut dx = Tensor::zeros(&[n, c, h, w]);
    dx.data_mut().par_chunks_mut(h * w).enumerate().for_each(|(p, d)| {
        let g = &grad_out.data()[p * oh * ow..(p + 1) * oh * ow];
        for i in 0..h {
            for j in 0..w {
                d[i * w + j] =
                    g[2 * i * ow + 2 * j] + g[2 * i * ow + 2 * j + 1] + g[(2 * i + 1) * ow + 2 * j] + g[(2 * i + 1) * ow + 2 * j + 1];
            }
        }
    });
    dx
}

/// Concatenation along the channel axis.
pub fn concat_channels<T: Scalar>(parts: &[&Tensor<T>]) -> Tensor<T> {
    let (n, _, h, w) = parts[0].dims4();
    let plane = h * w;
    let total_c: usize = parts
        .iter()
        .map(|p| {
            let (pn, pc, ph, pw) = p.dims4();
            assert!(pn == n && ph == h && pw == w, "concat operands disagree on N/H/W");
            pc
        })
        .sum();
    let mut data = Vec::with_capacity(n * total_c * plane);
    for i in 0..n {
        for p in parts {
            data.extend_from_slice(p.item(i));
        }
    }
    Tensor::from_vec(&[n, total_c, h, w], data)
}

/// Slices channels `start..start+len` out of an NCHW tensor.
pub fn slice_channels<T: Scalar>(x: &Tensor<T>, start: usize, len: usize) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let plane = h * w;
    let mut data = Vec::with_capacity(n * len * plane);
    for i in 0..n {
        let off = (i * c + start) * plane;
        data.extend_from_slice(&x.data()[off..off + len * plane]);
    }
    Tensor::from_vec(&[n, len, h, w], data)
}
