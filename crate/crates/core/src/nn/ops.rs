//! Forward and backward kernels for the layer types the networks use.
//!
//! Activations are `N×C×H×W` row-major; convolutions run as im2col followed by
//! a matrix product. Per-image work is spread with [`crate::par`], and weight
//! gradients are reduced over fixed image chunks in index order so results do
//! not depend on the thread count.

use crate::error::{Error, Result};
use crate::nn::real::{gemm, MatRef};
use crate::nn::{Real, Tensor};
use crate::par;

/// Images per partial weight-gradient reduction.
const GRAD_CHUNK: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        self.height + 2 * self.pad + 1 - self.kernel
    }
    pub fn out_width(&self) -> usize {
        self.width + 2 * self.pad + 1 - self.kernel
    }
    fn patch(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }
    fn locations(&self) -> usize {
        self.out_height() * self.out_width()
    }
}

fn im2col<T: Real>(g: &ConvGeometry, image: &[T], cols: &mut [T]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let l = oh * ow;
    let pad = g.pad as isize;
    for c in 0..g.in_channels {
        let plane = &image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (c * g.kernel + ki) * g.kernel + kj;
                let dst = &mut cols[row * l..(row + 1) * l];
                for oy in 0..oh {
                    let y = oy as isize + ki as isize - pad;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if y < 0 || y >= g.height as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[y as usize * g.width..(y as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let x = ox as isize + kj as isize - pad;
                        *v = if x < 0 || x >= g.width as isize {
                            T::zero()
                        } else {
                            src[x as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(g: &ConvGeometry, cols: &[T], image: &mut [T]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let l = oh * ow;
    let pad = g.pad as isize;
    for c in 0..g.in_channels {
        let plane = &mut image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (c * g.kernel + ki) * g.kernel + kj;
                let src = &cols[row * l..(row + 1) * l];
                for oy in 0..oh {
                    let y = oy as isize + ki as isize - pad;
                    if y < 0 || y >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[y as usize * g.width..(y as usize + 1) * g.width];
                    for ox in 0..ow {
                        let x = ox as isize + kj as isize - pad;
                        if x >= 0 && x < g.width as isize {
                            dst[x as usize] = dst[x as usize] + src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn conv_geometry<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, pad: usize) -> Result<ConvGeometry> {
    let is = input.shape();
    let ws = weight.shape();
    if is.len() != 4 || ws.len() != 4 || ws[1] != is[1] || ws[2] != ws[3] {
        return Err(Error::Shape {
            context: "conv2d".into(),
            expected: vec![is.first().copied().unwrap_or(0), ws.get(1).copied().unwrap_or(0)],
            actual: is.to_vec(),
        });
    }
    let g = ConvGeometry {
        in_channels: is[1],
        height: is[2],
        width: is[3],
        kernel: ws[2],
        pad,
    };
    if g.height + 2 * pad < g.kernel || g.width + 2 * pad < g.kernel {
        return Err(Error::InvalidArgument(format!(
            "kernel {} larger than padded input {}x{}",
            g.kernel, g.height, g.width
        )));
    }
    Ok(g)
}

/// Stride-1 convolution with zero padding: `[N,C,H,W] * [O,C,k,k] + [O]`.
pub fn conv2d_forward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = conv_geometry(input, weight, pad)?;
    let n = input.shape()[0];
    let o = weight.shape()[0];
    let (k, l) = (g.patch(), g.locations());
    let in_len = input.row_len();
    let mut out = vec![T::zero(); n * o * l];
    let (x, w, b) = (input.data(), weight.data(), bias.data());
    par::for_each_chunk_mut(&mut out, o * l, |i, dst| {
        let mut cols = vec![T::zero(); k * l];
        im2col(&g, &x[i * in_len..(i + 1) * in_len], &mut cols);
        gemm(MatRef::new(w, o, k), MatRef::new(&cols, k, l), T::zero(), dst);
        for (oc, row) in dst.chunks_mut(l).enumerate() {
            for v in row {
                *v = *v + b[oc];
            }
        }
    });
    Tensor::new(vec![n, o, g.out_height(), g.out_width()], out)
}

pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    pad: usize,
) -> Result<ConvGrads<T>> {
    let g = conv_geometry(input, weight, pad)?;
    let n = input.shape()[0];
    let o = weight.shape()[0];
    let (k, l) = (g.patch(), g.locations());
    let in_len = input.row_len();
    let (x, w, dy) = (input.data(), weight.data(), grad_out.data());

    let chunks = n.div_ceil(GRAD_CHUNK);
    let partials = par::map_indexed(chunks, |ci| {
        let mut dw = vec![T::zero(); o * k];
        let mut db = vec![T::zero(); o];
        let mut cols = vec![T::zero(); k * l];
        for i in ci * GRAD_CHUNK..((ci + 1) * GRAD_CHUNK).min(n) {
            im2col(&g, &x[i * in_len..(i + 1) * in_len], &mut cols);
            let dyi = &dy[i * o * l..(i + 1) * o * l];
            gemm(MatRef::new(dyi, o, l), MatRef::new(&cols, k, l).t(), T::one(), &mut dw);
            for (oc, row) in dyi.chunks(l).enumerate() {
                db[oc] = db[oc] + row.iter().copied().sum::<T>();
            }
        }
        (dw, db)
    });
    let mut dw = vec![T::zero(); o * k];
    let mut db = vec![T::zero(); o];
    for (pw, pb) in partials {
        for (a, b) in dw.iter_mut().zip(pw) {
            *a = *a + b;
        }
        for (a, b) in db.iter_mut().zip(pb) {
            *a = *a + b;
        }
    }

    let mut dx = vec![T::zero(); n * in_len];
    par::for_each_chunk_mut(&mut dx, in_len, |i, dst| {
        let mut dcols = vec![T::zero(); k * l];
        gemm(
            MatRef::new(w, o, k).t(),
            MatRef::new(&dy[i * o * l..(i + 1) * o * l], o, l),
            T::zero(),
            &mut dcols,
        );
        col2im(&g, &dcols, dst);
    });

    Ok(ConvGrads {
        input: Tensor::new(input.shape().to_vec(), dx)?,
        weight: Tensor::new(weight.shape().to_vec(), dw)?,
        bias: Tensor::new(vec![o], db)?,
    })
}

pub fn relu_forward<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    let data = input.data().iter().map(|&v| v.max(T::zero())).collect();
    Tensor::new(input.shape().to_vec(), data).expect("same shape")
}

pub fn relu_backward<T: Real>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(input.shape().to_vec(), data).expect("same shape")
}

/// Non-overlapping `size×size` max pooling; also returns the flat argmax of
/// each output element (first maximum wins on ties).
pub fn maxpool_forward<T: Real>(input: &Tensor<T>, size: usize) -> Result<(Tensor<T>, Vec<usize>)> {
    let s = input.shape();
    if s.len() != 4 || size == 0 || s[2] < size || s[3] < size {
        return Err(Error::InvalidArgument(format!(
            "maxpool of size {size} on input {s:?}"
        )));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (oh, ow) = (h / size, w / size);
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * size * w + ox * size;
                for dy in 0..size {
                    for dx in 0..size {
                        let idx = base + (oy * size + dy) * w + ox * size + dx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![n, c, oh, ow], out)?, arg))
}

pub fn maxpool_backward<T: Real>(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&i, &g) in argmax.iter().zip(grad_out.data()) {
        d[i] = d[i] + g;
    }
    dx
}

/// `y = x·Wᵀ + b` with `x: [N, in]`, `W: [out, in]`, `b: [out]`.
pub fn linear_forward<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let n = input.batch();
    let fan_in = input.row_len();
    let (out_f, w_in) = (weight.shape()[0], weight.shape()[1]);
    if fan_in != w_in {
        return Err(Error::Shape {
            context: "linear".into(),
            expected: vec![n, w_in],
            actual: input.shape().to_vec(),
        });
    }
    let mut out = vec![T::zero(); n * out_f];
    for row in out.chunks_mut(out_f) {
        row.copy_from_slice(bias.data());
    }
    gemm(
        MatRef::new(input.data(), n, fan_in),
        MatRef::new(weight.data(), out_f, fan_in).t(),
        T::one(),
        &mut out,
    );
    Tensor::new(vec![n, out_f], out)
}

pub struct LinearGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn linear_backward<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, grad_out: &Tensor<T>) -> Result<LinearGrads<T>> {
    let n = input.batch();
    let fan_in = input.row_len();
    let out_f = weight.shape()[0];
    let dy = grad_out.data();
    let mut dw = vec![T::zero(); out_f * fan_in];
    gemm(
        MatRef::new(dy, n, out_f).t(),
        MatRef::new(input.data(), n, fan_in),
        T::zero(),
        &mut dw,
    );
    let mut dx = vec![T::zero(); n * fan_in];
    gemm(
        MatRef::new(dy, n, out_f),
        MatRef::new(weight.data(), out_f, fan_in),
        T::zero(),
        &mut dx,
    );
    let mut db = vec![T::zero(); out_f];
    for row in dy.chunks(out_f) {
        for (a, &b) in db.iter_mut().zip(row) {
            *a = *a + b;
        }
    }
    Ok(LinearGrads {
        input: Tensor::new(input.shape().to_vec(), dx)?,
        weight: Tensor::new(weight.shape().to_vec(), dw)?,
        bias: Tensor::new(vec![out_f], db)?,
    })
}

/// Mean softmax cross-entropy over the batch; returns the loss and the softmax
/// probabilities needed for the backward pass.
pub fn softmax_cross_entropy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Vec<T>)> {
    let s = logits.shape();
    if s.len() != 2 {
        return Err(Error::InvalidArgument(format!("logits must be N×K, got {s:?}")));
    }
    let (n, k) = (s[0], s[1]);
    if labels.len() != n {
        return Err(Error::Shape {
            context: "cross-entropy labels".into(),
            expected: vec![n],
            actual: vec![labels.len()],
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    let mut probs = Vec::with_capacity(n * k);
    let mut total = T::zero();
    for (row, &label) in logits.data().chunks(k).zip(labels) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let sum: T = row.iter().map(|&z| (z - max).exp()).sum();
        let lse = max + sum.ln();
        total = total + (lse - row[label]);
        probs.extend(row.iter().map(|&z| (z - lse).exp()));
    }
    Ok((total / T::from_f64(n as f64), probs))
}

pub fn softmax_cross_entropy_backward<T: Real>(probs: &[T], labels: &[usize], upstream: T) -> Vec<T> {
    let n = labels.len();
    let k = probs.len() / n;
    let scale = upstream / T::from_f64(n as f64);
    let mut g: Vec<T> = probs.iter().map(|&p| p * scale).collect();
    for (i, &l) in labels.iter().enumerate() {
        g[i * k + l] = g[i * k + l] - scale;
    }
    g
}

/// Cosine-similarity matrix between the flattened rows of `input`.
/// Returns `(rsm, unit_rows, norms)`.
pub fn cosine_rsm_forward<T: Real>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    let m = input.batch();
    let d = input.row_len();
    let mut unit = input.data().to_vec();
    let mut norms = Vec::with_capacity(m);
    for (i, row) in unit.chunks_mut(d).enumerate() {
        let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
        if !(norm.is_finite() && norm > T::zero()) {
            return Err(Error::Degenerate(format!(
                "response vector {i} has zero norm; cosine similarity undefined"
            )));
        }
        for v in row.iter_mut() {
            *v = *v / norm;
        }
        norms.push(norm);
    }
    let mut r = vec![T::zero(); m * m];
    gemm(MatRef::new(&unit, m, d), MatRef::new(&unit, m, d).t(), T::zero(), &mut r);
    Ok((Tensor::new(vec![m, m], r)?, unit, norms))
}

pub fn cosine_rsm_backward<T: Real>(input_shape: &[usize], unit: &[T], norms: &[T], grad_out: &Tensor<T>) -> Tensor<T> {
    let m = norms.len();
    let d = unit.len() / m;
    let g = grad_out.data();
    let mut sym = vec![T::zero(); m * m];
    for i in 0..m {
        for j in 0..m {
            sym[i * m + j] = g[i * m + j] + g[j * m + i];
        }
    }
    let mut du = vec![T::zero(); m * d];
    gemm(MatRef::new(&sym, m, m), MatRef::new(unit, m, d), T::zero(), &mut du);
    for i in 0..m {
        let u = &unit[i * d..(i + 1) * d];
        let row = &mut du[i * d..(i + 1) * d];
        let proj: T = u.iter().zip(row.iter()).map(|(&a, &b)| a * b).sum();
        for (v, &ui) in row.iter_mut().zip(u) {
            *v = (*v - ui * proj) / norms[i];
        }
    }
    Tensor::new(input_shape.to_vec(), du).expect("same shape")
}

/// `scale · Σᵢⱼ (targetᵢⱼ − predictedᵢⱼ)²`.
pub fn squared_mismatch<T: Real>(target: &[T], predicted: &[T], scale: T) -> T {
    let s: T = target
        .iter()
        .zip(predicted)
        .map(|(&t, &p)| (t - p) * (t - p))
        .sum();
    s * scale
}

pub fn squared_mismatch_backward<T: Real>(target: &[T], predicted: &[T], scale: T, upstream: T) -> Vec<T> {
    let c = T::from_f64(-2.0) * scale * upstream;
    target.iter().zip(predicted).map(|(&t, &p)| c * (t - p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], (n, c, h, w): (usize, usize, usize, usize), wt: &[f64], o: usize, k: usize, b: &[f64], pad: usize) -> Vec<f64> {
        let oh = h + 2 * pad + 1 - k;
        let ow = w + 2 * pad + 1 - k;
        let mut out = vec![0.0; n * o * oh * ow];
        for ni in 0..n {
            for oc in 0..o {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut s = b[oc];
                        for ic in 0..c {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let y = oy as isize + ki as isize - pad as isize;
                                    let xx = ox as isize + kj as isize - pad as isize;
                                    if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < w {
                                        s += wt[((oc * c + ic) * k + ki) * k + kj]
                                            * x[((ni * c + ic) * h + y as usize) * w + xx as usize];
                                    }
                                }
                            }
                        }
                        out[((ni * o + oc) * oh + oy) * ow + ox] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loops() {
        let (n, c, h, w, o, k) = (3, 2, 5, 4, 3, 3);
        let x: Vec<f64> = (0..n * c * h * w).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
        let wt: Vec<f64> = (0..o * c * k * k).map(|i| ((i * 13 % 7) as f64) * 0.1 - 0.3).collect();
        let b = vec![0.5, -0.25, 0.0];
        for pad in [0, 1] {
            let out = conv2d_forward(
                &Tensor::new(vec![n, c, h, w], x.clone()).unwrap(),
                &Tensor::new(vec![o, c, k, k], wt.clone()).unwrap(),
                &Tensor::new(vec![o], b.clone()).unwrap(),
                pad,
            )
            .unwrap();
            let want = naive_conv(&x, (n, c, h, w), &wt, o, k, &b, pad);
            for (a, b) in out.data().iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identity_kernel_is_identity() {
        // 1x1 conv with unit weight on a 3x3 single-channel image.
        let x: Vec<f64> = vec![1., 2., 3., 4., 5., 6., 7., 8., 9.];
        let out = conv2d_forward(
            &Tensor::new(vec![1, 1, 3, 3], x.clone()).unwrap(),
            &Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap(),
            &Tensor::new(vec![1], vec![0.0]).unwrap(),
            0,
        )
        .unwrap();
        assert_eq!(out.data(), &x[..]);
    }

    #[test]
    fn maxpool_picks_window_max() {
        let x = Tensor::<f64>::new(vec![1, 1, 2, 4], vec![1., 5., 2., 0., 3., 4., 8., 1.]).unwrap();
        let (y, arg) = maxpool_forward(&x, 2).unwrap();
        assert_eq!(y.data(), &[5., 8.]);
        assert_eq!(arg, vec![1, 6]);
        let g = maxpool_backward(x.shape(), &arg, &Tensor::new(vec![1, 1, 1, 2], vec![1., 2.]).unwrap());
        assert_eq!(g.data(), &[0., 1., 0., 0., 0., 0., 2., 0.]);
    }

    #[test]
    fn cross_entropy_reference_value() {
        let logits = Tensor::<f64>::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let (loss, _) = softmax_cross_entropy(&logits, &[2]).unwrap();
        // -log(e^3 / (e^1 + e^2 + e^3))
        let want = -(3f64.exp() / (1f64.exp() + 2f64.exp() + 3f64.exp())).ln();
        assert!((loss - want).abs() < 1e-14);
        assert!((loss - 0.40761).abs() < 1e-5);
    }
}
