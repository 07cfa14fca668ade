//! Forward and adjoint numeric kernels.
//!
//! Every reduction runs in a fixed loop order so results are reproducible
//! bit-for-bit across runs.

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn new(input: Shape, weight: Shape, stride: usize, padding: usize) -> Result<Self> {
        let [batch, in_channels, in_h, in_w] = input;
        let [out_channels, wc, kernel_h, kernel_w] = weight;
        if wc != in_channels {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: input,
                rhs: weight,
            });
        }
        if stride == 0 {
            return Err(Error::Geometry {
                op: "conv2d",
                detail: "stride must be positive".into(),
            });
        }
        let out_h = output_extent("conv2d", in_h, kernel_h, stride, padding)?;
        let out_w = output_extent("conv2d", in_w, kernel_w, stride, padding)?;
        Ok(ConvGeometry {
            batch,
            in_channels,
            out_channels,
            in_h,
            in_w,
            kernel_h,
            kernel_w,
            out_h,
            out_w,
            stride,
            padding,
        })
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn output_shape(&self) -> Shape {
        [self.batch, self.out_channels, self.out_h, self.out_w]
    }
}

/// `floor((extent + 2*padding - window) / stride) + 1`, rejecting windows that do not fit.
pub fn output_extent(
    op: &'static str,
    extent: usize,
    window: usize,
    stride: usize,
    padding: usize,
) -> Result<usize> {
    let padded = extent + 2 * padding;
    if window == 0 || padded < window {
        return Err(Error::Geometry {
            op,
            detail: format!("window {window} does not fit extent {extent} with padding {padding}"),
        });
    }
    Ok((padded - window) / stride + 1)
}

/// Unfolds one sample into a `[patch_len, positions]` column matrix.
fn im2col(g: &ConvGeometry, sample: &[f64], cols: &mut [f64]) {
    let p = g.positions();
    let mut row = 0;
    for c in 0..g.in_channels {
        let plane = &sample[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for kh in 0..g.kernel_h {
            for kw in 0..g.kernel_w {
                let dst = &mut cols[row * p..(row + 1) * p];
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride + kh) as isize - g.padding as isize;
                    let line = &mut dst[oh * g.out_w..(oh + 1) * g.out_w];
                    if ih < 0 || ih >= g.in_h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[ih as usize * g.in_w..(ih as usize + 1) * g.in_w];
                    for (ow, v) in line.iter_mut().enumerate() {
                        let iw = (ow * g.stride + kw) as isize - g.padding as isize;
                        *v = if iw < 0 || iw >= g.in_w as isize {
                            0.0
                        } else {
                            src[iw as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Folds a column matrix back onto one sample, accumulating overlaps.
fn col2im(g: &ConvGeometry, cols: &[f64], sample: &mut [f64]) {
    let p = g.positions();
    let mut row = 0;
    for c in 0..g.in_channels {
        let plane = &mut sample[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for kh in 0..g.kernel_h {
            for kw in 0..g.kernel_w {
                let src = &cols[row * p..(row + 1) * p];
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride + kh) as isize - g.padding as isize;
                    if ih < 0 || ih >= g.in_h as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * g.in_w..(ih as usize + 1) * g.in_w];
                    for ow in 0..g.out_w {
                        let iw = (ow * g.stride + kw) as isize - g.padding as isize;
                        if iw >= 0 && iw < g.in_w as isize {
                            dst[iw as usize] += src[oh * g.out_w + ow];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Cross-correlation without bias: `out[i, j] = sum_k input[i, k] * weight[j, k]`.
pub fn conv2d(input: &Tensor, weight: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let g = ConvGeometry::new(input.shape(), weight.shape(), stride, padding)?;
    let (k, p) = (g.patch_len(), g.positions());
    let mut out = Tensor::zeros(g.output_shape());
    let mut cols = vec![0.0; k * p];
    let in_len = input.sample_len();
    let out_len = g.out_channels * p;
    let w = weight.data();
    for i in 0..g.batch {
        im2col(&g, &input.data()[i * in_len..(i + 1) * in_len], &mut cols);
        let dst = &mut out.data_mut()[i * out_len..(i + 1) * out_len];
        for j in 0..g.out_channels {
            let acc = &mut dst[j * p..(j + 1) * p];
            for (r, &wv) in w[j * k..(j + 1) * k].iter().enumerate() {
                // zero weights carry masked-off channels
                if wv == 0.0 {
                    continue;
                }
                for (a, &x) in acc.iter_mut().zip(&cols[r * p..(r + 1) * p]) {
                    *a += wv * x;
                }
            }
        }
    }
    Ok(out)
}

/// Adjoints of [`conv2d`]. Either output may be skipped.
pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &[f64],
    stride: usize,
    padding: usize,
    want_input: bool,
    want_weight: bool,
) -> Result<(Option<Vec<f64>>, Option<Vec<f64>>)> {
    let g = ConvGeometry::new(input.shape(), weight.shape(), stride, padding)?;
    let (k, p) = (g.patch_len(), g.positions());
    let in_len = input.sample_len();
    let out_len = g.out_channels * p;
    let w = weight.data();
    let mut dw = want_weight.then(|| vec![0.0; weight.len()]);
    let mut dx = want_input.then(|| vec![0.0; input.len()]);
    let mut cols = vec![0.0; k * p];
    let mut dcols = vec![0.0; k * p];
    for i in 0..g.batch {
        let dy = &grad_out[i * out_len..(i + 1) * out_len];
        if let Some(dw) = dw.as_mut() {
            im2col(&g, &input.data()[i * in_len..(i + 1) * in_len], &mut cols);
            for j in 0..g.out_channels {
                let dyj = &dy[j * p..(j + 1) * p];
                for r in 0..k {
                    let dot: f64 = dyj
                        .iter()
                        .zip(&cols[r * p..(r + 1) * p])
                        .map(|(a, b)| a * b)
                        .sum();
                    dw[j * k + r] += dot;
                }
            }
        }
        if let Some(dx) = dx.as_mut() {
            dcols.fill(0.0);
            for j in 0..g.out_channels {
                let dyj = &dy[j * p..(j + 1) * p];
                for r in 0..k {
                    let wv = w[j * k + r];
                    if wv == 0.0 {
                        continue;
                    }
                    for (d, &v) in dcols[r * p..(r + 1) * p].iter_mut().zip(dyj) {
                        *d += wv * v;
                    }
                }
            }
            col2im(&g, &dcols, &mut dx[i * in_len..(i + 1) * in_len]);
        }
    }
    Ok((dx, dw))
}

fn check_channel_params(op: &'static str, input: &Tensor, params: &[&[f64]]) -> Result<()> {
    let [n, c, h, w] = input.shape();
    if n * h * w == 0 {
        return Err(Error::Geometry {
            op,
            detail: format!("empty channel slices in {:?}", input.shape()),
        });
    }
    for p in params {
        if p.len() != c {
            return Err(Error::Geometry {
                op,
                detail: format!("{} per-channel parameters for {c} channels", p.len()),
            });
        }
    }
    Ok(())
}

/// Per-channel mean and biased variance over (N, H, W).
pub fn channel_moments(input: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    check_channel_params("batch_norm", input, &[])?;
    let [n, c, h, w] = input.shape();
    let plane = h * w;
    let count = (n * plane) as f64;
    let x = input.data();
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for i in 0..n {
            let start = (i * c + ch) * plane;
            s += x[start..start + plane].iter().sum::<f64>();
        }
        let m = s / count;
        let mut v = 0.0;
        for i in 0..n {
            let start = (i * c + ch) * plane;
            v += x[start..start + plane]
                .iter()
                .map(|&a| (a - m) * (a - m))
                .sum::<f64>();
        }
        mean[ch] = m;
        var[ch] = v / count;
    }
    Ok((mean, var))
}

/// Normalized activations `x_hat` and per-channel `1/sqrt(var + eps)` for given statistics.
pub fn normalize(input: &Tensor, mean: &[f64], var: &[f64], eps: f64) -> (Vec<f64>, Vec<f64>) {
    let [n, c, h, w] = input.shape();
    let plane = h * w;
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = vec![0.0; input.len()];
    for i in 0..n {
        for ch in 0..c {
            let start = (i * c + ch) * plane;
            for (o, &x) in xhat[start..start + plane]
                .iter_mut()
                .zip(&input.data()[start..start + plane])
            {
                *o = (x - mean[ch]) * inv_std[ch];
            }
        }
    }
    (xhat, inv_std)
}

pub fn affine_channels(shape: Shape, xhat: &[f64], gamma: &[f64], beta: &[f64]) -> Tensor {
    let [n, c, h, w] = shape;
    let plane = h * w;
    let mut out = Vec::with_capacity(xhat.len());
    for i in 0..n {
        for ch in 0..c {
            let start = (i * c + ch) * plane;
            out.extend(
                xhat[start..start + plane]
                    .iter()
                    .map(|&v| gamma[ch] * v + beta[ch]),
            );
        }
    }
    Tensor::from_vec(shape, out).expect("shape preserved")
}

/// Batch normalization with given statistics. Returns output, `x_hat`, `1/std`.
pub fn batch_norm(
    input: &Tensor,
    gamma: &[f64],
    beta: &[f64],
    mean: &[f64],
    var: &[f64],
    eps: f64,
) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    check_channel_params("batch_norm", input, &[gamma, beta, mean, var])?;
    let (xhat, inv_std) = normalize(input, mean, var, eps);
    let out = affine_channels(input.shape(), &xhat, gamma, beta);
    Ok((out, xhat, inv_std))
}

/// Per-channel sums `(sum dy, sum dy * x_hat)`.
pub fn bn_param_grads(shape: Shape, dy: &[f64], xhat: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let [n, c, h, w] = shape;
    let plane = h * w;
    let mut dbeta = vec![0.0; c];
    let mut dgamma = vec![0.0; c];
    for i in 0..n {
        for ch in 0..c {
            let start = (i * c + ch) * plane;
            for (&g, &x) in dy[start..start + plane]
                .iter()
                .zip(&xhat[start..start + plane])
            {
                dbeta[ch] += g;
                dgamma[ch] += g * x;
            }
        }
    }
    (dgamma, dbeta)
}

/// Input adjoint of batch normalization using the batch's own statistics.
pub fn bn_batch_input_grad(
    shape: Shape,
    dy: &[f64],
    xhat: &[f64],
    gamma: &[f64],
    inv_std: &[f64],
) -> Vec<f64> {
    let [n, c, h, w] = shape;
    let plane = h * w;
    let count = (n * plane) as f64;
    let (dgamma, dbeta) = bn_param_grads(shape, dy, xhat);
    let mut dx = vec![0.0; dy.len()];
    for i in 0..n {
        for ch in 0..c {
            let start = (i * c + ch) * plane;
            let scale = gamma[ch] * inv_std[ch];
            let mdy = dbeta[ch] / count;
            let mdyx = dgamma[ch] / count;
            for ((d, &g), &x) in dx[start..start + plane]
                .iter_mut()
                .zip(&dy[start..start + plane])
                .zip(&xhat[start..start + plane])
            {
                *d = scale * (g - mdy - x * mdyx);
            }
        }
    }
    dx
}

/// Input adjoint of batch normalization with fixed statistics.
pub fn bn_frozen_input_grad(shape: Shape, dy: &[f64], gamma: &[f64], inv_std: &[f64]) -> Vec<f64> {
    let [n, c, h, w] = shape;
    let plane = h * w;
    let mut dx = vec![0.0; dy.len()];
    for i in 0..n {
        for ch in 0..c {
            let start = (i * c + ch) * plane;
            let scale = gamma[ch] * inv_std[ch];
            for (d, &g) in dx[start..start + plane]
                .iter_mut()
                .zip(&dy[start..start + plane])
            {
                *d = scale * g;
            }
        }
    }
    dx
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

pub fn global_avg_pool(input: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = input.shape();
    let plane = h * w;
    if plane == 0 {
        return Err(Error::Geometry {
            op: "global_avg_pool",
            detail: format!("empty spatial extent in {:?}", input.shape()),
        });
    }
    let data = input
        .data()
        .chunks(plane)
        .map(|ch| ch.iter().sum::<f64>() / plane as f64)
        .collect();
    Tensor::from_vec([n, c, 1, 1], data)
}

/// Windowed maxima; returns the output and the flat input index of each maximum.
pub fn max_pool(input: &Tensor, window: usize, stride: usize) -> Result<(Tensor, Vec<usize>)> {
    if window == 0 || stride == 0 {
        return Err(Error::Geometry {
            op: "max_pool",
            detail: "window and stride must be positive".into(),
        });
    }
    let [n, c, h, w] = input.shape();
    let oh = output_extent("max_pool", h, window, stride, 0)?;
    let ow = output_extent("max_pool", w, window, stride, 0)?;
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    let x = input.data();
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * h * w;
            for y in 0..oh {
                for z in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = base + y * stride * w + z * stride;
                    for dy in 0..window {
                        for dz in 0..window {
                            let idx = base + (y * stride + dy) * w + z * stride + dz;
                            if x[idx] > best {
                                best = x[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out.push(best);
                    arg.push(best_idx);
                }
            }
        }
    }
    Ok((Tensor::from_vec([n, c, oh, ow], out)?, arg))
}

fn fc_dims(input: &Tensor, theta: &Tensor) -> Result<(usize, usize, usize)> {
    let [n, d, h, w] = input.shape();
    let [td, m, th, tw] = theta.shape();
    if h != 1 || w != 1 || th != 1 || tw != 1 || td != d {
        return Err(Error::ShapeMismatch {
            op: "fully_connected",
            lhs: input.shape(),
            rhs: theta.shape(),
        });
    }
    Ok((n, d, m))
}

/// `out[i, t] = sum_k input[i, k] * theta[k, t]`.
pub fn fully_connected(input: &Tensor, theta: &Tensor) -> Result<Tensor> {
    let (n, d, m) = fc_dims(input, theta)?;
    let x = input.data();
    let th = theta.data();
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for k in 0..d {
            let xv = x[i * d + k];
            for (o, &t) in row.iter_mut().zip(&th[k * m..(k + 1) * m]) {
                *o += xv * t;
            }
        }
    }
    Tensor::from_vec([n, m, 1, 1], out)
}

pub fn fully_connected_backward(
    input: &Tensor,
    theta: &Tensor,
    dy: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let (n, d, m) = fc_dims(input, theta)?;
    let x = input.data();
    let th = theta.data();
    let mut dx = vec![0.0; n * d];
    let mut dtheta = vec![0.0; d * m];
    for i in 0..n {
        let g = &dy[i * m..(i + 1) * m];
        for k in 0..d {
            let trow = &th[k * m..(k + 1) * m];
            dx[i * d + k] = g.iter().zip(trow).map(|(a, b)| a * b).sum();
            let xv = x[i * d + k];
            for (dt, &gv) in dtheta[k * m..(k + 1) * m].iter_mut().zip(g) {
                *dt += xv * gv;
            }
        }
    }
    Ok((dx, dtheta))
}

/// Mean negative log-likelihood of `labels` under softmax(logits); also returns the probabilities.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Vec<f64>)> {
    let [n, m, h, w] = logits.shape();
    if h != 1 || w != 1 || labels.len() != n || n == 0 {
        return Err(Error::Geometry {
            op: "softmax_cross_entropy",
            detail: format!("{} labels for logits {:?}", labels.len(), logits.shape()),
        });
    }
    let mut probs = vec![0.0; n * m];
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= m {
            return Err(Error::invalid(format!(
                "label {y} out of range for {m} classes"
            )));
        }
        let z = &logits.data()[i * m..(i + 1) * m];
        let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = z.iter().map(|&v| (v - zmax).exp()).sum();
        let log_denom = denom.ln();
        for (t, &v) in z.iter().enumerate() {
            probs[i * m + t] = (v - zmax).exp() / denom;
        }
        total += log_denom - (z[y] - zmax);
    }
    Ok((total / n as f64, probs))
}

/// `(1 / 2q) * sum (a - b)^2`.
pub fn mean_squared_half(a: &Tensor, b: &Tensor, q: usize) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "mean_squared_half",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    if q == 0 {
        return Err(Error::invalid("mean_squared_half needs Q > 0"));
    }
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(s / (2.0 * q as f64))
}
