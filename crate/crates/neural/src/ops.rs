//! Forward and backward kernels on single C×H×W feature maps.

use crate::gemm::{gemm, Gemm};
use crate::tensor::Tensor;
use crate::NeuralError;

fn mismatch(msg: String) -> NeuralError {
    NeuralError::ShapeMismatch(msg)
}

/// Output extent of a convolution along one axis.
pub fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> Result<usize, NeuralError> {
    let padded = size + 2 * pad;
    if padded < k || stride == 0 {
        return Err(mismatch(format!("kernel {k} does not fit extent {size} with pad {pad}")));
    }
    Ok((padded - k) / stride + 1)
}

/// Output extent of a transposed convolution along one axis.
pub fn deconv_out(size: usize, k: usize, stride: usize, pad: usize) -> Result<usize, NeuralError> {
    ((size - 1) * stride + k)
        .checked_sub(2 * pad)
        .filter(|&n| n > 0)
        .ok_or_else(|| mismatch(format!("transposed conv of extent {size} collapses")))
}

/// Unfolds k×k patches: row `(c·k + i)·k + j`, column `oy·wo + ox`.
pub fn im2col<T: Gemm>(x: &[T], (c, h, w): (usize, usize, usize), k: usize, stride: usize, pad: usize) -> (Vec<T>, usize, usize) {
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let mut cols = vec![T::zero(); c * k * k * ho * wo];
    for ch in 0..c {
        for i in 0..k {
            for j in 0..k {
                let row = ((ch * k + i) * k + j) * ho * wo;
                for oy in 0..ho {
                    let y = (oy * stride + i) as isize - pad as isize;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    let src = ch * h * w + y as usize * w;
                    let dst = row + oy * wo;
                    for ox in 0..wo {
                        let xx = (ox * stride + j) as isize - pad as isize;
                        if xx >= 0 && xx < w as isize {
                            cols[dst + ox] = x[src + xx as usize];
                        }
                    }
                }
            }
        }
    }
    (cols, ho, wo)
}

/// Adjoint of [`im2col`]: sums patch columns back into a C×H×W map.
pub fn col2im<T: Gemm>(cols: &[T], (c, h, w): (usize, usize, usize), k: usize, stride: usize, pad: usize) -> Vec<T> {
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let mut x = vec![T::zero(); c * h * w];
    for ch in 0..c {
        for i in 0..k {
            for j in 0..k {
                let row = ((ch * k + i) * k + j) * ho * wo;
                for oy in 0..ho {
                    let y = (oy * stride + i) as isize - pad as isize;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    let dst = ch * h * w + y as usize * w;
                    let src = row + oy * wo;
                    for ox in 0..wo {
                        let xx = (ox * stride + j) as isize - pad as isize;
                        if xx >= 0 && xx < w as isize {
                            x[dst + xx as usize] += cols[src + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

fn kernel_dims<T>(w: &Tensor<T>) -> Result<(usize, usize, usize), NeuralError> {
    match w.shape[..] {
        [a, b, k, k2] if k == k2 => Ok((a, b, k)),
        _ => Err(mismatch(format!("kernel must be A×B×k×k, got {:?}", w.shape))),
    }
}

fn check_bias<T>(b: &Tensor<T>, n: usize) -> Result<(), NeuralError> {
    if b.shape != [n] {
        return Err(mismatch(format!("bias shape {:?}, expected [{n}]", b.shape)));
    }
    Ok(())
}

fn add_bias<T: Gemm>(y: &mut [T], b: &[T], plane: usize) {
    for (chunk, &bv) in y.chunks_mut(plane).zip(b) {
        for v in chunk {
            *v += bv;
        }
    }
}

fn plane_sums<T: Gemm>(dy: &[T], channels: usize) -> Vec<T> {
    let plane = dy.len() / channels;
    dy.chunks(plane).map(|c| c.iter().copied().sum()).collect()
}

/// Cross-correlation of `x` (C×H×W) with `w` (O×C×k×k) plus `b`. Also
/// returns the unfolded input for the backward pass.
pub fn conv2d_forward<T: Gemm>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, Vec<T>), NeuralError> {
    let (c, h, wd) = x.chw()?;
    let (o, ci, k) = kernel_dims(w)?;
    if ci != c {
        return Err(mismatch(format!("conv expects {ci} input channels, got {c}")));
    }
    check_bias(b, o)?;
    let (ho, wo) = (conv_out(h, k, stride, pad)?, conv_out(wd, k, stride, pad)?);
    let cols = if k == 1 && stride == 1 && pad == 0 {
        x.data.clone()
    } else {
        im2col(&x.data, (c, h, wd), k, stride, pad).0
    };
    let mut y = vec![T::zero(); o * ho * wo];
    gemm(false, false, o, c * k * k, ho * wo, &w.data, &cols, T::zero(), &mut y);
    add_bias(&mut y, &b.data, ho * wo);
    Ok((Tensor::from_vec(&[o, ho, wo], y)?, cols))
}

/// Gradients `(dx, dw, db)` of a convolution given the upstream `dy` and the
/// unfolded input saved by the forward pass.
pub fn conv2d_backward<T: Gemm>(
    dy: &Tensor<T>,
    x_shape: (usize, usize, usize),
    w: &Tensor<T>,
    cols: &[T],
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>), NeuralError> {
    let (o, c, k) = kernel_dims(w)?;
    let (od, ho, wo) = dy.chw()?;
    if od != o || cols.len() != c * k * k * ho * wo {
        return Err(mismatch("conv backward shapes disagree".into()));
    }
    let ckk = c * k * k;
    let mut dw = vec![T::zero(); o * ckk];
    gemm(false, true, o, ho * wo, ckk, &dy.data, cols, T::zero(), &mut dw);
    let mut dcols = vec![T::zero(); ckk * ho * wo];
    gemm(true, false, ckk, o, ho * wo, &w.data, &dy.data, T::zero(), &mut dcols);
    let dx = if k == 1 && stride == 1 && pad == 0 {
        dcols
    } else {
        col2im(&dcols, x_shape, k, stride, pad)
    };
    let (xc, xh, xw) = x_shape;
    Ok((
        Tensor::from_vec(&[xc, xh, xw], dx)?,
        Tensor::from_vec(&w.shape, dw)?,
        Tensor::from_vec(&[o], plane_sums(&dy.data, o))?,
    ))
}

/// Transposed convolution of `x` (C×H×W) with `w` (C×O×k×k) plus `b`: the
/// adjoint of a stride-`stride` convolution from O to C channels.
pub fn deconv2d_forward<T: Gemm>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>, NeuralError> {
    let (c, h, wd) = x.chw()?;
    let (ci, o, k) = kernel_dims(w)?;
    if ci != c {
        return Err(mismatch(format!("transposed conv expects {ci} input channels, got {c}")));
    }
    check_bias(b, o)?;
    let (ho, wo) = (deconv_out(h, k, stride, pad)?, deconv_out(wd, k, stride, pad)?);
    let okk = o * k * k;
    let mut cols = vec![T::zero(); okk * h * wd];
    gemm(true, false, okk, c, h * wd, &w.data, &x.data, T::zero(), &mut cols);
    let mut y = col2im(&cols, (o, ho, wo), k, stride, pad);
    add_bias(&mut y, &b.data, ho * wo);
    Tensor::from_vec(&[o, ho, wo], y)
}

pub fn deconv2d_backward<T: Gemm>(
    dy: &Tensor<T>,
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>), NeuralError> {
    let (c, h, wd) = x.chw()?;
    let (_, o, k) = kernel_dims(w)?;
    let (od, ho, wo) = dy.chw()?;
    if od != o {
        return Err(mismatch("transposed conv backward shapes disagree".into()));
    }
    let (dcols, hh, ww) = im2col(&dy.data, (o, ho, wo), k, stride, pad);
    if (hh, ww) != (h, wd) {
        return Err(mismatch("transposed conv backward extents disagree".into()));
    }
    let okk = o * k * k;
    let mut dx = vec![T::zero(); c * h * wd];
    gemm(false, false, c, okk, h * wd, &w.data, &dcols, T::zero(), &mut dx);
    let mut dw = vec![T::zero(); c * okk];
    gemm(false, true, c, h * wd, okk, &x.data, &dcols, T::zero(), &mut dw);
    Ok((
        Tensor::from_vec(&x.shape, dx)?,
        Tensor::from_vec(&w.shape, dw)?,
        Tensor::from_vec(&[o], plane_sums(&dy.data, o))?,
    ))
}

pub fn relu_forward<T: Gemm>(x: &Tensor<T>) -> Tensor<T> {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect(),
    }
}

/// Gradient through a ReLU whose output was `y`.
pub fn relu_backward<T: Gemm>(dy: &Tensor<T>, y: &Tensor<T>) -> Tensor<T> {
    Tensor {
        shape: dy.shape.clone(),
        data: dy
            .data
            .iter()
            .zip(&y.data)
            .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
            .collect(),
    }
}

/// 2×2 max pooling with stride 2; also returns the flat input index of each
/// maximum (first one on ties).
pub fn maxpool2_forward<T: Gemm>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>), NeuralError> {
    let (c, h, w) = x.chw()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(mismatch(format!("max pooling needs even extents, got {h}×{w}")));
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut y = Vec::with_capacity(c * ho * wo);
    let mut arg = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let base = ch * h * w + 2 * oy * w + 2 * ox;
                let mut best = base;
                for idx in [base + 1, base + w, base + w + 1] {
                    if x.data[idx] > x.data[best] {
                        best = idx;
                    }
                }
                y.push(x.data[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::from_vec(&[c, ho, wo], y)?, arg))
}

pub fn maxpool2_backward<T: Gemm>(dy: &Tensor<T>, argmax: &[usize], x_shape: &[usize]) -> Tensor<T> {
    let mut dx = Tensor::zeros(x_shape);
    for (&g, &i) in dy.data.iter().zip(argmax) {
        dx.data[i] += g;
    }
    dx
}

/// Stacks feature maps of equal extent along the channel axis, in order.
pub fn concat_channels<T: Gemm>(parts: &[&Tensor<T>]) -> Result<Tensor<T>, NeuralError> {
    let (_, h, w) = parts
        .first()
        .ok_or_else(|| mismatch("nothing to concatenate".into()))?
        .chw()?;
    let mut c = 0;
    let mut data = Vec::new();
    for p in parts {
        let (pc, ph, pw) = p.chw()?;
        if (ph, pw) != (h, w) {
            return Err(mismatch(format!("concat of {ph}×{pw} onto {h}×{w}")));
        }
        c += pc;
        data.extend_from_slice(&p.data);
    }
    Tensor::from_vec(&[c, h, w], data)
}

/// Splits a concatenated gradient back into parts of the given channel counts.
pub fn split_channels<T: Gemm>(dy: &Tensor<T>, channels: &[usize]) -> Result<Vec<Tensor<T>>, NeuralError> {
    let (c, h, w) = dy.chw()?;
    if channels.iter().sum::<usize>() != c {
        return Err(mismatch("split channel counts do not add up".into()));
    }
    let mut out = Vec::with_capacity(channels.len());
    let mut at = 0;
    for &pc in channels {
        let n = pc * h * w;
        out.push(Tensor::from_vec(&[pc, h, w], dy.data[at..at + n].to_vec())?);
        at += n;
    }
    Ok(out)
}

/// Per-pixel softmax over the channel axis of K×H×W logits.
pub fn softmax<T: Gemm>(logits: &Tensor<T>) -> Result<Tensor<T>, NeuralError> {
    let (k, h, w) = logits.chw()?;
    let n = h * w;
    let mut p = vec![T::zero(); k * n];
    for i in 0..n {
        let m = (0..k).map(|c| logits.data[c * n + i]).fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for c in 0..k {
            let e = (logits.data[c * n + i] - m).exp();
            p[c * n + i] = e;
            z += e;
        }
        for c in 0..k {
            p[c * n + i] /= z;
        }
    }
    Tensor::from_vec(&[k, h, w], p)
}

/// Class-weighted mean negative log-likelihood of `labels` (class index per
/// pixel) under the softmax of `logits`, normalized by the total weight,
/// with its gradient with respect to the logits.
pub fn softmax_xent<T: Gemm>(
    logits: &Tensor<T>,
    labels: &[u8],
    class_weights: &[T],
) -> Result<(T, Tensor<T>), NeuralError> {
    let (k, h, w) = logits.chw()?;
    let n = h * w;
    if labels.len() != n || class_weights.len() != k {
        return Err(mismatch(format!(
            "{k}×{h}×{w} logits with {} labels and {} weights",
            labels.len(),
            class_weights.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= k) {
        return Err(mismatch(format!("label {bad} out of range for {k} classes")));
    }
    let mut grad = softmax(logits)?;
    let total: T = labels.iter().map(|&l| class_weights[l as usize]).sum();
    if !(total > T::zero()) {
        return Err(mismatch("class weights of the labels sum to zero".into()));
    }
    let mut loss = T::zero();
    for (i, &l) in labels.iter().enumerate() {
        let wl = class_weights[l as usize];
        let p = grad.data[l as usize * n + i];
        // Log-sum-exp form stays finite when p underflows.
        let m = (0..k).map(|c| logits.data[c * n + i]).fold(T::neg_infinity(), T::max);
        let lse = m + (0..k).map(|c| (logits.data[c * n + i] - m).exp()).sum::<T>().ln();
        loss += wl * (lse - logits.data[l as usize * n + i]);
        for c in 0..k {
            let onehot = if c == l as usize { T::one() } else { T::zero() };
            let v = if c == l as usize { p } else { grad.data[c * n + i] };
            grad.data[c * n + i] = wl * (v - onehot) / total;
        }
    }
    Ok((loss / total, grad))
}
