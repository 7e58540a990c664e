//! Batched layer kernels and their hand-derived backward passes.
//!
//! Forward and backward loops over a batch run independent per-image work
//! in parallel; every reduction (weight gradients, batch statistics) is
//! accumulated in a fixed order or merged from a fixed number of chunks,
//! so results do not depend on the worker count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{conv2d_into, matmul_into, ConvDims, Tensor};

/// Fixed chunk count for parallel gradient accumulation. Constant by
/// design: chunk boundaries depend on the batch size only, never on the
/// number of threads.
const GRAD_CHUNKS: usize = 8;

/// Splits `0..n` into at most GRAD_CHUNKS contiguous ranges.
fn chunk_ranges(n: usize) -> Vec<std::ops::Range<usize>> {
    let chunks = GRAD_CHUNKS.min(n.max(1));
    let base = n / chunks;
    let extra = n % chunks;
    let mut ranges = Vec::with_capacity(chunks);
    let mut start = 0;
    for c in 0..chunks {
        let len = base + usize::from(c < extra);
        ranges.push(start..start + len);
        start += len;
    }
    ranges
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

pub(crate) fn conv_forward(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let &[bs, c, h, wd] = x.shape() else {
        return Err(Error::ShapeMismatch(format!(
            "conv wants [B,C,H,W], got {:?}",
            x.shape()
        )));
    };
    let &[f, kc, kh, kw] = w.shape() else {
        return Err(Error::ShapeMismatch("conv kernel shape".into()));
    };
    if kc != c {
        return Err(Error::ShapeMismatch(format!(
            "conv input has {c} channels, kernels expect {kc}"
        )));
    }
    if h + 2 * pad < kh || wd + 2 * pad < kw {
        return Err(Error::ShapeMismatch(format!(
            "conv kernel {kh}x{kw} larger than padded input"
        )));
    }
    let d = ConvDims {
        c,
        h,
        w: wd,
        f,
        kh,
        kw,
        stride,
        pad,
        oh: (h + 2 * pad - kh) / stride + 1,
        ow: (wd + 2 * pad - kw) / stride + 1,
    };
    let mut out = Tensor::zeros(&[bs, f, d.oh, d.ow]);
    let in_sz = c * h * wd;
    let out_sz = f * d.oh * d.ow;
    out.data_mut()
        .par_chunks_mut(out_sz)
        .zip(x.data().par_chunks(in_sz))
        .for_each(|(o, xi)| {
            conv2d_into(xi, w.data(), o, d);
            for fi in 0..f {
                let bias = b.data()[fi];
                for v in &mut o[fi * d.oh * d.ow..(fi + 1) * d.oh * d.ow] {
                    *v += bias;
                }
            }
        });
    Ok(out)
}

/// Returns (dx, dw, db).
pub(crate) fn conv_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    stride: usize,
    pad: usize,
) -> (Tensor, Tensor, Tensor) {
    let &[bs, c, h, wd] = x.shape() else { unreachable!() };
    let &[f, _, kh, kw] = w.shape() else { unreachable!() };
    let &[_, _, oh, ow] = dy.shape() else { unreachable!() };
    let in_sz = c * h * wd;
    let out_sz = f * oh * ow;

    // Input gradients: disjoint per image.
    let mut dx = Tensor::zeros(x.shape());
    dx.data_mut()
        .par_chunks_mut(in_sz)
        .zip(dy.data().par_chunks(out_sz))
        .for_each(|(dxi, dyi)| {
            for fi in 0..f {
                let dy_plane = &dyi[fi * oh * ow..(fi + 1) * oh * ow];
                for ci in 0..c {
                    let dx_plane = &mut dxi[ci * h * wd..(ci + 1) * h * wd];
                    let kbase = ((fi * c + ci) * kh) * kw;
                    for kr in 0..kh {
                        for kc in 0..kw {
                            let kval = w.data()[kbase + kr * kw + kc];
                            if kval == 0.0 {
                                continue;
                            }
                            for orow in 0..oh {
                                let ir = (orow * stride + kr) as isize - pad as isize;
                                if ir < 0 || ir >= h as isize {
                                    continue;
                                }
                                let drow = &dy_plane[orow * ow..(orow + 1) * ow];
                                for (ocol, &g) in drow.iter().enumerate() {
                                    let ic = (ocol * stride + kc) as isize - pad as isize;
                                    if ic < 0 || ic >= wd as isize {
                                        continue;
                                    }
                                    dx_plane[ir as usize * wd + ic as usize] += kval * g;
                                }
                            }
                        }
                    }
                }
            }
        });

    // Weight and bias gradients: chunked partial sums merged in order.
    let ranges = chunk_ranges(bs);
    let partials: Vec<(Vec<f32>, Vec<f32>)> = ranges
        .par_iter()
        .map(|range| {
            let mut dw = vec![0.0f32; w.len()];
            let mut db = vec![0.0f32; f];
            for bi in range.clone() {
                let xi = &x.data()[bi * in_sz..(bi + 1) * in_sz];
                let dyi = &dy.data()[bi * out_sz..(bi + 1) * out_sz];
                for fi in 0..f {
                    let dy_plane = &dyi[fi * oh * ow..(fi + 1) * oh * ow];
                    db[fi] += dy_plane.iter().sum::<f32>();
                    for ci in 0..c {
                        let x_plane = &xi[ci * h * wd..(ci + 1) * h * wd];
                        let kbase = ((fi * c + ci) * kh) * kw;
                        for kr in 0..kh {
                            for kc in 0..kw {
                                let mut acc = 0.0f32;
                                for orow in 0..oh {
                                    let ir = (orow * stride + kr) as isize - pad as isize;
                                    if ir < 0 || ir >= h as isize {
                                        continue;
                                    }
                                    let x_row = &x_plane[ir as usize * wd..];
                                    let drow = &dy_plane[orow * ow..(orow + 1) * ow];
                                    for (ocol, &g) in drow.iter().enumerate() {
                                        let ic = (ocol * stride + kc) as isize - pad as isize;
                                        if ic < 0 || ic >= wd as isize {
                                            continue;
                                        }
                                        acc += x_row[ic as usize] * g;
                                    }
                                }
                                dw[kbase + kr * kw + kc] += acc;
                            }
                        }
                    }
                }
            }
            (dw, db)
        })
        .collect();

    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(&[f]);
    for (pw, pb) in partials {
        for (d, p) in dw.data_mut().iter_mut().zip(&pw) {
            *d += p;
        }
        for (d, p) in db.data_mut().iter_mut().zip(&pb) {
            *d += p;
        }
    }
    (dx, dw, db)
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

/// y[B,out] = x[B,in] . w[in,out] + b
pub(crate) fn linear_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let &[bs, din] = x.shape() else {
        return Err(Error::ShapeMismatch(format!(
            "linear wants [B,D], got {:?}",
            x.shape()
        )));
    };
    let &[win, wout] = w.shape() else {
        return Err(Error::ShapeMismatch("linear weight shape".into()));
    };
    if din != win {
        return Err(Error::ShapeMismatch(format!(
            "linear input dim {din} vs weight {win}"
        )));
    }
    let mut out = Tensor::zeros(&[bs, wout]);
    matmul_into(x.data(), w.data(), out.data_mut(), bs, din, wout);
    for row in out.data_mut().chunks_exact_mut(wout) {
        for (v, &bv) in row.iter_mut().zip(b.data()) {
            *v += bv;
        }
    }
    Ok(out)
}

/// Returns (dx, dw, db) for the linear layer.
pub(crate) fn linear_backward(x: &Tensor, w: &Tensor, dy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let &[bs, din] = x.shape() else { unreachable!() };
    let &[_, dout] = w.shape() else { unreachable!() };
    // dx = dy . w^T
    let mut dx = Tensor::zeros(&[bs, din]);
    for (dxi, dyi) in dx
        .data_mut()
        .chunks_exact_mut(din)
        .zip(dy.data().chunks_exact(dout))
    {
        for (j, dxv) in dxi.iter_mut().enumerate() {
            let wrow = &w.data()[j * dout..(j + 1) * dout];
            let mut acc = 0.0f32;
            for (g, wv) in dyi.iter().zip(wrow) {
                acc += g * wv;
            }
            *dxv = acc;
        }
    }
    // dw = x^T . dy, accumulated over the batch in index order.
    let mut dw = Tensor::zeros(&[din, dout]);
    for (xi, dyi) in x
        .data()
        .chunks_exact(din)
        .zip(dy.data().chunks_exact(dout))
    {
        for (j, &xv) in xi.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let dwrow = &mut dw.data_mut()[j * dout..(j + 1) * dout];
            for (d, &g) in dwrow.iter_mut().zip(dyi) {
                *d += xv * g;
            }
        }
    }
    let mut db = Tensor::zeros(&[dout]);
    for dyi in dy.data().chunks_exact(dout) {
        for (d, &g) in db.data_mut().iter_mut().zip(dyi) {
            *d += g;
        }
    }
    (dx, dw, db)
}

// ---------------------------------------------------------------------------
// ReLU
// ---------------------------------------------------------------------------

pub(crate) fn relu_forward(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for v in out.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    out
}

pub(crate) fn relu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    for (d, &xv) in dx.data_mut().iter_mut().zip(x.data()) {
        if xv <= 0.0 {
            *d = 0.0;
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// Max pooling
// ---------------------------------------------------------------------------

pub(crate) struct PoolCache {
    pub input_shape: Vec<usize>,
    /// Flat input index (within the image) of each output element's max.
    pub argmax: Vec<u32>,
}

pub(crate) fn maxpool_forward(x: &Tensor, k: usize, stride: usize) -> Result<(Tensor, PoolCache)> {
    let &[bs, c, h, w] = x.shape() else {
        return Err(Error::ShapeMismatch(format!(
            "maxpool wants [B,C,H,W], got {:?}",
            x.shape()
        )));
    };
    if h < k || w < k {
        return Err(Error::ShapeMismatch(format!(
            "maxpool window {k} larger than input {h}x{w}"
        )));
    }
    let oh = (h - k) / stride + 1;
    let ow = (w - k) / stride + 1;
    let in_sz = c * h * w;
    let out_sz = c * oh * ow;
    let mut out = Tensor::zeros(&[bs, c, oh, ow]);
    let mut argmax = vec![0u32; bs * out_sz];

    out.data_mut()
        .par_chunks_mut(out_sz)
        .zip(argmax.par_chunks_mut(out_sz))
        .zip(x.data().par_chunks(in_sz))
        .for_each(|((o, am), xi)| {
            for ci in 0..c {
                let plane = &xi[ci * h * w..(ci + 1) * h * w];
                for orow in 0..oh {
                    for ocol in 0..ow {
                        let (r0, c0) = (orow * stride, ocol * stride);
                        let mut best = f32::NEG_INFINITY;
                        let mut best_idx = 0usize;
                        for rr in r0..r0 + k {
                            for cc in c0..c0 + k {
                                let v = plane[rr * w + cc];
                                // Ties keep the first (lowest) index.
                                if v > best {
                                    best = v;
                                    best_idx = rr * w + cc;
                                }
                            }
                        }
                        let oidx = (ci * oh + orow) * ow + ocol;
                        o[oidx] = best;
                        am[oidx] = (ci * h * w + best_idx) as u32;
                    }
                }
            }
        });
    Ok((
        out,
        PoolCache {
            input_shape: x.shape().to_vec(),
            argmax,
        },
    ))
}

pub(crate) fn maxpool_backward(cache: &PoolCache, dy: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(&cache.input_shape);
    let bs = cache.input_shape[0];
    let in_sz: usize = cache.input_shape[1..].iter().product();
    let out_sz = dy.len() / bs;
    dx.data_mut()
        .par_chunks_mut(in_sz)
        .zip(dy.data().par_chunks(out_sz))
        .zip(cache.argmax.par_chunks(out_sz))
        .for_each(|((dxi, dyi), ami)| {
            for (&g, &idx) in dyi.iter().zip(ami) {
                dxi[idx as usize] += g;
            }
        });
    dx
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

pub(crate) struct BnCache {
    /// Normalized input (before scale and shift).
    pub xhat: Tensor,
    /// 1 / sqrt(var + eps) per channel, from the statistics the forward used.
    pub inv_std: Vec<f32>,
    /// Whether the forward used batch statistics (train) or running (eval).
    pub batch_stats: bool,
}

/// Channel layout: [B,C,H,W] normalizes per C over (B,H,W); [B,D]
/// normalizes per feature over B.
fn bn_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [b, c, h, w] => Ok((b, c, h * w)),
        [b, d] => Ok((b, d, 1)),
        _ => Err(Error::ShapeMismatch(format!(
            "batchnorm wants [B,C,H,W] or [B,D], got {shape:?}"
        ))),
    }
}

pub(crate) struct BnParamsRef<'a> {
    pub gamma: &'a [f32],
    pub beta: &'a [f32],
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn bn_forward(
    x: &Tensor,
    params: BnParamsRef<'_>,
    running_mean: &mut [f32],
    running_var: &mut [f32],
    eps: f32,
    momentum: f32,
    train: bool,
) -> Result<(Tensor, BnCache)> {
    let (b, c, l) = bn_dims(x.shape())?;
    if params.gamma.len() != c {
        return Err(Error::ShapeMismatch(format!(
            "batchnorm has {} channels, input {c}",
            params.gamma.len()
        )));
    }
    if train && b < 2 {
        return Err(Error::InvalidArg(
            "batchnorm in train mode needs batch size >= 2".into(),
        ));
    }
    let m = (b * l) as f64;
    let (mean, var): (Vec<f32>, Vec<f32>) = if train {
        let mut mean = vec![0.0f64; c];
        let mut var = vec![0.0f64; c];
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * l;
                for &v in &x.data()[off..off + l] {
                    mean[ci] += v as f64;
                }
            }
        }
        for v in &mut mean {
            *v /= m;
        }
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * l;
                for &v in &x.data()[off..off + l] {
                    let d = v as f64 - mean[ci];
                    var[ci] += d * d;
                }
            }
        }
        for v in &mut var {
            *v /= m; // biased variance
        }
        for ci in 0..c {
            running_mean[ci] =
                (1.0 - momentum) * running_mean[ci] + momentum * mean[ci] as f32;
            running_var[ci] = (1.0 - momentum) * running_var[ci] + momentum * var[ci] as f32;
        }
        (
            mean.iter().map(|&v| v as f32).collect(),
            var.iter().map(|&v| v as f32).collect(),
        )
    } else {
        (running_mean.to_vec(), running_var.to_vec())
    };

    let inv_std: Vec<f32> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = Tensor::zeros(x.shape());
    let mut out = Tensor::zeros(x.shape());
    for bi in 0..b {
        for ci in 0..c {
            let off = (bi * c + ci) * l;
            let (mu, is, g, be) = (mean[ci], inv_std[ci], params.gamma[ci], params.beta[ci]);
            for i in off..off + l {
                let xh = (x.data()[i] - mu) * is;
                xhat.data_mut()[i] = xh;
                out.data_mut()[i] = g * xh + be;
            }
        }
    }
    Ok((
        out,
        BnCache {
            xhat,
            inv_std,
            batch_stats: train,
        },
    ))
}

/// Returns (dx, dgamma, dbeta). With batch statistics the gradient
/// accounts for the mean and variance depending on x:
/// dx = gamma * inv_std / m * (m*dy - sum(dy) - xhat * sum(dy*xhat)).
/// With running statistics (eval) the moments are constants:
/// dx = dy * gamma * inv_std.
pub(crate) fn bn_backward(
    cache: &BnCache,
    gamma: &[f32],
    dy: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (b, c, l) = bn_dims(dy.shape()).expect("cache/dy shape");
    let m = (b * l) as f64;
    let mut dgamma = vec![0.0f64; c];
    let mut dbeta = vec![0.0f64; c];
    for bi in 0..b {
        for ci in 0..c {
            let off = (bi * c + ci) * l;
            for i in off..off + l {
                let g = dy.data()[i] as f64;
                dgamma[ci] += g * cache.xhat.data()[i] as f64;
                dbeta[ci] += g;
            }
        }
    }
    let mut dx = Tensor::zeros(dy.shape());
    if cache.batch_stats {
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * l;
                let scale = gamma[ci] as f64 * cache.inv_std[ci] as f64 / m;
                for i in off..off + l {
                    let term = m * dy.data()[i] as f64
                        - dbeta[ci]
                        - cache.xhat.data()[i] as f64 * dgamma[ci];
                    dx.data_mut()[i] = (scale * term) as f32;
                }
            }
        }
    } else {
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * l;
                let scale = gamma[ci] * cache.inv_std[ci];
                for i in off..off + l {
                    dx.data_mut()[i] = dy.data()[i] * scale;
                }
            }
        }
    }
    let dgamma = Tensor::from_vec(&[c], dgamma.iter().map(|&v| v as f32).collect())
        .expect("finite dgamma");
    let dbeta = Tensor::from_vec(&[c], dbeta.iter().map(|&v| v as f32).collect())
        .expect("finite dbeta");
    (dx, dgamma, dbeta)
}

// ---------------------------------------------------------------------------
// Dropout
// ---------------------------------------------------------------------------

/// Inverted dropout: kept units scale by 1/(1-p) so eval needs no rescale.
pub(crate) fn dropout_forward(x: &Tensor, p: f32, rng: &mut SeededRng) -> (Tensor, Vec<f32>) {
    if p <= 0.0 {
        return (x.clone(), Vec::new());
    }
    let keep = 1.0 - p;
    let scale = 1.0 / keep;
    let mut out = x.clone();
    let mut mask = vec![0.0f32; x.len()];
    for (v, m) in out.data_mut().iter_mut().zip(mask.iter_mut()) {
        if rng.next_f32() < keep {
            *m = scale;
            *v *= scale;
        } else {
            *m = 0.0;
            *v = 0.0;
        }
    }
    (out, mask)
}

pub(crate) fn dropout_backward(mask: &[f32], dy: &Tensor) -> Tensor {
    if mask.is_empty() {
        return dy.clone();
    }
    let mut dx = dy.clone();
    for (d, &m) in dx.data_mut().iter_mut().zip(mask) {
        *d *= m;
    }
    dx
}
