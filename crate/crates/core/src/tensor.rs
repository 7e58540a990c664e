//! Dense row-major f32 tensors and the two heavy kernels (matmul, 2-D
//! convolution), plus a central-difference gradient oracle.
//!
//! All public operations check their outputs for NaN/Inf and fail rather
//! than propagate them. Accumulation orders are fixed so results do not
//! depend on scheduling.

use crate::error::{Error, Result};

/// Dense tensor: a shape and a flat row-major f32 buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Zero-filled tensor of the given shape.
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    /// Builds a tensor from a flat buffer; the buffer length must equal the
    /// product of the dims and every entry must be finite.
    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "buffer of {} values for shape {:?} (wants {})",
                data.len(),
                shape,
                n
            )));
        }
        let t = Self {
            shape: shape.to_vec(),
            data,
        };
        t.check_finite("from_vec")?;
        Ok(t)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Reinterprets the buffer under a new shape of equal volume.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::ShapeMismatch(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Errors if any entry is NaN or infinite.
    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(context.to_string()))
        }
    }

    /// Fills the tensor with independent draws from N(0, std^2).
    pub fn fill_normal(&mut self, std: f32, rng: &mut crate::rng::SeededRng) {
        for v in &mut self.data {
            *v = (rng.normal() as f32) * std;
        }
    }
}

/// Matrix product of `a` [m,k] and `b` [k,n]. The inner accumulation runs
/// in ascending index order, so the result is reproducible byte for byte.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (&[m, ka], &[kb, n]) = (a.shape(), b.shape()) else {
        return Err(Error::ShapeMismatch(format!(
            "matmul wants two matrices, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    };
    if ka != kb {
        return Err(Error::ShapeMismatch(format!(
            "matmul inner dims disagree: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = Tensor::zeros(&[m, n]);
    matmul_into(a.data(), b.data(), out.data_mut(), m, ka, n);
    out.check_finite("matmul")?;
    Ok(out)
}

/// Inner matmul kernel on raw buffers: c[m,n] = a[m,k] * b[k,n].
/// Written i-k-j so the innermost loop streams both b and c rows; this is
/// the hot path for the linear layers.
pub(crate) fn matmul_into(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for row in c.iter_mut() {
        *row = 0.0;
    }
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for t in 0..k {
            let aval = a[i * k + t];
            if aval == 0.0 {
                continue;
            }
            let b_row = &b[t * n..(t + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += aval * bv;
            }
        }
    }
}

/// Output spatial extent of a convolution: floor((in + 2*pad - k)/stride) + 1.
/// Non-divisible extents are floored, never an error.
pub fn conv_out_extent(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

/// 2-D cross-correlation (the kernel is not flipped) of a [C,H,W] input
/// with [F,C,kh,kw] kernels, zero padding.
pub fn conv2d(input: &Tensor, kernels: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (&[c, h, w], &[f, kc, kh, kw]) = (input.shape(), kernels.shape()) else {
        return Err(Error::ShapeMismatch(format!(
            "conv2d wants [C,H,W] input and [F,C,kh,kw] kernels, got {:?} and {:?}",
            input.shape(),
            kernels.shape()
        )));
    };
    if kc != c {
        return Err(Error::ShapeMismatch(format!(
            "conv2d channel mismatch: input has {c}, kernels expect {kc}"
        )));
    }
    if stride < 1 {
        return Err(Error::InvalidArg("conv2d stride must be >= 1".into()));
    }
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(Error::ShapeMismatch(format!(
            "conv2d kernel {kh}x{kw} larger than padded input {}x{}",
            h + 2 * pad,
            w + 2 * pad
        )));
    }
    let oh = conv_out_extent(h, kh, stride, pad);
    let ow = conv_out_extent(w, kw, stride, pad);
    let mut out = Tensor::zeros(&[f, oh, ow]);
    conv2d_into(
        input.data(),
        kernels.data(),
        out.data_mut(),
        ConvDims {
            c,
            h,
            w,
            f,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
        },
    );
    out.check_finite("conv2d")?;
    Ok(out)
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvDims {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

/// Inner convolution kernel. Loop order is filter, channel, kernel row,
/// kernel column, output row, output column; the innermost loop walks a
/// contiguous input row so it vectorizes.
pub(crate) fn conv2d_into(input: &[f32], kernels: &[f32], out: &mut [f32], d: ConvDims) {
    for v in out.iter_mut() {
        *v = 0.0;
    }
    for fi in 0..d.f {
        let out_plane = &mut out[fi * d.oh * d.ow..(fi + 1) * d.oh * d.ow];
        for ci in 0..d.c {
            let in_plane = &input[ci * d.h * d.w..(ci + 1) * d.h * d.w];
            let kbase = ((fi * d.c + ci) * d.kh) * d.kw;
            for kr in 0..d.kh {
                for kc in 0..d.kw {
                    let kval = kernels[kbase + kr * d.kw + kc];
                    if kval == 0.0 {
                        continue;
                    }
                    accumulate_shifted(in_plane, out_plane, kval, kr, kc, d);
                }
            }
        }
    }
}

/// Adds kval * input[or*stride + kr - pad, oc*stride + kc - pad] to every
/// output position (or, oc) for which the source index is in bounds.
#[inline]
fn accumulate_shifted(in_plane: &[f32], out_plane: &mut [f32], kval: f32, kr: usize, kc: usize, d: ConvDims) {
    for orow in 0..d.oh {
        let ir = (orow * d.stride + kr) as isize - d.pad as isize;
        if ir < 0 || ir >= d.h as isize {
            continue;
        }
        let in_row = &in_plane[ir as usize * d.w..(ir as usize + 1) * d.w];
        let out_row = &mut out_plane[orow * d.ow..(orow + 1) * d.ow];
        // Valid output columns: 0 <= oc*stride + kc - pad < w.
        let ic_off = kc as isize - d.pad as isize;
        let oc_lo = if ic_off >= 0 {
            0
        } else {
            ((-ic_off) as usize).div_ceil(d.stride)
        };
        let oc_hi_excl = {
            // oc*stride + ic_off <= w-1
            let max_num = d.w as isize - 1 - ic_off;
            if max_num < 0 {
                0
            } else {
                (max_num as usize / d.stride + 1).min(d.ow)
            }
        };
        if d.stride == 1 {
            let src = &in_row[(oc_lo as isize + ic_off) as usize..];
            for (ov, iv) in out_row[oc_lo..oc_hi_excl].iter_mut().zip(src) {
                *ov += kval * iv;
            }
        } else {
            for oc in oc_lo..oc_hi_excl {
                let ic = (oc * d.stride) as isize + ic_off;
                out_row[oc] += kval * in_row[ic as usize];
            }
        }
    }
}

/// Central-difference gradient of a scalar function at `x`:
/// (f(x + eps*e_i) - f(x - eps*e_i)) / (2*eps) per coordinate.
///
/// This is the independent oracle used to check hand-derived backward
/// passes; it only evaluates `f`, never any analytic gradient.
pub fn finite_diff_grad<F>(f: F, x: &Tensor, eps: f32) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<f32>,
{
    if eps <= 0.0 {
        return Err(Error::InvalidArg("finite_diff_grad eps must be > 0".into()));
    }
    let mut grad = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let fp = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let fm = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite("finite_diff_grad function value".into()));
        }
        grad.data_mut()[i] = ((fp as f64 - fm as f64) / (2.0 * eps as f64)) as f32;
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let i2 = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let b = t(&[2, 2], &[3.0, -1.0, 2.5, 7.0]);
        assert_eq!(matmul(&i2, &b).unwrap(), b);
    }

    #[test]
    fn matmul_hand_case() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_zero() {
        let a = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let z = Tensor::zeros(&[3, 2]);
        let c = matmul(&a, &z).unwrap();
        assert!(c.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = t(&[2, 3], &[0.0; 6]);
        let b = t(&[2, 2], &[0.0; 4]);
        assert!(matches!(matmul(&a, &b), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn conv_identity_kernel() {
        let mut rng = SeededRng::new(1);
        let mut x = Tensor::zeros(&[1, 4, 5]);
        x.fill_normal(1.0, &mut rng);
        let k = t(&[1, 1, 1, 1], &[1.0]);
        let y = conv2d(&x, &k, 1, 0).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv_sobel_step_edge() {
        // Rows of [0,0,1]; Sobel-x picks up the vertical edge with weight 4.
        let x = t(&[1, 3, 3], &[0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
        let k = t(
            &[1, 1, 3, 3],
            &[-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0],
        );
        let y = conv2d(&x, &k, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.data()[0], 4.0);
    }

    #[test]
    fn conv_zero_input() {
        let x = Tensor::zeros(&[2, 5, 5]);
        let mut k = Tensor::zeros(&[3, 2, 3, 3]);
        let mut rng = SeededRng::new(2);
        k.fill_normal(1.0, &mut rng);
        let y = conv2d(&x, &k, 1, 1).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_strided_extent_floors() {
        // (5 + 0 - 2)/2 + 1 = 2 (floored), not an error.
        let x = Tensor::zeros(&[1, 5, 5]);
        let k = Tensor::zeros(&[1, 1, 2, 2]);
        let y = conv2d(&x, &k, 2, 0).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
    }

    #[test]
    fn conv_matches_naive_reference() {
        // Independent naive quadruple-loop reference on a random case.
        let mut rng = SeededRng::new(42);
        let (c, h, w, f, kh, kw, stride, pad) = (3, 7, 6, 4, 3, 2, 2, 1);
        let mut x = Tensor::zeros(&[c, h, w]);
        x.fill_normal(1.0, &mut rng);
        let mut k = Tensor::zeros(&[f, c, kh, kw]);
        k.fill_normal(1.0, &mut rng);
        let y = conv2d(&x, &k, stride, pad).unwrap();

        let oh = conv_out_extent(h, kh, stride, pad);
        let ow = conv_out_extent(w, kw, stride, pad);
        for fi in 0..f {
            for orow in 0..oh {
                for ocol in 0..ow {
                    let mut acc = 0.0f64;
                    for ci in 0..c {
                        for kr in 0..kh {
                            for kc in 0..kw {
                                let ir = (orow * stride + kr) as isize - pad as isize;
                                let ic = (ocol * stride + kc) as isize - pad as isize;
                                if ir >= 0 && ir < h as isize && ic >= 0 && ic < w as isize {
                                    let iv = x.data()[(ci * h + ir as usize) * w + ic as usize];
                                    let kv = k.data()[((fi * c + ci) * kh + kr) * kw + kc];
                                    acc += (iv * kv) as f64;
                                }
                            }
                        }
                    }
                    let got = y.data()[(fi * oh + orow) * ow + ocol];
                    assert_relative_eq!(got, acc as f32, epsilon = 1e-4, max_relative = 1e-4);
                }
            }
        }
    }

    #[test]
    fn finite_diff_square() {
        let x = t(&[1], &[3.0]);
        let g = finite_diff_grad(|v| Ok(v.data()[0] * v.data()[0]), &x, 1e-3).unwrap();
        assert_relative_eq!(g.data()[0], 6.0, max_relative = 1e-3);
    }

    #[test]
    fn finite_diff_sum_is_ones() {
        let x = t(&[2, 3], &[0.5, -1.0, 2.0, 0.0, 3.0, -0.25]);
        let g = finite_diff_grad(|v| Ok(v.data().iter().sum()), &x, 1e-2).unwrap();
        for &v in g.data() {
            assert_relative_eq!(v, 1.0, epsilon = 1e-3);
        }
    }

    #[test]
    fn from_vec_rejects_nan() {
        assert!(matches!(
            Tensor::from_vec(&[2], vec![1.0, f32::NAN]),
            Err(Error::NonFinite(_))
        ));
    }

    proptest! {
        // Integer-valued entries keep every product exact in f32, so
        // associativity holds exactly.
        #[test]
        fn matmul_associative_on_integers(
            m in 1usize..4, k in 1usize..4, n in 1usize..4, p in 1usize..4,
            seed in 0u64..1000,
        ) {
            let mut rng = SeededRng::new(seed);
            let mut mk_int = |rows: usize, cols: usize| {
                let data: Vec<f32> = (0..rows * cols)
                    .map(|_| rng.next_below(7) as f32 - 3.0)
                    .collect();
                Tensor::from_vec(&[rows, cols], data).unwrap()
            };
            let a = mk_int(m, k);
            let b = mk_int(k, n);
            let c = mk_int(n, p);
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            prop_assert_eq!(left.data(), right.data());
        }

        #[test]
        fn conv_same_padding_preserves_dims(
            h in 3usize..9, w in 3usize..9, ksz in prop::sample::select(vec![1usize, 3, 5]),
        ) {
            prop_assume!(ksz <= h && ksz <= w);
            let x = Tensor::zeros(&[1, h, w]);
            let k = Tensor::zeros(&[2, 1, ksz, ksz]);
            let y = conv2d(&x, &k, 1, (ksz - 1) / 2).unwrap();
            prop_assert_eq!(y.shape(), &[2, h, w]);
        }
    }
}
