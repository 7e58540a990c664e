//! Input transformations: the fixed Sobel-based color removal, training-time
//! augmentation (random resized crop, horizontal flip), and the
//! evaluation-time central crop.

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{conv2d, Tensor};

const SOBEL_X: [f32; 9] = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
const SOBEL_Y: [f32; 9] = [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0];

/// Replaces color with a fixed two-channel edge representation: grayscale
/// (unweighted channel mean) convolved with the Sobel x and y kernels,
/// stride 1, zero padding 1. No extra contrast normalization is applied.
pub fn sobel_transform(image: &Tensor) -> Result<Tensor> {
    let &[c, h, w] = image.shape() else {
        return Err(Error::ShapeMismatch(format!(
            "sobel wants [C,H,W], got {:?}",
            image.shape()
        )));
    };
    if c != 1 && c != 3 {
        return Err(Error::InvalidArg(format!(
            "sobel supports 1 or 3 channels, got {c}"
        )));
    }
    let mut gray = vec![0.0f32; h * w];
    for ch in 0..c {
        let plane = &image.data()[ch * h * w..(ch + 1) * h * w];
        for (g, &v) in gray.iter_mut().zip(plane) {
            *g += v;
        }
    }
    if c > 1 {
        for g in &mut gray {
            *g /= c as f32;
        }
    }
    let gray = Tensor::from_vec(&[1, h, w], gray)?;
    let mut kernels = Vec::with_capacity(18);
    kernels.extend_from_slice(&SOBEL_X);
    kernels.extend_from_slice(&SOBEL_Y);
    let kernels = Tensor::from_vec(&[2, 1, 3, 3], kernels)?;
    conv2d(&gray, &kernels, 1, 1)
}

/// Bilinear resize with half-pixel centers: source coordinate of output
/// pixel i is (i + 0.5) * in/out - 0.5, clamped to the image.
pub fn bilinear_resize(image: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let &[c, h, w] = image.shape() else {
        return Err(Error::ShapeMismatch(format!(
            "resize wants [C,H,W], got {:?}",
            image.shape()
        )));
    };
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArg("resize output dims must be positive".into()));
    }
    let mut out = Tensor::zeros(&[c, out_h, out_w]);
    let sy = h as f32 / out_h as f32;
    let sx = w as f32 / out_w as f32;
    for oy in 0..out_h {
        let fy = ((oy as f32 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f32);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f32;
        for ox in 0..out_w {
            let fx = ((ox as f32 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f32);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f32;
            for ch in 0..c {
                let plane = &image.data()[ch * h * w..];
                let v00 = plane[y0 * w + x0];
                let v01 = plane[y0 * w + x1];
                let v10 = plane[y1 * w + x0];
                let v11 = plane[y1 * w + x1];
                let top = v00 + (v01 - v00) * wx;
                let bot = v10 + (v11 - v10) * wx;
                out.data_mut()[(ch * out_h + oy) * out_w + ox] = top + (bot - top) * wy;
            }
        }
    }
    Ok(out)
}

/// Crops a window of random area fraction (within `scale`) and aspect ratio
/// (within `ratio`), then bilinearly resizes it to `out`. After 10 failed
/// sampling attempts it falls back to the largest centered crop whose
/// aspect ratio is clamped into bounds. Output dims larger than the crop
/// are handled by the resize (upscaling), never an error.
pub fn random_resized_crop(
    image: &Tensor,
    rng: &mut SeededRng,
    out: (usize, usize),
    scale: (f64, f64),
    ratio: (f64, f64),
) -> Result<Tensor> {
    let &[_, h, w] = image.shape() else {
        return Err(Error::ShapeMismatch(format!(
            "crop wants [C,H,W], got {:?}",
            image.shape()
        )));
    };
    if !(scale.0 > 0.0 && scale.0 <= scale.1 && scale.1 <= 1.0) {
        return Err(Error::InvalidArg(format!("bad scale range {scale:?}")));
    }
    if !(ratio.0 > 0.0 && ratio.0 <= ratio.1) {
        return Err(Error::InvalidArg(format!("bad ratio range {ratio:?}")));
    }
    let area = (h * w) as f64;
    let mut chosen: Option<(usize, usize, usize, usize)> = None; // top, left, ch, cw
    for _ in 0..10 {
        let target_area = area * rng.uniform(scale.0, scale.1);
        let aspect = (rng.uniform(ratio.0.ln(), ratio.1.ln())).exp();
        let cw = (target_area * aspect).sqrt().round() as usize;
        let ch = (target_area / aspect).sqrt().round() as usize;
        if cw >= 1 && ch >= 1 && cw <= w && ch <= h {
            let top = rng.next_below((h - ch + 1) as u64) as usize;
            let left = rng.next_below((w - cw + 1) as u64) as usize;
            chosen = Some((top, left, ch, cw));
            break;
        }
    }
    let (top, left, ch, cw) = chosen.unwrap_or_else(|| {
        // Largest centered crop with aspect clamped into bounds.
        let in_ratio = w as f64 / h as f64;
        let (ch, cw) = if in_ratio < ratio.0 {
            let cw = w;
            (((cw as f64 / ratio.0).round() as usize).clamp(1, h), cw)
        } else if in_ratio > ratio.1 {
            let ch = h;
            (ch, ((ch as f64 * ratio.1).round() as usize).clamp(1, w))
        } else {
            (h, w)
        };
        ((h - ch) / 2, (w - cw) / 2, ch, cw)
    });
    let cropped = crop(image, top, left, ch, cw)?;
    if (ch, cw) == out {
        Ok(cropped)
    } else {
        bilinear_resize(&cropped, out.0, out.1)
    }
}

fn crop(image: &Tensor, top: usize, left: usize, ch: usize, cw: usize) -> Result<Tensor> {
    let &[c, h, w] = image.shape() else {
        return Err(Error::ShapeMismatch("crop wants [C,H,W]".into()));
    };
    if top + ch > h || left + cw > w {
        return Err(Error::InvalidArg(format!(
            "crop {ch}x{cw}@({top},{left}) exceeds image {h}x{w}"
        )));
    }
    let mut out = Tensor::zeros(&[c, ch, cw]);
    for chn in 0..c {
        for y in 0..ch {
            let src = &image.data()[(chn * h + top + y) * w + left..][..cw];
            out.data_mut()[(chn * ch + y) * cw..][..cw].copy_from_slice(src);
        }
    }
    Ok(out)
}

/// With probability `p`, reverses the width axis.
pub fn horizontal_flip(image: &Tensor, rng: &mut SeededRng, p: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArg(format!("flip probability {p} out of [0,1]")));
    }
    if (rng.next_f64() as f64) < p {
        Ok(flip_width(image))
    } else {
        Ok(image.clone())
    }
}

pub(crate) fn flip_width(image: &Tensor) -> Tensor {
    let &[c, h, w] = image.shape() else {
        unreachable!("flip_width expects [C,H,W]")
    };
    let mut out = image.clone();
    for chn in 0..c {
        for y in 0..h {
            let row = &mut out.data_mut()[(chn * h + y) * w..][..w];
            row.reverse();
        }
    }
    out
}

/// Deterministic centered crop. On odd remainders the extra pixel goes to
/// the bottom/right (offsets floor the halves).
pub fn central_crop(image: &Tensor, out: (usize, usize)) -> Result<Tensor> {
    let &[_, h, w] = image.shape() else {
        return Err(Error::ShapeMismatch(format!(
            "central_crop wants [C,H,W], got {:?}",
            image.shape()
        )));
    };
    let (oh, ow) = out;
    if oh > h || ow > w {
        return Err(Error::InvalidArg(format!(
            "central crop {oh}x{ow} larger than image {h}x{w}"
        )));
    }
    crop(image, (h - oh) / 2, (w - ow) / 2, oh, ow)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn sobel_constant_is_zero() {
        let x = Tensor::from_vec(&[1, 4, 4], vec![0.7; 16]).unwrap();
        let y = sobel_transform(&x).unwrap();
        assert_eq!(y.shape(), &[2, 4, 4]);
        // Interior only: zero padding makes borders nonzero for constants.
        for ch in 0..2 {
            for r in 1..3 {
                for c in 1..3 {
                    assert!(y.data()[(ch * 4 + r) * 4 + c].abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn sobel_vertical_edge() {
        // Columns 0,0,1 in every row: x-gradient 4*step interior, y zero.
        let step = 0.5f32;
        let mut data = vec![0.0f32; 9];
        for r in 0..3 {
            data[r * 3 + 2] = step;
        }
        let x = t(&[1, 3, 3], &data);
        let y = sobel_transform(&x).unwrap();
        let gx = y.data()[1 * 3 + 1]; // channel 0, center
        let gy = y.data()[9 + 1 * 3 + 1]; // channel 1, center
        assert_eq!(gx, 4.0 * step);
        assert_eq!(gy, 0.0);
    }

    #[test]
    fn sobel_rgb_equals_gray() {
        let gray = t(&[1, 3, 3], &[0.1, 0.5, 0.9, 0.2, 0.4, 0.8, 0.3, 0.6, 0.7]);
        let mut rgb_data = Vec::new();
        for _ in 0..3 {
            rgb_data.extend_from_slice(gray.data());
        }
        let rgb = t(&[3, 3, 3], &rgb_data);
        let a = sobel_transform(&gray).unwrap();
        let b = sobel_transform(&rgb).unwrap();
        for (&u, &v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-6);
        }
    }

    #[test]
    fn sobel_linearity() {
        let a = t(&[1, 3, 3], &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]);
        let b = t(&[1, 3, 3], &[0.9, 0.1, 0.4, 0.2, 0.8, 0.3, 0.5, 0.7, 0.6]);
        let (alpha, beta) = (0.3f32, -1.2f32);
        let mixed_data: Vec<f32> = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&u, &v)| alpha * u + beta * v)
            .collect();
        let mixed = t(&[1, 3, 3], &mixed_data);
        let ta = sobel_transform(&a).unwrap();
        let tb = sobel_transform(&b).unwrap();
        let tm = sobel_transform(&mixed).unwrap();
        for i in 0..tm.len() {
            let want = alpha * ta.data()[i] + beta * tb.data()[i];
            assert!((tm.data()[i] - want).abs() < 1e-5);
        }
    }

    #[test]
    fn sobel_rejects_two_channels() {
        let x = Tensor::zeros(&[2, 3, 3]);
        assert!(sobel_transform(&x).is_err());
    }

    #[test]
    fn rrc_full_frame_is_identity() {
        let mut rng = SeededRng::new(1);
        let x = t(&[1, 4, 4], &(0..16).map(|i| i as f32 / 16.0).collect::<Vec<_>>());
        let y = random_resized_crop(&x, &mut rng, (4, 4), (1.0, 1.0), (1.0, 1.0)).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn rrc_constant_stays_constant() {
        let mut rng = SeededRng::new(2);
        let x = Tensor::from_vec(&[1, 8, 8], vec![0.25; 64]).unwrap();
        let y = random_resized_crop(&x, &mut rng, (5, 5), (0.3, 1.0), (0.75, 1.333)).unwrap();
        assert_eq!(y.shape(), &[1, 5, 5]);
        for &v in y.data() {
            assert!((v - 0.25).abs() < 1e-6);
        }
    }

    #[test]
    fn rrc_fixed_seed_deterministic() {
        let x = t(
            &[1, 6, 6],
            &(0..36).map(|i| (i as f32).sin()).collect::<Vec<_>>(),
        );
        let mut r1 = SeededRng::new(77);
        let mut r2 = SeededRng::new(77);
        let a = random_resized_crop(&x, &mut r1, (4, 4), (0.4, 1.0), (0.8, 1.25)).unwrap();
        let b = random_resized_crop(&x, &mut r2, (4, 4), (0.4, 1.0), (0.8, 1.25)).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn rrc_stays_in_value_range() {
        let mut rng = SeededRng::new(3);
        let data: Vec<f32> = (0..100).map(|i| (i % 7) as f32 / 6.0).collect();
        let x = t(&[1, 10, 10], &data);
        for _ in 0..20 {
            let y = random_resized_crop(&x, &mut rng, (6, 6), (0.2, 1.0), (0.5, 2.0)).unwrap();
            for &v in y.data() {
                assert!((0.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn flip_probabilities() {
        let x = t(&[1, 1, 2], &[1.0, 2.0]);
        let mut rng = SeededRng::new(5);
        let same = horizontal_flip(&x, &mut rng, 0.0).unwrap();
        assert_eq!(same.data(), &[1.0, 2.0]);
        let flipped = horizontal_flip(&x, &mut rng, 1.0).unwrap();
        assert_eq!(flipped.data(), &[2.0, 1.0]);
        let twice = horizontal_flip(&flipped, &mut rng, 1.0).unwrap();
        assert_eq!(twice.data(), x.data());
    }

    #[test]
    fn central_crop_cases() {
        let x = t(&[1, 4, 4], &(0..16).map(|i| i as f32).collect::<Vec<_>>());
        let same = central_crop(&x, (4, 4)).unwrap();
        assert_eq!(same.data(), x.data());
        let mid = central_crop(&x, (2, 2)).unwrap();
        // Rows/cols {1,2}.
        assert_eq!(mid.data(), &[5.0, 6.0, 9.0, 10.0]);
        assert!(central_crop(&x, (5, 5)).is_err());
    }

    #[test]
    fn central_crop_odd_remainder_goes_top_left_offset() {
        // 5 -> 2: offset floor(3/2) = 1, so rows 1..3, extra row left at bottom.
        let x = t(&[1, 5, 1], &[0.0, 1.0, 2.0, 3.0, 4.0]);
        let y = central_crop(&x, (2, 1)).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0]);
    }

    #[test]
    fn resize_identity_when_same_dims() {
        let x = t(&[2, 3, 3], &(0..18).map(|i| i as f32 * 0.1).collect::<Vec<_>>());
        let y = bilinear_resize(&x, 3, 3).unwrap();
        assert_eq!(y.data(), x.data());
    }
}
