//! Deterministic synthetic datasets for desk-scale runs and tests: a
//! ten-class digits-style image set, a two-class blob image set, and
//! Gaussian blobs in feature space.

use crate::dataio::Dataset;
use crate::error::Result;
use crate::featpipe::FeatureMatrix;
use crate::rng::SeededRng;
use crate::tensor::Tensor;

const IMG: usize = 28;

type Point = (f32, f32);

/// Polyline strokes in a unit box, y pointing down.
fn glyph_strokes(class: usize) -> Vec<Vec<Point>> {
    fn arc(cx: f32, cy: f32, rx: f32, ry: f32, a0: f32, a1: f32, n: usize) -> Vec<Point> {
        (0..=n)
            .map(|i| {
                let t = a0 + (a1 - a0) * i as f32 / n as f32;
                (cx + rx * t.cos(), cy + ry * t.sin())
            })
            .collect()
    }
    let pi = std::f32::consts::PI;
    match class {
        0 => vec![arc(0.5, 0.5, 0.30, 0.40, 0.0, 2.0 * pi, 14)],
        1 => vec![vec![(0.32, 0.30), (0.52, 0.10), (0.52, 0.90)]],
        2 => vec![{
            let mut p = arc(0.5, 0.30, 0.28, 0.22, -pi, 0.0, 8);
            p.extend([(0.24, 0.88), (0.80, 0.88)]);
            p
        }],
        3 => vec![{
            let mut p = arc(0.45, 0.28, 0.26, 0.18, -0.8 * pi, 0.45 * pi, 8);
            p.extend(arc(0.45, 0.68, 0.30, 0.22, -0.55 * pi, 0.85 * pi, 9));
            p
        }],
        4 => vec![
            vec![(0.62, 0.08), (0.18, 0.62), (0.85, 0.62)],
            vec![(0.62, 0.08), (0.62, 0.92)],
        ],
        5 => vec![{
            let mut p = vec![(0.78, 0.10), (0.28, 0.10), (0.26, 0.45)];
            p.extend(arc(0.48, 0.66, 0.26, 0.24, -0.6 * pi, 0.75 * pi, 9));
            p
        }],
        6 => vec![{
            let mut p = vec![(0.68, 0.08)];
            p.extend(arc(0.46, 0.64, 0.24, 0.26, -2.4 * pi, -0.4 * pi, 12));
            p
        }],
        7 => vec![vec![(0.18, 0.10), (0.82, 0.10), (0.38, 0.92)]],
        8 => vec![
            arc(0.5, 0.30, 0.22, 0.20, 0.0, 2.0 * pi, 12),
            arc(0.5, 0.71, 0.26, 0.22, 0.0, 2.0 * pi, 12),
        ],
        _ => vec![{
            let mut p = arc(0.52, 0.32, 0.24, 0.23, 0.35 * pi, 2.35 * pi, 12);
            p.extend([(0.74, 0.40), (0.60, 0.92)]);
            p
        }],
    }
}

fn dist_to_segment(p: Point, a: Point, b: Point) -> f32 {
    let (px, py) = p;
    let (ax, ay) = a;
    let (bx, by) = b;
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let t = if len2 <= 1e-12 {
        0.0
    } else {
        (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (ax + t * dx, ay + t * dy);
    ((px - cx) * (px - cx) + (py - cy) * (py - cy)).sqrt()
}

/// Renders one jittered glyph: random rotation, scale, shear, translation,
/// stroke thickness, brightness, plus pixel noise.
fn render_digit(class: usize, rng: &mut SeededRng) -> Tensor {
    let rot = rng.uniform(-0.40, 0.40) as f32;
    let scale = rng.uniform(0.62, 1.05) as f32 * 19.0;
    let shear = rng.uniform(-0.25, 0.25) as f32;
    let tx = 14.0 + rng.uniform(-3.5, 3.5) as f32;
    let ty = 14.0 + rng.uniform(-3.5, 3.5) as f32;
    let thick = rng.uniform(0.8, 1.9) as f32;
    let bright = rng.uniform(0.65, 1.0) as f32;
    let noise = 0.04f32;

    let (sin, cos) = rot.sin_cos();
    let map = |(gx, gy): Point| -> Point {
        let (ux, uy) = (gx - 0.5, gy - 0.5);
        let (ux, uy) = (ux + shear * uy, uy);
        let (ux, uy) = (cos * ux - sin * uy, sin * ux + cos * uy);
        (tx + scale * ux, ty + scale * uy)
    };
    let strokes: Vec<Vec<Point>> = glyph_strokes(class)
        .into_iter()
        .map(|poly| poly.into_iter().map(map).collect())
        .collect();

    let mut data = vec![0.0f32; IMG * IMG];
    for py in 0..IMG {
        for px in 0..IMG {
            let p = (px as f32 + 0.5, py as f32 + 0.5);
            let mut d = f32::INFINITY;
            for poly in &strokes {
                for seg in poly.windows(2) {
                    d = d.min(dist_to_segment(p, seg[0], seg[1]));
                }
            }
            // Soft stroke edge, ~0.7 px falloff.
            let v = ((thick - d) / 0.7 + 0.5).clamp(0.0, 1.0) * bright;
            data[py * IMG + px] = v;
        }
    }
    for v in &mut data {
        *v = (*v + noise * rng.normal() as f32).clamp(0.0, 1.0);
    }
    Tensor::from_vec(&[1, IMG, IMG], data).expect("finite pixels")
}

/// Ten-class digits-style dataset: `n` images of 1x28x28 with labels,
/// classes cycling 0..9. Fully determined by the seed.
pub fn digits(n: usize, seed: u64) -> Result<Dataset> {
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 10;
        let mut rng = SeededRng::stream(seed, &[0xd161, i as u64]);
        images.push(render_digit(class, &mut rng));
        labels.push(class);
    }
    Dataset::new(images, Some(labels))
}

/// Two-class blob images: a bright Gaussian spot in the upper-left or
/// lower-right quadrant, with positional jitter and noise.
pub fn two_blob_images(n: usize, seed: u64) -> Result<Dataset> {
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 2;
        let mut rng = SeededRng::stream(seed, &[0xb10b, i as u64]);
        let (bx, by) = if class == 0 { (9.0, 9.0) } else { (19.0, 19.0) };
        let cx = bx + rng.uniform(-2.5, 2.5);
        let cy = by + rng.uniform(-2.5, 2.5);
        let sigma = rng.uniform(2.2, 3.4);
        let amp = rng.uniform(0.7, 1.0);
        let mut data = vec![0.0f32; IMG * IMG];
        for py in 0..IMG {
            for px in 0..IMG {
                let d2 = (px as f64 - cx).powi(2) + (py as f64 - cy).powi(2);
                let v = amp * (-d2 / (2.0 * sigma * sigma)).exp()
                    + 0.03 * rng.normal();
                data[py * IMG + px] = (v as f32).clamp(0.0, 1.0);
            }
        }
        images.push(Tensor::from_vec(&[1, IMG, IMG], data)?);
        labels.push(class);
    }
    Dataset::new(images, Some(labels))
}

/// Gaussian blobs in feature space: blob `i` has `counts[i]` points around
/// `center_scale * e_i` with the given standard deviation per coordinate.
/// Returns the stacked matrix and blob labels.
pub fn gaussian_blobs(
    counts: &[usize],
    dim: usize,
    center_scale: f64,
    spread: f64,
    seed: u64,
) -> Result<(FeatureMatrix, Vec<usize>)> {
    assert!(counts.len() <= dim, "need dim >= number of blobs");
    let total: usize = counts.iter().sum();
    let mut data = Vec::with_capacity(total * dim);
    let mut labels = Vec::with_capacity(total);
    let mut rng = SeededRng::stream(seed, &[0xb70b5]);
    for (blob, &count) in counts.iter().enumerate() {
        for _ in 0..count {
            for d in 0..dim {
                let center = if d == blob { center_scale } else { 0.0 };
                data.push((center + spread * rng.normal()) as f32);
            }
            labels.push(blob);
        }
    }
    Ok((FeatureMatrix::from_vec(total, dim, data)?, labels))
}

/// Gaussian blobs around explicit centers: blob `i` has `counts[i]`
/// points at `centers[i]` plus N(0, spread^2) per coordinate.
pub fn gaussian_blobs_at(
    centers: &[Vec<f32>],
    counts: &[usize],
    spread: f64,
    seed: u64,
) -> Result<(FeatureMatrix, Vec<usize>)> {
    assert_eq!(centers.len(), counts.len());
    let dim = centers[0].len();
    let total: usize = counts.iter().sum();
    let mut data = Vec::with_capacity(total * dim);
    let mut labels = Vec::with_capacity(total);
    let mut rng = SeededRng::stream(seed, &[0xb70b6]);
    for (blob, (&count, center)) in counts.iter().zip(centers).enumerate() {
        assert_eq!(center.len(), dim);
        for _ in 0..count {
            for &c in center {
                data.push((c as f64 + spread * rng.normal()) as f32);
            }
            labels.push(blob);
        }
    }
    Ok((FeatureMatrix::from_vec(total, dim, data)?, labels))
}
