//! Feature post-processing applied before clustering: PCA reduction,
//! whitening, and L2 normalization.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Eigenvalue floor added before the inverse square root in whitening.
pub const WHITEN_EPS: f64 = 1e-5;

/// Relative threshold under which an eigenvalue counts as zero when
/// estimating rank.
const RANK_REL_TOL: f64 = 1e-9;

/// Row-per-sample feature matrix (n x d, row-major f32).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    dim: usize,
    data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn from_vec(rows: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if rows == 0 || dim == 0 {
            return Err(Error::InvalidArg("feature matrix must be non-empty".into()));
        }
        if data.len() != rows * dim {
            return Err(Error::ShapeMismatch(format!(
                "{} values for {rows}x{dim} matrix",
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("feature matrix".into()));
        }
        Ok(Self { rows, dim, data })
    }

    pub fn zeros(rows: usize, dim: usize) -> Self {
        Self {
            rows,
            dim,
            data: vec![0.0; rows * dim],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// Fitted PCA basis with the statistics needed for whitening.
///
/// `components` columns are orthonormal, eigenvalues are sorted
/// non-increasing, and each column's largest-magnitude entry is positive
/// (the deterministic sign convention).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f32>,
    /// d x d_out, column-major by component: components[c][j] is entry j of
    /// component c. Stored row-per-component for simple serialization.
    pub components: Vec<Vec<f32>>,
    pub eigvals: Vec<f32>,
    pub eps: f32,
}

impl PcaModel {
    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn output_dim(&self) -> usize {
        self.components.len()
    }
}

/// Fits PCA on the population covariance (divide by n) of mean-centered
/// rows, keeping the top `d_out` components.
///
/// Errors with [`Error::RankDeficient`] when the covariance has fewer than
/// `d_out` numerically nonzero eigenvalues; the error carries the
/// effective rank so callers can retry with it.
pub fn fit_pca(x: &FeatureMatrix, d_out: usize) -> Result<PcaModel> {
    let (n, d) = (x.rows(), x.dim());
    if d_out < 1 || d_out > d.min(n) {
        return Err(Error::InvalidArg(format!(
            "pca d_out {d_out} out of range for {n}x{d} input"
        )));
    }

    // Mean and covariance accumulate in f64, in fixed row order.
    let mut mean = vec![0.0f64; d];
    for i in 0..n {
        for (m, &v) in mean.iter_mut().zip(x.row(i)) {
            *m += v as f64;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }

    let mut cov = DMatrix::<f64>::zeros(d, d);
    let mut centered = vec![0.0f64; d];
    for i in 0..n {
        for ((c, &v), m) in centered.iter_mut().zip(x.row(i)).zip(&mean) {
            *c = v as f64 - m;
        }
        for a in 0..d {
            let ca = centered[a];
            if ca == 0.0 {
                continue;
            }
            for b in a..d {
                cov[(a, b)] += ca * centered[b];
            }
        }
    }
    for a in 0..d {
        for b in a..d {
            let v = cov[(a, b)] / n as f64;
            cov[(a, b)] = v;
            cov[(b, a)] = v;
        }
    }

    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap()
            .then(a.cmp(&b))
    });

    let max_eig = eig.eigenvalues[order[0]].max(0.0);
    let rank = order
        .iter()
        .filter(|&&i| eig.eigenvalues[i] > RANK_REL_TOL * max_eig && eig.eigenvalues[i] > 1e-12)
        .count();
    if d_out > rank {
        return Err(Error::RankDeficient {
            rank,
            requested: d_out,
        });
    }

    let mut components = Vec::with_capacity(d_out);
    let mut eigvals = Vec::with_capacity(d_out);
    for &idx in order.iter().take(d_out) {
        let col = eig.eigenvectors.column(idx);
        let mut comp: Vec<f32> = col.iter().map(|&v| v as f32).collect();
        // Sign convention: the largest-|coeff| entry is positive.
        let lead = comp
            .iter()
            .enumerate()
            .max_by(|(ia, a), (ib, b)| {
                a.abs()
                    .partial_cmp(&b.abs())
                    .unwrap()
                    .then(ib.cmp(ia))
            })
            .map(|(i, _)| i)
            .unwrap();
        if comp[lead] < 0.0 {
            for v in &mut comp {
                *v = -*v;
            }
        }
        components.push(comp);
        eigvals.push(eig.eigenvalues[idx].max(0.0) as f32);
    }

    Ok(PcaModel {
        mean: mean.iter().map(|&m| m as f32).collect(),
        components,
        eigvals,
        eps: WHITEN_EPS as f32,
    })
}

/// Projects rows onto the PCA basis and whitens:
/// y = (x - mean) . components . diag(1/sqrt(eigvals + eps)).
pub fn pca_whiten_transform(m: &PcaModel, x: &FeatureMatrix) -> Result<FeatureMatrix> {
    if x.dim() != m.input_dim() {
        return Err(Error::ShapeMismatch(format!(
            "pca transform: input dim {} vs model dim {}",
            x.dim(),
            m.input_dim()
        )));
    }
    let d_out = m.output_dim();
    let scale: Vec<f64> = m
        .eigvals
        .iter()
        .map(|&l| 1.0 / ((l as f64 + m.eps as f64).sqrt()))
        .collect();
    let mut out = FeatureMatrix::zeros(x.rows(), d_out);
    for i in 0..x.rows() {
        let row = x.row(i);
        let orow = out.row_mut(i);
        for (c, (comp, &s)) in m.components.iter().zip(&scale).enumerate() {
            let mut acc = 0.0f64;
            for ((&v, &mu), &w) in row.iter().zip(&m.mean).zip(comp) {
                acc += (v as f64 - mu as f64) * w as f64;
            }
            orow[c] = (acc * s) as f32;
        }
    }
    Ok(out)
}

/// Scales each row to unit Euclidean norm. Rows with norm below 1e-12 are
/// left as zeros; the returned count reports how many.
pub fn l2_normalize(x: &mut FeatureMatrix) -> usize {
    let mut zero_rows = 0;
    for i in 0..x.rows() {
        let row = x.row_mut(i);
        let norm = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
        if norm < 1e-12 {
            zero_rows += 1;
            continue;
        }
        for v in row {
            *v = ((*v as f64) / norm) as f32;
        }
    }
    zero_rows
}

/// The full pipeline: fit PCA at `d_out` (clamped to the effective rank),
/// whiten, L2-normalize. Returns the transformed features, the fitted
/// model, and the zero-row count from normalization.
pub fn fit_transform_pipeline(
    x: &FeatureMatrix,
    d_out: usize,
) -> Result<(FeatureMatrix, PcaModel, usize)> {
    let d_out = d_out.min(x.dim()).min(x.rows()).max(1);
    let model = match fit_pca(x, d_out) {
        Ok(m) => m,
        Err(Error::RankDeficient { rank, .. }) if rank >= 1 => fit_pca(x, rank)?,
        Err(e) => return Err(e),
    };
    let mut y = pca_whiten_transform(&model, x)?;
    let zero_rows = l2_normalize(&mut y);
    Ok((y, model, zero_rows))
}
