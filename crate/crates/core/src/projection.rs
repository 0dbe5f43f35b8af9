//! PCA and LDA projections with whitening.
//!
//! A fitted [`ProjectionModel`] maps a `D`-dimensional vector `x` to
//! `scale ⊙ Bᵀ(x − mean)` and re-normalizes the result to unit length.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fisher::l2_norm;

/// Added to eigenvalues before taking inverse square roots.
pub const EIGEN_EPSILON: f64 = 1e-10;

/// Eigenvalues below this fraction of the largest count as zero when
/// measuring rank.
const RANK_TOLERANCE: f64 = 1e-10;

/// Ridge added to the within-class scatter, relative to its mean diagonal.
const WITHIN_CLASS_RIDGE: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjectionMethod {
    Pca,
    Lda,
}

impl ProjectionMethod {
    pub fn code(self) -> u8 {
        match self {
            ProjectionMethod::Pca => 0,
            ProjectionMethod::Lda => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(ProjectionMethod::Pca),
            1 => Some(ProjectionMethod::Lda),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionModel {
    method: ProjectionMethod,
    mean: Vec<f64>,
    /// Column-major `D × m`.
    basis: Vec<f64>,
    scales: Vec<f64>,
}

impl ProjectionModel {
    pub fn new(method: ProjectionMethod, mean: Vec<f64>, basis: Vec<f64>, scales: Vec<f64>) -> Result<Self> {
        let (d, m) = (mean.len(), scales.len());
        if d == 0 || m == 0 || m > d {
            return Err(Error::InvalidModel(format!("projection {d} -> {m} is not a reduction")));
        }
        if basis.len() != d * m {
            return Err(Error::InvalidModel(format!(
                "basis has {} entries, expected {}",
                basis.len(),
                d * m
            )));
        }
        if !scales.iter().all(|s| s.is_finite() && *s > 0.0) {
            return Err(Error::InvalidModel("whitening scales must be positive".into()));
        }
        if !mean.iter().chain(&basis).all(|v| v.is_finite()) {
            return Err(Error::InvalidModel("non-finite projection parameters".into()));
        }
        Ok(Self { method, mean, basis, scales })
    }

    pub fn method(&self) -> ProjectionMethod {
        self.method
    }

    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn output_dim(&self) -> usize {
        self.scales.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn basis(&self) -> &[f64] {
        &self.basis
    }

    pub fn column(&self, i: usize) -> &[f64] {
        let d = self.input_dim();
        &self.basis[i * d..(i + 1) * d]
    }

    pub fn whitening_scales(&self) -> &[f64] {
        &self.scales
    }

    /// Whitened coordinates before re-normalization.
    pub fn transform(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                actual: x.len(),
            });
        }
        let centered: Vec<f64> = x.iter().zip(&self.mean).map(|(a, b)| a - b).collect();
        Ok((0..self.output_dim())
            .map(|i| {
                let dot: f64 = self.column(i).iter().zip(&centered).map(|(b, c)| b * c).sum();
                self.scales[i] * dot
            })
            .collect())
    }

    /// Projects and re-normalizes to unit L2 norm.
    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        let y = self.transform(x)?;
        let norm = l2_norm(&y);
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::DegenerateProjection);
        }
        Ok(y.into_iter().map(|v| v / norm).collect())
    }

    pub fn project_batch(&self, xs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        xs.iter().map(|x| self.project(x)).collect()
    }
}

fn data_matrix(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let first = rows.first().ok_or(Error::EmptyInput)?;
    let d = first.len();
    if d == 0 {
        return Err(Error::EmptyInput);
    }
    for r in rows {
        if r.len() != d {
            return Err(Error::DimensionMismatch { expected: d, actual: r.len() });
        }
        if !r.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("non-finite vector entry".into()));
        }
    }
    Ok(DMatrix::from_fn(rows.len(), d, |i, k| rows[i][k]))
}

fn column_mean(x: &DMatrix<f64>) -> DVector<f64> {
    let n = x.nrows() as f64;
    DVector::from_fn(x.ncols(), |k, _| x.column(k).iter().sum::<f64>() / n)
}

/// Flips `v` so its largest-magnitude component (first on ties) is positive.
fn fix_sign(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Eigenpairs sorted by descending eigenvalue, ties by original index.
fn sorted_eigen(m: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(eig.eigenvectors.nrows(), order.len(), |r, c| {
        eig.eigenvectors[(r, order[c])]
    });
    (values, vectors)
}

fn numerical_rank(values: &[f64]) -> usize {
    let top = values.first().copied().unwrap_or(0.0);
    if !(top > 0.0) {
        return 0;
    }
    values.iter().filter(|&&v| v > top * RANK_TOLERANCE).count()
}

/// Principal directions and variances of the rows, largest first.
/// Uses the Gram matrix when there are fewer rows than columns.
pub fn principal_components(rows: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>, DMatrix<f64>)> {
    let x = data_matrix(rows)?;
    let (n, d) = x.shape();
    let mean = column_mean(&x);
    let mut xc = x;
    for mut row in xc.row_iter_mut() {
        row -= mean.transpose();
    }
    let (values, vectors) = if n >= d {
        sorted_eigen(xc.transpose() * &xc / n as f64)
    } else {
        let (values, u) = sorted_eigen(&xc * xc.transpose() / n as f64);
        let rank = numerical_rank(&values);
        let mut v = DMatrix::zeros(d, rank);
        for c in 0..rank {
            let col = xc.transpose() * u.column(c) / (n as f64 * values[c]).sqrt();
            v.set_column(c, &col);
        }
        (values[..rank].to_vec(), v)
    };
    let values: Vec<f64> = values.into_iter().map(|v| v.max(0.0)).collect();
    Ok((mean.iter().copied().collect(), values, vectors))
}

/// PCA to `m` dimensions with whitening by `1/√(λ + ε)`.
pub fn fit_pca_whiten(rows: &[Vec<f64>], m: usize) -> Result<ProjectionModel> {
    if m == 0 {
        return Err(Error::InvalidInput("target dimension must be positive".into()));
    }
    let (mean, values, vectors) = principal_components(rows)?;
    let rank = numerical_rank(&values);
    if rank < m {
        return Err(Error::InsufficientRank { needed: m, rank });
    }
    let d = mean.len();
    let mut basis = Vec::with_capacity(d * m);
    for c in 0..m {
        let mut col: Vec<f64> = vectors.column(c).iter().copied().collect();
        fix_sign(&mut col);
        basis.extend(col);
    }
    let scales = values[..m].iter().map(|l| 1.0 / (l + EIGEN_EPSILON).sqrt()).collect();
    ProjectionModel::new(ProjectionMethod::Pca, mean, basis, scales)
}

/// Within-class and between-class scatter, each divided by the sample count.
pub fn scatter_matrices<L: Ord>(rows: &[Vec<f64>], labels: &[L]) -> Result<(DVector<f64>, DMatrix<f64>, DMatrix<f64>, usize)> {
    let x = data_matrix(rows)?;
    if labels.len() != rows.len() {
        return Err(Error::DimensionMismatch { expected: rows.len(), actual: labels.len() });
    }
    let (n, d) = x.shape();
    let mut members: BTreeMap<&L, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        members.entry(l).or_default().push(i);
    }
    let mean = column_mean(&x);
    let mut class_mean = vec![0usize; n];
    let mut means: Vec<DVector<f64>> = Vec::with_capacity(members.len());
    for idx in members.values() {
        let mut m = DVector::zeros(d);
        for &i in idx {
            m += x.row(i).transpose();
        }
        m /= idx.len() as f64;
        for &i in idx {
            class_mean[i] = means.len();
        }
        means.push(m);
    }
    // rows stay in item order so the result does not depend on label names
    let within = DMatrix::from_fn(n, d, |i, k| x[(i, k)] - means[class_mean[i]][k]);
    let between = DMatrix::from_fn(n, d, |i, k| means[class_mean[i]][k] - mean[k]);
    let sw = within.transpose() * &within / n as f64;
    let sb = between.transpose() * &between / n as f64;
    Ok((mean, sw, sb, members.len()))
}

/// Generalized eigenvectors of `(sb, sw)`, largest ratio first, in the
/// coordinates of the inputs.
fn discriminant_directions(sw: &DMatrix<f64>, sb: &DMatrix<f64>, m: usize) -> Result<Vec<DVector<f64>>> {
    let d = sw.nrows();
    let ridge = WITHIN_CLASS_RIDGE * (sw.trace() / d as f64).max(f64::MIN_POSITIVE);
    let sw_reg = sw + DMatrix::identity(d, d) * ridge;
    let l = sw_reg
        .cholesky()
        .ok_or_else(|| Error::InvalidInput("within-class scatter is not positive definite".into()))?
        .l();
    let l_inv = l
        .try_inverse()
        .ok_or_else(|| Error::InvalidInput("within-class scatter is singular".into()))?;
    let reduced = &l_inv * sb * l_inv.transpose();
    let reduced = (&reduced + reduced.transpose()) * 0.5;
    let (values, vectors) = sorted_eigen(reduced);
    let rank = numerical_rank(&values);
    if rank < m {
        return Err(Error::InsufficientRank { needed: m, rank });
    }
    Ok((0..m).map(|c| l_inv.transpose() * vectors.column(c)).collect())
}

/// Fisher discriminant to `m` dimensions, whitened against the within-class
/// covariance. Basis columns are unit length; the scale of each column is
/// the inverse within-class standard deviation along it.
///
/// When there are too few samples for the within-class scatter to be full
/// rank, the discriminant is solved inside the leading principal subspace
/// of dimension `N − K`.
pub fn fit_lda_whiten<L: Ord>(rows: &[Vec<f64>], labels: &[L], m: usize) -> Result<ProjectionModel> {
    if m == 0 {
        return Err(Error::InvalidInput("target dimension must be positive".into()));
    }
    let (mean, sw, sb, classes) = scatter_matrices(rows, labels)?;
    if m + 1 > classes {
        return Err(Error::LdaRankBoundExceeded { requested: m, classes });
    }
    let d = mean.len();
    let room = (rows.len() - classes).min(d);
    let directions = if room < d {
        let (_, values, pcs) = principal_components(rows)?;
        let keep = room.min(numerical_rank(&values));
        if keep < m {
            return Err(Error::InsufficientRank { needed: m, rank: keep });
        }
        let p = pcs.columns(0, keep).into_owned();
        let sw_p = p.transpose() * &sw * &p;
        let sb_p = p.transpose() * &sb * &p;
        discriminant_directions(&sw_p, &sb_p, m)?
            .into_iter()
            .map(|w| &p * w)
            .collect()
    } else {
        discriminant_directions(&sw, &sb, m)?
    };
    let mut basis = Vec::with_capacity(d * m);
    let mut scales = Vec::with_capacity(m);
    for w in directions {
        let norm = w.norm();
        let mut col: Vec<f64> = w.iter().map(|v| v / norm).collect();
        fix_sign(&mut col);
        let dir = DVector::from_column_slice(&col);
        let var = (dir.transpose() * &sw * &dir)[(0, 0)];
        scales.push(1.0 / (var.max(0.0) + EIGEN_EPSILON).sqrt());
        basis.extend(col);
    }
    ProjectionModel::new(ProjectionMethod::Lda, mean.iter().copied().collect(), basis, scales)
}
