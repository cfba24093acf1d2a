//! Representation diagnostics: linear CKA, embedding variance, PCA
//! explained-variance counts and logit entropy profiles.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::{self, Execution};

/// Row-major `n x d` matrix of observations.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.as_ref().len() != cols {
                return Err(Error::Shape("ragged rows".into()));
            }
            data.extend_from_slice(r.as_ref());
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn from_f32_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.as_ref().len() != cols {
                return Err(Error::Shape("ragged rows".into()));
            }
            data.extend(r.as_ref().iter().map(|&v| f64::from(v)));
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn column_means(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (acc, &v) in m.iter_mut().zip(self.row(i)) {
                *acc += v;
            }
        }
        let n = self.rows.max(1) as f64;
        m.iter_mut().for_each(|v| *v /= n);
        m
    }

    pub fn centered(&self) -> Matrix {
        let means = self.column_means();
        let mut data = self.data.clone();
        for row in data.chunks_mut(self.cols.max(1)) {
            for (v, m) in row.iter_mut().zip(&means) {
                *v -= m;
            }
        }
        Matrix { data, ..*self }
    }

    /// Right-multiplies by a `cols x k` matrix.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = vec![0.0; self.rows * other.cols];
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                for (o, &b) in out[i * other.cols..(i + 1) * other.cols].iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Matrix::new(self.rows, other.cols, out)
    }

    pub fn scaled(&self, s: f64) -> Matrix {
        Matrix {
            data: self.data.iter().map(|v| v * s).collect(),
            ..*self
        }
    }

    /// `A^T B` (`cols_a x cols_b`).
    fn cross(&self, other: &Matrix, exec: Execution) -> Vec<f64> {
        let (da, db) = (self.cols, other.cols);
        let mut out = vec![0.0; da * db];
        par::for_each_chunk_mut(exec, &mut out, db, |p, row| {
            for i in 0..self.rows {
                let a = self.get(i, p);
                for (o, &b) in row.iter_mut().zip(other.row(i)) {
                    *o += a * b;
                }
            }
        });
        out
    }

    /// `A A^T` (`n x n`).
    fn gram(&self, exec: Execution) -> Vec<f64> {
        let n = self.rows;
        let mut out = vec![0.0; n * n];
        par::for_each_chunk_mut(exec, &mut out, n, |i, row| {
            let ri = self.row(i);
            for (j, o) in row.iter_mut().enumerate() {
                *o = ri.iter().zip(self.row(j)).map(|(a, b)| a * b).sum();
            }
        });
        out
    }
}

fn frob_sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

fn check_pair(x: &Matrix, y: &Matrix) -> Result<()> {
    if x.rows != y.rows {
        return Err(Error::Shape(format!("CKA needs equal row counts, got {} and {}", x.rows, y.rows)));
    }
    if x.rows < 2 {
        return Err(Error::Contract("CKA needs at least 2 rows".into()));
    }
    Ok(())
}

fn cka_ratio(cross: f64, xx: f64, yy: f64) -> Result<f64> {
    if xx <= 0.0 || yy <= 0.0 {
        return Err(Error::Degenerate("CKA input has no variance".into()));
    }
    Ok((cross / (xx.sqrt() * yy.sqrt())).clamp(0.0, 1.0))
}

/// Linear CKA through feature-space cross products,
/// `||X^T Y||_F^2 / (||X^T X||_F ||Y^T Y||_F)`. No centering is applied.
pub fn linear_cka_features(x: &Matrix, y: &Matrix, exec: Execution) -> Result<f64> {
    check_pair(x, y)?;
    let c = frob_sq(&x.cross(y, exec));
    let xx = frob_sq(&x.cross(x, exec));
    let yy = frob_sq(&y.cross(y, exec));
    cka_ratio(c, xx, yy)
}

/// The same quantity through `n x n` Gram matrices; cheaper when the
/// feature dimensions exceed the sample count.
pub fn linear_cka_gram(x: &Matrix, y: &Matrix, exec: Execution) -> Result<f64> {
    check_pair(x, y)?;
    let k = x.gram(exec);
    let l = y.gram(exec);
    let c: f64 = k.iter().zip(&l).map(|(a, b)| a * b).sum();
    cka_ratio(c, frob_sq(&k), frob_sq(&l))
}

fn cka_dispatch(x: &Matrix, y: &Matrix, exec: Execution) -> Result<f64> {
    let n = x.rows;
    let feature_cost = n * (x.cols * y.cols + x.cols * x.cols + y.cols * y.cols);
    let gram_cost = n * n * (x.cols + y.cols);
    if gram_cost < feature_cost {
        linear_cka_gram(x, y, exec)
    } else {
        linear_cka_features(x, y, exec)
    }
}

/// Linear CKA with column centering. Lies in [0, 1] and equals 1 for
/// `CKA(X, X)`.
pub fn linear_cka(x: &Matrix, y: &Matrix) -> Result<f64> {
    linear_cka_with(x, y, Execution::default())
}

pub fn linear_cka_with(x: &Matrix, y: &Matrix, exec: Execution) -> Result<f64> {
    check_pair(x, y)?;
    cka_dispatch(&x.centered(), &y.centered(), exec)
}

/// The formula applied to raw (uncentered) rows; logged next to the
/// centered value.
pub fn linear_cka_uncentered(x: &Matrix, y: &Matrix) -> Result<f64> {
    check_pair(x, y)?;
    cka_dispatch(x, y, Execution::default())
}

/// Mean over dimensions of the per-dimension population variance.
pub fn embedding_variance(e: &Matrix) -> Result<f64> {
    if e.rows < 2 {
        return Err(Error::Contract(format!("embedding variance needs at least 2 rows, got {}", e.rows)));
    }
    if e.cols == 0 {
        return Ok(0.0);
    }
    let c = e.centered();
    Ok(frob_sq(&c.data) / (e.rows as f64 * e.cols as f64))
}

/// Mean row L2 norm.
pub fn mean_row_norm(e: &Matrix) -> f64 {
    if e.rows == 0 {
        return 0.0;
    }
    (0..e.rows).map(|i| frob_sq(e.row(i)).sqrt()).sum::<f64>() / e.rows as f64
}

pub const PCA_THRESHOLDS: [f64; 5] = [0.50, 0.75, 0.90, 0.95, 0.99];

/// Slack on cumulative ratios so exact ties (e.g. 0.6 + 0.3 against 0.9)
/// are not lost to rounding.
pub const PCA_TIE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaResult {
    /// Covariance eigenvalues, descending, clamped at zero.
    pub eigenvalues: Vec<f64>,
    /// `(threshold, smallest component count reaching it)`.
    pub components_at: Vec<(f64, usize)>,
}

impl PcaResult {
    pub fn components_for(&self, threshold: f64) -> Option<usize> {
        self.components_at
            .iter()
            .find(|(t, _)| (t - threshold).abs() < 1e-12)
            .map(|&(_, k)| k)
    }

    pub fn explained_ratio(&self) -> Vec<f64> {
        let total: f64 = self.eigenvalues.iter().sum();
        self.eigenvalues.iter().map(|l| l / total).collect()
    }
}

/// Smallest `k` whose leading eigenvalue mass reaches `threshold`.
pub fn components_needed(eigenvalues_desc: &[f64], threshold: f64) -> usize {
    let total: f64 = eigenvalues_desc.iter().sum();
    let mut cum = 0.0;
    for (i, l) in eigenvalues_desc.iter().enumerate() {
        cum += l;
        if cum / total >= threshold - PCA_TIE_TOLERANCE {
            return i + 1;
        }
    }
    eigenvalues_desc.len()
}

/// Eigen-decomposes the sample covariance of `e` (or, when `d > n`, the
/// Gram matrix, which has the same non-zero spectrum).
pub fn pca_components(e: &Matrix, thresholds: &[f64]) -> Result<PcaResult> {
    if e.rows < 2 {
        return Err(Error::Contract(format!("PCA needs at least 2 rows, got {}", e.rows)));
    }
    let c = e.centered();
    let scale = 1.0 / (e.rows as f64 - 1.0);
    let sym = if e.cols <= e.rows {
        DMatrix::from_row_slice(e.cols, e.cols, &c.cross(&c, Execution::default()))
    } else {
        DMatrix::from_row_slice(e.rows, e.rows, &c.gram(Execution::default()))
    } * scale;
    let mut eigenvalues: Vec<f64> = SymmetricEigen::new(sym).eigenvalues.iter().map(|&l| l.max(0.0)).collect();
    eigenvalues.sort_by(|a, b| b.total_cmp(a));
    let total: f64 = eigenvalues.iter().sum();
    let largest = eigenvalues.first().copied().unwrap_or(0.0);
    if total <= 0.0 || largest <= 0.0 {
        return Err(Error::Degenerate("PCA input has no variance".into()));
    }
    // Eigenvalues below round-off of the largest one are numerical noise.
    let floor = largest * 1e-13 * eigenvalues.len() as f64;
    for l in &mut eigenvalues {
        if *l < floor {
            *l = 0.0;
        }
    }
    let components_at = thresholds.iter().map(|&t| (t, components_needed(&eigenvalues, t))).collect();
    Ok(PcaResult {
        eigenvalues,
        components_at,
    })
}

/// Leading principal axes of `e` as columns of a `d x k` matrix, with the
/// matching eigenvalues.
pub fn principal_axes(e: &Matrix, k: usize) -> Result<(Matrix, Vec<f64>)> {
    let c = e.centered();
    let scale = 1.0 / (e.rows.max(2) as f64 - 1.0);
    let cov = DMatrix::from_row_slice(e.cols, e.cols, &c.cross(&c, Execution::default())) * scale;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..e.cols).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let k = k.min(e.cols);
    let mut axes = vec![0.0; e.cols * k];
    let mut values = Vec::with_capacity(k);
    for (col, &idx) in order.iter().take(k).enumerate() {
        values.push(eig.eigenvalues[idx]);
        let v = eig.eigenvectors.column(idx);
        // Fix the sign so results do not depend on solver internals.
        let sign = if v.iter().fold(0.0f64, |acc, &x| if x.abs() > acc.abs() { x } else { acc }) < 0.0 {
            -1.0
        } else {
            1.0
        };
        for r in 0..e.cols {
            axes[r * k + col] = sign * v[r];
        }
    }
    Ok((Matrix::new(e.cols, k, axes)?, values))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyProfile {
    /// Entropy in nats at each unmasked position, in order.
    pub per_position: Vec<f64>,
    pub mean: f64,
    pub max: f64,
    /// Indices into `per_position` exceeding `mean + 2 * std`.
    pub spikes: Vec<usize>,
    /// `exp(-mean)`: geometric-mean probability assigned per token.
    pub mean_token_prob: f64,
    pub uniform_entropy: f64,
    pub uniform_prob: f64,
}

/// Per-position entropy of `softmax(logits)` over `classes` columns.
pub fn entropy_profile(logits: &[f64], classes: usize, mask: &[bool]) -> Result<EntropyProfile> {
    if classes < 2 {
        return Err(Error::Contract("entropy needs at least 2 classes".into()));
    }
    if logits.len() != classes * mask.len() {
        return Err(Error::Shape(format!(
            "{} logits for {} positions of {classes} classes",
            logits.len(),
            mask.len()
        )));
    }
    let per_position: Vec<f64> = logits
        .chunks(classes)
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(row, _)| row_entropy(row))
        .collect();
    let n = per_position.len().max(1) as f64;
    let mean = shifted_mean(&per_position);
    let max = per_position.iter().copied().fold(0.0, f64::max);
    let var = per_position.iter().map(|h| (h - mean).powi(2)).sum::<f64>() / n;
    let cut = mean + 2.0 * var.sqrt();
    let spikes = if var > 0.0 {
        per_position.iter().enumerate().filter(|(_, &h)| h > cut).map(|(i, _)| i).collect()
    } else {
        Vec::new()
    };
    Ok(EntropyProfile {
        mean_token_prob: (-mean).exp(),
        uniform_entropy: (classes as f64).ln(),
        uniform_prob: 1.0 / classes as f64,
        per_position,
        mean,
        max,
        spikes,
    })
}

/// Mean accumulated as offsets from the first value, so a constant input
/// comes back bit-exact.
pub fn shifted_mean(xs: &[f64]) -> f64 {
    let Some(&x0) = xs.first() else {
        return 0.0;
    };
    x0 + xs.iter().map(|x| x - x0).sum::<f64>() / xs.len() as f64
}

// H = ln z - sum p (v - max); flat rows give exactly ln C.
fn row_entropy(row: &[f64]) -> f64 {
    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
    let z: f64 = exps.iter().sum();
    let weighted: f64 = exps.iter().zip(row).map(|(e, v)| e / z * (v - mx)).sum();
    z.ln() - weighted
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn random(n: usize, d: usize, seed: u64) -> Matrix {
        let mut r = SeededRng::new(seed);
        Matrix::new(n, d, (0..n * d).map(|_| r.normal()).collect()).unwrap()
    }

    #[test]
    fn cka_routes_agree() {
        let x = random(40, 7, 1).centered();
        let y = random(40, 11, 2).centered();
        let a = linear_cka_features(&x, &y, Execution::Sequential).unwrap();
        let b = linear_cka_gram(&x, &y, Execution::Parallel).unwrap();
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }

    #[test]
    fn cka_self_is_one() {
        let x = random(100, 16, 3);
        assert!((linear_cka(&x, &x).unwrap() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn cka_errors() {
        let x = random(10, 3, 1);
        let y = random(11, 3, 1);
        assert!(matches!(linear_cka(&x, &y), Err(Error::Shape(_))));
        let flat = Matrix::new(5, 2, vec![1.0; 10]).unwrap();
        assert!(matches!(linear_cka(&flat, &flat), Err(Error::Degenerate(_))));
    }

    #[test]
    fn variance_examples() {
        let c = Matrix::new(3, 2, vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0]).unwrap();
        assert_eq!(embedding_variance(&c).unwrap(), 0.0);
        let two = Matrix::new(2, 1, vec![0.0, 2.0]).unwrap();
        assert!((embedding_variance(&two).unwrap() - 1.0).abs() < 1e-15);
        let one = Matrix::new(1, 1, vec![0.0]).unwrap();
        assert!(matches!(embedding_variance(&one), Err(Error::Contract(_))));

        let x = random(20, 4, 9);
        let shifted = Matrix::new(20, 4, x.data().iter().enumerate().map(|(i, v)| v + (i % 4) as f64 * 3.0).collect()).unwrap();
        let (a, b) = (embedding_variance(&x).unwrap(), embedding_variance(&shifted).unwrap());
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn pca_rank_one() {
        let mut r = SeededRng::new(4);
        let dir: Vec<f64> = (0..8).map(|_| r.normal()).collect();
        let rows: Vec<Vec<f64>> = (0..50)
            .map(|_| {
                let s = r.normal();
                dir.iter().map(|d| d * s).collect()
            })
            .collect();
        let res = pca_components(&Matrix::from_rows(&rows).unwrap(), &PCA_THRESHOLDS).unwrap();
        assert!(res.components_at.iter().all(|&(_, k)| k == 1), "{res:?}");
    }

    #[test]
    fn pca_degenerate() {
        let flat = Matrix::new(4, 3, vec![2.0; 12]).unwrap();
        assert!(matches!(pca_components(&flat, &PCA_THRESHOLDS), Err(Error::Degenerate(_))));
    }

    #[test]
    fn pca_wide_matrix_uses_gram() {
        let x = random(10, 30, 5);
        let res = pca_components(&x, &PCA_THRESHOLDS).unwrap();
        assert_eq!(res.eigenvalues.len(), 10);
        assert_eq!(res.eigenvalues[9], 0.0);
    }

    #[test]
    fn entropy_uniform_and_one_hot() {
        let uniform = vec![0.0; 4 * 3];
        let p = entropy_profile(&uniform, 4, &[true; 3]).unwrap();
        for h in &p.per_position {
            assert!((h - 4f64.ln()).abs() < 1e-12);
        }
        assert!((p.mean_token_prob - 0.25).abs() < 1e-15);
        assert!(p.spikes.is_empty());

        let one_hot = vec![1000.0, 0.0, 0.0, 0.0];
        let p = entropy_profile(&one_hot, 4, &[true]).unwrap();
        assert_eq!(p.per_position[0], 0.0);
    }
}
