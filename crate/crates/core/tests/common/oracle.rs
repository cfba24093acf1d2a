//! Independent reference implementations used as test oracles.

#![allow(clippy::needless_range_loop)]

use nucdistill::dataset::CorpusSpec;
use nucdistill::metrics::{components_needed, pca_components, Matrix, PCA_THRESHOLDS};
use nucdistill::par::Execution;
use nucdistill::rng::SeededRng;
use nucdistill::teacher::{precompute, SyntheticTeacher};

pub fn random_matrix(rng: &mut SeededRng, n: usize, d: usize) -> Matrix {
    Matrix::new(n, d, (0..n * d).map(|_| rng.normal()).collect()).unwrap()
}

/// Rows drawn with a random per-direction scale so spectra are uneven.
pub fn structured_matrix(rng: &mut SeededRng, n: usize, d: usize) -> Matrix {
    let scales: Vec<f64> = (0..d).map(|_| (rng.normal() * 1.5).exp()).collect();
    let mix: Vec<f64> = (0..d * d).map(|_| rng.normal()).collect();
    let mut data = vec![0.0; n * d];
    for i in 0..n {
        let z: Vec<f64> = scales.iter().map(|s| s * rng.normal()).collect();
        for j in 0..d {
            data[i * d + j] = (0..d).map(|k| z[k] * mix[k * d + j]).sum::<f64>() + 3.0;
        }
    }
    Matrix::new(n, d, data).unwrap()
}

pub fn covariance(m: &Matrix) -> Vec<Vec<f64>> {
    let (n, d) = (m.rows(), m.cols());
    let mean: Vec<f64> = (0..d).map(|j| (0..n).map(|i| m.get(i, j)).sum::<f64>() / n as f64).collect();
    let mut c = vec![vec![0.0; d]; d];
    for i in 0..n {
        for a in 0..d {
            let xa = m.get(i, a) - mean[a];
            for b in 0..d {
                c[a][b] += xa * (m.get(i, b) - mean[b]);
            }
        }
    }
    for row in &mut c {
        for v in row.iter_mut() {
            *v /= (n - 1) as f64;
        }
    }
    c
}

/// Cyclic Jacobi rotation eigenvalues of a symmetric matrix, descending.
pub fn jacobi_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
    let d = a.len();
    for _sweep in 0..100 {
        let off: f64 = (0..d)
            .flat_map(|p| (0..d).filter(move |&q| q != p).map(move |q| (p, q)))
            .map(|(p, q)| a[p][q] * a[p][q])
            .sum();
        let diag: f64 = (0..d).map(|p| a[p][p] * a[p][p]).sum();
        if off <= 1e-30 * diag.max(1e-300) {
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..d).map(|i| a[i][i].max(0.0)).collect();
    ev.sort_by(|x, y| y.total_cmp(x));
    ev
}

pub fn oracle_counts(ev: &[f64], thresholds: &[f64]) -> Vec<usize> {
    let total: f64 = ev.iter().sum();
    thresholds
        .iter()
        .map(|&t| {
            let mut cum = 0.0;
            for (k, l) in ev.iter().enumerate() {
                cum += l;
                if cum / total >= t {
                    return k + 1;
                }
            }
            ev.len()
        })
        .collect()
}

pub fn oracle_cka(x: &Matrix, y: &Matrix) -> f64 {
    let cx = covariance(x);
    let cy = covariance(y);
    let n = x.rows();
    // Cross-covariance via explicit centering.
    let mx: Vec<f64> = (0..x.cols()).map(|j| (0..n).map(|i| x.get(i, j)).sum::<f64>() / n as f64).collect();
    let my: Vec<f64> = (0..y.cols()).map(|j| (0..n).map(|i| y.get(i, j)).sum::<f64>() / n as f64).collect();
    let mut cross = 0.0;
    for a in 0..x.cols() {
        for b in 0..y.cols() {
            let s: f64 = (0..n).map(|i| (x.get(i, a) - mx[a]) * (y.get(i, b) - my[b])).sum();
            cross += s * s;
        }
    }
    let fro = |c: &Vec<Vec<f64>>| c.iter().flatten().map(|v| v * v).sum::<f64>().sqrt() * (n - 1) as f64;
    cross / (fro(&cx) * fro(&cy))
}

pub fn random_orthogonal(rng: &mut SeededRng, d: usize) -> Matrix {
    let mut cols: Vec<Vec<f64>> = Vec::new();
    while cols.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        for c in &cols {
            let p: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(c).for_each(|(a, b)| *a -= p * b);
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-8 {
            cols.push(v.into_iter().map(|a| a / n).collect());
        }
    }
    let data = (0..d).flat_map(|r| cols.iter().map(move |c| c[r])).collect();
    Matrix::new(d, d, data).unwrap()
}

// ---------- CKA ----------

// ---------- teacher spectra ----------

pub fn teacher_embeddings(t: &SyntheticTeacher, n: usize, seed: u64, layer: usize) -> Matrix {
    let corpus = CorpusSpec {
        count: n,
        ..CorpusSpec::default()
    };
    let ds = corpus.dataset(seed, 128).unwrap();
    let outs = precompute(t, ds.sequences(), Execution::Parallel).unwrap();
    let rows: Vec<Vec<f32>> = outs.into_iter().map(|o| o.embeddings[layer].clone()).collect();
    Matrix::from_f32_rows(&rows).unwrap()
}

pub fn closed_form(t: &SyntheticTeacher, layer: usize) -> Vec<usize> {
    let ex = t.expected_spectrum(layer);
    PCA_THRESHOLDS.iter().map(|&th| components_needed(&ex, th)).collect()
}

pub fn measured_counts(t: &SyntheticTeacher, n: usize, layer: usize) -> Vec<usize> {
    let p = pca_components(&teacher_embeddings(t, n, 99, layer), &PCA_THRESHOLDS).unwrap();
    p.components_at.iter().map(|&(_, k)| k).collect()
}
