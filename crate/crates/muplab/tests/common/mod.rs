//! Shared test oracles, independent of the library's computation paths.

#![allow(dead_code)]

use muplab::linalg::{Matrix, Vector};
use muplab::model::{forward, loss_and_grad, LossKind, MlpState};

/// Eigenvalues of a symmetric matrix by the cyclic Jacobi rotation method.
/// Independent oracle: no power iteration, no library norms.
pub fn jacobi_eigenvalues(sym: &Matrix) -> Vec<f64> {
    let n = sym.rows();
    assert_eq!(n, sym.cols(), "Jacobi oracle needs a square matrix");
    let mut a: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| sym.get(i, j)).collect())
        .collect();
    let frob: f64 = a
        .iter()
        .flat_map(|row| row.iter().map(|x| x * x))
        .sum::<f64>()
        .sqrt();
    if frob == 0.0 {
        return vec![0.0; n];
    }
    for _sweep in 0..200 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += a[i][j] * a[i][j];
            }
        }
        if off.sqrt() <= 1e-15 * frob {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if a[p][q].abs() <= 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (theta * theta + 1.0).sqrt())
                } else {
                    -1.0 / (-theta + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i][i]).collect()
}

/// Top singular value via the Jacobi oracle on the Gram matrix.
pub fn jacobi_top_singular_value(m: &Matrix) -> f64 {
    let gram = if m.cols() <= m.rows() {
        m.transpose().matmul(m).unwrap()
    } else {
        m.matmul(&m.transpose()).unwrap()
    };
    jacobi_eigenvalues(&gram)
        .into_iter()
        .fold(0.0f64, f64::max)
        .max(0.0)
        .sqrt()
}

/// Central finite difference of the squared-error loss with respect to one
/// weight entry.
pub fn finite_diff_weight_grad(
    state: &MlpState,
    x: &Vector,
    y: &Vector,
    layer: usize,
    i: usize,
    j: usize,
    h: f64,
) -> f64 {
    let base = state.weight(layer).get(i, j);
    let loss_at = |value: f64| -> f64 {
        let mut perturbed = state.clone();
        perturbed.weight_mut(layer).set(i, j, value);
        let rec = forward(&perturbed, x).unwrap();
        loss_and_grad(rec.output(), y, LossKind::SquaredError)
            .unwrap()
            .0
    };
    (loss_at(base + h) - loss_at(base - h)) / (2.0 * h)
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}
