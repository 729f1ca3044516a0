//! Hessian-proxy saliency: which weights matter, estimated from calibration
//! activations.
//!
//! The layer-wise proxy is H = (2/N) * sum_i x_i x_i^T + lambda*I over the
//! inputs the layer actually sees, with lambda = damping_coeff * mean(diag)
//! of the pre-damping matrix. Per-weight saliency follows
//!
//! ```text
//!   s[r, c] = w[r, c]^2 / ([H^-1]_cc)^2
//! ```
//!
//! and group saliency is the mean over each contiguous run of G columns.
//! Only the diagonal of H^-1 is needed, so we factor H = L L^T once and
//! solve L y = e_c per column instead of forming the full inverse.

use crate::dense::{DenseMatrix, DenseVector};
use crate::error::{Error, Result};

/// Default damping coefficient applied to the mean diagonal.
pub const DEFAULT_DAMPING: f32 = 0.01;

/// Damped activation second-moment proxy for one layer.
#[derive(Debug, Clone)]
pub struct HessianEstimate {
    pub dim: usize,
    pub h: DenseMatrix,
    /// Realized damping term lambda added to the diagonal.
    pub damping: f32,
}

/// Accumulate H = (2/N) * sum x x^T + lambda*I from the layer's inputs.
pub fn estimate_hessian(inputs: &[DenseVector], damping_coeff: f32) -> Result<HessianEstimate> {
    if inputs.is_empty() {
        return Err(Error::Domain(
            "hessian estimation needs at least one sample".into(),
        ));
    }
    if !(damping_coeff >= 0.0) || !damping_coeff.is_finite() {
        return Err(Error::Domain(format!(
            "damping coefficient must be finite and non-negative, got {damping_coeff}"
        )));
    }
    let dim = inputs[0].len();
    if dim == 0 {
        return Err(Error::Domain("hessian dimension must be positive".into()));
    }
    let mut h = DenseMatrix::zeros(dim, dim);
    let scale = 2.0 / inputs.len() as f64;
    // accumulate in f64; desk-scale dims make the O(N d^2) loop cheap enough
    let mut acc = vec![0.0f64; dim * dim];
    for x in inputs {
        if x.len() != dim {
            return Err(Error::Shape(format!(
                "inconsistent sample length {} (expected {dim})",
                x.len()
            )));
        }
        if x.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("sample contains non-finite values".into()));
        }
        for r in 0..dim {
            let xr = x.data[r] as f64;
            let row = &mut acc[r * dim..][..dim];
            for (c, slot) in row.iter_mut().enumerate() {
                *slot += xr * x.data[c] as f64;
            }
        }
    }
    let mut diag_sum = 0.0f64;
    for r in 0..dim {
        diag_sum += acc[r * dim + r] * scale;
    }
    let damping = (damping_coeff as f64 * diag_sum / dim as f64) as f32;
    for r in 0..dim {
        for c in 0..dim {
            let mut v = (acc[r * dim + c] * scale) as f32;
            if r == c {
                v += damping;
            }
            h.set(r, c, v);
        }
    }
    Ok(HessianEstimate { dim, h, damping })
}

/// Lower-triangular Cholesky factor of an SPD matrix, or a numeric error
/// when a pivot collapses.
fn cholesky(h: &DenseMatrix) -> Result<Vec<f64>> {
    let n = h.rows;
    let mut l = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = h.get(i, j) as f64;
            for k in 0..j {
                sum -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if sum <= 0.0 {
                    return Err(Error::Numeric(format!(
                        "matrix is not positive definite (pivot {sum:e} at {i})"
                    )));
                }
                l[i * n + i] = sum.sqrt();
            } else {
                l[i * n + j] = sum / l[j * n + j];
            }
        }
    }
    Ok(l)
}

/// Diagonal of H^-1 via one forward solve per column of the factor.
fn inverse_diagonal(h: &DenseMatrix) -> Result<Vec<f64>> {
    let n = h.rows;
    let l = cholesky(h)?;
    let mut diag = vec![0.0f64; n];
    let mut y = vec![0.0f64; n];
    for c in 0..n {
        // solve L y = e_c; y is zero above row c
        y[c] = 1.0 / l[c * n + c];
        for i in c + 1..n {
            let mut sum = 0.0f64;
            for k in c..i {
                sum += l[i * n + k] * y[k];
            }
            y[i] = -sum / l[i * n + i];
        }
        // [H^-1]_cc = || L^-1 e_c ||^2
        diag[c] = y[c..n].iter().map(|v| v * v).sum();
    }
    Ok(diag)
}

/// Per-weight saliency scores, same shape as the weight matrix.
pub fn weight_saliency(w: &DenseMatrix, hessian: &HessianEstimate) -> Result<DenseMatrix> {
    if w.cols != hessian.dim {
        return Err(Error::Shape(format!(
            "weight matrix has {} columns but hessian dimension is {}",
            w.cols, hessian.dim
        )));
    }
    let hinv_diag = inverse_diagonal(&hessian.h)?;
    let mut s = DenseMatrix::zeros(w.rows, w.cols);
    for r in 0..w.rows {
        for c in 0..w.cols {
            let wv = w.get(r, c) as f64;
            s.set(r, c, (wv * wv / (hinv_diag[c] * hinv_diag[c])) as f32);
        }
    }
    Ok(s)
}

/// Mean saliency over each contiguous run of `group_size` columns.
pub fn group_saliency(per_weight: &DenseMatrix, group_size: usize) -> Result<DenseMatrix> {
    if group_size == 0 {
        return Err(Error::Domain("group size must be positive".into()));
    }
    if per_weight.cols % group_size != 0 {
        return Err(Error::Shape(format!(
            "{} columns do not divide into groups of {group_size}",
            per_weight.cols
        )));
    }
    let groups = per_weight.cols / group_size;
    let mut out = DenseMatrix::zeros(per_weight.rows, groups);
    for r in 0..per_weight.rows {
        let row = per_weight.row(r);
        for g in 0..groups {
            let chunk = &row[g * group_size..][..group_size];
            let mean = chunk.iter().map(|&v| v as f64).sum::<f64>() / group_size as f64;
            out.set(r, g, mean as f32);
        }
    }
    Ok(out)
}

/// Per-weight and per-group scores bundled with the grouping they used.
#[derive(Debug, Clone)]
pub struct SaliencyMap {
    pub per_weight: DenseMatrix,
    pub per_group: DenseMatrix,
    pub group_size: usize,
}

impl SaliencyMap {
    pub fn new(per_weight: DenseMatrix, group_size: usize) -> Result<Self> {
        let per_group = group_saliency(&per_weight, group_size)?;
        Ok(SaliencyMap {
            per_weight,
            per_group,
            group_size,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dense::{make_synthetic, Distribution};

    /// Brute-force f64 inverse by Gauss-Jordan elimination; test oracle only.
    fn invert_dense(h: &DenseMatrix) -> Vec<f64> {
        let n = h.rows;
        let mut a = vec![0.0f64; n * 2 * n];
        for r in 0..n {
            for c in 0..n {
                a[r * 2 * n + c] = h.get(r, c) as f64;
            }
            a[r * 2 * n + n + r] = 1.0;
        }
        for col in 0..n {
            let pivot_row = (col..n)
                .max_by(|&i, &j| {
                    a[i * 2 * n + col]
                        .abs()
                        .partial_cmp(&a[j * 2 * n + col].abs())
                        .unwrap()
                })
                .unwrap();
            for c in 0..2 * n {
                a.swap(col * 2 * n + c, pivot_row * 2 * n + c);
            }
            let pivot = a[col * 2 * n + col];
            for c in 0..2 * n {
                a[col * 2 * n + c] /= pivot;
            }
            for r in 0..n {
                if r != col {
                    let f = a[r * 2 * n + col];
                    for c in 0..2 * n {
                        a[r * 2 * n + c] -= f * a[col * 2 * n + c];
                    }
                }
            }
        }
        let mut inv = vec![0.0f64; n * n];
        for r in 0..n {
            for c in 0..n {
                inv[r * n + c] = a[r * 2 * n + n + c];
            }
        }
        inv
    }

    #[test]
    fn hessian_from_single_basis_sample() {
        let inputs = [DenseVector::from_vec(vec![1.0, 0.0])];
        let est = estimate_hessian(&inputs, DEFAULT_DAMPING).unwrap();
        // pre-damping H = [[2,0],[0,0]], mean diagonal 1, lambda 0.01
        assert!((est.damping - 0.01).abs() < 1e-7);
        assert!((est.h.get(0, 0) - 2.01).abs() < 1e-6);
        assert!((est.h.get(1, 1) - 0.01).abs() < 1e-7);
        assert_eq!(est.h.get(0, 1), 0.0);
        assert!(est.h.get(0, 0) > 0.0 && est.h.get(1, 1) > 0.0);
    }

    #[test]
    fn hessian_is_symmetric_and_deterministic() {
        let calib = crate::dense::CalibrationSet::synthetic(16, 8, 3).unwrap();
        let a = estimate_hessian(&calib.samples, DEFAULT_DAMPING).unwrap();
        let b = estimate_hessian(&calib.samples, DEFAULT_DAMPING).unwrap();
        assert_eq!(a.h.data, b.h.data);
        for r in 0..8 {
            for c in 0..8 {
                assert_eq!(a.h.get(r, c), a.h.get(c, r));
            }
        }
    }

    #[test]
    fn hessian_rejects_empty_and_ragged_inputs() {
        assert!(matches!(
            estimate_hessian(&[], DEFAULT_DAMPING),
            Err(Error::Domain(_))
        ));
        let ragged = [DenseVector::zeros(3), DenseVector::zeros(4)];
        assert!(matches!(
            estimate_hessian(&ragged, DEFAULT_DAMPING),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn zero_samples_fail_factorization() {
        let inputs = [DenseVector::zeros(4)];
        let est = estimate_hessian(&inputs, DEFAULT_DAMPING).unwrap();
        let w = DenseMatrix::zeros(2, 4);
        assert!(matches!(weight_saliency(&w, &est), Err(Error::Numeric(_))));
    }

    #[test]
    fn diagonal_hessian_saliency_closed_form() {
        let mut h = DenseMatrix::zeros(2, 2);
        h.set(0, 0, 4.0);
        h.set(1, 1, 0.5);
        let est = HessianEstimate {
            dim: 2,
            h,
            damping: 0.0,
        };
        let w = DenseMatrix::from_vec(1, 2, vec![3.0, 3.0]).unwrap();
        let s = weight_saliency(&w, &est).unwrap();
        // [H^-1]_cc = 1/h_cc, so s = w^2 * h_cc^2
        assert!((s.get(0, 0) - 9.0 * 16.0).abs() < 1e-3);
        assert!((s.get(0, 1) - 9.0 * 0.25).abs() < 1e-4);
    }

    #[test]
    fn inverse_diagonal_matches_full_inverse() {
        let calib = crate::dense::CalibrationSet::synthetic(32, 12, 9).unwrap();
        let est = estimate_hessian(&calib.samples, DEFAULT_DAMPING).unwrap();
        let diag = inverse_diagonal(&est.h).unwrap();
        let full = invert_dense(&est.h);
        for c in 0..est.dim {
            let want = full[c * est.dim + c];
            assert!(
                (diag[c] - want).abs() <= 1e-6 * want.abs().max(1.0),
                "col {c}: {} vs {want}",
                diag[c]
            );
        }
    }

    #[test]
    fn saliency_grows_with_weight_magnitude() {
        let calib = crate::dense::CalibrationSet::synthetic(16, 4, 1).unwrap();
        let est = estimate_hessian(&calib.samples, DEFAULT_DAMPING).unwrap();
        let w = DenseMatrix::from_vec(2, 4, vec![0.1, 0.2, 0.3, 0.4, 1.0, 2.0, 3.0, 4.0]).unwrap();
        let s = weight_saliency(&w, &est).unwrap();
        for c in 0..4 {
            assert!(s.get(1, c) > s.get(0, c));
        }
        let zero = DenseMatrix::zeros(1, 4);
        let sz = weight_saliency(&zero, &est).unwrap();
        assert!(sz.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn group_saliency_means() {
        let per_weight = DenseMatrix::from_vec(1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let g = group_saliency(&per_weight, 2).unwrap();
        assert_eq!(g.data, vec![1.5, 3.5]);
        assert!(matches!(
            group_saliency(&per_weight, 3),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn saliency_map_bundles_consistent_views() {
        let w = make_synthetic(4, 8, 2, Distribution::Gaussian).unwrap();
        let calib = crate::dense::CalibrationSet::synthetic(16, 8, 2).unwrap();
        let est = estimate_hessian(&calib.samples, DEFAULT_DAMPING).unwrap();
        let per_weight = weight_saliency(&w, &est).unwrap();
        let map = SaliencyMap::new(per_weight.clone(), 4).unwrap();
        assert_eq!(map.per_group.cols, 2);
        for r in 0..4 {
            for g in 0..2 {
                let mean: f32 = (0..4).map(|i| per_weight.get(r, g * 4 + i)).sum::<f32>() / 4.0;
                assert!((map.per_group.get(r, g) - mean).abs() < 1e-6);
            }
        }
    }
}
