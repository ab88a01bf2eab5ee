//! Dense SVD via one-sided Jacobi rotations.
//!
//! The alphabets here are tiny (tens of symbols), and the rank tests demand
//! residuals at the 1e-9 level, so the decomposition is computed with
//! one-sided Jacobi: quadratically convergent, high relative accuracy even
//! for small singular values, and free of the convergence edge cases the
//! general-purpose QR-based routines exhibit on these matrices.

use nalgebra::DMatrix;

/// Thin SVD `a = U Σ Vᵀ` with singular values sorted descending.
/// `u` is `m x r`, `v` is `n x r`, `r = min(m, n)`; columns beyond the
/// numerical rank are zero.
pub struct Svd {
    pub singular_values: Vec<f64>,
    pub u: DMatrix<f64>,
    pub v: DMatrix<f64>,
}

/// One-sided Jacobi SVD. Always converges on finite input (sweeps are capped
/// far beyond the quadratic-convergence horizon for desk-scale matrices).
pub fn jacobi_svd(a: &DMatrix<f64>) -> Svd {
    if a.nrows() < a.ncols() {
        let t = jacobi_svd(&a.transpose());
        return Svd {
            singular_values: t.singular_values,
            u: t.v,
            v: t.u,
        };
    }
    let m = a.nrows();
    let n = a.ncols();
    let mut w = a.clone();
    let mut v = DMatrix::identity(n, n);
    let tol = 1e-15;
    let max_sweeps = 64;
    for _ in 0..max_sweeps {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let mut alpha = 0.0;
                let mut beta = 0.0;
                let mut gamma = 0.0;
                for i in 0..m {
                    alpha += w[(i, p)] * w[(i, p)];
                    beta += w[(i, q)] * w[(i, q)];
                    gamma += w[(i, p)] * w[(i, q)];
                }
                if gamma.abs() <= tol * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..m {
                    let wp = w[(i, p)];
                    let wq = w[(i, q)];
                    w[(i, p)] = c * wp - s * wq;
                    w[(i, q)] = s * wp + c * wq;
                }
                for i in 0..n {
                    let vp = v[(i, p)];
                    let vq = v[(i, q)];
                    v[(i, p)] = c * vp - s * vq;
                    v[(i, q)] = s * vp + c * vq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    // Column norms are the singular values; sort descending.
    let mut order: Vec<usize> = (0..n).collect();
    let norms: Vec<f64> = (0..n).map(|c| w.column(c).norm()).collect();
    order.sort_by(|&x, &y| norms[y].partial_cmp(&norms[x]).unwrap());
    let mut singular_values = Vec::with_capacity(n);
    let mut u = DMatrix::zeros(m, n);
    let mut v_sorted = DMatrix::zeros(n, n);
    for (c, &src) in order.iter().enumerate() {
        let sigma = norms[src];
        singular_values.push(sigma);
        if sigma > 0.0 {
            for i in 0..m {
                u[(i, c)] = w[(i, src)] / sigma;
            }
        }
        for i in 0..n {
            v_sorted[(i, c)] = v[(i, src)];
        }
    }
    Svd {
        singular_values,
        u,
        v: v_sorted,
    }
}

/// Singular values only, sorted descending.
pub fn singular_values(a: &DMatrix<f64>) -> Vec<f64> {
    jacobi_svd(a).singular_values
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn reconstruction_residual(a: &DMatrix<f64>, svd: &Svd) -> f64 {
        let sigma = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(
            svd.singular_values.clone(),
        ));
        let rec = &svd.u * sigma * svd.v.transpose();
        (a - rec).amax()
    }

    #[test]
    fn known_diagonal() {
        let a = DMatrix::from_row_slice(3, 2, &[3.0, 0.0, 0.0, -2.0, 0.0, 0.0]);
        let svd = jacobi_svd(&a);
        assert_abs_diff_eq!(svd.singular_values[0], 3.0, epsilon = 1e-14);
        assert_abs_diff_eq!(svd.singular_values[1], 2.0, epsilon = 1e-14);
        assert!(reconstruction_residual(&a, &svd) < 1e-14);
    }

    #[test]
    fn random_matrices_reconstruct_and_are_orthonormal() {
        let mut rng = crate::synth::trial_rng(1234, 0);
        for t in 0..200 {
            let m = 2 + t % 9;
            let n = 2 + (t / 3) % 7;
            let a = DMatrix::from_fn(m, n, |_, _| rng.gen::<f64>() * 2.0 - 1.0);
            let svd = jacobi_svd(&a);
            assert!(
                reconstruction_residual(&a, &svd) < 1e-12,
                "residual too big at {m}x{n}"
            );
            let r = m.min(n);
            let utu = svd.u.columns(0, r).transpose() * svd.u.columns(0, r);
            let vtv = svd.v.columns(0, r).transpose() * svd.v.columns(0, r);
            assert!((utu - DMatrix::identity(r, r)).amax() < 1e-12);
            assert!((vtv - DMatrix::identity(r, r)).amax() < 1e-12);
            for w in svd.singular_values.windows(2) {
                assert!(w[0] >= w[1]);
            }
        }
    }

    #[test]
    fn rank_deficient_input() {
        // Rank-1 outer product: exactly one positive singular value.
        let u = DMatrix::from_row_slice(4, 1, &[1.0, 2.0, -1.0, 0.5]);
        let v = DMatrix::from_row_slice(3, 1, &[0.3, -0.7, 1.1]);
        let a = &u * v.transpose();
        let svd = jacobi_svd(&a);
        assert!(svd.singular_values[0] > 0.1);
        assert!(svd.singular_values[1] < 1e-13);
        assert!(reconstruction_residual(&a, &svd) < 1e-13);
    }
}
