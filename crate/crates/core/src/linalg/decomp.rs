//! QR factorization and singular values.

use num_complex::Complex64;

use super::{ComplexMatrix, LinalgError};

const JACOBI_SWEEPS: usize = 60;

/// Householder QR of a square matrix; returns `(Q, R)` with `Q` unitary and
/// `R` upper triangular.
pub fn qr(a: &ComplexMatrix) -> Result<(ComplexMatrix, ComplexMatrix), LinalgError> {
    if !a.is_square() {
        return Err(LinalgError::NonSquare {
            rows: a.rows(),
            cols: a.cols(),
        });
    }
    let n = a.rows();
    let mut r = a.clone();
    let mut q = ComplexMatrix::identity(n);
    let mut v = vec![Complex64::new(0.0, 0.0); n];
    for k in 0..n.saturating_sub(1) {
        let norm = (k..n).map(|i| r[(i, k)].norm_sqr()).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let x0 = r[(k, k)];
        let phase = if x0.norm() > 0.0 {
            x0 / x0.norm()
        } else {
            Complex64::new(1.0, 0.0)
        };
        let alpha = -phase * norm;
        for i in k..n {
            v[i] = r[(i, k)];
        }
        v[k] -= alpha;
        let vnorm = (k..n).map(|i| v[i].norm_sqr()).sum::<f64>().sqrt();
        if vnorm == 0.0 {
            continue;
        }
        for x in v[k..].iter_mut() {
            *x /= vnorm;
        }
        // R ← P R
        for c in k..n {
            let s: Complex64 = (k..n).map(|i| v[i].conj() * r[(i, c)]).sum();
            let s = s * 2.0;
            for i in k..n {
                let t = v[i] * s;
                r[(i, c)] -= t;
            }
        }
        // Q ← Q P
        for row in 0..n {
            let s: Complex64 = (k..n).map(|i| q[(row, i)] * v[i]).sum();
            let s = s * 2.0;
            for i in k..n {
                let t = s * v[i].conj();
                q[(row, i)] -= t;
            }
        }
        for i in k + 1..n {
            r[(i, k)] = Complex64::new(0.0, 0.0);
        }
    }
    Ok((q, r))
}

/// Unitary factor of the QR decomposition with the phases of `R`'s diagonal
/// moved into `Q`, so that the result is unique (`R` has a positive real
/// diagonal). Applied to a Ginibre matrix this is Haar distributed.
pub fn qr_unitary(a: &ComplexMatrix) -> ComplexMatrix {
    let (mut q, r) = qr(a).expect("qr_unitary requires a square matrix");
    let n = q.rows();
    for c in 0..n {
        let d = r[(c, c)];
        let ph = if d.norm() > 0.0 {
            d / d.norm()
        } else {
            Complex64::new(1.0, 0.0)
        };
        for row in 0..n {
            q[(row, c)] *= ph;
        }
    }
    q
}

/// Singular values in descending order, by one-sided Jacobi rotations on the
/// columns. Small singular values are computed to high relative accuracy,
/// which matters for sums of singular values of low-rank matrices.
pub fn singular_values(a: &ComplexMatrix) -> Result<Vec<f64>, LinalgError> {
    // Work on the orientation with at most as many columns as rows.
    let mut w = if a.cols() > a.rows() {
        a.adjoint()
    } else {
        a.clone()
    };
    let (m, n) = w.shape();
    if n == 0 {
        return Ok(Vec::new());
    }
    // Columns below this squared norm are numerically zero; rotating them
    // against a parallel column never terminates.
    let negligible = (f64::EPSILON * w.frobenius_norm()).powi(2);
    let mut converged = false;
    for _ in 0..JACOBI_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let mut alpha = 0.0;
                let mut beta = 0.0;
                let mut gamma = Complex64::new(0.0, 0.0);
                for i in 0..m {
                    let wp = w[(i, p)];
                    let wq = w[(i, q)];
                    alpha += wp.norm_sqr();
                    beta += wq.norm_sqr();
                    gamma += wp.conj() * wq;
                }
                let g = gamma.norm();
                if alpha <= negligible || beta <= negligible {
                    continue;
                }
                if g == 0.0 || g <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                // Rotation zeroing the (p, q) entry of the 2x2 Gram block.
                let phase = gamma / g;
                let zeta = (beta - alpha) / (2.0 * g);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..m {
                    let wp = w[(i, p)];
                    let wq = w[(i, q)];
                    w[(i, p)] = wp * c - wq * phase.conj() * s;
                    w[(i, q)] = wp * phase * s + wq * c;
                }
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(LinalgError::NoConvergence);
    }
    let mut sv: Vec<f64> = (0..n)
        .map(|c| (0..m).map(|i| w[(i, c)].norm_sqr()).sum::<f64>().sqrt())
        .collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    Ok(sv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::hermitian_eigenvalues;
    use crate::linalg::test_support::random_complex;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn qr_reconstructs_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_complex(5, 5, &mut rng);
        let (q, r) = qr(&a).unwrap();
        let back = q.matmul(&r).unwrap();
        assert!(back.sub(&a).unwrap().max_abs() < 1e-13);
        let qtq = q.adjoint().matmul(&q).unwrap();
        assert!(qtq.sub(&ComplexMatrix::identity(5)).unwrap().max_abs() < 1e-13);
        for i in 0..5 {
            for j in 0..i {
                assert_eq!(r[(i, j)], Complex64::new(0.0, 0.0));
            }
        }
    }

    #[test]
    fn singular_values_match_gram_eigenvalues() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (m, n) in [(4, 4), (6, 3), (3, 6), (9, 9)] {
            let a = random_complex(m, n, &mut rng);
            let sv = singular_values(&a).unwrap();
            let gram = a.adjoint().matmul(&a).unwrap();
            let mut ev: Vec<f64> = hermitian_eigenvalues(&gram).unwrap().into_vec();
            ev.reverse();
            for (s, e) in sv.iter().zip(ev.iter()) {
                assert!((s * s - e).abs() < 1e-10 * e.abs().max(1.0), "{s} vs {e}");
            }
        }
    }

    #[test]
    fn rank_one_has_single_nonzero_singular_value() {
        let v: Vec<Complex64> = (0..4)
            .map(|i| Complex64::new(i as f64 + 1.0, 0.5))
            .collect();
        let p = ComplexMatrix::projector(&v);
        let sv = singular_values(&p).unwrap();
        let norm2: f64 = v.iter().map(|z| z.norm_sqr()).sum();
        assert!((sv[0] - norm2).abs() < 1e-12);
        assert!(sv[1..].iter().all(|&s| s < 1e-13));
    }
}
