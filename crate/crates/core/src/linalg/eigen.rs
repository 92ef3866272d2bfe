//! Hermitian eigensolver: complex Householder reduction to a real symmetric
//! tridiagonal matrix followed by implicit-shift QL iterations.

use num_complex::Complex64;

use super::{ComplexMatrix, LinalgError};

/// Hermiticity accepted on input before symmetrizing.
pub const HERMITIAN_TOL: f64 = 1e-8;

const MAX_QL_ITERATIONS: usize = 64;

/// Real eigenvalues sorted ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum(Vec<f64>);

impl Spectrum {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn min(&self) -> f64 {
        self.0.first().copied().unwrap_or(f64::NAN)
    }

    pub fn max(&self) -> f64 {
        self.0.last().copied().unwrap_or(f64::NAN)
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

/// Eigenvalues with unit eigenvectors stored as the columns of `vectors`.
#[derive(Debug, Clone)]
pub struct EigenDecomposition {
    pub values: Spectrum,
    pub vectors: ComplexMatrix,
}

pub fn hermitian_eigenvalues(m: &ComplexMatrix) -> Result<Spectrum, LinalgError> {
    hermitian_eigen(m).map(|e| e.values)
}

pub fn hermitian_eigen(m: &ComplexMatrix) -> Result<EigenDecomposition, LinalgError> {
    if !m.is_square() {
        return Err(LinalgError::NonSquare {
            rows: m.rows(),
            cols: m.cols(),
        });
    }
    let defect = m.hermiticity_defect();
    if defect > HERMITIAN_TOL {
        return Err(LinalgError::NotHermitian { defect });
    }
    let n = m.rows();
    if n == 0 {
        return Ok(EigenDecomposition {
            values: Spectrum(Vec::new()),
            vectors: ComplexMatrix::zeros(0, 0),
        });
    }

    let mut a = m.hermitian_part();
    let mut q = ComplexMatrix::identity(n);
    tridiagonalize(&mut a, &mut q);

    // Diagonal phase change making the subdiagonal real and non-negative.
    let mut diag: Vec<f64> = (0..n).map(|i| a[(i, i)].re).collect();
    let mut off = vec![0.0; n];
    let mut phase = Complex64::new(1.0, 0.0);
    for i in 0..n.saturating_sub(1) {
        let e = a[(i + 1, i)];
        let r = e.norm();
        off[i] = r;
        if r > 0.0 {
            phase *= e / r;
        }
        for row in 0..n {
            q[(row, i + 1)] *= phase;
        }
    }

    ql_implicit(&mut diag, &mut off, &mut q)?;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| diag[x].total_cmp(&diag[y]));
    let values = order.iter().map(|&i| diag[i]).collect();
    let vectors = ComplexMatrix::from_fn(n, n, |r, c| q[(r, order[c])]);
    Ok(EigenDecomposition {
        values: Spectrum(values),
        vectors,
    })
}

/// Reduces Hermitian `a` in place to tridiagonal form, accumulating the
/// unitary so that `a_original = q a q†`.
fn tridiagonalize(a: &mut ComplexMatrix, q: &mut ComplexMatrix) {
    let n = a.rows();
    let mut v = vec![Complex64::new(0.0, 0.0); n];
    let mut w = vec![Complex64::new(0.0, 0.0); n];
    for k in 0..n.saturating_sub(2) {
        let lo = k + 1;
        let norm = (lo..n).map(|r| a[(r, k)].norm_sqr()).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let x0 = a[(lo, k)];
        let phase = if x0.norm() > 0.0 {
            x0 / x0.norm()
        } else {
            Complex64::new(1.0, 0.0)
        };
        let alpha = -phase * norm;
        for r in lo..n {
            v[r] = a[(r, k)];
        }
        v[lo] -= alpha;
        let vnorm = (lo..n).map(|r| v[r].norm_sqr()).sum::<f64>().sqrt();
        if vnorm == 0.0 {
            continue;
        }
        for x in &mut v[lo..n] {
            *x /= vnorm;
        }

        // Left: rows lo.. ← rows - 2 v (v† A)
        for c in 0..n {
            let mut s = Complex64::new(0.0, 0.0);
            for r in lo..n {
                s += v[r].conj() * a[(r, c)];
            }
            w[c] = s;
        }
        for r in lo..n {
            let vr = v[r] * 2.0;
            for c in 0..n {
                let t = vr * w[c];
                a[(r, c)] -= t;
            }
        }
        // Right: cols lo.. ← cols - 2 (A v) v†
        for r in 0..n {
            let mut s = Complex64::new(0.0, 0.0);
            for c in lo..n {
                s += a[(r, c)] * v[c];
            }
            w[r] = s * 2.0;
        }
        for r in 0..n {
            for c in lo..n {
                let t = w[r] * v[c].conj();
                a[(r, c)] -= t;
            }
        }
        // Accumulate Q ← Q P.
        for r in 0..n {
            let mut s = Complex64::new(0.0, 0.0);
            for c in lo..n {
                s += q[(r, c)] * v[c];
            }
            let s = s * 2.0;
            for c in lo..n {
                let t = s * v[c].conj();
                q[(r, c)] -= t;
            }
        }
        // Clean the annihilated entries exactly.
        a[(lo, k)] = alpha;
        a[(k, lo)] = alpha.conj();
        for r in lo + 1..n {
            a[(r, k)] = Complex64::new(0.0, 0.0);
            a[(k, r)] = Complex64::new(0.0, 0.0);
        }
    }
}

/// Implicit-shift QL on a symmetric tridiagonal matrix. `off[i]` couples
/// `i` and `i + 1`; the last entry is scratch. Rotations are applied to the
/// columns of `z`.
fn ql_implicit(d: &mut [f64], off: &mut [f64], z: &mut ComplexMatrix) -> Result<(), LinalgError> {
    let n = d.len();
    if n > 0 {
        off[n - 1] = 0.0;
    }
    for l in 0..n {
        let mut iter = 0;
        loop {
            let mut m = l;
            while m + 1 < n {
                let dd = d[m].abs() + d[m + 1].abs();
                if off[m].abs() <= f64::EPSILON * dd {
                    break;
                }
                m += 1;
            }
            if m == l {
                break;
            }
            iter += 1;
            if iter > MAX_QL_ITERATIONS {
                return Err(LinalgError::NoConvergence);
            }
            let mut g = (d[l + 1] - d[l]) / (2.0 * off[l]);
            let mut r = g.hypot(1.0);
            g = d[m] - d[l] + off[l] / (g + r.copysign(g));
            let (mut s, mut c, mut p) = (1.0, 1.0, 0.0);
            let mut i = m;
            let mut deflated = false;
            while i > l {
                i -= 1;
                let f = s * off[i];
                let b = c * off[i];
                r = f.hypot(g);
                off[i + 1] = r;
                if r == 0.0 {
                    d[i + 1] -= p;
                    off[m] = 0.0;
                    deflated = true;
                    break;
                }
                s = f / r;
                c = g / r;
                g = d[i + 1] - p;
                r = (d[i] - g) * s + 2.0 * c * b;
                p = s * r;
                d[i + 1] = g + p;
                g = c * r - b;
                for k in 0..z.rows() {
                    let zf = z[(k, i + 1)];
                    let zi = z[(k, i)];
                    z[(k, i + 1)] = zi * s + zf * c;
                    z[(k, i)] = zi * c - zf * s;
                }
            }
            if deflated {
                continue;
            }
            d[l] -= p;
            off[l] = g;
            off[m] = 0.0;
        }
    }
    Ok(())
}
