// SPDX-License-Identifier: MIT OR Apache-2.0

//! Eigenvalues of general (non-symmetric) real matrices.
//!
//! The matrix is balanced, reduced to upper Hessenberg form with Householder
//! reflections, and the Hessenberg matrix is driven to quasi-triangular form
//! with the Francis double-shift QR iteration. Eigenvalues come out of the
//! 1x1 and 2x2 diagonal blocks. The dominant real eigenvector is recovered
//! afterwards by inverse iteration on the original matrix.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::dense::{fix_sign, norm, normalize, DenseMatrix};
use crate::error::{Error, Result};

/// Largest order accepted by [`eigen_spectrum`].
pub const MAX_EIGEN_ORDER: usize = 4096;

/// Iterations allowed per eigenvalue before the QR sweep gives up.
const MAX_SWEEPS_PER_EIGENVALUE: usize = 60;

/// Relative modulus difference below which two real eigenvalues tie for
/// dominance.
const DOMINANT_TIE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    /// All eigenvalues, ordered by descending modulus.
    pub eigenvalues: Vec<Complex64>,
    /// `|λᵢ|`, non-increasing.
    pub magnitudes: Vec<f64>,
    /// Real eigenvalue of largest modulus; `None` if every eigenvalue is complex.
    pub dominant_value: Option<f64>,
    /// Unit right eigenvector for `dominant_value`.
    pub dominant_vector: Option<Vec<f64>>,
}

impl Spectrum {
    pub fn order(&self) -> usize {
        self.magnitudes.len()
    }

    /// Second-largest modulus, 0 for 1x1 matrices.
    pub fn second_magnitude(&self) -> f64 {
        self.magnitudes.get(1).copied().unwrap_or(0.0)
    }
}

pub fn eigen_spectrum(m: &DenseMatrix) -> Result<Spectrum> {
    let eigenvalues = eigenvalues(m)?;
    let magnitudes: Vec<f64> = eigenvalues.iter().map(|z| z.norm()).collect();

    // Real eigenvalues come out of the QR sweep with an exactly zero imaginary
    // part. Moduli within rounding of the largest count as tied, and ties
    // favour the most positive value, so a computed −1.0000000000000004
    // does not beat +1.
    let reals = eigenvalues.iter().filter(|z| z.im == 0.0).map(|z| z.re);
    let max_mod = reals.clone().map(f64::abs).fold(None, |m: Option<f64>, x| {
        Some(m.map_or(x, |m| m.max(x)))
    });
    let dominant_value = max_mod.and_then(|mm| {
        let floor = mm - DOMINANT_TIE_TOL * mm.max(1.0);
        reals.filter(|x| x.abs() >= floor).reduce(f64::max)
    });
    let dominant_vector = match dominant_value {
        Some(lambda) => Some(inverse_iteration(m, lambda)?),
        None => None,
    };

    Ok(Spectrum {
        eigenvalues,
        magnitudes,
        dominant_value,
        dominant_vector,
    })
}

/// All eigenvalues of a square matrix, sorted by descending modulus
/// (ties: larger real part first, then larger imaginary part).
pub fn eigenvalues(m: &DenseMatrix) -> Result<Vec<Complex64>> {
    if !m.is_square() {
        return Err(Error::NotSquare {
            rows: m.rows(),
            cols: m.cols(),
        });
    }
    let n = m.rows();
    if n > MAX_EIGEN_ORDER {
        return Err(Error::InvalidArgument(format!(
            "eigen_spectrum supports n <= {MAX_EIGEN_ORDER}, got {n}"
        )));
    }
    if m.data().iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("eigen_spectrum input"));
    }

    let mut a = m.data().to_vec();
    let (mut values, lo, hi) = isolate(&mut a, n);
    let k = hi - lo;
    if k > 0 {
        let mut b: Vec<f64> = (lo..hi)
            .flat_map(|i| a[i * n + lo..i * n + hi].iter().copied())
            .collect();
        balance(&mut b, k);
        hessenberg(&mut b, k);
        values.extend(hqr(&mut b, k)?);
    }
    values.sort_by(|x, y| {
        y.norm()
            .total_cmp(&x.norm())
            .then(y.re.total_cmp(&x.re))
            .then(y.im.total_cmp(&x.im))
    });
    Ok(values)
}

/// Symmetric row/column permutations that move rows (then columns) with
/// no off-diagonal entries in the active block out of it. The moved
/// diagonal entries are exact eigenvalues; triangular inputs are solved
/// completely here. Returns them with the remaining block `lo..hi`.
fn isolate(a: &mut [f64], n: usize) -> (Vec<Complex64>, usize, usize) {
    let swap = |a: &mut [f64], i: usize, j: usize| {
        if i == j {
            return;
        }
        for c in 0..n {
            a.swap(i * n + c, j * n + c);
        }
        for r in 0..n {
            a.swap(r * n + i, r * n + j);
        }
    };
    let mut values = Vec::new();
    let (mut lo, mut hi) = (0, n);
    'rows: while hi > lo {
        for j in (lo..hi).rev() {
            if (lo..hi).all(|c| c == j || a[j * n + c] == 0.0) {
                swap(a, j, hi - 1);
                hi -= 1;
                values.push(Complex64::new(a[hi * n + hi], 0.0));
                continue 'rows;
            }
        }
        break;
    }
    'cols: while hi > lo {
        for j in lo..hi {
            if (lo..hi).all(|r| r == j || a[r * n + j] == 0.0) {
                swap(a, j, lo);
                values.push(Complex64::new(a[lo * n + lo], 0.0));
                lo += 1;
                continue 'cols;
            }
        }
        break;
    }
    (values, lo, hi)
}

/// Diagonal similarity scaling by powers of two so row and column norms
/// are comparable. Exact in floating point, eigenvalues unchanged.
fn balance(a: &mut [f64], n: usize) {
    const RADIX: f64 = 2.0;
    let sqrdx = RADIX * RADIX;
    let mut done = false;
    while !done {
        done = true;
        for i in 0..n {
            let mut r = 0.0;
            let mut c = 0.0;
            for j in 0..n {
                if j != i {
                    c += a[j * n + i].abs();
                    r += a[i * n + j].abs();
                }
            }
            if c == 0.0 || r == 0.0 {
                continue;
            }
            let s = c + r;
            let mut f = 1.0;
            let mut g = r / RADIX;
            while c < g {
                f *= RADIX;
                c *= sqrdx;
            }
            g = r * RADIX;
            while c > g {
                f /= RADIX;
                c /= sqrdx;
            }
            if (c + r) / f < 0.95 * s {
                done = false;
                let g = 1.0 / f;
                for j in 0..n {
                    a[i * n + j] *= g;
                }
                for j in 0..n {
                    a[j * n + i] *= f;
                }
            }
        }
    }
}

/// Householder reduction to upper Hessenberg form; entries below the first
/// subdiagonal are zeroed on exit.
fn hessenberg(h: &mut [f64], n: usize) {
    if n < 3 {
        return;
    }
    let high = n - 1;
    let mut ort = vec![0.0; n];
    for m in 1..high {
        let scale: f64 = (m..=high).map(|i| h[i * n + m - 1].abs()).sum();
        if scale == 0.0 {
            continue;
        }
        let mut hh = 0.0;
        for i in (m..=high).rev() {
            ort[i] = h[i * n + m - 1] / scale;
            hh += ort[i] * ort[i];
        }
        let mut g = hh.sqrt();
        if ort[m] > 0.0 {
            g = -g;
        }
        hh -= ort[m] * g;
        ort[m] -= g;

        for j in m..n {
            let mut f = 0.0;
            for i in (m..=high).rev() {
                f += ort[i] * h[i * n + j];
            }
            f /= hh;
            for i in m..=high {
                h[i * n + j] -= f * ort[i];
            }
        }
        for i in 0..=high {
            let mut f = 0.0;
            for j in (m..=high).rev() {
                f += ort[j] * h[i * n + j];
            }
            f /= hh;
            for j in m..=high {
                h[i * n + j] -= f * ort[j];
            }
        }
        ort[m] *= scale;
        h[m * n + m - 1] = scale * g;
    }
    for i in 2..n {
        for j in 0..i - 1 {
            h[i * n + j] = 0.0;
        }
    }
}

/// Francis double-shift QR on an upper Hessenberg matrix (destroyed).
fn hqr(a: &mut [f64], n: usize) -> Result<Vec<Complex64>> {
    let eps = f64::EPSILON;
    let at = |i: usize, j: usize| i * n + j;
    let mut wr = vec![Complex64::new(0.0, 0.0); n];

    let mut anorm = 0.0;
    for i in 0..n {
        for j in i.saturating_sub(1)..n {
            anorm += a[at(i, j)].abs();
        }
    }

    // `nn` is the index of the bottom row of the active block; stored as
    // isize so the final deflation can step below zero.
    let mut nn = n as isize - 1;
    let mut t = 0.0;
    while nn >= 0 {
        let mut its = 0usize;
        loop {
            let nu = nn as usize;
            // Look for a negligible subdiagonal element.
            let mut l = nu;
            while l > 0 {
                let mut s = a[at(l - 1, l - 1)].abs() + a[at(l, l)].abs();
                if s == 0.0 {
                    s = anorm;
                }
                if a[at(l, l - 1)].abs() <= eps * s {
                    a[at(l, l - 1)] = 0.0;
                    break;
                }
                l -= 1;
            }

            let mut x = a[at(nu, nu)];
            if l == nu {
                // One root found.
                wr[nu] = Complex64::new(x + t, 0.0);
                nn -= 1;
                break;
            }
            let mut y = a[at(nu - 1, nu - 1)];
            let mut w = a[at(nu, nu - 1)] * a[at(nu - 1, nu)];
            if l == nu - 1 {
                // Two roots from the trailing 2x2 block.
                let p = 0.5 * (y - x);
                let q = p * p + w;
                let z = q.abs().sqrt();
                x += t;
                if q >= 0.0 {
                    let z = p + z.copysign(p);
                    wr[nu - 1] = Complex64::new(x + z, 0.0);
                    wr[nu] = if z != 0.0 {
                        Complex64::new(x - w / z, 0.0)
                    } else {
                        Complex64::new(x + z, 0.0)
                    };
                } else {
                    wr[nu] = Complex64::new(x + p, -z);
                    wr[nu - 1] = Complex64::new(x + p, z);
                }
                nn -= 2;
                break;
            }

            if its == MAX_SWEEPS_PER_EIGENVALUE {
                return Err(Error::NoConvergence {
                    method: "Hessenberg QR",
                    iterations: its,
                });
            }
            if its > 0 && its % 10 == 0 {
                // Exceptional shift.
                t += x;
                for i in 0..=nu {
                    a[at(i, i)] -= x;
                }
                let s = a[at(nu, nu - 1)].abs() + a[at(nu - 1, nu - 2)].abs();
                x = 0.75 * s;
                y = x;
                w = -0.4375 * s * s;
            }
            its += 1;

            // Form the shift and look for two consecutive small subdiagonals.
            let (mut p, mut q, mut r);
            let mut m = nu - 2;
            loop {
                let z = a[at(m, m)];
                let rr = x - z;
                let ss = y - z;
                p = (rr * ss - w) / a[at(m + 1, m)] + a[at(m, m + 1)];
                q = a[at(m + 1, m + 1)] - z - rr - ss;
                r = a[at(m + 2, m + 1)];
                let s = p.abs() + q.abs() + r.abs();
                p /= s;
                q /= s;
                r /= s;
                if m == l {
                    break;
                }
                let u = a[at(m, m - 1)].abs() * (q.abs() + r.abs());
                let v = p.abs() * (a[at(m - 1, m - 1)].abs() + z.abs() + a[at(m + 1, m + 1)].abs());
                if u <= eps * v {
                    break;
                }
                m -= 1;
            }
            for i in m..nu - 1 {
                a[at(i + 2, i)] = 0.0;
                if i != m {
                    a[at(i + 2, i - 1)] = 0.0;
                }
            }

            // Double QR step on rows l..=nu, columns m..=nu.
            for k in m..nu {
                if k != m {
                    p = a[at(k, k - 1)];
                    q = a[at(k + 1, k - 1)];
                    r = if k + 1 != nu { a[at(k + 2, k - 1)] } else { 0.0 };
                    x = p.abs() + q.abs() + r.abs();
                    if x != 0.0 {
                        p /= x;
                        q /= x;
                        r /= x;
                    }
                }
                let s = (p * p + q * q + r * r).sqrt().copysign(p);
                if s == 0.0 {
                    continue;
                }
                if k == m {
                    if l != m {
                        a[at(k, k - 1)] = -a[at(k, k - 1)];
                    }
                } else {
                    a[at(k, k - 1)] = -s * x;
                }
                p += s;
                x = p / s;
                y = q / s;
                let z = r / s;
                q /= p;
                r /= p;
                for j in k..=nu {
                    let mut pp = a[at(k, j)] + q * a[at(k + 1, j)];
                    if k + 1 != nu {
                        pp += r * a[at(k + 2, j)];
                        a[at(k + 2, j)] -= pp * z;
                    }
                    a[at(k + 1, j)] -= pp * y;
                    a[at(k, j)] -= pp * x;
                }
                let mmin = nu.min(k + 3);
                for i in l..=mmin {
                    let mut pp = x * a[at(i, k)] + y * a[at(i, k + 1)];
                    if k + 1 != nu {
                        pp += z * a[at(i, k + 2)];
                        a[at(i, k + 2)] -= pp * r;
                    }
                    a[at(i, k + 1)] -= pp * q;
                    a[at(i, k)] -= pp;
                }
            }
        }
    }
    Ok(wr)
}

/// Unit right eigenvector for a known real eigenvalue, by inverse iteration
/// from the normalized all-ones vector.
fn inverse_iteration(m: &DenseMatrix, lambda: f64) -> Result<Vec<f64>> {
    let n = m.rows();
    let scale = m.frobenius_norm().max(f64::MIN_POSITIVE);
    let mut shifted = m.data().to_vec();
    for i in 0..n {
        shifted[i * n + i] -= lambda;
    }
    let lu = Lu::factor(shifted, n, f64::EPSILON * scale);
    let mut x = vec![1.0 / (n as f64).sqrt(); n];
    for _ in 0..3 {
        let mut y = lu.solve(&x);
        if normalize(&mut y) == 0.0 || y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NoConvergence {
                method: "inverse iteration",
                iterations: 3,
            });
        }
        x = y;
    }
    fix_sign(&mut x);
    debug_assert!((norm(&x) - 1.0).abs() < 1e-12);
    Ok(x)
}

/// LU with partial pivoting; exactly singular pivots are replaced by `tiny`.
struct Lu {
    n: usize,
    lu: Vec<f64>,
    perm: Vec<usize>,
}

impl Lu {
    fn factor(mut a: Vec<f64>, n: usize, tiny: f64) -> Self {
        let mut perm: Vec<usize> = (0..n).collect();
        for k in 0..n {
            let mut piv = k;
            for i in k + 1..n {
                if a[i * n + k].abs() > a[piv * n + k].abs() {
                    piv = i;
                }
            }
            if piv != k {
                for j in 0..n {
                    a.swap(k * n + j, piv * n + j);
                }
                perm.swap(k, piv);
            }
            if a[k * n + k].abs() < tiny {
                a[k * n + k] = if a[k * n + k] < 0.0 { -tiny } else { tiny };
            }
            let d = a[k * n + k];
            for i in k + 1..n {
                let f = a[i * n + k] / d;
                a[i * n + k] = f;
                if f != 0.0 {
                    for j in k + 1..n {
                        a[i * n + j] -= f * a[k * n + j];
                    }
                }
            }
        }
        Self { n, lu: a, perm }
    }

    fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            for j in 0..i {
                x[i] -= self.lu[i * n + j] * x[j];
            }
        }
        for i in (0..n).rev() {
            for j in i + 1..n {
                x[i] -= self.lu[i * n + j] * x[j];
            }
            x[i] /= self.lu[i * n + i];
        }
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mags(rows: &[&[f64]]) -> Vec<f64> {
        eigen_spectrum(&DenseMatrix::from_rows(rows).unwrap())
            .unwrap()
            .magnitudes
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn identity_and_uniform() {
        let s = eigen_spectrum(&DenseMatrix::identity(3).unwrap()).unwrap();
        assert!(close(&s.magnitudes, &[1.0, 1.0, 1.0], 1e-14));
        assert_eq!(s.dominant_value, Some(1.0));

        let u = DenseMatrix::filled(4, 4, 0.25).unwrap();
        let s = eigen_spectrum(&u).unwrap();
        assert!(close(&s.magnitudes, &[1.0, 0.0, 0.0, 0.0], 1e-14));
        let v = s.dominant_vector.unwrap();
        assert!(close(&v, &[0.5; 4], 1e-12));
    }

    #[test]
    fn two_by_two_stochastic() {
        // λ² − 1.7λ + 0.7 = (λ − 1)(λ − 0.7)
        let disc: f64 = 1.7 * 1.7 - 4.0 * 0.7;
        let oracle = [(1.7 + disc.sqrt()) / 2.0, (1.7 - disc.sqrt()) / 2.0];
        let m = mags(&[&[0.9, 0.1], &[0.2, 0.8]]);
        assert!(close(&m, &oracle, 1e-14));
        assert!(close(&m, &[1.0, 0.7], 1e-14));
    }

    #[test]
    fn rotation_has_no_real_eigenvalue() {
        let r = DenseMatrix::from_rows(&[[0.0, -1.0], [1.0, 0.0]]).unwrap();
        let s = eigen_spectrum(&r).unwrap();
        assert!(close(&s.magnitudes, &[1.0, 1.0], 1e-14));
        assert!(s.dominant_value.is_none());
        assert!(s.dominant_vector.is_none());
    }

    #[test]
    fn cyclic_permutation_converges() {
        // Unshifted QR stalls on cyclic permutations; exceptional shifts must kick in.
        let n = 7;
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + (i + 1) % n] = 1.0;
        }
        let p = DenseMatrix::new(n, n, data).unwrap();
        let s = eigen_spectrum(&p).unwrap();
        assert!(s.magnitudes.iter().all(|m| (m - 1.0).abs() < 1e-10));
        assert!((s.dominant_value.unwrap() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn near_tied_modulus_prefers_positive() {
        // diag(−(1 + 4ε), 1): the negative value is larger only by rounding.
        let m = DenseMatrix::from_rows(&[[-1.0000000000000004, 0.0], [0.0, 1.0]]).unwrap();
        assert_eq!(eigen_spectrum(&m).unwrap().dominant_value, Some(1.0));
        let m = DenseMatrix::from_rows(&[[-1.5, 0.0], [0.0, 1.0]]).unwrap();
        assert_eq!(eigen_spectrum(&m).unwrap().dominant_value, Some(-1.5));
    }

    #[test]
    fn triangular_eigenvalues_are_diagonal() {
        let m = mags(&[&[0.5, 0.0, 0.0], &[0.3, 0.2, 0.0], &[0.1, 0.4, -0.9]]);
        assert!(close(&m, &[0.9, 0.5, 0.2], 1e-14));
    }

    #[test]
    fn errors() {
        let r = DenseMatrix::from_rows(&[[1.0, 2.0, 3.0]]).unwrap();
        assert!(matches!(eigen_spectrum(&r), Err(Error::NotSquare { .. })));
    }

    #[test]
    fn dominant_vector_is_eigenvector() {
        let m = DenseMatrix::from_rows(&[[2.0, 1.0, 0.0], [1.0, 3.0, 1.0], [0.0, 1.0, 4.0]])
            .unwrap();
        let s = eigen_spectrum(&m).unwrap();
        let lambda = s.dominant_value.unwrap();
        let v = s.dominant_vector.unwrap();
        let mv = m.mul_vec(&v).unwrap();
        let res: f64 = mv
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - lambda * b).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(res < 1e-10, "residual {res}");
        assert!((norm(&v) - 1.0).abs() < 1e-10);
    }

    #[test]
    fn triangular_eigenvalues_are_exact_diagonal() {
        let lower = DenseMatrix::from_rows(&[
            [1.0, 0.0, 0.0, 0.0],
            [0.3, 6.4e-4, 0.0, 0.0],
            [0.2, 0.5, 6.6e-4, 0.0],
            [0.9, -2.0, 7.0, 0.25],
        ])
        .unwrap();
        let mut got: Vec<f64> = eigenvalues(&lower).unwrap().iter().map(|z| z.re).collect();
        got.sort_by(f64::total_cmp);
        assert_eq!(got, vec![6.4e-4, 6.6e-4, 0.25, 1.0]);
        let mut got: Vec<f64> = eigenvalues(&lower.transpose()).unwrap().iter().map(|z| z.re).collect();
        got.sort_by(f64::total_cmp);
        assert_eq!(got, vec![6.4e-4, 6.6e-4, 0.25, 1.0]);
    }

    #[test]
    fn partially_reducible_matrix() {
        // Row 2 decouples; the remaining 2x2 block has eigenvalues ±i.
        let m = DenseMatrix::from_rows(&[[0.0, -1.0, 5.0], [1.0, 0.0, 3.0], [0.0, 0.0, 2.0]]).unwrap();
        let ev = eigenvalues(&m).unwrap();
        assert_eq!(ev[0], Complex64::new(2.0, 0.0));
        assert!((ev[1] - Complex64::new(0.0, 1.0)).norm() < 1e-12);
        assert!((ev[2] - Complex64::new(0.0, -1.0)).norm() < 1e-12);
    }
}
