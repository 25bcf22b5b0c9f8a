// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use super::dense::{dot, fix_sign, norm, normalize, DenseMatrix};
use super::symmetric::symmetric_eigen;
use crate::error::{Error, Result};

/// Top principal components of a sample set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaResult {
    /// Unit vectors, descending variance, largest-magnitude coordinate positive.
    pub components: Vec<Vec<f64>>,
    /// Eigenvalues of the (co)variance matrix for each component.
    pub explained_variance: Vec<f64>,
    pub explained_variance_ratio: Vec<f64>,
    /// Sample mean, present when the samples were centered.
    pub mean: Option<Vec<f64>>,
}

/// Top-`k` eigenvectors of the sample covariance (or, with `center = false`,
/// of the uncentered second-moment matrix).
///
/// Works on the `d×d` covariance when `d ≤ #samples`, otherwise on the
/// `m×m` Gram matrix and maps the eigenvectors back through the samples.
pub fn pca_components<S: AsRef<[f64]>>(samples: &[S], k: usize, center: bool) -> Result<PcaResult> {
    let m = samples.len();
    if m < 2 {
        return Err(Error::TooFewSamples { needed: 2, found: m });
    }
    let d = samples[0].as_ref().len();
    if d == 0 {
        return Err(Error::InvalidShape("samples have dimension 0".into()));
    }
    for s in samples {
        if s.as_ref().len() != d {
            return Err(Error::DimensionMismatch {
                context: "pca samples",
                expected: d,
                found: s.as_ref().len(),
            });
        }
        if s.as_ref().iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("pca samples"));
        }
    }
    if k == 0 || k > m.min(d) {
        return Err(Error::InvalidArgument(format!(
            "k must be in 1..={}, got {k}",
            m.min(d)
        )));
    }

    let mean = center.then(|| {
        let mut mu = vec![0.0; d];
        for s in samples {
            for (a, x) in mu.iter_mut().zip(s.as_ref()) {
                *a += x;
            }
        }
        mu.iter_mut().for_each(|a| *a /= m as f64);
        mu
    });
    let mut x = Vec::with_capacity(m * d);
    for s in samples {
        match &mean {
            Some(mu) => x.extend(s.as_ref().iter().zip(mu).map(|(a, b)| a - b)),
            None => x.extend_from_slice(s.as_ref()),
        }
    }
    let x = DenseMatrix::from_parts_unchecked(m, d, x);
    let divisor = if center { (m - 1) as f64 } else { m as f64 };

    let total: f64 = x.data().iter().map(|v| v * v).sum::<f64>() / divisor;
    if total == 0.0 {
        return Err(Error::ZeroVariance);
    }

    let (values, mut components) = if d <= m {
        let cov = gram_columns(&x).scale(1.0 / divisor);
        let eig = symmetric_eigen(&cov)?;
        (eig.values[..k].to_vec(), eig.vectors[..k].to_vec())
    } else {
        let gram = gram_rows(&x).scale(1.0 / divisor);
        let eig = symmetric_eigen(&gram)?;
        // ‖Xᵀu‖ = √(λ·divisor). Directions at the rounding level of the
        // largest one carry no variance and are completed from the basis.
        let floor = 1e-6 * (eig.values[0].max(0.0) * divisor).sqrt();
        let mut comps: Vec<Vec<f64>> = Vec::with_capacity(k);
        for u in &eig.vectors[..k] {
            let mut c = x.vec_mul(u)?;
            for b in &comps {
                let p = dot(&c, b);
                c.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
            }
            if normalize(&mut c) <= floor {
                c = complete_basis(&comps, d);
            }
            comps.push(c);
        }
        (eig.values[..k].to_vec(), comps)
    };
    components.iter_mut().for_each(|c| fix_sign(c));
    let explained_variance: Vec<f64> = values.iter().map(|v| v.max(0.0)).collect();
    let explained_variance_ratio = explained_variance
        .iter()
        .map(|v| (v / total).clamp(0.0, 1.0))
        .collect();

    Ok(PcaResult {
        components,
        explained_variance,
        explained_variance_ratio,
        mean,
    })
}

/// `XᵀX` for an `m×d` matrix.
fn gram_columns(x: &DenseMatrix) -> DenseMatrix {
    let d = x.cols();
    let mut g = vec![0.0; d * d];
    for r in x.row_iter() {
        for i in 0..d {
            let ri = r[i];
            if ri == 0.0 {
                continue;
            }
            for j in 0..=i {
                g[i * d + j] += ri * r[j];
            }
        }
    }
    mirror_lower(&mut g, d);
    DenseMatrix::from_parts_unchecked(d, d, g)
}

/// `XXᵀ` for an `m×d` matrix.
fn gram_rows(x: &DenseMatrix) -> DenseMatrix {
    let m = x.rows();
    let mut g = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..=i {
            g[i * m + j] = dot(x.row(i), x.row(j));
        }
    }
    mirror_lower(&mut g, m);
    DenseMatrix::from_parts_unchecked(m, m, g)
}

fn mirror_lower(g: &mut [f64], n: usize) {
    for i in 0..n {
        for j in i + 1..n {
            g[i * n + j] = g[j * n + i];
        }
    }
}

/// First standard basis vector that survives Gram–Schmidt against `basis`.
fn complete_basis(basis: &[Vec<f64>], d: usize) -> Vec<f64> {
    for axis in 0..d {
        let mut e = vec![0.0; d];
        e[axis] = 1.0;
        for b in basis {
            let p = dot(&e, b);
            e.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        if normalize(&mut e) > 1e-6 {
            return e;
        }
    }
    unreachable!("fewer than d basis vectors always leave a free axis")
}

/// Unit left singular vector for the largest singular value of `m`.
pub fn dominant_left_singular_vector(m: &DenseMatrix) -> Result<Vec<f64>> {
    let fro = m.frobenius_norm();
    if fro == 0.0 {
        return Err(Error::ZeroVector("dominant_left_singular_vector"));
    }
    let (sigma_sq, mut u) = if m.rows() <= m.cols() {
        let eig = symmetric_eigen(&gram_rows(m))?;
        (eig.values[0], eig.vectors[0].clone())
    } else {
        let eig = symmetric_eigen(&gram_columns(m))?;
        let mut u = m.mul_vec(&eig.vectors[0])?;
        normalize(&mut u);
        (eig.values[0], u)
    };
    fix_sign(&mut u);

    // ‖m·mᵀ·u − σ²u‖ ≤ 1e-8‖m‖²
    let mtu = m.vec_mul(&u)?;
    let mmtu = m.mul_vec(&mtu)?;
    let residual = norm(
        &mmtu
            .iter()
            .zip(&u)
            .map(|(a, b)| a - sigma_sq * b)
            .collect::<Vec<_>>(),
    );
    if residual > 1e-8 * fro * fro {
        return Err(Error::NoConvergence {
            method: "dominant singular vector",
            iterations: 1,
        });
    }
    Ok(u)
}

/// `a·b / (‖a‖‖b‖)`, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            context: "cosine similarity",
            expected: a.len(),
            found: b.len(),
        });
    }
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector("cosine_similarity"));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variance_on_one_axis() {
        let s = [[1.0, 0.0], [-1.0, 0.0], [2.0, 0.0], [-2.0, 0.0]];
        let r = pca_components(&s, 1, true).unwrap();
        assert_eq!(r.components[0], vec![1.0, 0.0]);
        assert!((r.explained_variance_ratio[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn exact_rank_one() {
        let s: Vec<Vec<f64>> = [1.0, -1.0, 2.0, -2.0]
            .iter()
            .map(|c| vec![0.6 * c, 0.8 * c])
            .collect();
        for center in [true, false] {
            let r = pca_components(&s, 1, center).unwrap();
            assert!((r.components[0][0] - 0.6).abs() < 1e-12);
            assert!((r.components[0][1] - 0.8).abs() < 1e-12);
        }
    }

    #[test]
    fn gram_route_matches_covariance_route() {
        // 3 samples in 5 dimensions goes through the Gram matrix.
        let s = [
            [1.0, 2.0, 0.0, -1.0, 0.5],
            [0.0, 1.0, 1.0, 2.0, -0.5],
            [2.0, -1.0, 0.5, 0.0, 1.0],
        ];
        let r = pca_components(&s, 2, true).unwrap();
        // Same data padded with copies so d <= m: covariance of the padded
        // set is a positive multiple of the original, so components agree.
        let mut padded: Vec<Vec<f64>> = Vec::new();
        for _ in 0..2 {
            padded.extend(s.iter().map(|r| r.to_vec()));
        }
        let q = pca_components(&padded, 2, true).unwrap();
        for (a, b) in r.components.iter().zip(&q.components) {
            assert!((dot(a, b).abs() - 1.0).abs() < 1e-10);
        }
        for (a, b) in r.explained_variance_ratio.iter().zip(&q.explained_variance_ratio) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn gram_route_completes_null_components() {
        // Centered rank is m − 1 = 1, so the second component has no variance.
        let s = [[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]];
        let r = pca_components(&s, 2, true).unwrap();
        assert!(dot(&r.components[0], &r.components[1]).abs() < 1e-12);
        assert!((norm(&r.components[1]) - 1.0).abs() < 1e-12);
        assert_eq!(r.explained_variance_ratio[1], 0.0);
    }

    #[test]
    fn pca_errors() {
        assert!(matches!(
            pca_components(&[[1.0, 2.0]], 1, true),
            Err(Error::TooFewSamples { .. })
        ));
        assert!(matches!(
            pca_components(&[[1.0, 2.0], [1.0, 2.0]], 1, true),
            Err(Error::ZeroVariance)
        ));
        assert!(pca_components(&[[1.0, 2.0], [0.0, 2.0]], 3, true).is_err());
    }

    #[test]
    fn singular_vector_rank_one() {
        let u = [0.6, 0.0, -0.8];
        let w = [2.0, -1.0];
        let rows: Vec<Vec<f64>> = u.iter().map(|a| w.iter().map(|b| a * b).collect()).collect();
        let m = DenseMatrix::from_rows(&rows).unwrap();
        let v = dominant_left_singular_vector(&m).unwrap();
        assert!((dot(&v, &u).abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn singular_vector_identity_does_not_error() {
        let v = dominant_left_singular_vector(&DenseMatrix::identity(2).unwrap()).unwrap();
        assert!((norm(&v) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn singular_vector_zero_matrix() {
        let z = DenseMatrix::filled(3, 2, 0.0).unwrap();
        assert!(matches!(
            dominant_left_singular_vector(&z),
            Err(Error::ZeroVector(_))
        ));
    }

    #[test]
    fn cosine_cases() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine_similarity(&[3.0, 4.0], &[6.0, 8.0]).unwrap() - 1.0).abs() < 1e-15);
        let c = cosine_similarity(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert!(matches!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::ZeroVector(_))
        ));
        assert!(cosine_similarity(&[1.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn centered_gram_route_past_rank_stays_orthonormal() {
        // 4 centered samples in 6 dimensions span at most 3.
        let samples = [
            [1.0, 2.0, 0.5, -1.0, 0.0, 3.0],
            [0.3, -1.0, 2.0, 0.0, 1.0, 1.0],
            [-2.0, 0.5, 1.0, 1.0, -1.0, 0.0],
            [0.7, 0.1, -0.4, 2.0, 2.0, -1.5],
        ];
        let pca = pca_components(&samples, 4, true).unwrap();
        for (i, a) in pca.components.iter().enumerate() {
            assert!((norm(a) - 1.0).abs() < 1e-12);
            for b in &pca.components[i + 1..] {
                assert!(dot(a, b).abs() < 1e-12);
            }
        }
        assert!(pca.explained_variance[3] < 1e-12);
    }
}
