#![allow(clippy::needless_range_loop)]

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Relative pivot threshold below which a column is treated as dependent.
const RANK_TOL: f64 = 1e-12;

/// Thin QR orthonormalization of a `d x k` matrix via Householder
/// reflections. Returns `U` with `U^T U = I_k` and `Col(U) == Col(a)`.
///
/// Signs are normalized so the diagonal of `R` is nonnegative, which makes
/// the result a deterministic function of the input.
pub fn qr_orthonormalize<S: Scalar>(a: &Tensor<S>) -> Result<Tensor<S>> {
    let (d, k) = a.dims2()?;
    if k == 0 || d < k {
        return Err(Error::Dimension {
            op: "qr_orthonormalize",
            msg: format!("need d >= k >= 1, got {d}x{k}"),
        });
    }
    let scale = a.frob_norm();
    let threshold = RANK_TOL * scale;

    let mut r = a.clone();
    // One reflector per column: v (length d - j) and its squared norm.
    let mut reflectors: Vec<(Vec<S>, S)> = Vec::with_capacity(k);

    for j in 0..k {
        let mut norm2 = S::zero();
        for i in j..d {
            let x = r.get2(i, j);
            norm2 = norm2 + x * x;
        }
        let norm = norm2.sqrt();
        if norm.as_f64() <= threshold {
            return Err(Error::DegenerateBasis {
                column: j,
                pivot: norm.as_f64(),
                threshold,
            });
        }
        // v = x - alpha * e1 with alpha = -sign(x0) * ||x||, avoiding
        // cancellation in v[0].
        let x0 = r.get2(j, j);
        let alpha = if x0 >= S::zero() { -norm } else { norm };
        let mut v = vec![S::zero(); d - j];
        v[0] = x0 - alpha;
        for i in (j + 1)..d {
            v[i - j] = r.get2(i, j);
        }
        let vnorm2 = v.iter().fold(S::zero(), |acc, &x| acc + x * x);
        if vnorm2 > S::zero() {
            // Apply H = I - 2 v v^T / (v^T v) to the trailing block of r.
            for col in j..k {
                let mut proj = S::zero();
                for i in 0..v.len() {
                    proj = proj + v[i] * r.get2(j + i, col);
                }
                let c = (S::one() + S::one()) * proj / vnorm2;
                for i in 0..v.len() {
                    let cur = r.get2(j + i, col);
                    r.set2(j + i, col, cur - c * v[i]);
                }
            }
        }
        reflectors.push((v, vnorm2));
        let pivot = r.get2(j, j).as_f64().abs();
        if pivot <= threshold {
            return Err(Error::DegenerateBasis {
                column: j,
                pivot,
                threshold,
            });
        }
    }

    // Q_thin = H_0 ... H_{k-1} applied to the first k columns of I_d.
    let mut q = Tensor::zeros(&[d, k]);
    for j in 0..k {
        q.set2(j, j, S::one());
    }
    for j in (0..k).rev() {
        let (v, vnorm2) = &reflectors[j];
        if *vnorm2 == S::zero() {
            continue;
        }
        for col in 0..k {
            let mut proj = S::zero();
            for i in 0..v.len() {
                proj = proj + v[i] * q.get2(j + i, col);
            }
            let c = (S::one() + S::one()) * proj / *vnorm2;
            for i in 0..v.len() {
                let cur = q.get2(j + i, col);
                q.set2(j + i, col, cur - c * v[i]);
            }
        }
    }

    // Flip columns where R's diagonal came out negative.
    for j in 0..k {
        if r.get2(j, j) < S::zero() {
            for i in 0..d {
                let cur = q.get2(i, j);
                q.set2(i, j, -cur);
            }
        }
    }
    Ok(q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{gaussian, matmul, matmul_nt, matmul_tn, RngStream};

    fn ortho_err(u: &Tensor<f64>) -> f64 {
        let k = u.shape()[1];
        let gram = matmul_tn(u, u).unwrap();
        gram.max_abs_diff(&Tensor::eye(k))
    }

    #[test]
    fn identity_stays_identity() {
        let u = qr_orthonormalize(&Tensor::<f64>::eye(5)).unwrap();
        assert!(u.max_abs_diff(&Tensor::eye(5)) < 1e-14);
    }

    #[test]
    fn axis_aligned_columns() {
        let a = Tensor::from_vec(vec![3, 2], vec![2.0f64, 0.0, 0.0, 3.0, 0.0, 0.0]);
        let u = qr_orthonormalize(&a).unwrap();
        let expected = Tensor::from_vec(vec![3, 2], vec![1.0f64, 0.0, 0.0, 1.0, 0.0, 0.0]);
        assert!(u.max_abs_diff(&expected) < 1e-14);
    }

    #[test]
    fn random_gaussian_is_orthonormal() {
        let mut rng = RngStream::new(5, 0);
        let a: Tensor<f64> = gaussian(&mut rng, &[64, 8]);
        let u = qr_orthonormalize(&a).unwrap();
        assert!(ortho_err(&u) < 1e-10);

        // Projector P = U U^T is idempotent and fixes the original columns.
        let p = matmul_nt(&u, &u).unwrap();
        let pp = matmul(&p, &p).unwrap();
        assert!(pp.max_abs_diff(&p) < 1e-9);
        let pa = matmul(&p, &a).unwrap();
        assert!(pa.max_abs_diff(&a) < 1e-9 * a.max_abs().max(1.0));
    }

    #[test]
    fn rank_deficient_rejected() {
        // Second column is a multiple of the first.
        let a = Tensor::from_vec(vec![3, 2], vec![1.0f64, 2.0, 1.0, 2.0, 1.0, 2.0]);
        assert!(matches!(
            qr_orthonormalize(&a),
            Err(Error::DegenerateBasis { .. })
        ));
    }

    #[test]
    fn deterministic_for_same_input() {
        let mut rng = RngStream::new(9, 1);
        let a: Tensor<f64> = gaussian(&mut rng, &[16, 4]);
        let u1 = qr_orthonormalize(&a).unwrap();
        let u2 = qr_orthonormalize(&a).unwrap();
        assert_eq!(u1, u2);
    }
}
