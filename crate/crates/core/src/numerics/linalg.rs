use super::Tensor;
use crate::error::{Error, Result};

/// `a · b`, accumulated in ascending order of the inner index.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::Dimension(format!(
            "matmul inner dimensions differ: {m}x{k} · {k2}x{n}"
        )));
    }
    let mut out = vec![0.0; m * n];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for t in 0..k {
            let s = ad[i * k + t];
            for (o, bv) in row.iter_mut().zip(&bd[t * n..(t + 1) * n]) {
                *o += s * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Lower-triangular Cholesky factor `L` with `L Lᵀ = h`.
pub fn cholesky(h: &Tensor) -> Result<Tensor> {
    let (n, n2) = h.dims2()?;
    if n != n2 {
        return Err(Error::Dimension(format!(
            "cholesky needs a square matrix, got {n}x{n2}"
        )));
    }
    let a = h.data();
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[i * n + j];
            for k in 0..j {
                sum -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if !(sum > 0.0) || !sum.is_finite() {
                    return Err(Error::NotPositiveDefinite { row: i, value: sum });
                }
                l[i * n + i] = sum.sqrt();
            } else {
                l[i * n + j] = sum / l[j * n + j];
            }
        }
    }
    Tensor::new(vec![n, n], l)
}

/// Inverse of a symmetric positive definite matrix via its Cholesky factor.
///
/// Only the lower triangle of `h` is read. A non-positive pivot is reported as
/// [`Error::NotPositiveDefinite`] so callers can add damping and retry.
pub fn cholesky_invert_spd(h: &Tensor) -> Result<Tensor> {
    let l = cholesky(h)?;
    let n = l.shape()[0];
    let ld = l.data();

    // L⁻¹, lower triangular, by forward substitution column by column.
    let mut linv = vec![0.0; n * n];
    for j in 0..n {
        linv[j * n + j] = 1.0 / ld[j * n + j];
        for i in j + 1..n {
            let mut sum = 0.0;
            for k in j..i {
                sum += ld[i * n + k] * linv[k * n + j];
            }
            linv[i * n + j] = -sum / ld[i * n + i];
        }
    }

    // h⁻¹ = L⁻ᵀ L⁻¹; fill the lower triangle and mirror it so the result is
    // exactly symmetric.
    let mut inv = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = 0.0;
            for k in i..n {
                sum += linv[k * n + i] * linv[k * n + j];
            }
            inv[i * n + j] = sum;
            inv[j * n + i] = sum;
        }
    }
    let out = Tensor::new(vec![n, n], inv)?;
    out.ensure_finite("cholesky inverse")?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn naive(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k) = a.dims2().unwrap();
        let n = b.dims2().unwrap().1;
        let mut c = Tensor::zeros(&[m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for t in 0..k {
                    s += a.at(i, t) * b.at(t, j);
                }
                c.set(i, j, s);
            }
        }
        c
    }

    fn random(rng: &mut Rng, r: usize, c: usize) -> Tensor {
        Tensor::new(vec![r, c], (0..r * c).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn identity_product() {
        let b = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(matmul(&Tensor::identity(2), &b).unwrap(), b);
    }

    #[test]
    fn annihilating_product() {
        let a = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![0.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap(), Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn matches_triple_loop() {
        let mut rng = Rng::new(3);
        let a = random(&mut rng, 8, 8);
        let b = random(&mut rng, 8, 8);
        let fast = matmul(&a, &b).unwrap();
        let slow = naive(&a, &b);
        for (x, y) in fast.data().iter().zip(slow.data()) {
            assert!((x - y).abs() <= 1e-12 * y.abs().max(1.0));
        }
    }

    #[test]
    fn shape_mismatch() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }

    #[test]
    fn invert_identity_and_diagonal() {
        assert_eq!(cholesky_invert_spd(&Tensor::identity(3)).unwrap(), Tensor::identity(3));
        let d = Tensor::from_rows(&[vec![2.0, 0.0], vec![0.0, 4.0]]).unwrap();
        let inv = cholesky_invert_spd(&d).unwrap();
        for (x, y) in inv.data().iter().zip([0.5, 0.0, 0.0, 0.25]) {
            assert!((x - y).abs() <= 1e-15, "{x} vs {y}");
        }
    }

    #[test]
    fn invert_random_spd() {
        let mut rng = Rng::new(11);
        let m = random(&mut rng, 6, 6);
        let mut a = matmul(&m.transpose().unwrap(), &m).unwrap();
        a.add_scaled(&Tensor::identity(6), 1.0).unwrap();
        let inv = cholesky_invert_spd(&a).unwrap();
        let prod = matmul(&a, &inv).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((prod.at(i, j) - want).abs() <= 1e-8);
                assert!((inv.at(i, j) - inv.at(j, i)).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn indefinite_is_reported() {
        let h = Tensor::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert!(matches!(
            cholesky_invert_spd(&h),
            Err(Error::NotPositiveDefinite { row: 1, .. })
        ));
    }
}
