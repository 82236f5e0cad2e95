//! Matrix exponential by scaling and squaring with a diagonal [6/6] Padé approximant.

use super::{LinalgError, Matrix};

const PADE_ORDER: usize = 6;

fn pade_coefficients() -> [f64; PADE_ORDER + 1] {
    // c_k = (2q−k)! q! / ((2q)! k! (q−k)!)
    let q = PADE_ORDER;
    let mut c = [0.0; PADE_ORDER + 1];
    c[0] = 1.0;
    for k in 1..=q {
        c[k] = c[k - 1] * (q - k + 1) as f64 / (k * (2 * q - k + 1)) as f64;
    }
    c
}

fn inf_norm(m: &Matrix) -> f64 {
    (0..m.rows()).map(|i| m.row(i).iter().map(|x| x.abs()).sum::<f64>()).fold(0.0, f64::max)
}

/// e^{t·m}
pub fn mat_exp(m: &Matrix, t: f64) -> Result<Matrix, LinalgError> {
    let d = m.require_square()?;
    if !t.is_finite() {
        return Err(LinalgError::NonFinite);
    }
    let a = m.scale(t);
    let norm = inf_norm(&a);
    if norm == 0.0 {
        return Ok(Matrix::identity(d));
    }
    let s = if norm > 0.5 { (norm / 0.5).log2().ceil() as i32 } else { 0 };
    let a = a.scale(0.5_f64.powi(s));

    let c = pade_coefficients();
    let mut num = Matrix::identity(d).scale(c[0]);
    let mut den = Matrix::identity(d).scale(c[0]);
    let mut power = Matrix::identity(d);
    for (k, &ck) in c.iter().enumerate().skip(1) {
        power = power.matmul(&a);
        num = num.add(&power.scale(ck));
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        den = den.add(&power.scale(sign * ck));
    }
    let lu = den.to_na().lu();
    let x = lu
        .solve(&num.to_na())
        .ok_or_else(|| LinalgError::NumericalFailure("singular Padé denominator".into()))?;
    let mut r = Matrix::from_na(&x);
    for _ in 0..s {
        r = r.matmul(&r);
    }
    if r.as_slice().iter().any(|x| !x.is_finite()) {
        return Err(LinalgError::NonFinite);
    }
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::op_norm;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn taylor(m: &Matrix, t: f64, terms: usize) -> Matrix {
        let a = m.scale(t);
        let mut term = Matrix::identity(m.rows());
        let mut sum = term.clone();
        for k in 1..terms {
            term = term.matmul(&a).scale(1.0 / k as f64);
            sum = sum.add(&term);
        }
        sum
    }

    #[test]
    fn zero_time_is_identity() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(mat_exp(&m, 0.0).unwrap(), Matrix::identity(2));
    }

    #[test]
    fn scalar_and_diagonal_cases() {
        let e = mat_exp(&Matrix::identity(2), 1.0).unwrap();
        assert!((e[(0, 0)] - std::f64::consts::E).abs() < 1e-14);
        assert!(e[(0, 1)].abs() < 1e-16);
        let d = mat_exp(&Matrix::diag(&[1.0, -1.0]), 2.0).unwrap();
        assert!((d[(0, 0)] - 2.0_f64.exp()).abs() < 1e-13 * 2.0_f64.exp());
        assert!((d[(1, 1)] - (-2.0_f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn general_3x3_matches_taylor() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let m = Matrix::new(3, 3, (0..9).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        for t in [0.3, 1.0, -1.2] {
            let diff = mat_exp(&m, t).unwrap().sub(&taylor(&m, t, 30));
            assert!(diff.max_abs() < 1e-10, "t={t}: {}", diff.max_abs());
        }
    }

    #[test]
    fn nilpotent_is_exact_polynomial() {
        let n = Matrix::from_rows(&[vec![0.0, 1.0], vec![0.0, 0.0]]).unwrap();
        let e = mat_exp(&n, 3.0).unwrap();
        assert!((e[(0, 1)] - 3.0).abs() < 1e-13);
        assert!((e[(0, 0)] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn group_law() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = Matrix::new(4, 4, (0..16).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let (s, t) = (0.7, 1.9);
        let lhs = mat_exp(&m, s).unwrap().matmul(&mat_exp(&m, t).unwrap());
        let rhs = mat_exp(&m, s + t).unwrap();
        let bound = 1e-8 * ((s + t) * op_norm(&m)).exp();
        assert!(op_norm(&lhs.sub(&rhs)) <= bound);
    }

    #[test]
    fn non_square_rejected() {
        assert!(mat_exp(&Matrix::zeros(2, 3), 1.0).is_err());
    }
}
