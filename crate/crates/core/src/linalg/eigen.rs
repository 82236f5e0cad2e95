//! Eigenvalues, real eigenbasis and dual basis.

use nalgebra::linalg::Schur;
use nalgebra::DMatrix;
use serde::Serialize;

use super::{dot, norm, Matrix, LinalgError};

/// Relative tolerance used to decide that a spectrum is real, that eigenvalues
/// coincide, and that the dual basis is biorthogonal.
const SPECTRAL_TOL: f64 = 1e-8;
const MAX_CONDITION: f64 = 1e8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Complex {
    pub re: f64,
    pub im: f64,
}

impl Complex {
    pub fn real(re: f64) -> Self {
        Self { re, im: 0.0 }
    }

    pub fn modulus(&self) -> f64 {
        self.re.hypot(self.im)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Spectrum {
    pub eigenvalues: Vec<Complex>,
    /// φ_k, present when a real eigenbasis exists.
    pub right_eigenvectors: Option<Vec<Vec<f64>>>,
    /// φ*_k, rows of the inverse eigenvector matrix.
    pub dual_basis: Option<Vec<Vec<f64>>>,
    /// Condition number of the eigenvector matrix, when the basis exists.
    pub condition: Option<f64>,
}

impl Spectrum {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_real(&self) -> bool {
        self.eigenvalues.iter().all(|l| l.im == 0.0)
    }

    /// Largest real part over the spectrum.
    pub fn max_real_part(&self) -> f64 {
        self.eigenvalues.iter().map(|l| l.re).fold(f64::NEG_INFINITY, f64::max)
    }

    /// φ*_k(z)
    pub fn dual_coordinate(&self, k: usize, z: &[f64]) -> Option<f64> {
        self.dual_basis.as_ref().map(|b| dot(&b[k], z))
    }

    /// `Φ diag(e^{t(λ_k − shift)}) Φ⁻¹`, available only with a real eigenbasis and its dual.
    pub fn exp_from_basis(&self, t: f64, shift: f64) -> Option<Matrix> {
        let phi = self.right_eigenvectors.as_ref()?;
        let dual = self.dual_basis.as_ref()?;
        let d = self.dim();
        let w: Vec<f64> = self.eigenvalues.iter().map(|l| (t * (l.re - shift)).exp()).collect();
        let mut out = Matrix::zeros(d, d);
        for i in 0..d {
            for j in 0..d {
                out[(i, j)] = (0..d).map(|k| phi[k][i] * w[k] * dual[k][j]).sum();
            }
        }
        Some(out)
    }
}

/// Order by non-increasing modulus; ties by descending real part, then descending imaginary part.
fn sort_eigenvalues(values: &mut [(Complex, usize)], scale: f64) {
    let tol = 1e-10 * scale.max(f64::MIN_POSITIVE);
    values.sort_by(|a, b| b.0.modulus().total_cmp(&a.0.modulus()));
    let mut start = 0;
    while start < values.len() {
        let lead = values[start].0.modulus();
        let mut end = start + 1;
        while end < values.len() && lead - values[end].0.modulus() <= tol {
            end += 1;
        }
        values[start..end].sort_by(|a, b| {
            if (a.0.re - b.0.re).abs() > tol {
                b.0.re.total_cmp(&a.0.re)
            } else {
                b.0.im.total_cmp(&a.0.im)
            }
        });
        start = end;
    }
}

pub fn eig(m: &Matrix) -> Result<Spectrum, LinalgError> {
    let d = m.require_square()?;
    let scale = m.max_abs();
    if scale == 0.0 {
        let basis: Vec<Vec<f64>> = Matrix::identity(d).to_rows();
        return Ok(Spectrum {
            eigenvalues: vec![Complex::real(0.0); d],
            right_eigenvectors: Some(basis.clone()),
            dual_basis: Some(basis),
            condition: Some(1.0),
        });
    }
    let schur = Schur::try_new(m.to_na(), 1e-12, 100 * d)
        .ok_or_else(|| LinalgError::NumericalFailure(format!("Schur iteration did not converge for {d}x{d} matrix")))?;
    let raw: Vec<Complex> =
        schur.complex_eigenvalues().iter().map(|c| Complex { re: c.re, im: c.im }).collect();
    if raw.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
        return Err(LinalgError::NumericalFailure("non-finite eigenvalue".into()));
    }

    let real = raw.iter().all(|c| c.im.abs() <= SPECTRAL_TOL * scale);
    if !real {
        let mut vals: Vec<(Complex, usize)> = raw.into_iter().map(|c| (c, 0)).collect();
        sort_eigenvalues(&mut vals, scale);
        return Ok(Spectrum {
            eigenvalues: vals.into_iter().map(|v| v.0).collect(),
            right_eigenvectors: None,
            dual_basis: None,
            condition: None,
        });
    }

    let mut reals: Vec<f64> = raw.iter().map(|c| c.re).collect();
    reals.sort_by(f64::total_cmp);
    let groups = group_values(&reals, SPECTRAL_TOL * scale);

    let na = m.to_na();
    let mut vectors: Vec<(f64, Vec<f64>)> = Vec::with_capacity(d);
    let mut defective = false;
    for group in &groups {
        let mu = group.iter().sum::<f64>() / group.len() as f64;
        match eigenspace(&na, mu, group.len(), scale) {
            Some(basis) => vectors.extend(basis.into_iter().map(|v| (mu, v))),
            None => {
                defective = true;
                break;
            }
        }
    }
    if defective {
        let mut vals: Vec<(Complex, usize)> = reals.iter().map(|&r| (Complex::real(r), 0)).collect();
        sort_eigenvalues(&mut vals, scale);
        return Ok(Spectrum {
            eigenvalues: vals.into_iter().map(|v| v.0).collect(),
            right_eigenvectors: None,
            dual_basis: None,
            condition: None,
        });
    }

    let mut phi = DMatrix::<f64>::zeros(d, d);
    for (k, (_, v)) in vectors.iter().enumerate() {
        for i in 0..d {
            phi[(i, k)] = v[i];
        }
    }
    let sv = phi.singular_values();
    let smin = sv.min();
    let condition = if smin > 0.0 { sv.max() / smin } else { f64::INFINITY };
    let dual = if condition < MAX_CONDITION {
        phi.clone().try_inverse().and_then(|inv| {
            let rows: Vec<Vec<f64>> = (0..d).map(|k| inv.row(k).iter().copied().collect()).collect();
            let ok = (0..d).all(|k| {
                (0..d).all(|j| {
                    let target = if k == j { 1.0 } else { 0.0 };
                    (dot(&rows[k], &vectors[j].1) - target).abs() <= SPECTRAL_TOL
                })
            });
            ok.then_some(rows)
        })
    } else {
        None
    };

    // Rayleigh-type polish φ*_k(Mφ_k), which also makes exactly diagonal inputs exact.
    let mut entries: Vec<(Complex, usize)> = vectors
        .iter()
        .enumerate()
        .map(|(k, (mu, v))| {
            let lambda = match &dual {
                Some(rows) => dot(&rows[k], &m.mul_vec(v)),
                None => *mu,
            };
            (Complex::real(lambda), k)
        })
        .collect();
    sort_eigenvalues(&mut entries, scale);
    let order: Vec<usize> = entries.iter().map(|e| e.1).collect();
    Ok(Spectrum {
        eigenvalues: entries.iter().map(|e| e.0).collect(),
        right_eigenvectors: Some(order.iter().map(|&k| vectors[k].1.clone()).collect()),
        dual_basis: dual.map(|rows| order.iter().map(|&k| rows[k].clone()).collect()),
        condition: Some(condition),
    })
}

/// Split sorted values into runs whose consecutive members differ by at most `tol`.
fn group_values(sorted: &[f64], tol: f64) -> Vec<Vec<f64>> {
    let mut groups: Vec<Vec<f64>> = Vec::new();
    for &x in sorted {
        match groups.last_mut() {
            Some(g) if x - g[g.len() - 1] <= tol => g.push(x),
            _ => groups.push(vec![x]),
        }
    }
    groups
}

/// Canonical orthonormal basis of ker(M − μI), or `None` when its dimension differs
/// from the algebraic multiplicity.
fn eigenspace(m: &DMatrix<f64>, mu: f64, multiplicity: usize, scale: f64) -> Option<Vec<Vec<f64>>> {
    let d = m.nrows();
    let shifted = m - DMatrix::<f64>::identity(d, d) * mu;
    let svd = shifted.svd(false, true);
    let v_t = svd.v_t?;
    let mut idx: Vec<usize> = (0..d).collect();
    idx.sort_by(|&a, &b| svd.singular_values[a].total_cmp(&svd.singular_values[b]));
    let null_tol = 1e-7 * scale;
    let null_dim = idx.iter().filter(|&&k| svd.singular_values[k] <= null_tol).count();
    if null_dim != multiplicity {
        return None;
    }
    let null: Vec<Vec<f64>> = idx[..multiplicity].iter().map(|&k| v_t.row(k).iter().copied().collect()).collect();

    if multiplicity == 1 {
        let mut v = null.into_iter().next()?;
        let n = norm(&v);
        v.iter_mut().for_each(|x| *x /= n);
        orient(&mut v);
        return Some(vec![v]);
    }

    // Project the standard basis onto the eigenspace and orthonormalize greedily.
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(multiplicity);
    for i in 0..d {
        if basis.len() == multiplicity {
            break;
        }
        let mut p = vec![0.0; d];
        for w in &null {
            let c = w[i];
            p.iter_mut().zip(w).for_each(|(x, y)| *x += c * y);
        }
        for b in &basis {
            let c = dot(&p, b);
            p.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
        }
        let n = norm(&p);
        if n > 1e-6 {
            p.iter_mut().for_each(|x| *x /= n);
            basis.push(p);
        }
    }
    (basis.len() == multiplicity).then_some(basis)
}

/// Make the largest-magnitude component positive (first index on near ties).
fn orient(v: &mut [f64]) {
    let max = v.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    if let Some(&lead) = v.iter().find(|x| x.abs() >= max * (1.0 - 1e-9)) {
        if lead < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SpectralGap {
    pub lambda1: Complex,
    pub gap: f64,
    /// False when λ_1 is not real, in which case the clustering hypotheses do not apply.
    pub lambda1_real: bool,
    /// ⟨Qφ_1, Kφ_1⟩ > 0, evaluated only when Q and K are supplied and φ_1 exists.
    pub c11_positive_check: Option<bool>,
    pub c11: Option<f64>,
}

/// `Re λ_1 − |λ_2|` for `m`, with the optional `c_11` check against `(Q, K)`.
pub fn spectral_gap(m: &Matrix, qk: Option<(&Matrix, &Matrix)>) -> Result<SpectralGap, LinalgError> {
    let spec = eig(m)?;
    let l1 = spec.eigenvalues[0];
    let l2 = spec.eigenvalues.get(1).map_or(0.0, Complex::modulus);
    let c11 = match (qk, &spec.right_eigenvectors) {
        (Some((q, k)), Some(vs)) => {
            if q.rows() != m.rows() || k.rows() != m.rows() || !q.is_square() || !k.is_square() {
                return Err(LinalgError::DimensionMismatch("Q and K must match V".into()));
            }
            Some(dot(&q.mul_vec(&vs[0]), &k.mul_vec(&vs[0])))
        }
        _ => None,
    };
    Ok(SpectralGap {
        lambda1: l1,
        gap: l1.re - l2,
        lambda1_real: l1.im == 0.0,
        c11_positive_check: c11.map(|c| c > 0.0),
        c11,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Complex as C64;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Characteristic polynomial coefficients (monic, highest degree first) by Faddeev–LeVerrier.
    fn char_poly(m: &Matrix) -> Vec<f64> {
        let d = m.rows();
        let mut coeffs = vec![1.0];
        let mut mk = Matrix::zeros(d, d);
        let mut c_prev = 1.0;
        for k in 1..=d {
            // M_k = A M_{k-1} + c_{k-1} I
            let mut next = m.matmul(&mk);
            for i in 0..d {
                next[(i, i)] += c_prev;
            }
            mk = next;
            let amk = m.matmul(&mk);
            let trace: f64 = (0..d).map(|i| amk[(i, i)]).sum();
            let c = -trace / k as f64;
            coeffs.push(c);
            c_prev = c;
        }
        coeffs
    }

    fn horner(coeffs: &[f64], z: C64<f64>) -> (C64<f64>, C64<f64>) {
        let mut p = C64::new(0.0, 0.0);
        let mut dp = C64::new(0.0, 0.0);
        for &c in coeffs {
            dp = dp * z + p;
            p = p * z + C64::new(c, 0.0);
        }
        (p, dp)
    }

    /// Durand–Kerner root iteration followed by Newton polishing.
    fn poly_roots(coeffs: &[f64]) -> Vec<C64<f64>> {
        let n = coeffs.len() - 1;
        let seed = C64::new(0.4, 0.9);
        let mut roots: Vec<C64<f64>> = (0..n).map(|k| seed.powu(k as u32)).collect();
        for _ in 0..2000 {
            let prev = roots.clone();
            for i in 0..n {
                let mut denom = C64::new(1.0, 0.0);
                for j in 0..n {
                    if i != j {
                        denom *= roots[i] - roots[j];
                    }
                }
                let step = horner(coeffs, roots[i]).0 / denom;
                roots[i] -= step;
            }
            let change = roots.iter().zip(&prev).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
            if change < 1e-16 {
                break;
            }
        }
        for r in roots.iter_mut() {
            for _ in 0..5 {
                let (p, dp) = horner(coeffs, *r);
                if dp.norm() > 0.0 {
                    *r -= p / dp;
                }
            }
        }
        roots
    }

    fn random_matrix(seed: u64, d: usize) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::new(d, d, (0..d * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn check_biorthogonal(s: &Spectrum) {
        let phi = s.right_eigenvectors.as_ref().unwrap();
        let dual = s.dual_basis.as_ref().unwrap();
        for k in 0..phi.len() {
            for j in 0..phi.len() {
                let target = if k == j { 1.0 } else { 0.0 };
                assert!((dot(&dual[k], &phi[j]) - target).abs() <= 1e-8);
            }
        }
    }

    #[test]
    fn identity_spectrum() {
        let s = eig(&Matrix::identity(2)).unwrap();
        assert_eq!(s.eigenvalues, vec![Complex::real(1.0), Complex::real(1.0)]);
        assert_eq!(s.right_eigenvectors.as_ref().unwrap(), &vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        check_biorthogonal(&s);
    }

    #[test]
    fn perturbed_identity_gap() {
        let v = Matrix::diag(&[1.0, 0.99]);
        let s = eig(&v).unwrap();
        assert!((s.eigenvalues[0].re - 1.0).abs() < 1e-15);
        assert!((s.eigenvalues[1].re - 0.99).abs() < 1e-15);
        let g = spectral_gap(&v, None).unwrap();
        assert!((g.gap - 0.01).abs() < 1e-14);
        assert!(g.lambda1_real);
        assert_eq!(g.c11_positive_check, None);
        let e1 = Matrix::outer(&[1.0, 0.0], &[1.0, 0.0]);
        let g = spectral_gap(&v, Some((&e1, &e1))).unwrap();
        assert_eq!(g.c11_positive_check, Some(true));
    }

    #[test]
    fn identity_gap_is_zero() {
        assert_eq!(spectral_gap(&Matrix::identity(2), None).unwrap().gap, 0.0);
        assert_eq!(spectral_gap(&Matrix::identity(1), None).unwrap().gap, 1.0);
    }

    #[test]
    fn rotation_flags_complex_leading_eigenvalue() {
        let r = Matrix::from_rows(&[vec![0.0, -1.0], vec![1.0, 0.0]]).unwrap();
        let g = spectral_gap(&r, None).unwrap();
        assert!(!g.lambda1_real);
        let s = eig(&r).unwrap();
        assert!(s.right_eigenvectors.is_none() && s.dual_basis.is_none());
        assert!((s.eigenvalues[0].im - 1.0).abs() < 1e-14);
        assert!((s.eigenvalues[1].im + 1.0).abs() < 1e-14);
    }

    #[test]
    fn random_5x5_matches_polynomial_roots() {
        for seed in 0..5 {
            let m = random_matrix(seed, 5);
            let s = eig(&m).unwrap();
            let mut roots = poly_roots(&char_poly(&m));
            for ev in &s.eigenvalues {
                let (pos, err) = roots
                    .iter()
                    .enumerate()
                    .map(|(i, r)| (i, (r - C64::new(ev.re, ev.im)).norm()))
                    .min_by(|a, b| a.1.total_cmp(&b.1))
                    .unwrap();
                assert!(err <= 1e-8, "seed {seed}: eigenvalue {ev:?} off by {err}");
                roots.remove(pos);
            }
            for w in s.eigenvalues.windows(2) {
                assert!(w[0].modulus() >= w[1].modulus() - 1e-12);
            }
        }
    }

    #[test]
    fn ordering_breaks_modulus_ties_by_real_part() {
        let s = eig(&Matrix::diag(&[-1.0, 1.0, 0.5])).unwrap();
        let re: Vec<f64> = s.eigenvalues.iter().map(|l| l.re).collect();
        assert_eq!(re, vec![1.0, -1.0, 0.5]);
        assert_eq!(s.right_eigenvectors.as_ref().unwrap()[0], vec![0.0, 1.0, 0.0]);
        check_biorthogonal(&s);
    }

    #[test]
    fn defective_matrix_has_no_basis() {
        let j = Matrix::from_rows(&[vec![2.0, 1.0], vec![0.0, 2.0]]).unwrap();
        let s = eig(&j).unwrap();
        assert!(s.right_eigenvectors.is_none());
        assert!(s.dual_basis.is_none());
        assert!((s.eigenvalues[0].re - 2.0).abs() < 1e-12);
    }

    #[test]
    fn non_square_is_rejected() {
        assert!(matches!(eig(&Matrix::zeros(2, 3)), Err(LinalgError::NonSquare { .. })));
    }

    #[test]
    fn diagonalizable_real_spectrum_has_biorthogonal_dual() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let d = 4;
        let s_mat = Matrix::new(d, d, (0..d * d).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>())
            .unwrap()
            .add(&Matrix::identity(d).scale(2.0));
        let inv = Matrix::from_na(&s_mat.to_na().try_inverse().unwrap());
        let lam = [3.0, 1.5, -0.5, 0.25];
        let m = s_mat.matmul(&Matrix::diag(&lam)).matmul(&inv);
        let spec = eig(&m).unwrap();
        check_biorthogonal(&spec);
        let got: Vec<f64> = spec.eigenvalues.iter().map(|l| l.re).collect();
        for (g, e) in got.iter().zip([3.0, 1.5, -0.5, 0.25]) {
            assert!((g - e).abs() < 1e-10);
        }
        let phi = spec.right_eigenvectors.as_ref().unwrap();
        for (k, v) in phi.iter().enumerate() {
            let mv = m.mul_vec(v);
            for i in 0..d {
                assert!((mv[i] - got[k] * v[i]).abs() < 1e-9);
            }
        }
        let e = spec.exp_from_basis(0.7, 3.0).unwrap();
        let direct = crate::linalg::mat_exp(&m, 0.7).unwrap().scale((-0.7 * 3.0_f64).exp());
        assert!(crate::linalg::op_norm(&e.sub(&direct)) < 1e-10);
    }
}
