//! Low-rank updates of attention matrices and seeded token initializations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{AttentionTriple, DynamicsError, TokenCloud};
use crate::linalg::{self, dot, norm, op_norm, orth_complement_basis, Matrix};

#[derive(Debug, Error)]
pub enum PerturbationError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("direction vector is zero")]
    ZeroVector,
    #[error("matrix has full rank; its image has no orthogonal complement")]
    FullRank,
    #[error("initialization predicate cannot be satisfied: {0}")]
    PredicateUnsatisfiable(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Target {
    Q,
    K,
    V,
}

/// Rank-`k` update `M ↦ M + AᵀB` with `A, B ∈ R^{k×d}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraFactors {
    pub target: Target,
    pub a_factor: Matrix,
    pub b_factor: Matrix,
}

impl LoraFactors {
    pub fn new(target: Target, a_factor: Matrix, b_factor: Matrix) -> Result<Self, PerturbationError> {
        if a_factor.rows() != b_factor.rows() || a_factor.cols() != b_factor.cols() {
            return Err(PerturbationError::DimensionMismatch(format!(
                "factors are {}x{} and {}x{}",
                a_factor.rows(),
                a_factor.cols(),
                b_factor.rows(),
                b_factor.cols()
            )));
        }
        Ok(Self { target, a_factor, b_factor })
    }

    /// Factors with `k = d` reproducing `delta` exactly (`A = I`, `B = delta`).
    pub fn from_delta(target: Target, delta: &Matrix) -> Result<Self, PerturbationError> {
        if !delta.is_square() {
            return Err(PerturbationError::DimensionMismatch("delta must be square".into()));
        }
        Self::new(target, Matrix::identity(delta.rows()), delta.clone())
    }

    /// Seeded factors with entries uniform in `[−1, 1]`, rescaled so `‖AᵀB‖_op = op_norm`.
    pub fn random(target: Target, d: usize, rank: usize, op_norm_target: f64, seed: u64) -> Result<Self, PerturbationError> {
        if rank == 0 || d == 0 {
            return Err(PerturbationError::InvalidParameter("rank and dimension must be positive".into()));
        }
        if !(op_norm_target >= 0.0 && op_norm_target.is_finite()) {
            return Err(PerturbationError::InvalidParameter(format!("operator norm must be non-negative, got {op_norm_target}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let draw = |rng: &mut ChaCha8Rng| {
            Matrix::new(rank, d, (0..rank * d).map(|_| rng.random_range(-1.0..=1.0)).collect())
                .expect("finite entries")
        };
        let a = draw(&mut rng);
        let b = draw(&mut rng);
        let current = op_norm(&a.transpose().matmul(&b));
        if current == 0.0 {
            return Self::new(target, a, b.scale(0.0));
        }
        let s = (op_norm_target / current).sqrt();
        Self::new(target, a.scale(s), b.scale(s))
    }

    pub fn rank_bound(&self) -> usize {
        self.a_factor.rows()
    }

    pub fn dim(&self) -> usize {
        self.a_factor.cols()
    }

    /// `AᵀB`
    pub fn delta(&self) -> Matrix {
        self.a_factor.transpose().matmul(&self.b_factor)
    }
}

/// Replace each targeted matrix `M` by `M + AᵀB`; caches are rebuilt.
pub fn apply_lora(triple: &AttentionTriple, factors: &[LoraFactors]) -> Result<AttentionTriple, PerturbationError> {
    let (mut q, mut k, mut v) = (triple.q().clone(), triple.k().clone(), triple.v().clone());
    for f in factors {
        if f.dim() != triple.dim() {
            return Err(PerturbationError::DimensionMismatch(format!(
                "factors act on R^{}, attention on R^{}",
                f.dim(),
                triple.dim()
            )));
        }
        let m = match f.target {
            Target::Q => &mut q,
            Target::K => &mut k,
            Target::V => &mut v,
        };
        *m = m.add(&f.delta());
    }
    Ok(AttentionTriple::new(q, k, v)?)
}

/// `Q = K = vvᵀ`, `V = I`.
pub fn rank_one_attention(v: &[f64]) -> Result<AttentionTriple, PerturbationError> {
    if v.is_empty() || v.iter().all(|&x| x == 0.0) {
        return Err(PerturbationError::ZeroVector);
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(PerturbationError::InvalidParameter("direction must be finite".into()));
    }
    let p = Matrix::outer(v, v);
    Ok(AttentionTriple::new(p.clone(), p, Matrix::identity(v.len()))?)
}

/// Unit vector orthogonal to both the column space and the row space of `A = KᵀQ`,
/// drawn as a seeded Gaussian combination of an orthonormal basis of that complement.
pub fn orthogonal_lora_direction(triple: &AttentionTriple, seed: u64) -> Result<Vec<f64>, PerturbationError> {
    let a = triple.a();
    let d = triple.dim();
    let mut spanning: Vec<Vec<f64>> = (0..d).map(|j| a.column(j)).collect();
    spanning.extend(a.to_rows());
    let basis = orth_complement_basis(&spanning, d);
    if basis.is_empty() {
        return Err(PerturbationError::FullRank);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let coeffs: Vec<f64> = basis.iter().map(|_| rng.sample(StandardNormal)).collect();
        let mut v = vec![0.0; d];
        for (c, b) in coeffs.iter().zip(&basis) {
            v.iter_mut().zip(b).for_each(|(x, y)| *x += c * y);
        }
        let n = norm(&v);
        if n > 1e-8 {
            v.iter_mut().for_each(|x| *x /= n);
            return Ok(v);
        }
    }
}

fn default_spread() -> f64 {
    0.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitKind {
    /// Coordinates i.i.d. uniform in `[−half_width, half_width]`.
    UniformHypercube { half_width: f64 },
    Constant { cloud: TokenCloud },
    /// Tokens on the line `R v̂`, alternating sides, with `|⟨z_i, v̂⟩| ∈ [c, c + spread]`.
    SeparatedAlong { v: Vec<f64>, c: f64, spread: f64 },
    /// Uniform in the ball of radius `radius` inside `Im(of)^⊥`.
    InOrthComplement { of: Matrix, radius: f64 },
    /// The `separated_along` line configuration plus an offset of norm `epsilon` orthogonal to `v`.
    PerturbedLine {
        v: Vec<f64>,
        c: f64,
        epsilon: f64,
        #[serde(default = "default_spread")]
        spread: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitSpec {
    pub n: usize,
    pub d: usize,
    pub seed: u64,
    #[serde(flatten)]
    pub kind: InitKind,
}

fn unit(v: &[f64], d: usize) -> Result<Vec<f64>, PerturbationError> {
    if v.len() != d {
        return Err(PerturbationError::DimensionMismatch(format!("direction has length {}, expected {d}", v.len())));
    }
    let n = norm(v);
    if n == 0.0 || !n.is_finite() {
        return Err(PerturbationError::ZeroVector);
    }
    Ok(v.iter().map(|x| x / n).collect())
}

fn line_points(rng: &mut ChaCha8Rng, n: usize, dir: &[f64], c: f64, spread: f64) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| {
            let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
            let magnitude = if spread > 0.0 { rng.random_range(c..=c + spread) } else { c };
            dir.iter().map(|x| sign * magnitude * x).collect()
        })
        .collect()
}

fn check_line(c: f64, spread: f64) -> Result<(), PerturbationError> {
    if !(c > 0.0 && c.is_finite()) {
        return Err(PerturbationError::PredicateUnsatisfiable(format!("separation c must be positive, got {c}")));
    }
    if !(spread >= 0.0 && spread <= c / 2.0) {
        return Err(PerturbationError::PredicateUnsatisfiable(format!(
            "spread {spread} must lie in [0, c/2] = [0, {}]",
            c / 2.0
        )));
    }
    Ok(())
}

fn ball_point(rng: &mut ChaCha8Rng, basis: &[Vec<f64>], d: usize, radius: f64) -> Vec<f64> {
    let m = basis.len();
    let g: Vec<f64> = (0..m).map(|_| rng.sample(StandardNormal)).collect();
    let gn = norm(&g);
    let r = radius * rng.random::<f64>().powf(1.0 / m as f64);
    let mut z = vec![0.0; d];
    if gn == 0.0 {
        return z;
    }
    for (coef, b) in g.iter().zip(basis) {
        z.iter_mut().zip(b).for_each(|(x, y)| *x += r * coef / gn * y);
    }
    z
}

/// Deterministic cloud for `spec`, checked against the defining predicate of its kind.
pub fn generate_init(spec: &InitSpec) -> Result<TokenCloud, PerturbationError> {
    let InitSpec { n, d, seed, ref kind } = *spec;
    if n == 0 || d == 0 {
        return Err(PerturbationError::InvalidParameter("n and d must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points: Vec<Vec<f64>> = match kind {
        InitKind::UniformHypercube { half_width } => {
            let h = *half_width;
            if !(h > 0.0 && h.is_finite()) {
                return Err(PerturbationError::InvalidParameter(format!("half width must be positive, got {h}")));
            }
            (0..n).map(|_| (0..d).map(|_| rng.random_range(-h..=h)).collect()).collect()
        }
        InitKind::Constant { cloud } => {
            if cloud.n() != n || cloud.d() != d {
                return Err(PerturbationError::DimensionMismatch(format!(
                    "constant cloud is {}x{}, spec says {n}x{d}",
                    cloud.n(),
                    cloud.d()
                )));
            }
            cloud.points().to_vec()
        }
        InitKind::SeparatedAlong { v, c, spread } => {
            check_line(*c, *spread)?;
            let dir = unit(v, d)?;
            line_points(&mut rng, n, &dir, *c, *spread)
        }
        InitKind::InOrthComplement { of, radius } => {
            if of.rows() != d || of.cols() != d {
                return Err(PerturbationError::DimensionMismatch("matrix must be d x d".into()));
            }
            if !(*radius > 0.0 && radius.is_finite()) {
                return Err(PerturbationError::InvalidParameter(format!("radius must be positive, got {radius}")));
            }
            let cols: Vec<Vec<f64>> = (0..d).map(|j| of.column(j)).collect();
            let basis = orth_complement_basis(&cols, d);
            if basis.is_empty() {
                return Err(PerturbationError::PredicateUnsatisfiable("image of the matrix is the whole space".into()));
            }
            (0..n).map(|_| ball_point(&mut rng, &basis, d, *radius)).collect()
        }
        InitKind::PerturbedLine { v, c, epsilon, spread } => {
            check_line(*c, *spread)?;
            let dir = unit(v, d)?;
            if !(*epsilon >= 0.0 && epsilon.is_finite()) {
                return Err(PerturbationError::InvalidParameter(format!("epsilon must be non-negative, got {epsilon}")));
            }
            let mut line = line_points(&mut rng, n, &dir, *c, *spread);
            if *epsilon > 0.0 {
                let normal = orth_complement_basis(std::slice::from_ref(&dir), d);
                if normal.is_empty() {
                    return Err(PerturbationError::PredicateUnsatisfiable("no direction orthogonal to v in dimension 1".into()));
                }
                let mut offsets = ChaCha8Rng::seed_from_u64(seed);
                offsets.set_stream(1);
                for p in line.iter_mut() {
                    let g: Vec<f64> = normal.iter().map(|_| offsets.sample(StandardNormal)).collect();
                    let gn = norm(&g).max(f64::MIN_POSITIVE);
                    for (coef, b) in g.iter().zip(&normal) {
                        p.iter_mut().zip(b).for_each(|(x, y)| *x += epsilon * coef / gn * y);
                    }
                }
            }
            line
        }
    };
    let cloud = TokenCloud::new(points)?;
    if !satisfies(spec, &cloud) {
        return Err(PerturbationError::PredicateUnsatisfiable(format!("generated cloud violates the {} predicate", kind_name(kind))));
    }
    Ok(cloud)
}

fn kind_name(kind: &InitKind) -> &'static str {
    match kind {
        InitKind::UniformHypercube { .. } => "uniform_hypercube",
        InitKind::Constant { .. } => "constant",
        InitKind::SeparatedAlong { .. } => "separated_along",
        InitKind::InOrthComplement { .. } => "in_orth_complement",
        InitKind::PerturbedLine { .. } => "perturbed_line",
    }
}

fn per_sign_spread_ok(proj: &[f64], c: f64) -> bool {
    let side = |pos: bool| -> Vec<f64> { proj.iter().copied().filter(|&p| (p > 0.0) == pos).collect() };
    [true, false].iter().all(|&pos| {
        let s = side(pos);
        if s.is_empty() {
            return true;
        }
        let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = s.iter().copied().fold(f64::INFINITY, f64::min);
        max - min <= c / 2.0 + 1e-12 * c
    })
}

/// Scan `cloud` for the defining property of `spec.kind`.
pub fn satisfies(spec: &InitSpec, cloud: &TokenCloud) -> bool {
    if cloud.n() != spec.n || cloud.d() != spec.d {
        return false;
    }
    let d = spec.d;
    match &spec.kind {
        InitKind::UniformHypercube { half_width } => cloud.points().iter().flatten().all(|x| x.abs() <= *half_width),
        InitKind::Constant { cloud: c } => c == cloud,
        InitKind::SeparatedAlong { v, c, .. } => {
            let Ok(dir) = unit(v, d) else { return false };
            let proj: Vec<f64> = cloud.points().iter().map(|z| dot(z, &dir)).collect();
            proj.iter().all(|p| p.abs() >= c * (1.0 - 1e-12)) && per_sign_spread_ok(&proj, *c)
        }
        InitKind::InOrthComplement { of, radius } => cloud.points().iter().all(|z| {
            norm(z) <= radius * (1.0 + 1e-12)
                && (0..d).all(|j| {
                    let col = of.column(j);
                    dot(&col, z).abs() <= 1e-10 * (1.0 + norm(&col)) * radius
                })
        }),
        InitKind::PerturbedLine { v, c, epsilon, .. } => {
            let Ok(dir) = unit(v, d) else { return false };
            cloud.points().iter().all(|z| {
                let along = dot(z, &dir);
                let off: Vec<f64> = z.iter().zip(&dir).map(|(x, u)| x - along * u).collect();
                along.abs() >= c * (1.0 - 1e-12) && norm(&off) <= epsilon * (1.0 + 1e-9) + 1e-12 * c
            }) && per_sign_spread_ok(&cloud.points().iter().map(|z| dot(z, &dir)).collect::<Vec<_>>(), *c)
        }
    }
}

/// Distance from every token of `cloud` to the line `R v`, maximized.
pub fn max_offset_from_line(cloud: &TokenCloud, v: &[f64]) -> f64 {
    let n = norm(v);
    let dir: Vec<f64> = v.iter().map(|x| x / n).collect();
    cloud
        .points()
        .iter()
        .map(|z| {
            let along = dot(z, &dir);
            linalg::norm(&z.iter().zip(&dir).map(|(x, u)| x - along * u).collect::<Vec<_>>())
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::numerical_rank;

    fn spec(n: usize, d: usize, seed: u64, kind: InitKind) -> InitSpec {
        InitSpec { n, d, seed, kind }
    }

    #[test]
    fn zero_factors_leave_triple_unchanged() {
        let t = AttentionTriple::identity(3);
        let f = LoraFactors::new(Target::V, Matrix::zeros(2, 3), Matrix::zeros(2, 3)).unwrap();
        let p = apply_lora(&t, &[f]).unwrap();
        assert_eq!(p.v(), t.v());
        assert_eq!(p.q(), t.q());
    }

    #[test]
    fn value_perturbation_of_identity() {
        let eps = 0.01;
        let t = AttentionTriple::identity(2);
        let f = LoraFactors::new(
            Target::V,
            Matrix::from_rows(&[vec![0.0, 1.0]]).unwrap(),
            Matrix::from_rows(&[vec![0.0, -eps]]).unwrap(),
        )
        .unwrap();
        let p = apply_lora(&t, &[f]).unwrap();
        assert_eq!(p.v(), &Matrix::diag(&[1.0, 1.0 - eps]));
        assert_eq!(p.v_spectrum().eigenvalues[1].re, 1.0 - eps);
    }

    #[test]
    fn random_factors_have_requested_norm_and_rank() {
        let f = LoraFactors::random(Target::V, 6, 2, 0.3, 42).unwrap();
        let delta = f.delta();
        assert!((op_norm(&delta) - 0.3).abs() < 1e-12);
        assert!(numerical_rank(&delta, 1e-10) <= 2);
        let t = AttentionTriple::identity(6);
        let p = apply_lora(&t, std::slice::from_ref(&f)).unwrap();
        // sum of outer products a_r b_rᵀ, assembled independently
        let mut outer_sum = Matrix::zeros(6, 6);
        for r in 0..2 {
            outer_sum = outer_sum.add(&Matrix::outer(f.a_factor.row(r), f.b_factor.row(r)));
        }
        let sv_direct = linalg::singular_values(&p.v().sub(t.v()));
        let sv_oracle = linalg::singular_values(&outer_sum);
        for (a, b) in sv_direct.iter().zip(&sv_oracle) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(LoraFactors::random(Target::V, 6, 2, 0.3, 42).unwrap(), f);
    }

    #[test]
    fn exact_delta_reproduction() {
        let delta = Matrix::from_rows(&[vec![0.1, -0.3], vec![2.0, 0.7]]).unwrap();
        let f = LoraFactors::from_delta(Target::Q, &delta).unwrap();
        let t = AttentionTriple::identity(2);
        let p = apply_lora(&t, &[f]).unwrap();
        assert!(p.q().sub(t.q()).sub(&delta).max_abs() <= 1e-12);
    }

    #[test]
    fn rank_one_construction() {
        let t = rank_one_attention(&[1.0, 0.0]).unwrap();
        assert_eq!(t.q(), &Matrix::diag(&[1.0, 0.0]));
        assert_eq!(t.k(), t.q());
        let v = [1.0, -2.0, 0.5];
        let t = rank_one_attention(&v).unwrap();
        assert_eq!(numerical_rank(t.a(), 1e-8), 1);
        let n = norm(&v);
        let phi: Vec<f64> = v.iter().map(|x| x / n).collect();
        let val = dot(&t.a().mul_vec(&phi), &phi);
        assert!((val - n.powi(4)).abs() < 1e-12);
        assert!(matches!(rank_one_attention(&[0.0, 0.0]), Err(PerturbationError::ZeroVector)));
    }

    #[test]
    fn orthogonal_direction_cases() {
        let e1 = Matrix::diag(&[1.0, 0.0]);
        let t = AttentionTriple::new(e1.clone(), e1, Matrix::identity(2)).unwrap();
        let v = orthogonal_lora_direction(&t, 3).unwrap();
        assert!(v[0].abs() < 1e-12 && (v[1].abs() - 1.0).abs() < 1e-12);
        let z = AttentionTriple::new(Matrix::zeros(3, 3), Matrix::identity(3), Matrix::identity(3)).unwrap();
        let v = orthogonal_lora_direction(&z, 8).unwrap();
        assert!((norm(&v) - 1.0).abs() < 1e-12);
        assert_eq!(v, orthogonal_lora_direction(&z, 8).unwrap());
        assert!(matches!(orthogonal_lora_direction(&AttentionTriple::identity(2), 0), Err(PerturbationError::FullRank)));
    }

    #[test]
    fn orthogonal_direction_for_seeded_rank_three() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let mut q = Matrix::zeros(6, 6);
        for _ in 0..3 {
            let u: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            q = q.add(&Matrix::outer(&u, &u));
        }
        let t = AttentionTriple::new(q.clone(), q, Matrix::identity(6)).unwrap();
        let v = orthogonal_lora_direction(&t, 1).unwrap();
        assert!(norm(&t.a().mul_vec(&v)) <= 1e-10);
        assert!(norm(&t.a().transpose().mul_vec(&v)) <= 1e-10);
        // column-space basis by Gram–Schmidt on the columns of A
        let mut basis: Vec<Vec<f64>> = Vec::new();
        for j in 0..6 {
            let mut c = t.a().column(j);
            for b in &basis {
                let p = dot(&c, b);
                c.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
            }
            let n = norm(&c);
            if n > 1e-8 {
                basis.push(c.iter().map(|x| x / n).collect());
            }
        }
        assert_eq!(basis.len(), 3);
        for b in &basis {
            assert!(dot(b, &v).abs() <= 1e-10);
        }
    }

    #[test]
    fn hypercube_init() {
        let c = generate_init(&spec(20, 2, 7, InitKind::UniformHypercube { half_width: 5.0 })).unwrap();
        assert_eq!((c.n(), c.d()), (20, 2));
        assert!(c.points().iter().flatten().all(|x| x.abs() <= 5.0));
        assert_eq!(c, generate_init(&spec(20, 2, 7, InitKind::UniformHypercube { half_width: 5.0 })).unwrap());
    }

    #[test]
    fn orth_complement_init() {
        let a = Matrix::diag(&[1.0, 0.0, 0.0]);
        let c = generate_init(&spec(10, 3, 1, InitKind::InOrthComplement { of: a, radius: 2.0 })).unwrap();
        assert!(c.points().iter().all(|z| z[0].abs() < 1e-15 && norm(z) <= 2.0));
    }

    #[test]
    fn separated_init_scan() {
        let c = generate_init(&spec(12, 2, 4, InitKind::SeparatedAlong { v: vec![1.0, 0.0], c: 3.0, spread: 1.0 })).unwrap();
        let pos: Vec<f64> = c.points().iter().map(|z| z[0]).filter(|&x| x > 0.0).collect();
        let neg: Vec<f64> = c.points().iter().map(|z| z[0]).filter(|&x| x < 0.0).collect();
        assert_eq!(pos.len(), 6);
        assert!(c.points().iter().all(|z| z[0].abs() >= 3.0));
        let range = |v: &[f64]| v.iter().copied().fold(f64::NEG_INFINITY, f64::max) - v.iter().copied().fold(f64::INFINITY, f64::min);
        assert!(range(&pos) <= 1.5 && range(&neg) <= 1.5);
        let bad = spec(4, 2, 0, InitKind::SeparatedAlong { v: vec![1.0, 0.0], c: 1.0, spread: 0.6 });
        assert!(matches!(generate_init(&bad), Err(PerturbationError::PredicateUnsatisfiable(_))));
    }

    #[test]
    fn perturbed_line_shares_line_part() {
        let line = generate_init(&spec(8, 3, 5, InitKind::SeparatedAlong { v: vec![0.0, 0.0, 2.0], c: 5.0, spread: 1.0 })).unwrap();
        let pert = generate_init(&spec(
            8,
            3,
            5,
            InitKind::PerturbedLine { v: vec![0.0, 0.0, 2.0], c: 5.0, epsilon: 0.05, spread: 1.0 },
        ))
        .unwrap();
        for (a, b) in line.points().iter().zip(pert.points()) {
            assert_eq!(a[2], b[2]);
            assert!((b[0].hypot(b[1]) - 0.05).abs() < 1e-14);
        }
        assert!((max_offset_from_line(&pert, &[0.0, 0.0, 1.0]) - 0.05).abs() < 1e-14);
    }

    #[test]
    fn init_spec_json_shape() {
        let s = spec(3, 2, 9, InitKind::UniformHypercube { half_width: 5.0 });
        let json = serde_json::to_string(&s).unwrap();
        assert_eq!(json, r#"{"n":3,"d":2,"seed":9,"kind":"uniform_hypercube","half_width":5.0}"#);
        let back: InitSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, s);
    }
}
