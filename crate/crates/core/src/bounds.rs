//! Closed-form stability and timing bounds, evaluated numerically so that
//! simulations can be checked against them.
//!
//! Saturating quantities return `f64::INFINITY`; such a bound still dominates any
//! measurement but is reported as vacuous.

use std::collections::BTreeMap;

use serde::{Serialize, Serializer};
use thiserror::Error;

use crate::dynamics::{AttentionTriple, TokenCloud};
use crate::linalg::{self, distance, op_norm, orth_complement_basis, Matrix};

pub const DEFAULT_QUADRATURE_STEP: f64 = 1e-3;
/// Slack in the `holds` verdict of a [`BoundReport`].
pub const DOMINATION_SLACK: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum BoundError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("logarithm of a non-positive quantity: {0}")]
    InvalidLog(String),
    #[error("rate {0} is not positive")]
    NonPositiveEigenvalue(f64),
    #[error("tokens are not contained in the orthogonal complement of Im(A)")]
    TokensOutsideComplement,
    #[error("V does not leave the orthogonal complement of Im(A) invariant")]
    NotInvariant,
}

fn positive(name: &str, x: f64) -> Result<(), BoundError> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(BoundError::InvalidInput(format!("{name} must be positive and finite, got {x}")))
    }
}

/// `R_t = R_0 e^{max(‖V‖, ‖Ṽ‖) t}`
pub fn radius_envelope(r0: f64, v: &Matrix, v_tilde: &Matrix, t: f64) -> f64 {
    r0 * (op_norm(v).max(op_norm(v_tilde)) * t).exp()
}

/// `2 ‖QᵀK‖ ‖V‖ R²`
pub fn lipschitz_in_x_bound(triple: &AttentionTriple, r: f64) -> f64 {
    2.0 * op_norm(&triple.q().transpose().matmul(triple.k())) * op_norm(triple.v()) * r * r
}

/// `‖V‖ R`
pub fn kernel_sup_bound(triple: &AttentionTriple, r: f64) -> f64 {
    op_norm(triple.v()) * r
}

/// `2 R² ‖V‖ ‖A‖ (1 + e^{2R²‖A‖})`, `+∞` once the exponential overflows.
pub fn c2_bound(triple: &AttentionTriple, r: f64) -> f64 {
    let a = op_norm(triple.a());
    let prefactor = 2.0 * r * r * op_norm(triple.v()) * a;
    if prefactor == 0.0 {
        return 0.0;
    }
    prefactor * (1.0 + (2.0 * r * r * a).exp())
}

/// `K(A − Ã, V − Ṽ, t) = 2‖V − Ṽ‖² R_t² + 4 R_t³ ‖V‖ ‖A − Ã‖`
pub fn perturbation_constant(triple: &AttentionTriple, tilde: &AttentionTriple, r0: f64, t: f64) -> f64 {
    let rt = radius_envelope(r0, triple.v(), tilde.v(), t);
    let dv = op_norm(&triple.v().sub(tilde.v()));
    let da = op_norm(&triple.a().sub(tilde.a()));
    2.0 * dv * dv * rt * rt + 4.0 * rt.powi(3) * op_norm(triple.v()) * da
}

/// Choice of the initial-discrepancy function `C_1(R)` in the stability bound.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum C1Choice {
    /// `C_1 ≡ 0`
    Zero,
    /// `2C_1(R_t)² = K(A − Ã, V − Ṽ, t)`
    PerturbationConstant,
    /// `C_1(R) = ‖V − Ṽ‖ R + 2R³ min(‖V‖, ‖Ṽ‖) ‖A − Ã‖`
    KernelDifference,
    Constant(f64),
}

impl C1Choice {
    /// `2 C_1(R_t)²`
    fn twice_squared(self, triple: &AttentionTriple, tilde: &AttentionTriple, r0: f64, t: f64) -> f64 {
        match self {
            C1Choice::Zero => 0.0,
            C1Choice::PerturbationConstant => perturbation_constant(triple, tilde, r0, t),
            C1Choice::KernelDifference => {
                let rt = radius_envelope(r0, triple.v(), tilde.v(), t);
                let dv = op_norm(&triple.v().sub(tilde.v()));
                let da = op_norm(&triple.a().sub(tilde.a()));
                let c1 = dv * rt + 2.0 * rt.powi(3) * op_norm(triple.v()).min(op_norm(tilde.v())) * da;
                2.0 * c1 * c1
            }
            C1Choice::Constant(c) => 2.0 * c * c,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StabilityBound {
    #[serde(serialize_with = "serialize_sentinel")]
    pub value: f64,
    pub saturated: bool,
    pub r_t: f64,
    #[serde(serialize_with = "serialize_sentinel")]
    pub c_t: f64,
    #[serde(serialize_with = "serialize_sentinel")]
    pub k_t: f64,
    pub twice_c1_squared: f64,
}

/// `C_t = ∫_0^t C_2(R_s)² ds` by the composite trapezoid rule.
pub fn c_t_integral(triple: &AttentionTriple, tilde: &AttentionTriple, r0: f64, t: f64, step: f64) -> f64 {
    if t <= 0.0 {
        return 0.0;
    }
    let pieces = (t / step).ceil().max(1.0) as usize;
    let h = t / pieces as f64;
    let f = |s: f64| c2_bound(triple, radius_envelope(r0, triple.v(), tilde.v(), s)).powi(2);
    let mut total = 0.5 * (f(0.0) + f(t));
    for k in 1..pieces {
        total += f(k as f64 * h);
    }
    total * h
}

/// `W_2(μ_t, ν_t) ≤ sqrt(2 C_1(R_t)² exp(2 C_t e^{3 K_t}))` with `K_t` the Lipschitz
/// constant in `x` at radius `R_t`.
pub fn stability_w2_bound(
    c1: C1Choice,
    triple: &AttentionTriple,
    tilde: &AttentionTriple,
    r0: f64,
    t: f64,
    quadrature_step: f64,
) -> Result<StabilityBound, BoundError> {
    positive("R0", r0)?;
    positive("quadrature step", quadrature_step)?;
    if !(t >= 0.0 && t.is_finite()) {
        return Err(BoundError::InvalidInput(format!("t must be non-negative, got {t}")));
    }
    let r_t = radius_envelope(r0, triple.v(), tilde.v(), t);
    let k_t = lipschitz_in_x_bound(triple, r_t);
    let c_t = c_t_integral(triple, tilde, r0, t, quadrature_step);
    let twice_c1_squared = c1.twice_squared(triple, tilde, r0, t);
    let exponent = 2.0 * c_t * (3.0 * k_t).exp();
    let value = if twice_c1_squared == 0.0 {
        0.0
    } else {
        (0.5 * (twice_c1_squared.ln() + exponent)).exp()
    };
    let value = if value.is_nan() { f64::INFINITY } else { value };
    Ok(StabilityBound { value, saturated: value.is_infinite(), r_t, c_t, k_t, twice_c1_squared })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MeanFieldBound {
    /// `log(max_i ‖z_i(0) − m‖ / δ) / rate`, clamped at 0
    pub value: f64,
    /// smallest eigenvalue of the symmetric part of `V` restricted to `Im(A)^⊥`
    pub rate: f64,
    /// leading (largest-modulus) eigenvalue of the same restriction
    pub leading_eigenvalue: f64,
    /// the same expression with `leading_eigenvalue` as the rate
    pub value_with_leading_eigenvalue: f64,
    pub max_deviation: f64,
    /// dimension of `Im(A)^⊥`
    pub complement_dim: usize,
    pub note: &'static str,
}

const MEANFIELD_NOTE: &str = "rate uses the smallest eigenvalue of the symmetric part of V on Im(A)^perp; \
the leading-eigenvalue variant is only a valid bound when that restriction is a multiple of the identity";

/// Orthonormal basis of `Im(A)^⊥` and the restriction `BᵀVB`.
pub fn restrict_to_complement(triple: &AttentionTriple) -> Result<(Vec<Vec<f64>>, Matrix), BoundError> {
    let d = triple.dim();
    let cols: Vec<Vec<f64>> = (0..d).map(|j| triple.a().column(j)).collect();
    let basis = orth_complement_basis(&cols, d);
    if basis.is_empty() {
        return Err(BoundError::InvalidInput("Im(A) is the whole space".into()));
    }
    let m = basis.len();
    let vb: Vec<Vec<f64>> = basis.iter().map(|b| triple.v().mul_vec(b)).collect();
    let mut restricted = Matrix::zeros(m, m);
    for i in 0..m {
        for j in 0..m {
            restricted[(i, j)] = linalg::dot(&basis[i], &vb[j]);
        }
    }
    let scale = op_norm(triple.v()).max(f64::MIN_POSITIVE);
    for (j, w) in vb.iter().enumerate() {
        let mut residual = w.clone();
        for (i, b) in basis.iter().enumerate() {
            residual.iter_mut().zip(b).for_each(|(x, y)| *x -= restricted[(i, j)] * y);
        }
        if linalg::norm(&residual) > 1e-9 * scale {
            return Err(BoundError::NotInvariant);
        }
    }
    Ok((basis, restricted))
}

pub fn meanfield_t_delta_bound(cloud0: &TokenCloud, triple: &AttentionTriple, delta: f64) -> Result<MeanFieldBound, BoundError> {
    positive("delta", delta)?;
    let (basis, restricted) = restrict_to_complement(triple)?;
    let scale = cloud0.max_norm().max(1.0);
    for z in cloud0.points() {
        let inside: f64 = basis.iter().map(|b| linalg::dot(b, z).powi(2)).sum::<f64>();
        if (linalg::dot(z, z) - inside).max(0.0).sqrt() > 1e-9 * scale {
            return Err(BoundError::TokensOutsideComplement);
        }
    }
    let sym = restricted.add(&restricted.transpose()).scale(0.5);
    let sym_eigs = linalg::eig(&sym).map_err(|e| BoundError::InvalidInput(e.to_string()))?;
    let rate = sym_eigs.eigenvalues.iter().map(|l| l.re).fold(f64::INFINITY, f64::min);
    let spec = linalg::eig(&restricted).map_err(|e| BoundError::InvalidInput(e.to_string()))?;
    let leading = spec.eigenvalues[0].re;
    if rate <= 0.0 {
        return Err(BoundError::NonPositiveEigenvalue(rate));
    }
    let m = cloud0.barycenter();
    let max_deviation = cloud0.points().iter().map(|z| distance(z, &m)).fold(0.0, f64::max);
    let log_ratio = if max_deviation == 0.0 { f64::NEG_INFINITY } else { (max_deviation / delta).ln() };
    let clamp = |x: f64| if x > 0.0 { x } else { 0.0 };
    Ok(MeanFieldBound {
        value: clamp(log_ratio / rate),
        rate,
        leading_eigenvalue: leading,
        value_with_leading_eigenvalue: if leading > 0.0 { clamp(log_ratio / leading) } else { f64::NAN },
        max_deviation,
        complement_dim: basis.len(),
        note: MEANFIELD_NOTE,
    })
}

/// `log(sqrt(2 C d log(1/ε) n) / δ) / λ`, holding with probability at least `1 − 2ε`
/// for tokens drawn uniformly from the radius-`C` ball of a `d`-dimensional subspace.
pub fn meanfield_t_delta_prob_bound(c: f64, d_perp: usize, n: usize, delta: f64, eps: f64, lambda: f64) -> Result<f64, BoundError> {
    positive("C", c)?;
    positive("delta", delta)?;
    positive("lambda", lambda)?;
    if !(eps > 0.0 && eps < 0.5) {
        return Err(BoundError::InvalidInput(format!("eps must lie in (0, 1/2), got {eps}")));
    }
    if d_perp == 0 || n == 0 {
        return Err(BoundError::InvalidInput("dimension and token count must be positive".into()));
    }
    let radius = (2.0 * c * d_perp as f64 * (1.0 / eps).ln() * n as f64).sqrt();
    Ok((radius / delta).ln() / lambda)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TStarBound {
    pub value: f64,
    /// `log(‖z‖_∞ / (δ² c_11)) / ε`
    pub first_branch: f64,
    /// `log(log(δ C_0 N / d) / (c_11 δ)) / (2 λ_1)`, when the constants are supplied
    pub second_branch: Option<f64>,
    /// `log(1/δ) / ε`, the leading-order trend
    pub asymptotic: f64,
}

/// Constants entering only the second branch of the bifurcation-time bound.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct SecondBranchConstants {
    pub c0: f64,
    pub n: f64,
    pub d: f64,
}

/// `T*(δ) ≤ max{ log(‖z‖_∞/(δ² c_11))/ε, log(log(δ C_0 N/d)/(c_11 δ))/(2λ_1) }`; the second
/// branch is evaluated only when its constants are supplied.
pub fn t_star_upper_bound(
    delta: f64,
    eps_gap: f64,
    lambda1: f64,
    c11: f64,
    z_sup: f64,
    second: Option<SecondBranchConstants>,
) -> Result<TStarBound, BoundError> {
    positive("delta", delta)?;
    positive("spectral gap", eps_gap)?;
    positive("c11", c11)?;
    positive("sup norm", z_sup)?;
    let first = (z_sup / (delta * delta * c11)).ln() / eps_gap;
    let second_branch = match second {
        None => None,
        Some(SecondBranchConstants { c0, n, d }) => {
            positive("lambda1", lambda1)?;
            let arg = delta * c0 * n / d;
            if !(arg > 0.0) {
                return Err(BoundError::InvalidLog(format!("delta*C0*N/d = {arg}")));
            }
            let inner = arg.ln();
            if inner <= 0.0 {
                return Err(BoundError::InvalidLog(format!("log(delta*C0*N/d) = {inner}")));
            }
            Some((inner / (c11 * delta)).ln() / (2.0 * lambda1))
        }
    };
    let value = second_branch.map_or(first, |s| first.max(s));
    Ok(TStarBound { value, first_branch: first, second_branch, asymptotic: (1.0 / delta).ln() / eps_gap })
}

/// Serialize non-finite values as the strings `"inf"`, `"-inf"` and `"nan"`.
pub fn serialize_sentinel<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
    if x.is_finite() {
        s.serialize_f64(*x)
    } else if x.is_nan() {
        s.serialize_str("nan")
    } else if *x > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_str("-inf")
    }
}

fn serialize_sentinel_map<S: Serializer>(m: &BTreeMap<String, f64>, s: S) -> Result<S::Ok, S::Error> {
    use serde::ser::SerializeMap;
    let mut map = s.serialize_map(Some(m.len()))?;
    for (k, v) in m {
        if v.is_finite() {
            map.serialize_entry(k, v)?;
        } else {
            map.serialize_entry(k, if v.is_nan() { "nan" } else if *v > 0.0 { "inf" } else { "-inf" })?;
        }
    }
    map.end()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Holds,
    Fails,
    Vacuous,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Domination {
    pub measured: f64,
    pub holds: bool,
    #[serde(serialize_with = "serialize_sentinel")]
    pub margin: f64,
    pub verdict: Verdict,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoundReport {
    pub name: String,
    #[serde(serialize_with = "serialize_sentinel_map")]
    pub inputs: BTreeMap<String, f64>,
    #[serde(serialize_with = "serialize_sentinel")]
    pub value: f64,
    pub dominates: Option<Domination>,
}

impl BoundReport {
    pub fn new(name: impl Into<String>, inputs: impl IntoIterator<Item = (&'static str, f64)>, value: f64) -> Self {
        Self {
            name: name.into(),
            inputs: inputs.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
            value,
            dominates: None,
        }
    }

    /// Attach a measurement; `holds ⇔ value ≥ measured − 1e−9`.
    pub fn against(mut self, measured: f64) -> Self {
        let holds = self.value >= measured - DOMINATION_SLACK;
        let verdict = if self.value.is_infinite() && self.value > 0.0 {
            Verdict::Vacuous
        } else if holds {
            Verdict::Holds
        } else {
            Verdict::Fails
        };
        self.dominates = Some(Domination { measured, holds, margin: self.value - measured, verdict });
        self
    }

    pub fn holds(&self) -> bool {
        self.dominates.as_ref().is_none_or(|d| d.holds)
    }
}
