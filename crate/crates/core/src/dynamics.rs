//! Self-attention vector fields and their RK4 integration.
//!
//! Raw tokens follow `ẋ_i = Σ_j P_ij V x_j` with `P_ij` the row softmax of
//! `⟨Q x_i, K x_j⟩`. Rescaled tokens `z_i = e^{-tV} x_i` follow
//! `ż_i = Σ_j P̃_ij(t) V (z_j − z_i)` with logits `⟨Q e^{tV} z_i, K e^{tV} z_j⟩`.
//!
//! All sums over tokens are evaluated in a canonical (value-sorted) order so that
//! permuting the input tokens permutes the output exactly.

use std::io::Write;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::linalg::{self, dot, eig, mat_exp, LinalgError, Matrix, Spectrum};

pub const DEFAULT_STEP: f64 = 0.1;

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("token coordinates must be finite")]
    NonFiniteInput,
    #[error("token cloud must contain at least one point of dimension at least one")]
    EmptyCloud,
    #[error("state became non-finite at t = {time} (last finite state recorded at t = {last_time})")]
    NonFiniteState { time: f64, last_time: f64, partial: Box<Trajectory> },
    #[error("expected a {expected:?} trajectory, got {found:?}")]
    ModeMismatch { expected: Mode, found: Mode },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Raw,
    Rescaled,
}

impl std::str::FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "raw" => Ok(Mode::Raw),
            "rescaled" => Ok(Mode::Rescaled),
            other => Err(format!("unknown mode {other:?} (expected raw or rescaled)")),
        }
    }
}

/// `n` tokens in `R^d`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenCloud {
    d: usize,
    points: Vec<Vec<f64>>,
}

impl TokenCloud {
    pub fn new(points: Vec<Vec<f64>>) -> Result<Self, DynamicsError> {
        let d = points.first().map_or(0, Vec::len);
        if points.is_empty() || d == 0 {
            return Err(DynamicsError::EmptyCloud);
        }
        if points.iter().any(|p| p.len() != d) {
            return Err(DynamicsError::DimensionMismatch("points of unequal dimension".into()));
        }
        if points.iter().flatten().any(|x| !x.is_finite()) {
            return Err(DynamicsError::NonFiniteInput);
        }
        Ok(Self { d, points })
    }

    pub fn from_matrix(m: &Matrix) -> Self {
        Self { d: m.cols(), points: m.to_rows() }
    }

    fn from_flat(flat: &[f64], d: usize) -> Self {
        Self { d, points: flat.chunks(d).map(<[f64]>::to_vec).collect() }
    }

    fn flat(&self) -> Vec<f64> {
        self.points.concat()
    }

    pub fn n(&self) -> usize {
        self.points.len()
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i]
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_rows(&self.points).expect("cloud is finite and rectangular")
    }

    pub fn barycenter(&self) -> Vec<f64> {
        let n = self.n() as f64;
        (0..self.d).map(|c| canonical_sum(self.points.iter().map(|p| p[c])) / n).collect()
    }

    pub fn max_norm(&self) -> f64 {
        self.points.iter().map(|p| linalg::norm(p)).fold(0.0, f64::max)
    }

    /// Apply `x ↦ M x` to every token.
    pub fn map_linear(&self, m: &Matrix) -> TokenCloud {
        TokenCloud { d: m.rows(), points: self.points.iter().map(|p| m.mul_vec(p)).collect() }
    }

    pub fn permuted(&self, perm: &[usize]) -> TokenCloud {
        TokenCloud { d: self.d, points: perm.iter().map(|&i| self.points[i].clone()).collect() }
    }
}

impl Serialize for TokenCloud {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.points.serialize(s)
    }
}

impl<'de> Deserialize<'de> for TokenCloud {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        TokenCloud::new(Vec::<Vec<f64>>::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}

/// Sum in ascending order of value, independent of the order the terms arrive in.
pub(crate) fn canonical_sum(terms: impl Iterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = terms.collect();
    v.sort_by(f64::total_cmp);
    v.into_iter().sum()
}

/// `(Q, K, V)` with `A = KᵀQ` and the spectrum of `V` cached.
#[derive(Clone, Debug)]
pub struct AttentionTriple {
    q: Matrix,
    k: Matrix,
    v: Matrix,
    a: Matrix,
    v_spectrum: Spectrum,
    rho: f64,
}

impl AttentionTriple {
    pub fn new(q: Matrix, k: Matrix, v: Matrix) -> Result<Self, DynamicsError> {
        let d = q.rows();
        for (name, m) in [("Q", &q), ("K", &k), ("V", &v)] {
            if m.rows() != d || m.cols() != d {
                return Err(DynamicsError::DimensionMismatch(format!(
                    "{name} is {}x{}, expected {d}x{d}",
                    m.rows(),
                    m.cols()
                )));
            }
        }
        let a = k.transpose().matmul(&q);
        let v_spectrum = eig(&v)?;
        let rho = v_spectrum.max_real_part();
        Ok(Self { q, k, v, a, v_spectrum, rho })
    }

    pub fn identity(d: usize) -> Self {
        Self::new(Matrix::identity(d), Matrix::identity(d), Matrix::identity(d)).expect("identity triple")
    }

    pub fn dim(&self) -> usize {
        self.q.rows()
    }

    pub fn q(&self) -> &Matrix {
        &self.q
    }

    pub fn k(&self) -> &Matrix {
        &self.k
    }

    pub fn v(&self) -> &Matrix {
        &self.v
    }

    /// `KᵀQ`
    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn v_spectrum(&self) -> &Spectrum {
        &self.v_spectrum
    }

    /// `e^{tV}`, through the cached eigenbasis when one exists.
    pub fn exp_v(&self, t: f64) -> Result<Matrix, LinalgError> {
        if t == 0.0 {
            return Ok(Matrix::identity(self.dim()));
        }
        match self.v_spectrum.exp_from_basis(t, 0.0) {
            Some(m) => Ok(m),
            None => mat_exp(&self.v, t),
        }
    }

    /// `e^{t(V − ρI)}` with `ρ` the largest real part in the spectrum of `V`, and `2ρt`,
    /// the log-scale that the logits built from it must be multiplied by.
    fn exp_v_scaled(&self, t: f64) -> Result<(Matrix, f64), LinalgError> {
        if t == 0.0 {
            return Ok((Matrix::identity(self.dim()), 0.0));
        }
        let e = match self.v_spectrum.exp_from_basis(t, self.rho) {
            Some(m) => m,
            None => mat_exp(&self.v.sub(&Matrix::identity(self.dim()).scale(self.rho)), t)?,
        };
        Ok((e, 2.0 * self.rho * t))
    }

    fn check_cloud(&self, cloud: &TokenCloud) -> Result<(), DynamicsError> {
        if cloud.d() != self.dim() {
            return Err(DynamicsError::DimensionMismatch(format!(
                "cloud has dimension {}, attention matrices {}",
                cloud.d(),
                self.dim()
            )));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct TripleRepr {
    q: Matrix,
    k: Matrix,
    v: Matrix,
}

impl Serialize for AttentionTriple {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        TripleRepr { q: self.q.clone(), k: self.k.clone(), v: self.v.clone() }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for AttentionTriple {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let r = TripleRepr::deserialize(d)?;
        AttentionTriple::new(r.q, r.k, r.v).map_err(serde::de::Error::custom)
    }
}

/// Row-softmax weights of the logits `e^{log_scale} · ⟨Q E z_i, K E z_j⟩`, flattened row-major.
fn softmax_weights(triple: &AttentionTriple, z: &[f64], d: usize, e: &Matrix, log_scale: f64) -> Vec<f64> {
    let n = z.len() / d;
    let qe = triple.q.matmul(e);
    let ke = triple.k.matmul(e);
    let qz: Vec<Vec<f64>> = z.chunks(d).map(|p| qe.mul_vec(p)).collect();
    let kz: Vec<Vec<f64>> = z.chunks(d).map(|p| ke.mul_vec(p)).collect();
    let scale = log_scale.exp();
    let mut p = vec![0.0; n * n];
    let mut logits = vec![0.0; n];
    for i in 0..n {
        for j in 0..n {
            logits[j] = dot(&qz[i], &kz[j]);
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let row = &mut p[i * n..(i + 1) * n];
        for j in 0..n {
            let diff = logits[j] - max;
            let scaled = diff * scale;
            row[j] = if scale.is_finite() && scaled.is_finite() {
                scaled.exp()
            } else if diff == 0.0 {
                1.0
            } else {
                // exp(diff · e^{log_scale}) without forming the overflowing product
                (-(log_scale + (-diff).ln()).exp()).exp()
            };
        }
        let total = canonical_sum(row.iter().copied());
        row.iter_mut().for_each(|w| *w /= total);
    }
    p
}

fn raw_field(triple: &AttentionTriple, x: &[f64], d: usize, out: &mut [f64]) {
    let n = x.len() / d;
    let p = softmax_weights(triple, x, d, &Matrix::identity(d), 0.0);
    let vx: Vec<Vec<f64>> = x.chunks(d).map(|xi| triple.v.mul_vec(xi)).collect();
    for i in 0..n {
        let row = &p[i * n..(i + 1) * n];
        for c in 0..d {
            out[i * d + c] = canonical_sum((0..n).map(|j| row[j] * vx[j][c]));
        }
    }
}

fn rescaled_field(triple: &AttentionTriple, z: &[f64], d: usize, t: f64, out: &mut [f64]) -> Result<(), LinalgError> {
    let n = z.len() / d;
    let (e, log_scale) = triple.exp_v_scaled(t)?;
    let p = softmax_weights(triple, z, d, &e, log_scale);
    let mut pull = vec![0.0; d];
    for i in 0..n {
        let row = &p[i * n..(i + 1) * n];
        let zi = &z[i * d..(i + 1) * d];
        for c in 0..d {
            pull[c] = canonical_sum((0..n).map(|j| row[j] * (z[j * d + c] - zi[c])));
        }
        out[i * d..(i + 1) * d].copy_from_slice(&triple.v.mul_vec(&pull));
    }
    Ok(())
}

fn weights_matrix(p: Vec<f64>, n: usize) -> Matrix {
    Matrix::new(n, n, p).expect("softmax weights are finite")
}

pub fn attention_weights_raw(triple: &AttentionTriple, cloud: &TokenCloud) -> Result<Matrix, DynamicsError> {
    triple.check_cloud(cloud)?;
    let p = softmax_weights(triple, &cloud.flat(), cloud.d(), &Matrix::identity(cloud.d()), 0.0);
    Ok(weights_matrix(p, cloud.n()))
}

pub fn attention_weights_rescaled(
    triple: &AttentionTriple,
    cloud: &TokenCloud,
    t: f64,
) -> Result<Matrix, DynamicsError> {
    triple.check_cloud(cloud)?;
    let (e, log_scale) = triple.exp_v_scaled(t)?;
    let p = softmax_weights(triple, &cloud.flat(), cloud.d(), &e, log_scale);
    Ok(weights_matrix(p, cloud.n()))
}

pub fn velocity_raw(triple: &AttentionTriple, cloud: &TokenCloud) -> Result<Vec<Vec<f64>>, DynamicsError> {
    triple.check_cloud(cloud)?;
    let x = cloud.flat();
    let mut out = vec![0.0; x.len()];
    raw_field(triple, &x, cloud.d(), &mut out);
    Ok(out.chunks(cloud.d()).map(<[f64]>::to_vec).collect())
}

pub fn velocity_rescaled(
    triple: &AttentionTriple,
    cloud: &TokenCloud,
    t: f64,
) -> Result<Vec<Vec<f64>>, DynamicsError> {
    triple.check_cloud(cloud)?;
    let z = cloud.flat();
    let mut out = vec![0.0; z.len()];
    rescaled_field(triple, &z, cloud.d(), t, &mut out)?;
    Ok(out.chunks(cloud.d()).map(<[f64]>::to_vec).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Trajectory {
    pub mode: Mode,
    pub step: f64,
    pub times: Vec<f64>,
    pub snapshots: Vec<TokenCloud>,
}

impl Trajectory {
    pub fn final_cloud(&self) -> &TokenCloud {
        self.snapshots.last().expect("trajectory has at least the initial snapshot")
    }

    pub fn final_time(&self) -> f64 {
        *self.times.last().expect("trajectory has at least the initial time")
    }

    /// Snapshot recorded at the time closest to `t`.
    pub fn snapshot_near(&self, t: f64) -> (f64, &TokenCloud) {
        let k = self
            .times
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - t).abs().total_cmp(&(b.1 - t).abs()))
            .map(|(k, _)| k)
            .expect("non-empty trajectory");
        (self.times[k], &self.snapshots[k])
    }

    /// CSV with columns `t, token_index, coord_0, …`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(writer);
        let d = self.snapshots.first().map_or(0, TokenCloud::d);
        let mut header = vec!["t".to_string(), "token_index".to_string()];
        header.extend((0..d).map(|c| format!("coord_{c}")));
        w.write_record(&header)?;
        for (t, cloud) in self.times.iter().zip(&self.snapshots) {
            for (i, p) in cloud.points().iter().enumerate() {
                let mut rec = vec![format!("{t:?}"), i.to_string()];
                rec.extend(p.iter().map(|x| format!("{x:?}")));
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntegratorParams {
    pub step: f64,
    pub t_end: f64,
    pub record_every: usize,
}

impl IntegratorParams {
    pub fn new(step: f64, t_end: f64) -> Self {
        Self { step, t_end, record_every: 1 }
    }
}

/// Classical RK4 from `t = 0` to `t_end`; a final shortened step covers any remainder.
pub fn integrate(
    triple: &AttentionTriple,
    cloud0: &TokenCloud,
    mode: Mode,
    params: IntegratorParams,
) -> Result<Trajectory, DynamicsError> {
    let IntegratorParams { step, t_end, record_every } = params;
    if !(step > 0.0 && step.is_finite()) {
        return Err(DynamicsError::InvalidParameter(format!("step must be positive, got {step}")));
    }
    if !(t_end >= 0.0 && t_end.is_finite()) {
        return Err(DynamicsError::InvalidParameter(format!("t_end must be non-negative, got {t_end}")));
    }
    if record_every == 0 {
        return Err(DynamicsError::InvalidParameter("record_every must be positive".into()));
    }
    triple.check_cloud(cloud0)?;
    let d = cloud0.d();
    let len = cloud0.n() * d;

    let full_steps = (t_end / step + 1e-9).floor() as usize;
    let remainder = t_end - full_steps as f64 * step;
    let partial = remainder > 1e-12 * t_end.max(1.0);
    let total_steps = full_steps + usize::from(partial);

    let field = |t: f64, y: &[f64], out: &mut [f64]| -> Result<(), LinalgError> {
        match mode {
            Mode::Raw => {
                raw_field(triple, y, d, out);
                Ok(())
            }
            Mode::Rescaled => rescaled_field(triple, y, d, t, out),
        }
    };

    let mut y = cloud0.flat();
    let mut traj = Trajectory { mode, step, times: vec![0.0], snapshots: vec![cloud0.clone()] };
    let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; len], vec![0.0; len], vec![0.0; len], vec![0.0; len]);
    let mut tmp = vec![0.0; len];
    let mut t = 0.0;
    for s in 0..total_steps {
        let last = s + 1 == total_steps;
        let h = if partial && last { remainder } else { step };
        field(t, &y, &mut k1)?;
        for i in 0..len {
            tmp[i] = y[i] + 0.5 * h * k1[i];
        }
        field(t + 0.5 * h, &tmp, &mut k2)?;
        for i in 0..len {
            tmp[i] = y[i] + 0.5 * h * k2[i];
        }
        field(t + 0.5 * h, &tmp, &mut k3)?;
        for i in 0..len {
            tmp[i] = y[i] + h * k3[i];
        }
        field(t + h, &tmp, &mut k4)?;
        for i in 0..len {
            y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        t = if partial && last { t_end } else { (s + 1) as f64 * step };
        if y.iter().any(|v| !v.is_finite()) {
            let last_time = traj.final_time();
            return Err(DynamicsError::NonFiniteState { time: t, last_time, partial: Box::new(traj) });
        }
        if (s + 1) % record_every == 0 || last {
            traj.times.push(t);
            traj.snapshots.push(TokenCloud::from_flat(&y, d));
        }
    }
    Ok(traj)
}

/// `z(t) = e^{-tV} x(t)` snapshot by snapshot.
pub fn rescale_trajectory(raw: &Trajectory, triple: &AttentionTriple) -> Result<Trajectory, DynamicsError> {
    if raw.mode != Mode::Raw {
        return Err(DynamicsError::ModeMismatch { expected: Mode::Raw, found: raw.mode });
    }
    let snapshots = raw
        .times
        .iter()
        .zip(&raw.snapshots)
        .map(|(&t, cloud)| Ok(cloud.map_linear(&triple.exp_v(-t)?)))
        .collect::<Result<Vec<_>, LinalgError>>()?;
    Ok(Trajectory { mode: Mode::Rescaled, step: raw.step, times: raw.times.clone(), snapshots })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(seed: u64, n: usize, d: usize, half: f64) -> TokenCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        TokenCloud::new((0..n).map(|_| (0..d).map(|_| rng.random_range(-half..half)).collect()).collect()).unwrap()
    }

    fn scalar_triple(q: f64, k: f64, v: f64) -> AttentionTriple {
        let m = |x| Matrix::new(1, 1, vec![x]).unwrap();
        AttentionTriple::new(m(q), m(k), m(v)).unwrap()
    }

    /// Direct softmax and double loop, no stabilization beyond the row max.
    fn naive_weights(q: &Matrix, k: &Matrix, cloud: &TokenCloud, e: &Matrix) -> Vec<Vec<f64>> {
        let pts: Vec<Vec<f64>> = cloud.points().iter().map(|p| e.mul_vec(p)).collect();
        pts.iter()
            .map(|xi| {
                let l: Vec<f64> = pts.iter().map(|xj| dot(&q.mul_vec(xi), &k.mul_vec(xj))).collect();
                let m = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let w: Vec<f64> = l.iter().map(|x| (x - m).exp()).collect();
                let s: f64 = w.iter().sum();
                w.iter().map(|x| x / s).collect()
            })
            .collect()
    }

    #[test]
    fn equal_tokens_give_uniform_weights() {
        let t = AttentionTriple::identity(2);
        let c = TokenCloud::new(vec![vec![1.0, 2.0]; 5]).unwrap();
        let p = attention_weights_raw(&t, &c).unwrap();
        assert!(p.as_slice().iter().all(|&x| x == 0.2));
    }

    #[test]
    fn tokens_in_kernel_complement_give_uniform_weights() {
        let e1 = Matrix::outer(&[1.0, 0.0], &[1.0, 0.0]);
        let t = AttentionTriple::new(e1.clone(), e1, Matrix::identity(2)).unwrap();
        let c = TokenCloud::new(vec![vec![0.0, 1.0], vec![0.0, -3.0], vec![0.0, 7.5]]).unwrap();
        let p = attention_weights_raw(&t, &c).unwrap();
        assert!(p.as_slice().iter().all(|&x| x == 1.0 / 3.0));
        for time in [0.0, 1.0, 10.0, 100.0] {
            let p = attention_weights_rescaled(&t, &c, time).unwrap();
            assert!(p.as_slice().iter().all(|&x| x == 1.0 / 3.0));
        }
    }

    #[test]
    fn scalar_softmax_values() {
        let t = scalar_triple(1.0, 1.0, 1.0);
        let c = TokenCloud::new(vec![vec![0.0], vec![1.0]]).unwrap();
        let p = attention_weights_raw(&t, &c).unwrap();
        let e = std::f64::consts::E;
        assert_eq!(p[(0, 0)], 0.5);
        assert_eq!(p[(0, 1)], 0.5);
        assert!((p[(1, 0)] - 1.0 / (1.0 + e)).abs() < 1e-15);
        assert!((p[(1, 1)] - e / (1.0 + e)).abs() < 1e-15);
    }

    #[test]
    fn rescaled_at_zero_equals_raw() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = |rng: &mut ChaCha8Rng| Matrix::new(3, 3, (0..9).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let t = AttentionTriple::new(m(&mut rng), m(&mut rng), m(&mut rng)).unwrap();
        let c = random_cloud(2, 6, 3, 2.0);
        assert_eq!(attention_weights_raw(&t, &c).unwrap(), attention_weights_rescaled(&t, &c, 0.0).unwrap());
    }

    #[test]
    fn rescaled_logits_scale_with_time() {
        // V = 1, t = ln 2: logits are multiplied by 4
        let t = scalar_triple(1.0, 1.0, 1.0);
        let c = TokenCloud::new(vec![vec![0.3], vec![-0.2]]).unwrap();
        let p = attention_weights_rescaled(&t, &c, 2.0_f64.ln()).unwrap();
        let l = |a: f64, b: f64| 4.0 * a * b;
        let row0 = [l(0.3, 0.3), l(0.3, -0.2)];
        let expected = row0[0].exp() / (row0[0].exp() + row0[1].exp());
        assert!((p[(0, 0)] - expected).abs() < 1e-14);
        let row1 = [l(-0.2, 0.3), l(-0.2, -0.2)];
        let expected = row1[1].exp() / (row1[0].exp() + row1[1].exp());
        assert!((p[(1, 1)] - expected).abs() < 1e-14);
    }

    #[test]
    fn rescaled_weights_survive_huge_times() {
        let t = AttentionTriple::identity(2);
        let c = random_cloud(8, 5, 2, 3.0);
        for time in [50.0, 400.0, 1000.0] {
            let p = attention_weights_rescaled(&t, &c, time).unwrap();
            for i in 0..5 {
                let s: f64 = (0..5).map(|j| p[(i, j)]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_token_and_zero_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = Matrix::new(2, 2, (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let t = AttentionTriple::new(Matrix::identity(2), Matrix::identity(2), v.clone()).unwrap();
        let c = TokenCloud::new(vec![vec![0.4, -1.1]]).unwrap();
        assert_eq!(velocity_raw(&t, &c).unwrap()[0], v.mul_vec(&[0.4, -1.1]));
        let z = AttentionTriple::new(Matrix::identity(2), Matrix::identity(2), Matrix::zeros(2, 2)).unwrap();
        let c = random_cloud(4, 4, 2, 1.0);
        assert!(velocity_raw(&z, &c).unwrap().iter().flatten().all(|&x| x == 0.0));
    }

    #[test]
    fn raw_velocity_matches_double_loop() {
        let t = AttentionTriple::identity(2);
        let c = random_cloud(5, 3, 2, 1.0);
        let p = naive_weights(t.q(), t.k(), &c, &Matrix::identity(2));
        let vel = velocity_raw(&t, &c).unwrap();
        for i in 0..3 {
            for a in 0..2 {
                let mut s = 0.0;
                for j in 0..3 {
                    s += p[i][j] * c.point(j)[a];
                }
                assert!((vel[i][a] - s).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn rescaled_velocity_matches_double_loop() {
        let v = Matrix::from_rows(&[vec![1.0, 0.2], vec![0.0, 0.7]]).unwrap();
        let t = AttentionTriple::new(Matrix::identity(2), Matrix::diag(&[0.5, 1.0]), v.clone()).unwrap();
        let c = random_cloud(6, 4, 2, 1.0);
        let time = 0.8;
        let e = mat_exp(&v, time).unwrap();
        let p = naive_weights(t.q(), t.k(), &c, &e);
        let vel = velocity_rescaled(&t, &c, time).unwrap();
        for i in 0..4 {
            let mut pull = [0.0; 2];
            for j in 0..4 {
                for a in 0..2 {
                    pull[a] += p[i][j] * (c.point(j)[a] - c.point(i)[a]);
                }
            }
            let expected = v.mul_vec(&pull);
            for a in 0..2 {
                assert!((vel[i][a] - expected[a]).abs() < 1e-14, "{} vs {}", vel[i][a], expected[a]);
            }
        }
    }

    #[test]
    fn symmetric_pair_moves_oppositely() {
        let t = AttentionTriple::identity(2);
        let c = TokenCloud::new(vec![vec![0.3, -0.7], vec![-0.3, 0.7]]).unwrap();
        let vel = velocity_rescaled(&t, &c, 0.5).unwrap();
        assert_eq!(vel[0][0], -vel[1][0]);
        assert_eq!(vel[0][1], -vel[1][1]);
        let same = TokenCloud::new(vec![vec![1.0, 1.0]; 3]).unwrap();
        assert!(velocity_rescaled(&t, &same, 2.0).unwrap().iter().flatten().all(|&x| x == 0.0));
    }

    #[test]
    fn exponential_growth_of_single_token() {
        let t = AttentionTriple::identity(2);
        let c = TokenCloud::new(vec![vec![1.0, 0.0]]).unwrap();
        let traj = integrate(&t, &c, Mode::Raw, IntegratorParams::new(0.1, 1.0)).unwrap();
        assert_eq!(traj.times.len(), 11);
        let x = traj.final_cloud().point(0);
        // one RK4 step on x' = x multiplies by the degree-4 Taylor polynomial of e^h
        let h: f64 = 0.1;
        let amplification = 1.0 + h + h * h / 2.0 + h.powi(3) / 6.0 + h.powi(4) / 24.0;
        assert!((x[0] - amplification.powi(10)).abs() < 1e-14);
        assert_eq!(x[1], 0.0);
        let fine = integrate(&t, &c, Mode::Raw, IntegratorParams::new(0.01, 1.0)).unwrap();
        assert!((fine.final_cloud().point(0)[0] - std::f64::consts::E).abs() < 1e-8);
    }

    #[test]
    fn partial_final_step_and_recording() {
        let t = AttentionTriple::identity(1);
        let c = TokenCloud::new(vec![vec![1.0]]).unwrap();
        let traj = integrate(&t, &c, Mode::Raw, IntegratorParams { step: 0.1, t_end: 0.35, record_every: 2 }).unwrap();
        assert_eq!(traj.times, vec![0.0, 0.2, 0.35]);
        let step = |h: f64| 1.0 + h + h * h / 2.0 + h.powi(3) / 6.0 + h.powi(4) / 24.0;
        let expected = step(0.1).powi(3) * step(0.35 - 3.0 * 0.1);
        assert!((traj.final_cloud().point(0)[0] - expected).abs() < 1e-14);
        let zero = integrate(&t, &c, Mode::Raw, IntegratorParams::new(0.1, 0.0)).unwrap();
        assert_eq!(zero.times, vec![0.0]);
    }

    #[test]
    fn raw_blow_up_is_reported() {
        let t = AttentionTriple::new(Matrix::identity(1), Matrix::identity(1), Matrix::diag(&[50.0])).unwrap();
        let c = TokenCloud::new(vec![vec![1.0]]).unwrap();
        match integrate(&t, &c, Mode::Raw, IntegratorParams::new(0.1, 100.0)) {
            Err(DynamicsError::NonFiniteState { time, last_time, partial }) => {
                assert!(time > last_time);
                assert_eq!(partial.final_time(), last_time);
                assert!(partial.final_cloud().point(0)[0].is_finite());
            }
            other => panic!("expected blow-up, got {other:?}"),
        }
    }

    #[test]
    fn rescaling_single_token_is_constant() {
        let t = AttentionTriple::identity(2);
        let c = TokenCloud::new(vec![vec![0.5, -2.0]]).unwrap();
        let raw = integrate(&t, &c, Mode::Raw, IntegratorParams::new(0.01, 2.0)).unwrap();
        let z = rescale_trajectory(&raw, &t).unwrap();
        assert_eq!(z.snapshots[0], c);
        for s in &z.snapshots {
            assert!(linalg::distance(s.point(0), c.point(0)) < 1e-9);
        }
        assert!(matches!(rescale_trajectory(&z, &t), Err(DynamicsError::ModeMismatch { .. })));
    }

    #[test]
    fn trajectory_csv_layout() {
        let t = AttentionTriple::identity(2);
        let c = TokenCloud::new(vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let traj = integrate(&t, &c, Mode::Rescaled, IntegratorParams::new(0.5, 0.5)).unwrap();
        let mut buf = Vec::new();
        traj.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "t,token_index,coord_0,coord_1");
        assert_eq!(lines[1], "0.0,0,1.0,0.0");
        assert_eq!(lines.len(), 5);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let t = AttentionTriple::identity(3);
        let c = random_cloud(0, 2, 2, 1.0);
        assert!(matches!(velocity_raw(&t, &c), Err(DynamicsError::DimensionMismatch(_))));
        assert!(TokenCloud::new(vec![vec![f64::NAN]]).is_err());
    }
}
