use serde::{Deserialize, Serialize};

use super::{hypercube, rescaled, ExperimentError, TripleSpec, PINNED_SEED};
use crate::bounds::{meanfield_t_delta_bound, meanfield_t_delta_prob_bound, BoundReport};
use crate::clustering::{detect_times, extract_clusters, Clusters, ExitThreshold};
use crate::dynamics::{AttentionTriple, Trajectory};
use crate::linalg::{distance, dot, mat_exp, norm, orth_complement_basis, Matrix};
use crate::perturbation::{apply_lora, generate_init, InitKind, InitSpec, LoraFactors, Target};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RankOneConfig {
    /// `Q = K = vvᵀ`, `V = I`
    pub v: Vec<f64>,
    pub init: InitSpec,
    pub step: f64,
    pub horizon: f64,
    pub merge_radius: f64,
    pub csv_every: usize,
}

impl Default for RankOneConfig {
    fn default() -> Self {
        Self {
            v: vec![1.0, 0.0],
            init: hypercube(20, 2, 5.0, PINNED_SEED),
            step: 0.1,
            horizon: 40.0,
            merge_radius: 1e-2,
            csv_every: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RankOneReport {
    pub horizon: f64,
    pub cluster_count: usize,
    pub clusters: Clusters,
    /// `argmax_i ⟨z_i(0), v⟩`
    pub leader_plus: usize,
    /// `argmin_i ⟨z_i(0), v⟩`
    pub leader_minus: usize,
    /// `sign ⟨z_i(0), v⟩ ∈ {−1, 0, 1}`
    pub initial_signs: Vec<i8>,
    /// every token with a positive (negative) sign ends in the cluster of the positive (negative) leader
    pub signs_match_clusters: bool,
}

pub fn run_rank_one_scenario(cfg: &RankOneConfig) -> Result<(RankOneReport, Trajectory), ExperimentError> {
    let triple = TripleSpec::RankOne { v: cfg.v.clone() }.build()?;
    let z0 = generate_init(&cfg.init)?;
    if z0.d() != cfg.v.len() {
        return Err(ExperimentError::Config("init dimension differs from v".into()));
    }
    let traj = rescaled(&triple, &z0, cfg.step, cfg.horizon, 1)?;
    let clusters = extract_clusters(traj.final_cloud(), cfg.merge_radius)?;
    let proj: Vec<f64> = z0.points().iter().map(|z| dot(z, &cfg.v)).collect();
    let argext = |better: fn(f64, f64) -> bool| {
        (0..proj.len()).fold(0, |best, i| if better(proj[i], proj[best]) { i } else { best })
    };
    let leader_plus = argext(|a, b| a > b);
    let leader_minus = argext(|a, b| a < b);
    let initial_signs: Vec<i8> = proj.iter().map(|&p| if p > 0.0 { 1 } else if p < 0.0 { -1 } else { 0 }).collect();
    let (cp, cm) = (clusters.assignment[leader_plus], clusters.assignment[leader_minus]);
    let signs_match_clusters = initial_signs.iter().zip(&clusters.assignment).all(|(&s, &c)| match s {
        1 => c == cp,
        -1 => c == cm,
        _ => true,
    }) && (cp != cm || initial_signs.iter().all(|&s| s >= 0) || initial_signs.iter().all(|&s| s <= 0));
    let report = RankOneReport {
        horizon: traj.final_time(),
        cluster_count: clusters.len(),
        clusters,
        leader_plus,
        leader_minus,
        initial_signs,
        signs_match_clusters,
    };
    Ok((report, traj))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeanFieldConfig {
    pub triple: TripleSpec,
    /// tokens are drawn uniformly in the ball of this radius inside `Im(A)^⊥`
    pub radius: f64,
    pub n: usize,
    pub seed: u64,
    pub step: f64,
    /// closed-form comparison runs over `[0, closed_form_horizon]`
    pub closed_form_horizon: f64,
    /// total integration time, long enough for the smallest δ
    pub horizon: f64,
    pub deltas: Vec<f64>,
    /// failure probability parameter of the probabilistic bound (holds w.p. ≥ 1 − 2·prob_eps)
    pub prob_eps: f64,
}

impl MeanFieldConfig {
    fn init_spec(&self, triple: &AttentionTriple) -> InitSpec {
        InitSpec {
            n: self.n,
            d: triple.dim(),
            seed: self.seed,
            kind: InitKind::InOrthComplement { of: triple.a().clone(), radius: self.radius },
        }
    }
}

impl Default for MeanFieldConfig {
    fn default() -> Self {
        Self {
            triple: TripleSpec::Diagonal { qk: vec![1.0, 1.0, 0.0, 0.0], v: vec![2.0, 1.5, 0.5, 1.0] },
            radius: 1.0,
            n: 16,
            seed: PINNED_SEED,
            step: 0.01,
            closed_form_horizon: 5.0,
            horizon: 30.0,
            deltas: vec![1e-1, 1e-2, 1e-3],
            prob_eps: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MeanFieldDelta {
    pub delta: f64,
    #[serde(rename = "T_delta")]
    pub t_delta: Option<f64>,
    pub bound: BoundReport,
    pub prob_bound: BoundReport,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MeanFieldReport {
    /// `max |z_i(t) − (e^{−tV}(z_i(0) − m) + m)|` over recorded `t ≤ closed_form_horizon`
    pub closed_form_max_error: f64,
    /// `max_t ‖m(t) − m(0)‖`
    pub barycenter_drift: f64,
    pub barycenter: Vec<f64>,
    /// smallest eigenvalue of the symmetric part of `V` on `Im(A)^⊥`
    pub rate: f64,
    /// leading eigenvalue of `V` on `Im(A)^⊥`
    pub leading_eigenvalue: f64,
    pub note: &'static str,
    pub per_delta: Vec<MeanFieldDelta>,
}

/// Tokens in `Im(A)^⊥`, where attention is uniform and the rescaled dynamics have the
/// closed form `z_i(t) = e^{−tV}(z_i(0) − m) + m`.
pub fn run_meanfield_scenario(cfg: &MeanFieldConfig) -> Result<MeanFieldReport, ExperimentError> {
    let triple = cfg.triple.build()?;
    let z0 = generate_init(&cfg.init_spec(&triple))?;
    let horizon = cfg.horizon.max(cfg.closed_form_horizon);
    let traj = rescaled(&triple, &z0, cfg.step, horizon, 1)?;
    let m = z0.barycenter();
    let mut err = 0.0_f64;
    for (&t, cloud) in traj.times.iter().zip(&traj.snapshots) {
        if t > cfg.closed_form_horizon + 1e-12 {
            break;
        }
        let e = mat_exp(triple.v(), -t)?;
        for (z, z_init) in cloud.points().iter().zip(z0.points()) {
            let dev: Vec<f64> = z_init.iter().zip(&m).map(|(a, b)| a - b).collect();
            let exact: Vec<f64> = e.mul_vec(&dev).iter().zip(&m).map(|(a, b)| a + b).collect();
            err = err.max(z.iter().zip(&exact).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        }
    }
    let drift = traj.snapshots.iter().map(|c| distance(&c.barycenter(), &m)).fold(0.0, f64::max);
    let centers = vec![m.clone()];
    let mut per_delta = Vec::new();
    let mut rate = f64::NAN;
    let mut leading = f64::NAN;
    let mut note = "";
    for &delta in &cfg.deltas {
        let times = detect_times(&traj, &centers, delta, ExitThreshold::Delta)?;
        let b = meanfield_t_delta_bound(&z0, &triple, delta)?;
        rate = b.rate;
        leading = b.leading_eigenvalue;
        note = b.note;
        let measured = times.t_delta.unwrap_or(traj.final_time());
        let bound = BoundReport::new(
            "meanfield_T_delta_bound",
            [
                ("delta", delta),
                ("max_deviation", b.max_deviation),
                ("rate", b.rate),
                ("leading_eigenvalue", b.leading_eigenvalue),
                ("value_with_leading_eigenvalue", b.value_with_leading_eigenvalue),
            ],
            b.value,
        )
        .against(measured);
        let p = meanfield_t_delta_prob_bound(cfg.radius, b.complement_dim, z0.n(), delta, cfg.prob_eps, b.rate)?;
        let prob_bound = BoundReport::new(
            "meanfield_T_delta_prob_bound",
            [
                ("C", cfg.radius),
                ("d_perp", b.complement_dim as f64),
                ("n", z0.n() as f64),
                ("delta", delta),
                ("eps", cfg.prob_eps),
                ("rate", b.rate),
            ],
            p,
        )
        .against(measured);
        per_delta.push(MeanFieldDelta { delta, t_delta: times.t_delta, bound, prob_bound });
    }
    Ok(MeanFieldReport {
        closed_form_max_error: err,
        barycenter_drift: drift,
        barycenter: m,
        rate,
        leading_eigenvalue: leading,
        note,
        per_delta,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OrthogonalLoraConfig {
    pub triple: TripleSpec,
    /// direction of the rank-one update `Q̃ = Q + v̂v̂ᵀ`, `K̃ = K + v̂v̂ᵀ`; must be orthogonal to
    /// the row and column spaces of `A`
    pub v: Vec<f64>,
    pub n: usize,
    pub seed: u64,
    /// tokens start on the line `R v̂` with `|⟨z_i, v̂⟩| ∈ [c, c + spread]`
    pub c: f64,
    pub spread: f64,
    /// norm of the off-line offset, as a fraction of `c`
    pub offset_fraction: f64,
    pub step: f64,
    pub horizon: f64,
    pub merge_radius: f64,
}

impl Default for OrthogonalLoraConfig {
    fn default() -> Self {
        Self {
            triple: TripleSpec::Diagonal { qk: vec![1.0, 1.0, 0.0, 0.0], v: vec![0.5, 0.5, 1.0, 0.3] },
            v: vec![0.0, 0.0, 1.0, 0.0],
            n: 12,
            seed: PINNED_SEED,
            c: 5.0,
            spread: 2.0,
            offset_fraction: 0.01,
            step: 0.1,
            horizon: 30.0,
            merge_radius: 1e-2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CenterProjection {
    pub center: Vec<f64>,
    /// `⟨center, v̂⟩`
    pub along_v: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OrthogonalLoraReport {
    pub v: Vec<f64>,
    pub baseline_cluster_count: usize,
    pub baseline_centers: Vec<Vec<f64>>,
    pub perturbed_cluster_count: usize,
    /// perturbed centers sorted by `⟨·, v̂⟩`
    pub perturbed_centers: Vec<CenterProjection>,
    pub straddles_v: bool,
    /// norm of the off-line offset of the initial tokens
    pub offset: f64,
    pub offline_cluster_count: usize,
    /// Hausdorff distance between the off-line and on-line perturbed center sets
    pub offline_center_distance: f64,
    /// `offline_center_distance / offset`
    pub k_prime: f64,
}

fn sorted_centers(clusters: &Clusters, v: &[f64]) -> Vec<CenterProjection> {
    let mut out: Vec<CenterProjection> =
        clusters.centers.iter().map(|c| CenterProjection { center: c.clone(), along_v: dot(c, v) }).collect();
    out.sort_by(|a, b| a.along_v.total_cmp(&b.along_v));
    out
}

fn hausdorff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let one_way = |x: &[Vec<f64>], y: &[Vec<f64>]| {
        x.iter().map(|p| y.iter().map(|q| distance(p, q)).fold(f64::INFINITY, f64::min)).fold(0.0, f64::max)
    };
    one_way(a, b).max(one_way(b, a))
}

/// Baseline: tokens on a line in `Im(A)^⊥` collapse to their barycenter. Adding `v̂v̂ᵀ` to
/// `Q` and `K` splits them into two clusters on either side of the origin along `v̂`. The
/// same perturbed run from tokens displaced off the line measures the stability constant.
pub fn run_orthogonal_lora_scenario(cfg: &OrthogonalLoraConfig) -> Result<OrthogonalLoraReport, ExperimentError> {
    let triple = cfg.triple.build()?;
    let d = triple.dim();
    let vn = norm(&cfg.v);
    if cfg.v.len() != d || vn == 0.0 {
        return Err(ExperimentError::Config("v must be a non-zero vector of the model dimension".into()));
    }
    let v: Vec<f64> = cfg.v.iter().map(|x| x / vn).collect();
    let a = triple.a();
    let mut spanning: Vec<Vec<f64>> = (0..d).map(|j| a.column(j)).collect();
    spanning.extend(a.to_rows());
    let complement = orth_complement_basis(&spanning, d);
    let inside: f64 = complement.iter().map(|b| dot(b, &v).powi(2)).sum();
    if (1.0 - inside).abs() > 1e-9 {
        return Err(ExperimentError::Config("v is not orthogonal to the row and column spaces of A".into()));
    }
    let vvt = Matrix::outer(&v, &v);
    let lora = [
        LoraFactors::from_delta(Target::Q, &vvt)?,
        LoraFactors::from_delta(Target::K, &vvt)?,
    ];
    let perturbed_triple = apply_lora(&triple, &lora)?;

    let line = InitSpec { n: cfg.n, d, seed: cfg.seed, kind: InitKind::SeparatedAlong { v: v.clone(), c: cfg.c, spread: cfg.spread } };
    let offset = cfg.offset_fraction * cfg.c;
    let off_line = InitSpec {
        kind: InitKind::PerturbedLine { v: v.clone(), c: cfg.c, epsilon: offset, spread: cfg.spread },
        ..line.clone()
    };
    let z_line = generate_init(&line)?;
    let z_off = generate_init(&off_line)?;

    let run = |t: &AttentionTriple, z: &crate::dynamics::TokenCloud| -> Result<Clusters, ExperimentError> {
        let traj = rescaled(t, z, cfg.step, cfg.horizon, usize::MAX)?;
        Ok(extract_clusters(traj.final_cloud(), cfg.merge_radius)?)
    };
    let baseline = run(&triple, &z_line)?;
    let perturbed = run(&perturbed_triple, &z_line)?;
    let offline = run(&perturbed_triple, &z_off)?;
    let centers = sorted_centers(&perturbed, &v);
    let straddles = centers.len() == 2 && centers[0].along_v < 0.0 && centers[1].along_v > 0.0;
    let dist = hausdorff(&offline.centers, &perturbed.centers);
    Ok(OrthogonalLoraReport {
        v,
        baseline_cluster_count: baseline.len(),
        baseline_centers: baseline.centers,
        perturbed_cluster_count: perturbed.len(),
        perturbed_centers: centers,
        straddles_v: straddles,
        offset,
        offline_cluster_count: offline.len(),
        offline_center_distance: dist,
        k_prime: dist / offset,
    })
}
