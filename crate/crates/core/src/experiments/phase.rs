use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{hypercube, perturb_value, rescaled, ExperimentError, TripleSpec, PINNED_SEED};
use crate::bounds::{t_star_upper_bound, BoundReport, SecondBranchConstants};
use crate::clustering::{
    check_phi1_limit_pattern, detect_times, extract_clusters, s_delta, ClusterReport, Clusters, ExitThreshold, PatternFit,
};
use crate::dynamics::{TokenCloud, Trajectory};
use crate::linalg::spectral_gap;
use crate::perturbation::{generate_init, InitSpec};
use crate::transport::w2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhaseTransitionConfig {
    pub triple: TripleSpec,
    /// `Ṽ = V − ε ûûᵀ`
    pub direction: Vec<f64>,
    pub epsilon: f64,
    pub init: InitSpec,
    pub step: f64,
    pub horizon: f64,
    pub record_every: usize,
    pub delta: f64,
    pub exit: ExitThreshold,
    /// defaults to `δ/10`
    pub merge_radius: Option<f64>,
    /// time at which the reference clusters are extracted
    pub reference_time: f64,
    pub snapshot_times: Vec<f64>,
    pub pattern_tol: f64,
    /// the tube check runs over `[T_δ, window_factor·T_δ]`
    pub window_factor: f64,
    /// keep every `csv_every`-th snapshot in the trajectory CSVs
    pub csv_every: usize,
}

impl Default for PhaseTransitionConfig {
    fn default() -> Self {
        Self {
            triple: TripleSpec::Identity { d: 2 },
            direction: vec![0.0, 1.0],
            epsilon: 0.01,
            init: hypercube(20, 2, 5.0, PINNED_SEED),
            step: 0.1,
            horizon: 400.0,
            record_every: 1,
            delta: 0.1,
            exit: ExitThreshold::Delta,
            merge_radius: None,
            reference_time: 20.0,
            snapshot_times: vec![0.0, 5.0, 10.5, 20.0],
            pattern_tol: 0.05,
            window_factor: 10.0,
            csv_every: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Snapshot {
    pub t: f64,
    pub reference: TokenCloud,
    pub perturbed: TokenCloud,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TubeCheck {
    pub window: Option<[f64; 2]>,
    /// the recorded times cover the whole window
    pub window_covered: bool,
    /// largest distance of a perturbed token to the reference centers inside the window
    pub max_dist: f64,
    pub all_within_two_delta: bool,
    pub max_w2: f64,
    /// `δ / (n + 1)`
    pub w2_threshold: f64,
    pub passes: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PhaseTransitionChecks {
    pub t_delta_detected: bool,
    pub tube: TubeCheck,
    pub t_star_after_t_delta: bool,
    pub pattern: PatternFit,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PhaseTransitionReport {
    pub epsilon: f64,
    pub delta: f64,
    pub merge_radius: f64,
    pub reference_clusters: Clusters,
    pub reference: ClusterReport,
    pub perturbed: ClusterReport,
    /// `(t, W_2(μ_t, ν_t))`
    pub w2_series: Vec<[f64; 2]>,
    pub snapshots: Vec<Snapshot>,
    pub checks: PhaseTransitionChecks,
}

fn validate_common(step: f64, horizon: f64, delta: f64) -> Result<(), ExperimentError> {
    if !(step > 0.0 && horizon > 0.0 && delta > 0.0) || !(step.is_finite() && horizon.is_finite() && delta.is_finite()) {
        return Err(ExperimentError::Config("step, horizon and delta must be positive and finite".into()));
    }
    Ok(())
}

/// Reference and `Ṽ`-perturbed rescaled dynamics from one initialization, with the
/// reference clusters taken at `reference_time`.
pub fn run_phase_transition_scenario(
    cfg: &PhaseTransitionConfig,
) -> Result<(PhaseTransitionReport, Trajectory, Trajectory), ExperimentError> {
    validate_common(cfg.step, cfg.horizon, cfg.delta)?;
    let triple = cfg.triple.build()?;
    let tilde = perturb_value(&triple, &cfg.direction, cfg.epsilon)?;
    let z0 = generate_init(&cfg.init)?;
    let horizon = cfg.horizon.max(cfg.reference_time);
    let reference = rescaled(&triple, &z0, cfg.step, horizon, cfg.record_every)?;
    let perturbed = rescaled(&tilde, &z0, cfg.step, horizon, cfg.record_every)?;
    let merge_radius = cfg.merge_radius.unwrap_or(cfg.delta / 10.0);
    let clusters = extract_clusters(reference.snapshot_near(cfg.reference_time).1, merge_radius)?;
    let ref_times = detect_times(&reference, &clusters.centers, cfg.delta, cfg.exit)?;
    let per_times = detect_times(&perturbed, &clusters.centers, cfg.delta, cfg.exit)?;
    let w2_series = reference
        .times
        .iter()
        .zip(reference.snapshots.iter().zip(&perturbed.snapshots))
        .map(|(&t, (a, b))| Ok([t, w2(a, b)?]))
        .collect::<Result<Vec<_>, ExperimentError>>()?;

    let n = z0.n();
    let w2_threshold = cfg.delta / (n as f64 + 1.0);
    let tube = match ref_times.t_delta {
        None => TubeCheck {
            window: None,
            window_covered: false,
            max_dist: f64::NAN,
            all_within_two_delta: false,
            max_w2: f64::NAN,
            w2_threshold,
            passes: false,
        },
        Some(td) => {
            let end = cfg.window_factor * td;
            let (mut max_dist, mut max_w2, mut inside) = (0.0_f64, 0.0_f64, true);
            for (k, &t) in perturbed.times.iter().enumerate() {
                if t < td || t > end {
                    continue;
                }
                let cloud = &perturbed.snapshots[k];
                inside &= s_delta(cloud, &clusters.centers, 2.0 * cfg.delta)?.len() == n;
                max_dist = max_dist.max(crate::clustering::max_distance(cloud, &clusters.centers));
                max_w2 = max_w2.max(w2_series[k][1]);
            }
            let covered = perturbed.final_time() >= end;
            TubeCheck {
                window: Some([td, end]),
                window_covered: covered,
                max_dist,
                all_within_two_delta: inside,
                max_w2,
                w2_threshold,
                passes: covered && inside && max_w2 <= w2_threshold,
            }
        }
    };
    let t_star_after = matches!((ref_times.t_delta, per_times.t_star), (Some(td), Some(ts)) if ts > td);
    let pattern = check_phi1_limit_pattern(&perturbed, &tilde, cfg.pattern_tol)?;
    let t_delta_detected = ref_times.t_delta.is_some();
    let snapshots = cfg
        .snapshot_times
        .iter()
        .map(|&t| {
            let (ts, a) = reference.snapshot_near(t);
            Snapshot { t: ts, reference: a.clone(), perturbed: perturbed.snapshot_near(t).1.clone() }
        })
        .collect();
    let report = PhaseTransitionReport {
        epsilon: cfg.epsilon,
        delta: cfg.delta,
        merge_radius,
        reference_clusters: clusters.clone(),
        reference: ClusterReport::new(cfg.delta, clusters.clone(), ref_times),
        perturbed: ClusterReport::new(cfg.delta, clusters, per_times),
        w2_series,
        snapshots,
        checks: PhaseTransitionChecks { t_delta_detected, tube, t_star_after_t_delta: t_star_after, pattern },
    };
    Ok((report, reference, perturbed))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhaseDiagramConfig {
    pub triple: TripleSpec,
    pub direction: Vec<f64>,
    pub init: InitSpec,
    pub delta: f64,
    pub exit: ExitThreshold,
    /// explicit grid; when absent `count` log-spaced values in `[eps_min, eps_max]`
    pub epsilons: Option<Vec<f64>>,
    pub eps_min: f64,
    pub eps_max: f64,
    pub count: usize,
    pub step: f64,
    /// per-row horizon `min(horizon_factor / ε, horizon_cap)`
    pub horizon_factor: f64,
    pub horizon_cap: f64,
    pub reference_time: f64,
    pub merge_radius: Option<f64>,
    /// sup-norm input of the bifurcation bound; measured from each row when absent
    pub z_sup: Option<f64>,
    /// constants of the second bound branch; the branch is skipped when absent
    pub second_branch: Option<SecondBranchConstants>,
}

impl Default for PhaseDiagramConfig {
    fn default() -> Self {
        Self {
            triple: TripleSpec::Identity { d: 2 },
            direction: vec![0.0, 1.0],
            init: hypercube(20, 2, 5.0, PINNED_SEED),
            delta: 0.1,
            exit: ExitThreshold::Delta,
            epsilons: None,
            eps_min: 1e-4,
            eps_max: 1e-1,
            count: 24,
            step: 0.1,
            horizon_factor: 200.0,
            horizon_cap: 500.0,
            reference_time: 20.0,
            merge_radius: None,
            z_sup: None,
            second_branch: None,
        }
    }
}

impl PhaseDiagramConfig {
    pub fn grid(&self) -> Result<Vec<f64>, ExperimentError> {
        let eps = match &self.epsilons {
            Some(e) => e.clone(),
            None => {
                if !(self.eps_min > 0.0 && self.eps_max > self.eps_min && self.count >= 2) {
                    return Err(ExperimentError::Config("need 0 < eps_min < eps_max and count >= 2".into()));
                }
                let (a, b) = (self.eps_min.log10(), self.eps_max.log10());
                (0..self.count).map(|k| 10f64.powf(a + (b - a) * k as f64 / (self.count - 1) as f64)).collect()
            }
        };
        if eps.iter().any(|&e| !(e > 0.0 && e < 1.0)) || eps.windows(2).any(|w| w[1] <= w[0]) {
            return Err(ExperimentError::Config("epsilons must be strictly increasing inside (0, 1)".into()));
        }
        Ok(eps)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PhaseDiagramRow {
    pub epsilon: f64,
    pub horizon: f64,
    #[serde(rename = "T_delta")]
    pub t_delta: Option<f64>,
    #[serde(rename = "T_star")]
    pub t_star: Option<f64>,
    /// largest rescaled token norm over the row's trajectory
    pub z_sup_measured: Option<f64>,
    /// `t_star_upper_bound` against `T*`, or against the horizon when `T*` was not reached
    pub bound: Option<BoundReport>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PhaseDiagramChecks {
    /// `T*` non-increasing in ε up to one recording interval; absent `T*` counts as +∞
    pub t_star_non_increasing: bool,
    /// spread of the detected `T_δ` across rows
    pub t_delta_spread: Option<f64>,
    pub t_delta_within_one_step: bool,
    pub bound_dominates: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PhaseDiagramGrid {
    pub delta: f64,
    pub seed: u64,
    pub step: f64,
    pub reference_centers: Vec<Vec<f64>>,
    pub epsilons: Vec<f64>,
    pub rows: Vec<PhaseDiagramRow>,
    pub checks: PhaseDiagramChecks,
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or(String::new(), |v| format!("{v:?}"))
}

impl PhaseDiagramGrid {
    /// `epsilon,T_delta,T_star`; absent values are empty fields.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["epsilon", "T_delta", "T_star"]).expect("in-memory write");
        for r in &self.rows {
            w.write_record([format!("{:?}", r.epsilon), fmt_opt(r.t_delta), fmt_opt(r.t_star)]).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv output is UTF-8")
    }
}

fn phase_row(
    cfg: &PhaseDiagramConfig,
    triple: &crate::dynamics::AttentionTriple,
    z0: &TokenCloud,
    centers: &[Vec<f64>],
    eps: f64,
) -> PhaseDiagramRow {
    let horizon = (cfg.horizon_factor / eps).min(cfg.horizon_cap);
    let mut row = PhaseDiagramRow {
        epsilon: eps,
        horizon,
        t_delta: None,
        t_star: None,
        z_sup_measured: None,
        bound: None,
        error: None,
    };
    let result = (|| -> Result<(), ExperimentError> {
        let tilde = perturb_value(triple, &cfg.direction, eps)?;
        let traj = rescaled(&tilde, z0, cfg.step, horizon, 1)?;
        let times = detect_times(&traj, centers, cfg.delta, cfg.exit)?;
        row.t_delta = times.t_delta;
        row.t_star = times.t_star;
        let z_sup = traj.snapshots.iter().map(TokenCloud::max_norm).fold(0.0, f64::max);
        row.z_sup_measured = Some(z_sup);
        let gap = spectral_gap(tilde.v(), Some((tilde.q(), tilde.k())))?;
        let c11 = gap.c11.unwrap_or(f64::NAN);
        let z_in = cfg.z_sup.unwrap_or(z_sup);
        let bound = t_star_upper_bound(cfg.delta, gap.gap, gap.lambda1.re, c11, z_in, cfg.second_branch)?;
        let mut inputs = vec![
            ("delta", cfg.delta),
            ("eps_gap", gap.gap),
            ("lambda1", gap.lambda1.re),
            ("c11", c11),
            ("z_sup", z_in),
            ("first_branch", bound.first_branch),
            ("asymptotic", bound.asymptotic),
        ];
        if let Some(s) = bound.second_branch {
            inputs.push(("second_branch", s));
        }
        let measured = times.t_star.unwrap_or(traj.final_time());
        row.bound = Some(BoundReport::new("t_star_upper_bound", inputs, bound.value).against(measured));
        Ok(())
    })();
    if let Err(e) = result {
        row.error = Some(e.to_string());
    }
    row
}

/// One row per ε: detection times of the `Ṽ = V − ε ûûᵀ` dynamics against the reference
/// clusters, and the bifurcation-time bound. Rows are independent; `threads` sizes the
/// worker pool (default: all cores). The output does not depend on the thread count.
pub fn run_phase_diagram(cfg: &PhaseDiagramConfig, threads: Option<usize>) -> Result<PhaseDiagramGrid, ExperimentError> {
    validate_common(cfg.step, cfg.horizon_cap, cfg.delta)?;
    let epsilons = cfg.grid()?;
    let triple = cfg.triple.build()?;
    let z0 = generate_init(&cfg.init)?;
    let reference = rescaled(&triple, &z0, cfg.step, cfg.reference_time, 1)?;
    let centers = extract_clusters(reference.final_cloud(), cfg.merge_radius.unwrap_or(cfg.delta / 10.0))?.centers;
    let compute = || -> Vec<PhaseDiagramRow> {
        epsilons.par_iter().map(|&e| phase_row(cfg, &triple, &z0, &centers, e)).collect()
    };
    let rows = match threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t.max(1))
            .build()
            .map_err(|e| ExperimentError::Config(e.to_string()))?
            .install(compute),
        None => compute(),
    };

    let star = |r: &PhaseDiagramRow| r.t_star.unwrap_or(f64::INFINITY);
    let t_star_non_increasing =
        rows.windows(2).all(|w| star(&w[1]) <= star(&w[0]) + cfg.step || star(&w[0]).is_infinite());
    let tds: Vec<f64> = rows.iter().filter_map(|r| r.t_delta).collect();
    let spread = if tds.is_empty() {
        None
    } else {
        Some(tds.iter().copied().fold(f64::NEG_INFINITY, f64::max) - tds.iter().copied().fold(f64::INFINITY, f64::min))
    };
    let checks = PhaseDiagramChecks {
        t_star_non_increasing,
        t_delta_spread: spread,
        t_delta_within_one_step: spread.is_some_and(|s| s <= cfg.step + 1e-9) && tds.len() == rows.len(),
        bound_dominates: rows.iter().all(|r| r.bound.as_ref().is_none_or(BoundReport::holds)),
    };
    Ok(PhaseDiagramGrid {
        delta: cfg.delta,
        seed: cfg.init.seed,
        step: cfg.step,
        reference_centers: centers,
        epsilons,
        rows,
        checks,
    })
}
