//! Scenario runners. Each scenario is driven by a JSON [`ScenarioConfig`] whose every
//! field has a default, and produces a set of named report files. Identical configs
//! produce byte-identical files.

mod comparison;
mod geometry;
mod phase;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bounds::BoundError;
use crate::clustering::ClusteringError;
use crate::dynamics::{integrate, AttentionTriple, DynamicsError, IntegratorParams, Mode, TokenCloud, Trajectory};
use crate::linalg::{self, LinalgError, Matrix};
use crate::perturbation::{apply_lora, rank_one_attention, InitKind, InitSpec, LoraFactors, PerturbationError, Target};
use crate::transport::TransportError;

pub use comparison::{run_bound_comparison, BoundComparisonConfig, BoundComparisonReport, GridPoint};
pub use geometry::{
    run_meanfield_scenario, run_orthogonal_lora_scenario, run_rank_one_scenario, MeanFieldConfig, MeanFieldReport,
    OrthogonalLoraConfig, OrthogonalLoraReport, RankOneConfig, RankOneReport,
};
pub use phase::{
    run_phase_diagram, run_phase_transition_scenario, PhaseDiagramConfig, PhaseDiagramGrid, PhaseDiagramRow,
    PhaseTransitionConfig, PhaseTransitionReport,
};

pub const SCHEMA_VERSION: u32 = 1;

/// Seed of every default token initialization.
pub const PINNED_SEED: u64 = 3;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Perturbation(#[from] PerturbationError),
    #[error(transparent)]
    Clustering(#[from] ClusteringError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Bound(#[from] BoundError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unsupported schema_version {0}, expected {SCHEMA_VERSION}")]
    SchemaVersion(u32),
}

/// How to build an attention triple.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TripleSpec {
    Identity { d: usize },
    Explicit { q: Matrix, k: Matrix, v: Matrix },
    /// `Q = K = diag(q)`, `V = diag(v)`
    Diagonal { qk: Vec<f64>, v: Vec<f64> },
    /// `Q = K = vvᵀ`, `V = I`
    RankOne { v: Vec<f64> },
}

impl TripleSpec {
    pub fn build(&self) -> Result<AttentionTriple, ExperimentError> {
        Ok(match self {
            TripleSpec::Identity { d } => {
                if *d == 0 {
                    return Err(ExperimentError::Config("dimension must be positive".into()));
                }
                AttentionTriple::identity(*d)
            }
            TripleSpec::Explicit { q, k, v } => AttentionTriple::new(q.clone(), k.clone(), v.clone())?,
            TripleSpec::Diagonal { qk, v } => {
                if qk.len() != v.len() || qk.is_empty() {
                    return Err(ExperimentError::Config("diagonal triple needs equal, non-empty diagonals".into()));
                }
                AttentionTriple::new(Matrix::diag(qk), Matrix::diag(qk), Matrix::diag(v))?
            }
            TripleSpec::RankOne { v } => rank_one_attention(v)?,
        })
    }
}

/// `Ṽ = V − ε ûûᵀ`, applied as a LoRA update on the value matrix.
pub fn perturb_value(triple: &AttentionTriple, direction: &[f64], epsilon: f64) -> Result<AttentionTriple, ExperimentError> {
    let n = linalg::norm(direction);
    if direction.len() != triple.dim() || n == 0.0 {
        return Err(ExperimentError::Config("perturbation direction must be a non-zero vector of the model dimension".into()));
    }
    let u: Vec<f64> = direction.iter().map(|x| x / n).collect();
    if epsilon == 0.0 {
        return Ok(triple.clone());
    }
    let lora = LoraFactors::from_delta(Target::V, &Matrix::outer(&u, &u).scale(-epsilon))?;
    Ok(apply_lora(triple, &[lora])?)
}

pub(crate) fn hypercube(n: usize, d: usize, half_width: f64, seed: u64) -> InitSpec {
    InitSpec { n, d, seed, kind: InitKind::UniformHypercube { half_width } }
}

pub(crate) fn rescaled(
    triple: &AttentionTriple,
    cloud: &TokenCloud,
    step: f64,
    horizon: f64,
    record_every: usize,
) -> Result<Trajectory, ExperimentError> {
    Ok(integrate(triple, cloud, Mode::Rescaled, IntegratorParams { step, t_end: horizon, record_every })?)
}

/// Keep every `every`-th snapshot plus the last.
pub fn subsample(traj: &Trajectory, every: usize) -> Trajectory {
    let every = every.max(1);
    let last = traj.times.len() - 1;
    let keep: Vec<usize> = (0..=last).filter(|k| k % every == 0 || *k == last).collect();
    Trajectory {
        mode: traj.mode,
        step: traj.step,
        times: keep.iter().map(|&k| traj.times[k]).collect(),
        snapshots: keep.iter().map(|&k| traj.snapshots[k].clone()).collect(),
    }
}

pub fn trajectory_csv(traj: &Trajectory) -> Result<String, ExperimentError> {
    let mut buf = Vec::new();
    traj.write_csv(&mut buf).map_err(|e| ExperimentError::Config(e.to_string()))?;
    Ok(String::from_utf8(buf).expect("csv output is UTF-8"))
}

pub(crate) fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("reports serialize");
    s.push('\n');
    s
}

/// Estimated order `log2(e(h) / e(h/2))` of the integrator, with errors measured in
/// max-norm at `horizon` against a run at `h / reference_divisor`.
pub fn self_convergence_order(
    triple: &AttentionTriple,
    cloud: &TokenCloud,
    mode: Mode,
    horizon: f64,
    h: f64,
    reference_divisor: usize,
) -> Result<f64, ExperimentError> {
    let run = |step: f64| -> Result<TokenCloud, ExperimentError> {
        Ok(integrate(triple, cloud, mode, IntegratorParams { step, t_end: horizon, record_every: usize::MAX })?
            .final_cloud()
            .clone())
    };
    let reference = run(h / reference_divisor as f64)?;
    let err = |c: &TokenCloud| {
        c.points()
            .iter()
            .zip(reference.points())
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    };
    let e1 = err(&run(h)?);
    let e2 = err(&run(h / 2.0)?);
    Ok((e1 / e2).log2())
}

/// Largest per-step rise of `max_j φ*_k(z_j)` and largest per-step drop of
/// `min_j φ*_k(z_j)`, over the spectral indices `k` with `λ_k ≥ 0`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SpectralDrift {
    pub indices: Vec<usize>,
    pub max_rise_of_max: f64,
    pub max_drop_of_min: f64,
}

pub fn spectral_coordinate_drift(traj: &Trajectory, triple: &AttentionTriple) -> Result<SpectralDrift, ExperimentError> {
    let spec = triple.v_spectrum();
    let dual = spec
        .dual_basis
        .as_ref()
        .ok_or_else(|| ExperimentError::Config("value matrix has no dual basis".into()))?;
    let indices: Vec<usize> =
        (0..spec.dim()).filter(|&k| spec.eigenvalues[k].im == 0.0 && spec.eigenvalues[k].re >= 0.0).collect();
    let (mut rise, mut drop) = (0.0_f64, 0.0_f64);
    for &k in &indices {
        let extremes: Vec<(f64, f64)> = traj
            .snapshots
            .iter()
            .map(|c| {
                c.points().iter().map(|z| linalg::dot(&dual[k], z)).fold((f64::NEG_INFINITY, f64::INFINITY), |(mx, mn), p| {
                    (mx.max(p), mn.min(p))
                })
            })
            .collect();
        for w in extremes.windows(2) {
            rise = rise.max(w[1].0 - w[0].0);
            drop = drop.max(w[0].1 - w[1].1);
        }
    }
    Ok(SpectralDrift { indices, max_rise_of_max: rise, max_drop_of_min: drop })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scenario", rename_all = "snake_case")]
pub enum Scenario {
    PhaseTransition(PhaseTransitionConfig),
    PhaseDiagram(PhaseDiagramConfig),
    RankOne(RankOneConfig),
    MeanField(MeanFieldConfig),
    OrthogonalLora(OrthogonalLoraConfig),
    BoundComparison(BoundComparisonConfig),
}

fn default_schema() -> u32 {
    SCHEMA_VERSION
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    #[serde(default = "default_schema")]
    pub schema_version: u32,
    #[serde(default)]
    pub name: Option<String>,
    #[serde(flatten)]
    pub scenario: Scenario,
}

impl ScenarioConfig {
    pub fn new(scenario: Scenario) -> Self {
        Self { schema_version: SCHEMA_VERSION, name: None, scenario }
    }

    /// Parse either a scenario config or a manifest written by a previous run.
    pub fn from_json(text: &str) -> Result<Self, ExperimentError> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
        let value = match value.get("config") {
            Some(inner) if value.get("outputs").is_some() => inner.clone(),
            _ => value,
        };
        let cfg: ScenarioConfig = serde_json::from_value(value).map_err(|e| ExperimentError::Config(e.to_string()))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(ExperimentError::SchemaVersion(cfg.schema_version));
        }
        Ok(cfg)
    }

    pub fn name(&self) -> &str {
        if let Some(n) = &self.name {
            return n;
        }
        match self.scenario {
            Scenario::PhaseTransition(_) => "phase_transition",
            Scenario::PhaseDiagram(_) => "phase_diagram",
            Scenario::RankOne(_) => "rank_one",
            Scenario::MeanField(_) => "mean_field",
            Scenario::OrthogonalLora(_) => "orthogonal_lora",
            Scenario::BoundComparison(_) => "bound_comparison",
        }
    }

    /// Seed of the token initialization.
    pub fn seed(&self) -> u64 {
        match &self.scenario {
            Scenario::PhaseTransition(c) => c.init.seed,
            Scenario::PhaseDiagram(c) => c.init.seed,
            Scenario::RankOne(c) => c.init.seed,
            Scenario::MeanField(c) => c.seed,
            Scenario::OrthogonalLora(c) => c.seed,
            Scenario::BoundComparison(c) => c.init.seed,
        }
    }

    pub fn set_seed(&mut self, seed: u64) {
        match &mut self.scenario {
            Scenario::PhaseTransition(c) => c.init.seed = seed,
            Scenario::PhaseDiagram(c) => c.init.seed = seed,
            Scenario::RankOne(c) => c.init.seed = seed,
            Scenario::MeanField(c) => c.seed = seed,
            Scenario::OrthogonalLora(c) => c.seed = seed,
            Scenario::BoundComparison(c) => c.init.seed = seed,
        }
    }

    pub fn set_step(&mut self, step: f64) {
        match &mut self.scenario {
            Scenario::PhaseTransition(c) => c.step = step,
            Scenario::PhaseDiagram(c) => c.step = step,
            Scenario::RankOne(c) => c.step = step,
            Scenario::MeanField(c) => c.step = step,
            Scenario::OrthogonalLora(c) => c.step = step,
            Scenario::BoundComparison(c) => c.step = step,
        }
    }

    pub fn set_horizon(&mut self, horizon: f64) {
        match &mut self.scenario {
            Scenario::PhaseTransition(c) => c.horizon = horizon,
            Scenario::PhaseDiagram(c) => c.horizon_cap = horizon,
            Scenario::RankOne(c) => c.horizon = horizon,
            Scenario::MeanField(c) => c.horizon = horizon,
            Scenario::OrthogonalLora(c) => c.horizon = horizon,
            Scenario::BoundComparison(c) => c.horizon = horizon,
        }
    }

    /// Returns `false` when the scenario has no δ parameter.
    pub fn set_delta(&mut self, delta: f64) -> bool {
        match &mut self.scenario {
            Scenario::PhaseTransition(c) => c.delta = delta,
            Scenario::PhaseDiagram(c) => c.delta = delta,
            Scenario::MeanField(c) => c.deltas = vec![delta],
            _ => return false,
        }
        true
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OutputFile {
    pub name: String,
    pub contents: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Manifest<'a> {
    pub schema_version: u32,
    pub scenario: &'a str,
    pub seed: u64,
    pub config: &'a ScenarioConfig,
    pub outputs: Vec<&'a str>,
    pub versions: Versions,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Versions {
    pub attnlab: &'static str,
    pub report_schema: u32,
}

impl Default for Versions {
    fn default() -> Self {
        Self { attnlab: env!("CARGO_PKG_VERSION"), report_schema: SCHEMA_VERSION }
    }
}

/// The report files of a run followed by `manifest.json`.
pub fn run_scenario(config: &ScenarioConfig, threads: Option<usize>) -> Result<Vec<OutputFile>, ExperimentError> {
    if config.schema_version != SCHEMA_VERSION {
        return Err(ExperimentError::SchemaVersion(config.schema_version));
    }
    let file = |name: &str, contents: String| OutputFile { name: name.to_string(), contents };
    let mut files = match &config.scenario {
        Scenario::PhaseTransition(c) => {
            let (report, reference, perturbed) = run_phase_transition_scenario(c)?;
            vec![
                file("report.json", to_json(&report)),
                file("reference_trajectory.csv", trajectory_csv(&subsample(&reference, c.csv_every))?),
                file("perturbed_trajectory.csv", trajectory_csv(&subsample(&perturbed, c.csv_every))?),
            ]
        }
        Scenario::PhaseDiagram(c) => {
            let grid = run_phase_diagram(c, threads)?;
            vec![file("report.json", to_json(&grid)), file("phase_diagram.csv", grid.to_csv())]
        }
        Scenario::RankOne(c) => {
            let (report, traj) = run_rank_one_scenario(c)?;
            vec![file("report.json", to_json(&report)), file("trajectory.csv", trajectory_csv(&subsample(&traj, c.csv_every))?)]
        }
        Scenario::MeanField(c) => vec![file("report.json", to_json(&run_meanfield_scenario(c)?))],
        Scenario::OrthogonalLora(c) => vec![file("report.json", to_json(&run_orthogonal_lora_scenario(c)?))],
        Scenario::BoundComparison(c) => vec![file("report.json", to_json(&run_bound_comparison(c)?))],
    };
    let names: Vec<String> = files.iter().map(|f| f.name.clone()).collect();
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        scenario: config.name(),
        seed: config.seed(),
        config,
        outputs: names.iter().map(String::as_str).collect(),
        versions: Versions::default(),
    };
    files.push(file("manifest.json", to_json(&manifest)));
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_configs_parse_with_defaults() {
        for name in ["phase_transition", "phase_diagram", "rank_one", "mean_field", "orthogonal_lora", "bound_comparison"] {
            let cfg = ScenarioConfig::from_json(&format!(r#"{{"schema_version": 1, "scenario": "{name}"}}"#)).unwrap();
            assert_eq!(cfg.name(), name);
            let text = serde_json::to_string(&cfg).unwrap();
            assert_eq!(ScenarioConfig::from_json(&text).unwrap(), cfg);
        }
    }

    #[test]
    fn rejects_unknown_schema_and_scenario() {
        assert!(matches!(
            ScenarioConfig::from_json(r#"{"schema_version": 7, "scenario": "rank_one"}"#),
            Err(ExperimentError::SchemaVersion(7))
        ));
        assert!(ScenarioConfig::from_json(r#"{"schema_version": 1, "scenario": "nope"}"#).is_err());
    }

    #[test]
    fn overrides_apply() {
        let mut cfg = ScenarioConfig::from_json(r#"{"scenario": "phase_transition"}"#).unwrap();
        cfg.set_seed(99);
        cfg.set_step(0.05);
        assert!(cfg.set_delta(0.2));
        assert_eq!(cfg.seed(), 99);
        match cfg.scenario {
            Scenario::PhaseTransition(c) => assert_eq!((c.step, c.delta), (0.05, 0.2)),
            _ => unreachable!(),
        }
    }

    #[test]
    fn value_perturbation_matches_explicit_matrix() {
        let t = AttentionTriple::identity(2);
        let p = perturb_value(&t, &[0.0, 3.0], 0.01).unwrap();
        assert_eq!(p.v(), &Matrix::diag(&[1.0, 0.99]));
        assert_eq!(perturb_value(&t, &[0.0, 1.0], 0.0).unwrap().v(), t.v());
        assert!(perturb_value(&t, &[0.0, 0.0], 0.1).is_err());
    }

    #[test]
    fn triple_specs_build() {
        let t = TripleSpec::Diagonal { qk: vec![1.0, 0.0], v: vec![2.0, 1.0] }.build().unwrap();
        assert_eq!(t.a(), &Matrix::diag(&[1.0, 0.0]));
        let r = TripleSpec::RankOne { v: vec![2.0, 0.0] }.build().unwrap();
        assert_eq!(r.q(), &Matrix::diag(&[4.0, 0.0]));
        assert!(TripleSpec::Identity { d: 0 }.build().is_err());
    }

    #[test]
    fn convergence_order_of_linear_flow() {
        let cloud = TokenCloud::new(vec![vec![1.0, -0.5]]).unwrap();
        let order = self_convergence_order(&AttentionTriple::identity(2), &cloud, Mode::Raw, 1.0, 0.1, 8).unwrap();
        assert!((order - 4.0).abs() < 0.2);
    }

    #[test]
    fn subsample_keeps_endpoints() {
        let t = AttentionTriple::identity(1);
        let c = TokenCloud::new(vec![vec![1.0]]).unwrap();
        let traj = rescaled(&t, &c, 0.1, 1.05, 1).unwrap();
        let s = subsample(&traj, 4);
        assert_eq!(s.times.first(), Some(&0.0));
        assert_eq!(s.times.last(), traj.times.last());
        assert_eq!(s.times.len(), 4);
    }
}
