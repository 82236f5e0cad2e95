//! Command-line interface. Exit status: 0 on success, 1 on a domain error, 2 on a usage error.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::bounds::{t_star_upper_bound, BoundReport, SecondBranchConstants};
use crate::clustering::{detect_times, extract_clusters, s_delta, ClusterReport, ExitThreshold};
use crate::dynamics::{integrate, IntegratorParams, Mode, TokenCloud};
use crate::experiments::{
    run_scenario, trajectory_csv, BoundComparisonConfig, OutputFile, Scenario, ScenarioConfig,
    TripleSpec, Versions, PINNED_SEED, SCHEMA_VERSION,
};
use crate::linalg::io::read_matrix_file;
use crate::linalg::{eig, numerical_rank, singular_values, spectral_gap, DEFAULT_RANK_TOL};
use crate::perturbation::{generate_init, InitKind, InitSpec};
use crate::transport::{wasserstein, wasserstein_bruteforce, EmpiricalMeasure};
use crate::verify::{run_verify, summary_table};

pub const THREADS_ENV: &str = "ATTNLAB_THREADS";

#[derive(Debug, Parser)]
#[command(name = "attnlab", version, about = "Self-attention token dynamics: simulation, clustering and stability bounds")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Default)]
pub struct Overrides {
    /// JSON config file (a previous run's manifest is accepted too)
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub step: Option<f64>,
    #[arg(long)]
    pub horizon: Option<f64>,
    #[arg(long)]
    pub delta: Option<f64>,
    /// output directory
    #[arg(long, default_value = "attnlab_out")]
    pub out: PathBuf,
    /// worker threads for grid sweeps; defaults to $ATTNLAB_THREADS, then all cores
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Integrate the token dynamics and write the trajectory
    Simulate {
        #[command(flatten)]
        common: Overrides,
        #[arg(long, value_parser = ["raw", "rescaled"])]
        mode: Option<String>,
    },
    /// Bifurcation times over a grid of value perturbations
    PhaseDiagram {
        #[command(flatten)]
        common: Overrides,
    },
    /// Clusters of a point cloud file, or cluster detection on a simulated trajectory
    Clusters {
        #[command(flatten)]
        common: Overrides,
        /// matrix file with one token per row
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        merge_radius: Option<f64>,
        #[arg(long, value_parser = ["delta", "twice_delta"], default_value = "delta")]
        exit: String,
    },
    /// Wasserstein distance between two point clouds of equal size
    Wasserstein {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long, default_value_t = 2.0)]
        p: f64,
        /// enumerate all permutations instead of solving the assignment problem (n <= 9)
        #[arg(long)]
        brute_force: bool,
    },
    /// Eigenvalues, singular values, numerical rank and spectral gap of a matrix file
    Spectrum {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = DEFAULT_RANK_TOL)]
        rel_tol: f64,
        /// query matrix, to report c11 = <Q phi_1, K phi_1>
        #[arg(long, requires = "k")]
        q: Option<PathBuf>,
        #[arg(long, requires = "q")]
        k: Option<PathBuf>,
    },
    /// Evaluate bounds
    Bounds {
        #[command(subcommand)]
        which: BoundsCommand,
    },
    /// Run a scenario config and write its reports and manifest
    Scenario {
        #[command(flatten)]
        common: Overrides,
    },
    /// Run the invariant suites
    Verify {
        #[arg(long)]
        suite: Option<String>,
        /// force the named check to fail
        #[arg(long)]
        inject_fault: Option<String>,
    },
}

#[derive(Debug, Subcommand)]
pub enum BoundsCommand {
    /// Upper bound on the bifurcation time T*(delta)
    TStar {
        #[arg(long)]
        delta: f64,
        #[arg(long)]
        eps_gap: f64,
        #[arg(long, default_value_t = 1.0)]
        lambda1: f64,
        #[arg(long, default_value_t = 1.0)]
        c11: f64,
        #[arg(long)]
        z_sup: f64,
        #[arg(long, requires_all = ["n_count", "d_cluster"])]
        c0: Option<f64>,
        #[arg(long, requires = "c0")]
        n_count: Option<f64>,
        #[arg(long, requires = "c0")]
        d_cluster: Option<f64>,
        /// measured T* to compare against
        #[arg(long)]
        measured: Option<f64>,
    },
    /// Stability bound against measured W2 on a time grid
    Compare {
        #[command(flatten)]
        common: Overrides,
    },
}

/// Trajectory request of `simulate` and `clusters`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub schema_version: u32,
    pub triple: TripleSpec,
    pub init: InitSpec,
    pub mode: Mode,
    pub step: f64,
    pub horizon: f64,
    pub record_every: usize,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            triple: TripleSpec::Identity { d: 2 },
            init: InitSpec { n: 20, d: 2, seed: PINNED_SEED, kind: InitKind::UniformHypercube { half_width: 5.0 } },
            mode: Mode::Rescaled,
            step: 0.1,
            horizon: 20.0,
            record_every: 1,
        }
    }
}

#[derive(Serialize)]
struct SimulateManifest<'a> {
    schema_version: u32,
    command: &'static str,
    seed: u64,
    config: &'a SimulateConfig,
    outputs: Vec<&'static str>,
    versions: Versions,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Domain(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Domain(e)
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn read_json_value(path: &Path) -> anyhow::Result<serde_json::Value> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: serde_json::Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    Ok(match value.get("config") {
        Some(inner) if value.get("outputs").is_some() => inner.clone(),
        _ => value,
    })
}

fn load_scenario(path: Option<&Path>, default: impl FnOnce() -> Scenario) -> anyhow::Result<ScenarioConfig> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(ScenarioConfig::from_json(&text)?)
        }
        None => Ok(ScenarioConfig::new(default())),
    }
}

fn apply_overrides(cfg: &mut ScenarioConfig, o: &Overrides) -> Result<(), Failure> {
    if let Some(s) = o.seed {
        cfg.set_seed(s);
    }
    if let Some(s) = o.step {
        cfg.set_step(s);
    }
    if let Some(h) = o.horizon {
        cfg.set_horizon(h);
    }
    if let Some(d) = o.delta {
        if !cfg.set_delta(d) {
            return Err(usage(format!("scenario {} has no delta parameter", cfg.name())));
        }
    }
    Ok(())
}

fn threads(o: &Overrides) -> Result<Option<usize>, Failure> {
    if let Some(t) = o.threads {
        return Ok(Some(t));
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) => v.trim().parse().map(Some).map_err(|_| usage(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        Err(_) => Ok(None),
    }
}

fn write_outputs(dir: &Path, files: &[OutputFile]) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    for f in files {
        let path = dir.join(&f.name);
        fs::write(&path, &f.contents).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn print_json<T: Serialize>(value: &T) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run_and_write(cfg: &ScenarioConfig, o: &Overrides) -> Result<(), Failure> {
    let files = run_scenario(cfg, threads(o)?).map_err(anyhow::Error::from)?;
    write_outputs(&o.out, &files)?;
    for f in &files {
        println!("{}", o.out.join(&f.name).display());
    }
    Ok(())
}

fn load_simulate(o: &Overrides, mode: Option<&str>) -> Result<SimulateConfig, Failure> {
    let mut cfg: SimulateConfig = match &o.config {
        Some(p) => serde_json::from_value(read_json_value(p)?).map_err(|e| anyhow!("invalid simulate config: {e}"))?,
        None => SimulateConfig::default(),
    };
    if cfg.schema_version != SCHEMA_VERSION {
        return Err(Failure::Domain(anyhow!("unsupported schema_version {}", cfg.schema_version)));
    }
    if let Some(s) = o.seed {
        cfg.init.seed = s;
    }
    if let Some(s) = o.step {
        cfg.step = s;
    }
    if let Some(h) = o.horizon {
        cfg.horizon = h;
    }
    if let Some(m) = mode {
        cfg.mode = m.parse().map_err(|e: String| usage(e))?;
    }
    Ok(cfg)
}

fn simulate(o: &Overrides, mode: Option<&str>) -> Result<(), Failure> {
    let cfg = load_simulate(o, mode)?;
    let triple = cfg.triple.build().map_err(anyhow::Error::from)?;
    let z0 = generate_init(&cfg.init).map_err(anyhow::Error::from)?;
    let params = IntegratorParams { step: cfg.step, t_end: cfg.horizon, record_every: cfg.record_every };
    let traj = integrate(&triple, &z0, cfg.mode, params).map_err(anyhow::Error::from)?;
    let manifest = SimulateManifest {
        schema_version: SCHEMA_VERSION,
        command: "simulate",
        seed: cfg.init.seed,
        config: &cfg,
        outputs: vec!["trajectory.csv"],
        versions: Versions::default(),
    };
    let files = [
        OutputFile { name: "trajectory.csv".into(), contents: trajectory_csv(&traj).map_err(anyhow::Error::from)? },
        OutputFile { name: "manifest.json".into(), contents: format!("{}\n", serde_json::to_string_pretty(&manifest).map_err(anyhow::Error::from)?) },
    ];
    write_outputs(&o.out, &files)?;
    for f in &files {
        println!("{}", o.out.join(&f.name).display());
    }
    Ok(())
}

fn read_cloud(path: &Path) -> anyhow::Result<TokenCloud> {
    Ok(TokenCloud::from_matrix(&read_matrix_file(path)?))
}

#[derive(Serialize)]
struct CloudClusters {
    merge_radius: f64,
    clusters: crate::clustering::Clusters,
    delta: Option<f64>,
    s_delta: Option<Vec<usize>>,
}

fn clusters(o: &Overrides, input: Option<&Path>, merge_radius: Option<f64>, exit: &str) -> Result<(), Failure> {
    let delta = o.delta;
    if let Some(path) = input {
        let cloud = read_cloud(path)?;
        let radius = merge_radius.or(delta.map(|d| d / 10.0)).ok_or_else(|| usage("--input needs --merge-radius or --delta"))?;
        let cl = extract_clusters(&cloud, radius).map_err(anyhow::Error::from)?;
        let s = match delta {
            Some(d) => Some(s_delta(&cloud, &cl.centers, d).map_err(anyhow::Error::from)?),
            None => None,
        };
        return Ok(print_json(&CloudClusters { merge_radius: radius, clusters: cl, delta, s_delta: s })?);
    }
    let mut cfg = load_simulate(o, None)?;
    cfg.mode = Mode::Rescaled;
    let delta = delta.unwrap_or(0.1);
    let triple = cfg.triple.build().map_err(anyhow::Error::from)?;
    let z0 = generate_init(&cfg.init).map_err(anyhow::Error::from)?;
    let params = IntegratorParams { step: cfg.step, t_end: cfg.horizon, record_every: cfg.record_every };
    let traj = integrate(&triple, &z0, Mode::Rescaled, params).map_err(anyhow::Error::from)?;
    let cl = extract_clusters(traj.final_cloud(), merge_radius.unwrap_or(delta / 10.0)).map_err(anyhow::Error::from)?;
    let exit = if exit == "twice_delta" { ExitThreshold::TwiceDelta } else { ExitThreshold::Delta };
    let times = detect_times(&traj, &cl.centers, delta, exit).map_err(anyhow::Error::from)?;
    Ok(print_json(&ClusterReport::new(delta, cl, times))?)
}

#[derive(Serialize)]
struct WassersteinOut {
    p: f64,
    n: usize,
    distance: f64,
    method: &'static str,
}

fn wasserstein_cmd(a: &Path, b: &Path, p: f64, brute: bool) -> Result<(), Failure> {
    let (ma, mb) = (EmpiricalMeasure::uniform(read_cloud(a)?), EmpiricalMeasure::uniform(read_cloud(b)?));
    let distance = if brute { wasserstein_bruteforce(&ma, &mb, p) } else { wasserstein(&ma, &mb, p) }
        .map_err(anyhow::Error::from)?;
    Ok(print_json(&WassersteinOut { p, n: ma.len(), distance, method: if brute { "brute_force" } else { "assignment" } })?)
}

#[derive(Serialize)]
struct SpectrumOut {
    eigenvalues: Vec<crate::linalg::Complex>,
    real_spectrum: bool,
    singular_values: Vec<f64>,
    rel_tol: f64,
    numerical_rank: usize,
    spectral_gap: crate::linalg::SpectralGap,
    right_eigenvectors: Option<Vec<Vec<f64>>>,
    dual_basis: Option<Vec<Vec<f64>>>,
    condition: Option<f64>,
}

fn spectrum(input: &Path, rel_tol: f64, q: Option<&Path>, k: Option<&Path>) -> Result<(), Failure> {
    if !(rel_tol > 0.0 && rel_tol < 1.0) {
        return Err(usage("--rel-tol must lie in (0, 1)"));
    }
    let m = read_matrix_file(input).map_err(anyhow::Error::from)?;
    let spec = eig(&m).map_err(anyhow::Error::from)?;
    let qk = match (q, k) {
        (Some(q), Some(k)) => Some((read_matrix_file(q).map_err(anyhow::Error::from)?, read_matrix_file(k).map_err(anyhow::Error::from)?)),
        _ => None,
    };
    let gap = spectral_gap(&m, qk.as_ref().map(|(q, k)| (q, k))).map_err(anyhow::Error::from)?;
    Ok(print_json(&SpectrumOut {
        real_spectrum: spec.is_real(),
        eigenvalues: spec.eigenvalues.clone(),
        singular_values: singular_values(&m),
        rel_tol,
        numerical_rank: numerical_rank(&m, rel_tol),
        spectral_gap: gap,
        right_eigenvectors: spec.right_eigenvectors,
        dual_basis: spec.dual_basis,
        condition: spec.condition,
    })?)
}

fn bounds(which: &BoundsCommand) -> Result<(), Failure> {
    match which {
        BoundsCommand::TStar { delta, eps_gap, lambda1, c11, z_sup, c0, n_count, d_cluster, measured } => {
            let second = match (c0, n_count, d_cluster) {
                (Some(c0), Some(n), Some(d)) => Some(SecondBranchConstants { c0: *c0, n: *n, d: *d }),
                _ => None,
            };
            let b = t_star_upper_bound(*delta, *eps_gap, *lambda1, *c11, *z_sup, second).map_err(anyhow::Error::from)?;
            let mut inputs = vec![
                ("delta", *delta),
                ("eps_gap", *eps_gap),
                ("lambda1", *lambda1),
                ("c11", *c11),
                ("z_sup", *z_sup),
                ("first_branch", b.first_branch),
                ("asymptotic", b.asymptotic),
            ];
            if let Some(s) = b.second_branch {
                inputs.push(("second_branch", s));
            }
            let mut report = BoundReport::new("t_star_upper_bound", inputs, b.value);
            if let Some(m) = measured {
                report = report.against(*m);
            }
            Ok(print_json(&report)?)
        }
        BoundsCommand::Compare { common } => {
            let mut cfg = load_scenario(common.config.as_deref(), || Scenario::BoundComparison(BoundComparisonConfig::default()))?;
            if !matches!(cfg.scenario, Scenario::BoundComparison(_)) {
                return Err(usage("bounds compare needs a bound_comparison config"));
            }
            apply_overrides(&mut cfg, common)?;
            run_and_write(&cfg, common)
        }
    }
}

fn verify(suite: Option<&str>, fault: Option<&str>) -> Result<bool, Failure> {
    let results = run_verify(suite, fault).map_err(|e| usage(e.to_string()))?;
    print!("{}", summary_table(&results));
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    if failed.is_empty() {
        println!("all {} checks passed", results.len());
        Ok(true)
    } else {
        eprintln!("failing invariants: {}", failed.join(", "));
        Ok(false)
    }
}

fn dispatch(cli: Cli) -> Result<bool, Failure> {
    match &cli.command {
        Command::Simulate { common, mode } => simulate(common, mode.as_deref())?,
        Command::PhaseDiagram { common } => {
            let mut cfg = load_scenario(common.config.as_deref(), || Scenario::PhaseDiagram(Default::default()))?;
            if !matches!(cfg.scenario, Scenario::PhaseDiagram(_)) {
                return Err(usage("phase-diagram needs a phase_diagram config"));
            }
            apply_overrides(&mut cfg, common)?;
            run_and_write(&cfg, common)?;
        }
        Command::Clusters { common, input, merge_radius, exit } => clusters(common, input.as_deref(), *merge_radius, exit)?,
        Command::Wasserstein { a, b, p, brute_force } => wasserstein_cmd(a, b, *p, *brute_force)?,
        Command::Spectrum { input, rel_tol, q, k } => spectrum(input, *rel_tol, q.as_deref(), k.as_deref())?,
        Command::Bounds { which } => bounds(which)?,
        Command::Scenario { common } => {
            let Some(path) = common.config.as_deref() else { return Err(usage("scenario needs --config")) };
            let mut cfg = load_scenario(Some(path), || unreachable!())?;
            apply_overrides(&mut cfg, common)?;
            run_and_write(&cfg, common)?;
        }
        Command::Verify { suite, inject_fault } => return verify(suite.as_deref(), inject_fault.as_deref()),
    }
    Ok(true)
}

/// Parse `args` (including the program name), run, and return the exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\nUsage: attnlab <COMMAND> [OPTIONS]; see `attnlab --help`");
            2
        }
        Err(Failure::Domain(e)) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_flags() {
        let cli = Cli::try_parse_from(["attnlab", "scenario", "--config", "c.json", "--seed", "4", "--threads", "2"]).unwrap();
        match cli.command {
            Command::Scenario { common } => {
                assert_eq!(common.seed, Some(4));
                assert_eq!(common.threads, Some(2));
                assert_eq!(common.config.as_deref(), Some(Path::new("c.json")));
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(run(["attnlab", "frobnicate"]), 2);
        assert_eq!(run(["attnlab", "wasserstein", "--a", "x.csv"]), 2);
        assert_eq!(run(["attnlab", "simulate", "--mode", "sideways"]), 2);
        assert_eq!(run(["attnlab", "scenario"]), 2);
    }

    #[test]
    fn missing_file_is_a_domain_error() {
        assert_eq!(run(["attnlab", "spectrum", "--input", "/nonexistent/V.csv"]), 1);
    }

    #[test]
    fn flag_overrides_beat_config_values() {
        let mut cfg = ScenarioConfig::from_json(r#"{"scenario": "rank_one", "init": {"n": 4, "d": 2, "seed": 9, "kind": "uniform_hypercube", "half_width": 1.0}}"#).unwrap();
        let o = Overrides { seed: Some(11), ..Default::default() };
        apply_overrides(&mut cfg, &o).unwrap();
        assert_eq!(cfg.seed(), 11);
        let o = Overrides { delta: Some(0.3), ..Default::default() };
        assert!(matches!(apply_overrides(&mut cfg, &o), Err(Failure::Usage(_))));
    }
}
