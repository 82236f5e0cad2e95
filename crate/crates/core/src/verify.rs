//! Invariant suites run by `attnlab verify`. Each check reduces to a non-negative
//! violation measure compared with a tolerance; a named fault can be injected to
//! exercise the failure path.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::dynamics::{attention_weights_raw, attention_weights_rescaled, velocity_rescaled, AttentionTriple, TokenCloud};
use crate::dynamics::{integrate, IntegratorParams, Mode};
use crate::experiments::{
    run_bound_comparison, run_meanfield_scenario, spectral_coordinate_drift, BoundComparisonConfig, MeanFieldConfig,
};
use crate::linalg::{eig, mat_exp, Matrix};
use crate::transport::{wasserstein, wasserstein_bruteforce, EmpiricalMeasure};

pub const SUITES: [&str; 6] = ["linalg", "dynamics", "monotonicity", "transport", "meanfield", "bounds"];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub suite: &'static str,
    pub name: &'static str,
    pub violation: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum VerifyError {
    #[error("unknown suite {0:?}; expected one of {SUITES:?}")]
    UnknownSuite(String),
    #[error("unknown fault {0:?}; expected the name of a check")]
    UnknownFault(String),
}

type Check = (&'static str, &'static str, f64, fn() -> f64);

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_matrix(r: &mut ChaCha8Rng, d: usize) -> Matrix {
    Matrix::new(d, d, (0..d * d).map(|_| r.random_range(-1.0..1.0)).collect()).expect("finite entries")
}

fn random_cloud(r: &mut ChaCha8Rng, n: usize, d: usize, half: f64) -> TokenCloud {
    TokenCloud::new((0..n).map(|_| (0..d).map(|_| r.random_range(-half..half)).collect()).collect()).expect("finite")
}

fn eig_reconstruction() -> f64 {
    let mut r = rng(101);
    let mut worst = 0.0_f64;
    for _ in 0..20 {
        let s = random_matrix(&mut r, 4);
        let sym = s.add(&s.transpose());
        let spec = eig(&sym).expect("symmetric matrices have a real spectrum");
        let phi = spec.right_eigenvectors.as_ref().expect("diagonalizable");
        for (k, v) in phi.iter().enumerate() {
            let mv = sym.mul_vec(v);
            let lam = spec.eigenvalues[k].re;
            worst = worst.max(mv.iter().zip(v).map(|(a, b)| (a - lam * b).abs()).fold(0.0, f64::max));
        }
    }
    worst
}

fn expm_group_law() -> f64 {
    let mut r = rng(102);
    let mut worst = 0.0_f64;
    for _ in 0..10 {
        let m = random_matrix(&mut r, 3);
        let ab = mat_exp(&m, 0.7).and_then(|a| Ok(a.matmul(&mat_exp(&m, 0.5)?))).expect("finite");
        let direct = mat_exp(&m, 1.2).expect("finite");
        worst = worst.max(ab.sub(&direct).max_abs() / direct.max_abs());
    }
    worst
}

fn row_stochasticity() -> f64 {
    let mut r = rng(103);
    let mut worst = 0.0_f64;
    for _ in 0..10 {
        let t = AttentionTriple::new(random_matrix(&mut r, 3), random_matrix(&mut r, 3), random_matrix(&mut r, 3))
            .expect("finite triple");
        let c = random_cloud(&mut r, 7, 3, 2.0);
        let time = r.random_range(0.0..5.0);
        for p in [attention_weights_raw(&t, &c).expect("valid"), attention_weights_rescaled(&t, &c, time).expect("valid")] {
            for i in 0..p.rows() {
                let row = p.row(i);
                worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
                worst = worst.max(row.iter().map(|&x| (-x).max(0.0)).fold(0.0, f64::max));
            }
        }
    }
    worst
}

fn permutation_equivariance() -> f64 {
    let mut r = rng(104);
    let t = AttentionTriple::new(random_matrix(&mut r, 2), random_matrix(&mut r, 2), random_matrix(&mut r, 2))
        .expect("finite triple");
    let c = random_cloud(&mut r, 6, 2, 2.0);
    let perm = [3, 0, 5, 1, 4, 2];
    let v = velocity_rescaled(&t, &c, 1.5).expect("valid");
    let vp = velocity_rescaled(&t, &c.permuted(&perm), 1.5).expect("valid");
    perm.iter().enumerate().map(|(i, &j)| v[j].iter().zip(&vp[i]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)).fold(0.0, f64::max)
}

fn monotonicity() -> f64 {
    let mut r = rng(105);
    let mut worst = 0.0_f64;
    for _ in 0..3 {
        let s = random_matrix(&mut r, 2).add(&Matrix::identity(2).scale(2.0));
        let lam: Vec<f64> = (0..2).map(|_| r.random_range(0.0..1.0)).collect();
        let det = s[(0, 0)] * s[(1, 1)] - s[(0, 1)] * s[(1, 0)];
        if det.abs() < 0.1 {
            continue;
        }
        let sinv = Matrix::from_rows(&[vec![s[(1, 1)], -s[(0, 1)]], vec![-s[(1, 0)], s[(0, 0)]]]).expect("finite").scale(1.0 / det);
        let v = s.matmul(&Matrix::diag(&lam)).matmul(&sinv);
        let Ok(t) = AttentionTriple::new(random_matrix(&mut r, 2), random_matrix(&mut r, 2), v) else { continue };
        let c = random_cloud(&mut r, 8, 2, 2.0);
        let Ok(traj) = integrate(&t, &c, Mode::Rescaled, IntegratorParams::new(0.1, 10.0)) else { continue };
        if let Ok(drift) = spectral_coordinate_drift(&traj, &t) {
            worst = worst.max(drift.max_rise_of_max).max(drift.max_drop_of_min);
        }
    }
    worst
}

fn w2_oracle() -> f64 {
    let mut r = rng(106);
    let mut worst = 0.0_f64;
    for _ in 0..30 {
        let n = r.random_range(2..=7);
        let d = r.random_range(1..=3);
        let p = if r.random_bool(0.5) { 1.0 } else { 2.0 };
        let a = EmpiricalMeasure::uniform(random_cloud(&mut r, n, d, 2.0));
        let b = EmpiricalMeasure::uniform(random_cloud(&mut r, n, d, 2.0));
        let fast = wasserstein(&a, &b, p).expect("matching sizes");
        let slow = wasserstein_bruteforce(&a, &b, p).expect("small instance");
        worst = worst.max((fast - slow).abs());
    }
    worst
}

fn meanfield_report() -> crate::experiments::MeanFieldReport {
    let cfg = MeanFieldConfig { horizon: 5.0, deltas: vec![0.1], ..Default::default() };
    run_meanfield_scenario(&cfg).expect("default mean-field scenario runs")
}

fn barycenter_conservation() -> f64 {
    meanfield_report().barycenter_drift
}

fn closed_form() -> f64 {
    meanfield_report().closed_form_max_error
}

/// Largest amount by which a measured quantity exceeds its bound.
fn bound_domination() -> f64 {
    let mf = meanfield_report();
    let mut reports: Vec<crate::bounds::BoundReport> = mf.per_delta.into_iter().map(|p| p.bound).collect();
    let cfg = BoundComparisonConfig { grid_points: 5, horizon: 1.0, ..Default::default() };
    let cmp = run_bound_comparison(&cfg).expect("default comparison runs");
    reports.extend(cmp.pre_saturation.into_iter().map(|g| g.stability));
    reports
        .iter()
        .filter_map(|r| r.dominates.as_ref())
        .map(|d| if d.holds { 0.0 } else { -d.margin })
        .fold(0.0, f64::max)
}

const CHECKS: [Check; 9] = [
    ("linalg", "eigenpair_residual", 1e-10, eig_reconstruction),
    ("linalg", "expm_group_law", 1e-12, expm_group_law),
    ("dynamics", "row_stochasticity", 1e-12, row_stochasticity),
    ("dynamics", "permutation_equivariance", 0.0, permutation_equivariance),
    ("monotonicity", "spectral_coordinate_monotonicity", 1e-7, monotonicity),
    ("transport", "w2_oracle_equivalence", 1e-12, w2_oracle),
    ("meanfield", "barycenter_conservation", 1e-12, barycenter_conservation),
    ("meanfield", "closed_form_agreement", 1e-8, closed_form),
    ("bounds", "bound_domination", 0.0, bound_domination),
];

/// Run the selected suite (all when `None`). With `fault` naming a check, that check's
/// violation is offset by one so that it fails.
pub fn run_verify(suite: Option<&str>, fault: Option<&str>) -> Result<Vec<CheckResult>, VerifyError> {
    if let Some(s) = suite {
        if !SUITES.contains(&s) {
            return Err(VerifyError::UnknownSuite(s.to_string()));
        }
    }
    if let Some(f) = fault {
        if !CHECKS.iter().any(|c| c.1 == f) {
            return Err(VerifyError::UnknownFault(f.to_string()));
        }
    }
    Ok(CHECKS
        .iter()
        .filter(|c| suite.is_none_or(|s| s == c.0))
        .map(|&(suite, name, tolerance, f)| {
            let mut violation = f();
            if fault == Some(name) {
                violation += 1.0;
            }
            CheckResult { suite, name, violation, tolerance, passed: violation <= tolerance }
        })
        .collect())
}

pub fn check_names() -> Vec<&'static str> {
    CHECKS.iter().map(|c| c.1).collect()
}

pub fn summary_table(results: &[CheckResult]) -> String {
    let mut out = format!("{:<14}{:<36}{:>14}{:>12}  status\n", "suite", "check", "violation", "tolerance");
    for r in results {
        out.push_str(&format!(
            "{:<14}{:<36}{:>14.3e}{:>12.1e}  {}\n",
            r.suite,
            r.name,
            r.violation,
            r.tolerance,
            if r.passed { "PASS" } else { "FAIL" }
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transport_suite_passes_and_filters() {
        let r = run_verify(Some("transport"), None).unwrap();
        assert_eq!(r.len(), 1);
        assert!(r[0].passed);
    }

    #[test]
    fn injected_fault_fails_the_named_check() {
        let r = run_verify(Some("dynamics"), Some("row_stochasticity")).unwrap();
        let failed: Vec<&str> = r.iter().filter(|c| !c.passed).map(|c| c.name).collect();
        assert_eq!(failed, vec!["row_stochasticity"]);
        assert!(summary_table(&r).contains("FAIL"));
    }

    #[test]
    fn unknown_names_are_rejected() {
        assert_eq!(run_verify(Some("nope"), None), Err(VerifyError::UnknownSuite("nope".into())));
        assert!(matches!(run_verify(None, Some("nope")), Err(VerifyError::UnknownFault(_))));
    }
}
