use serde::{Deserialize, Serialize};

use super::{hypercube, perturb_value, ExperimentError, TripleSpec, PINNED_SEED};
use crate::bounds::{perturbation_constant, stability_w2_bound, BoundReport, C1Choice, DEFAULT_QUADRATURE_STEP};
use crate::dynamics::{integrate, AttentionTriple, IntegratorParams, Mode, TokenCloud};
use crate::perturbation::{generate_init, InitSpec};
use crate::transport::w2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundComparisonConfig {
    pub triple: TripleSpec,
    pub direction: Vec<f64>,
    pub epsilon: f64,
    pub init: InitSpec,
    pub c1: C1Choice,
    pub step: f64,
    pub quadrature_step: f64,
    /// number of grid times strictly before saturation
    pub grid_points: usize,
    /// additional evenly spaced grid over `(0, horizon]`, where saturated points are reported vacuous
    pub horizon: f64,
}

impl Default for BoundComparisonConfig {
    fn default() -> Self {
        Self {
            triple: TripleSpec::Identity { d: 2 },
            direction: vec![0.0, 1.0],
            epsilon: 0.01,
            init: hypercube(20, 2, 0.5, PINNED_SEED),
            c1: C1Choice::PerturbationConstant,
            step: 0.01,
            quadrature_step: DEFAULT_QUADRATURE_STEP,
            grid_points: 10,
            horizon: 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GridPoint {
    pub t: f64,
    pub measured_w2: f64,
    pub stability: BoundReport,
    pub perturbation_constant: BoundReport,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoundComparisonReport {
    pub r0: f64,
    /// last time (to bisection accuracy) at which the stability bound is finite; absent
    /// when it stays finite over the whole horizon
    pub saturation_time: Option<f64>,
    pub pre_saturation: Vec<GridPoint>,
    pub horizon_grid: Vec<GridPoint>,
    /// every non-vacuous report holds
    pub all_hold: bool,
    pub vacuous_count: usize,
}

fn raw_w2(a: &AttentionTriple, b: &AttentionTriple, z0: &TokenCloud, t: f64, step: f64) -> Result<f64, ExperimentError> {
    if t == 0.0 {
        return Ok(w2(z0, z0)?);
    }
    let p = IntegratorParams { step, t_end: t, record_every: usize::MAX };
    let x = integrate(a, z0, Mode::Raw, p)?;
    let y = integrate(b, z0, Mode::Raw, p)?;
    Ok(w2(x.final_cloud(), y.final_cloud())?)
}

fn grid_point(
    cfg: &BoundComparisonConfig,
    triple: &AttentionTriple,
    tilde: &AttentionTriple,
    z0: &TokenCloud,
    r0: f64,
    t: f64,
) -> Result<GridPoint, ExperimentError> {
    let measured = raw_w2(triple, tilde, z0, t, cfg.step)?;
    let b = stability_w2_bound(cfg.c1, triple, tilde, r0, t, cfg.quadrature_step)?;
    let stability = BoundReport::new(
        "stability_w2_bound",
        [("t", t), ("R0", r0), ("R_t", b.r_t), ("C_t", b.c_t), ("K_t", b.k_t), ("two_C1_sq", b.twice_c1_squared)],
        b.value,
    )
    .against(measured);
    let k = perturbation_constant(triple, tilde, r0, t);
    let perturbation_constant = BoundReport::new("perturbation_constant", [("t", t), ("R0", r0)], k);
    Ok(GridPoint { t, measured_w2: measured, stability, perturbation_constant })
}

/// Measured `W_2` between the raw dynamics of a triple and its `V`-perturbation, against
/// the stability bound on a grid below the saturation time and on a grid over the horizon.
pub fn run_bound_comparison(cfg: &BoundComparisonConfig) -> Result<BoundComparisonReport, ExperimentError> {
    if !(cfg.horizon > 0.0 && cfg.step > 0.0) || cfg.grid_points == 0 {
        return Err(ExperimentError::Config("horizon, step and grid_points must be positive".into()));
    }
    let triple = cfg.triple.build()?;
    let tilde = perturb_value(&triple, &cfg.direction, cfg.epsilon)?;
    let z0 = generate_init(&cfg.init)?;
    let r0 = z0.max_norm();
    let finite = |t: f64| -> Result<bool, ExperimentError> {
        Ok(stability_w2_bound(cfg.c1, &triple, &tilde, r0, t, cfg.quadrature_step)?.value.is_finite())
    };
    let saturation_time = if finite(cfg.horizon)? {
        None
    } else {
        let (mut lo, mut hi) = (0.0, cfg.horizon);
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if finite(mid)? {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Some(lo)
    };
    let top = saturation_time.unwrap_or(cfg.horizon);
    let m = cfg.grid_points;
    let pre_saturation = (1..=m)
        .map(|k| grid_point(cfg, &triple, &tilde, &z0, r0, top * k as f64 / m as f64))
        .collect::<Result<Vec<_>, _>>()?;
    let horizon_grid = (1..=m)
        .map(|k| grid_point(cfg, &triple, &tilde, &z0, r0, cfg.horizon * k as f64 / m as f64))
        .collect::<Result<Vec<_>, _>>()?;
    let all: Vec<&GridPoint> = pre_saturation.iter().chain(&horizon_grid).collect();
    Ok(BoundComparisonReport {
        r0,
        saturation_time,
        all_hold: all.iter().all(|g| g.stability.holds()),
        vacuous_count: all.iter().filter(|g| g.stability.value.is_infinite()).count(),
        pre_saturation,
        horizon_grid,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bounds::Verdict;

    #[test]
    fn zero_perturbation_bounds_dominate_zero() {
        let cfg = BoundComparisonConfig { epsilon: 0.0, horizon: 0.5, grid_points: 3, ..Default::default() };
        let r = run_bound_comparison(&cfg).unwrap();
        assert!(r.all_hold);
        for g in r.pre_saturation.iter().chain(&r.horizon_grid) {
            assert_eq!(g.measured_w2, 0.0);
            assert!(g.stability.value >= 0.0);
        }
    }

    #[test]
    fn saturated_points_are_vacuous() {
        let cfg = BoundComparisonConfig { init: hypercube(6, 2, 5.0, 1), horizon: 1.0, grid_points: 4, ..Default::default() };
        let r = run_bound_comparison(&cfg).unwrap();
        let t_sat = r.saturation_time.unwrap();
        assert!(t_sat < 1.0);
        assert!(r.pre_saturation.iter().all(|g| g.stability.value.is_finite()));
        let last = r.horizon_grid.last().unwrap();
        assert_eq!(last.stability.dominates.as_ref().unwrap().verdict, Verdict::Vacuous);
        assert!(r.vacuous_count >= 1);
    }
}
