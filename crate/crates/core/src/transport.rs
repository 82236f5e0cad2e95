//! Wasserstein distances between uniform empirical measures with the same number of atoms.
//!
//! For two clouds of `n` points the optimal coupling is a permutation, so
//! `W_p^p = min_σ (1/n) Σ_i ‖x_i − y_σ(i)‖^p` is an assignment problem.

use serde::Serialize;
use thiserror::Error;

use crate::dynamics::TokenCloud;

pub const BRUTE_FORCE_MAX_N: usize = 9;

#[derive(Debug, Error, PartialEq)]
pub enum TransportError {
    #[error("measures have different sizes ({0} vs {1})")]
    SizeMismatch(usize, usize),
    #[error("measures live in different dimensions ({0} vs {1})")]
    DimensionMismatch(usize, usize),
    #[error("exhaustive search is limited to n <= {BRUTE_FORCE_MAX_N}, got {0}")]
    TooLarge(usize),
    #[error("order p must be a finite number >= 1, got {0}")]
    InvalidOrder(f64),
}

/// Uniform measure `(1/n) Σ δ_{x_i}` over the points of a cloud.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EmpiricalMeasure {
    cloud: TokenCloud,
}

impl EmpiricalMeasure {
    pub fn uniform(cloud: TokenCloud) -> Self {
        Self { cloud }
    }

    pub fn cloud(&self) -> &TokenCloud {
        &self.cloud
    }

    pub fn len(&self) -> usize {
        self.cloud.n()
    }

    pub fn is_empty(&self) -> bool {
        self.cloud.n() == 0
    }
}

impl From<TokenCloud> for EmpiricalMeasure {
    fn from(cloud: TokenCloud) -> Self {
        Self::uniform(cloud)
    }
}

fn check(a: &EmpiricalMeasure, b: &EmpiricalMeasure, p: f64) -> Result<(), TransportError> {
    if !(p >= 1.0 && p.is_finite()) {
        return Err(TransportError::InvalidOrder(p));
    }
    if a.len() != b.len() {
        return Err(TransportError::SizeMismatch(a.len(), b.len()));
    }
    if a.cloud.d() != b.cloud.d() {
        return Err(TransportError::DimensionMismatch(a.cloud.d(), b.cloud.d()));
    }
    Ok(())
}

/// `cost[i][j] = ‖x_i − y_j‖^p`
pub fn cost_matrix(a: &TokenCloud, b: &TokenCloud, p: f64) -> Vec<Vec<f64>> {
    a.points()
        .iter()
        .map(|x| {
            b.points()
                .iter()
                .map(|y| {
                    let sq: f64 = x.iter().zip(y).map(|(u, v)| (u - v) * (u - v)).sum();
                    if p == 2.0 {
                        sq
                    } else {
                        sq.sqrt().powf(p)
                    }
                })
                .collect()
        })
        .collect()
}

fn assignment_cost(cost: &[Vec<f64>], perm: &[usize]) -> f64 {
    perm.iter().enumerate().map(|(i, &j)| cost[i][j]).sum()
}

/// Minimum-cost perfect assignment on a square cost matrix by shortest augmenting
/// paths with dual potentials. Returns `row → column` and the total cost.
pub fn solve_assignment(cost: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let n = cost.len();
    if n == 0 {
        return (Vec::new(), 0.0);
    }
    // 1-based arrays; column 0 is the virtual root
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut col0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[col0] = true;
            let i0 = owner[col0];
            let mut delta = f64::INFINITY;
            let mut col1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let reduced = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if reduced < minv[j] {
                    minv[j] = reduced;
                    way[j] = col0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    col1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            col0 = col1;
            if owner[col0] == 0 {
                break;
            }
        }
        loop {
            let prev = way[col0];
            owner[col0] = owner[prev];
            col0 = prev;
            if col0 == 0 {
                break;
            }
        }
    }
    let mut perm = vec![0; n];
    for j in 1..=n {
        perm[owner[j] - 1] = j - 1;
    }
    let total = assignment_cost(cost, &perm);
    (perm, total)
}

/// Exhaustive minimum over all `n!` permutations (Heap's algorithm).
pub fn brute_force_assignment(cost: &[Vec<f64>]) -> Result<(Vec<usize>, f64), TransportError> {
    let n = cost.len();
    if n > BRUTE_FORCE_MAX_N {
        return Err(TransportError::TooLarge(n));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = (perm.clone(), assignment_cost(cost, &perm));
    let mut c = vec![0usize; n];
    let mut i = 1;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            let total = assignment_cost(cost, &perm);
            if total < best.1 {
                best = (perm.clone(), total);
            }
            c[i] += 1;
            i = 1;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    Ok(best)
}

fn finish(total: f64, n: usize, p: f64) -> f64 {
    let mean = (total / n as f64).max(0.0);
    if p == 1.0 {
        mean
    } else {
        mean.powf(1.0 / p)
    }
}

/// `W_p(a, b)` via the assignment solver.
pub fn wasserstein(a: &EmpiricalMeasure, b: &EmpiricalMeasure, p: f64) -> Result<f64, TransportError> {
    check(a, b, p)?;
    let (_, total) = solve_assignment(&cost_matrix(&a.cloud, &b.cloud, p));
    Ok(finish(total, a.len(), p))
}

/// `W_p(a, b)` by enumerating every permutation; `n ≤ 9`.
pub fn wasserstein_bruteforce(a: &EmpiricalMeasure, b: &EmpiricalMeasure, p: f64) -> Result<f64, TransportError> {
    check(a, b, p)?;
    let (_, total) = brute_force_assignment(&cost_matrix(&a.cloud, &b.cloud, p))?;
    Ok(finish(total, a.len(), p))
}

pub fn w2(a: &TokenCloud, b: &TokenCloud) -> Result<f64, TransportError> {
    wasserstein(&EmpiricalMeasure::uniform(a.clone()), &EmpiricalMeasure::uniform(b.clone()), 2.0)
}
