//! δ-approximate clustering: tube membership, cluster extraction, entry and exit
//! times, and checks on the leading spectral coordinate of the limit points.

use serde::Serialize;
use thiserror::Error;

use crate::dynamics::{AttentionTriple, Mode, TokenCloud, Trajectory};
use crate::linalg::{distance, dot};

#[derive(Debug, Error, PartialEq)]
pub enum ClusteringError {
    #[error("center list is empty")]
    EmptyCenters,
    #[error("delta must be positive, got {0}")]
    InvalidDelta(f64),
    #[error("merge radius must be positive, got {0}")]
    InvalidRadius(f64),
    #[error("value matrix has no dual basis")]
    NoDualBasis,
    #[error("leading eigenvalue of the value matrix is not real")]
    ComplexLeadingEigenvalue,
    #[error("cluster detection needs a rescaled trajectory")]
    NotRescaled,
    #[error("dimension mismatch between centers and tokens")]
    DimensionMismatch,
}

fn check_delta(delta: f64) -> Result<(), ClusteringError> {
    if delta > 0.0 && delta.is_finite() {
        Ok(())
    } else {
        Err(ClusteringError::InvalidDelta(delta))
    }
}

fn dist_to_centers(x: &[f64], centers: &[Vec<f64>]) -> f64 {
    centers.iter().map(|c| distance(x, c)).fold(f64::INFINITY, f64::min)
}

/// Indices of tokens within `delta` of some center, ascending.
pub fn s_delta(cloud: &TokenCloud, centers: &[Vec<f64>], delta: f64) -> Result<Vec<usize>, ClusteringError> {
    check_delta(delta)?;
    if centers.is_empty() {
        return Err(ClusteringError::EmptyCenters);
    }
    if centers.iter().any(|c| c.len() != cloud.d()) {
        return Err(ClusteringError::DimensionMismatch);
    }
    Ok((0..cloud.n()).filter(|&i| dist_to_centers(cloud.point(i), centers) <= delta).collect())
}

/// `max_i dist(z_i, centers)`
pub fn max_distance(cloud: &TokenCloud, centers: &[Vec<f64>]) -> f64 {
    cloud.points().iter().map(|p| dist_to_centers(p, centers)).fold(0.0, f64::max)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Clusters {
    pub centers: Vec<Vec<f64>>,
    /// token index → position in `centers`
    pub assignment: Vec<usize>,
}

impl Clusters {
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn members(&self, cluster: usize) -> Vec<usize> {
        (0..self.assignment.len()).filter(|&i| self.assignment[i] == cluster).collect()
    }
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Single-linkage grouping: tokens chained by pairwise distances `≤ merge_radius`
/// share a cluster. Clusters are numbered by their first token, centers are means.
pub fn extract_clusters(cloud: &TokenCloud, merge_radius: f64) -> Result<Clusters, ClusteringError> {
    if !(merge_radius > 0.0 && merge_radius.is_finite()) {
        return Err(ClusteringError::InvalidRadius(merge_radius));
    }
    let n = cloud.n();
    let mut parent: Vec<usize> = (0..n).collect();
    for i in 0..n {
        for j in (i + 1)..n {
            if distance(cloud.point(i), cloud.point(j)) <= merge_radius {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                if ri != rj {
                    parent[ri.max(rj)] = ri.min(rj);
                }
            }
        }
    }
    let mut label_of_root = vec![usize::MAX; n];
    let mut assignment = vec![0; n];
    let mut sizes: Vec<usize> = Vec::new();
    for i in 0..n {
        let r = find(&mut parent, i);
        if label_of_root[r] == usize::MAX {
            label_of_root[r] = sizes.len();
            sizes.push(0);
        }
        assignment[i] = label_of_root[r];
        sizes[assignment[i]] += 1;
    }
    let d = cloud.d();
    let mut centers = vec![vec![0.0; d]; sizes.len()];
    for (i, &c) in assignment.iter().enumerate() {
        for (acc, x) in centers[c].iter_mut().zip(cloud.point(i)) {
            *acc += x;
        }
    }
    for (center, &size) in centers.iter_mut().zip(&sizes) {
        center.iter_mut().for_each(|x| *x /= size as f64);
    }
    Ok(Clusters { centers, assignment })
}

/// Which crossing of the tube boundary counts as leaving it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExitThreshold {
    /// `d(t) ≥ δ`
    #[default]
    Delta,
    /// `d(t) ≥ 2δ`
    TwiceDelta,
}

impl ExitThreshold {
    pub fn value(self, delta: f64) -> f64 {
        match self {
            ExitThreshold::Delta => delta,
            ExitThreshold::TwiceDelta => 2.0 * delta,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DetectedTimes {
    pub t_delta: Option<f64>,
    pub t_star: Option<f64>,
    /// `(t, d(t))` at every recorded time
    pub max_dist_series: Vec<[f64; 2]>,
}

/// First recorded time inside the δ-tube, and the first recorded time from then on
/// at which the tube is left.
pub fn detect_times(
    traj: &Trajectory,
    centers: &[Vec<f64>],
    delta: f64,
    exit: ExitThreshold,
) -> Result<DetectedTimes, ClusteringError> {
    check_delta(delta)?;
    if traj.mode != Mode::Rescaled {
        return Err(ClusteringError::NotRescaled);
    }
    if centers.is_empty() {
        return Err(ClusteringError::EmptyCenters);
    }
    let series: Vec<[f64; 2]> =
        traj.times.iter().zip(&traj.snapshots).map(|(&t, c)| [t, max_distance(c, centers)]).collect();
    let entry = series.iter().position(|s| s[1] <= delta);
    let threshold = exit.value(delta);
    let t_star = entry.and_then(|k| series[k..].iter().find(|s| s[1] >= threshold).map(|s| s[0]));
    Ok(DetectedTimes { t_delta: entry.map(|k| series[k][0]), t_star, max_dist_series: series })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClusterReport {
    pub delta: f64,
    #[serde(rename = "T_delta")]
    pub t_delta: Option<f64>,
    #[serde(rename = "T_star")]
    pub t_star: Option<f64>,
    pub centers: Vec<Vec<f64>>,
    pub assignment: Vec<usize>,
    pub max_dist_series: Vec<[f64; 2]>,
}

impl ClusterReport {
    pub fn new(delta: f64, clusters: Clusters, times: DetectedTimes) -> Self {
        Self {
            delta,
            t_delta: times.t_delta,
            t_star: times.t_star,
            centers: clusters.centers,
            assignment: clusters.assignment,
            max_dist_series: times.max_dist_series,
        }
    }

    /// Entry and exit times agree with the recorded distance series.
    pub fn is_consistent(&self, exit: ExitThreshold) -> bool {
        let entry_ok = match self.t_delta {
            Some(t) => self.max_dist_series.iter().all(|s| {
                if s[0] < t {
                    s[1] > self.delta
                } else if s[0] == t {
                    s[1] <= self.delta
                } else {
                    true
                }
            }),
            None => self.max_dist_series.iter().all(|s| s[1] > self.delta),
        };
        let exit_ok = match (self.t_delta, self.t_star) {
            (Some(td), Some(ts)) => {
                ts >= td
                    && self.max_dist_series.iter().any(|s| s[0] == ts && s[1] >= exit.value(self.delta))
                    && self
                        .max_dist_series
                        .iter()
                        .filter(|s| s[0] >= td && s[0] < ts)
                        .all(|s| s[1] < exit.value(self.delta))
            }
            (None, Some(_)) => false,
            _ => true,
        };
        entry_ok && exit_ok
    }
}

fn leading_dual(triple: &AttentionTriple) -> Result<&[f64], ClusteringError> {
    let spec = triple.v_spectrum();
    let dual = spec.dual_basis.as_ref().ok_or(ClusteringError::NoDualBasis)?;
    if spec.eigenvalues[0].im != 0.0 {
        return Err(ClusteringError::ComplexLeadingEigenvalue);
    }
    Ok(&dual[0])
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PatternFit {
    /// φ*_1 of each final token
    pub values: Vec<f64>,
    /// means of the value groups, ascending
    pub groups: Vec<f64>,
    /// `a` in `{−a, 0, c}`, when a negative group exists
    pub negative: Option<f64>,
    pub zero_group: bool,
    /// `c` in `{−a, 0, c}`, when a positive group exists
    pub positive: Option<f64>,
    pub fits: bool,
}

/// Group the values (consecutive sorted values within `tol` chain together) and test
/// whether the groups form at most one negative, one near-zero and one positive level.
pub fn fit_limit_pattern(values: Vec<f64>, tol: f64) -> PatternFit {
    let mut sorted = values.clone();
    sorted.sort_by(f64::total_cmp);
    let mut groups: Vec<Vec<f64>> = Vec::new();
    for x in sorted {
        match groups.last_mut() {
            Some(g) if x - g[g.len() - 1] <= tol => g.push(x),
            _ => groups.push(vec![x]),
        }
    }
    let means: Vec<f64> = groups.iter().map(|g| g.iter().sum::<f64>() / g.len() as f64).collect();
    let (mut neg, mut zero, mut pos) = (Vec::new(), 0, Vec::new());
    for &m in &means {
        if m.abs() <= tol {
            zero += 1;
        } else if m < 0.0 {
            neg.push(m);
        } else {
            pos.push(m);
        }
    }
    let fits = neg.len() <= 1 && pos.len() <= 1 && zero <= 1;
    PatternFit {
        values,
        groups: means,
        negative: neg.first().map(|m| -m),
        zero_group: zero == 1,
        positive: pos.first().copied(),
        fits,
    }
}

/// Fit of the final `φ*_1` projections of a trajectory to `{−a, 0, c}`.
pub fn check_phi1_limit_pattern(
    traj: &Trajectory,
    triple: &AttentionTriple,
    tol: f64,
) -> Result<PatternFit, ClusteringError> {
    let phi1 = leading_dual(triple)?;
    let values = traj.final_cloud().points().iter().map(|z| dot(phi1, z)).collect();
    Ok(fit_limit_pattern(values, tol))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GoodClustering {
    pub delta: f64,
    /// `min_i |φ*_1(c_i)|`
    pub c_min: f64,
    /// `min_{i≠j} |φ*_1(c_i) − φ*_1(c_j)|`, absent with fewer than two centers
    pub separation: Option<f64>,
    pub passes: bool,
}

pub fn check_good_clustering(
    centers: &[Vec<f64>],
    triple: &AttentionTriple,
    delta: f64,
) -> Result<GoodClustering, ClusteringError> {
    check_delta(delta)?;
    if centers.is_empty() {
        return Err(ClusteringError::EmptyCenters);
    }
    let phi1 = leading_dual(triple)?;
    let proj: Vec<f64> = centers.iter().map(|c| dot(phi1, c)).collect();
    let c_min = proj.iter().map(|p| p.abs()).fold(f64::INFINITY, f64::min);
    let mut separation: Option<f64> = None;
    for i in 0..proj.len() {
        for j in (i + 1)..proj.len() {
            let gap = (proj[i] - proj[j]).abs();
            separation = Some(separation.map_or(gap, |s| s.min(gap)));
        }
    }
    let passes = c_min > 0.0 && separation.is_none_or(|s| s > 0.0);
    Ok(GoodClustering { delta, c_min, separation, passes })
}
