//! Gaussian-RBF kernel two-sample statistics.
//!
//! Provides the kernel itself, the median-heuristic bandwidth, biased (V) and
//! unbiased (U) squared-MMD estimators, and the globally normalised pairwise
//! MMD matrix over named dataset groups.
//!
//! Kernel sums are computed row by row (rows in parallel) and the row sums are
//! reduced with a fixed pairwise order, so every statistic is bit-identical
//! regardless of the rayon thread count.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::points::{pairwise_sum, squared_distance, Points, VectorSource};
use crate::rng::{self, subsample_indices};
use crate::{Error, Result};

/// `exp(-||x - y||^2 / (2 sigma^2))`.
pub fn rbf_kernel(x: &[f64], y: &[f64], sigma: f64) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            got: y.len(),
        });
    }
    check_sigma(sigma)?;
    Ok((-squared_distance(x, y) / (2.0 * sigma * sigma)).exp())
}

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma > 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "bandwidth must be positive and finite, got {sigma}"
        )))
    }
}

/// Median of the nonzero pairwise Euclidean distances over a seeded uniform
/// subsample of at most `cap` points.
pub fn median_bandwidth(points: &Points, cap: usize, seed: u64) -> Result<f64> {
    if cap < 2 {
        return Err(Error::invalid("bandwidth cap must be at least 2"));
    }
    let mut rng = rng::stream(seed, rng::STREAM_BANDWIDTH);
    let idx = subsample_indices(points.len(), cap, &mut rng);
    let sub = points.select(&idx);
    let mut dists: Vec<f64> = (0..sub.len())
        .into_par_iter()
        .flat_map_iter(|i| {
            let sub = &sub;
            (i + 1..sub.len()).map(move |j| squared_distance(sub.row(i), sub.row(j)).sqrt())
        })
        .filter(|&d| d > 0.0)
        .collect();
    if dists.is_empty() {
        return Err(Error::DegenerateBandwidth);
    }
    Ok(median_in_place(&mut dists))
}

/// Median with the midpoint convention for even lengths. Reorders `values`.
pub(crate) fn median_in_place(values: &mut [f64]) -> f64 {
    let n = values.len();
    let mid = n / 2;
    let (_, &mut upper, _) = values.select_nth_unstable_by(mid, f64::total_cmp);
    if n % 2 == 1 {
        upper
    } else {
        let lower = values[..mid]
            .iter()
            .copied()
            .max_by(f64::total_cmp)
            .expect("nonempty lower half");
        0.5 * (lower + upper)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    /// V-statistic: self-pairs included; always non-negative.
    #[default]
    #[serde(rename = "biased_v_statistic")]
    Biased,
    /// U-statistic: self-pairs excluded from the within-set terms.
    #[serde(rename = "unbiased_u_statistic")]
    Unbiased,
}

/// Sum of `k(a_i, b_j)` over all pairs, skipping `i == j` when `skip_diag`.
fn kernel_sum(a: &Points, b: &Points, gamma: f64, skip_diag: bool) -> f64 {
    let rows: Vec<f64> = (0..a.len())
        .into_par_iter()
        .map(|i| {
            let ai = a.row(i);
            let mut s = 0.0;
            for (j, bj) in b.rows().enumerate() {
                if skip_diag && i == j {
                    continue;
                }
                s += (-gamma * squared_distance(ai, bj)).exp();
            }
            s
        })
        .collect();
    pairwise_sum(&rows)
}

fn lexicographic(a: &Points, b: &Points) -> Ordering {
    a.len().cmp(&b.len()).then_with(|| {
        a.as_flat()
            .iter()
            .zip(b.as_flat())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    })
}

/// Within-set kernel mean for the chosen estimator.
fn within_mean(a: &Points, gamma: f64, kind: EstimatorKind) -> f64 {
    let n = a.len() as f64;
    match kind {
        EstimatorKind::Biased => kernel_sum(a, a, gamma, false) / (n * n),
        EstimatorKind::Unbiased => kernel_sum(a, a, gamma, true) / (n * (n - 1.0)),
    }
}

fn cross_mean(a: &Points, b: &Points, gamma: f64) -> f64 {
    kernel_sum(a, b, gamma, false) / (a.len() as f64 * b.len() as f64)
}

fn check_sizes(p: &Points, q: &Points, kind: EstimatorKind) -> Result<()> {
    let min = match kind {
        EstimatorKind::Biased => 1,
        EstimatorKind::Unbiased => 2,
    };
    if p.len() < min || q.len() < min {
        return Err(Error::invalid(format!(
            "{kind:?} MMD needs at least {min} points per set (got {} and {})",
            p.len(),
            q.len()
        )));
    }
    if p.dim() != q.dim() {
        return Err(Error::DimensionMismatch {
            expected: p.dim(),
            got: q.dim(),
        });
    }
    Ok(())
}

/// Squared MMD between two point sets.
///
/// The two arguments are put in a canonical order before summation, so the
/// result is exactly symmetric; identical inputs give exactly zero under the
/// biased estimator.
pub fn mmd_squared(p: &Points, q: &Points, sigma: f64, kind: EstimatorKind) -> Result<f64> {
    check_sigma(sigma)?;
    check_sizes(p, q, kind)?;
    let (a, b) = if lexicographic(p, q) == Ordering::Greater {
        (q, p)
    } else {
        (p, q)
    };
    let gamma = 1.0 / (2.0 * sigma * sigma);
    let waa = within_mean(a, gamma, kind);
    let wbb = within_mean(b, gamma, kind);
    let cab = cross_mean(a, b, gamma);
    Ok(waa + wbb - 2.0 * cab)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MmdConfig {
    pub estimator_kind: EstimatorKind,
    /// Per-group subsample size for the kernel sums.
    pub subsample_cap: usize,
    /// Pooled subsample size for the median-heuristic bandwidth.
    pub bandwidth_cap: usize,
    pub seed: u64,
}

impl Default for MmdConfig {
    fn default() -> Self {
        MmdConfig {
            estimator_kind: EstimatorKind::Biased,
            subsample_cap: 2000,
            bandwidth_cap: 1000,
            seed: 0,
        }
    }
}

/// One named group of rows drawn from a vector source.
pub struct DatasetGroup<'a> {
    pub label: String,
    pub source: &'a dyn VectorSource,
    pub rows: Vec<usize>,
}

impl<'a> DatasetGroup<'a> {
    pub fn all(label: impl Into<String>, source: &'a dyn VectorSource) -> Self {
        DatasetGroup {
            label: label.into(),
            rows: (0..source.len()).collect(),
            source,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MmdMatrix {
    pub labels: Vec<String>,
    pub sigma: f64,
    pub raw: Vec<Vec<f64>>,
    pub normalized: Vec<Vec<f64>>,
    pub config: MmdConfig,
}

/// Pairwise squared MMD between every pair of groups under one pooled
/// median-heuristic bandwidth, with a min-max normalised copy over the
/// off-diagonal entries.
pub fn pairwise_mmd_matrix(groups: &[DatasetGroup<'_>], config: &MmdConfig) -> Result<MmdMatrix> {
    if groups.len() < 2 {
        return Err(Error::invalid("pairwise MMD needs at least two groups"));
    }
    if config.subsample_cap < 2 || config.bandwidth_cap < 2 {
        return Err(Error::invalid(
            "subsample and bandwidth caps must be at least 2",
        ));
    }
    let dim = groups[0].source.dim();
    let mut subsets = Vec::with_capacity(groups.len());
    for (g, group) in groups.iter().enumerate() {
        if group.rows.is_empty() {
            return Err(Error::empty(format!("group '{}' has no rows", group.label)));
        }
        if group.source.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: group.source.dim(),
            });
        }
        let mut rng = rng::stream(config.seed, rng::STREAM_MMD_GROUP + g as u64);
        let picks = subsample_indices(group.rows.len(), config.subsample_cap, &mut rng);
        let rows: Vec<usize> = picks.iter().map(|&i| group.rows[i]).collect();
        subsets.push(group.source.gather(&rows));
    }
    let kind = config.estimator_kind;
    for (s, g) in subsets.iter().zip(groups) {
        if kind == EstimatorKind::Unbiased && s.len() < 2 {
            return Err(Error::invalid(format!(
                "group '{}' needs at least 2 rows for the unbiased estimator",
                g.label
            )));
        }
    }

    let pooled = Points::concat(&subsets.iter().collect::<Vec<_>>())?;
    let sigma = median_bandwidth(&pooled, config.bandwidth_cap, config.seed)?;
    let gamma = 1.0 / (2.0 * sigma * sigma);
    log::info!(
        "pairwise MMD over {} groups, sigma = {sigma:.6}",
        groups.len()
    );

    let within: Vec<f64> = subsets
        .iter()
        .map(|s| within_mean(s, gamma, kind))
        .collect();
    let n = groups.len();
    let mut raw = vec![vec![0.0; n]; n];
    for i in 0..n {
        if kind == EstimatorKind::Unbiased {
            raw[i][i] = within[i] + within[i] - 2.0 * cross_mean(&subsets[i], &subsets[i], gamma);
        }
        for j in i + 1..n {
            let (a, b) = if lexicographic(&subsets[i], &subsets[j]) == Ordering::Greater {
                (j, i)
            } else {
                (i, j)
            };
            let v = within[a] + within[b] - 2.0 * cross_mean(&subsets[a], &subsets[b], gamma);
            raw[i][j] = v;
            raw[j][i] = v;
        }
    }

    let off_diag = || (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)));
    let lo = off_diag()
        .map(|(i, j)| raw[i][j])
        .fold(f64::INFINITY, f64::min);
    let hi = off_diag()
        .map(|(i, j)| raw[i][j])
        .fold(f64::NEG_INFINITY, f64::max);
    let mut normalized = vec![vec![0.0; n]; n];
    if hi > lo {
        for (i, j) in off_diag() {
            normalized[i][j] = (raw[i][j] - lo) / (hi - lo);
        }
    }

    Ok(MmdMatrix {
        labels: groups.iter().map(|g| g.label.clone()).collect(),
        sigma,
        raw,
        normalized,
        config: *config,
    })
}
