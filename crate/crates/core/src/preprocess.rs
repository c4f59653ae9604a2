//! Local outlier factor scoring and quantile-based outlier removal.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Dataset;

/// Lower bound on the mean reachability distance, so duplicates do not
/// produce an infinite density.
const MIN_REACH: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LofConfig {
    pub neighbors_k: usize,
    /// Scores above this empirical quantile (nearest rank) are removed.
    pub quantile: f64,
}

impl Default for LofConfig {
    fn default() -> Self {
        LofConfig {
            neighbors_k: 10,
            quantile: 0.95,
        }
    }
}

impl LofConfig {
    fn validate(&self, n: usize) -> Result<()> {
        if self.neighbors_k == 0 {
            return Err(Error::InvalidConfig("neighbors_k must be >= 1".into()));
        }
        if !(self.quantile > 0.0 && self.quantile < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "quantile must be in (0, 1), got {}",
                self.quantile
            )));
        }
        if n <= self.neighbors_k {
            return Err(Error::InvalidInput(format!(
                "LOF with {} neighbors needs more than {} points, got {n}",
                self.neighbors_k, self.neighbors_k
            )));
        }
        Ok(())
    }
}

/// Local outlier factor of every pixel, Euclidean metric, exactly `k`
/// neighbors per point (distance ties broken by lower index).
///
/// Points whose k-distance is zero (at least `k` exact duplicates) score 1.
pub fn lof_scores(d: &Dataset, cfg: &LofConfig) -> Result<Vec<f64>> {
    let n = d.len();
    cfg.validate(n)?;
    d.ensure_pixels_valid()?;
    let k = cfg.neighbors_k;

    // k nearest neighbors of each point, ascending (distance, index).
    let neighbors: Vec<Vec<(usize, f64)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let xi = d.pixels[i].values();
            let mut dist: Vec<(usize, f64)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| {
                    let sq: f64 = xi
                        .iter()
                        .zip(d.pixels[j].values())
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    (j, sq.sqrt())
                })
                .collect();
            dist.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            dist.truncate(k);
            dist
        })
        .collect();

    let k_distance: Vec<f64> = neighbors.iter().map(|nb| nb[k - 1].1).collect();
    let lrd: Vec<f64> = neighbors
        .iter()
        .map(|nb| {
            let mean_reach = nb
                .iter()
                .map(|&(o, dist)| k_distance[o].max(dist))
                .sum::<f64>()
                / k as f64;
            1.0 / mean_reach.max(MIN_REACH)
        })
        .collect();
    Ok((0..n)
        .map(|p| {
            if k_distance[p] == 0.0 {
                1.0
            } else {
                neighbors[p].iter().map(|&(o, _)| lrd[o]).sum::<f64>() / (k as f64 * lrd[p])
            }
        })
        .collect())
}

/// Nearest-rank empirical quantile: the `ceil(q * n)`-th smallest value.
pub fn nearest_rank_quantile(values: &[f64], q: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    // Guard against 0.95 * 100 = 95.00000000000001 style rounding.
    let rank = ((q * n as f64) - 1e-9).ceil().clamp(1.0, n as f64) as usize;
    sorted[rank - 1]
}

#[derive(Debug, Clone, PartialEq)]
pub struct LofFiltered {
    pub cleaned: Dataset,
    /// Indices of the kept pixels in the input dataset, ascending.
    pub kept: Vec<usize>,
    /// Indices of the removed pixels in the input dataset, ascending.
    pub removed: Vec<usize>,
    pub scores: Vec<f64>,
    pub threshold: f64,
}

/// Removes pixels whose LOF score exceeds the configured quantile of all scores.
pub fn lof_filter(d: &Dataset, cfg: &LofConfig) -> Result<LofFiltered> {
    let scores = lof_scores(d, cfg)?;
    let threshold = nearest_rank_quantile(&scores, cfg.quantile);
    let (removed, kept): (Vec<usize>, Vec<usize>) =
        (0..d.len()).partition(|&i| scores[i] > threshold);
    if !removed.is_empty() {
        log::info!(
            "LOF removed {} of {} pixels (threshold {threshold:.6})",
            removed.len(),
            d.len()
        );
    }
    let mut cleaned = d.select(&kept);
    cleaned.geometry = None;
    Ok(LofFiltered {
        cleaned,
        kept,
        removed,
        scores,
        threshold,
    })
}
