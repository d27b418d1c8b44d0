//! Multi-KRUM scoring and selection, followed by federated averaging over
//! the surviving updates.
//!
//! `Score(V_i)` sums the squared distances from `V_i` to its `n − k − 2`
//! nearest peers, and the `n − k` lowest scores are kept. Every tie is
//! broken toward the lower index so that selection is reproducible.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::{self, ParameterVector, ParamsError};

pub const GEOMEDIAN_TOL: f64 = 1e-9;
pub const GEOMEDIAN_MAX_ITER: usize = 1000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AggError {
    #[error("resiliency condition 2k+2 < n violated: k={k}, n={n} (2k+2={})", 2 * k + 2)]
    Resiliency { k: usize, n: usize },
    #[error("aggregation error: {0}")]
    Aggregation(String),
    #[error(transparent)]
    Params(#[from] ParamsError),
}

pub type Result<T> = std::result::Result<T, AggError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KrumScore {
    pub party_index: usize,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AggregationMethod {
    #[default]
    WeightedMean,
    GeometricMedian,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Selection {
    pub selected: Vec<usize>,
    pub discarded: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregationOutcome {
    pub selected: Vec<usize>,
    pub discarded: Vec<usize>,
    /// Empty when Multi-KRUM filtering is off.
    pub scores: Vec<KrumScore>,
    pub global: ParameterVector,
    /// Indices in the order the aggregation pass read them.
    pub access_order: Vec<usize>,
}

/// Fails unless `2k + 2 < n`.
pub fn check_resiliency(n: usize, k: usize) -> Result<()> {
    if 2 * k + 2 < n {
        Ok(())
    } else {
        Err(AggError::Resiliency { k, n })
    }
}

fn by_value_then_index(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

pub fn krum_scores(updates: &[ParameterVector], k: usize) -> Result<Vec<KrumScore>> {
    let n = updates.len();
    check_resiliency(n, k)?;
    let neighbours = n - k - 2;

    let mut dist = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = params::sq_distance(&updates[i], &updates[j])?;
            dist[i][j] = d;
            dist[j][i] = d;
        }
    }

    Ok((0..n)
        .map(|i| {
            let mut peers: Vec<(f64, usize)> = (0..n).filter(|&j| j != i).map(|j| (dist[i][j], j)).collect();
            peers.sort_by(by_value_then_index);
            let score = peers[..neighbours].iter().map(|(d, _)| d).sum();
            KrumScore { party_index: i, score }
        })
        .collect())
}

/// Keeps the `n − k` lowest scores; both outputs are in ascending index order.
pub fn multi_krum_select(scores: &[KrumScore], k: usize) -> Result<Selection> {
    let n = scores.len();
    if k >= n {
        return Err(AggError::Aggregation(format!("cannot discard {k} of {n} updates")));
    }
    let mut ranked: Vec<(f64, usize)> = scores.iter().map(|s| (s.score, s.party_index)).collect();
    ranked.sort_by(by_value_then_index);
    let mut selected: Vec<usize> = ranked[..n - k].iter().map(|(_, i)| *i).collect();
    let mut discarded: Vec<usize> = ranked[n - k..].iter().map(|(_, i)| *i).collect();
    selected.sort_unstable();
    discarded.sort_unstable();
    Ok(Selection { selected, discarded })
}

/// Applies the federated average function over `selected` only.
///
/// The pass reads updates in ascending index order no matter what they
/// contain; the order actually used is returned alongside the result.
pub fn aggregate(
    updates: &[ParameterVector],
    selected: &[usize],
    weights: &[f64],
    method: AggregationMethod,
) -> Result<(ParameterVector, Vec<usize>)> {
    if selected.is_empty() {
        return Err(AggError::Aggregation("empty selection".into()));
    }
    if weights.len() != updates.len() {
        return Err(AggError::Aggregation(format!(
            "{} weights for {} updates",
            weights.len(),
            updates.len()
        )));
    }
    let mut order = selected.to_vec();
    order.sort_unstable();
    order.dedup();
    if let Some(&bad) = order.iter().find(|&&i| i >= updates.len()) {
        return Err(AggError::Aggregation(format!("selected index {bad} out of range")));
    }
    let chosen: Vec<ParameterVector> = order.iter().map(|&i| updates[i].clone()).collect();
    let w: Vec<f64> = order.iter().map(|&i| weights[i]).collect();
    let global = match method {
        AggregationMethod::WeightedMean => params::weighted_mean(&chosen, &w)?,
        AggregationMethod::GeometricMedian => {
            params::weighted_geometric_median(&chosen, &w, GEOMEDIAN_TOL, GEOMEDIAN_MAX_ITER)?
        }
    };
    Ok((global, order))
}

/// Scores, selects and aggregates in one pass. With `krum_k = None` every
/// update is aggregated.
pub fn robust_aggregate(
    updates: &[ParameterVector],
    weights: &[f64],
    krum_k: Option<usize>,
    method: AggregationMethod,
) -> Result<AggregationOutcome> {
    let (scores, selection) = match krum_k {
        Some(k) => {
            let scores = krum_scores(updates, k)?;
            let sel = multi_krum_select(&scores, k)?;
            (scores, sel)
        }
        None => (
            Vec::new(),
            Selection { selected: (0..updates.len()).collect(), discarded: Vec::new() },
        ),
    };
    let (global, access_order) = aggregate(updates, &selection.selected, weights, method)?;
    Ok(AggregationOutcome {
        selected: selection.selected,
        discarded: selection.discarded,
        scores,
        global,
        access_order,
    })
}
