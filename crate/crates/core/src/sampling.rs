//! Pseudo-label balancing: sample training examples uniformly over
//! clusters, or weight each example's loss by the inverse of its cluster
//! size. Both defend against a few large clusters dominating the
//! gradient.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// Index of cluster members, keyed by cluster id in ascending order.
fn cluster_members(assignments: &[usize]) -> BTreeMap<usize, Vec<usize>> {
    let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &a) in assignments.iter().enumerate() {
        members.entry(a).or_default().push(i);
    }
    members
}

/// Draws `n_draws` example indices with replacement: each draw picks a
/// non-empty cluster uniformly, then one of its members uniformly.
pub fn uniform_cluster_sampler(
    assignments: &[usize],
    n_draws: usize,
    rng: &mut SeededRng,
) -> Result<Vec<usize>> {
    if assignments.is_empty() {
        return Err(Error::InvalidArg("sampler on empty assignments".into()));
    }
    if n_draws == 0 {
        return Err(Error::InvalidArg("sampler wants n_draws >= 1".into()));
    }
    let members = cluster_members(assignments);
    let clusters: Vec<&Vec<usize>> = members.values().collect();
    let mut draws = Vec::with_capacity(n_draws);
    for _ in 0..n_draws {
        let cluster = clusters[rng.next_below(clusters.len() as u64) as usize];
        draws.push(cluster[rng.next_below(cluster.len() as u64) as usize]);
    }
    Ok(draws)
}

/// Per-example weights w_n = 1 / |cluster(n)|, unnormalized. The loss
/// divides by the batch weight sum, so a constant factor has no effect.
pub fn inverse_size_weights(assignments: &[usize]) -> Result<Vec<f32>> {
    if assignments.is_empty() {
        return Err(Error::InvalidArg("weights on empty assignments".into()));
    }
    let mut sizes: BTreeMap<usize, usize> = BTreeMap::new();
    for &a in assignments {
        *sizes.entry(a).or_insert(0) += 1;
    }
    Ok(assignments
        .iter()
        .map(|a| 1.0 / sizes[a] as f32)
        .collect())
}
