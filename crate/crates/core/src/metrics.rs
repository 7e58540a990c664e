//! Clustering diagnostics: normalized mutual information, cluster-size
//! histograms, and the pure-cluster fraction.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Normalized mutual information between two assignments of the same
/// items: I(A;B) / sqrt(H(A) * H(B)), with plug-in entropy estimates from
/// the joint contingency table, natural log.
///
/// Degenerate convention: when either entropy is zero, returns 1 if the two
/// assignments are identical as set partitions (equal up to relabeling),
/// else 0.
pub fn nmi(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!(
            "nmi: {} vs {} assignments",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::InvalidArg("nmi on empty assignments".into()));
    }
    let n = a.len() as f64;

    let mut count_a: BTreeMap<usize, f64> = BTreeMap::new();
    let mut count_b: BTreeMap<usize, f64> = BTreeMap::new();
    let mut joint: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for (&ai, &bi) in a.iter().zip(b) {
        *count_a.entry(ai).or_insert(0.0) += 1.0;
        *count_b.entry(bi).or_insert(0.0) += 1.0;
        *joint.entry((ai, bi)).or_insert(0.0) += 1.0;
    }

    let entropy = |counts: &BTreeMap<usize, f64>| -> f64 {
        counts
            .values()
            .map(|&c| {
                let p = c / n;
                -p * p.ln()
            })
            .sum()
    };
    let h_a = entropy(&count_a);
    let h_b = entropy(&count_b);

    if h_a <= 0.0 || h_b <= 0.0 {
        return Ok(if same_partition(a, b) { 1.0 } else { 0.0 });
    }
    // Identical partitions score exactly 1; the plug-in ratio below only
    // reaches 1 - O(eps) through rounding.
    if same_partition(a, b) {
        return Ok(1.0);
    }

    let mut mi = 0.0;
    for (&(ai, bi), &c) in &joint {
        let p_joint = c / n;
        let p_a = count_a[&ai] / n;
        let p_b = count_b[&bi] / n;
        mi += p_joint * (p_joint / (p_a * p_b)).ln();
    }
    // Plug-in MI is non-negative up to rounding; the ratio lives in [0,1].
    Ok((mi / (h_a * h_b).sqrt()).clamp(0.0, 1.0))
}

/// True when the two assignments induce the same partition of the items
/// (cluster ids may differ).
fn same_partition(a: &[usize], b: &[usize]) -> bool {
    canonical_labels(a) == canonical_labels(b)
}

/// Relabels clusters by first occurrence: the first item's cluster becomes
/// 0, the next unseen cluster 1, and so on.
pub fn canonical_labels(a: &[usize]) -> Vec<usize> {
    let mut map: BTreeMap<usize, usize> = BTreeMap::new();
    let mut out = Vec::with_capacity(a.len());
    for &x in a {
        let next = map.len();
        out.push(*map.entry(x).or_insert(next));
    }
    out
}

/// Cluster sizes in non-increasing order. When `k` is given, clusters
/// 0..k that received no items are reported as zeros; otherwise only
/// observed cluster ids contribute.
pub fn cluster_histogram(assignments: &[usize], k: Option<usize>) -> Vec<usize> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    if let Some(k) = k {
        for c in 0..k {
            counts.insert(c, 0);
        }
    }
    for &a in assignments {
        *counts.entry(a).or_insert(0) += 1;
    }
    let mut sizes: Vec<usize> = counts.into_values().collect();
    sizes.sort_unstable_by(|x, y| y.cmp(x));
    sizes
}

/// Fraction of items whose cluster's majority-label share strictly exceeds
/// `threshold`.
pub fn pure_cluster_fraction(
    assignments: &[usize],
    labels: &[usize],
    threshold: f64,
) -> Result<f64> {
    if assignments.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "purity: {} assignments vs {} labels",
            assignments.len(),
            labels.len()
        )));
    }
    if assignments.is_empty() {
        return Err(Error::InvalidArg("purity on empty assignments".into()));
    }
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::InvalidArg(format!(
            "purity threshold {threshold} out of (0,1]"
        )));
    }
    let mut per_cluster: BTreeMap<usize, BTreeMap<usize, usize>> = BTreeMap::new();
    for (&a, &l) in assignments.iter().zip(labels) {
        *per_cluster.entry(a).or_default().entry(l).or_insert(0) += 1;
    }
    let mut pure_items = 0usize;
    for label_counts in per_cluster.values() {
        let size: usize = label_counts.values().sum();
        let majority = *label_counts.values().max().unwrap();
        if majority as f64 / size as f64 > threshold {
            pure_items += size;
        }
    }
    Ok(pure_items as f64 / assignments.len() as f64)
}
