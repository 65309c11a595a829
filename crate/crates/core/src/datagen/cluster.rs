//! Density-based clustering and the adjusted Rand index.

use std::collections::{BTreeSet, HashMap};

use crate::data::ChunkId;
use crate::error::{invalid, Result};

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// DBSCAN with Euclidean distance. Point `i` is chunk `i + 1`.
///
/// A point's neighbourhood includes the point itself. Core points with at least
/// `min_pts` neighbours within `eps` form clusters by connectivity; a border point joins
/// the cluster of its lowest-numbered core neighbour. Noise is dropped and clusters are
/// ordered by their smallest chunk id.
pub fn cluster_chunks(embeddings: &[Vec<f64>], eps: f64, min_pts: usize) -> Result<Vec<BTreeSet<ChunkId>>> {
    if embeddings.is_empty() {
        return invalid("nothing to cluster");
    }
    if !(eps > 0.0) || min_pts == 0 {
        return invalid("eps must be positive and min_pts at least 1");
    }
    let dim = embeddings[0].len();
    if embeddings.iter().any(|e| e.len() != dim) {
        return invalid("embedding dimensions differ");
    }
    let n = embeddings.len();
    let eps2 = eps * eps;
    let neighbours: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| dist2(&embeddings[i], &embeddings[j]) <= eps2).collect())
        .collect();
    let core: Vec<bool> = neighbours.iter().map(|nb| nb.len() >= min_pts).collect();

    let mut label: Vec<Option<usize>> = vec![None; n];
    let mut n_clusters = 0;
    for start in 0..n {
        if !core[start] || label[start].is_some() {
            continue;
        }
        let mut stack = vec![start];
        label[start] = Some(n_clusters);
        while let Some(i) = stack.pop() {
            for &j in &neighbours[i] {
                if core[j] && label[j].is_none() {
                    label[j] = Some(n_clusters);
                    stack.push(j);
                }
            }
        }
        n_clusters += 1;
    }
    for i in 0..n {
        if !core[i] {
            label[i] = neighbours[i].iter().find(|&&j| core[j]).and_then(|&j| label[j]);
        }
    }
    let mut clusters = vec![BTreeSet::new(); n_clusters];
    for (i, l) in label.iter().enumerate() {
        if let Some(c) = l {
            clusters[*c].insert(ChunkId::from_position(i));
        }
    }
    clusters.sort_by_key(|c| *c.first().expect("clusters contain their core point"));
    Ok(clusters)
}

/// Flat labels for `n` points; points outside every cluster get their own singleton label.
pub fn labels_from_clusters(clusters: &[BTreeSet<ChunkId>], n: usize) -> Vec<usize> {
    let mut labels: Vec<usize> = (clusters.len()..clusters.len() + n).collect();
    for (c, members) in clusters.iter().enumerate() {
        for id in members {
            labels[id.position()] = c;
        }
    }
    labels
}

fn pairs(x: usize) -> f64 {
    (x * x.saturating_sub(1)) as f64 / 2.0
}

/// Adjusted Rand index between two labelings of the same points.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return invalid("labelings must be non-empty and of equal length");
    }
    let mut table: HashMap<(usize, usize), usize> = HashMap::new();
    let mut rows: HashMap<usize, usize> = HashMap::new();
    let mut cols: HashMap<usize, usize> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let index: f64 = table.values().map(|&c| pairs(c)).sum();
    let sum_a: f64 = rows.values().map(|&c| pairs(c)).sum();
    let sum_b: f64 = cols.values().map(|&c| pairs(c)).sum();
    let expected = sum_a * sum_b / pairs(a.len()).max(1.0);
    let max = (sum_a + sum_b) / 2.0;
    if max == expected {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand_distr::{Distribution, Normal};

    pub(crate) fn blobs(seed: u64, per_blob: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut r = rng::seeded(seed);
        let noise = Normal::new(0.0, 0.1).unwrap();
        let mut pts = Vec::new();
        let mut truth = Vec::new();
        for (label, cx) in [0.0, 10.0].into_iter().enumerate() {
            for _ in 0..per_blob {
                pts.push(vec![cx + noise.sample(&mut r), noise.sample(&mut r)]);
                truth.push(label);
            }
        }
        (pts, truth)
    }

    #[test]
    fn recovers_planted_blobs() {
        for seed in 0..20 {
            let (pts, truth) = blobs(seed, 25);
            let clusters = cluster_chunks(&pts, 1.0, 3).unwrap();
            assert_eq!(clusters.len(), 2);
            let ari = adjusted_rand_index(&labels_from_clusters(&clusters, pts.len()), &truth).unwrap();
            assert!((ari - 1.0).abs() < 1e-12, "seed {seed}: {ari}");
        }
    }

    #[test]
    fn identical_points_form_one_cluster() {
        let pts = vec![vec![0.3, 0.4]; 5];
        let c = cluster_chunks(&pts, 0.1, 3).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].len(), 5);
    }

    #[test]
    fn isolated_points_are_noise() {
        let pts: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, 0.0]).collect();
        assert!(cluster_chunks(&pts, 0.5, 2).unwrap().is_empty());
    }

    #[test]
    fn border_point_joins_lowest_core() {
        // chunk 5 reaches a core point of each group but is not core itself
        let xs = [0.0, 0.1, 0.2, 0.3, 0.7, 1.1, 1.2, 1.3, 1.4];
        let pts: Vec<Vec<f64>> = xs.iter().map(|&x| vec![x]).collect();
        let c = cluster_chunks(&pts, 0.41, 4).unwrap();
        assert_eq!(c.len(), 2);
        assert!(c[0].contains(&ChunkId::from_position(4)));
        assert!(!c[1].contains(&ChunkId::from_position(4)));
    }

    #[test]
    fn input_errors() {
        assert!(cluster_chunks(&[], 1.0, 1).is_err());
        assert!(cluster_chunks(&[vec![1.0], vec![1.0, 2.0]], 1.0, 1).is_err());
        assert!(cluster_chunks(&[vec![1.0]], 0.0, 1).is_err());
    }

    #[test]
    fn ari_values() {
        assert_eq!(adjusted_rand_index(&[0, 0, 1, 1], &[5, 5, 7, 7]).unwrap(), 1.0);
        // sklearn.metrics.adjusted_rand_score([0,0,1,1],[0,1,0,1]) == -0.5
        assert!((adjusted_rand_index(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap() + 0.5).abs() < 1e-12);
        // sklearn.metrics.adjusted_rand_score([0,0,0,1,1,1],[0,0,1,1,2,2]) == 0.24242424...
        let v = adjusted_rand_index(&[0, 0, 0, 1, 1, 1], &[0, 0, 1, 1, 2, 2]).unwrap();
        assert!((v - 0.242_424_242_424_242_4).abs() < 1e-12, "{v}");
        assert!(adjusted_rand_index(&[0], &[0, 1]).is_err());
    }
}
