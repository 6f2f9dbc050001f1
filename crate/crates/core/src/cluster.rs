//! Mean shift clustering of the slot activation vectors of threshold-passing
//! ngrams, one filter at a time.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifact::Validate;
use crate::corpus::{EmbeddingTable, TokenId, Vocabulary};
use crate::error::{Error, Result};
use crate::model::ConvFilter;
use crate::slots::{score_all, sort_desc, to_scored, NgramIndex, ScoredNgram};
use crate::threshold::FilterProfile;

pub const BANDWIDTH_SAMPLE: usize = 1000;
pub const MAX_POINTS: usize = 10_000;
pub const DEFAULT_TOL: f64 = 1e-4;
pub const DEFAULT_MAX_ITER: usize = 300;
const BANDWIDTH_FLOOR: f64 = 1e-6;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn lex_cmp(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Half the median pairwise distance over an evenly strided sample of at
/// most 1000 points.
pub fn estimate_bandwidth(points: &[Vec<f64>]) -> f64 {
    let n = points.len();
    let sample: Vec<&[f64]> = if n > BANDWIDTH_SAMPLE {
        (0..BANDWIDTH_SAMPLE).map(|i| points[i * n / BANDWIDTH_SAMPLE].as_slice()).collect()
    } else {
        points.iter().map(Vec::as_slice).collect()
    };
    let mut dists: Vec<f64> = (0..sample.len())
        .into_par_iter()
        .flat_map_iter(|i| {
            let s = &sample;
            (i + 1..s.len()).map(move |j| sq_dist(s[i], s[j]).sqrt())
        })
        .collect();
    if dists.is_empty() {
        return BANDWIDTH_FLOOR;
    }
    dists.sort_by(f64::total_cmp);
    let k = dists.len();
    let median = if k % 2 == 1 { dists[k / 2] } else { 0.5 * (dists[k / 2 - 1] + dists[k / 2]) };
    (0.5 * median).max(BANDWIDTH_FLOOR)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterResult {
    pub point_count: usize,
    pub bandwidth: f64,
    /// Cluster index for every input point, in input order.
    pub assignments: Vec<usize>,
    /// Mean of each cluster's members.
    pub centroids: Vec<Vec<f64>>,
    /// The density mode each cluster was seeded from.
    pub modes: Vec<Vec<f64>>,
    pub sizes: Vec<usize>,
    pub size_fractions: Vec<f64>,
}

impl ClusterResult {
    pub fn cluster_count(&self) -> usize {
        self.centroids.len()
    }
}

fn seek_mode(start: &[f64], points: &[Vec<f64>], inv_h2: f64, tol: f64, max_iter: usize) -> Vec<f64> {
    let dim = start.len();
    let mut x = start.to_vec();
    let mut next = vec![0.0; dim];
    for _ in 0..max_iter {
        next.iter_mut().for_each(|v| *v = 0.0);
        let mut total = 0.0;
        for p in points {
            let w = (-sq_dist(&x, p) * inv_h2).exp();
            total += w;
            for (n, v) in next.iter_mut().zip(p) {
                *n += w * v;
            }
        }
        if total <= 0.0 {
            // isolated far beyond the kernel's numeric range
            break;
        }
        next.iter_mut().for_each(|v| *v /= total);
        let shift = sq_dist(&x, &next).sqrt();
        std::mem::swap(&mut x, &mut next);
        if shift < tol {
            break;
        }
    }
    x
}

/// Gaussian-kernel mean shift (`exp(-d²/h²)`) started from every point.
/// Modes closer than `h/2` to a denser mode are merged into it, each point
/// joins its nearest surviving mode, and clusters are ordered by size.
pub fn mean_shift(points: &[Vec<f64>], bandwidth: f64, tol: f64, max_iter: usize) -> Result<ClusterResult> {
    if points.is_empty() {
        return Err(Error::Empty("mean shift needs at least one point"));
    }
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return Err(Error::InvalidArgument(format!("bandwidth must be positive, got {bandwidth}")));
    }
    let dim = points[0].len();
    if let Some(p) = points.iter().find(|p| p.len() != dim) {
        return Err(Error::Dimension { expected: dim, found: p.len() });
    }
    let inv_h2 = 1.0 / (bandwidth * bandwidth);
    let modes: Vec<Vec<f64>> = points
        .par_iter()
        .map(|p| seek_mode(p, points, inv_h2, tol, max_iter))
        .collect();

    // rank modes by how many points lie within one bandwidth of them
    let h2 = bandwidth * bandwidth;
    let mut ranked: Vec<(usize, &Vec<f64>)> = modes
        .par_iter()
        .map(|m| (points.iter().filter(|p| sq_dist(m, p) <= h2).count(), m))
        .collect();
    ranked.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| lex_cmp(a.1, b.1)));
    let merge2 = 0.25 * h2;
    let mut kept: Vec<Vec<f64>> = Vec::new();
    for (_, m) in ranked {
        if kept.iter().all(|k| sq_dist(k, m) > merge2) {
            kept.push(m.clone());
        }
    }

    let nearest: Vec<usize> = points
        .par_iter()
        .map(|p| {
            let mut best = (0, f64::INFINITY);
            for (i, k) in kept.iter().enumerate() {
                let d = sq_dist(p, k);
                if d < best.1 {
                    best = (i, d);
                }
            }
            best.0
        })
        .collect();

    let mut sums = vec![vec![0.0; dim]; kept.len()];
    let mut sizes = vec![0usize; kept.len()];
    for (p, &c) in points.iter().zip(&nearest) {
        sizes[c] += 1;
        for (s, v) in sums[c].iter_mut().zip(p) {
            *s += v;
        }
    }
    let mut clusters: Vec<(usize, Vec<f64>, Vec<f64>, usize)> = kept
        .into_iter()
        .enumerate()
        .filter(|(i, _)| sizes[*i] > 0)
        .map(|(i, mode)| {
            let centroid = sums[i].iter().map(|s| s / sizes[i] as f64).collect();
            (i, centroid, mode, sizes[i])
        })
        .collect();
    clusters.sort_by(|a, b| b.3.cmp(&a.3).then_with(|| lex_cmp(&a.1, &b.1)));
    let mut relabel = vec![usize::MAX; sizes.len()];
    for (new, c) in clusters.iter().enumerate() {
        relabel[c.0] = new;
    }
    let n = points.len() as f64;
    Ok(ClusterResult {
        point_count: points.len(),
        bandwidth,
        assignments: nearest.iter().map(|&c| relabel[c]).collect(),
        size_fractions: clusters.iter().map(|c| c.3 as f64 / n).collect(),
        sizes: clusters.iter().map(|c| c.3).collect(),
        modes: clusters.iter().map(|c| c.2.clone()).collect(),
        centroids: clusters.into_iter().map(|c| c.1).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NgramCluster {
    pub centroid: Vec<f64>,
    pub size: usize,
    pub size_fraction: f64,
    /// Highest-activation members.
    pub top_ngrams: Vec<ScoredNgram>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterClusters {
    pub filter_id: usize,
    #[serde(with = "crate::artifact::extended_f64")]
    pub threshold: f64,
    /// Clustered ngrams, best score first; `result.assignments` runs in
    /// the same order.
    pub points: Vec<Vec<TokenId>>,
    /// Absent when no corpus ngram reaches the threshold.
    pub result: Option<ClusterResult>,
    pub clusters: Vec<NgramCluster>,
}

impl FilterClusters {
    pub fn is_empty(&self) -> bool {
        self.result.is_none()
    }
}

/// Clusters the distinct corpus ngrams scoring at least the filter's
/// threshold (at most [`MAX_POINTS`], best first) by slot activation vector.
pub fn cluster_filter_ngrams(
    filter: &ConvFilter,
    embeddings: &EmbeddingTable,
    index: &NgramIndex,
    profile: &FilterProfile,
    vocab: &Vocabulary,
    top_k: usize,
) -> Result<FilterClusters> {
    if !profile.threshold.is_finite() {
        return Err(Error::InvalidArgument(format!("filter {} has no finite threshold", filter.filter_id)));
    }
    let t = profile.threshold;
    let mut passing: Vec<_> = score_all(filter, embeddings, index)
        .into_iter()
        .filter(|(s, _)| *s >= t)
        .collect();
    sort_desc(&mut passing);
    passing.truncate(MAX_POINTS);
    let mut out = FilterClusters {
        filter_id: filter.filter_id,
        threshold: t,
        points: passing.iter().map(|(_, s)| s.token_ids.clone()).collect(),
        result: None,
        clusters: Vec::new(),
    };
    if passing.is_empty() {
        return Ok(out);
    }
    let vectors: Vec<Vec<f64>> = passing.iter().map(|(_, s)| s.activations.clone()).collect();
    let result = mean_shift(&vectors, estimate_bandwidth(&vectors), DEFAULT_TOL, DEFAULT_MAX_ITER)?;
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); result.cluster_count()];
    for (i, &c) in result.assignments.iter().enumerate() {
        members[c].push(i);
    }
    out.clusters = members
        .iter()
        .enumerate()
        .map(|(c, idx)| NgramCluster {
            centroid: result.centroids[c].clone(),
            size: result.sizes[c],
            size_fraction: result.size_fractions[c],
            // members are already in descending score order
            top_ngrams: idx
                .iter()
                .take(top_k)
                .map(|&i| to_scored(vocab, passing[i].0, passing[i].1.clone()))
                .collect(),
        })
        .collect();
    out.result = Some(result);
    Ok(out)
}

impl Validate for ClusterResult {
    fn validate(&self) -> Result<()> {
        let k = self.centroids.len();
        if self.assignments.len() != self.point_count
            || self.sizes.len() != k
            || self.size_fractions.len() != k
            || self.modes.len() != k
        {
            return Err(Error::Schema("cluster result lengths disagree".into()));
        }
        if self.assignments.iter().any(|&a| a >= k) {
            return Err(Error::Schema("assignment references a missing cluster".into()));
        }
        if self.sizes.iter().sum::<usize>() != self.point_count {
            return Err(Error::Schema("cluster sizes do not sum to the point count".into()));
        }
        if (self.size_fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Schema("size fractions do not sum to 1".into()));
        }
        Ok(())
    }
}

impl Validate for FilterClusters {
    fn validate(&self) -> Result<()> {
        match &self.result {
            None if self.points.is_empty() && self.clusters.is_empty() => Ok(()),
            None => Err(Error::Schema(format!("filter {}: clusters without a result", self.filter_id))),
            Some(r) => {
                r.validate()?;
                if r.point_count != self.points.len() || r.cluster_count() != self.clusters.len() {
                    return Err(Error::Schema(format!("filter {}: cluster summary mismatch", self.filter_id)));
                }
                for c in &self.clusters {
                    c.top_ngrams.validate()?;
                }
                Ok(())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SeededRng;
    use crate::slots::fixtures::hand_filter;
    use proptest::prelude::*;
    use rand_distr::{Distribution, Normal};

    fn blobs(seed: u64, centers: &[Vec<f64>], sigma: f64, per: usize) -> Vec<Vec<f64>> {
        let mut rng = SeededRng::new(seed);
        let normal = Normal::new(0.0, sigma).unwrap();
        let mut pts = Vec::new();
        for c in centers {
            for _ in 0..per {
                pts.push(c.iter().map(|v| v + normal.sample(rng.rng_mut())).collect());
            }
        }
        pts
    }

    #[test]
    fn bandwidth_examples() {
        assert_eq!(estimate_bandwidth(&[vec![1.0, 1.0], vec![1.0, 1.0]]), BANDWIDTH_FLOOR);
        assert_eq!(estimate_bandwidth(&[vec![0.0], vec![2.0]]), 1.0);
        assert_eq!(estimate_bandwidth(&[vec![3.0]]), BANDWIDTH_FLOOR);
    }

    #[test]
    fn bandwidth_matches_pairwise_median_oracle() {
        let pts = blobs(4, &[vec![0.0, 0.0, 0.0]], 1.0, 100);
        let mut d = Vec::new();
        for i in 0..pts.len() {
            for j in 0..i {
                let s: f64 = (0..3).map(|k| (pts[i][k] - pts[j][k]).powi(2)).sum();
                d.push(s.sqrt());
            }
        }
        d.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = (d[d.len() / 2 - 1] + d[d.len() / 2]) / 2.0;
        assert!((estimate_bandwidth(&pts) - median / 2.0).abs() < 1e-12);
    }

    #[test]
    fn bandwidth_samples_large_inputs() {
        let pts: Vec<Vec<f64>> = (0..3000).map(|i| vec![i as f64]).collect();
        let sample: Vec<Vec<f64>> = (0..1000).map(|i| pts[i * 3].clone()).collect();
        assert_eq!(estimate_bandwidth(&pts), estimate_bandwidth(&sample));
    }

    #[test]
    fn trivial_inputs() {
        assert!(mean_shift(&[], 1.0, DEFAULT_TOL, DEFAULT_MAX_ITER).is_err());
        assert!(mean_shift(&[vec![1.0]], 0.0, DEFAULT_TOL, DEFAULT_MAX_ITER).is_err());
        let one = mean_shift(&[vec![0.3, -2.0]], 1.0, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        assert_eq!(one.centroids, vec![vec![0.3, -2.0]]);
        let same = vec![vec![1.5, 2.5]; 7];
        let r = mean_shift(&same, estimate_bandwidth(&same), DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        assert_eq!(r.sizes, vec![7]);
        r.validate().unwrap();
    }

    #[test]
    fn two_blobs_in_2d() {
        for seed in 0..5 {
            let centers = vec![vec![0.0, 0.0], vec![5.0, 0.0]];
            let pts = blobs(seed, &centers, 0.1, 150);
            let r = mean_shift(&pts, estimate_bandwidth(&pts), DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
            assert_eq!(r.cluster_count(), 2, "seed {seed}");
            for c in &centers {
                let near = r.centroids.iter().any(|m| sq_dist(m, c).sqrt() < 0.1);
                assert!(near, "seed {seed}: no centroid near {c:?}: {:?}", r.centroids);
            }
            r.validate().unwrap();
        }
    }

    #[test]
    fn unequal_blobs_order_by_size() {
        let mut pts = blobs(9, &[vec![0.0, 0.0]], 0.1, 40);
        pts.extend(blobs(10, &[vec![0.0, 4.0]], 0.1, 160));
        let r = mean_shift(&pts, estimate_bandwidth(&pts), DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        assert_eq!(r.sizes, vec![160, 40]);
        assert!((r.size_fractions[0] - 0.8).abs() < 1e-12);
        assert!(r.centroids[0][1] > 3.5);
    }

    #[test]
    fn engineered_filter_recovers_both_patterns() {
        // low-high pairs and high-low pairs
        let mut words = Vec::new();
        for i in 0..6 {
            let a = 0.2 + 0.05 * i as f64;
            words.push((format!("lo{i}"), vec![a, 0.0]));
            words.push((format!("hi{i}"), vec![0.0, a]));
            words.push((format!("x{i}"), vec![3.0 + 0.05 * i as f64, 0.0]));
            words.push((format!("y{i}"), vec![0.0, 3.0 + 0.05 * i as f64]));
        }
        let table: Vec<(&str, Vec<f64>)> = words.iter().map(|(w, a)| (w.as_str(), a.clone())).collect();
        let (vocab, emb, f) = hand_filter(&table, 0.0);
        let mut docs = Vec::new();
        for i in 0..6 {
            for j in 0..6 {
                docs.push(vocab.encode(&format!("lo{i} y{j}")));
                docs.push(vocab.encode(&format!("x{i} hi{j}")));
            }
        }
        let index = NgramIndex::from_sequences(&docs, &[2]);
        let profile = FilterProfile {
            filter_id: 0,
            class_identity: 0,
            threshold: 2.5,
            achieved_purity: Some(1.0),
            coverage: 1.0,
        };
        let fc = cluster_filter_ngrams(&f, &emb, &index, &profile, &vocab, 3).unwrap();
        fc.validate().unwrap();
        assert_eq!(fc.points.len(), 72);
        assert_eq!(fc.clusters.len(), 2);
        let mut patterns: Vec<bool> = fc.clusters.iter().map(|c| c.centroid[0] < c.centroid[1]).collect();
        patterns.sort();
        assert_eq!(patterns, vec![false, true]);
        for c in &fc.clusters {
            assert_eq!(c.size, 36);
            let low_high = c.centroid[0] < c.centroid[1];
            for n in &c.top_ngrams {
                assert_eq!(n.slots.activations[0] < n.slots.activations[1], low_high);
            }
        }
    }

    #[test]
    fn nothing_passing_gives_empty_marker() {
        let (vocab, emb, f) = hand_filter(&[("a", vec![1.0, 1.0]), ("b", vec![0.5, 0.5])], 0.0);
        let index = NgramIndex::from_sequences(&[vocab.encode("a a b")], &[2]);
        let mut profile = FilterProfile {
            filter_id: 0,
            class_identity: 0,
            threshold: 100.0,
            achieved_purity: Some(1.0),
            coverage: 0.1,
        };
        let fc = cluster_filter_ngrams(&f, &emb, &index, &profile, &vocab, 3).unwrap();
        assert!(fc.is_empty());
        fc.validate().unwrap();
        profile.threshold = 1.9;
        let single = cluster_filter_ngrams(&f, &emb, &index, &profile, &vocab, 3).unwrap();
        assert_eq!(single.points.len(), 1);
        assert_eq!(single.clusters[0].size, 1);
        profile.threshold = f64::INFINITY;
        assert!(cluster_filter_ngrams(&f, &emb, &index, &profile, &vocab, 3).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn partition_and_bounding_box(seed in 0u64..1000, n in 1usize..60) {
            let mut rng = SeededRng::new(seed);
            let pts: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..3).map(|_| rng.uniform(-2.0, 2.0) + if rng.chance(0.5) { 4.0 } else { 0.0 }).collect())
                .collect();
            let r = mean_shift(&pts, estimate_bandwidth(&pts), DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
            prop_assert!(r.validate().is_ok());
            for (c, centroid) in r.centroids.iter().enumerate() {
                for k in 0..3 {
                    let coords: Vec<f64> = pts.iter().zip(&r.assignments).filter(|(_, &a)| a == c).map(|(p, _)| p[k]).collect();
                    let lo = coords.iter().cloned().fold(f64::INFINITY, f64::min);
                    let hi = coords.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    prop_assert!(centroid[k] >= lo - 1e-9 && centroid[k] <= hi + 1e-9);
                }
            }
        }

        #[test]
        fn order_invariant(seed in 0u64..1000) {
            let mut pts = blobs(seed, &[vec![0.0, 0.0], vec![3.0, 3.0], vec![0.0, 6.0]], 0.3, 20);
            let h = estimate_bandwidth(&pts);
            let a = mean_shift(&pts, h, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
            let mut perm: Vec<usize> = (0..pts.len()).collect();
            SeededRng::new(seed ^ 77).shuffle(&mut perm);
            pts = perm.iter().map(|&i| pts[i].clone()).collect();
            let b = mean_shift(&pts, h, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
            prop_assert_eq!(a.sizes.clone(), b.sizes.clone());
            for (ca, cb) in a.centroids.iter().zip(&b.centroids) {
                prop_assert!(sq_dist(ca, cb).sqrt() < 1e-6);
            }
            // same partition up to relabeling
            for (new_pos, &old) in perm.iter().enumerate() {
                prop_assert_eq!(a.assignments[old], b.assignments[new_pos]);
            }
        }
    }
}
