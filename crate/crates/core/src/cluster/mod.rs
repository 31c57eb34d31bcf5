//! Clustering evaluation: Hungarian matching, All/Old/New accuracy,
//! semi-supervised spherical k-means and estimation of the class count.

mod hungarian;

pub use hungarian::{hungarian, Assignment, Cost};

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};

/// Accuracy triple under one global cluster-to-class matching.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub all: f64,
    pub old: f64,
    pub new: f64,
    /// Matched `(cluster, class)` pairs, original ids.
    pub matched: Vec<(usize, usize)>,
}

/// Re-indexes arbitrary ids densely in ascending order.
fn dense_ids(ids: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let distinct: Vec<usize> = ids.iter().copied().collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    let index: BTreeMap<usize, usize> = distinct.iter().enumerate().map(|(i, &v)| (v, i)).collect();
    (ids.iter().map(|v| index[v]).collect(), distinct)
}

/// Clustering accuracy under the best one-to-one cluster/class matching.
///
/// Samples whose cluster or class is left unpaired count as errors. `old`
/// and `new` split the same matching by `known_mask`; an empty subset scores 0.
/// Among matchings with the same total, the one with more known-class hits
/// wins.
pub fn cluster_accuracy(pred: &[usize], truth: &[usize], known_mask: &[bool]) -> Result<Accuracy> {
    if pred.len() != truth.len() || pred.len() != known_mask.len() {
        return Err(Error::shape(
            "cluster_accuracy",
            format!("{} predictions, {} labels, {} mask entries", pred.len(), truth.len(), known_mask.len()),
        ));
    }
    if pred.is_empty() {
        return Err(Error::invalid("cluster_accuracy of no samples"));
    }
    let (p, clusters) = dense_ids(pred);
    let (t, classes) = dense_ids(truth);
    // Maximize matched samples, then matched known-class samples among equal
    // optima, so the triple does not depend on how clusters are numbered.
    let weight = p.len() as i64 + 1;
    let mut table = vec![vec![0i64; classes.len()]; clusters.len()];
    for ((&a, &b), &known) in p.iter().zip(&t).zip(known_mask) {
        table[a][b] -= weight + known as i64;
    }
    let assignment = hungarian(&table)?;
    let mut class_of = vec![None; clusters.len()];
    for &(c, k) in &assignment.pairs {
        class_of[c] = Some(k);
    }
    let (mut hit, mut hit_old, mut hit_new, mut n_old) = (0usize, 0usize, 0usize, 0usize);
    for i in 0..p.len() {
        let ok = class_of[p[i]] == Some(t[i]);
        hit += ok as usize;
        if known_mask[i] {
            n_old += 1;
            hit_old += ok as usize;
        } else {
            hit_new += ok as usize;
        }
    }
    let n_new = p.len() - n_old;
    let ratio = |h: usize, n: usize| if n == 0 { 0.0 } else { h as f64 / n as f64 };
    Ok(Accuracy {
        all: ratio(hit, p.len()),
        old: ratio(hit_old, n_old),
        new: ratio(hit_new, n_new),
        matched: assignment.pairs.iter().map(|&(c, k)| (clusters[c], classes[k])).collect(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    /// K×D unit rows.
    pub centroids: Matrix<f64>,
    pub iterations: usize,
    /// Sum of cosine distances after each assignment step.
    pub objective: Vec<f64>,
    /// Cluster used for each distinct label, ascending by label.
    pub label_clusters: Vec<(usize, usize)>,
}

pub const MAX_ITER: usize = 300;

fn unit(v: &[f64]) -> Option<Vec<f64>> {
    let n = dot(v, v).sqrt();
    (n > 1e-300).then(|| v.iter().map(|x| x / n).collect())
}

fn nearest(z: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_sim = f64::NEG_INFINITY;
    for (k, c) in centroids.iter().enumerate() {
        let s = dot(z, c);
        if s > best_sim {
            best_sim = s;
            best = k;
        }
    }
    best
}

/// Semi-supervised k-means on the unit sphere with cosine distance.
///
/// Labeled samples stay in their label's cluster (labels take clusters
/// `0..L` in ascending label order); unlabeled samples go to the nearest
/// centroid. Known centroids start at normalized class means and the rest
/// are seeded by k-means++ over unlabeled points. A cluster that empties is
/// re-seeded from the point farthest from its centroid.
pub fn ss_kmeans(
    z: &Matrix<f64>,
    labeled_idx: &[usize],
    labels: &[usize],
    k: usize,
    max_iter: usize,
    seed: u64,
) -> Result<KMeansResult> {
    let n = z.rows();
    if labeled_idx.len() != labels.len() {
        return Err(Error::shape("ss_kmeans", "labeled_idx and labels differ in length"));
    }
    if k == 0 || k > n {
        return Err(Error::invalid(format!("ss_kmeans: K = {k} with {n} samples")));
    }
    let z = z.normalize_rows()?;
    let rows: Vec<&[f64]> = (0..n).map(|i| z.row(i)).collect();

    let mut fixed: Vec<Option<usize>> = vec![None; n];
    let (_, distinct) = dense_ids(labels);
    if distinct.len() > k {
        return Err(Error::invalid(format!("ss_kmeans: {} labeled classes exceed K = {k}", distinct.len())));
    }
    let cluster_of: BTreeMap<usize, usize> = distinct.iter().enumerate().map(|(i, &y)| (y, i)).collect();
    for (&i, &y) in labeled_idx.iter().zip(labels) {
        if i >= n {
            return Err(Error::invalid(format!("ss_kmeans: labeled index {i} out of range")));
        }
        let c = cluster_of[&y];
        if fixed[i].is_some_and(|prev| prev != c) {
            return Err(Error::invalid(format!("ss_kmeans: sample {i} has two labels")));
        }
        fixed[i] = Some(c);
    }

    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    for c in 0..distinct.len() {
        let mut sum = vec![0.0; z.cols()];
        for i in (0..n).filter(|&i| fixed[i] == Some(c)) {
            sum.iter_mut().zip(rows[i]).for_each(|(s, v)| *s += v);
        }
        // A class whose members cancel out starts at its first member.
        let first = (0..n).find(|&i| fixed[i] == Some(c)).expect("class has a member");
        centroids.push(unit(&sum).unwrap_or_else(|| rows[first].to_vec()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool: Vec<usize> = {
        let free: Vec<usize> = (0..n).filter(|&i| fixed[i].is_none()).collect();
        if free.is_empty() { (0..n).collect() } else { free }
    };
    while centroids.len() < k {
        let pick = if centroids.is_empty() {
            pool[rng.gen_range(0..pool.len())]
        } else {
            let weights: Vec<f64> = pool
                .iter()
                .map(|&i| {
                    let far = centroids.iter().map(|c| 1.0 - dot(rows[i], c)).fold(f64::INFINITY, f64::min);
                    far.max(0.0).powi(2)
                })
                .collect();
            let total: f64 = weights.iter().sum();
            if total <= 0.0 {
                pool[rng.gen_range(0..pool.len())]
            } else {
                let mut target = rng.gen_range(0.0..total);
                let mut chosen = pool[pool.len() - 1];
                for (&i, &w) in pool.iter().zip(&weights) {
                    if target < w {
                        chosen = i;
                        break;
                    }
                    target -= w;
                }
                chosen
            }
        };
        centroids.push(rows[pick].to_vec());
    }

    let assign = |centroids: &[Vec<f64>]| -> Vec<usize> {
        (0..n).map(|i| fixed[i].unwrap_or_else(|| nearest(rows[i], centroids))).collect()
    };
    let objective_of = |a: &[usize], centroids: &[Vec<f64>]| -> f64 {
        (0..n).map(|i| 1.0 - dot(rows[i], &centroids[a[i]])).sum()
    };

    let mut assignments = assign(&centroids);
    let mut objective = vec![objective_of(&assignments, &centroids)];
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        update_centroids(&rows, &mut assignments, &fixed, &mut centroids);
        let next = assign(&centroids);
        let changed = next != assignments;
        assignments = next;
        objective.push(objective_of(&assignments, &centroids));
        if !changed {
            break;
        }
    }

    Ok(KMeansResult {
        assignments,
        centroids: Matrix::from_rows(&centroids)?,
        iterations,
        objective,
        label_clusters: cluster_of.into_iter().collect(),
    })
}

/// Moves each centroid to the normalized mean of its members. Empty or
/// degenerate clusters take over the free point farthest from its centroid.
fn update_centroids(rows: &[&[f64]], assignments: &mut [usize], fixed: &[Option<usize>], centroids: &mut [Vec<f64>]) {
    let k = centroids.len();
    let d = rows[0].len();
    let mut sums = vec![vec![0.0; d]; k];
    let mut counts = vec![0usize; k];
    for (i, &a) in assignments.iter().enumerate() {
        counts[a] += 1;
        sums[a].iter_mut().zip(rows[i]).for_each(|(s, v)| *s += v);
    }
    let mut reseeded = vec![false; rows.len()];
    for c in 0..k {
        if let Some(u) = (counts[c] > 0).then(|| unit(&sums[c])).flatten() {
            centroids[c] = u;
            continue;
        }
        // Farthest free point from its current centroid, not already moved,
        // and not the last member of its own cluster.
        let candidate = (0..rows.len())
            .filter(|&i| fixed[i].is_none() && !reseeded[i] && counts[assignments[i]] > 1)
            .map(|i| (i, 1.0 - dot(rows[i], &centroids[assignments[i]])))
            .fold(None::<(usize, f64)>, |best, (i, dist)| match best {
                Some((_, bd)) if bd >= dist => best,
                _ => Some((i, dist)),
            });
        if let Some((i, _)) = candidate {
            counts[assignments[i]] -= 1;
            assignments[i] = c;
            counts[c] += 1;
            reseeded[i] = true;
            centroids[c] = rows[i].to_vec();
        }
    }
}

/// Per-K diagnostics from [`estimate_k`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KScore {
    pub k: usize,
    pub held_out_accuracy: f64,
    pub silhouette: f64,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KEstimate {
    pub k: usize,
    pub scores: Vec<KScore>,
}

/// Mean cosine silhouette; a point alone in its cluster scores 0.
pub fn silhouette(z: &Matrix<f64>, assignments: &[usize]) -> Result<f64> {
    let n = z.rows();
    if assignments.len() != n || n == 0 {
        return Err(Error::shape("silhouette", "assignment count differs from rows"));
    }
    let z = z.normalize_rows()?;
    let k = assignments.iter().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; k];
    assignments.iter().for_each(|&a| sizes[a] += 1);
    let mut total = 0.0;
    for i in 0..n {
        let mut dist = vec![0.0; k];
        for j in 0..n {
            if j != i {
                dist[assignments[j]] += 1.0 - dot(z.row(i), z.row(j));
            }
        }
        let own = assignments[i];
        if sizes[own] < 2 {
            continue;
        }
        let a = dist[own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own && sizes[c] > 0)
            .map(|c| dist[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        if !b.is_finite() {
            continue;
        }
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Ok(total / n as f64)
}

/// Scores are compared with this slack so that exact ties (for instance on
/// identical points) fall back to the smallest K.
const SCORE_TIE: f64 = 1e-12;

/// Scans `K ∈ [k_min, k_max]`. For every K, semi-supervised k-means runs with
/// half of each labeled class hidden; the score is the accuracy on the
/// hidden half plus the cosine silhouette of the full clustering. Returns the
/// best K, ties going to the smallest.
pub fn estimate_k(
    z: &Matrix<f64>,
    labeled_idx: &[usize],
    labels: &[usize],
    k_min: usize,
    k_max: usize,
    seed: u64,
) -> Result<KEstimate> {
    if k_min == 0 || k_min > k_max {
        return Err(Error::invalid(format!("estimate_k: empty scan range [{k_min}, {k_max}]")));
    }
    if k_max > z.rows() {
        return Err(Error::invalid(format!("estimate_k: k_max = {k_max} exceeds {} samples", z.rows())));
    }
    if labeled_idx.len() != labels.len() {
        return Err(Error::shape("estimate_k", "labeled_idx and labels differ in length"));
    }

    // Split each class alternately after a seeded shuffle.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5eed);
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (&i, &y) in labeled_idx.iter().zip(labels) {
        by_class.entry(y).or_default().push(i);
    }
    let (mut keep_idx, mut keep_y, mut held_idx, mut held_y) = (vec![], vec![], vec![], vec![]);
    for (&y, members) in &by_class {
        let mut m = members.clone();
        rand::seq::SliceRandom::shuffle(m.as_mut_slice(), &mut rng);
        for (r, &i) in m.iter().enumerate() {
            if r % 2 == 0 {
                keep_idx.push(i);
                keep_y.push(y);
            } else {
                held_idx.push(i);
                held_y.push(y);
            }
        }
    }
    if k_min < by_class.len() {
        return Err(Error::invalid(format!("estimate_k: k_min = {k_min} below the {} labeled classes", by_class.len())));
    }

    let score_k = |k: usize| -> Result<KScore> {
        let run = ss_kmeans(z, &keep_idx, &keep_y, k, MAX_ITER, seed)?;
        let held_out_accuracy = if held_idx.is_empty() {
            0.0
        } else {
            let pred: Vec<usize> = held_idx.iter().map(|&i| run.assignments[i]).collect();
            cluster_accuracy(&pred, &held_y, &vec![true; pred.len()])?.all
        };
        let silhouette = silhouette(z, &run.assignments)?;
        Ok(KScore { k, held_out_accuracy, silhouette, score: held_out_accuracy + silhouette })
    };

    let ks: Vec<usize> = (k_min..=k_max).collect();
    let scores: Vec<KScore> = std::thread::scope(|s| {
        let handles: Vec<_> = ks.iter().map(|&k| s.spawn(move || score_k(k))).collect();
        handles.into_iter().map(|h| h.join().expect("k-means worker panicked")).collect::<Result<Vec<_>>>()
    })?;
    let mut best = &scores[0];
    for s in &scores[1..] {
        if s.score > best.score + SCORE_TIE {
            best = s;
        }
    }
    Ok(KEstimate { k: best.k, scores })
}

/// Evaluation summary written by the CLI.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub k_used: usize,
    pub acc_all: f64,
    pub acc_old: f64,
    pub acc_new: f64,
    pub iterations: usize,
    pub seed: u64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;

    fn blobs(centers: &[Vec<f64>], per: usize, noise: f64, rng: &mut ChaCha8Rng) -> (Matrix<f64>, Vec<usize>) {
        let mut rows = Vec::new();
        let mut y = Vec::new();
        for (c, center) in centers.iter().enumerate() {
            for _ in 0..per {
                rows.push(center.iter().map(|v| v + noise * rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>());
                y.push(c);
            }
        }
        (Matrix::from_rows(&rows).unwrap().normalize_rows().unwrap(), y)
    }

    fn basis(k: usize, d: usize) -> Vec<Vec<f64>> {
        (0..k).map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect()
    }

    #[test]
    fn accuracy_examples() {
        let truth = [0, 0, 0, 1, 1, 1];
        let known = [true, true, true, false, false, false];
        let a = cluster_accuracy(&truth, &truth, &known).unwrap();
        assert_eq!((a.all, a.old, a.new), (1.0, 1.0, 1.0));
        let relabeled = [7, 7, 7, 3, 3, 3];
        let a = cluster_accuracy(&relabeled, &truth, &known).unwrap();
        assert_eq!((a.all, a.old, a.new), (1.0, 1.0, 1.0));
        let one_off = [0, 0, 1, 1, 1, 1];
        let a = cluster_accuracy(&one_off, &truth, &known).unwrap();
        assert!((a.all - 5.0 / 6.0).abs() < 1e-15);
        assert!((a.old - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(a.new, 1.0);
        assert!(cluster_accuracy(&[0, 1], &[0], &[true]).is_err());
    }

    #[test]
    fn unpaired_clusters_count_as_errors() {
        // Three clusters, two classes: the third cluster cannot be matched.
        let a = cluster_accuracy(&[0, 1, 2, 2], &[0, 1, 1, 1], &[true; 4]).unwrap();
        assert!((a.all - 0.75).abs() < 1e-15);
    }

    #[test]
    fn accuracy_invariant_and_mixture_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let n = rng.gen_range(2..40);
            let pred: Vec<usize> = (0..n).map(|_| rng.gen_range(0..5)).collect();
            let truth: Vec<usize> = (0..n).map(|_| rng.gen_range(0..4)).collect();
            let known: Vec<bool> = truth.iter().map(|&t| t < 2).collect();
            let a = cluster_accuracy(&pred, &truth, &known).unwrap();
            let mut ids: Vec<usize> = (0..5).collect();
            ids.shuffle(&mut rng);
            let renamed: Vec<usize> = pred.iter().map(|&p| ids[p] + 10).collect();
            let b = cluster_accuracy(&renamed, &truth, &known).unwrap();
            assert_eq!((a.all, a.old, a.new), (b.all, b.old, b.new));
            let n_old = known.iter().filter(|&&k| k).count() as f64;
            let mix = (n_old * a.old + (n as f64 - n_old) * a.new) / n as f64;
            assert!((mix - a.all).abs() < 1e-12);
            assert!((0.0..=1.0).contains(&a.all));
        }
    }

    #[test]
    fn all_labeled_reproduces_labels() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (z, y) = blobs(&basis(3, 4), 5, 0.3, &mut rng);
        let idx: Vec<usize> = (0..z.rows()).collect();
        let r = ss_kmeans(&z, &idx, &y, 3, MAX_ITER, 0).unwrap();
        assert_eq!(r.assignments, y);
    }

    #[test]
    fn recovers_orthogonal_blobs() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (z, y) = blobs(&basis(2, 6), 20, 0.1, &mut rng);
            let r = ss_kmeans(&z, &[], &[], 2, MAX_ITER, seed).unwrap();
            let a = cluster_accuracy(&r.assignments, &y, &vec![false; y.len()]).unwrap();
            assert_eq!(a.all, 1.0, "seed {seed}");
        }
    }

    #[test]
    fn labeled_points_stay_pinned_and_objective_never_rises() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for seed in 0..10 {
            let (z, y) = blobs(&basis(5, 8), 12, 0.8, &mut rng);
            let labeled: Vec<usize> = (0..z.rows()).filter(|&i| y[i] < 2 && i % 2 == 0).collect();
            let labels: Vec<usize> = labeled.iter().map(|&i| y[i]).collect();
            let r = ss_kmeans(&z, &labeled, &labels, 5, MAX_ITER, seed).unwrap();
            for (&i, &l) in labeled.iter().zip(&labels) {
                assert_eq!(r.assignments[i], l);
            }
            for w in r.objective.windows(2) {
                assert!(w[1] <= w[0] + 1e-9, "{:?}", r.objective);
            }
            assert!(r.iterations <= MAX_ITER);
        }
    }

    #[test]
    fn empty_clusters_are_reseeded() {
        // Five copies of two points with K = 4: k-means++ would duplicate
        // centroids, leaving clusters empty after the first assignment.
        let a = vec![1.0, 0.0];
        let b = vec![0.0, 1.0];
        let rows = vec![a.clone(), a.clone(), a.clone(), b.clone(), b.clone(), b];
        let z = Matrix::from_rows(&rows).unwrap();
        let r = ss_kmeans(&z, &[], &[], 4, MAX_ITER, 1).unwrap();
        assert_eq!(r.centroids.rows(), 4);
        for c in 0..4 {
            assert!((crate::linalg::norm(r.centroids.row(c)) - 1.0).abs() < 1e-12);
        }
        // Distinct points: every cluster keeps a member.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (z, _) = blobs(&basis(2, 3), 6, 0.05, &mut rng);
        let r = ss_kmeans(&z, &[], &[], 5, MAX_ITER, 2).unwrap();
        for c in 0..5 {
            assert!(r.assignments.contains(&c), "cluster {c} empty: {:?}", r.assignments);
        }
    }

    #[test]
    fn kmeans_rejects_bad_k() {
        let z = Matrix::<f64>::identity(3);
        assert!(ss_kmeans(&z, &[], &[], 4, 10, 0).is_err());
        assert!(ss_kmeans(&z, &[0, 1], &[0, 1], 1, 10, 0).is_err());
    }

    #[test]
    fn estimate_k_on_separated_classes() {
        for seed in 0..3 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (z, y) = blobs(&basis(5, 8), 30, 0.2, &mut rng);
            let labeled: Vec<usize> = (0..z.rows()).filter(|&i| y[i] < 2).collect();
            let labels: Vec<usize> = labeled.iter().map(|&i| y[i]).collect();
            let est = estimate_k(&z, &labeled, &labels, 2, 10, seed).unwrap();
            assert_eq!(est.k, 5, "{:?}", est.scores);
        }
    }

    #[test]
    fn estimate_k_ties_go_down() {
        let z = Matrix::from_rows(&vec![vec![0.0, 1.0]; 12]).unwrap();
        let est = estimate_k(&z, &[0, 1, 2, 3], &[0, 0, 1, 1], 2, 6, 0).unwrap();
        assert_eq!(est.k, 2);
        assert!(estimate_k(&z, &[], &[], 5, 4, 0).is_err());
    }
}
