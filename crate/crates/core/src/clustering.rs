//! k-reciprocal Jaccard distances, DBSCAN over a precomputed distance
//! matrix, and per-cluster statistics.
//!
//! Every tie in this module is broken toward the lowest sample id and DBSCAN
//! scans samples in ascending id order, so results are a pure function of
//! the input.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type ClusterId = usize;

#[derive(Debug, Error, PartialEq)]
pub enum ClusteringError {
    #[error("k must satisfy 1 <= k < n (k = {k}, n = {n})")]
    InvalidK { k: usize, n: usize },
    #[error("non-finite value in sample {0}")]
    NonFinite(usize),
    #[error("neighbor list of sample {id} has {len} entries, need at least {k}")]
    ShortNeighborList { id: usize, len: usize, k: usize },
    #[error("distance matrix is not symmetric at ({0}, {1})")]
    Asymmetric(usize, usize),
    #[error("distance matrix has a negative or non-zero diagonal at {0}")]
    BadDiagonal(usize),
    #[error("eps must be positive and min_pts at least 1")]
    InvalidParameters,
    #[error("gamma must be non-negative, got {0}")]
    NegativeGamma(f64),
    #[error("cluster {0} has no members")]
    EmptyCluster(ClusterId),
    #[error("unknown cluster {0}")]
    UnknownCluster(ClusterId),
    #[error("sample {0} is not in the expected cluster")]
    NotAMember(usize),
}

pub type Result<T, E = ClusteringError> = std::result::Result<T, E>;

/// Dense row-major `n x n` distance matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    data: Vec<f64>,
}

impl DistanceMatrix {
    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                data.push(f(i, j));
            }
        }
        DistanceMatrix { n, data }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }
}

pub fn squared_euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    squared_euclidean(a, b).sqrt()
}

/// The `k` nearest other samples of every sample, ascending by Euclidean
/// distance with ties going to the lower id.
pub fn knn_lists(features: &[Vec<f64>], k: usize) -> Result<Vec<Vec<usize>>> {
    let n = features.len();
    if k == 0 || k >= n {
        return Err(ClusteringError::InvalidK { k, n });
    }
    if let Some(bad) = features
        .iter()
        .position(|f| f.iter().any(|x| !x.is_finite()))
    {
        return Err(ClusteringError::NonFinite(bad));
    }
    let lists = (0..n)
        .map(|i| {
            let mut row: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (squared_euclidean(&features[i], &features[j]), j))
                .collect();
            let by_dist =
                |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            if k < row.len() {
                row.select_nth_unstable_by(k - 1, by_dist);
                row.truncate(k);
            }
            row.sort_unstable_by(by_dist);
            row.into_iter().map(|(_, j)| j).collect()
        })
        .collect();
    Ok(lists)
}

/// k-reciprocal sets `R(i, k) = {j in kNN(i) : i in kNN(j)} ∪ {i}`, sorted.
pub fn reciprocal_sets(neighbors: &[Vec<usize>], k: usize) -> Result<Vec<Vec<usize>>> {
    if let Some((id, l)) = neighbors.iter().enumerate().find(|(_, l)| l.len() < k) {
        return Err(ClusteringError::ShortNeighborList {
            id,
            len: l.len(),
            k,
        });
    }
    let sorted: Vec<Vec<usize>> = neighbors
        .iter()
        .map(|l| {
            let mut s = l[..k].to_vec();
            s.sort_unstable();
            s
        })
        .collect();
    Ok(sorted
        .iter()
        .enumerate()
        .map(|(i, knn)| {
            let mut r: Vec<usize> = knn
                .iter()
                .copied()
                .filter(|&j| sorted[j].binary_search(&i).is_ok())
                .collect();
            r.push(i);
            r.sort_unstable();
            r
        })
        .collect())
}

/// Jaccard distance between k-reciprocal sets.
pub fn jaccard_distance(neighbors: &[Vec<usize>], k: usize) -> Result<DistanceMatrix> {
    let sets = reciprocal_sets(neighbors, k)?;
    let n = sets.len();
    let mut postings: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, r) in sets.iter().enumerate() {
        for &m in r {
            postings[m].push(i);
        }
    }
    let mut data = vec![1.0; n * n];
    let mut overlap = vec![0usize; n];
    for i in 0..n {
        let mut touched = Vec::new();
        for &m in &sets[i] {
            for &j in &postings[m] {
                if overlap[j] == 0 {
                    touched.push(j);
                }
                overlap[j] += 1;
            }
        }
        for j in touched {
            let inter = overlap[j];
            let union = sets[i].len() + sets[j].len() - inter;
            data[i * n + j] = 1.0 - inter as f64 / union as f64;
            overlap[j] = 0;
        }
        data[i * n + i] = 0.0;
    }
    Ok(DistanceMatrix { n, data })
}

/// Cluster labels in discovery order; `None` marks noise.
pub fn dbscan(
    distances: &DistanceMatrix,
    eps: f64,
    min_pts: usize,
) -> Result<Vec<Option<ClusterId>>> {
    if !(eps > 0.0) || min_pts == 0 {
        return Err(ClusteringError::InvalidParameters);
    }
    let n = distances.len();
    for i in 0..n {
        let d = distances.get(i, i);
        if d < 0.0 || d.is_nan() {
            return Err(ClusteringError::BadDiagonal(i));
        }
        for j in (i + 1)..n {
            if distances.get(i, j) != distances.get(j, i) {
                return Err(ClusteringError::Asymmetric(i, j));
            }
        }
    }

    let neighborhoods: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            distances
                .row(i)
                .iter()
                .enumerate()
                .filter(|(_, &d)| d <= eps)
                .map(|(j, _)| j)
                .collect()
        })
        .collect();
    let is_core: Vec<bool> = neighborhoods.iter().map(|nb| nb.len() >= min_pts).collect();

    let mut labels: Vec<Option<ClusterId>> = vec![None; n];
    let mut next = 0;
    for start in 0..n {
        if !is_core[start] || labels[start].is_some() {
            continue;
        }
        let cluster = next;
        next += 1;
        labels[start] = Some(cluster);
        let mut frontier = vec![start];
        let mut head = 0;
        while head < frontier.len() {
            let p = frontier[head];
            head += 1;
            if !is_core[p] {
                continue;
            }
            for &q in &neighborhoods[p] {
                if labels[q].is_none() {
                    labels[q] = Some(cluster);
                    frontier.push(q);
                }
            }
        }
    }
    Ok(labels)
}

/// Embeddings and descriptors that cluster statistics are computed from.
#[derive(Debug, Clone, Copy)]
pub struct ClusterContext<'a> {
    pub embeddings: &'a [Vec<f64>],
    pub g_descriptors: Option<&'a [Vec<f64>]>,
    pub gamma: f64,
}

impl<'a> ClusterContext<'a> {
    pub fn new(
        embeddings: &'a [Vec<f64>],
        g_descriptors: Option<&'a [Vec<f64>]>,
        gamma: f64,
    ) -> Result<Self> {
        if !(gamma >= 0.0) {
            return Err(ClusteringError::NegativeGamma(gamma));
        }
        Ok(ClusterContext {
            embeddings,
            g_descriptors,
            gamma,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub cluster_id: ClusterId,
    /// Ascending sample ids.
    pub members: Vec<usize>,
    pub f_mean: Vec<f64>,
    pub var_diag: Vec<f64>,
    pub g_mean: Option<Vec<f64>>,
    pub representative: usize,
    pub chaotic: usize,
    pub chaotic_degree: f64,
}

/// Per-dimension mean and population variance (two-pass).
pub fn mean_and_variance(rows: &[&[f64]]) -> (Vec<f64>, Vec<f64>) {
    let dim = rows.first().map_or(0, |r| r.len());
    let count = rows.len() as f64;
    let mut mean = vec![0.0; dim];
    for r in rows {
        for (m, x) in mean.iter_mut().zip(*r) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let mut var = vec![0.0; dim];
    for r in rows {
        for ((v, x), m) in var.iter_mut().zip(*r).zip(&mean) {
            *v += (x - m) * (x - m);
        }
    }
    var.iter_mut().for_each(|v| *v /= count);
    (mean, var)
}

/// Member closest to the cluster mean.
pub fn representative(members: &[usize], embeddings: &[Vec<f64>], f_mean: &[f64]) -> usize {
    let mut best = (f64::INFINITY, usize::MAX);
    for &m in members {
        let d = euclidean(&embeddings[m], f_mean);
        if d < best.0 || (d == best.0 && m < best.1) {
            best = (d, m);
        }
    }
    best.1
}

/// `‖f_i − f_mean‖ + γ‖g_i − g_mean‖`.
pub fn chaotic_degree(
    id: usize,
    ctx: &ClusterContext<'_>,
    f_mean: &[f64],
    g_mean: Option<&[f64]>,
) -> f64 {
    let mut d = euclidean(&ctx.embeddings[id], f_mean);
    if let (Some(g), Some(gm)) = (ctx.g_descriptors, g_mean) {
        d += ctx.gamma * euclidean(&g[id], gm);
    }
    d
}

/// Most chaotic member and its degree. Singletons report degree 0.
pub fn chaotic_sample(
    members: &[usize],
    ctx: &ClusterContext<'_>,
    f_mean: &[f64],
    g_mean: Option<&[f64]>,
) -> (usize, f64) {
    if members.len() == 1 {
        return (members[0], 0.0);
    }
    let mut best = (f64::NEG_INFINITY, usize::MAX);
    for &m in members {
        let d = chaotic_degree(m, ctx, f_mean, g_mean);
        if d > best.0 || (d == best.0 && m < best.1) {
            best = (d, m);
        }
    }
    (best.1, best.0)
}

impl Cluster {
    pub fn build(
        cluster_id: ClusterId,
        mut members: Vec<usize>,
        ctx: &ClusterContext<'_>,
    ) -> Result<Self> {
        if members.is_empty() {
            return Err(ClusteringError::EmptyCluster(cluster_id));
        }
        members.sort_unstable();
        members.dedup();
        let rows: Vec<&[f64]> = members
            .iter()
            .map(|&m| ctx.embeddings[m].as_slice())
            .collect();
        let (f_mean, var_diag) = mean_and_variance(&rows);
        let g_mean = ctx.g_descriptors.map(|g| {
            let rows: Vec<&[f64]> = members.iter().map(|&m| g[m].as_slice()).collect();
            mean_and_variance(&rows).0
        });
        let representative = representative(&members, ctx.embeddings, &f_mean);
        let (chaotic, chaotic_degree) = chaotic_sample(&members, ctx, &f_mean, g_mean.as_deref());
        Ok(Cluster {
            cluster_id,
            members,
            f_mean,
            var_diag,
            g_mean,
            representative,
            chaotic,
            chaotic_degree,
        })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains(&self, id: usize) -> bool {
        self.members.binary_search(&id).is_ok()
    }
}

/// Partition of the non-noise samples into clusters with stable ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSet {
    clusters: BTreeMap<ClusterId, Cluster>,
    assignment: Vec<Option<ClusterId>>,
    next_id: ClusterId,
}

impl ClusterSet {
    /// Builds clusters (with statistics) from per-sample labels.
    pub fn from_assignment(
        assignment: &[Option<ClusterId>],
        ctx: &ClusterContext<'_>,
    ) -> Result<Self> {
        let mut groups: BTreeMap<ClusterId, Vec<usize>> = BTreeMap::new();
        for (i, a) in assignment.iter().enumerate() {
            if let Some(c) = a {
                groups.entry(*c).or_default().push(i);
            }
        }
        let clusters = groups
            .into_iter()
            .map(|(id, members)| Cluster::build(id, members, ctx).map(|c| (id, c)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        let next_id = clusters.keys().next_back().map_or(0, |k| k + 1);
        Ok(ClusterSet {
            clusters,
            assignment: assignment.to_vec(),
            next_id,
        })
    }

    pub fn num_samples(&self) -> usize {
        self.assignment.len()
    }

    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }

    pub fn clusters(&self) -> impl Iterator<Item = &Cluster> {
        self.clusters.values()
    }

    pub fn cluster_ids(&self) -> impl Iterator<Item = ClusterId> + '_ {
        self.clusters.keys().copied()
    }

    pub fn get(&self, id: ClusterId) -> Option<&Cluster> {
        self.clusters.get(&id)
    }

    pub fn cluster_of(&self, sample: usize) -> Option<ClusterId> {
        self.assignment.get(sample).copied().flatten()
    }

    pub fn assignment(&self) -> &[Option<ClusterId>] {
        &self.assignment
    }

    pub fn noise_ids(&self) -> Vec<usize> {
        self.assignment
            .iter()
            .enumerate()
            .filter(|(_, a)| a.is_none())
            .map(|(i, _)| i)
            .collect()
    }

    /// Splits `cluster`: `seed_keep` stays under the old id and `seed_new`
    /// seeds a fresh id. Other members go to the nearer seed (ties keep).
    /// Returns the fresh id.
    pub fn split(
        &mut self,
        cluster: ClusterId,
        seed_keep: usize,
        seed_new: usize,
        ctx: &ClusterContext<'_>,
    ) -> Result<ClusterId> {
        let old = self
            .clusters
            .get(&cluster)
            .ok_or(ClusteringError::UnknownCluster(cluster))?;
        for s in [seed_keep, seed_new] {
            if !old.contains(s) {
                return Err(ClusteringError::NotAMember(s));
            }
        }
        let (keep, new): (Vec<usize>, Vec<usize>) = old.members.iter().partition(|&&m| {
            if m == seed_keep {
                return true;
            }
            if m == seed_new {
                return false;
            }
            euclidean(&ctx.embeddings[m], &ctx.embeddings[seed_keep])
                <= euclidean(&ctx.embeddings[m], &ctx.embeddings[seed_new])
        });
        let fresh = self.next_id;
        self.next_id += 1;
        for &m in &new {
            self.assignment[m] = Some(fresh);
        }
        self.clusters
            .insert(cluster, Cluster::build(cluster, keep, ctx)?);
        self.clusters
            .insert(fresh, Cluster::build(fresh, new, ctx)?);
        Ok(fresh)
    }

    /// Merges two clusters under the lower id and returns that id.
    pub fn merge(
        &mut self,
        a: ClusterId,
        b: ClusterId,
        ctx: &ClusterContext<'_>,
    ) -> Result<ClusterId> {
        let (lo, hi) = (a.min(b), a.max(b));
        if !self.clusters.contains_key(&lo) {
            return Err(ClusteringError::UnknownCluster(lo));
        }
        let absorbed = self
            .clusters
            .remove(&hi)
            .ok_or(ClusteringError::UnknownCluster(hi))?;
        for &m in &absorbed.members {
            self.assignment[m] = Some(lo);
        }
        let mut members = self.clusters[&lo].members.clone();
        members.extend(absorbed.members);
        self.clusters.insert(lo, Cluster::build(lo, members, ctx)?);
        Ok(lo)
    }
}
