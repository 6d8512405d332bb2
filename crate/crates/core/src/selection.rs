//! Pair fallibility, diversity regularization and the budgeted greedy solver.
//!
//! The solver minimizes `Σ fallibility + α·KL(uniform ‖ p)` where `p` is the
//! add-one smoothed frequency of clusters among selected pair endpoints.
//! INTRA fallibility is the negated chaotic degree and INTER fallibility is
//! the 2-Wasserstein distance between the two clusters' diagonal Gaussians,
//! so in both stages a lower value is a more valuable question.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clustering::{Cluster, ClusterId, ClusterSet};

#[derive(Debug, Error, PartialEq)]
pub enum SelectionError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("no pairs have been selected")]
    EmptySelection,
    #[error("epochs must be at least 1")]
    NoEpochs,
}

pub type Result<T, E = SelectionError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Stage {
    Intra,
    Inter,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Intra => "INTRA",
            Stage::Inter => "INTER",
        })
    }
}

/// Unordered sample pair, stored as `(min, max)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PairKey(pub usize, pub usize);

impl PairKey {
    pub fn new(a: usize, b: usize) -> Self {
        PairKey(a.min(b), a.max(b))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairCandidate {
    pub a: usize,
    pub b: usize,
    pub cluster_a: ClusterId,
    pub cluster_b: ClusterId,
    pub stage: Stage,
    pub fallibility: f64,
}

impl PairCandidate {
    pub fn key(&self) -> PairKey {
        PairKey::new(self.a, self.b)
    }

    fn tie_key(&self) -> (ClusterId, ClusterId, usize, usize) {
        (self.cluster_a, self.cluster_b, self.a, self.b)
    }
}

/// W₂ between diagonal Gaussians given means and per-dimension variances.
pub fn wasserstein2_diagonal(
    mean_a: &[f64],
    var_a: &[f64],
    mean_b: &[f64],
    var_b: &[f64],
) -> Result<f64> {
    if mean_a.len() != mean_b.len() {
        return Err(SelectionError::DimensionMismatch(
            mean_a.len(),
            mean_b.len(),
        ));
    }
    if var_a.len() != mean_a.len() || var_b.len() != mean_b.len() {
        return Err(SelectionError::DimensionMismatch(var_a.len(), var_b.len()));
    }
    let mean_term: f64 = mean_a
        .iter()
        .zip(mean_b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    // With commuting (diagonal) covariances the trace term is Σ (σa − σb)².
    let cov_term: f64 = var_a
        .iter()
        .zip(var_b)
        .map(|(va, vb)| {
            let d = va.max(0.0).sqrt() - vb.max(0.0).sqrt();
            d * d
        })
        .sum();
    Ok((mean_term + cov_term).sqrt())
}

pub fn wasserstein2(a: &Cluster, b: &Cluster) -> Result<f64> {
    wasserstein2_diagonal(&a.f_mean, &a.var_diag, &b.f_mean, &b.var_diag)
}

/// The representative/chaotic pair of one cluster, if it has two distinct
/// endpoints.
pub fn intra_pair(c: &Cluster) -> Option<PairCandidate> {
    (c.len() >= 2 && c.representative != c.chaotic).then(|| PairCandidate {
        a: c.representative,
        b: c.chaotic,
        cluster_a: c.cluster_id,
        cluster_b: c.cluster_id,
        stage: Stage::Intra,
        fallibility: -c.chaotic_degree,
    })
}

/// The representative pair of two clusters, lower cluster id first.
pub fn inter_pair(ca: &Cluster, cb: &Cluster) -> Result<PairCandidate> {
    let (ca, cb) = if ca.cluster_id <= cb.cluster_id {
        (ca, cb)
    } else {
        (cb, ca)
    };
    Ok(PairCandidate {
        a: ca.representative,
        b: cb.representative,
        cluster_a: ca.cluster_id,
        cluster_b: cb.cluster_id,
        stage: Stage::Inter,
        fallibility: wasserstein2(ca, cb)?,
    })
}

/// Candidate pairs for one stage, skipping pairs in `asked`.
pub fn build_stage_pairs(
    clusters: &ClusterSet,
    stage: Stage,
    asked: &HashSet<PairKey>,
) -> Result<Vec<PairCandidate>> {
    let mut out = Vec::new();
    match stage {
        Stage::Intra => out.extend(clusters.clusters().filter_map(intra_pair)),
        Stage::Inter => {
            let all: Vec<&Cluster> = clusters.clusters().collect();
            for (i, ca) in all.iter().enumerate() {
                for cb in &all[i + 1..] {
                    if !asked.contains(&PairKey::new(ca.representative, cb.representative)) {
                        out.push(inter_pair(ca, cb)?);
                    }
                }
            }
        }
    }
    out.retain(|p| !asked.contains(&p.key()));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionState {
    counts: BTreeMap<ClusterId, u64>,
    selected: Vec<PairCandidate>,
    total_budget: usize,
    alpha: f64,
    q: f64,
    beta: f64,
}

impl SelectionState {
    pub fn new(
        cluster_ids: impl IntoIterator<Item = ClusterId>,
        total_budget: usize,
        alpha: f64,
    ) -> Self {
        let mut state = SelectionState {
            counts: cluster_ids.into_iter().map(|c| (c, 0)).collect(),
            selected: Vec::new(),
            total_budget,
            alpha,
            q: 0.0,
            beta: 0.0,
        };
        state.refresh_constants();
        state
    }

    fn refresh_constants(&mut self) {
        self.q = if self.counts.is_empty() {
            0.0
        } else {
            1.0 / self.counts.len() as f64
        };
        // (α/T)·β·Δlog-count then telescopes to exactly α·ΔKL.
        self.beta = self.q * self.total_budget as f64;
    }

    /// Adds clusters created after the state was built (e.g. by a split).
    pub fn register_clusters(&mut self, ids: impl IntoIterator<Item = ClusterId>) {
        let before = self.counts.len();
        for id in ids {
            self.counts.entry(id).or_insert(0);
        }
        if self.counts.len() != before {
            self.refresh_constants();
        }
    }

    pub fn counts(&self) -> &BTreeMap<ClusterId, u64> {
        &self.counts
    }

    pub fn count(&self, cluster: ClusterId) -> u64 {
        self.counts.get(&cluster).copied().unwrap_or(0)
    }

    pub fn selected(&self) -> &[PairCandidate] {
        &self.selected
    }

    pub fn total_budget(&self) -> usize {
        self.total_budget
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn q(&self) -> f64 {
        self.q
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// `Σ [log(cnt+1) − log(cnt'+1)]` over the pair's clusters, where `cnt'`
    /// is the count after the pair is added.
    pub fn diversity_bracket(&self, pair: &PairCandidate) -> f64 {
        let bump = |c: ClusterId, by: u64| {
            let before = self.count(c) as f64;
            (before + 1.0).ln() - (before + 1.0 + by as f64).ln()
        };
        if pair.cluster_a == pair.cluster_b {
            bump(pair.cluster_a, 2)
        } else {
            bump(pair.cluster_a, 1) + bump(pair.cluster_b, 1)
        }
    }

    pub fn o_increment(&self, pair: &PairCandidate) -> f64 {
        if self.alpha == 0.0 || self.total_budget == 0 {
            return pair.fallibility;
        }
        let scale = self.alpha / self.total_budget as f64 * self.beta;
        pair.fallibility + scale * self.diversity_bracket(pair)
    }

    pub fn record(&mut self, pair: PairCandidate) {
        let registered = self.counts.len();
        *self.counts.entry(pair.cluster_a).or_insert(0) += 1;
        *self.counts.entry(pair.cluster_b).or_insert(0) += 1;
        if self.counts.len() != registered {
            self.refresh_constants();
        }
        self.selected.push(pair);
    }

    /// Smoothed `KL(uniform ‖ p)` with `p_j ∝ cnt_j + 1`.
    pub fn kl_to_uniform(&self) -> Result<f64> {
        if self.selected.is_empty() {
            return Err(SelectionError::EmptySelection);
        }
        Ok(smoothed_kl(self.counts.values().copied()))
    }

    /// Largest per-cluster share of selected endpoints.
    pub fn max_frequency(&self) -> f64 {
        let total: u64 = self.counts.values().sum();
        if total == 0 {
            return 0.0;
        }
        *self.counts.values().max().unwrap() as f64 / total as f64
    }

    /// From-scratch objective `Σ fallibility + α·KL` of the current selection.
    pub fn objective(&self) -> Result<f64> {
        let d: f64 = self.selected.iter().map(|p| p.fallibility).sum();
        Ok(d + self.alpha * self.kl_to_uniform()?)
    }
}

pub fn smoothed_kl(counts: impl IntoIterator<Item = u64>) -> f64 {
    let counts: Vec<u64> = counts.into_iter().collect();
    if counts.is_empty() {
        return 0.0;
    }
    let q = 1.0 / counts.len() as f64;
    let total: f64 = counts.iter().map(|&c| c as f64 + 1.0).sum();
    counts
        .iter()
        .map(|&c| q * (q / ((c as f64 + 1.0) / total)).ln())
        .sum()
}

/// Index of the candidate with the smallest increment under `state`.
pub fn greedy_pick(candidates: &[PairCandidate], state: &SelectionState) -> Option<usize> {
    candidates
        .iter()
        .map(|c| state.o_increment(c))
        .enumerate()
        .min_by(|(i, x), (j, y)| {
            x.total_cmp(y)
                .then_with(|| candidates[*i].tie_key().cmp(&candidates[*j].tie_key()))
        })
        .map(|(i, _)| i)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GreedyOutcome {
    pub selected: Vec<PairCandidate>,
    /// Increment of each pick at the time it was chosen.
    pub increments: Vec<f64>,
    pub shortfall: usize,
}

pub fn greedy_select(
    mut candidates: Vec<PairCandidate>,
    state: &mut SelectionState,
    budget: usize,
) -> GreedyOutcome {
    let mut selected = Vec::with_capacity(budget.min(candidates.len()));
    let mut increments = Vec::with_capacity(selected.capacity());
    while selected.len() < budget {
        let Some(i) = greedy_pick(&candidates, state) else {
            break;
        };
        let pair = candidates.swap_remove(i);
        increments.push(state.o_increment(&pair));
        state.record(pair.clone());
        selected.push(pair);
    }
    let shortfall = budget - selected.len();
    if shortfall > 0 {
        log::debug!("greedy selection ran out of candidates, {shortfall} short");
    }
    GreedyOutcome {
        selected,
        increments,
        shortfall,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetSchedule {
    pub per_epoch: Vec<usize>,
}

impl BudgetSchedule {
    pub fn total(&self) -> usize {
        self.per_epoch.iter().sum()
    }

    /// Budget allowed up to and including `epoch` (0-based).
    pub fn cumulative(&self, epoch: usize) -> usize {
        self.per_epoch.iter().take(epoch + 1).sum()
    }
}

/// Gaussian allocation of `total` verifications over `epochs`, centred at
/// `E/2` with variance `E/2`; floored shares plus one-unit remainders handed
/// out in descending weight order (ties to the earlier epoch).
pub fn budget_schedule(total: usize, epochs: usize) -> Result<BudgetSchedule> {
    if epochs == 0 {
        return Err(SelectionError::NoEpochs);
    }
    let half = epochs as f64 / 2.0;
    let weights: Vec<f64> = (1..=epochs)
        .map(|e| {
            let d = e as f64 - half;
            (-(d * d) / (2.0 * half)).exp()
        })
        .collect();
    let sum: f64 = weights.iter().sum();
    let mut per_epoch: Vec<usize> = weights
        .iter()
        .map(|w| (total as f64 * w / sum).floor() as usize)
        .collect();
    let mut order: Vec<usize> = (0..epochs).collect();
    order.sort_by(|&i, &j| weights[j].total_cmp(&weights[i]).then(i.cmp(&j)));

    let assigned: usize = per_epoch.iter().sum();
    match assigned.cmp(&total) {
        Ordering::Less => {
            for &e in order.iter().cycle().take(total - assigned) {
                per_epoch[e] += 1;
            }
        }
        Ordering::Greater => {
            let mut excess = assigned - total;
            for &e in order.iter().rev().cycle() {
                if excess == 0 {
                    break;
                }
                if per_epoch[e] > 0 {
                    per_epoch[e] -= 1;
                    excess -= 1;
                }
            }
        }
        Ordering::Equal => {}
    }
    Ok(BudgetSchedule { per_epoch })
}
