//! Retrieval metrics (mAP, CMC) and partition agreement (pairwise F1, NMI).

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clustering::squared_euclidean;
use crate::dataset::{DatasetError, EmbeddingDataset, LabelAccess};

#[derive(Debug, Error)]
pub enum EvaluationError {
    #[error("ranking has no relevant items")]
    NoRelevant,
    #[error("identity of query {0} does not appear in the gallery")]
    QueryWithoutMatch(usize),
    #[error("label vectors differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = EvaluationError> = std::result::Result<T, E>;

pub const CMC_RANKS: [usize; 3] = [1, 5, 10];

/// Ground-truth identities, for metric computation only.
pub fn true_identities(dataset: &EmbeddingDataset) -> Result<Vec<u32>> {
    Ok(dataset.identities(&LabelAccess::unlock())?)
}

pub fn average_precision(ranked_relevance: &[bool]) -> Result<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, &rel) in ranked_relevance.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    if hits == 0 {
        return Err(EvaluationError::NoRelevant);
    }
    Ok(sum / hits as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub map: f64,
    /// CMC rate keyed by rank.
    pub cmc: BTreeMap<usize, f64>,
}

/// Ranks the gallery for every query by ascending Euclidean distance (ties
/// by gallery id). Gallery items sharing the query's camera are dropped when
/// camera ids are supplied.
pub fn evaluate_retrieval(
    query: &[usize],
    gallery: &[usize],
    embeddings: &[Vec<f64>],
    identities: &[u32],
    cameras: Option<&[u32]>,
) -> Result<RetrievalMetrics> {
    let mut ap_sum = 0.0;
    let mut cmc_hits = vec![0usize; CMC_RANKS.len()];
    for &q in query {
        let mut ranked: Vec<(f64, usize)> = gallery
            .iter()
            .copied()
            .filter(|&g| g != q)
            .filter(|&g| cameras.is_none_or(|c| c[g] != c[q]))
            .map(|g| (squared_euclidean(&embeddings[q], &embeddings[g]), g))
            .collect();
        ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let relevance: Vec<bool> = ranked
            .iter()
            .map(|&(_, g)| identities[g] == identities[q])
            .collect();
        let first_hit = relevance
            .iter()
            .position(|&r| r)
            .ok_or(EvaluationError::QueryWithoutMatch(q))?;
        ap_sum += average_precision(&relevance)?;
        for (slot, &k) in CMC_RANKS.iter().enumerate() {
            if first_hit < k {
                cmc_hits[slot] += 1;
            }
        }
    }
    let nq = query.len().max(1) as f64;
    Ok(RetrievalMetrics {
        map: ap_sum / nq,
        cmc: CMC_RANKS
            .iter()
            .zip(&cmc_hits)
            .map(|(&k, &h)| (k, h as f64 / nq))
            .collect(),
    })
}

fn contingency(pred: &[Option<usize>], truth: &[u32]) -> Result<HashMap<(usize, u32), usize>> {
    if pred.len() != truth.len() {
        return Err(EvaluationError::LengthMismatch(pred.len(), truth.len()));
    }
    let mut table = HashMap::new();
    for (p, t) in pred.iter().zip(truth) {
        if let Some(p) = p {
            *table.entry((*p, *t)).or_insert(0) += 1;
        }
    }
    Ok(table)
}

fn marginals<K: std::hash::Hash + Eq + Copy>(
    table: &HashMap<(usize, u32), usize>,
    key: impl Fn(&(usize, u32)) -> K,
) -> HashMap<K, usize> {
    let mut out = HashMap::new();
    for (k, &n) in table {
        *out.entry(key(k)).or_insert(0) += n;
    }
    out
}

fn pairs(n: usize) -> f64 {
    (n * n.saturating_sub(1) / 2) as f64
}

/// F1 of same-cluster pairs against same-identity pairs; samples without a
/// predicted label are left out. No predicted or true pairs gives 0.
pub fn pairwise_f1(pred: &[Option<usize>], truth: &[u32]) -> Result<f64> {
    let table = contingency(pred, truth)?;
    let tp: f64 = table.values().map(|&n| pairs(n)).sum();
    let pred_pairs: f64 = marginals(&table, |k| k.0).values().map(|&n| pairs(n)).sum();
    let true_pairs: f64 = marginals(&table, |k| k.1).values().map(|&n| pairs(n)).sum();
    if tp == 0.0 || pred_pairs == 0.0 || true_pairs == 0.0 {
        return Ok(0.0);
    }
    let precision = tp / pred_pairs;
    let recall = tp / true_pairs;
    Ok(2.0 * precision * recall / (precision + recall))
}

/// NMI with arithmetic-mean normalization over samples that carry a
/// predicted label. Degenerate single-cluster partitions give 0.
pub fn nmi(pred: &[Option<usize>], truth: &[u32]) -> Result<f64> {
    let table = contingency(pred, truth)?;
    let n: usize = table.values().sum();
    if n == 0 {
        return Ok(0.0);
    }
    let n = n as f64;
    let row = marginals(&table, |k| k.0);
    let col = marginals(&table, |k| k.1);
    let h = |mut counts: Vec<usize>| -> f64 {
        counts.sort_unstable();
        counts
            .into_iter()
            .map(|c| {
                let p = c as f64 / n;
                -p * p.ln()
            })
            .sum()
    };
    let h_pred = h(row.values().copied().collect());
    let h_true = h(col.values().copied().collect());
    if h_pred == 0.0 || h_true == 0.0 {
        return Ok(0.0);
    }
    let mut entries: Vec<(&(usize, u32), &usize)> = table.iter().collect();
    entries.sort();
    let mi: f64 = entries
        .into_iter()
        .map(|(&(p, t), &c)| {
            let c = c as f64;
            c / n * (n * c / (row[&p] as f64 * col[&t] as f64)).ln()
        })
        .sum();
    Ok((2.0 * mi / (h_pred + h_true)).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub epoch: usize,
    pub budget_used: usize,
    pub num_clusters: usize,
    pub num_noise: usize,
    pub mean_loss: f64,
    pub map: Option<f64>,
    pub cmc: Option<BTreeMap<usize, f64>>,
    pub pairwise_f1: Option<f64>,
    pub nmi: Option<f64>,
}

pub fn write_report_json(reports: &[EvalReport], out: impl Write) -> Result<()> {
    serde_json::to_writer_pretty(out, reports).map_err(std::io::Error::from)?;
    Ok(())
}

/// `epoch,budget_used,map,cmc1,pairwise_f1,nmi,num_clusters` rows.
pub fn write_progress_csv(reports: &[EvalReport], mut out: impl Write) -> Result<()> {
    writeln!(
        out,
        "epoch,budget_used,map,cmc1,pairwise_f1,nmi,num_clusters"
    )?;
    let opt = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x}"));
    for r in reports {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.epoch,
            r.budget_used,
            opt(r.map),
            opt(r.cmc.as_ref().and_then(|c| c.get(&1).copied())),
            opt(r.pairwise_f1),
            opt(r.nmi),
            r.num_clusters
        )?;
    }
    Ok(())
}
